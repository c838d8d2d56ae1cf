"""Operator entry point: train, eval, infer, analyze, ablate, synthesize.

Config precedence is built-in defaults < config file (YAML, sections
network/train/loss/synth) < command-line flags. Every run directory gets
exactly one manifest.json holding the fully resolved config; feeding a
manifest back through --config reproduces the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import torch
import yaml

from . import __version__
from .analysis import count_params, estimate_flops, format_analysis_report
from .data import PairedDataset, SynthRainConfig, load_image, save_image, write_synthetic_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .losses import LOSS_FUNCTIONS, LossConfig
from .metrics import EvalRecord, EvalReport, psnr, ssim_metric
from .networks import NetworkConfig, load_model
from .training import TrainConfig, fit

EXIT_CODES = {
    ConfigError: 2,
    DatasetError: 3,
    CheckpointError: 4,
    TrainingDivergedError: 5,
    ShapeMismatchError: 6,
}

ARCHITECTURE_LEGS = {
    # stage-1-only variants, then the detail stage with plain / enhanced attention
    "rb": {"stage1_block": "rb", "use_drnet": False},
    "drb": {"stage1_block": "drb", "use_drnet": False},
    "ddrb": {"stage1_block": "ddrb", "use_drnet": False},
    "ddrb_pab": {"stage1_block": "ddrb", "use_drnet": True, "stage2_block": "pab"},
    "ddrb_erpab": {"stage1_block": "ddrb", "use_drnet": True, "stage2_block": "erpab"},
}
LOSS_LEGS = ("mse", "edge", "ssim", "ssim_mse", "hybrid")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""

    def write(self, out_dir: Path) -> None:
        with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def load_config_file(path) -> dict:
    """YAML (or JSON) config; a run manifest is accepted and unwrapped."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    if "command" in data and "config" in data:
        data = data["config"]
    return data


def _coerce(cls, key: str, value):
    for f in dataclasses.fields(cls):
        if f.name == key and isinstance(f.default, tuple) and isinstance(value, list):
            return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def merge_config(cls, section: str, file_cfg: dict, overrides: dict):
    """Build one dataclass config from file section plus CLI overrides."""
    valid = {f.name for f in dataclasses.fields(cls)}
    data = {}
    for key, value in (file_cfg.get(section) or {}).items():
        if key not in valid:
            raise ConfigError(f"unknown field {section}.{key}")
        data[key] = _coerce(cls, key, value)
    for key, value in overrides.items():
        if value is not None:
            data[key] = _coerce(cls, key, value)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid {section} config: {exc}") from exc


def _file_cfg(args) -> dict:
    return load_config_file(args.config) if args.config else {}


def _network_overrides(args) -> dict:
    keys = ("num_ddrb", "num_erpab", "channels", "stage1_block", "stage2_block",
            "squash_attention")
    out = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "no_drnet", False):
        out["use_drnet"] = False
    return out


def _train_overrides(args) -> dict:
    keys = ("epochs", "batch_size", "patch_size", "base_lr", "loss",
            "checkpoint_every", "eval_every", "prefetch", "precision", "seed")
    out = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "milestones", None) is not None:
        text = args.milestones.strip()
        out["milestone_fractions"] = tuple(
            float(v) for v in text.split(",") if v
        ) if text else ()
    if getattr(args, "deep_supervision", None) is not None:
        out["deep_supervision"] = args.deep_supervision
    return out


def _loss_overrides(args) -> dict:
    return {k: getattr(args, k, None) for k in ("edge_weight", "mse_weight")}


def _resolve_out(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path("runs") / f"{command}_{time.strftime('%Y%m%d-%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_determinism(args) -> None:
    if getattr(args, "deterministic", False):
        torch.use_deterministic_algorithms(True)


def _dtype(args) -> torch.dtype:
    return torch.float64 if getattr(args, "precision", None) == 64 else torch.float32


def _run_training(out_dir: Path, data_dir, eval_dir, net_cfg: NetworkConfig,
                  train_cfg: TrainConfig, loss_cfg: LossConfig,
                  resume_from=None) -> dict:
    if not Path(data_dir).exists():
        raise ConfigError(f"train.data path does not exist: {data_dir}")
    dataset = PairedDataset(data_dir)
    eval_dataset = PairedDataset(eval_dir) if eval_dir else None

    manifest = RunManifest(
        command="train",
        config={"network": asdict(net_cfg), "train": asdict(train_cfg),
                "loss": asdict(loss_cfg)},
        seed=train_cfg.seed,
        inputs={"data": str(data_dir), "eval_data": str(eval_dir) if eval_dir else None,
                "resume_from": str(resume_from) if resume_from else None},
        outputs={"run_dir": str(out_dir)},
        started_at=_now(),
    )
    manifest.write(out_dir)
    model, log = fit(dataset, net_cfg, train_cfg, out_dir=out_dir,
                     eval_dataset=eval_dataset, loss_cfg=loss_cfg,
                     resume_from=resume_from)
    manifest.finished_at = _now()
    manifest.write(out_dir)
    final_loss = log.steps[-1]["loss"] if log.steps else None
    return {"run_dir": out_dir, "final_loss": final_loss, "model": model, "log": log}


def cmd_train(args) -> int:
    _apply_determinism(args)
    if not args.data:
        raise ConfigError("train requires --data pointing at a paired dataset")
    file_cfg = _file_cfg(args)
    net_cfg = merge_config(NetworkConfig, "network", file_cfg, _network_overrides(args))
    train_cfg = merge_config(TrainConfig, "train", file_cfg, _train_overrides(args))
    loss_cfg = merge_config(LossConfig, "loss", file_cfg, _loss_overrides(args))
    out_dir = _resolve_out(args, "train")
    result = _run_training(out_dir, args.data, args.eval_data, net_cfg, train_cfg,
                           loss_cfg, resume_from=args.resume)
    print(f"run dir: {result['run_dir']}")
    if result["final_loss"] is not None:
        print(f"final loss: {result['final_loss']:.6f}")
    return 0


def _stage_reports(model, dataset: PairedDataset, dtype) -> tuple[EvalReport, EvalReport]:
    stage1, stage2 = EvalReport(), EvalReport()
    with torch.no_grad():
        for image_id in dataset.ids:
            rainy, clean = dataset.load_pair(image_id)
            coarse, refined = model(rainy.unsqueeze(0).to(dtype))
            clean = clean.to(dtype)
            stage1.add(EvalRecord(image_id, psnr(coarse[0], clean),
                                  ssim_metric(coarse[0], clean), stage=1))
            stage2.add(EvalRecord(image_id, psnr(refined[0], clean),
                                  ssim_metric(refined[0], clean), stage=2))
    return stage1, stage2


def cmd_eval(args) -> int:
    _apply_determinism(args)
    if not Path(args.data).exists():
        raise ConfigError(f"eval --data path does not exist: {args.data}")
    dtype = _dtype(args)
    model, _ = load_model(args.checkpoint, dtype=dtype)
    dataset = PairedDataset(args.data)
    out_dir = _resolve_out(args, "eval")

    manifest = RunManifest(
        command="eval",
        config={"network": asdict(model.config)},
        seed=args.seed if args.seed is not None else 0,
        inputs={"checkpoint": str(args.checkpoint), "data": str(args.data)},
        outputs={"run_dir": str(out_dir)},
        started_at=_now(),
    )
    stage1, stage2 = _stage_reports(model, dataset, dtype)
    for stage, report in ((1, stage1), (2, stage2)):
        report.to_jsonl(out_dir / f"eval_stage{stage}.jsonl")
        report.to_csv(out_dir / f"eval_stage{stage}.csv")
        agg = report.aggregates()
        psnr_txt = "inf-only" if agg["psnr_mean"] is None else f"{agg['psnr_mean']:.3f}"
        print(f"stage {stage}: psnr {psnr_txt} dB, ssim {agg['ssim_mean']:.4f}, "
              f"n={agg['count']}")
    manifest.finished_at = _now()
    manifest.write(out_dir)
    return 0


def _collect_inputs(paths) -> list[Path]:
    files: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.is_file()))
        elif p.is_file():
            files.append(p)
        else:
            raise DatasetError(f"input path does not exist: {p}")
    if not files:
        raise DatasetError("no input images found")
    return files


def cmd_infer(args) -> int:
    _apply_determinism(args)
    dtype = _dtype(args)
    model, _ = load_model(args.checkpoint, dtype=dtype)
    files = _collect_inputs(args.input)
    out_dir = _resolve_out(args, "infer")
    stage1_dir = None
    if args.save_stage1:
        stage1_dir = out_dir / "stage1"
        stage1_dir.mkdir(exist_ok=True)

    manifest = RunManifest(
        command="infer",
        config={"network": asdict(model.config)},
        seed=args.seed if args.seed is not None else 0,
        inputs={"checkpoint": str(args.checkpoint),
                "images": [str(f) for f in files]},
        outputs={"run_dir": str(out_dir)},
        started_at=_now(),
    )
    with torch.no_grad():
        for path in files:
            image = load_image(path, dtype)
            coarse, refined = model(image.unsqueeze(0))
            save_image(refined[0], out_dir / path.name)
            if stage1_dir is not None:
                save_image(coarse[0], stage1_dir / path.name)
    manifest.finished_at = _now()
    manifest.write(out_dir)
    print(f"wrote {len(files)} images to {out_dir}")
    return 0


def cmd_analyze(args) -> int:
    file_cfg = _file_cfg(args)
    net_cfg = merge_config(NetworkConfig, "network", file_cfg, _network_overrides(args))
    size = (args.height, args.width)
    report = format_analysis_report(net_cfg, size)
    print(report)
    if args.out:
        out_dir = _resolve_out(args, "analyze")
        (out_dir / "analysis.txt").write_text(report + "\n", encoding="utf-8")
        est = estimate_flops(net_cfg, size)
        summary = {
            "params": count_params(net_cfg),
            "conv_macs": est.conv_macs,
            "multiply_add_total": est.multiply_add_total,
            "bias_adds": est.bias_adds,
            "skip_adds": est.skip_adds,
            "attention_mults": est.attention_mults,
            "activation_ops": est.activation_ops,
            "input_size": [args.height, args.width],
        }
        with open(out_dir / "analysis.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        manifest = RunManifest(
            command="analyze",
            config={"network": asdict(net_cfg)},
            seed=args.seed if args.seed is not None else 0,
            outputs={"run_dir": str(out_dir)},
            started_at=_now(),
            finished_at=_now(),
        )
        manifest.write(out_dir)
    return 0


def cmd_ablate(args) -> int:
    _apply_determinism(args)
    if not args.data:
        raise ConfigError("ablate requires --data pointing at a paired dataset")
    file_cfg = _file_cfg(args)
    base_net = merge_config(NetworkConfig, "network", file_cfg, _network_overrides(args))
    base_train = merge_config(TrainConfig, "train", file_cfg, _train_overrides(args))
    loss_cfg = merge_config(LossConfig, "loss", file_cfg, _loss_overrides(args))
    out_dir = _resolve_out(args, "ablate")

    if args.suite == "architecture":
        legs = [(name, dataclasses.replace(base_net, **changes), base_train)
                for name, changes in ARCHITECTURE_LEGS.items()]
    else:
        legs = [(name, base_net, dataclasses.replace(base_train, loss=name))
                for name in LOSS_LEGS]

    rows = []
    for name, net_cfg, train_cfg in legs:
        leg_dir = out_dir / name
        leg_dir.mkdir(parents=True, exist_ok=True)
        result = _run_training(leg_dir, args.data, args.eval_data, net_cfg,
                               train_cfg, loss_cfg)
        dataset = PairedDataset(args.eval_data or args.data)
        stage1, stage2 = _stage_reports(result["model"], dataset, train_cfg.dtype)
        agg = stage2.aggregates()
        rows.append({
            "leg": name,
            "params": count_params(net_cfg),
            "psnr": agg["psnr_mean"],
            "ssim": agg["ssim_mean"],
        })

    with open(out_dir / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write("leg,params,psnr,ssim\n")
        for row in rows:
            psnr_txt = "" if row["psnr"] is None else f"{row['psnr']:.4f}"
            fh.write(f"{row['leg']},{row['params']},{psnr_txt},{row['ssim']:.4f}\n")
    manifest = RunManifest(
        command="ablate",
        config={"suite": args.suite, "legs": [r["leg"] for r in rows],
                "network": asdict(base_net), "train": asdict(base_train),
                "loss": asdict(loss_cfg)},
        seed=base_train.seed,
        inputs={"data": str(args.data)},
        outputs={"run_dir": str(out_dir)},
        started_at=_now(),
        finished_at=_now(),
    )
    manifest.write(out_dir)
    print(f"{'leg':12s} {'params':>9s} {'psnr':>8s} {'ssim':>7s}")
    for row in rows:
        psnr_txt = "   inf" if row["psnr"] is None else f"{row['psnr']:6.2f}"
        print(f"{row['leg']:12s} {row['params']:>9d} {psnr_txt:>8s} {row['ssim']:7.4f}")
    return 0


def cmd_synthesize(args) -> int:
    file_cfg = _file_cfg(args)
    overrides = {
        "veil_strength": args.veil_strength,
        "atmospheric_light": args.atmospheric_light,
        "streak_width": args.streak_width,
        "seed": args.seed,
    }
    if args.num_streaks is not None:
        overrides["num_streaks"] = tuple(args.num_streaks)
    synth_cfg = merge_config(SynthRainConfig, "synth", file_cfg, overrides)
    out_dir = _resolve_out(args, "synthesize")
    write_synthetic_dataset(out_dir, args.count, (args.height, args.width),
                            synth_cfg, clean_source=args.clean_source)
    manifest = RunManifest(
        command="synthesize",
        config={"synth": asdict(synth_cfg),
                "count": args.count, "height": args.height, "width": args.width},
        seed=synth_cfg.seed,
        inputs={"clean_source": str(args.clean_source) if args.clean_source else None},
        outputs={"run_dir": str(out_dir)},
        started_at=_now(),
        finished_at=_now(),
    )
    manifest.write(out_dir)
    print(f"wrote {args.count} pairs to {out_dir}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file (or a run manifest)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--deterministic", action="store_true",
                        help="force deterministic torch kernels")
    parser.add_argument("--precision", type=int, choices=(32, 64), default=None)
    parser.add_argument("--out", help="output / run directory")


def _add_network_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--num-ddrb", dest="num_ddrb", type=int, default=None)
    parser.add_argument("--num-erpab", dest="num_erpab", type=int, default=None)
    parser.add_argument("--channels", type=int, default=None)
    parser.add_argument("--stage1-block", dest="stage1_block",
                        choices=("rb", "drb", "ddrb"), default=None)
    parser.add_argument("--stage2-block", dest="stage2_block",
                        choices=("pab", "erpab"), default=None)
    parser.add_argument("--no-drnet", dest="no_drnet", action="store_true")
    parser.add_argument("--squash-attention", dest="squash_attention",
                        action="store_const", const=True, default=None)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="paired dataset root (rain/ + norain/)")
    parser.add_argument("--eval-data", dest="eval_data", default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--patch-size", dest="patch_size", type=int, default=None)
    parser.add_argument("--base-lr", dest="base_lr", type=float, default=None)
    parser.add_argument("--milestones", default=None,
                        help="comma-separated epoch fractions, empty to disable decay")
    parser.add_argument("--loss", choices=sorted(LOSS_FUNCTIONS), default=None)
    parser.add_argument("--edge-weight", dest="edge_weight", type=float, default=None)
    parser.add_argument("--mse-weight", dest="mse_weight", type=float, default=None)
    parser.add_argument("--deep-supervision", dest="deep_supervision",
                        action="store_const", const=True, default=None)
    parser.add_argument("--no-deep-supervision", dest="deep_supervision",
                        action="store_const", const=False)
    parser.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                        default=None)
    parser.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    parser.add_argument("--prefetch", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpenet",
        description="two-stage deraining: train, evaluate, infer, analyze, ablate, synthesize",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a paired dataset")
    _add_common(p_train)
    _add_network_flags(p_train)
    _add_train_flags(p_train)
    p_train.add_argument("--resume", default=None,
                         help="training checkpoint to continue from")
    p_train.set_defaults(handler=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a paired dataset")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.set_defaults(handler=cmd_eval)

    p_infer = sub.add_parser("infer", help="derain images with a checkpoint")
    _add_common(p_infer)
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--input", nargs="+", required=True,
                         help="image files or directories")
    p_infer.add_argument("--save-stage1", dest="save_stage1", action="store_true",
                         help="also write the coarse stage-1 outputs")
    p_infer.set_defaults(handler=cmd_infer)

    p_analyze = sub.add_parser("analyze", help="static receptive-field/param/FLOP report")
    _add_common(p_analyze)
    _add_network_flags(p_analyze)
    p_analyze.add_argument("--height", type=int, default=256)
    p_analyze.add_argument("--width", type=int, default=256)
    p_analyze.set_defaults(handler=cmd_analyze)

    p_ablate = sub.add_parser("ablate", help="run an ablation suite")
    _add_common(p_ablate)
    _add_network_flags(p_ablate)
    _add_train_flags(p_ablate)
    p_ablate.add_argument("--suite", choices=("architecture", "loss"),
                          required=True)
    p_ablate.set_defaults(handler=cmd_ablate)

    p_synth = sub.add_parser("synthesize", help="write a synthetic paired dataset")
    _add_common(p_synth)
    p_synth.add_argument("--count", type=int, default=8)
    p_synth.add_argument("--height", type=int, default=64)
    p_synth.add_argument("--width", type=int, default=64)
    p_synth.add_argument("--num-streaks", dest="num_streaks", type=int, nargs=2,
                         default=None, metavar=("LO", "HI"))
    p_synth.add_argument("--veil-strength", dest="veil_strength", type=float,
                         default=None)
    p_synth.add_argument("--atmospheric-light", dest="atmospheric_light", type=float,
                         default=None)
    p_synth.add_argument("--streak-width", dest="streak_width", type=int, default=None)
    p_synth.add_argument("--clean-source", dest="clean_source", default=None,
                         help="directory of clean images to rain on")
    p_synth.set_defaults(handler=cmd_synthesize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except tuple(EXIT_CODES) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        for kind, code in EXIT_CODES.items():
            if isinstance(exc, kind):
                return code
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
