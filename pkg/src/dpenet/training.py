"""Optimization loop: batching, hybrid objective, Adam with milestone decay.

Every source of randomness is a pure function of (seed, epoch, step), so a
run is reproducible from its config alone and resuming from an epoch
checkpoint continues the exact trajectory (64-bit mode, prefetch off or on;
prefetch only overlaps compute, it never reorders batches).
"""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import PairedDataset, epoch_permutation, random_crop_pair
from .errors import ConfigError, TrainingDivergedError
from .losses import LOSS_FUNCTIONS, LossConfig
from .metrics import psnr, ssim_metric
from .networks import (
    DPENet,
    NetworkConfig,
    build_dpenet,
    load_checkpoint,
    save_checkpoint,
)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and loop knobs.

    Milestones are stored as fractions of the total epoch count so scaled-
    down runs keep the schedule shape; the defaults decay the learning rate
    by 0.2 after epochs 130, 150 and 180 of a 200-epoch run.
    """

    epochs: int = 200
    batch_size: int = 18
    patch_size: int = 128
    base_lr: float = 1e-3
    lr_decay: float = 0.2
    milestone_fractions: tuple[float, ...] = (0.65, 0.75, 0.90)
    loss: str = "hybrid"
    deep_supervision: bool = True
    seed: int = 0
    precision: int = 32
    checkpoint_every: int = 50
    log_every: int = 1
    eval_every: int = 1
    prefetch: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.patch_size < 1:
            raise ConfigError("train.patch_size must be >= 1")
        if self.loss not in LOSS_FUNCTIONS:
            raise ConfigError(f"train.loss must be one of {sorted(LOSS_FUNCTIONS)}")
        if self.precision not in (32, 64):
            raise ConfigError("train.precision must be 32 or 64")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("train.checkpoint_every and train.log_every must be >= 1")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == 64 else torch.float32


def scaled_milestones(cfg: TrainConfig) -> tuple[int, ...]:
    """Milestone epochs for this run; must be strictly increasing and < epochs."""
    epochs = [int(round(f * cfg.epochs)) for f in cfg.milestone_fractions]
    for prev, cur in zip(epochs, epochs[1:]):
        if cur <= prev:
            raise ConfigError(
                f"train.milestone_fractions scale to non-increasing epochs {epochs}"
            )
    if epochs and epochs[-1] >= cfg.epochs:
        raise ConfigError(
            f"train.milestone_fractions scale to {epochs}, beyond {cfg.epochs} epochs"
        )
    return tuple(epochs)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """base_lr * lr_decay^k, k = number of milestones at or before `epoch`.

    Epochs are 0-based: a milestone m means "decayed once m full epochs are
    done", so the new rate applies from epoch index m onward.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    passed = sum(1 for m in scaled_milestones(cfg) if m <= epoch)
    return cfg.base_lr * cfg.lr_decay ** passed


@dataclass
class TrainLog:
    """Step and eval records; optionally mirrored to an append-only JSONL file."""

    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, record: dict) -> None:
        (self.evals if record.get("kind") == "eval" else self.steps).append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.steps]


def load_train_log(path) -> TrainLog:
    log = TrainLog()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            record = json.loads(line)
            (log.evals if record.get("kind") == "eval" else log.steps).append(record)
    return log


def moving_average(values, window: int) -> list[float]:
    """Trailing mean over `window` samples; defined from index window-1 on."""
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        if i >= window - 1:
            out.append(acc / window)
    return out


def make_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def make_batch(dataset: PairedDataset, order: np.ndarray, cfg: TrainConfig,
               epoch: int, step_in_epoch: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Assemble one cropped batch; content depends only on (seed, epoch, step)."""
    start = step_in_epoch * cfg.batch_size
    indices = order[start:start + cfg.batch_size]
    rainy_patches, clean_patches = [], []
    for slot, idx in enumerate(indices):
        rainy, clean = dataset.load_pair(dataset.ids[int(idx)])
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch, step_in_epoch, slot])
        )
        rp, cp = random_crop_pair(rainy, clean, cfg.patch_size, rng)
        rainy_patches.append(rp)
        clean_patches.append(cp)
    dtype = cfg.dtype
    return torch.stack(rainy_patches).to(dtype), torch.stack(clean_patches).to(dtype)


def _batch_stream(dataset, cfg, epoch, steps_per_epoch):
    order = epoch_permutation(len(dataset), epoch, cfg.seed)
    plain = (
        (step, make_batch(dataset, order, cfg, epoch, step))
        for step in range(steps_per_epoch)
    )
    if cfg.prefetch <= 0:
        yield from plain
        return
    # bounded prefetch: overlaps decode/crop with the optimizer step
    q: queue.Queue = queue.Queue(maxsize=cfg.prefetch)
    done = object()

    def worker():
        for item in plain:
            q.put(item)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        yield item


def train_step(model: DPENet, optimizer: torch.optim.Optimizer,
               batch: tuple[torch.Tensor, torch.Tensor], cfg: TrainConfig,
               loss_cfg: LossConfig, step: int = 0, epoch: int = 0) -> dict:
    """One gradient step on loss(s, y) [+ loss(s_c, y) under deep supervision].

    Returns the step record; raises TrainingDivergedError on a non-finite
    loss, before any parameter update.
    """
    started = time.perf_counter()
    rainy, clean = batch
    loss_fn = LOSS_FUNCTIONS[cfg.loss]
    coarse, refined = model(rainy)
    loss_refined = loss_fn(refined, clean, loss_cfg)
    components = {"stage2": loss_refined.detach().item()}
    total = loss_refined
    if cfg.deep_supervision:
        loss_coarse = loss_fn(coarse, clean, loss_cfg)
        components["stage1"] = loss_coarse.detach().item()
        total = total + loss_coarse
    lr = optimizer.param_groups[0]["lr"]
    if not math.isfinite(total.detach().item()):
        raise TrainingDivergedError(
            f"non-finite loss at step {step} (epoch {epoch}, lr {lr:g}): {components}"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return {
        "kind": "step",
        "step": step,
        "epoch": epoch,
        "lr": lr,
        "loss": total.detach().item(),
        "components": components,
        "seconds": time.perf_counter() - started,
    }


def _optimizer_tensors(model: DPENet, optimizer: torch.optim.Optimizer) -> tuple[dict, int]:
    tensors: dict[str, torch.Tensor] = {}
    step_count = 0
    for name, param in model.named_parameters():
        state = optimizer.state.get(param)
        if not state:
            continue
        tensors[f"opt.{name}.exp_avg"] = state["exp_avg"]
        tensors[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"]
        step_count = int(state["step"])
    return tensors, step_count


def _restore_optimizer(model: DPENet, optimizer: torch.optim.Optimizer,
                       state: dict, adam_step: int) -> None:
    for name, param in model.named_parameters():
        avg_key = f"opt.{name}.exp_avg"
        if avg_key not in state:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(adam_step)),
            "exp_avg": state[avg_key].to(param.dtype),
            "exp_avg_sq": state[f"opt.{name}.exp_avg_sq"].to(param.dtype),
        }


def save_training_checkpoint(path, model: DPENet, optimizer, train_cfg: TrainConfig,
                             epochs_done: int, global_step: int) -> None:
    state = dict(model.state_dict())
    opt_tensors, adam_step = _optimizer_tensors(model, optimizer)
    state.update(opt_tensors)
    extra = {
        "epochs_done": epochs_done,
        "global_step": global_step,
        "adam_step": adam_step,
        "train_config": asdict(train_cfg),
    }
    save_checkpoint(path, state, model.config, extra)


def fit(dataset: PairedDataset, net_cfg: NetworkConfig, cfg: TrainConfig,
        out_dir=None, eval_dataset: PairedDataset | None = None,
        loss_cfg: LossConfig | None = None, resume_from=None
        ) -> tuple[DPENet, TrainLog]:
    """Run the full loop: epochs x ceil(N / batch) steps, log, checkpoint.

    With out_dir set, writes log.jsonl (append-only), periodic epoch
    checkpoints and final.dpck. resume_from continues from a training
    checkpoint saved by this function; in 64-bit mode the resumed loss
    trajectory is identical to an uninterrupted run.
    """
    scaled_milestones(cfg)  # fail fast on a bad schedule
    loss_cfg = loss_cfg or LossConfig()
    torch.manual_seed(cfg.seed)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)

    out_dir = Path(out_dir) if out_dir is not None else None
    log = TrainLog(path=out_dir / "log.jsonl" if out_dir else None)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        state, loaded_cfg, extra = load_checkpoint(resume_from, expected_config=net_cfg)
        model = DPENet(loaded_cfg).to(cfg.dtype)
        model.load_state_dict(
            {k: v.to(cfg.dtype) for k, v in state.items() if not k.startswith("opt.")}
        )
        optimizer = make_optimizer(model, cfg.base_lr)
        _restore_optimizer(model, optimizer, state, extra["adam_step"])
        start_epoch = extra["epochs_done"]
        global_step = extra["global_step"]
    else:
        model = build_dpenet(net_cfg, cfg.seed, cfg.dtype)
        optimizer = make_optimizer(model, cfg.base_lr)

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for step_in_epoch, batch in _batch_stream(dataset, cfg, epoch, steps_per_epoch):
            record = train_step(model, optimizer, batch, cfg, loss_cfg,
                                step=global_step, epoch=epoch)
            global_step += 1
            if global_step % cfg.log_every == 0:
                log.append(record)

        if eval_dataset is not None and (epoch + 1) % cfg.eval_every == 0:
            log.append(_eval_snapshot(model, eval_dataset, epoch, global_step))

        last_epoch = epoch == cfg.epochs - 1
        if out_dir and ((epoch + 1) % cfg.checkpoint_every == 0 or last_epoch):
            save_training_checkpoint(out_dir / f"epoch_{epoch + 1:04d}.dpck",
                                     model, optimizer, cfg, epoch + 1, global_step)

    if out_dir:
        save_training_checkpoint(out_dir / "final.dpck", model, optimizer, cfg,
                                 cfg.epochs, global_step)
    return model, log


def _eval_snapshot(model: DPENet, dataset: PairedDataset, epoch: int,
                   global_step: int) -> dict:
    psnrs, ssims = [], []
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for image_id in dataset.ids:
            rainy, clean = dataset.load_pair(image_id)
            _, refined = model(rainy.unsqueeze(0).to(dtype))
            value = psnr(refined[0], clean.to(dtype))
            if math.isfinite(value):
                psnrs.append(value)
            ssims.append(ssim_metric(refined[0], clean.to(dtype)))
    return {
        "kind": "eval",
        "epoch": epoch,
        "step": global_step,
        "psnr": sum(psnrs) / len(psnrs) if psnrs else math.nan,
        "ssim": sum(ssims) / len(ssims) if ssims else math.nan,
    }
