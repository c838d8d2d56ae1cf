"""Evaluation metrics (PSNR, SSIM) and per-directory report aggregation.

Inputs are clamped to [0, 1] before measurement; the dynamic range is 1.
Report field names are documented in docs/report_schema.md.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import load_image
from .errors import DatasetError
from .losses import DEFAULT_LOSS_CONFIG, LossConfig, mse_loss, ssim


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    """Accept a single CHW image or an NCHW batch."""
    return x.unsqueeze(0) if x.ndim == 3 else x


def psnr(s: torch.Tensor, y: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB over all channels jointly.

    Identical images have zero MSE; that case returns +inf, which report
    aggregation excludes (with a warning) to keep means finite.
    """
    s = _as_batch(s).detach().clamp(0.0, 1.0)
    y = _as_batch(y).detach().clamp(0.0, 1.0)
    mse = float(mse_loss(s, y))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim_metric(s: torch.Tensor, y: torch.Tensor,
                cfg: LossConfig = DEFAULT_LOSS_CONFIG) -> float:
    """Evaluation-mode SSIM: clamped inputs, no gradient tracking."""
    with torch.no_grad():
        return float(ssim(_as_batch(s).clamp(0.0, 1.0),
                          _as_batch(y).clamp(0.0, 1.0), cfg))


@dataclass
class EvalRecord:
    image_id: str
    psnr_db: float
    ssim: float
    stage: int = 2
    # reserved for external no-reference scores; never filled here
    niqe: float | None = None
    sseq: float | None = None

    def to_json(self) -> dict:
        row = {
            "image_id": self.image_id,
            "psnr_db": None if math.isinf(self.psnr_db) else self.psnr_db,
            "psnr_infinite": math.isinf(self.psnr_db),
            "ssim": self.ssim,
            "stage": self.stage,
            "niqe": self.niqe,
            "sseq": self.sseq,
        }
        return row


@dataclass
class EvalReport:
    """Per-image records plus aggregates; aggregates are plain means.

    Records with infinite PSNR are excluded from psnr_mean (each exclusion
    adds a warning); ssim_mean averages every record.
    """

    records: list[EvalRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.records)

    @property
    def psnr_mean(self) -> float:
        finite = [r.psnr_db for r in self.records if math.isfinite(r.psnr_db)]
        return sum(finite) / len(finite) if finite else math.nan

    @property
    def ssim_mean(self) -> float:
        if not self.records:
            return math.nan
        return sum(r.ssim for r in self.records) / len(self.records)

    def add(self, record: EvalRecord) -> None:
        if math.isinf(record.psnr_db):
            self.warnings.append(
                f"{record.image_id}: identical images, PSNR is infinite and "
                "excluded from the aggregate"
            )
        self.records.append(record)

    def aggregates(self) -> dict:
        mean_psnr = self.psnr_mean
        mean_ssim = self.ssim_mean
        return {
            "count": self.count,
            "psnr_mean": None if math.isnan(mean_psnr) else mean_psnr,
            "ssim_mean": None if math.isnan(mean_ssim) else mean_ssim,
            "warnings": list(self.warnings),
        }

    def to_jsonl(self, path) -> None:
        """One JSON record per line, then one {"aggregates": ...} line."""
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
            fh.write(json.dumps({"aggregates": self.aggregates()}, sort_keys=True) + "\n")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "psnr_db", "ssim", "stage", "niqe", "sseq"])
            for r in self.records:
                psnr_cell = "inf" if math.isinf(r.psnr_db) else f"{r.psnr_db:.6f}"
                writer.writerow([r.image_id, psnr_cell, f"{r.ssim:.6f}", r.stage,
                                 r.niqe if r.niqe is not None else "",
                                 r.sseq if r.sseq is not None else ""])
            agg = self.aggregates()
            writer.writerow([])
            writer.writerow(["mean", agg["psnr_mean"], agg["ssim_mean"], "", "", ""])
            writer.writerow(["count", agg["count"], "", "", "", ""])


def evaluate_pairs(pairs, stage: int = 2,
                   cfg: LossConfig = DEFAULT_LOSS_CONFIG) -> EvalReport:
    """Score an iterable of (image_id, prediction, ground truth) triples."""
    report = EvalReport()
    for image_id, pred, gt in pairs:
        if pred.shape != gt.shape:
            raise DatasetError(
                f"{image_id}: prediction {tuple(pred.shape)} vs ground truth "
                f"{tuple(gt.shape)}"
            )
        report.add(EvalRecord(image_id, psnr(pred, gt), ssim_metric(pred, gt, cfg), stage))
    return report


def evaluate_directory(pred_dir, gt_dir, stage: int = 2,
                       cfg: LossConfig = DEFAULT_LOSS_CONFIG) -> EvalReport:
    """Score matching filenames between two image directories.

    Files present on only one side are reported as warnings, not errors;
    an image that fails to decode is fatal and names the file. Records are
    ordered by filename.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred_names = {p.name for p in pred_dir.iterdir() if p.is_file()}
    gt_names = {p.name for p in gt_dir.iterdir() if p.is_file()}
    common = sorted(pred_names & gt_names)

    report = EvalReport()
    for name in sorted(pred_names - gt_names):
        report.warnings.append(f"{name}: present only in {pred_dir}")
    for name in sorted(gt_names - pred_names):
        report.warnings.append(f"{name}: present only in {gt_dir}")
    if not common:
        report.warnings.append("no matching filenames between the two directories")
        return report

    for name in common:
        pred = load_image(pred_dir / name)
        gt = load_image(gt_dir / name)
        if pred.shape != gt.shape:
            raise DatasetError(
                f"{name}: size mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}"
            )
        report.add(EvalRecord(name, psnr(pred, gt), ssim_metric(pred, gt, cfg), stage))
    return report
