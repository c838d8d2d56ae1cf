"""Paired-dataset ingestion, patch cropping, and a synthetic rain generator.

Dataset layout: a root directory with `rain/` and `norain/` subdirectories
holding identical filename sets (8-bit RGB PNG required, other formats best
effort). A JSON manifest listing explicit pairs is accepted as an
alternative. All tensors leave this module as float CHW values in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError


def load_image(path, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Decode one image to a CHW tensor in [0, 1] (255 maps to exactly 1.0)."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous().to(dtype)


def save_image(tensor: torch.Tensor, path) -> None:
    """Clamp to [0, 1], quantize to 8 bits (round half up), write PNG."""
    arr = tensor.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8)
    arr = arr.permute(1, 2, 0).cpu().numpy()
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


class PairedDataset:
    """Rainy/clean image pairs matched by filename (or an explicit manifest).

    Iteration order is the sorted id list, so epochs are reproducible.
    With cache=True decoded pairs stay in memory (meant for small fixture
    sets, not benchmark-scale data).
    """

    def __init__(self, root, manifest=None, cache: bool = False):
        self.root = Path(root)
        self.cache_enabled = cache
        self._cache: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        if manifest is not None:
            with open(manifest, encoding="utf-8") as fh:
                entries = json.load(fh)
            self._paths = {
                e["id"]: (self.root / e["rain"], self.root / e["norain"])
                for e in entries
            }
        else:
            rain_dir = self.root / "rain"
            norain_dir = self.root / "norain"
            if not rain_dir.is_dir() or not norain_dir.is_dir():
                raise DatasetError(f"{self.root} must contain rain/ and norain/")
            rain = {p.name for p in rain_dir.iterdir() if p.is_file()}
            norain = {p.name for p in norain_dir.iterdir() if p.is_file()}
            if rain != norain:
                odd = sorted(rain.symmetric_difference(norain))
                raise DatasetError(f"unpaired files under {self.root}: {odd}")
            self._paths = {name: (rain_dir / name, norain_dir / name) for name in rain}
        self.ids = sorted(self._paths)
        if not self.ids:
            raise DatasetError(f"no image pairs found under {self.root}")

    def __len__(self) -> int:
        return len(self.ids)

    def load_pair(self, image_id: str) -> tuple[torch.Tensor, torch.Tensor]:
        """(rainy, clean) CHW tensors; sizes must agree."""
        if self.cache_enabled and image_id in self._cache:
            return self._cache[image_id]
        if image_id not in self._paths:
            raise DatasetError(f"no pair with id {image_id!r} under {self.root}")
        rain_path, norain_path = self._paths[image_id]
        rainy = load_image(rain_path)
        clean = load_image(norain_path)
        if rainy.shape != clean.shape:
            raise DatasetError(
                f"{image_id}: rainy {tuple(rainy.shape)} vs clean {tuple(clean.shape)}"
            )
        if self.cache_enabled:
            self._cache[image_id] = (rainy, clean)
        return rainy, clean


def epoch_permutation(n: int, epoch: int, seed: int) -> np.ndarray:
    """Shuffle order for one epoch; a pure function of (epoch, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return rng.permutation(n)


def random_crop_pair(rainy: torch.Tensor, clean: torch.Tensor, size: int,
                     rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Crop the same size x size window from both images.

    Images smaller than the patch are rejected rather than padded; padding
    would fabricate content the loss then scores.
    """
    height, width = rainy.shape[-2:]
    if height < size or width < size:
        raise DatasetError(f"image {height}x{width} smaller than patch {size}")
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return (
        rainy[..., top:top + size, left:left + size],
        clean[..., top:top + size, left:left + size],
    )


@dataclass(frozen=True)
class SynthRainConfig:
    """Knobs of the synthetic streak-plus-veiling rain model.

    Streaks are bright line segments; veiling mixes the streaked image
    toward a flat atmospheric level: out = streaked*(1-veil) + light*veil.
    All ranges are inclusive; outputs are clamped to [0, 1].
    """

    num_streaks: tuple[int, int] = (40, 90)
    length_range: tuple[float, float] = (8.0, 22.0)
    angle_range_deg: tuple[float, float] = (70.0, 110.0)
    intensity_range: tuple[float, float] = (0.15, 0.45)
    streak_width: int = 1
    veil_strength: float = 0.1
    atmospheric_light: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_streaks", "length_range", "angle_range_deg", "intensity_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: ({lo}, {hi})")
        if not 0.0 <= self.veil_strength < 1.0:
            raise ValueError("veil_strength must lie in [0, 1)")
        if not 0.0 <= self.atmospheric_light <= 1.0:
            raise ValueError("atmospheric_light must lie in [0, 1]")
        if self.streak_width < 1:
            raise ValueError("streak_width must be >= 1")


def _render_streaks(height: int, width: int, cfg: SynthRainConfig,
                    rng: np.random.Generator) -> np.ndarray:
    canvas = np.zeros((height, width), dtype=np.float32)
    count = int(rng.integers(cfg.num_streaks[0], cfg.num_streaks[1] + 1))
    for _ in range(count):
        y0 = rng.uniform(0, height)
        x0 = rng.uniform(0, width)
        length = rng.uniform(*cfg.length_range)
        angle = np.deg2rad(rng.uniform(*cfg.angle_range_deg))
        intensity = rng.uniform(*cfg.intensity_range)
        steps = max(2, int(length * 2))
        t = np.linspace(0.0, 1.0, steps)
        ys = y0 + np.sin(angle) * length * t
        xs = x0 + np.cos(angle) * length * t
        # widen perpendicular to the streak direction
        for k in range(cfg.streak_width):
            shift = k - (cfg.streak_width - 1) / 2.0
            yy = np.round(ys + np.cos(angle) * shift).astype(int)
            xx = np.round(xs - np.sin(angle) * shift).astype(int)
            keep = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
            np.maximum.at(canvas, (yy[keep], xx[keep]), intensity)
    return canvas


def synthesize_rain(clean: torch.Tensor, cfg: SynthRainConfig,
                    seed: int | None = None) -> torch.Tensor:
    """Overlay achromatic streaks and veiling on a clean [0, 1] image.

    Deterministic for a given (cfg, seed); `seed` overrides cfg.seed so a
    dataset generator can vary rain per image under one config.
    """
    height, width = clean.shape[-2:]
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    streaks = torch.from_numpy(_render_streaks(height, width, cfg, rng)).to(clean.dtype)
    rainy = (clean + streaks.unsqueeze(0)).clamp(0.0, 1.0)
    if cfg.veil_strength > 0.0:
        rainy = rainy * (1.0 - cfg.veil_strength) + cfg.atmospheric_light * cfg.veil_strength
    return rainy.clamp(0.0, 1.0)


def make_clean_image(height: int, width: int, rng: np.random.Generator,
                     dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Procedural clean image: smooth color field plus a few soft shapes.

    Gives the detail stage actual structure (edges, gradients) to restore,
    without shipping any photographs.
    """
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    img = np.zeros((3, height, width), dtype=np.float64)
    for c in range(3):
        field = rng.uniform(0.2, 0.6) * np.ones((height, width))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.05, 0.25)
            field += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        img[c] = field
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.05, 0.25, size=2)
        color = rng.uniform(0.0, 1.0, size=3)
        dist = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        mask = np.clip(1.0 - dist, 0.0, 1.0) ** 0.5
        img = img * (1.0 - mask) + color[:, None, None] * mask
    lo, hi = img.min(), img.max()
    img = 0.05 + 0.9 * (img - lo) / max(hi - lo, 1e-9)
    return torch.from_numpy(img).to(dtype)


def write_synthetic_dataset(out_dir, count: int, size: tuple[int, int],
                            cfg: SynthRainConfig, clean_source=None) -> Path:
    """Write `count` rain/norain PNG pairs plus a manifest of the config.

    Clean images come from `clean_source` (a directory, cycled in sorted
    order) or are generated procedurally. Per-image streak randomness
    derives from (cfg.seed, index), so the dataset bytes are a pure
    function of the arguments.
    """
    out_dir = Path(out_dir)
    (out_dir / "rain").mkdir(parents=True, exist_ok=True)
    (out_dir / "norain").mkdir(parents=True, exist_ok=True)
    height, width = size

    source_paths = None
    if clean_source is not None:
        source_paths = sorted(p for p in Path(clean_source).iterdir() if p.is_file())
        if not source_paths:
            raise DatasetError(f"no clean images in {clean_source}")

    for index in range(count):
        if source_paths is not None:
            clean = load_image(source_paths[index % len(source_paths)])
        else:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
            clean = make_clean_image(height, width, rng)
        pair_seed = np.random.SeedSequence([cfg.seed, index, 1]).generate_state(1)[0]
        rainy = synthesize_rain(clean, cfg, seed=int(pair_seed))
        name = f"{index:04d}.png"
        save_image(rainy, out_dir / "rain" / name)
        save_image(clean, out_dir / "norain" / name)

    manifest = {"count": count, "height": height, "width": width, "config": asdict(cfg)}
    with open(out_dir / "synth_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out_dir
