"""Network assembly (coarse deraining stage + detail stage), init, checkpoints.

Checkpoint format (single file):

    magic b"DPEC" | u32 format version
    u64 header length | header JSON: {"config": {...}, "extra": {...}}
    u64 manifest length | manifest JSON: [{name, shape, dtype, offset, nbytes}, ...]
    raw little-endian tensor payload, tensors back to back

dtype codes are numpy-style ("<f4", "<f8", "<i8"); float64 tensors
round-trip bit-exactly so a 64-bit training run can resume losslessly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .blocks import DDRB, DDRB_DILATIONS, ERPAB, PAB, ConvSpec, make_conv
from .errors import (
    CheckpointConfigError,
    CheckpointError,
    CheckpointManifestError,
    CheckpointNotFoundError,
    CheckpointVersionError,
    ConfigError,
)

STAGE1_BLOCKS = ("rb", "drb", "ddrb")
STAGE2_BLOCKS = ("pab", "erpab")

CHECKPOINT_MAGIC = b"DPEC"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class NetworkConfig:
    """Depth, width and wiring of the two-stage network.

    num_ddrb / num_erpab are the stage-1 / stage-2 block counts. The
    stage1_block and stage2_block switches select the ablation variants
    (plain residual chain, undilated dense, attention-only detail stage);
    defaults give the full architecture.
    """

    num_ddrb: int = 10
    num_erpab: int = 3
    channels: int = 32
    in_channels: int = 3
    stage1_block: str = "ddrb"
    stage2_block: str = "erpab"
    use_drnet: bool = True
    squash_attention: bool = False
    bias: bool = True

    def __post_init__(self):
        if self.num_ddrb < 1:
            raise ConfigError("network.num_ddrb must be >= 1")
        if self.num_erpab < 1:
            raise ConfigError("network.num_erpab must be >= 1")
        if self.channels < 1:
            raise ConfigError("network.channels must be >= 1")
        if self.in_channels < 1:
            raise ConfigError("network.in_channels must be >= 1")
        if self.stage1_block not in STAGE1_BLOCKS:
            raise ConfigError(f"network.stage1_block must be one of {STAGE1_BLOCKS}")
        if self.stage2_block not in STAGE2_BLOCKS:
            raise ConfigError(f"network.stage2_block must be one of {STAGE2_BLOCKS}")


def _stage1_wiring(cfg: NetworkConfig) -> tuple[tuple[tuple[int, int], ...], bool]:
    """(dilation pairs, dense flag) for the stage-1 block variant."""
    if cfg.stage1_block == "ddrb":
        return DDRB_DILATIONS, True
    if cfg.stage1_block == "drb":
        return ((1, 1),) * len(DDRB_DILATIONS), True
    return ((1, 1),) * len(DDRB_DILATIONS), False


class R2Net(nn.Module):
    """Stage 1: removes rain streaks, producing a coarse rain-free estimate.

    3x3 input conv, num_ddrb blocks in sequence, 3x3 output conv, then a
    global skip adds the input back. Output is unclamped.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.channels
        dilations, dense = _stage1_wiring(cfg)
        self.head = make_conv(ConvSpec(3, cfg.in_channels, ch, 1, cfg.bias))
        self.body = nn.Sequential(
            *[DDRB(ch, dilations, dense, cfg.bias) for _ in range(cfg.num_ddrb)]
        )
        self.tail = make_conv(ConvSpec(3, ch, cfg.in_channels, 1, cfg.bias))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.tail(self.body(self.head(x))) + x


class DRNet(nn.Module):
    """Stage 2: reconstructs detail in the coarse estimate, same skip layout."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.channels
        if cfg.stage2_block == "erpab":
            blocks = [ERPAB(ch, cfg.squash_attention, cfg.bias) for _ in range(cfg.num_erpab)]
        else:
            blocks = [PAB(ch, cfg.squash_attention, cfg.bias) for _ in range(cfg.num_erpab)]
        self.head = make_conv(ConvSpec(3, cfg.in_channels, ch, 1, cfg.bias))
        self.body = nn.Sequential(*blocks)
        self.tail = make_conv(ConvSpec(3, ch, cfg.in_channels, 1, cfg.bias))

    def forward(self, coarse: torch.Tensor) -> torch.Tensor:
        return self.tail(self.body(self.head(coarse))) + coarse


class DPENet(nn.Module):
    """Both stages chained; forward returns (coarse, refined).

    With use_drnet off (stage-1-only ablations) the refined output aliases
    the coarse one. With all-zero parameters both outputs equal the input
    exactly: only the global skips carry signal.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.config = cfg
        self.r2net = R2Net(cfg)
        self.drnet = DRNet(cfg) if cfg.use_drnet else None

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        coarse = self.r2net(x)
        refined = self.drnet(coarse) if self.drnet is not None else coarse
        return coarse, refined


def init_params(model: nn.Module, seed: int) -> nn.Module:
    """Seeded in-place init: fan-in-scaled uniform weights, zero biases.

    Conv weights draw from U(-b, b) with b = 1/sqrt(in_channels * k^2).
    The draw order follows named_parameters(), so a given (architecture,
    seed, dtype) always produces identical bytes.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, param in model.named_parameters():
            if param.ndim == 4:
                fan_in = param.shape[1] * param.shape[2] * param.shape[3]
                bound = fan_in ** -0.5
                param.uniform_(-bound, bound, generator=gen)
            else:
                param.zero_()
    return model


def build_dpenet(cfg: NetworkConfig, seed: int = 0,
                 dtype: torch.dtype = torch.float32) -> DPENet:
    """Construct and initialize a network with deterministic parameters."""
    model = DPENet(cfg).to(dtype)
    init_params(model, seed)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def zero_params(model: nn.Module) -> nn.Module:
    """Zero every parameter in place (identity network; used in tests/baselines)."""
    with torch.no_grad():
        for param in model.parameters():
            param.zero_()
    return model


def _to_state_dict(params: nn.Module | dict) -> dict:
    if isinstance(params, nn.Module):
        return params.state_dict()
    return dict(params)


def save_checkpoint(path, params: nn.Module | dict, config: NetworkConfig,
                    extra: dict | None = None) -> None:
    """Write tensors plus config to `path` in the documented binary format."""
    state = _to_state_dict(params)
    header = json.dumps(
        {"config": asdict(config), "extra": extra or {}}, sort_keys=True
    ).encode("utf-8")

    manifest = []
    chunks = []
    offset = 0
    for name, tensor in state.items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPE_CODES[t.dtype], copy=False).tobytes()
        manifest.append({
            "name": name,
            "shape": list(t.shape),
            "dtype": _DTYPE_CODES[t.dtype],
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest_bytes = json.dumps(manifest).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", len(manifest_bytes)))
        fh.write(manifest_bytes)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path, expected_config: NetworkConfig | None = None
                    ) -> tuple[dict, NetworkConfig, dict]:
    """Read (state_dict, config, extra) back; validates magic, version, manifest.

    If expected_config is given, a stored config that differs raises
    CheckpointConfigError naming the mismatched fields.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise CheckpointNotFoundError(f"no checkpoint at {path}") from exc

    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )

    pos = 8
    try:
        (header_len,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        header = json.loads(blob[pos:pos + header_len])
        pos += header_len
        (manifest_len,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        manifest = json.loads(blob[pos:pos + manifest_len])
        pos += manifest_len
    except (struct.error, json.JSONDecodeError) as exc:
        raise CheckpointManifestError(f"{path}: corrupt header or manifest") from exc

    payload = blob[pos:]
    state: dict[str, torch.Tensor] = {}
    expected_offset = 0
    for entry in manifest:
        shape = tuple(entry["shape"])
        code = entry["dtype"]
        if code not in _CODE_DTYPES:
            raise CheckpointManifestError(f"{path}: unknown dtype code {code!r}")
        itemsize = np.dtype(code).itemsize
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if entry["nbytes"] != count * itemsize or entry["offset"] != expected_offset:
            raise CheckpointManifestError(
                f"{path}: manifest entry {entry['name']} inconsistent with its shape"
            )
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointManifestError(f"{path}: payload truncated at {entry['name']}")
        arr = np.frombuffer(payload, dtype=code, count=count, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(shape).copy())
        expected_offset = end
    if expected_offset != len(payload):
        raise CheckpointManifestError(f"{path}: payload has {len(payload) - expected_offset} trailing bytes")

    config = NetworkConfig(**header["config"])
    if expected_config is not None and config != expected_config:
        diffs = [
            field for field in asdict(config)
            if getattr(config, field) != getattr(expected_config, field)
        ]
        raise CheckpointConfigError(
            f"{path}: stored config differs in fields {diffs}"
        )
    return state, config, header.get("extra", {})


def load_model(path, expected_config: NetworkConfig | None = None,
               dtype: torch.dtype | None = None) -> tuple[DPENet, dict]:
    """Rebuild a DPENet from a checkpoint; returns (model, extra metadata)."""
    state, config, extra = load_checkpoint(path, expected_config)
    model = DPENet(config)
    model_state = {k: v for k, v in state.items() if not k.startswith("opt.")}
    if dtype is not None:
        model = model.to(dtype)
        model_state = {k: v.to(dtype) for k, v in model_state.items()}
    elif model_state:
        model = model.to(next(iter(model_state.values())).dtype)
    model.load_state_dict(model_state)
    return model, extra
