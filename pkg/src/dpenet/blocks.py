"""Forward building blocks: residual, dilated dense, parallel dilated, pixel attention.

All blocks are stride-1 and same-padded, so spatial dimensions are preserved
end to end. Forward passes are pure functions of (input, parameters): no
buffers, no internal state.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatchError

# Per-ResBlock conv dilation pairs inside a DDRB. The flat schedule
# [1, 1, 2, 2, 5, 5] covers the input densely (no gridding) and grows the
# receptive field of the six convs to 3, 5, 9, 13, 23, 33.
DDRB_DILATIONS = ((1, 1), (2, 2), (5, 5))

# Dilations of the three parallel branches of a PDRB.
PDRB_DILATIONS = (1, 2, 5)


@dataclass(frozen=True)
class ConvSpec:
    """Shape-level description of one same-padded, stride-1 conv layer."""

    kernel: int
    in_channels: int
    out_channels: int
    dilation: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if not isinstance(self.kernel, int):
            raise ShapeMismatchError(f"non-square kernels unsupported: {self.kernel!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeMismatchError(f"kernel must be odd and positive, got {self.kernel}")
        if min(self.in_channels, self.out_channels, self.dilation) < 1:
            raise ShapeMismatchError(
                f"channels and dilation must be positive: {self}"
            )

    @property
    def padding(self) -> int:
        # dilation * (kernel - 1) / 2 keeps output spatial size == input size
        return self.dilation * (self.kernel - 1) // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def param_count(self) -> int:
        n = self.kernel * self.kernel * self.in_channels * self.out_channels
        return n + self.out_channels if self.has_bias else n


def conv2d(x: torch.Tensor, spec: ConvSpec, weight: torch.Tensor,
           bias: torch.Tensor | None = None, layer: str = "conv") -> torch.Tensor:
    """Same-padded conv with shape validation; `layer` names the offender on error."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"{layer}: expected rank-4 input, got shape {tuple(x.shape)}")
    if x.shape[1] != spec.in_channels:
        raise ShapeMismatchError(
            f"{layer}: input has {x.shape[1]} channels, spec wants {spec.in_channels}"
        )
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeMismatchError(
            f"{layer}: weight shape {tuple(weight.shape)} != spec {spec.weight_shape}"
        )
    if spec.has_bias and (bias is None or tuple(bias.shape) != (spec.out_channels,)):
        raise ShapeMismatchError(f"{layer}: bias missing or misshaped for spec {spec}")
    return F.conv2d(x, weight, bias, stride=1, padding=spec.padding, dilation=spec.dilation)


def make_conv(spec: ConvSpec) -> nn.Conv2d:
    """Instantiate the torch layer described by `spec`."""
    return nn.Conv2d(
        spec.in_channels,
        spec.out_channels,
        spec.kernel,
        stride=1,
        padding=spec.padding,
        dilation=spec.dilation,
        bias=spec.has_bias,
    )


class ResBlock(nn.Module):
    """conv -> ReLU -> conv, identity skip, ReLU on the sum."""

    def __init__(self, channels: int, dilations: tuple[int, int] = (1, 1), bias: bool = True):
        super().__init__()
        d1, d2 = dilations
        self.conv1 = make_conv(ConvSpec(3, channels, channels, d1, bias))
        self.conv2 = make_conv(ConvSpec(3, channels, channels, d2, bias))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv2(F.relu(self.conv1(x)))
        return F.relu(out + x)


class DDRB(nn.Module):
    """Dilated dense residual block: three ResBlocks with additive dense skips.

    ResBlock k receives the elementwise sum of the block input and all
    previous ResBlock outputs; the block output is the last ResBlock's
    output. With all-zero weights this wiring maps x >= 0 to 4x.

    `dilations=((1,1),)*3` gives the undilated dense variant, and
    `dense=False` additionally degrades it to a plain ResBlock chain;
    both are used by the architecture ablations.
    """

    def __init__(self, channels: int, dilations: tuple[tuple[int, int], ...] = DDRB_DILATIONS,
                 dense: bool = True, bias: bool = True):
        super().__init__()
        self.dense = dense
        self.blocks = nn.ModuleList(ResBlock(channels, d, bias) for d in dilations)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        acc = x
        out = x
        for index, block in enumerate(self.blocks):
            out = block(acc if self.dense else out)
            if self.dense and index + 1 < len(self.blocks):
                acc = acc + out
        return out


class PDRB(nn.Module):
    """Parallel dilated residual block.

    Three same-width 3x3 branches with dilations 1, 2, 5 run on the same
    input, are channel-concatenated, then fused by a 1x1 conv and a ReLU.
    """

    def __init__(self, channels: int, dilations: tuple[int, ...] = PDRB_DILATIONS,
                 bias: bool = True):
        super().__init__()
        self.branches = nn.ModuleList(
            make_conv(ConvSpec(3, channels, channels, d, bias)) for d in dilations
        )
        self.fuse = make_conv(ConvSpec(1, channels * len(dilations), channels, 1, bias))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        stacked = torch.cat([branch(x) for branch in self.branches], dim=1)
        return F.relu(self.fuse(stacked))


class PAB(nn.Module):
    """Pixel-wise attention: squeeze to a 1-channel map, expand back, multiply.

    The map multiplies the input as-is, with no squashing nonlinearity, so
    zero weights give a zero output and a unit bias on the expand conv gives
    the identity. `squash=True` passes the map through a sigmoid instead.
    """

    def __init__(self, channels: int, squash: bool = False, bias: bool = True):
        super().__init__()
        self.squeeze = make_conv(ConvSpec(3, channels, 1, 1, bias))
        self.expand = make_conv(ConvSpec(3, 1, channels, 1, bias))
        self.squash = squash

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        attention = self.expand(F.relu(self.squeeze(y)))
        if self.squash:
            attention = torch.sigmoid(attention)
        return attention * y


class ERPAB(nn.Module):
    """Enhanced residual pixel-wise attention block: ReLU(PAB(PDRB(x)) + x)."""

    def __init__(self, channels: int, squash_attention: bool = False, bias: bool = True):
        super().__init__()
        self.pdrb = PDRB(channels, bias=bias)
        self.pab = PAB(channels, squash=squash_attention, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.pab(self.pdrb(x)) + x)
