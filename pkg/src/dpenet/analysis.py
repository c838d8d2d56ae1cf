"""Static analysis of conv stacks: receptive fields, gridding, params, FLOPs.

Everything here works on symbolic layer descriptions; no tensors are
allocated and no network is run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .blocks import DDRB_DILATIONS, PDRB_DILATIONS, ConvSpec
from .errors import ShapeMismatchError
from .networks import NetworkConfig, _stage1_wiring


@dataclass(frozen=True)
class Branches:
    """Parallel conv paths sharing one input, merged by concat or sum.

    A merge never widens the receptive field beyond its widest path, so the
    RF after the node is the max over paths.
    """

    paths: tuple[tuple[ConvSpec, ...], ...]


@dataclass(frozen=True)
class GraphSpec:
    """Ordered conv layers (with optional parallel nodes) of one stack."""

    layers: tuple[ConvSpec | Branches, ...]

    def convs(self) -> list[ConvSpec]:
        """All conv layers in order, branches flattened."""
        out: list[ConvSpec] = []
        for layer in self.layers:
            if isinstance(layer, Branches):
                for path in layer.paths:
                    out.extend(path)
            else:
                out.append(layer)
        return out

    def validate_chaining(self) -> None:
        """Check that channel counts chain through the serial layers."""
        current = None
        for layer in self.layers:
            if isinstance(layer, Branches):
                for path in layer.paths:
                    if current is not None and path and path[0].in_channels != current:
                        raise ShapeMismatchError(
                            f"branch expects {path[0].in_channels} channels, got {current}"
                        )
                current = sum(path[-1].out_channels for path in layer.paths)
            else:
                if current is not None and layer.in_channels != current:
                    raise ShapeMismatchError(
                        f"layer expects {layer.in_channels} channels, got {current}"
                    )
                current = layer.out_channels


def receptive_field(spec: GraphSpec | list[ConvSpec]) -> list[int]:
    """Receptive field after each node, RF_i = RF_{i-1} + (k-1)*d for stride 1.

    Parallel nodes contribute a single entry: the max over their paths.
    """
    layers = spec.layers if isinstance(spec, GraphSpec) else tuple(spec)
    out: list[int] = []
    rf = 1
    for layer in layers:
        if isinstance(layer, Branches):
            rf = max(
                rf + sum((conv.kernel - 1) * conv.dilation for conv in path)
                for path in layer.paths
            )
        else:
            rf = rf + (layer.kernel - 1) * layer.dilation
        out.append(rf)
    return out


@dataclass(frozen=True)
class GriddingResult:
    ok: bool
    holes: tuple[int, ...]
    span: tuple[int, int]
    offsets: frozenset[int] = field(repr=False)


def check_gridding(dilations: list[int], kernel: int = 3) -> GriddingResult:
    """Exact 1-D coverage check for a stack of same-padded dilated convs.

    Builds the set of input offsets reachable from one output position by
    iterated offset sums (one tap set per layer); the stack is gridding-free
    iff that set is a contiguous integer interval. Square kernels make the
    2-D reachable set the Cartesian product of this set with itself, so the
    1-D check decides both axes.
    """
    if not dilations:
        raise ValueError("dilation list must be non-empty")
    if kernel < 1 or kernel % 2 == 0:
        raise ShapeMismatchError(f"kernel must be odd and positive, got {kernel}")
    half = (kernel - 1) // 2
    reachable = {0}
    for d in dilations:
        taps = range(-half * d, half * d + 1, d) if half else (0,)
        reachable = {r + t for r in reachable for t in taps}
    lo, hi = min(reachable), max(reachable)
    holes = tuple(v for v in range(lo, hi + 1) if v not in reachable)
    return GriddingResult(not holes, holes, (lo, hi), frozenset(reachable))


def layer_offsets(dilation: int, kernel: int = 3) -> list[int]:
    """Offsets covered by a single layer: multiples of d spanning the kernel."""
    half = (kernel - 1) // 2
    return list(range(-half * dilation, half * dilation + 1, dilation))


def drb_stack(channels: int = 32) -> GraphSpec:
    """Six undilated 3x3 convs: the serial path through an undilated dense block."""
    return GraphSpec(tuple(ConvSpec(3, channels, channels) for _ in range(6)))


def ddrb_stack(channels: int = 32) -> GraphSpec:
    """Six 3x3 convs with the [1, 1, 2, 2, 5, 5] dilation schedule."""
    dils = [d for pair in DDRB_DILATIONS for d in pair]
    return GraphSpec(tuple(ConvSpec(3, channels, channels, d) for d in dils))


@dataclass(frozen=True)
class ElementwiseCounts:
    """Per-pixel side ops, in scalar-element units for one forward pass."""

    skip_adds: int = 0
    attention_mults: int = 0
    activations: int = 0

    def __add__(self, other: "ElementwiseCounts") -> "ElementwiseCounts":
        return ElementwiseCounts(
            self.skip_adds + other.skip_adds,
            self.attention_mults + other.attention_mults,
            self.activations + other.activations,
        )

    def scale(self, n: int) -> "ElementwiseCounts":
        return ElementwiseCounts(self.skip_adds * n, self.attention_mults * n,
                                 self.activations * n)


def _ddrb_graph(cfg: NetworkConfig) -> tuple[list[ConvSpec], ElementwiseCounts]:
    ch = cfg.channels
    dilations, dense = _stage1_wiring(cfg)
    convs = [
        ConvSpec(3, ch, ch, d, cfg.bias) for pair in dilations for d in pair
    ]
    n_res = len(dilations)
    # per ResBlock: 1 skip add + 2 ReLUs; dense wiring adds n_res - 1 input sums
    counts = ElementwiseCounts(
        skip_adds=(n_res + (n_res - 1 if dense else 0)) * ch,
        activations=2 * n_res * ch,
    )
    return convs, counts


def _stage2_block_graph(cfg: NetworkConfig
                        ) -> tuple[list[ConvSpec | Branches], ElementwiseCounts]:
    ch = cfg.channels
    pab_convs: list[ConvSpec | Branches] = [
        ConvSpec(3, ch, 1, 1, cfg.bias), ConvSpec(3, 1, ch, 1, cfg.bias)
    ]
    pab_counts = ElementwiseCounts(attention_mults=ch, activations=1)
    if cfg.stage2_block == "pab":
        return pab_convs, pab_counts
    branches = Branches(
        tuple((ConvSpec(3, ch, ch, d, cfg.bias),) for d in PDRB_DILATIONS)
    )
    fuse = ConvSpec(1, ch * len(PDRB_DILATIONS), ch, 1, cfg.bias)
    counts = pab_counts + ElementwiseCounts(skip_adds=ch, activations=2 * ch)
    return [branches, fuse, *pab_convs], counts


def network_graph(cfg: NetworkConfig) -> tuple[GraphSpec, ElementwiseCounts]:
    """Symbolic conv list plus elementwise-op counts for the whole network."""
    ch = cfg.channels
    layers: list[ConvSpec | Branches] = []
    counts = ElementwiseCounts()

    layers.append(ConvSpec(3, cfg.in_channels, ch, 1, cfg.bias))
    block_convs, block_counts = _ddrb_graph(cfg)
    for _ in range(cfg.num_ddrb):
        layers.extend(block_convs)
    counts = counts + block_counts.scale(cfg.num_ddrb)
    layers.append(ConvSpec(3, ch, cfg.in_channels, 1, cfg.bias))
    counts = counts + ElementwiseCounts(skip_adds=cfg.in_channels)  # global skip

    if cfg.use_drnet:
        layers.append(ConvSpec(3, cfg.in_channels, ch, 1, cfg.bias))
        s2_layers, s2_counts = _stage2_block_graph(cfg)
        for _ in range(cfg.num_erpab):
            layers.extend(s2_layers)
        counts = counts + s2_counts.scale(cfg.num_erpab)
        layers.append(ConvSpec(3, ch, cfg.in_channels, 1, cfg.bias))
        counts = counts + ElementwiseCounts(skip_adds=cfg.in_channels)
    return GraphSpec(tuple(layers)), counts


def count_params(cfg: NetworkConfig) -> int:
    """Closed-form parameter count; matches the built network exactly."""
    graph, _ = network_graph(cfg)
    return sum(conv.param_count for conv in graph.convs())


def param_breakdown(cfg: NetworkConfig) -> dict[str, int]:
    """Parameter counts per structural piece of the network."""
    ch = cfg.channels
    io_in = ConvSpec(3, cfg.in_channels, ch, 1, cfg.bias).param_count
    io_out = ConvSpec(3, ch, cfg.in_channels, 1, cfg.bias).param_count
    block_convs, _ = _ddrb_graph(cfg)
    per_ddrb = sum(c.param_count for c in block_convs)
    out = {
        "stage1_io_convs": io_in + io_out,
        "stage1_block": per_ddrb,
        "stage1_blocks_total": per_ddrb * cfg.num_ddrb,
        "stage1_total": io_in + io_out + per_ddrb * cfg.num_ddrb,
    }
    if cfg.use_drnet:
        s2_layers, _ = _stage2_block_graph(cfg)
        per_block = sum(c.param_count for c in GraphSpec(tuple(s2_layers)).convs())
        out.update({
            "stage2_io_convs": io_in + io_out,
            "stage2_block": per_block,
            "stage2_blocks_total": per_block * cfg.num_erpab,
            "stage2_total": io_in + io_out + per_block * cfg.num_erpab,
        })
    out["total"] = out["stage1_total"] + out.get("stage2_total", 0)
    return out


@dataclass(frozen=True)
class FlopEstimate:
    """Operation counts for one forward pass at a fixed input size.

    The headline `total` counts one fused multiply-accumulate per conv tap
    (k^2 * in * out per output pixel), the convention behind published
    efficiency tables for this family of models. conv_mults/conv_adds
    itemize the same work as 2 ops per MAC for consumers that count
    multiplies and additions separately; bias and elementwise traffic are
    itemized on their own.
    """

    height: int
    width: int
    conv_macs: int
    bias_adds: int
    skip_adds: int
    attention_mults: int
    activation_ops: int

    @property
    def conv_mults(self) -> int:
        return self.conv_macs

    @property
    def conv_adds(self) -> int:
        return self.conv_macs

    @property
    def multiply_add_total(self) -> int:
        return self.conv_mults + self.conv_adds

    @property
    def total(self) -> int:
        return self.conv_macs


def graph_flops(graph: GraphSpec, input_size: tuple[int, int],
                counts: ElementwiseCounts = ElementwiseCounts()) -> FlopEstimate:
    """Op counts for an arbitrary conv stack at a fixed spatial size."""
    height, width = input_size
    if height < 1 or width < 1:
        raise ValueError(f"input size must be positive, got {input_size}")
    pixels = height * width
    macs = 0
    bias_adds = 0
    for conv in graph.convs():
        macs += conv.kernel * conv.kernel * conv.in_channels * conv.out_channels * pixels
        if conv.has_bias:
            bias_adds += conv.out_channels * pixels
    return FlopEstimate(
        height=height,
        width=width,
        conv_macs=macs,
        bias_adds=bias_adds,
        skip_adds=counts.skip_adds * pixels,
        attention_mults=counts.attention_mults * pixels,
        activation_ops=counts.activations * pixels,
    )


def estimate_flops(cfg: NetworkConfig, input_size: tuple[int, int] = (256, 256)
                   ) -> FlopEstimate:
    """Count forward-pass ops for a (1, in_channels, H, W) input."""
    graph, counts = network_graph(cfg)
    return graph_flops(graph, input_size, counts)


def format_analysis_report(cfg: NetworkConfig, input_size: tuple[int, int] = (256, 256)
                           ) -> str:
    """Human-readable report: RF tables, gridding verdict, params, FLOPs."""
    lines = []
    lines.append("== receptive fields (per conv layer) ==")
    lines.append(f"plain residual stack (six 3x3, d=1):    {receptive_field(drb_stack(cfg.channels))}")
    lines.append(f"dilated dense stack (d=[1,1,2,2,5,5]):  {receptive_field(ddrb_stack(cfg.channels))}")
    lines.append("")

    lines.append("== gridding check ==")
    flat = [d for pair in DDRB_DILATIONS for d in pair]
    result = check_gridding(flat, kernel=3)
    verdict = "ok" if result.ok else f"holes at {list(result.holes)}"
    lines.append(f"dilations {flat}, kernel 3: {verdict}, covers [{result.span[0]}, {result.span[1]}]")
    lines.append("")

    lines.append("== parameters ==")
    for name, value in param_breakdown(cfg).items():
        lines.append(f"{name:24s} {value:>10d}")
    total = count_params(cfg)
    lines.append(f"{'total (M)':24s} {total / 1e6:>10.3f}")
    lines.append("")

    est = estimate_flops(cfg, input_size)
    lines.append(f"== forward-pass ops at {est.height}x{est.width} ==")
    lines.append(f"{'conv MACs':24s} {est.conv_macs:>16d}  ({est.conv_macs / 1e9:.2f} G)")
    lines.append(f"{'conv mult+add (2/MAC)':24s} {est.multiply_add_total:>16d}  ({est.multiply_add_total / 1e9:.2f} G)")
    lines.append(f"{'bias adds':24s} {est.bias_adds:>16d}")
    lines.append(f"{'skip/dense adds':24s} {est.skip_adds:>16d}")
    lines.append(f"{'attention mults':24s} {est.attention_mults:>16d}")
    lines.append(f"{'activation ops':24s} {est.activation_ops:>16d}")
    lines.append(f"{'headline total':24s} {est.total:>16d}  ({est.total / 1e9:.2f} G)")
    return "\n".join(lines)
