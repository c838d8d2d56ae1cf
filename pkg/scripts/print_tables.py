#!/usr/bin/env python3
"""Print the static-analysis tables: receptive fields, the depth/width
parameter sweep, and the FLOP breakdown at 256x256."""

import argparse

from dpenet.analysis import (
    check_gridding,
    count_params,
    ddrb_stack,
    drb_stack,
    estimate_flops,
    receptive_field,
)
from dpenet.networks import NetworkConfig

DEPTH_SWEEP = [(15, 3), (15, 1), (10, 3), (10, 1), (5, 3), (5, 1)]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--height", type=int, default=256)
    parser.add_argument("--width", type=int, default=256)
    args = parser.parse_args()

    print("receptive field per conv layer")
    print(f"  plain stack:   {receptive_field(drb_stack())}")
    print(f"  dilated stack: {receptive_field(ddrb_stack())}")
    grid = check_gridding([1, 1, 2, 2, 5, 5])
    print(f"  coverage of [1,1,2,2,5,5]: {'contiguous' if grid.ok else grid.holes} "
          f"over [{grid.span[0]}, {grid.span[1]}]")

    print("\nparameters across the depth sweep")
    for lam, mu in DEPTH_SWEEP:
        cfg = NetworkConfig(num_ddrb=lam, num_erpab=mu)
        print(f"  stage1 x{lam:>2}, stage2 x{mu}:  {count_params(cfg):>8,d}  "
              f"({count_params(cfg) / 1e6:.3f} M)")

    est = estimate_flops(NetworkConfig(), (args.height, args.width))
    print(f"\nforward-pass ops at {args.height}x{args.width}")
    print(f"  conv MACs:        {est.conv_macs / 1e9:7.2f} G")
    print(f"  as mult+add:      {est.multiply_add_total / 1e9:7.2f} G")
    print(f"  bias adds:        {est.bias_adds / 1e9:7.3f} G")
    print(f"  skip/dense adds:  {est.skip_adds / 1e9:7.3f} G")
    print(f"  activations:      {est.activation_ops / 1e9:7.3f} G")


if __name__ == "__main__":
    main()
