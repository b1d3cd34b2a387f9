#!/usr/bin/env python3
"""Generate a seed-derived MiniViT base-weight file (MVW1)."""

import argparse

from fewnerf.vit import MiniViT, MiniViTConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="output .mvw path")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--patch-size", type=int, default=8)
    ap.add_argument("--embed-dim", type=int, default=64)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--depth", type=int, default=4)
    ap.add_argument("--base-resolution", type=int, default=64)
    args = ap.parse_args()

    config = MiniViTConfig(patch_size=args.patch_size, embed_dim=args.embed_dim,
                           heads=args.heads, depth=args.depth,
                           base_resolution=args.base_resolution)
    vit = MiniViT.create(config, seed=args.seed)
    vit.save(args.out)
    print(f"wrote {args.out} (hash {vit.weights_hash()[:16]})")


if __name__ == "__main__":
    main()
