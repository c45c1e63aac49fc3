#!/usr/bin/env python3
"""Effective ranks per layer and the fidelity cost of query-side rank truncation.

    python scripts/rank_profile.py [--config toy|toy-sliding] [--n-new 30]
"""

import argparse

from kvdirect import Transformer
from kvdirect.analysis import bilinear_spectrum, rank_truncated_generate
from kvdirect.cli import DEFAULT_PROMPTS
from kvdirect.config import PRESETS


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="toy", choices=sorted(PRESETS))
    ap.add_argument("--n-new", type=int, default=30)
    args = ap.parse_args()
    model = Transformer(PRESETS[args.config]())
    dh = model.config.d_head
    print("layer  r*(0.5)  r*(0.9)  r*(0.99)   (mean over query heads)")
    for layer in range(model.config.n_layers):
        rep = bilinear_spectrum(model, layer)
        print(f"{layer:5d}  {rep.mean_rank(0.5):7.2f}  {rep.mean_rank(0.9):7.2f}  {rep.mean_rank(0.99):8.2f}")
    print("\nrank  match   kl_mean")
    for r in range(dh, 0, -max(1, dh // 8)):
        f = rank_truncated_generate(model, r, list(DEFAULT_PROMPTS), args.n_new).fidelity
        print(f"{r:4d}  {f.match:5.2f}  {f.kl_mean:8.5f}")


if __name__ == "__main__":
    main()
