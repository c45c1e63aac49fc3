#!/usr/bin/env python3
"""Print token match (and mean KL) for every strategy and budget as a table.

    python scripts/sweep_table.py [--budgets 4,8,16,32,64] [--n-new 50]
"""

import argparse

from kvdirect import StrategySpec, Transformer, toy_config
from kvdirect.analysis import budget_sweep
from kvdirect.cache import STRATEGY_KINDS
from kvdirect.cli import SWEEP_PROMPTS, fixed_length


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--budgets", default="4,8,16,32,64")
    ap.add_argument("--n-new", type=int, default=50)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    budgets = [int(b) for b in args.budgets.split(",")]
    model = Transformer(toy_config(seed=args.seed))
    prompts = [fixed_length(p, 64) for p in SWEEP_PROMPTS]
    sweep = budget_sweep(model, prompts, [StrategySpec(k) for k in STRATEGY_KINDS], budgets, args.n_new)
    print(f"{'strategy':10s}" + "".join(f"{'B=' + str(b):>16s}" for b in budgets))
    for kind in STRATEGY_KINDS:
        cells = [sweep.get(kind, b).fidelity for b in budgets]
        print(f"{kind:10s}" + "".join(f"{f.match:7.2f} ({f.kl_mean:5.3f})" for f in cells))


if __name__ == "__main__":
    main()
