"""Repeat the experiment over several global seeds and tabulate the trend checks.

The global seed drives the synthetic data and the training shuffles, so this
shows how much the qualitative trends depend on one particular draw.

    python3 scripts/seed_stability.py --seeds 0 1 2 --out runs/seeds
"""

import argparse
import json
from pathlib import Path

from run_experiment import run


def checks(trends):
    fgs = trends["FGS"]
    return {
        "hc1>=95%": trends["HC1"]["min_success_rate"] >= 0.95,
        "FGS>FGV,HC1": fgs["mean_portability"] > max(trends["FGV"]["mean_portability"],
                                                      trends["HC1"]["mean_portability"]),
        "within>cross": fgs["within_family_mean"] > fgs["cross_family_mean"],
        "rho>0": all((trends[a]["rho"] or 0) > 0 or trends[a]["underpowered"]
                     for a in ("FGS", "FGV", "HC1")),
    }


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="experiment.example")
    ap.add_argument("--out", default="runs/seeds")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    rows = {}
    for seed in args.seeds:
        out = Path(args.out) / f"seed{seed}"
        if run(args.config, out, seed=seed) == 0:
            rows[seed] = checks(json.loads((out / "report" / "trends.json").read_text()))
    names = list(next(iter(rows.values())))
    print("\nseed " + " ".join(f"{n:>13s}" for n in names))
    for seed, c in rows.items():
        print(f"{seed:4d} " + " ".join(f"{'ok' if c[n] else 'FAIL':>13s}" for n in names))
