"""Run the full pipeline for one config and print the headline numbers.

    python3 scripts/run_experiment.py --config experiment.example --out runs/example
"""

import argparse
import json
import sys
import time
from pathlib import Path

from advforge.cli import main


def print_summary(out):
    manifest = json.loads((out / "zoo.json").read_text())
    k = manifest["top_k"]
    print(f"\n{'model':16s} {'family':7s} {'top-1 err':>9s} {f'top-{k} err':>9s}")
    for m in manifest["models"]:
        print(f"{m['id']:16s} {m['family']:7s} {m['top1_error']:9.4f} {m[f'top{k}_error']:9.4f}")
    trends = json.loads((out / "report" / "trends.json").read_text())
    print(f"\n{'attack':6s} {'min succ':>8s} {'mean port':>9s} {'within':>7s} {'cross':>7s} {'rho':>7s}")
    for attack, t in trends.items():
        if not isinstance(t, dict):
            continue

        def f(v, fmt):
            return "n/a" if v is None else format(v, fmt)
        print(f"{attack:6s} {t['min_success_rate']:8.2f} {f(t['mean_portability'], '9.4f')} "
              f"{f(t['within_family_mean'], '7.4f')} {f(t['cross_family_mean'], '7.4f')} "
              f"{f(t['rho'], '+7.3f')}")


def run(config, out, seed=None, jobs=None):
    extra = ["--config", str(config), "--out", str(out)]
    if seed is not None:
        extra += ["--seed", str(seed)]
    if jobs is not None:
        extra += ["--jobs", str(jobs)]
    for cmd in ("train", "attack", "report", "verify"):
        t0 = time.time()
        rc = main([cmd] + extra)
        print(f"[{cmd}] exit {rc} in {time.time() - t0:.1f}s")
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="experiment.example")
    ap.add_argument("--out", default="runs/example")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--jobs", type=int)
    args = ap.parse_args()
    rc = run(args.config, args.out, args.seed, args.jobs)
    if rc == 0:
        print_summary(Path(args.out))
    sys.exit(rc)
