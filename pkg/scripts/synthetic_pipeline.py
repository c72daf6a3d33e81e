"""Run the scaled synthetic pipeline and print a GAP table.

    python3 scripts/synthetic_pipeline.py [--steps 2000] [--seed 7] [--json out.json]
"""
import argparse
import json
from dataclasses import replace

from nlvc.experiment import PipelineConfig, run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--videos", type=int, default=2000)
    ap.add_argument("--runs", type=int, default=10)
    ap.add_argument("--json", default=None)
    a = ap.parse_args()
    base = PipelineConfig()
    cfg = replace(base, data=replace(base.data, videos=a.videos, seed=a.seed),
                  train=replace(base.train, steps=a.steps, seed=a.seed), eval_runs=a.runs)
    res = run_pipeline(cfg)
    print()
    print(f"{'model':<20}{'GAP@20':>10}")
    for k, v in res.gap.items():
        print(f"{k:<20}{v:>10.5f}")
    if a.json:
        with open(a.json, "w") as fh:
            json.dump({"gap": res.gap, "drift": res.drift, "train_seconds": res.seconds}, fh, indent=2)


if __name__ == "__main__":
    main()
