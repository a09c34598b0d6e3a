"""Run the 12-variant ablation on the default planted dataset and check the ordering.

Usage: python scripts/reproduce_ordering.py [--config configs/desk_synthetic.json] [--out runs/ordering]
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from memfuse.cli import ablation_markdown
from memfuse.model import ModelConfig
from memfuse.synthetic import SyntheticSpec, generate_synthetic
from memfuse.train import TrainConfig, ablation_csv, ablation_suite, median_by_variant, ordering_violations

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk_synthetic.json"))
    ap.add_argument("--out", default=None, help="directory for ablation.csv / ablation.md")
    ap.add_argument("--seeds", default=None, help="comma-separated, overrides the config")
    args = ap.parse_args()

    doc = json.loads(Path(args.config).read_text())
    spec = SyntheticSpec()
    splits = generate_synthetic(spec)
    base = ModelConfig.from_dict({**doc["model"], "input_dims": dict(spec.dims)}).validate()
    tcfg = TrainConfig.from_dict(doc["train"]).validate()
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else doc["ablation"]["seeds"]

    t0 = time.perf_counter()
    rows = ablation_suite(base, splits["train"].samples, splits["validation"].samples, tcfg, seeds=seeds)
    elapsed = time.perf_counter() - t0
    medians = median_by_variant(rows)
    print(ablation_markdown(rows))
    for name, rho in medians.items():
        print(f"{name:32s} {rho:.4f}")
    bad = ordering_violations(medians)
    print(f"\n{len(rows)} runs in {elapsed:.0f}s; ordering {'holds' if not bad else 'violated'}")
    for b in bad:
        print("  ", b)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(ablation_csv(rows))
        (out / "ablation.md").write_text(ablation_markdown(rows))
    return 1 if bad else 0


if __name__ == "__main__":
    raise SystemExit(main())
