"""Ablation on the desk-scale phase-tomography analogue.

Trains intensity-only, spectral-only and the full hierarchy on the same
simulated phase FBP slices and prints the comparison table.

    python scripts/ablation.py --out runs/ablation [--epochs 30]
"""
import argparse
import json
import logging
from pathlib import Path

from hsct.pipeline import PipelineConfig, compare_runs, render_table, run_pipeline

MODES = ("intensity-only", "spectral-only", "full")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--scenario", default="phase-sim")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    reports = []
    for mode in MODES:
        cfg = PipelineConfig.for_scenario(args.scenario, mode=mode, epochs=args.epochs, seed=args.seed)
        run_pipeline(cfg, out / mode, force=args.force)
        reports.append(out / mode / "report.json")
    table = compare_runs(reports, labels=list(MODES))
    (out / "compare.json").write_text(json.dumps(table, indent=1) + "\n")
    text = render_table(table)
    (out / "compare.txt").write_text(text)
    print(text)


if __name__ == "__main__":
    main()
