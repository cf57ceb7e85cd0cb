"""Transfer between view counts on the sparse-view phase analogue.

Trains one model on 75-view FBP and one on 50-view FBP, then applies the
75-view model unchanged to the 50-view slices. All three runs share the
phantoms and noise seeds, so their held-out slices are identical.

    python scripts/transfer.py --out runs/transfer [--epochs 30]
"""
import argparse
import logging
from pathlib import Path

from hsct.pipeline import PipelineConfig, compare_runs, render_table, run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/transfer")
    ap.add_argument("--scenario", default="sparse-phase-sim")
    ap.add_argument("--source-views", type=int, default=75)
    ap.add_argument("--target-views", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    base = dict(epochs=args.epochs, seed=args.seed)
    src = out / f"native_{args.source_views}"
    run_pipeline(PipelineConfig.for_scenario(args.scenario, views=args.source_views, **base), src, force=args.force)
    native = run_pipeline(PipelineConfig.for_scenario(args.scenario, views=args.target_views, **base),
                          out / f"native_{args.target_views}", force=args.force)
    moved = run_pipeline(PipelineConfig.for_scenario(args.scenario, views=args.target_views,
                                                     model=str(src / "model"), **base),
                         out / f"transfer_{args.source_views}_to_{args.target_views}", force=args.force)
    print(render_table(compare_runs([native, moved], labels=["native", "transferred"])))
    gap = moved["hscnn"]["ssim"] - native["hscnn"]["ssim"]
    print(f"SSIM transferred - native = {gap:+.4f}; FBP input SSIM {native['fbp']['ssim']:.4f}")


if __name__ == "__main__":
    main()
