"""Command line front end: ``hsct <command> ...`` (or ``python -m hsct``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import hsnet, metrics, nncore, pipeline, tomo
from .bands import INTENSITIES, SCALES, build_band_stack
from .dataio import derive_seed, load_image, make_rng, save_array, save_image
from .phantom import PhantomSpec, generate
from .phase import WEAK_PHASE, PhysParams, phase_sinogram
from .tvbase import TvConfig, tv_reconstruct

log = logging.getLogger("hsct")


def _sigmas(text: str) -> tuple:
    return tuple(float(s) for s in text.split(","))


def _images_from(paths: list[str]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        out.extend(sorted(p.glob("*.hsct")) if p.is_dir() else [p])
    if not out:
        raise ValueError(f"no .hsct files in {paths}")
    return out


def _train_config(a) -> hsnet.TrainConfig:
    return hsnet.TrainConfig(patch=a.patch, n_train_patches=a.n_train, n_test_patches=a.n_test,
                             batch=a.batch, lr=a.lr, weight_decay=a.weight_decay, epochs=a.epochs,
                             sigmas=_sigmas(a.sigmas), seed=a.seed, overlap=a.overlap)


# ---------------------------------------------------------------- commands ---

def cmd_phantom(a):
    kind = "shepp_logan" if a.kind == "shepp-logan" else "cellular"
    spec = PhantomSpec(kind=kind, size=a.size, seed=a.seed, porosity=a.porosity,
                       feature_radius=a.feature_radius)
    save_image(a.out, generate(spec, make_rng(a.seed)))


def cmd_project(a):
    tomo.save_sinogram(a.out, tomo.radon_forward(load_image(a.input), tomo.even_angles(a.views)))


def cmd_sparse(a):
    tomo.save_sinogram(a.out, tomo.subsample_views(tomo.load_sinogram(a.input), a.views))


def cmd_noise(a):
    tomo.save_sinogram(a.out, tomo.add_noise_snr(tomo.load_sinogram(a.input), a.snr, make_rng(a.seed)))


def cmd_simulate_phase(a):
    gt = load_image(a.input)
    p = PhysParams(wavelength=a.wavelength, z=a.distance, gamma=a.gamma, pixel_size=gt.pixel_size)
    snr = None if a.snr is None or np.isinf(a.snr) else a.snr
    sino = phase_sinogram(gt, tomo.even_angles(a.views), p, snr, make_rng(a.seed), phase_peak=a.phase_peak)
    tomo.save_sinogram(a.out, sino)


def cmd_fbp(a):
    save_image(a.out, tomo.fbp_reconstruct(tomo.load_sinogram(a.input), a.filter, circle=not a.no_circle))


def cmd_recon_tv(a):
    img, trace = tv_reconstruct(tomo.load_sinogram(a.input), TvConfig(alpha=a.alpha, iters=a.iters))
    save_image(a.out, img)
    if a.trace:
        Path(a.trace).write_text(json.dumps({"alpha": a.alpha, "objective": trace}) + "\n")


def cmd_split(a):
    stack = build_band_stack(load_image(a.input), _sigmas(a.sigmas))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, inten in enumerate(INTENSITIES):
        for s, sc in enumerate(SCALES):
            save_array(out / f"band_{inten}_{sc}.hsct", stack.bands[i, s])


def cmd_make_dataset(a):
    inputs = [load_image(p) for p in _images_from(a.inputs)]
    gts = [load_image(p) for p in _images_from(a.gts)]
    hsnet.make_dataset(inputs, gts, _train_config(a), out_dir=a.out)


def _train(a, mode: str):
    cfg = _train_config(a)
    ds = hsnet.load_dataset(a.dataset)
    t0 = time.time()
    model = hsnet.train_model(ds, cfg, mode)
    hsnet.save_model(model, a.out)
    logs = {k: {"initial_loss": t.initial_loss, "epoch_loss": t.epoch_loss, "test_accuracy": t.test_accuracy}
            for k, t in model.logs.items()}
    doc = {"mode": mode, "seconds": round(time.time() - t0, 1), "networks": logs}
    Path(a.out, "train_log.json").write_text(json.dumps(doc, indent=1) + "\n")


def cmd_train(a):
    _train(a, a.mode)


def cmd_infer(a):
    model = hsnet.load_model(a.model)
    save_image(a.out, hsnet.infer(model, load_image(a.input), a.overlap, circle=a.circle,
                                      labels=a.labels))


def cmd_eval(a):
    rep = metrics.report(load_image(a.pred), load_image(a.gt)).to_json()
    text = json.dumps(rep, indent=1)
    if a.json:
        Path(a.json).write_text(text + "\n")
    print(text)


def cmd_run(a):
    overrides = {}
    for item in a.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    lines = Path(a.config).read_text(encoding="utf-8").splitlines() if a.config else []
    lines = [ln for ln in lines if ln.split("#", 1)[0].split("=", 1)[0].strip() not in overrides]
    lines += [f"{k} = {v}" for k, v in overrides.items()]
    cfg = pipeline.parse_config("\n".join(lines))
    if a.dump_config:
        print(pipeline.serialize_config(cfg), end="")
        return
    rep = pipeline.run_pipeline(cfg, a.out, force=a.force)
    print(json.dumps({"fbp": rep["fbp"], "hscnn": rep["hscnn"]}, indent=1))


def cmd_compare(a):
    labels = a.labels.split(",") if a.labels else None
    table = pipeline.compare_runs(a.reports, labels)
    if a.json:
        Path(a.json).write_text(json.dumps(table, indent=1) + "\n")
    print(pipeline.render_table(table), end="")


def cmd_gradcheck(a):
    rng = np.random.default_rng(a.seed)
    dtype = np.float32 if a.dtype == "float32" else np.float64
    tol = a.tol if a.tol is not None else (1e-4 if dtype == np.float32 else 1e-5)
    failed = False
    for arch in (["stage1", "stage2"] if a.arch == "both" else [a.arch]):
        in_c = 3 if arch == "stage1" else 4
        build = hsnet.stage1_net if arch == "stage1" else hsnet.stage2_net
        net = build(in_c, seed=derive_seed(a.seed, 1))
        x = rng.standard_normal((2, in_c, a.size, a.size))
        labels = rng.integers(0, 2, (2, a.size, a.size))
        rep = nncore.network_grad_check(net, x, labels, analytic_dtype=dtype, n_probe=a.probes, seed=a.seed)
        ok = rep.passed(tol)
        failed |= not ok
        print(f"{arch} {a.dtype}: max_rel_err={rep.max_rel_err:.3e} tol={tol:g} "
              f"kinks_skipped={rep.n_kinks} {'PASS' if ok else 'FAIL'}")
    if failed:
        raise RuntimeError("gradient check failed")


# ------------------------------------------------------------------ parser ---

def _add_train_args(p, epochs=30):
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--n-train", type=int, default=100)
    p.add_argument("--n-test", type=int, default=40)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--overlap", type=int, default=16)
    p.add_argument("--sigmas", default="0,2,4")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hsct", description="Hierarchical synthesis CNN for sparse-view and phase tomography.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=fn)
        return p

    p = cmd("phantom", cmd_phantom, "generate a ground-truth slice")
    p.add_argument("--kind", choices=["cellular", "shepp-logan"], default="cellular")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--porosity", type=float, default=0.5)
    p.add_argument("--feature-radius", type=float, default=None)
    p.add_argument("--out", required=True)

    p = cmd("project", cmd_project, "parallel-beam sinogram over [0, 180)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--views", type=int, default=180)
    p.add_argument("--out", required=True)

    p = cmd("sparse", cmd_sparse, "keep evenly spaced views")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--out", required=True)

    p = cmd("noise", cmd_noise, "add white Gaussian noise at a given SNR")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--snr", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = cmd("simulate-phase", cmd_simulate_phase, "propagation-based phase sinogram of a slice")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--views", type=int, default=180)
    p.add_argument("--snr", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--wavelength", type=float, default=0.045, help="nm")
    p.add_argument("--distance", type=float, default=60.0, help="mm")
    p.add_argument("--gamma", type=float, default=500.0)
    p.add_argument("--phase-peak", type=float, default=WEAK_PHASE)
    p.add_argument("--out", required=True)

    p = cmd("fbp", cmd_fbp, "filtered back-projection")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--filter", choices=["ramp", "hann"], default="ramp")
    p.add_argument("--no-circle", action="store_true", help="keep pixels outside the inscribed circle")
    p.add_argument("--out", required=True)

    p = cmd("recon-tv", cmd_recon_tv, "smoothed-TV iterative reconstruction")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--alpha", type=float, default=TvConfig.alpha)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")

    p = cmd("split", cmd_split, "write the 9-band stack of an image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--sigmas", default="0,2,4")
    p.add_argument("--out", required=True)

    p = cmd("make-dataset", cmd_make_dataset, "crop training/test patches")
    p.add_argument("--inputs", nargs="+", required=True, help="files or directories of corrupted slices")
    p.add_argument("--gts", nargs="+", required=True, help="matching ground-truth slices")
    _add_train_args(p)
    p.add_argument("--out", required=True)

    for name, help in (("train", "train the stage-1 and stage-2 networks"),
                       ("ablate", "train one ablation variant")):
        p = cmd(name, cmd_train, help)
        p.add_argument("--dataset", required=True)
        p.add_argument("--mode", choices=hsnet.MODES, default="full" if name == "train" else None,
                       required=name == "ablate")
        _add_train_args(p)
        p.add_argument("--out", required=True)

    p = cmd("infer", cmd_infer, "enhance a slice with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--overlap", type=int, default=16)
    p.add_argument("--circle", action="store_true", help="zero the output outside the inscribed circle")
    p.add_argument("--labels", action="store_true", help="write the 0/1 class map instead of probabilities")
    p.add_argument("--out", required=True)

    p = cmd("eval", cmd_eval, "MSE / PSNR / SSIM of a slice against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--json")

    p = cmd("run", cmd_run, "run a whole scenario from a config file")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", required=False)
    p.add_argument("--force", action="store_true", help="replace an earlier run in --out")
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")

    p = cmd("compare", cmd_compare, "table of several run reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--labels", help="comma separated row labels")
    p.add_argument("--json")

    p = cmd("gradcheck", cmd_gradcheck, "finite-difference check of the network gradients")
    p.add_argument("--arch", choices=["stage1", "stage2", "both"], default="both")
    p.add_argument("--dtype", choices=["float32", "float64"], default="float64")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--tol", type=float)
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "run" and not args.dump_config and not args.out:
        print("hsct run: error in stage 'config': --out is required", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except pipeline.PipelineError as e:
        print(f"hsct {args.command}: error in stage {e.stage!r}: {e.__cause__}", file=sys.stderr)
        return 1
    except Exception as e:  # report the failing command as the stage
        print(f"hsct {args.command}: error in stage {args.command!r}: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
