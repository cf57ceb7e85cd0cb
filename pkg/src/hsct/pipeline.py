"""End-to-end runs: simulate, reconstruct, train, enhance, score.

A run is driven by a flat ``key = value`` config (``#`` starts a comment)
and writes everything into one output directory together with a manifest
of sha256 content hashes. The output location is not part of the config,
so one config run into two directories yields the same manifest.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import hsnet, tomo
from .bands import DEFAULT_SIGMAS, check_sigmas
from .dataio import derive_seed, make_rng, save_image
from .metrics import report
from .phantom import PhantomSpec, gen_cellular
from .phase import WEAK_PHASE, PhysParams, phase_sinogram

log = logging.getLogger(__name__)

SCENARIOS = ("phase-sim", "sparse-ct-sim", "sparse-phase-sim")
OUTPUTS = ("label", "prob")

# values that differ between scenarios when not given explicitly
SCENARIO_DEFAULTS = {
    "phase-sim": {"views": 180, "snr_db": 20.0},
    "sparse-ct-sim": {"views": 50, "snr_db": math.inf},
    "sparse-phase-sim": {"views": 75, "snr_db": 20.0},
}

METHOD_ORDER = ("fbp", "intensity-only", "spectral-only", "full")
METHOD_NAMES = {"fbp": "FBP", "intensity-only": "HSCNN intensity-only",
                "spectral-only": "HSCNN spectral-only", "full": "HSCNN"}


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    """A stage failed; ``manifest`` lists the files written before the failure."""

    def __init__(self, stage: str, cause: BaseException, manifest: list):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.manifest = manifest


@dataclass
class PipelineConfig:
    scenario: str = "sparse-ct-sim"
    seed: int = 1
    size: int = 128
    n_slices: int = 8
    porosity: float = 0.5
    feature_radius: float = 0.0  # 0 picks size / 16
    full_views: int = 180
    views: int = 50
    snr_db: float = math.inf  # inf disables noise
    filter: str = "ramp"
    wavelength: float = 0.045  # nm
    distance: float = 60.0  # mm
    gamma: float = 500.0
    phase_peak: float = WEAK_PHASE
    mode: str = "full"
    patch: int = 64
    n_train: int = 100
    n_test: int = 40
    batch: int = 32
    lr: float = 1e-3
    weight_decay: float = 5e-4
    epochs: int = 30
    overlap: int = 16
    sigmas: tuple = DEFAULT_SIGMAS
    output: str = "label"  # "label" thresholds the blended class-1 probability, "prob" keeps it
    model: str = ""  # pretrained model directory; empty trains a new one

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.mode not in hsnet.MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.output not in OUTPUTS:
            raise ConfigError(f"unknown output {self.output!r}; expected one of {OUTPUTS}")
        if self.filter not in ("ramp", "hann"):
            raise ConfigError(f"unknown filter {self.filter!r}")
        if not 2 <= self.views <= self.full_views:
            raise ConfigError("views must lie in [2, full_views]")
        if self.n_slices < 1 or self.size < 32:
            raise ConfigError("need n_slices >= 1 and size >= 32")
        try:
            self.sigmas = check_sigmas(self.sigmas)
            self.train_config()
            self.phys()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def for_scenario(cls, scenario: str, **overrides) -> "PipelineConfig":
        if scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
        values = {**SCENARIO_DEFAULTS[scenario], **overrides}
        if scenario == "phase-sim" and "views" not in overrides:
            values["views"] = values.get("full_views", cls.full_views)
        return cls(scenario=scenario, **values)

    def train_config(self) -> hsnet.TrainConfig:
        return hsnet.TrainConfig(
            patch=self.patch, n_train_patches=self.n_train, n_test_patches=self.n_test,
            batch=self.batch, lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
            sigmas=self.sigmas, seed=derive_seed(self.seed, 30), overlap=self.overlap)

    def phys(self) -> PhysParams:
        return PhysParams(wavelength=self.wavelength, z=self.distance, gamma=self.gamma)

    def with_updates(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)


def _field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(PipelineConfig)}


def _parse_value(key: str, raw: str, kind: type):
    try:
        if kind is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def parse_config(text: str, base: dict | None = None) -> PipelineConfig:
    """Parse ``key = value`` lines. Scenario defaults apply to keys left out."""
    types = _field_types()
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, types[key])
    values = {**(base or {}), **values}
    scenario = values.pop("scenario", PipelineConfig.scenario)
    return PipelineConfig.for_scenario(scenario, **values)


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: PipelineConfig) -> str:
    lines = ["# hsct pipeline config"]
    lines += [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- manifest ---

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def build_manifest(root) -> list[dict]:
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p != root / "manifest.json")
    return [{"path": p.relative_to(root).as_posix(), "sha256": sha256_file(p), "bytes": p.stat().st_size}
            for p in files]


def write_manifest(root, status: str = "complete", failed_stage: str | None = None) -> list[dict]:
    entries = build_manifest(root)
    doc = {"status": status, "files": entries}
    if failed_stage is not None:
        doc["failed_stage"] = failed_stage
    (Path(root) / "manifest.json").write_text(json.dumps(doc, indent=1) + "\n")
    return entries


# ---------------------------------------------------------------- stages ---

def _slice_name(k: int) -> str:
    return f"slice_{k:03d}.hsct"


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty (pass force to replace an earlier run)")
        if not (out / "config.txt").exists():
            raise FileExistsError(f"{out} does not look like a run directory; refusing to clear it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _mean_report(reps) -> dict:
    return {"mse": float(np.mean([r.mse for r in reps])),
            "psnr": float(np.mean([r.psnr_db for r in reps])),
            "ssim": float(np.mean([r.ssim for r in reps]))}


def _simulate(cfg: PipelineConfig, gts, out: Path, stage):
    full_angles = tomo.even_angles(cfg.full_views)
    phys = cfg.phys()
    noisy_full = cfg.scenario != "sparse-ct-sim" and math.isfinite(cfg.snr_db)
    sinos = []
    with stage("simulate-phase" if cfg.scenario != "sparse-ct-sim" else "project"):
        (out / "sino_full").mkdir()
        for k, gt in enumerate(gts):
            if cfg.scenario == "sparse-ct-sim":
                s = tomo.radon_forward(gt, full_angles)
            else:
                rng = make_rng(derive_seed(cfg.seed, 20, k))
                s = phase_sinogram(gt, full_angles, phys, cfg.snr_db if noisy_full else None, rng,
                                   phase_peak=cfg.phase_peak)
            tomo.save_sinogram(out / "sino_full" / _slice_name(k), s)
            sinos.append(s)
    if cfg.views < cfg.full_views:
        with stage("sparse"):
            sinos = [tomo.subsample_views(s, cfg.views) for s in sinos]
    if cfg.scenario == "sparse-ct-sim" and math.isfinite(cfg.snr_db):
        with stage("noise"):
            sinos = [tomo.add_noise_snr(s, cfg.snr_db, make_rng(derive_seed(cfg.seed, 21, k)))
                     for k, s in enumerate(sinos)]
    noisy_after = cfg.scenario == "sparse-ct-sim" and math.isfinite(cfg.snr_db)
    if cfg.views < cfg.full_views or noisy_after:
        d = out / f"sino_{cfg.views}"
        d.mkdir()
        for k, s in enumerate(sinos):
            tomo.save_sinogram(d / _slice_name(k), s)
    return sinos


class _Stages:
    def __init__(self, out: Path):
        self.out = out
        self.name = None

    def __call__(self, name: str):
        self.name = name
        log.info("stage %s", name)
        return self

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, PipelineError):
            return False
        partial = write_manifest(self.out, status="failed", failed_stage=self.name)
        raise PipelineError(self.name, exc, partial) from exc


def run_pipeline(cfg: PipelineConfig, out, force: bool = False) -> dict:
    """Run one scenario into ``out`` and return the report dict.

    Writes gt/, sino_full/, sino_<views>/ (when views are dropped or noise is
    added afterwards), fbp_<views>/, dataset/, model/ (when trained here),
    hscnn_out/ (held-out slices), report.json, config.txt and manifest.json.
    """
    out = Path(out)
    _prepare_out(out, force)
    (out / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")
    stage = _Stages(out)
    tcfg = cfg.train_config()
    with stage("phantom"):
        (out / "gt").mkdir()
        radius = cfg.feature_radius or None
        gts = []
        for k in range(cfg.n_slices):
            seed = derive_seed(cfg.seed, 10, k)
            gt = gen_cellular(PhantomSpec(size=cfg.size, seed=seed, porosity=cfg.porosity,
                                          feature_radius=radius), make_rng(seed))
            save_image(out / "gt" / _slice_name(k), gt)
            gts.append(gt)
    sinos = _simulate(cfg, gts, out, stage)
    with stage("fbp"):
        d = out / f"fbp_{cfg.views}"
        d.mkdir()
        fbps = [tomo.fbp_reconstruct(s, cfg.filter) for s in sinos]
        for k, f in enumerate(fbps):
            save_image(d / _slice_name(k), f)
    if cfg.model:
        with stage("load-model"):
            model = hsnet.load_model(cfg.model)
            if model.patch != cfg.patch or tuple(model.sigmas) != tuple(cfg.sigmas):
                raise ConfigError("pretrained model patch/sigmas differ from the config")
            source = "pretrained"
    else:
        with stage("make-dataset"):
            ds = hsnet.make_dataset(fbps, gts, tcfg, out_dir=out / "dataset")
        with stage("train"):
            model = hsnet.train_model(ds, tcfg, cfg.mode)
            hsnet.save_model(model, out / "model")
            source = "trained"
    _, held = hsnet.split_slices(cfg.n_slices)
    with stage("infer"):
        (out / "hscnn_out").mkdir()
        outs = {}
        for k in held:
            outs[int(k)] = hsnet.infer(model, fbps[k], cfg.overlap, circle=True,
                                         labels=cfg.output == "label")
            save_image(out / "hscnn_out" / _slice_name(int(k)), outs[int(k)])
    with stage("eval"):
        per = []
        for k in held:
            per.append({"slice": int(k), "fbp": report(fbps[k], gts[k]).to_json(),
                        "hscnn": report(outs[int(k)], gts[k]).to_json()})
        rep = {
            "scenario": cfg.scenario,
            "views": cfg.views,
            "mode": model.mode,
            "model": {"source": source,
                      "digests": {key: hsnet.param_digest(net) for key, net in hsnet._net_entries(model)}},
            "heldout_slices": [int(k) for k in held],
            "fbp": _mean_report([report(fbps[k], gts[k]) for k in held]),
            "hscnn": _mean_report([report(outs[int(k)], gts[k]) for k in held]),
            "per_slice": per,
            "training": {key: {"initial_loss": t.initial_loss,
                               "final_loss": t.epoch_loss[-1] if t.epoch_loss else None,
                               "test_accuracy": t.test_accuracy[-1] if t.test_accuracy else None}
                         for key, t in model.logs.items()},
        }
        (out / "report.json").write_text(json.dumps(rep, indent=1) + "\n")
    with stage("manifest"):
        write_manifest(out)
    return rep


# ---------------------------------------------------------------- compare ---

def _get(d: dict, dotted: str):
    for part in dotted.split("."):
        if not isinstance(d, dict) or part not in d:
            return None
        d = d[part]
    return d


def compare_runs(reports, labels=None) -> dict:
    """Methods x scenarios table of mean SSIM / PSNR over held-out slices.

    ``reports`` are paths or already loaded dicts. Rows follow FBP,
    intensity-only, spectral-only, full; other modes come last. Each row
    also carries its difference to the first report of the same scenario.
    Missing fields are listed under ``missing`` instead of raising.
    """
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    docs, names = [], []
    for i, r in enumerate(reports):
        if isinstance(r, dict):
            docs.append(r)
            names.append(labels[i] if labels else f"report{i}")
        else:
            docs.append(json.loads(Path(r).read_text()))
            names.append(labels[i] if labels else str(r))
    missing = []
    for name, d in zip(names, docs):
        for key in ("scenario", "views", "mode", "fbp.ssim", "fbp.psnr", "hscnn.ssim", "hscnn.psnr"):
            if _get(d, key) is None:
                missing.append(f"{name}: {key}")
    columns = []
    for d in docs:
        col = f"{d.get('scenario', '?')}/{d.get('views', '?')}"
        if col not in columns:
            columns.append(col)

    def cell(d, which):
        return {"ssim": _get(d, f"{which}.ssim"), "psnr": _get(d, f"{which}.psnr")}

    rows = []
    seen_fbp = set()
    for name, d in zip(names, docs):
        col = f"{d.get('scenario', '?')}/{d.get('views', '?')}"
        if col not in seen_fbp:
            seen_fbp.add(col)
            rows.append({"method": "fbp", "run": name, "scenario": col, "metrics": cell(d, "fbp")})
        rows.append({"method": d.get("mode", "?"), "run": name, "scenario": col, "metrics": cell(d, "hscnn")})
    rank = {m: i for i, m in enumerate(METHOD_ORDER)}
    order = sorted(range(len(rows)), key=lambda i: (rank.get(rows[i]["method"], len(rank)), i))
    rows = [rows[i] for i in order]
    ref = {}
    for row in rows:
        if row["method"] == "fbp":
            continue
        base = ref.setdefault(row["scenario"], row["metrics"])
        row["delta"] = {k: (None if row["metrics"][k] is None or base[k] is None
                            else row["metrics"][k] - base[k]) for k in ("ssim", "psnr")}
    return {"columns": columns, "rows": rows, "missing": missing}


def _fmt(v, spec: str) -> str:
    return "-" if v is None else format(v, spec)


def render_table(table: dict) -> str:
    cols = table["columns"]
    header = ["method", "run"] + [f"{c} SSIM/PSNR" for c in cols] + ["dSSIM", "dPSNR"]
    body = []
    for row in table["rows"]:
        cells = []
        for c in cols:
            if row["scenario"] == c:
                m = row["metrics"]
                cells.append(f"{_fmt(m['ssim'], '.4f')} / {_fmt(m['psnr'], '.4f')}")
            else:
                cells.append("")
        delta = row.get("delta") or {}
        body.append([METHOD_NAMES.get(row["method"], row["method"]), row["run"], *cells,
                     _fmt(delta.get("ssim"), '+.4f'), _fmt(delta.get("psnr"), '+.4f')])
    widths = [max(len(str(r[i])) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() for r in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    if table.get("missing"):
        lines.append("")
        lines.append("missing fields:")
        lines += [f"  {m}" for m in table["missing"]]
    return "\n".join(lines) + "\n"
