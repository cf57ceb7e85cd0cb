"""Hierarchical synthesis networks: per-scale stage-1 fusion nets, the stage-2
fusion net, patch datasets, training loops and tiled inference.

Three model layouts are supported:

``full``
    three stage-1 nets, scale s sees (orig, bright, dim) at sigma_s, then a
    stage-2 net on (map_s0, map_s1, map_s2, original).
``spectral-only``
    three single-channel stage-1 nets on the original at each sigma, then
    the same stage-2 net.
``intensity-only``
    a single stage-1 net on (orig, bright, dim) at sigma_0; its class-1 map is
    the output.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore as nn
from .bands import DEFAULT_SIGMAS, INTENSITIES, SCALES, build_band_stack, check_sigmas, scale_targets
from .dataio import Image, as_array, derive_seed, load_array, make_rng, save_array
from .metrics import report
from .tomo import inscribed_circle

log = logging.getLogger(__name__)

MODES = ("full", "spectral-only", "intensity-only")
FEATURES = 64
STAGE2_FEATURES = (32, 64)
N_CLASSES = 2
CLASSIFIER_GAIN = 0.1  # init scale of the final 1x1 conv, keeps the initial loss near ln 2


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    patch: int = 64
    n_train_patches: int = 100
    n_test_patches: int = 40
    batch: int = 32
    lr: float = 1e-3  # desk scale: 100 patches give only 4 steps per epoch
    weight_decay: float = 5e-4
    epochs: int = 30
    sigmas: tuple = DEFAULT_SIGMAS
    seed: int = 0
    overlap: int = 16
    chunk: int = 8  # patches per forward/backward pass inside a mini-batch

    def __post_init__(self):
        self.sigmas = check_sigmas(self.sigmas)
        if self.patch % 2 or self.patch < 16:
            raise ValueError("patch must be even and >= 16")
        if self.batch < 1 or self.chunk < 1 or self.epochs < 0:
            raise ValueError("batch, chunk must be positive and epochs >= 0")
        if not 0 <= self.overlap < self.patch // 2:
            raise ValueError("overlap must be smaller than half a patch")


# -------------------------------------------------------------- networks ---

def stage1_net(in_c: int = 3, seed: int = 0, dtype=np.float32) -> nn.Sequential:
    rng = make_rng(seed)
    f = FEATURES
    return nn.Sequential([
        nn.Conv2d(in_c, f, rng=rng, dtype=dtype), nn.ReLU(),
        nn.Conv2d(f, f, rng=rng, dtype=dtype), nn.ReLU(),
        nn.MaxPool2(),
        nn.Conv2d(f, f, rng=rng, dtype=dtype), nn.ReLU(),
        nn.Conv2d(f, f, rng=rng, dtype=dtype), nn.ReLU(),
        nn.Deconv2(f, f, rng=rng, dtype=dtype),
        nn.Conv2d(f, f, rng=rng, dtype=dtype), nn.ReLU(),
        nn.Conv2d(f, f, rng=rng, dtype=dtype), nn.ReLU(),
        nn.Conv2d(f, N_CLASSES, k=1, rng=rng, dtype=dtype, gain=CLASSIFIER_GAIN),
    ])


def stage2_net(in_c: int = 4, seed: int = 0, dtype=np.float32) -> nn.Sequential:
    rng = make_rng(seed)
    a, b = STAGE2_FEATURES
    return nn.Sequential([
        nn.Conv2d(in_c, a, rng=rng, dtype=dtype), nn.ReLU(),
        nn.Conv2d(a, b, rng=rng, dtype=dtype), nn.ReLU(),
        nn.Conv2d(b, N_CLASSES, k=1, rng=rng, dtype=dtype, gain=CLASSIFIER_GAIN),
    ])


def class1_prob(net: nn.Sequential, x: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Softmax probability of class 1 for a batch, shape (N, H, W)."""
    out = []
    for i in range(0, len(x), chunk):
        out.append(nn.softmax(net.forward(x[i: i + chunk]))[:, 1])
    return np.concatenate(out).astype(np.float32)


# --------------------------------------------------------------- dataset ---

@dataclass
class PatchDataset:
    """Band stacks ``(P, 3, 3, h, w)`` and per-scale labels ``(P, 3, h, w)``."""

    bands: np.ndarray
    targets: np.ndarray
    coords: np.ndarray  # (P, 3): slice index, row, col
    n_train: int
    sigmas: tuple

    @property
    def train(self) -> slice:
        return slice(0, self.n_train)

    @property
    def test(self) -> slice:
        return slice(self.n_train, len(self.bands))

    def stage1_input(self, mode: str, scale: int, sl: slice | np.ndarray) -> np.ndarray:
        if mode == "spectral-only":
            return self.bands[sl, 0, scale][:, None]
        return self.bands[sl, :, scale]

    def original(self, sl) -> np.ndarray:
        return self.bands[sl, 0, 0]


def _sample_coords(n_patches: int, shapes, slice_ids, patch: int, rng) -> np.ndarray:
    coords = []
    for _ in range(n_patches):
        k = int(slice_ids[rng.integers(len(slice_ids))])
        h, w = shapes[k]
        coords.append((k, int(rng.integers(h - patch + 1)), int(rng.integers(w - patch + 1))))
    return np.array(coords, dtype=np.int64).reshape(-1, 3)


def split_slices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Train and held-out slice ids: the last quarter (at least one) is held out.

    A single slice serves both roles.
    """
    if n < 2:
        return np.arange(n), np.arange(n)
    k = max(1, n // 4)
    return np.arange(n - k), np.arange(n - k, n)


def make_dataset(inputs: Sequence, gts: Sequence, cfg: TrainConfig,
                 rng: np.random.Generator | None = None, out_dir=None) -> PatchDataset:
    """Split whole slices into band stacks and scale labels, then crop patches.

    Splitting before cropping keeps the intensity threshold (the slice mean)
    and the low-pass filters independent of where a patch lands. Test
    patches come only from the slices ``split_slices`` holds out.
    """
    if len(inputs) != len(gts) or not inputs:
        raise ValueError("inputs and gts must be non-empty and paired")
    arrs = [as_array(x) for x in inputs]
    gt_arrs = [as_array(g) for g in gts]
    for a, g in zip(arrs, gt_arrs):
        if a.shape != g.shape:
            raise ValueError(f"input/gt shape mismatch {a.shape} vs {g.shape}")
        if min(a.shape) < cfg.patch:
            raise ValueError(f"image {a.shape} is smaller than the {cfg.patch}px patch")
    rng = make_rng(cfg.seed) if rng is None else rng
    train_ids, test_ids = split_slices(len(arrs))
    shapes = [a.shape for a in arrs]
    coords = np.concatenate([
        _sample_coords(cfg.n_train_patches, shapes, train_ids, cfg.patch, rng),
        _sample_coords(cfg.n_test_patches, shapes, test_ids, cfg.patch, rng),
    ])
    p = cfg.patch
    bands = np.empty((len(coords), 3, 3, p, p), dtype=np.float32)
    targets = np.empty((len(coords), 3, p, p), dtype=np.uint8)
    stacks = {int(k): build_band_stack(arrs[k], cfg.sigmas).bands for k in np.unique(coords[:, 0])}
    labels = {k: scale_targets(gt_arrs[k], cfg.sigmas) for k in stacks}
    for i, (k, r, c) in enumerate(coords):
        bands[i] = stacks[k][:, :, r: r + p, c: c + p]
        targets[i] = labels[k][:, r: r + p, c: c + p]
    ds = PatchDataset(bands, targets, coords, cfg.n_train_patches, cfg.sigmas)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def save_dataset(ds: PatchDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(ds.bands)):
        split = "train" if i < ds.n_train else "test"
        d = out / split / f"{i:05d}"
        d.mkdir(parents=True, exist_ok=True)
        for a, inten in enumerate(INTENSITIES):
            for s, sc in enumerate(SCALES):
                save_array(d / f"band_{inten}_{sc}.hsct", ds.bands[i, a, s])
        for s, sc in enumerate(SCALES):
            save_array(d / f"target_{sc}.hsct", ds.targets[i, s].astype(np.float32))
        entries.append({"dir": f"{split}/{i:05d}", "slice": int(ds.coords[i, 0]),
                        "row": int(ds.coords[i, 1]), "col": int(ds.coords[i, 2])})
    manifest = {"sigmas": list(ds.sigmas), "n_train": ds.n_train, "patches": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(path) -> PatchDataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    entries = manifest["patches"]
    first = root / entries[0]["dir"]
    p = load_array(first / "band_orig_s0.hsct").shape[-1]
    bands = np.empty((len(entries), 3, 3, p, p), dtype=np.float32)
    targets = np.empty((len(entries), 3, p, p), dtype=np.uint8)
    for i, e in enumerate(entries):
        d = root / e["dir"]
        for a, inten in enumerate(INTENSITIES):
            for s, sc in enumerate(SCALES):
                bands[i, a, s] = load_array(d / f"band_{inten}_{sc}.hsct")
        for s, sc in enumerate(SCALES):
            targets[i, s] = load_array(d / f"target_{sc}.hsct").astype(np.uint8)
    coords = np.array([[e["slice"], e["row"], e["col"]] for e in entries], dtype=np.int64)
    return PatchDataset(bands, targets, coords, manifest["n_train"], tuple(manifest["sigmas"]))


# -------------------------------------------------------------- training ---

@dataclass
class TrainLog:
    initial_loss: float = float("nan")
    epoch_loss: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)


def pixel_accuracy(prob: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean((prob >= 0.5) == (labels == 1)))


def _loss_and_grads(net: nn.Sequential, x: np.ndarray, y: np.ndarray, chunk: int):
    """Full-batch mean loss and gradients, accumulated chunk by chunk in order."""
    total = y.size
    loss = 0.0
    grads = None
    for i in range(0, len(x), chunk):
        out = net.forward(x[i: i + chunk], keep=True)
        l, g = nn.softmax_xent(out, y[i: i + chunk], norm=total)
        _, pg = net.backward(g)
        loss += l
        if grads is None:
            grads = pg
        else:
            for k in grads:
                grads[k] += pg[k]
    return loss, grads


def eval_loss(net: nn.Sequential, x: np.ndarray, y: np.ndarray, chunk: int = 16) -> float:
    total = 0.0
    for i in range(0, len(x), chunk):
        l, _ = nn.softmax_xent(net.forward(x[i: i + chunk]), y[i: i + chunk], norm=y.size)
        total += l
    return total


def fit(net: nn.Sequential, x_train, y_train, x_test, y_test, cfg: TrainConfig,
        seed: int, state: nn.AdamState | None = None, tag: str = "net"):
    """Adam on mini-batches of ``cfg.batch``; returns (state, TrainLog)."""
    if state is None:
        state = nn.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = make_rng(seed)
    params = net.parameters()
    tlog = TrainLog()
    n = len(x_train)
    tlog.initial_loss = eval_loss(net, x_train[: cfg.batch], y_train[: cfg.batch])
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(0, n, cfg.batch):
            idx = np.sort(order[b: b + cfg.batch])
            loss, grads = _loss_and_grads(net, x_train[idx], y_train[idx], cfg.chunk)
            if not np.isfinite(loss):
                raise TrainingError(f"{tag}: loss became {loss} at epoch {epoch}, step {state.t}")
            nn.adam_step(params, grads, state)
            losses.append(loss)
        tlog.epoch_loss.append(float(np.mean(losses)))
        if len(x_test):
            tlog.test_accuracy.append(pixel_accuracy(class1_prob(net, x_test), y_test))
        log.info("%s epoch %d loss %.4f acc %s", tag, epoch, tlog.epoch_loss[-1],
                 tlog.test_accuracy[-1] if tlog.test_accuracy else "-")
    return state, tlog


@dataclass
class HSModel:
    """Trained networks plus everything needed to apply them."""

    mode: str
    sigmas: tuple
    patch: int
    stage1: list
    stage2: nn.Sequential | None
    adam: dict = field(default_factory=dict)  # "stage1_<s>" / "stage2" -> AdamState
    logs: dict = field(default_factory=dict)  # same keys -> TrainLog

    def stage1_scales(self) -> list[int]:
        return [0] if self.mode == "intensity-only" else [0, 1, 2]

    def stage1_input(self, bands: np.ndarray, scale: int) -> np.ndarray:
        """``bands`` is (P, 3, 3, h, w)."""
        if self.mode == "spectral-only":
            return bands[:, 0, scale][:, None]
        return bands[:, :, scale]

    def maps(self, bands: np.ndarray) -> np.ndarray:
        """Stage-1 class-1 maps, shape (P, n_nets, h, w)."""
        return np.stack([class1_prob(net, self.stage1_input(bands, s))
                         for s, net in zip(self.stage1_scales(), self.stage1)], axis=1)

    def stage2_input(self, bands: np.ndarray, maps: np.ndarray | None = None) -> np.ndarray:
        maps = self.maps(bands) if maps is None else maps
        return np.concatenate([maps, bands[:, 0, 0][:, None]], axis=1).astype(np.float32)

    def predict(self, bands: np.ndarray) -> np.ndarray:
        """Final class-1 probability for a batch of band stacks."""
        maps = self.maps(bands)
        if self.stage2 is None:
            return maps[:, 0]
        return class1_prob(self.stage2, self.stage2_input(bands, maps))


def train_stage1(ds: PatchDataset, scale: int, cfg: TrainConfig, mode: str = "full"):
    """Train the stage-1 net for one scale; returns (net, AdamState, TrainLog).

    Each scale draws its init and shuffling from its own seed, so the three
    trainings share no state and can run in any order or concurrently.
    """
    if scale not in (0, 1, 2):
        raise ValueError("scale must be 0, 1 or 2")
    if tuple(ds.sigmas) != tuple(cfg.sigmas):
        raise ValueError(f"dataset sigmas {ds.sigmas} differ from config {cfg.sigmas}")
    in_c = 1 if mode == "spectral-only" else 3
    net = stage1_net(in_c, seed=derive_seed(cfg.seed, 1, scale))
    x_tr = ds.stage1_input(mode, scale, ds.train)
    x_te = ds.stage1_input(mode, scale, ds.test)
    state, tlog = fit(net, x_tr, ds.targets[ds.train, scale], x_te, ds.targets[ds.test, scale],
                      cfg, seed=derive_seed(cfg.seed, 2, scale), tag=f"stage1[{scale}]")
    return net, state, tlog


def param_digest(net: nn.Sequential) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, arr in sorted(net.parameters().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def train_stage2(ds: PatchDataset, model: HSModel, cfg: TrainConfig):
    """Train the fusion net on frozen stage-1 maps; returns (net, AdamState, TrainLog)."""
    net = stage2_net(len(model.stage1) + 1, seed=derive_seed(cfg.seed, 3))
    x_tr = model.stage2_input(ds.bands[ds.train])
    x_te = model.stage2_input(ds.bands[ds.test])
    state, tlog = fit(net, x_tr, ds.targets[ds.train, 0], x_te, ds.targets[ds.test, 0],
                      cfg, seed=derive_seed(cfg.seed, 4), tag="stage2")
    return net, state, tlog


def train_model(ds: PatchDataset, cfg: TrainConfig, mode: str = "full") -> HSModel:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    scales = [0] if mode == "intensity-only" else [0, 1, 2]
    model = HSModel(mode, tuple(cfg.sigmas), cfg.patch, [], None)
    for s in scales:
        net, state, tlog = train_stage1(ds, s, cfg, mode)
        model.stage1.append(net)
        model.adam[f"stage1_{s}"] = state
        model.logs[f"stage1_{s}"] = tlog
    if mode != "intensity-only":
        net, state, tlog = train_stage2(ds, model, cfg)
        model.stage2 = net
        model.adam["stage2"] = state
        model.logs["stage2"] = tlog
    return model


# ------------------------------------------------------------ checkpoint ---

def _net_entries(model: HSModel):
    for s, net in zip(model.stage1_scales(), model.stage1):
        yield f"stage1_{s}", net
    if model.stage2 is not None:
        yield "stage2", model.stage2


def save_model(model: HSModel, out_dir) -> None:
    """One HSCT tensor per parameter and Adam moment, plus ``model.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nets = []
    for key, net in _net_entries(model):
        state = model.adam.get(key)
        layers = []
        for name, arr in net.parameters().items():
            fname = f"{key}.{name}.hsct"
            save_array(out / fname, arr)
            entry = {"name": name, "shape": list(arr.shape), "file": fname}
            if state is not None and name in state.m:
                entry["adam_m"] = f"{key}.{name}.adam_m.hsct"
                entry["adam_v"] = f"{key}.{name}.adam_v.hsct"
                save_array(out / entry["adam_m"], state.m[name])
                save_array(out / entry["adam_v"], state.v[name])
            layers.append(entry)
        first = net.layers[0].layer
        nets.append({
            "key": key, "in_channels": int(first.in_c), "params": layers,
            "adam": None if state is None else {
                "t": state.t, "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                "eps": state.eps, "weight_decay": state.weight_decay},
            "log": asdict(model.logs[key]) if key in model.logs else None,
        })
    manifest = {"format": "hsct-model", "version": 1, "mode": model.mode,
                "sigmas": list(model.sigmas), "patch": model.patch, "networks": nets}
    (out / "model.json").write_text(json.dumps(manifest, indent=1))


def load_model(path) -> HSModel:
    root = Path(path)
    manifest = json.loads((root / "model.json").read_text())
    model = HSModel(manifest["mode"], tuple(manifest["sigmas"]), manifest["patch"], [], None)
    for entry in manifest["networks"]:
        key = entry["key"]
        build = stage2_net if key == "stage2" else stage1_net
        net = build(entry["in_channels"])
        net.load_parameters({p["name"]: load_array(root / p["file"]) for p in entry["params"]})
        if entry.get("adam"):
            a = entry["adam"]
            state = nn.AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
                                 weight_decay=a["weight_decay"], t=a["t"])
            for p in entry["params"]:
                if "adam_m" in p:
                    state.m[p["name"]] = load_array(root / p["adam_m"])
                    state.v[p["name"]] = load_array(root / p["adam_v"])
            model.adam[key] = state
        if entry.get("log"):
            model.logs[key] = TrainLog(**entry["log"])
        if key == "stage2":
            model.stage2 = net
        else:
            model.stage1.append(net)
    return model


# ------------------------------------------------------------- inference ---

def feather_window(patch: int, overlap: int) -> np.ndarray:
    """Separable linear ramp over ``overlap`` pixels at each tile edge."""
    if overlap == 0:
        return np.ones((patch, patch))
    i = np.arange(patch) + 0.5
    ramp = np.minimum(1.0, np.minimum(i, patch - i) / overlap)
    return np.outer(ramp, ramp)


def tile_origins(length: int, patch: int, overlap: int, offset: int = 0) -> tuple[list[int], int, int]:
    """Tile starts over a padded axis; returns (starts, pad_before, pad_after)."""
    step = patch - overlap
    before = overlap + offset
    total = before + length + overlap
    n_tiles = max(1, int(np.ceil((total - patch) / step)) + 1)
    after = (n_tiles - 1) * step + patch - before - length
    return [k * step for k in range(n_tiles)], before, after


def stitch(tiles: np.ndarray, starts_r, starts_c, shape, patch: int, overlap: int) -> np.ndarray:
    """Weighted blend of ``tiles`` (ordered row-major over the start grid)."""
    w = feather_window(patch, overlap)
    acc = np.zeros(shape)
    wsum = np.zeros(shape)
    k = 0
    for r in starts_r:
        for c in starts_c:
            acc[r: r + patch, c: c + patch] += w * tiles[k]
            wsum[r: r + patch, c: c + patch] += w
            k += 1
    return acc / wsum


def infer(model: HSModel, img, overlap: int = 16, offset: int = 0, batch: int = 16,
          circle: bool = False, labels: bool = False) -> Image:
    """Enhance a whole slice tile by tile.

    The slice is split into its band stack as in training, reflect-padded,
    cut into ``model.patch`` tiles overlapping by ``overlap`` pixels (grid
    shifted by ``offset``) and run through the networks; the class-1
    probabilities are blended with linear feathering. ``labels`` turns the
    blend into the 0/1 class map. With ``circle`` the result is zeroed
    outside the inscribed circle, matching a masked FBP input.
    """
    arr = as_array(img)
    px = img.pixel_size if isinstance(img, Image) else None
    p = model.patch
    h, w = arr.shape
    rs, rb, ra = tile_origins(h, p, overlap, offset)
    cs, cb, ca = tile_origins(w, p, overlap, offset)
    bands = np.pad(build_band_stack(arr, model.sigmas).bands, ((0, 0), (0, 0), (rb, ra), (cb, ca)),
                   mode="reflect").astype(np.float32)
    stacks = np.stack([bands[:, :, r: r + p, c: c + p] for r in rs for c in cs])
    probs = np.concatenate([model.predict(stacks[i: i + batch]) for i in range(0, len(stacks), batch)])
    out = stitch(probs.astype(np.float64), rs, cs, bands.shape[2:], p, overlap)[rb: rb + h, cb: cb + w]
    out = np.clip(out, 0.0, 1.0)
    if labels:
        out = (out >= 0.5).astype(np.float64)
    if circle:
        if h != w:
            raise ValueError("circle mask needs a square slice")
        out *= inscribed_circle(h)
    return Image(out, px) if px is not None else Image(out)


@dataclass
class TransferResult:
    outputs: list
    reports: list
    native_outputs: list | None = None
    native_reports: list | None = None
    input_reports: list | None = None


def transfer_apply(model: HSModel, inputs: Sequence, gts: Sequence, cfg: TrainConfig | None = None,
                   native: HSModel | None = None, overlap: int = 16, circle: bool = False,
                   labels: bool = False) -> TransferResult:
    """Run a trained model on another acquisition and score it against its gt."""
    if cfg is not None and (tuple(cfg.sigmas) != tuple(model.sigmas) or cfg.patch != model.patch):
        raise ValueError("model was trained with a different patch size or sigmas")
    if native is not None and (tuple(native.sigmas) != tuple(model.sigmas) or native.patch != model.patch):
        raise ValueError("native model config differs from the transferred model")
    outs = [infer(model, x, overlap, circle=circle, labels=labels) for x in inputs]
    res = TransferResult(outs, [report(o, g) for o, g in zip(outs, gts)],
                         input_reports=[report(x, g) for x, g in zip(inputs, gts)])
    if native is not None:
        res.native_outputs = [infer(native, x, overlap, circle=circle, labels=labels) for x in inputs]
        res.native_reports = [report(o, g) for o, g in zip(res.native_outputs, gts)]
    return res
