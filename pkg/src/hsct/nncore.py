"""A small numpy CNN engine: conv / transposed conv / ReLU / 2x2 max pool,
pixel-wise softmax cross-entropy, Adam and finite-difference checking.

Tensors are numpy arrays laid out (batch, channel, height, width). Every op
keeps the dtype of its input, so the same code runs in float32 for training
and float64 for gradient checks. Convolutions are im2col + one matmul with
the patch matrix in (N*H*W, kh*kw*C) order, the fast orientation for BLAS.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


# ---------------------------------------------------------------- layers ---

@dataclass
class ConvLayer:
    """Weights are (out_c, in_c, kh, kw) for both modes."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: str = "same"
    mode: str = "conv"

    def __post_init__(self):
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.mode not in ("conv", "transposed"):
            raise ValueError(f"mode must be 'conv' or 'transposed', got {self.mode!r}")
        if self.weights.ndim != 4 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("weights must be (out, in, kh, kw) with one bias per output")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    @property
    def out_c(self) -> int:
        return self.weights.shape[0]

    @property
    def in_c(self) -> int:
        return self.weights.shape[1]


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _pads(x: np.ndarray, layer: ConvLayer):
    kh, kw = layer.weights.shape[2:]
    if layer.padding == "valid":
        return (0, 0), (0, 0)
    return _same_pads(x.shape[2], kh, layer.stride), _same_pads(x.shape[3], kw, layer.stride)


def im2col(x: np.ndarray, layer: ConvLayer):
    """Patch matrix (N*Ho*Wo, kh*kw*C) plus the output spatial size."""
    kh, kw = layer.weights.shape[2:]
    (pt, pb), (pl, pr) = _pads(x, layer)
    n, c, h, w = x.shape
    s = layer.stride
    xp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=x.dtype)
    xp[:, pt: pt + h, pl: pl + w, :] = x.transpose(0, 2, 3, 1)
    ho, wo = (h + pt + pb - kh) // s + 1, (w + pl + pr - kw) // s + 1
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i: i + s * (ho - 1) + 1: s, j: j + s * (wo - 1) + 1: s, :]
    return cols.reshape(n * ho * wo, -1), (ho, wo)


def _wmat(layer: ConvLayer) -> np.ndarray:
    """Weights as (out_c, kh*kw*in_c), matching the im2col column order."""
    return layer.weights.transpose(0, 2, 3, 1).reshape(layer.out_c, -1)


def _out_size(x, layer):
    kh, kw = layer.weights.shape[2:]
    (pt, pb), (pl, pr) = _pads(x, layer)
    s = layer.stride
    return (x.shape[2] + pt + pb - kh) // s + 1, (x.shape[3] + pl + pr - kw) // s + 1


def conv2d_forward(x: np.ndarray, layer: ConvLayer, cols: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation; 'same' padding gives ceil(h / stride) outputs."""
    if layer.mode != "conv":
        raise ValueError("conv2d_forward needs a mode='conv' layer")
    if x.ndim != 4 or x.shape[1] != layer.in_c:
        raise ValueError(f"input {x.shape} does not match {layer.in_c} input channels")
    if cols is None:
        cols, _ = im2col(x, layer)
    ho, wo = _out_size(x, layer)
    out = cols @ _wmat(layer).T
    out += layer.bias
    return out.reshape(x.shape[0], ho, wo, layer.out_c).transpose(0, 3, 1, 2)


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray,
                    cols: np.ndarray | None = None, need_grad_x: bool = True):
    """Returns (grad_x, grad_w, grad_b); grad_x is None if not requested."""
    n, c, h, w = x.shape
    ho, wo = _out_size(x, layer)
    if grad_out.shape != (n, layer.out_c, ho, wo):
        raise ValueError(f"grad_out {grad_out.shape} does not match forward output {(n, layer.out_c, ho, wo)}")
    if cols is None:
        cols, _ = im2col(x, layer)
    kh, kw = layer.weights.shape[2:]
    go = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, layer.out_c)
    grad_b = go.sum(axis=0)
    grad_w = (go.T @ cols).reshape(layer.out_c, kh, kw, c).transpose(0, 3, 1, 2)
    grad_w = np.ascontiguousarray(grad_w)
    if not need_grad_x:
        return None, grad_w, grad_b
    dcols = (go @ _wmat(layer)).reshape(n, ho, wo, kh, kw, c)
    (pt, pb), (pl, pr) = _pads(x, layer)
    s = layer.stride
    gp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            gp[:, i: i + s * (ho - 1) + 1: s, j: j + s * (wo - 1) + 1: s, :] += dcols[:, :, :, i, j, :]
    grad_x = gp[:, pt: pt + h, pl: pl + w, :].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def deconv2(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Transposed convolution with kernel == stride (2x2 / 2 in the nets)."""
    if layer.mode != "transposed":
        raise ValueError("deconv2 needs a mode='transposed' layer")
    k = layer.stride
    if layer.weights.shape[2:] != (k, k):
        raise ValueError("transposed layers need kernel size equal to stride")
    if x.ndim != 4 or x.shape[1] != layer.in_c:
        raise ValueError(f"input {x.shape} does not match {layer.in_c} input channels")
    n, c, h, w = x.shape
    o = layer.out_c
    xt = x.transpose(0, 2, 3, 1).reshape(-1, c)
    wm = layer.weights.transpose(1, 0, 2, 3).reshape(c, -1)
    y = (xt @ wm).reshape(n, h, w, o, k, k).transpose(0, 3, 1, 4, 2, 5).reshape(n, o, h * k, w * k)
    return y + layer.bias[None, :, None, None]


def deconv2_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    n, c, h, w = x.shape
    o, k = layer.out_c, layer.stride
    if grad_out.shape != (n, o, h * k, w * k):
        raise ValueError(f"grad_out {grad_out.shape} does not match {(n, o, h * k, w * k)}")
    g = grad_out.reshape(n, o, h, k, w, k).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, -1)
    wm = layer.weights.transpose(1, 0, 2, 3).reshape(c, -1)
    xt = x.transpose(0, 2, 3, 1).reshape(-1, c)
    grad_x = (g @ wm.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    grad_w = (xt.T @ g).reshape(c, o, k, k).transpose(1, 0, 2, 3)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), np.ascontiguousarray(grad_w), grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return grad_out * (x > 0)


def maxpool2(x: np.ndarray):
    """2x2 / stride-2 max pool; ties go to the first element in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {(h, w)}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(grad_out: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad_out.shape
    g = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    return g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray, norm: int | None = None):
    """Mean pixel-wise cross-entropy over batch and space.

    Returns (loss, grad_logits). ``norm`` overrides the averaging count so a
    mini-batch can be processed in chunks with the full-batch normaliser.
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} do not match logits {(n, h, w)}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    count = n * h * w if norm is None else norm
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, labels[:, None].astype(np.int64), axis=1)[:, 0]
    loss = float((lse - picked).sum() / count)
    y = softmax(logits)
    np.put_along_axis(y, labels[:, None].astype(np.int64), np.take_along_axis(y, labels[:, None].astype(np.int64), axis=1) - 1, axis=1)
    return loss, (y / count).astype(logits.dtype)


# ------------------------------------------------------------ containers ---

class Conv2d:
    def __init__(self, in_c: int, out_c: int, k: int = 3, rng=None, dtype=np.float32, gain: float = 1.0):
        std = gain * math.sqrt(2.0 / (in_c * k * k))
        rng = np.random.default_rng(0) if rng is None else rng
        w = (rng.standard_normal((out_c, in_c, k, k)) * std).astype(dtype)
        self.layer = ConvLayer(w, np.zeros(out_c, dtype=dtype))
        self._cache = None

    def params(self):
        return {"weight": self.layer.weights, "bias": self.layer.bias}

    def forward(self, x, keep=False):
        cols, _ = im2col(x, self.layer)
        if keep:
            self._cache = (x, cols)
        return conv2d_forward(x, self.layer, cols)

    def backward(self, g, need_grad_x=True):
        x, cols = self._cache
        self._cache = None
        gx, gw, gb = conv2d_backward(x, self.layer, g, cols, need_grad_x)
        return gx, {"weight": gw, "bias": gb}


class Deconv2:
    def __init__(self, in_c: int, out_c: int, rng=None, dtype=np.float32):
        std = math.sqrt(2.0 / in_c)
        rng = np.random.default_rng(0) if rng is None else rng
        w = (rng.standard_normal((out_c, in_c, 2, 2)) * std).astype(dtype)
        self.layer = ConvLayer(w, np.zeros(out_c, dtype=dtype), stride=2, mode="transposed")
        self._cache = None

    def params(self):
        return {"weight": self.layer.weights, "bias": self.layer.bias}

    def forward(self, x, keep=False):
        if keep:
            self._cache = x
        return deconv2(x, self.layer)

    def backward(self, g, need_grad_x=True):
        x, self._cache = self._cache, None
        gx, gw, gb = deconv2_backward(x, self.layer, g)
        return gx, {"weight": gw, "bias": gb}


class ReLU:
    def __init__(self):
        self._cache = None

    def params(self):
        return {}

    def forward(self, x, keep=False):
        if keep:
            self._cache = x
        return relu(x)

    def backward(self, g, need_grad_x=True):
        x, self._cache = self._cache, None
        return relu_backward(x, g), {}


class MaxPool2:
    def __init__(self):
        self._cache = None

    def params(self):
        return {}

    def forward(self, x, keep=False):
        out, idx = maxpool2(x)
        if keep:
            self._cache = idx
        return out

    def backward(self, g, need_grad_x=True):
        idx, self._cache = self._cache, None
        return maxpool2_backward(g, idx), {}


class Sequential:
    """Layer chain with named parameters ``"<index>.<weight|bias>"``."""

    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"{i}.{name}"] = arr
        return out

    def load_parameters(self, values: dict[str, np.ndarray]):
        params = self.parameters()
        if set(values) != set(params):
            raise ValueError("parameter names do not match the network")
        for name, arr in params.items():
            if values[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {values[name].shape} != {arr.shape}")
            arr[...] = values[name]

    def astype(self, dtype) -> "Sequential":
        """Deep copy with every parameter cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for layer in clone.layers:
            if hasattr(layer, "layer"):
                lyr = layer.layer
                lyr.weights = lyr.weights.astype(dtype)
                lyr.bias = lyr.bias.astype(dtype)
        return clone

    def forward(self, x, keep=False):
        for layer in self.layers:
            x = layer.forward(x, keep)
        return x

    def backward(self, g, need_grad_x=False):
        grads = {}
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            layer = self.layers[i]
            g, pg = layer.backward(g, need_grad_x=need_grad_x or i > 0)
            for name, arr in pg.items():
                grads[f"{i}.{name}"] = arr
        return g, grads


# ------------------------------------------------------------- optimiser ---

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def is_weight(name: str) -> bool:
    return not name.endswith("bias")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One in-place Adam update with bias correction.

    L2 is folded into the gradient (``g + weight_decay * w``) for weight
    tensors only; biases are not decayed.
    """
    state.t += 1
    bc1 = 1 - state.beta1**state.t
    bc2 = 1 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        if state.weight_decay and is_weight(name):
            g = g + state.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return params, state


# ------------------------------------------------------------ grad check ---

@dataclass
class GradCheckReport:
    """``per_tensor`` holds ||a - n|| / max(||a||, ||n||) over the probed
    entries of each tensor; ``max_rel_err`` is the worst of them.
    ``max_entry_err`` is the worst single-entry |a - n| / max(|a|, |n|), kept
    as a diagnostic: at float32 it is dominated by entries many orders of
    magnitude below the tensor's gradient scale."""

    max_rel_err: float
    per_tensor: dict[str, float]
    n_probes: int
    n_kinks: int = 0  # probes skipped because +-eps straddled a kink
    max_entry_err: float = 0.0

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(loss_fn: Callable, tensors: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], n_probe: int = 20, eps: float = 1e-6,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``loss_fn``.

    ``tensors`` are perturbed in place (and restored); ``loss_fn`` must read
    them. It returns either the loss or ``(loss, signature)``; when the
    signatures at +eps and -eps differ the probe crossed a kink and another
    entry is drawn instead. Up to ``n_probe`` random entries per tensor are
    compared.
    """
    rng = np.random.default_rng(0) if rng is None else rng

    def evaluate():
        res = loss_fn()
        return res if isinstance(res, tuple) else (res, None)

    per = {}
    total = kinks = 0
    worst_entry = 0.0
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        a_flat = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        a, num = [], []
        for i in rng.permutation(flat.size):
            if len(a) == n_probe:
                break
            old = flat[i]
            flat[i] = old + eps
            fp, sp = evaluate()
            flat[i] = old - eps
            fm, sm = evaluate()
            flat[i] = old
            if sp != sm:
                kinks += 1
                continue
            a.append(a_flat[i])
            num.append((fp - fm) / (2 * eps))
        a, num = np.array(a), np.array(num)
        if not a.size:
            continue
        scale = max(np.linalg.norm(a), np.linalg.norm(num))
        per[name] = float(np.linalg.norm(a - num) / scale) if scale > 0 else 0.0
        den = np.maximum(np.abs(a), np.abs(num))
        nz = den > 0
        if nz.any():
            worst_entry = max(worst_entry, float(np.max(np.abs(a - num)[nz] / den[nz])))
        total += a.size
    return GradCheckReport(max(per.values()), per, total, kinks, worst_entry)


def nudge_off_kinks(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Move entries within ``margin`` of 0 out to +-margin (finite differences
    across a ReLU kink are meaningless)."""
    out = x.copy()
    near = np.abs(out) < margin
    out[near] = np.where(out[near] < 0, -margin, margin)
    return out


def _forward_signature(net: Sequential, x: np.ndarray):
    """Output plus a digest of every ReLU mask and pooling argmax on the way."""
    import hashlib

    h = hashlib.blake2b(digest_size=16)
    for layer in net.layers:
        if isinstance(layer, ReLU):
            h.update(np.packbits(x > 0).tobytes())
        elif isinstance(layer, MaxPool2):
            h.update(maxpool2(x)[1].tobytes())
        x = layer.forward(x)
    return x, h.digest()


def network_grad_check(net: Sequential, x: np.ndarray, labels: np.ndarray,
                       analytic_dtype=np.float64, n_probe: int = 10, eps: float = 1e-4,
                       seed: int = 0) -> GradCheckReport:
    """Check parameter and input gradients of ``net`` under softmax_xent.

    Analytic gradients are computed in ``analytic_dtype``; the reference is
    always a float64 central difference of the same (cast) parameters.
    Probes whose +-eps evaluations change a ReLU mask or a pooling argmax
    are replaced by other entries.
    """
    ref = net.astype(np.float64)
    work = net.astype(analytic_dtype)
    x64 = np.array(x, dtype=np.float64)
    out = work.forward(x64.astype(analytic_dtype), keep=True)
    _, g = softmax_xent(out, labels)
    gx, grads = work.backward(g, need_grad_x=True)
    tensors = dict(ref.parameters())
    tensors["input"] = x64
    analytic = dict(grads)
    analytic["input"] = gx

    def loss():
        logits, sig = _forward_signature(ref, x64)
        return softmax_xent(logits, labels)[0], sig

    return grad_check(loss, tensors, analytic, n_probe=n_probe, eps=eps,
                      rng=np.random.default_rng(seed))
