"""Small numpy CNN: Conv2D(3x3) -> ReLU -> Dropout -> GlobalMaxPool -> Dense(1) -> sigmoid.

Every op accepts either one sample shaped (n, 11) or a batch shaped
(B, n, 11); the leading batch axis is carried through untouched.  Training
math is float64.
"""

import base64
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigMismatch,
    CorruptManifest,
    InputTooSmall,
    InvalidRate,
    ShapeMismatch,
    StaleCache,
    VersionMismatch,
)

MODEL_VERSION = 1
KERNEL = 3
N_FILTERS = 64
DROPOUT_RATE = 0.5
BCE_EPS = 1e-7

PARAM_NAMES = ("conv_kernels", "conv_bias", "dense_w", "dense_b")


@dataclass(eq=False)
class ModelParams:
    conv_kernels: np.ndarray  # [F, 3, 3]
    conv_bias: np.ndarray  # [F]
    dense_w: np.ndarray  # [F]
    dense_b: np.ndarray  # 0-d
    trained_with: Optional[dict] = None

    @property
    def n_filters(self):
        return self.conv_kernels.shape[0]

    @property
    def arch(self):
        return f"conv{self.n_filters}x{KERNEL}x{KERNEL}-gmp-dense1"

    def tensors(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace_tensors(self, tensors):
        return ModelParams(**tensors, trained_with=self.trained_with)

    @classmethod
    def zeros(cls, n_filters=N_FILTERS):
        return cls(np.zeros((n_filters, KERNEL, KERNEL)), np.zeros(n_filters),
                   np.zeros(n_filters), np.zeros(()))

    @classmethod
    def init(cls, rng, n_filters=N_FILTERS):
        """Glorot-uniform weights, zero biases."""
        fan_in, fan_out = KERNEL * KERNEL, KERNEL * KERNEL * n_filters
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        k = rng.uniform(-lim, lim, size=(n_filters, KERNEL, KERNEL))
        lim = np.sqrt(6.0 / (n_filters + 1))
        w = rng.uniform(-lim, lim, size=n_filters)
        return cls(k, np.zeros(n_filters), w, np.zeros(()))


# -- layers -------------------------------------------------------------------

def _patches(x):
    if x.shape[-2] < KERNEL or x.shape[-1] < KERNEL:
        raise InputTooSmall(f"input {x.shape[-2:]} smaller than the {KERNEL}x{KERNEL} kernel")
    return sliding_window_view(x, (KERNEL, KERNEL), axis=(-2, -1))


def conv2d_forward(x, k, b):
    """Valid, stride-1 convolution of a single-channel input: (..., n, m) -> (..., n-2, m-2, F)."""
    return _conv_patches(_patches(np.asarray(x, dtype=np.float64)), k, b)


def _conv_patches(p, k, b):
    flat = p.reshape(-1, KERNEL * KERNEL)
    out = flat @ k.reshape(k.shape[0], -1).T + b
    return out.reshape(*p.shape[:-2], k.shape[0])


def relu(x):
    return np.maximum(x, 0.0)


def _keep_mask(shape, rate, rng):
    if rate == 0.5:
        # one random bit per unit; much cheaper than drawing floats
        size = int(np.prod(shape))
        bits = np.unpackbits(np.frombuffer(rng.bytes((size + 7) // 8), dtype=np.uint8))
        return bits[:size].reshape(shape).view(bool)
    return rng.random(shape, dtype=np.float32) >= rate


def dropout(x, rate=DROPOUT_RATE, mode="train", rng=None):
    """Inverted dropout.  Returns (output, mask) with the 1/(1-rate) scale folded into the mask."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, np.ones_like(x)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    mask = _keep_mask(x.shape, rate, rng) * (1.0 / (1.0 - rate))
    return x * mask, mask


def global_max_pool(x):
    return x.max(axis=(-3, -2))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def dense_sigmoid(v, w, b):
    return sigmoid(v @ w + b)


def classify(p):
    """1 (DDoS) when p > 0.5, else 0 (benign)."""
    return (np.asarray(p) > 0.5).astype(np.uint8) if np.ndim(p) else int(p > 0.5)


def bce_loss(p, y, weight=1.0):
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return -weight * (y * np.log(p) + (1 - y) * np.log(1.0 - p))


# -- whole model --------------------------------------------------------------

@dataclass(eq=False)
class ForwardCache:
    params: ModelParams
    windows: np.ndarray  # [B, h*w, 9] input patch under every conv position
    argmax: np.ndarray  # [B, F] flat h*w index of each filter's pooled maximum
    pooled: np.ndarray  # [B, F] after dropout scaling
    scale: float  # dropout rescale applied to kept units (1 in infer mode)
    p: np.ndarray  # [B]
    used: bool = field(default=False)


def _windows(x):
    b = x.shape[0]
    return _patches(x).reshape(b, -1, KERNEL * KERNEL)


def forward(x, params, mode="infer", rng=None, rate=DROPOUT_RATE):
    """Probability of DDoS for each sample plus the cache backward() needs.

    conv -> relu -> dropout -> global max pool -> dense -> sigmoid, computed in
    a (B, F, positions) layout with ReLU and the dropout mask applied in place.
    """
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    win = _windows(x)
    k = params.conv_kernels.reshape(params.n_filters, -1)
    act = np.matmul(k, win.transpose(0, 2, 1))  # [B, F, h*w]
    act += params.conv_bias[:, None]
    np.maximum(act, 0.0, out=act)
    scale = 1.0
    if mode == "train" and rate > 0.0:
        np.multiply(act, _keep_mask(act.shape, rate, rng), out=act)
        scale = 1.0 / (1.0 - rate)
    argmax = act.argmax(axis=2)  # first occurrence on ties
    pooled = np.take_along_axis(act, argmax[..., None], axis=2)[..., 0] * scale
    p = np.atleast_1d(dense_sigmoid(pooled, params.dense_w, params.dense_b))
    cache = ForwardCache(params, win, argmax, pooled, scale, p)
    return (float(p[0]) if single else p), cache


def _pooled_infer(x, params):
    # max commutes with the per-filter bias and with ReLU, so pool the raw
    # convolution first and touch the big activation tensor only once
    k = params.conv_kernels.reshape(params.n_filters, -1).T
    conv = (_windows(x).reshape(-1, KERNEL * KERNEL) @ k).reshape(len(x), -1, params.n_filters)
    return np.maximum(conv.max(axis=1) + params.conv_bias, 0.0)


def predict_proba(params, x, chunk=8):
    """Infer-mode probabilities for a stack of samples."""
    x = np.asarray(x, dtype=np.float64)
    pooled = np.empty((len(x), params.n_filters))
    for i in range(0, len(x), chunk):
        pooled[i:i + chunk] = _pooled_infer(x[i:i + chunk], params)
    return np.atleast_1d(dense_sigmoid(pooled, params.dense_w, params.dense_b))


def backward(cache, y, weight=1.0, params=None):
    """Gradients of the batch-mean weighted BCE with respect to every parameter.

    The pooled value of a filter is positive exactly when its winning unit
    was both active (pre-activation > 0) and kept by dropout, so that is the
    only place the conv parameters receive gradient.
    """
    if params is not None and params is not cache.params:
        raise StaleCache("cache was produced with different parameters")
    if cache.used:
        raise StaleCache("cache already consumed by a previous backward pass")
    cache.used = True
    prm = cache.params
    bsz = len(cache.p)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), (bsz,))
    weight = np.broadcast_to(np.asarray(weight, dtype=np.float64), (bsz,))

    dz = weight * (cache.p - y) / bsz  # [B]
    g_db = dz.sum()
    g_dw = cache.pooled.T @ dz
    dconv = dz[:, None] * prm.dense_w[None, :] * cache.scale * (cache.pooled > 0)  # [B, F]

    windows = cache.windows[np.arange(bsz)[:, None], cache.argmax]  # [B, F, 9]
    g_k = np.einsum("bf,bfk->fk", dconv, windows).reshape(prm.conv_kernels.shape)
    g_b = dconv.sum(axis=0)
    return {"conv_kernels": g_k, "conv_bias": g_b, "dense_w": g_dw, "dense_b": np.asarray(g_db)}


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        t = params.tensors()
        return cls({k: np.zeros_like(a) for k, a in t.items()},
                   {k: np.zeros_like(a) for k, a in t.items()}, **kw)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update; returns new (params, state), inputs untouched."""
    tensors = params.tensors()
    if set(grads) != set(tensors):
        raise ShapeMismatch(f"gradient names {sorted(grads)} != parameter names {sorted(tensors)}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_t, new_m, new_v = {}, {}, {}
    for name, value in tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != value.shape or state.m[name].shape != value.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {value.shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        new_t[name] = value - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = AdamState(new_m, new_v, step, b1, b2, state.eps)
    return params.replace_tensors(new_t), new_state


# -- persistence --------------------------------------------------------------

def trained_with(t, n, stats, seed):
    return {
        "t": float(t),
        "n": int(n),
        "norm_fingerprint": stats.fingerprint(),
        "norm_min": [float(v) for v in stats.min],
        "norm_max": [float(v) for v in stats.max],
        "seed": int(seed),
    }


def check_config(params, t, n, fingerprint=None):
    cfg = params.trained_with
    if cfg is None:
        return
    if int(cfg["n"]) != int(n) or float(cfg["t"]) != float(t):
        raise ConfigMismatch(f"model was trained with t={cfg['t']}, n={cfg['n']}; "
                             f"data uses t={t}, n={n}")
    if fingerprint is not None and cfg.get("norm_fingerprint") != fingerprint:
        raise ConfigMismatch("normalization stats differ from the ones the model was trained with")


def save_model(params, path):
    doc = {"version": MODEL_VERSION, "arch": params.arch}
    doc.update(params.trained_with or {})
    doc["tensors"] = {
        name: {"shape": list(a.shape), "dtype": "<f8",
               "data": base64.b64encode(np.asarray(a, dtype="<f8").tobytes()).decode("ascii")}
        for name, a in params.tensors().items()
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_model(path, expect_t=None, expect_n=None):
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptManifest(f"{path}: unreadable model file ({exc})") from exc
    if doc.get("version") != MODEL_VERSION:
        raise VersionMismatch(f"{path}: model version {doc.get('version')!r}, "
                              f"expected {MODEL_VERSION}")
    try:
        raw = doc["tensors"]
        tensors = {}
        for name in PARAM_NAMES:
            spec = raw[name]
            shape = tuple(int(d) for d in spec["shape"])
            buf = base64.b64decode(spec["data"])
            if len(buf) != 8 * int(np.prod(shape, dtype=np.int64)):
                raise ShapeMismatch(f"{path}: {name} declares shape {shape} "
                                    f"but holds {len(buf) // 8} values")
            tensors[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ShapeMismatch):
            raise
        raise CorruptManifest(f"{path}: malformed tensor section ({exc})") from exc

    f = tensors["conv_kernels"].shape[0] if tensors["conv_kernels"].ndim == 3 else -1
    expected = {"conv_kernels": (f, KERNEL, KERNEL), "conv_bias": (f,), "dense_w": (f,),
                "dense_b": ()}
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ShapeMismatch(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
    if doc.get("arch") != f"conv{f}x{KERNEL}x{KERNEL}-gmp-dense1":
        raise ShapeMismatch(f"{path}: arch {doc.get('arch')!r} does not match tensors")
    for name, a in tensors.items():
        if not np.all(np.isfinite(a)):
            raise CorruptManifest(f"{path}: non-finite values in {name}")

    cfg = None
    if "n" in doc:
        cfg = {k: doc[k] for k in ("t", "n", "norm_fingerprint", "norm_min", "norm_max", "seed")
               if k in doc}
    params = ModelParams(**tensors, trained_with=cfg)
    if cfg is not None and (expect_t is not None or expect_n is not None):
        check_config(params, expect_t if expect_t is not None else cfg["t"],
                     expect_n if expect_n is not None else cfg["n"])
    return params
