"""LR / MLP / CNN classifiers with exact per-sample gradients.

All parameters live in one flat float64 vector. Each layer contributes its
weight (row-major) followed by its bias, in forward order. Convolutions are
valid-padding stride 1 and pooling is 2x2 max, stride 2, floor mode; the CNN
works channel-last internally.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, FormatError

CNN_CONVENTION = "conv valid/stride1, maxpool 2x2 stride2 floor, tanh after every hidden layer"


class Arch(str, enum.Enum):
    LR = "LR"
    MLP = "MLP"
    CNN = "CNN"


@dataclass(frozen=True)
class ModelSpec:
    arch: Arch
    input_shape: tuple
    num_classes: int
    hidden: int = 256

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.arch is Arch.CNN:
            if len(self.input_shape) != 3:
                raise ContractError("CNN input_shape must be (channels, height, width)")
            _cnn_dims(self.input_shape)

    @property
    def input_size(self) -> int:
        return math.prod(self.input_shape)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.value,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "hidden": self.hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["arch"], tuple(d["input_shape"]), d["num_classes"], d.get("hidden", 256))


def _cnn_dims(input_shape):
    c, h, w = input_shape
    h1, w1 = h - 4, w - 4
    p1h, p1w = h1 // 2, w1 // 2
    h2, w2 = p1h - 3, p1w - 3
    p2h, p2w = h2 // 2, w2 // 2
    if min(h1, w1, p1h, p1w, h2, w2, p2h, p2w) < 1:
        raise ContractError(f"input {input_shape} is too small for the fixed CNN topology")
    return c, (h1, w1), (p1h, p1w), (h2, w2), (p2h, p2w)


def param_layout(spec: ModelSpec) -> list[tuple[str, tuple]]:
    L = spec.num_classes
    if spec.arch is Arch.LR:
        return [("w", (L, spec.input_size)), ("b", (L,))]
    if spec.arch is Arch.MLP:
        H = spec.hidden
        return [("w1", (H, spec.input_size)), ("b1", (H,)), ("w2", (L, H)), ("b2", (L,))]
    c, _, _, _, (ph, pw) = _cnn_dims(spec.input_shape)
    return [
        ("k1", (16, c, 5, 5)),
        ("c1", (16,)),
        ("k2", (32, 16, 4, 4)),
        ("c2", (32,)),
        ("w3", (32, 32 * ph * pw)),
        ("b3", (32,)),
        ("w4", (L, 32)),
        ("b4", (L,)),
    ]


def num_params(spec: ModelSpec) -> int:
    return sum(math.prod(shape) for _, shape in param_layout(spec))


@dataclass(eq=False)
class ModelParams:
    spec: ModelSpec
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        P = num_params(self.spec)
        if self.theta.shape != (P,):
            raise ContractError(f"theta has shape {self.theta.shape}, expected ({P},)")


def unpack(spec: ModelSpec, theta: np.ndarray) -> dict[str, np.ndarray]:
    out, offset = {}, 0
    for name, shape in param_layout(spec):
        size = math.prod(shape)
        out[name] = theta[offset : offset + size].reshape(shape)
        offset += size
    return out


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Weights ~ U[-a, a] with a = sqrt(1 / fan_in); biases zero."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in param_layout(spec):
        if len(shape) == 1:
            chunks.append(np.zeros(shape[0]))
        else:
            fan_in = math.prod(shape[1:])
            a = math.sqrt(1.0 / fan_in)
            chunks.append(rng.uniform(-a, a, size=math.prod(shape)))
    return ModelParams(spec, np.concatenate(chunks))


# ---------------------------------------------------------------- building blocks


def _as_batch(spec: ModelSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    else:
        X = X.reshape(X.shape[0], -1)
    if X.shape[1] != spec.input_size:
        raise ContractError(f"input has {X.shape[1]} features, model expects {spec.input_size}")
    return X


def _conv_cols(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # x: (B, H, W, C) -> (B, Ho*Wo, C*kh*kw) ordered (C, kh, kw) to match kernel layout.
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    B, Ho, Wo = win.shape[:3]
    return win.reshape(B, Ho * Wo, -1)


def _conv_input_grad(dcols: np.ndarray, in_shape, kh: int, kw: int) -> np.ndarray:
    B, H, W, C = in_shape
    Ho, Wo = H - kh + 1, W - kw + 1
    d6 = dcols.reshape(B, Ho, Wo, C, kh, kw)
    dx = np.zeros(in_shape)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + Ho, j : j + Wo, :] += d6[:, :, :, :, i, j]
    return dx


def _pool_forward(a: np.ndarray):
    B, H, W, C = a.shape
    Ho, Wo = H // 2, W // 2
    win = a[:, : 2 * Ho, : 2 * Wo, :].reshape(B, Ho, 2, Wo, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, Ho, Wo, C, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout: np.ndarray, arg: np.ndarray, in_shape) -> np.ndarray:
    B, H, W, C = in_shape
    Ho, Wo = H // 2, W // 2
    dwin = np.zeros((B, Ho, Wo, C, 4))
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    da = np.zeros(in_shape)
    da[:, : 2 * Ho, : 2 * Wo, :] = dwin.reshape(B, Ho, Wo, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * Ho, 2 * Wo, C)
    return da


def _logits(spec: ModelSpec, p: dict, X: np.ndarray, keep: bool):
    """Forward pass on a flat batch; returns logits and (optionally) the cache."""
    if spec.arch is Arch.LR:
        return X @ p["w"].T + p["b"], {"X": X} if keep else None
    if spec.arch is Arch.MLP:
        h = np.tanh(X @ p["w1"].T + p["b1"])
        return h @ p["w2"].T + p["b2"], {"X": X, "h": h} if keep else None

    c, hw = spec.input_shape[0], spec.input_shape[1:]
    B = X.shape[0]
    x0 = X.reshape(B, c, *hw).transpose(0, 2, 3, 1)
    cols1 = _conv_cols(x0, 5, 5)
    (h1, w1) = (hw[0] - 4, hw[1] - 4)
    a1 = np.tanh(cols1 @ p["k1"].reshape(16, -1).T + p["c1"]).reshape(B, h1, w1, 16)
    s1, arg1 = _pool_forward(a1)
    cols2 = _conv_cols(s1, 4, 4)
    h2, w2 = s1.shape[1] - 3, s1.shape[2] - 3
    a2 = np.tanh(cols2 @ p["k2"].reshape(32, -1).T + p["c2"]).reshape(B, h2, w2, 32)
    s2, arg2 = _pool_forward(a2)
    f = s2.reshape(B, -1)
    a3 = np.tanh(f @ p["w3"].T + p["b3"])
    z = a3 @ p["w4"].T + p["b4"]
    if not keep:
        return z, None
    cache = dict(x0=x0, cols1=cols1, a1=a1, arg1=arg1, s1=s1, cols2=cols2, a2=a2, arg2=arg2, f=f, a3=a3)
    return z, cache


def _softmax_xent(z: np.ndarray, y: np.ndarray):
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = lse - shifted[np.arange(z.shape[0]), y]
    return np.maximum(loss, 0.0), shifted, lse


def _per_sample_backward(spec: ModelSpec, p: dict, cache: dict, dz: np.ndarray) -> np.ndarray:
    B = dz.shape[0]
    if spec.arch is Arch.LR:
        X = cache["X"]
        return np.concatenate([(dz[:, :, None] * X[:, None, :]).reshape(B, -1), dz], axis=1)
    if spec.arch is Arch.MLP:
        X, h = cache["X"], cache["h"]
        dw2 = (dz[:, :, None] * h[:, None, :]).reshape(B, -1)
        dpre = (dz @ p["w2"]) * (1.0 - h * h)
        dw1 = (dpre[:, :, None] * X[:, None, :]).reshape(B, -1)
        return np.concatenate([dw1, dpre, dw2, dz], axis=1)

    a3, f = cache["a3"], cache["f"]
    dw4 = (dz[:, :, None] * a3[:, None, :]).reshape(B, -1)
    d3 = (dz @ p["w4"]) * (1.0 - a3 * a3)
    dw3 = (d3[:, :, None] * f[:, None, :]).reshape(B, -1)
    ds2 = (d3 @ p["w3"]).reshape(cache["arg2"].shape)
    a2 = cache["a2"]
    da2 = _pool_backward(ds2, cache["arg2"], a2.shape)
    dpre2 = (da2 * (1.0 - a2 * a2)).reshape(B, -1, 32)
    dk2 = np.matmul(dpre2.transpose(0, 2, 1), cache["cols2"]).reshape(B, -1)
    dc2 = dpre2.sum(axis=1)
    dcols2 = dpre2 @ p["k2"].reshape(32, -1)
    ds1 = _conv_input_grad(dcols2, cache["s1"].shape, 4, 4)
    a1 = cache["a1"]
    da1 = _pool_backward(ds1, cache["arg1"], a1.shape)
    dpre1 = (da1 * (1.0 - a1 * a1)).reshape(B, -1, 16)
    dk1 = np.matmul(dpre1.transpose(0, 2, 1), cache["cols1"]).reshape(B, -1)
    dc1 = dpre1.sum(axis=1)
    return np.concatenate([dk1, dc1, dk2, dc2, dw3, d3, dw4, dz], axis=1)


def _check_labels(spec: ModelSpec, y, B: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (B,):
        raise ContractError(f"got {y.shape[0]} labels for {B} inputs")
    if y.size and (y.min() < 0 or y.max() >= spec.num_classes):
        raise ContractError("label outside [0, L)")
    return y


# ---------------------------------------------------------------- public API

_CHUNK = 512


def logits(params: ModelParams, X) -> np.ndarray:
    spec = params.spec
    X = _as_batch(spec, X)
    p = unpack(spec, params.theta)
    parts = [_logits(spec, p, X[i : i + _CHUNK], False)[0] for i in range(0, X.shape[0], _CHUNK)]
    return np.concatenate(parts) if parts else np.zeros((0, spec.num_classes))


def batch_losses(params: ModelParams, X, y) -> np.ndarray:
    z = logits(params, X)
    y = _check_labels(params.spec, y, z.shape[0])
    return _softmax_xent(z, y)[0]


def batch_per_sample_grads(params: ModelParams, X, y) -> np.ndarray:
    """Per-sample gradients of the cross-entropy loss, shape (B, P)."""
    spec = params.spec
    X = _as_batch(spec, X)
    y = _check_labels(spec, y, X.shape[0])
    p = unpack(spec, params.theta)
    z, cache = _logits(spec, p, X, True)
    _, shifted, lse = _softmax_xent(z, y)
    dz = np.exp(shifted - lse[:, None])
    dz[np.arange(X.shape[0]), y] -= 1.0
    return _per_sample_backward(spec, p, cache, dz)


def batch_predict(params: ModelParams, X) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the smallest class.
    return logits(params, X).argmax(axis=1)


def forward_loss(params: ModelParams, x, y: int) -> float:
    """Softmax cross-entropy (natural log) of a single example."""
    if np.asarray(x).size != params.spec.input_size:
        raise ContractError(f"input has {np.asarray(x).size} features, model expects {params.spec.input_size}")
    return float(batch_losses(params, np.reshape(x, (1, -1)), [y])[0])


def per_sample_grad(params: ModelParams, x, y: int) -> np.ndarray:
    if np.asarray(x).size != params.spec.input_size:
        raise ContractError(f"input has {np.asarray(x).size} features, model expects {params.spec.input_size}")
    return batch_per_sample_grads(params, np.reshape(x, (1, -1)), [y])[0]


def predict(params: ModelParams, x) -> int:
    if np.asarray(x).size != params.spec.input_size:
        raise ContractError(f"input has {np.asarray(x).size} features, model expects {params.spec.input_size}")
    return int(batch_predict(params, np.reshape(x, (1, -1)))[0])


# ---------------------------------------------------------------- snapshots


def save_params(params: ModelParams, path, extra_meta: dict | None = None) -> Path:
    """One-line JSON header, newline, then the raw little-endian float64 vector."""
    header = {"spec": params.spec.to_dict(), "P": int(params.theta.size), "dtype": "<f8", "cnn_convention": CNN_CONVENTION}
    if extra_meta:
        header.update(extra_meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(params.theta.astype("<f8", copy=False).tobytes())
    return path


def load_params(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing snapshot header")
    header = json.loads(raw[:nl])
    body = raw[nl + 1 :]
    if len(body) != 8 * header["P"]:
        raise FormatError(f"{path}: expected {header['P']} parameters")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return ModelParams(ModelSpec.from_dict(header["spec"]), theta), header
