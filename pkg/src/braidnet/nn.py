"""Small float64 NN engine: conv / maxpool / dense / activations with reverse mode.

Every layer accepts optional leading "strand" axes on both the activations and
the parameters, so ``S`` parallel sub-networks run as one batched matmul:

    x:       (*lead, B, C, H, W)      or (*lead, B, D) for dense
    weight:  (*lead, F, C, k, k)      or (*lead, D, O)
    bias:    (*lead, F)               or (*lead, O)

Leading axes broadcast like ``np.matmul``. With no leading axes the functions
are the textbook single-network layers.
"""

from __future__ import annotations

import os
import tempfile
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
EPS = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


class GradientTape:
    """Records backward closures for one forward pass.

    ``backward`` may be called once. Parameter gradients end up in ``grads``
    keyed by the ``key`` passed to each parametric layer.
    """

    def __init__(self, keep_input_grad: bool = False):
        self._ops: list[Callable] = []
        self._used = False
        self.keep_input_grad = keep_input_grad
        self.grads: dict = {}
        self.input_grad: np.ndarray | None = None

    def record(self, op: Callable) -> None:
        if self._used:
            raise TapeError("tape already consumed")
        self._ops.append(op)

    def add_grad(self, key, dweight, dbias) -> None:
        if key is None:
            return
        if key in self.grads:
            w, b = self.grads[key]
            self.grads[key] = (w + dweight, b + dbias)
        else:
            self.grads[key] = (dweight, dbias)

    def backward(self, grad) -> dict:
        if self._used:
            raise TapeError("backward already ran on this tape")
        self._used = True
        grad = as_tensor(grad)
        for n, op in enumerate(reversed(self._ops)):
            first = n == len(self._ops) - 1
            grad = op(grad, not first or self.keep_input_grad)
        self.input_grad = grad
        self._ops.clear()
        return self.grads


def backward(tape: GradientTape, grad) -> dict:
    return tape.backward(grad)


def _sum_to(g: np.ndarray, ndim: int) -> np.ndarray:
    # collapse broadcast leading axes back onto the input's rank
    while g.ndim > ndim:
        g = g.sum(axis=0)
    return g


# ---------------------------------------------------------------- conv


def conv_output_size(size: int, kernel: int, padding: int = 0, stride: int = 1) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    win = sliding_window_view(x, (k, k), axis=(-2, -1))  # (..., C, Ho, Wo, k, k)
    win = np.moveaxis(win, -5, -3)  # (..., B, Ho, Wo, C, k, k)
    return win.reshape(*win.shape[:-6], -1, win.shape[-3] * k * k)


def conv2d_forward(x, weight, bias, *, padding: int = 0, tape: GradientTape | None = None, key=None):
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim < 4 or weight.ndim < 4:
        raise ShapeError(f"conv expects (..., B, C, H, W) input, got {x.shape}")
    f, c, k, k2 = weight.shape[-4:]
    if k != k2 or x.shape[-3] != c:
        raise ShapeError(f"conv weight {weight.shape} incompatible with input {x.shape}")
    if bias.shape[-1] != f:
        raise ShapeError(f"conv bias {bias.shape} does not match {f} filters")
    if padding:
        pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding)] * 2
        xp = np.pad(x, pad)
    else:
        xp = x
    h, w = xp.shape[-2:]
    if h < k or w < k:
        raise ShapeError(f"input spatial size {(h, w)} smaller than kernel {k}")
    ho, wo = h - k + 1, w - k + 1
    b = x.shape[-4]
    cols = _im2col(xp, k)  # (*lead, B*Ho*Wo, C*k*k)
    w2 = weight.reshape(*weight.shape[:-4], f, c * k * k)
    out = np.matmul(cols, np.swapaxes(w2, -1, -2)) + bias[..., None, :]
    lead = out.shape[:-2]
    out = np.moveaxis(out.reshape(*lead, b, ho, wo, f), -1, -3)

    if tape is not None:

        def back(g, need_input):
            g2 = np.moveaxis(g, -3, -1).reshape(*lead, b * ho * wo, f)
            dw = np.matmul(np.swapaxes(g2, -1, -2), cols).reshape(*lead, f, c, k, k)
            db = g2.sum(axis=-2)
            tape.add_grad(key, _sum_to(dw, weight.ndim), _sum_to(db, bias.ndim))
            if not need_input:
                return None
            dcols = np.matmul(g2, w2).reshape(*lead, b, ho, wo, c, k, k)
            dx = np.zeros((*lead, b, c, h, w), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    dx[..., i : i + ho, j : j + wo] += np.moveaxis(dcols[..., i, j], -1, -3)
            if padding:
                dx = dx[..., padding:-padding, padding:-padding]
            return _sum_to(dx, x.ndim)

        tape.record(back)
    return out


# ---------------------------------------------------------------- pool


def maxpool_forward(x, window: int = 2, stride: int = 2, *, tape: GradientTape | None = None):
    """Windowed max; ties go to the first element of the window in row-major order."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"maxpool expects (..., H, W), got {x.shape}")
    h, w = x.shape[-2:]
    if h < window or w < window:
        raise ShapeError(f"spatial size {(h, w)} smaller than pool window {window}")
    if window == stride:
        return _maxpool_tiled(x, window, tape)
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    win = sliding_window_view(x, (window, window), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    flat = win.reshape(*win.shape[:-2], window * window)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    if tape is not None:

        def back(g, need_input):
            if not need_input:
                return None
            dx = np.zeros(x.shape, dtype=DTYPE)
            di, dj = np.divmod(arg, window)
            rows = np.arange(ho)[:, None] * stride + di
            cols = np.arange(wo)[None, :] * stride + dj
            lead = np.indices(x.shape[:-2])
            idx = tuple(a[..., None, None] for a in lead) + (rows, cols)
            np.add.at(dx, idx, g)
            return dx

        tape.record(back)
    return out


def _maxpool_tiled(x, k, tape):
    # non-overlapping windows: one strided slice per window offset
    ho, wo = x.shape[-2] // k, x.shape[-1] // k
    offsets = [(i, j) for i in range(k) for j in range(k)]
    parts = [x[..., i : ho * k : k, j : wo * k : k] for i, j in offsets]
    out = parts[0].copy()
    for p in parts[1:]:
        np.maximum(out, p, out=out)

    if tape is not None:

        def back(g, need_input):
            if not need_input:
                return None
            dx = np.zeros(x.shape, dtype=DTYPE)
            taken = np.zeros(out.shape, dtype=bool)
            for (i, j), p in zip(offsets, parts):
                hit = (p == out) & ~taken
                dx[..., i : ho * k : k, j : wo * k : k] = g * hit
                taken |= hit
            return dx

        tape.record(back)
    return out


# ---------------------------------------------------------------- dense & friends


def flatten(x, start: int, *, tape: GradientTape | None = None):
    """Collapse axes ``start..`` into one feature axis."""
    x = as_tensor(x)
    shape = x.shape
    out = x.reshape(*shape[:start], -1)
    if tape is not None:
        tape.record(lambda g, need: g.reshape(shape) if need else None)
    return out


def dense_forward(x, weight, bias, *, tape: GradientTape | None = None, key=None):
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.shape[-1] != weight.shape[-2] or bias.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"dense weight {weight.shape} / bias {bias.shape} vs input {x.shape}")
    out = np.matmul(x, weight) + bias[..., None, :]

    if tape is not None:

        def back(g, need_input):
            dw = np.matmul(np.swapaxes(x, -1, -2), g)
            db = g.sum(axis=-2)
            tape.add_grad(key, _sum_to(dw, weight.ndim), _sum_to(db, bias.ndim))
            if not need_input:
                return None
            return _sum_to(np.matmul(g, np.swapaxes(weight, -1, -2)), x.ndim)

        tape.record(back)
    return out


def relu(x, *, tape: GradientTape | None = None):
    x = as_tensor(x)
    mask = x > 0
    out = x * mask
    if tape is not None:
        tape.record(lambda g, need: g * mask if need else None)
    return out


def sigmoid(x, *, tape: GradientTape | None = None):
    x = as_tensor(x)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    if tape is not None:
        tape.record(lambda g, need: g * out * (1.0 - out) if need else None)
    return out


def softmax(x, *, tape: GradientTape | None = None):
    x = as_tensor(x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    if tape is not None:

        def back(g, need_input):
            if not need_input:
                return None
            return out * (g - (g * out).sum(axis=-1, keepdims=True))

        tape.record(back)
    return out


# ---------------------------------------------------------------- losses


def _check_binary(target) -> np.ndarray:
    t = as_tensor(target)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("binary targets must be 0 or 1")
    return t


def bce_loss(score, target, eps: float = EPS) -> float:
    """Mean binary cross-entropy of scores clamped to ``[eps, 1 - eps]``."""
    t = _check_binary(target)
    p = np.clip(as_tensor(score), eps, 1.0 - eps)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log1p(-p))))


def bce_grad(score, target, eps: float = EPS) -> np.ndarray:
    """Gradient of :func:`bce_loss` with respect to ``score``."""
    t = _check_binary(target)
    s = as_tensor(score)
    p = np.clip(s, eps, 1.0 - eps)
    g = (-t / p + (1.0 - t) / (1.0 - p)) / s.size
    return np.where((s > eps) & (s < 1.0 - eps), g, 0.0)


def _check_labels(probs: np.ndarray, labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("class labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= probs.shape[-1]):
        raise ValueError(f"class label outside 0..{probs.shape[-1] - 1}")
    return y


def ce_loss(probs, labels, eps: float = EPS) -> float:
    """Mean negative log-likelihood of the labelled class."""
    p = np.atleast_2d(as_tensor(probs))
    y = np.atleast_1d(_check_labels(p, labels))
    picked = np.clip(p[np.arange(len(y)), y], eps, 1.0)
    return float(np.mean(-np.log(picked)))


def ce_grad(probs, labels, eps: float = EPS) -> np.ndarray:
    probs = as_tensor(probs)
    p = np.atleast_2d(probs)
    y = np.atleast_1d(_check_labels(p, labels))
    rows = np.arange(len(y))
    picked = p[rows, y]
    g = np.zeros_like(p)
    g[rows, y] = np.where(picked > eps, -1.0 / np.maximum(picked, eps), 0.0) / len(y)
    return g.reshape(probs.shape)


# ---------------------------------------------------------------- optimiser & init


def sgd_step(params, grads, lr: float):
    """In-place ``w <- w - lr * g`` over paired sequences of arrays."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for w, g in zip(params, grads):
        if np.shape(w) != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {np.shape(w)}")
    for w, g in zip(params, grads):
        w -= lr * g
    return params


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- tensor files


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors to an ``.npz`` file atomically."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **{k: np.require(v, requirements="C") for k, v in tensors.items()})
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}
