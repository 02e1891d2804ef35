"""Small dense numeric kernel: parameters, layers with hand-written backward
passes, softmax, Adam, and a central-difference gradient checker.

All arrays are float64 numpy arrays stored row-major. Batches are 2-D with
one sample per row.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class DimensionError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


class ParamTensor:
    """A learnable matrix with its gradient accumulator and Adam moments."""

    __slots__ = ("name", "value", "grad", "adam_m", "adam_v", "step_count")

    def __init__(self, value: np.ndarray, name: str = ""):
        value = np.array(value, dtype=np.float64)
        if value.ndim == 1:
            value = value.reshape(1, -1)
        if value.ndim != 2:
            raise DimensionError(f"{name or 'param'}: expected a matrix, got shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise EvaluationError(f"{name or 'param'}: non-finite entries")
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.adam_m = np.zeros_like(value)
        self.adam_v = np.zeros_like(value)
        self.step_count = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def copy(self, name: str | None = None) -> "ParamTensor":
        p = ParamTensor(self.value.copy(), self.name if name is None else name)
        return p

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.shape})"


def init_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, name: str = "") -> ParamTensor:
    bound = 1.0 / math.sqrt(fan_in)
    return ParamTensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name)


def zeros(rows: int, cols: int, name: str = "") -> ParamTensor:
    return ParamTensor(np.zeros((rows, cols)), name)


class Linear:
    """y = x W + b, with W of shape (in, out) and b of shape (1, out)."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, name: str = "", bias: bool = True):
        self.n_in = n_in
        self.n_out = n_out
        self.W = init_uniform(rng, n_in, n_out, f"{name}.W")
        self.b = zeros(1, n_out, f"{name}.b") if bias else None

    def params(self) -> list[ParamTensor]:
        return [self.W] if self.b is None else [self.W, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return affine(x, self.W, self.b)

    def backward(self, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
        return affine_backward(x, self.W, self.b, dy)


def affine(x: np.ndarray, W: ParamTensor, b: ParamTensor | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != W.value.shape[0]:
        raise DimensionError(
            f"affine {W.name}: input has {x.shape[1]} columns, weight expects {W.value.shape[0]}"
        )
    y = x @ W.value
    if b is not None:
        y = y + b.value
    return y


def affine_backward(x: np.ndarray, W: ParamTensor, b: ParamTensor | None, dy: np.ndarray) -> np.ndarray:
    """Accumulate dL/dW, dL/db and return dL/dx."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    W.grad += x.T @ dy
    if b is not None:
        b.grad += dy.sum(axis=0, keepdims=True)
    return dy @ W.value.T


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    # valid for 0 < slope < 1
    return np.maximum(x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    """Elementwise derivative evaluated at the pre-activation ``x``."""
    return np.where(x > 0, 1.0, slope)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty vector")
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient w.r.t. logits given softmax output ``p`` and upstream ``dp``."""
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=axis)


def one_hot(indices: np.ndarray, n: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros(indices.shape + (n,))
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


def adam_step(
    p: ParamTensor,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamTensor:
    """One bias-corrected Adam update in place; clears ``p.grad``."""
    p.step_count += 1
    t = p.step_count
    g = p.grad
    p.adam_m *= beta1
    p.adam_m += (1.0 - beta1) * g
    p.adam_v *= beta2
    p.adam_v += (1.0 - beta2) * (g * g)
    m_hat = p.adam_m / (1.0 - beta1**t)
    v_hat = p.adam_v / (1.0 - beta2**t)
    p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    p.grad.fill(0.0)
    return p


def clip_grad_norm(params: Sequence[ParamTensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


def numeric_grad(loss_fn: Callable[[], float], p: ParamTensor, eps: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(p.value)
    flat = p.value.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = loss_fn()
        flat[k] = orig - eps
        down = loss_fn()
        flat[k] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise EvaluationError(f"non-finite loss while perturbing {p.name}[{k}]")
        out.reshape(-1)[k] = (up - down) / (2.0 * eps)
    return out


def grad_check(
    loss_fn: Callable[[], float],
    params: Iterable[ParamTensor],
    eps: float = 1e-5,
    analytic: Callable[[], None] | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` reads the current parameter values and returns a scalar.
    ``analytic`` (optional) fills ``p.grad`` for every parameter; when omitted
    the grads already stored on the parameters are used.
    """
    params = list(params)
    if analytic is not None:
        for p in params:
            p.zero_grad()
        analytic()
    base = loss_fn()
    if not math.isfinite(base):
        raise EvaluationError("loss is not finite at the check point")
    worst = 0.0
    for p in params:
        a = p.grad.copy()
        n = numeric_grad(loss_fn, p, eps)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
