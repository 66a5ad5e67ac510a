"""Dense math primitives shared by every layer of the model.

All functions accept numpy arrays and operate along the last axis, so a
single vector and a ``(batch, time, n)`` stack go through the same code.
Backward helpers take the upstream gradient and whatever the forward pass
produced, and return the gradient with respect to the input.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

LOG_FLOOR = 1e-12


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _check_nonempty(v: np.ndarray) -> None:
    if v.ndim == 0 or v.shape[-1] == 0:
        raise DimensionError(f"expected a non-empty trailing axis, got shape {v.shape}")


def affine(x, W, b) -> np.ndarray:
    """Row-vector convention: ``x @ W + b``."""
    x = np.asarray(x)
    W = np.asarray(W)
    b = np.asarray(b)
    if W.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"W must be 2-D and b 1-D, got {W.shape} and {b.shape}")
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot apply {W.shape} weights / {b.shape} bias to input {x.shape}")
    return x @ W + b


def affine_backward(dout, x, W):
    """Returns (dx, dW, db) summed over all leading axes."""
    dout = np.asarray(dout)
    x = np.asarray(x)
    dx = dout @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dx, x2.T @ d2, d2.sum(axis=0)


def softmax(v) -> np.ndarray:
    v = np.asarray(v)
    _check_nonempty(v)
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dout, s):
    """Vector-Jacobian product of softmax given its output ``s``."""
    return s * (dout - (dout * s).sum(axis=-1, keepdims=True))


def log_softmax(v) -> np.ndarray:
    v = np.asarray(v)
    _check_nonempty(v)
    z = v - v.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigmoid(v) -> np.ndarray:
    v = np.asarray(v)
    # split by sign so exp never overflows
    out = np.empty_like(v, dtype=np.result_type(v, np.float32))
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid_backward(dout, s):
    return dout * s * (1.0 - s)


def tanh(v) -> np.ndarray:
    return np.tanh(v)


def tanh_backward(dout, t):
    return dout * (1.0 - t * t)


def relu(v) -> np.ndarray:
    return np.maximum(v, 0)


def relu_backward(dout, pre):
    return dout * (pre > 0)


def softplus(v) -> np.ndarray:
    v = np.asarray(v)
    return np.logaddexp(0, v)


def softplus_backward(dout, pre):
    return dout * sigmoid(pre)


def safe_log(v) -> np.ndarray:
    return np.log(np.maximum(v, LOG_FLOOR))


def cross_entropy(target, pred, atol: float = 1e-6) -> float:
    """``-sum(target * log(pred))`` for two distributions over the last axis.

    Returns the sum over any leading axes.
    """
    target = np.asarray(target, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if target.shape != pred.shape:
        raise DimensionError(f"shape mismatch {target.shape} vs {pred.shape}")
    _check_nonempty(target)
    for name, p in (("target", target), ("pred", pred)):
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
            raise DomainError(f"{name} is not a probability distribution")
    return float(-(target * safe_log(pred)).sum())


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))


def grad_check(
    loss_fn: Callable[[dict], tuple],
    params: dict,
    eps: float = 1e-6,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` where ``grads`` has the
    same keys and shapes as ``params``. Parameters are perturbed in place and
    restored afterwards. ``floor`` bounds the denominator of the relative
    error away from zero for vanishing gradient components.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise DomainError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite at the base point")
    grads = {k: np.array(v, dtype=float, copy=True) for k, v in grads.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn(params)[0]
            flat[i] = old - eps
            lm = loss_fn(params)[0]
            flat[i] = old
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"loss is not finite while perturbing {name}[{i}]")
            num = (lp - lm) / (2 * eps)
            rel = abs(g[i] - num) / max(floor, abs(g[i]) + abs(num))
            worst = max(worst, rel)
    return worst
