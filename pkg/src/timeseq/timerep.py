"""Time-dependent event representations.

Three ways of folding a duration ``d`` into an event embedding ``x``:

* concat: append ``log d`` to ``x``.
* mask: gate ``x`` elementwise with ``sigmoid(relu(log d * W_phi + b_phi) W_mask + b_mask)``.
* joint: average ``x`` with a time embedding ``softmax(d W_proj + b_proj) E_s``.

Every op broadcasts over leading axes, so ``x`` may be ``(E,)`` or
``(batch, time, E)`` with ``d`` shaped accordingly.
"""

from __future__ import annotations

import io

import numpy as np

from .dataio import D_MIN
from .numerics import (
    DimensionError,
    DomainError,
    affine,
    affine_backward,
    relu,
    sigmoid,
    softmax,
    softmax_backward,
)


def _log_duration(d, d_min: float = D_MIN) -> np.ndarray:
    d = np.asarray(d, dtype=float) if not isinstance(d, np.ndarray) else d
    if np.any(d < d_min * (1 - 1e-6)):
        raise DomainError(f"duration below d_min={d_min}; clamp durations before encoding")
    return np.log(d)


def time_context(d, W, b, d_min: float = D_MIN) -> np.ndarray:
    """ReLU feature vector of the log duration, shape ``(..., C)``."""
    ld = _log_duration(d, d_min)
    return relu(affine(ld[..., None], W, b))


def time_mask(c, W, b) -> np.ndarray:
    return sigmoid(affine(c, W, b))


def apply_mask(x, m) -> np.ndarray:
    x, m = np.asarray(x), np.asarray(m)
    if x.shape[-1] != m.shape[-1]:
        raise DimensionError(f"mask width {m.shape[-1]} does not match embedding width {x.shape[-1]}")
    return x * m


def time_projection(d, W, b, log_input: bool = False, d_min: float = D_MIN) -> np.ndarray:
    d = np.asarray(d, dtype=float) if not isinstance(d, np.ndarray) else d
    inp = _log_duration(d, d_min) if log_input else d
    return affine(inp[..., None], W, b)


def soft_one_hot(p) -> np.ndarray:
    return softmax(p)


def time_embedding(s, Es) -> np.ndarray:
    s, Es = np.asarray(s), np.asarray(Es)
    if s.shape[-1] != Es.shape[0]:
        raise DimensionError(f"encoding width {s.shape[-1]} does not match {Es.shape[0]} embedding rows")
    return s @ Es


def joint_embed(x, g) -> np.ndarray:
    x, g = np.asarray(x), np.asarray(g)
    if x.shape[-1] != g.shape[-1]:
        raise DimensionError(f"cannot average widths {x.shape[-1]} and {g.shape[-1]}")
    return (x + g) / 2


def time_concat(x, d, d_min: float = D_MIN) -> np.ndarray:
    x = np.asarray(x)
    ld = _log_duration(d, d_min)
    return np.concatenate([x, np.broadcast_to(ld[..., None], x.shape[:-1] + (1,)).astype(x.dtype)], axis=-1)


def project(d, W, b, log_input: bool = False, d_min: float = D_MIN) -> np.ndarray:
    """Soft one-hot encoding of a duration: softmax of its affine projection."""
    return soft_one_hot(time_projection(d, W, b, log_input, d_min))


def inspect_projection(W, b, d_values, log_input: bool = False) -> np.ndarray:
    """Rows of ``[d, s_1, ..., s_P]`` for each probed duration."""
    d = np.asarray(d_values, dtype=float)
    inp = np.log(d) if log_input else d
    s = softmax(affine(inp[:, None], np.asarray(W, dtype=float), np.asarray(b, dtype=float)))
    return np.column_stack([d, s])


def projection_csv(table: np.ndarray) -> str:
    P = table.shape[1] - 1
    buf = io.StringIO()
    buf.write(",".join(["d_seconds"] + [f"s_{k}" for k in range(1, P + 1)]) + "\n")
    for row in table:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


# -- batched forward/backward used by the model -----------------------------


def mask_forward(x, d, W_phi, b_phi, W_mask, b_mask):
    ld = np.log(d)[..., None].astype(x.dtype)
    pre_c = affine(ld, W_phi, b_phi)
    c = relu(pre_c)
    m = sigmoid(affine(c, W_mask, b_mask))
    return x * m, (x, ld, pre_c, c, m)


def mask_backward(du, cache, W_phi, W_mask):
    x, ld, pre_c, c, m = cache
    dx = du * m
    dpre_m = du * x * m * (1 - m)
    dc, dW_mask, db_mask = affine_backward(dpre_m, c, W_mask)
    dpre_c = dc * (pre_c > 0)
    _, dW_phi, db_phi = affine_backward(dpre_c, ld, W_phi)
    return dx, {"phi_W": dW_phi, "phi_b": db_phi, "mask_W": dW_mask, "mask_b": db_mask}


def joint_forward(x, d, W_proj, b_proj, Es, log_input: bool = False):
    inp = (np.log(d) if log_input else d)[..., None].astype(x.dtype)
    s = softmax(affine(inp, W_proj, b_proj))
    g = s @ Es
    return (x + g) / 2, (inp, s)


def joint_backward(du, cache, W_proj, Es):
    inp, s = cache
    dx = du / 2
    dg = du / 2
    P = s.shape[-1]
    dEs = s.reshape(-1, P).T @ dg.reshape(-1, dg.shape[-1])
    dp = softmax_backward(dg @ Es.T, s)
    _, dW, db = affine_backward(dp, inp, W_proj)
    return dx, {"proj_W": dW, "proj_b": db, "time_emb": dEs}


def concat_forward(x, d):
    ld = np.log(d)[..., None].astype(x.dtype)
    return np.concatenate([x, ld], axis=-1), None


def concat_backward(du, cache):
    return du[..., :-1], {}
