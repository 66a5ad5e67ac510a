"""Event loss, the two next-duration regularizers, and their combination."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import D_MIN
from .model import Batch, Model
from .numerics import affine_backward, log_softmax, safe_log, softmax
from .timerep import project

SIGMA_MIN = 1e-3


def event_loss(event_logits, target_index):
    """Negative log-likelihood of the target under softmax(logits).

    Vectorised: ``event_logits`` may be ``(..., V)`` with matching targets.
    """
    lp = log_softmax(event_logits)
    target_index = np.asarray(target_index)
    return -np.take_along_axis(lp, target_index[..., None], axis=-1)[..., 0]


def reg_nll(pred, true, sigma: float):
    """Gaussian negative log-likelihood of the duration error (constant terms dropped)."""
    diff = np.asarray(pred) - np.asarray(true)
    return diff * diff / (2.0 * sigma * sigma)


def _proj_input(d, log_input: bool):
    return np.log(np.maximum(d, D_MIN)) if log_input else d


def reg_xent(pred, true, W, b, log_input: bool = False, target=None):
    """Cross entropy between the soft projections of the true and predicted durations.

    ``target`` may carry a precomputed projection of ``true``; either way it
    is a constant as far as gradients are concerned.
    """
    pred = np.asarray(pred, dtype=float) if not isinstance(pred, np.ndarray) else pred
    if target is None:
        target = project(np.maximum(true, D_MIN), W, b, log_input)
    p = softmax(_proj_input(pred, log_input)[..., None] @ W + b)
    return -(target * safe_log(p)).sum(axis=-1)


def reg_xent_backward(pred, target, W, b, log_input: bool = False, weight=None):
    """Gradients of the (optionally per-step weighted) summed regularizer.

    Returns gradients w.r.t. ``pred`` and the projection ``(W, b)``.
    """
    inp = _proj_input(pred, log_input)
    p = softmax(inp[..., None] @ W + b)
    dp = p - target
    if weight is not None:
        dp = dp * weight[..., None]
    dinp, dW, db = affine_backward(dp, inp[..., None], W)
    dinp = dinp[..., 0]
    if log_input:
        dinp = np.where(pred > D_MIN, dinp / np.maximum(pred, D_MIN), 0.0)
    return dinp, dW, db


def total_loss(event_losses, reg_losses, lam: float) -> float:
    ev = np.asarray(event_losses, dtype=float)
    if reg_losses is None:
        return float(ev.mean())
    reg = np.asarray(reg_losses, dtype=float)
    if reg.shape != ev.shape:
        raise ValueError("event and regularizer losses need the same step count")
    return float((ev + lam * reg).mean())


@dataclass
class SigmaState:
    """Scale of the Gaussian duration regularizer, refreshed between intervals."""

    sigma: float
    update_interval: int = 1
    sigma_min: float = SIGMA_MIN
    window: list = field(default_factory=list)
    ticks: int = 0

    def __post_init__(self):
        self.sigma = max(float(self.sigma), self.sigma_min)

    def record(self, errors) -> None:
        self.window.append(np.asarray(errors, dtype=float).ravel())

    def tick(self) -> bool:
        """Advance one interval unit; refresh sigma when the interval is complete."""
        self.ticks += 1
        if self.ticks < self.update_interval:
            return False
        self.ticks = 0
        return self.update()

    def update(self) -> bool:
        errs = np.concatenate(self.window) if self.window else np.empty(0)
        self.window = []
        if errs.size == 0:
            return False
        self.sigma = max(self.sigma_min, float(np.std(errs)))
        return True


def update_sigma(state: SigmaState, new_errors) -> SigmaState:
    state.record(new_errors)
    state.tick()
    return state


def seed_sigma(durations, log_target: bool = False) -> float:
    d = np.maximum(np.asarray(durations, dtype=float), D_MIN)
    return max(SIGMA_MIN, float(np.std(np.log(d) if log_target else d)))


def xent_targets(model: Model, batch: Batch) -> np.ndarray:
    W, b = model.projection_params()
    d = np.maximum(batch.next_dur, D_MIN).astype(model.dtype)
    return project(d, W, b, model.config.joint_log_input)


def loss_and_grads(model: Model, batch: Batch, sigma: float = 1.0, state=None, train: bool = False,
                   rng=None, targets=None):
    """Mean per-step loss of a window with all parameter gradients.

    Returns ``(loss, grads, info)``; ``info`` carries the final recurrent
    state, per-step duration errors (for sigma updates) and the event loss.
    """
    cfg = model.config
    out, cache = model.forward(batch.idx, batch.dur, state, train=train, rng=rng)
    mask = batch.mask.astype(model.dtype)
    n = float(mask.sum())
    info = {"state": out["state"], "n": n}
    if n == 0:
        return 0.0, {k: np.zeros_like(v) for k, v in model.params.items()}, info
    w = mask / n
    logits = out["logits"]
    ev = event_loss(logits, batch.next_idx)
    dlogits = softmax(logits)
    np.put_along_axis(dlogits, batch.next_idx[..., None],
                      np.take_along_axis(dlogits, batch.next_idx[..., None], axis=-1) - 1, axis=-1)
    dlogits *= w[..., None]
    loss = float((ev * w).sum())
    info["event_loss"] = loss

    lam = cfg.reg_weight
    ddur_pred = ddur_reg = None
    proj_grads = None
    if cfg.regularizer == "nll":
        true = np.log(np.maximum(batch.next_dur, D_MIN)) if cfg.duration_target_log else batch.next_dur
        err = out["dur_reg"] - true
        info["errors"] = err[mask > 0]
        loss += lam * float((reg_nll(out["dur_reg"], true, sigma) * w).sum())
        ddur_reg = lam * w * err / (sigma * sigma)
    elif cfg.regularizer == "xent":
        W, b = model.projection_params()
        if targets is None:
            targets = xent_targets(model, batch)
        pred = out["dur_pred"]
        loss += lam * float((reg_xent(pred, None, W, b, cfg.joint_log_input, target=targets) * w).sum())
        dpred, dW, db = reg_xent_backward(pred, targets, W, b, cfg.joint_log_input, weight=lam * w)
        ddur_pred = dpred
        proj_grads = (dW, db)

    grads = model.backward(cache, dlogits, ddur_pred, ddur_reg)
    if proj_grads is not None:
        kw, kb = ("xproj_W", "xproj_b") if "xproj_W" in grads else ("proj_W", "proj_b")
        grads[kw] += proj_grads[0]
        grads[kb] += proj_grads[1]
    return loss, grads, info

