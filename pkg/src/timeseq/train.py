"""Truncated-BPTT training, optimizers, and next-event evaluation metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from .losses import SigmaState, loss_and_grads, seed_sigma
from .model import Batch, ConfigError, Model, ModelConfig
from .numerics import global_norm

log = logging.getLogger(__name__)

OPTIMIZERS = ("adagrad", "adam", "sgd")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adagrad"
    learning_rate: float = 0.024
    clip_norm: float = 1.0
    batch_size: int = 32
    unroll_steps: int = 30
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    max_steps: int | None = None
    dtype: str = "float32"
    sigma_update_interval: int = 1

    def __post_init__(self):
        self.optimizer = self.optimizer.lower()
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ConfigError("learning_rate and clip_norm must be positive")
        if self.unroll_steps < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("unroll_steps, batch_size and max_epochs must be at least 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- optimizers ------------------------------------------------------------


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            params[k] -= self.lr * g


class Adagrad:
    """Per-coordinate step sizes from accumulated squared gradients."""

    def __init__(self, lr: float, initial_accumulator: float = 0.1, eps: float = 1e-8):
        self.lr, self.init, self.eps = lr, initial_accumulator, eps
        self.acc: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            acc = self.acc.get(k)
            if acc is None:
                acc = self.acc[k] = np.full_like(g, self.init)
            acc += g * g
            params[k] -= self.lr * g / (np.sqrt(acc) + self.eps)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    return {"adagrad": Adagrad, "adam": Adam, "sgd": SGD}[cfg.optimizer](cfg.learning_rate)


def clip_gradients(grads: dict, clip_norm: float) -> dict:
    """Rescale all gradients together when their global L2 norm exceeds ``clip_norm``."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


# -- data plumbing ---------------------------------------------------------


def as_arrays(seq) -> tuple[np.ndarray, np.ndarray]:
    """(ids, durations) from a token list or an existing array pair."""
    if isinstance(seq, tuple):
        return seq
    return (np.fromiter((tk.index for tk in seq), dtype=np.int64, count=len(seq)),
            np.fromiter((tk.duration for tk in seq), dtype=float, count=len(seq)))


# -- evaluation ------------------------------------------------------------


def precision_at_k(ranked: Sequence[int], relevant: Iterable[int], K: int) -> float:
    relevant = set(relevant)
    return len(set(ranked[:K]) & relevant) / K


def map_at_k(ranked: Sequence[int], relevant: Iterable[int], K: int) -> float:
    """Average precision of a ranking truncated at K."""
    relevant = set(relevant)
    if not relevant:
        return 0.0
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranked list contains duplicates")
    hits, score = 0, 0.0
    for i, item in enumerate(ranked[:K], start=1):
        if item in relevant:
            hits += 1
            score += hits / i
    return score / min(K, len(relevant))


@dataclass
class EvalReport:
    accuracy: float
    precision_at_k: dict = field(default_factory=dict)
    map_at_k: dict = field(default_factory=dict)
    hit_rate_at_k: dict = field(default_factory=dict)
    event_loss: float = float("nan")
    duration_mae: float = float("nan")
    n_steps: int = 0

    def to_kv(self) -> str:
        lines = [f"accuracy = {self.accuracy!r}"]
        lines += [f"precision@{k} = {v!r}" for k, v in sorted(self.precision_at_k.items())]
        lines += [f"hit_rate@{k} = {v!r}" for k, v in sorted(self.hit_rate_at_k.items())]
        lines += [f"map@{k} = {v!r}" for k, v in sorted(self.map_at_k.items())]
        lines += [f"event_loss = {self.event_loss!r}", f"duration_mae = {self.duration_mae!r}",
                  f"n_steps = {self.n_steps}"]
        return "\n".join(lines) + "\n"


def target_ranks(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """0-based rank of each target under descending logits, ties to the lower index."""
    tl = np.take_along_axis(logits, targets[..., None], axis=-1)
    above = (logits > tl).sum(axis=-1)
    V = logits.shape[-1]
    lower = np.arange(V) < targets[..., None]
    return above + ((logits == tl) & lower).sum(axis=-1)


def evaluate(model: Model, data: Sequence, ks=(1, 5, 10, 20), map_ks=(5, 10, 20),
             batch_size: int = 128, chunk: int = 200) -> EvalReport:
    """Predict every next event of every sequence from its history."""
    cfg = model.config
    seqs = [as_arrays(s) for s in data]
    seqs = [s for s in seqs if len(s[0]) >= 2]
    n = 0
    hits0 = 0.0
    hit = {k: 0.0 for k in ks}
    ap = {k: 0.0 for k in map_ks}
    loss_sum = mae_sum = 0.0
    for start in range(0, len(seqs), batch_size):
        batch = Batch.from_arrays(seqs[start:start + batch_size], cfg.exclude_idle_targets)
        state = None
        for t0 in range(0, batch.shape[1], chunk):
            win = batch.window(t0, t0 + chunk)
            out, _ = model.forward(win.idx, win.dur, state)
            state = out["state"]
            m = win.mask > 0
            if not m.any():
                continue
            logits = out["logits"][m].astype(float)
            tgt = win.next_idx[m]
            rank = target_ranks(logits, tgt)
            n += int(m.sum())
            hits0 += float((rank == 0).sum())
            for k in ks:
                hit[k] += float((rank < k).sum())
            for k in map_ks:
                ap[k] += float(np.where(rank < k, 1.0 / (rank + 1), 0.0).sum())
            lp = logits - logits.max(axis=-1, keepdims=True)
            lp -= np.log(np.exp(lp).sum(axis=-1, keepdims=True))
            loss_sum -= float(np.take_along_axis(lp, tgt[:, None], axis=-1).sum())
            mae_sum += float(np.abs(out["dur_pred"][m] - win.next_dur[m]).sum())
    if n == 0:
        return EvalReport(float("nan"))
    return EvalReport(
        accuracy=hits0 / n,
        precision_at_k={k: hit[k] / n / k for k in ks},
        hit_rate_at_k={k: hit[k] / n for k in ks},
        map_at_k={k: ap[k] / n for k in map_ks},
        event_loss=loss_sum / n,
        duration_mae=mae_sum / n,
        n_steps=n,
    )


def evaluate_sets(model: Model, histories: Sequence, target_sets: Sequence[set], ks=(5, 10, 20),
                  map_ks=(5, 10, 20), exclude_history: bool = True) -> EvalReport:
    """Recommendation-style scoring: rank items after each history against a target set."""
    prec = {k: 0.0 for k in ks}
    ap = {k: 0.0 for k in map_ks}
    top1 = 0.0
    for hist, targets in zip(histories, target_sets):
        ids, ds = as_arrays(hist)
        out, _ = model.forward(ids[None, :], ds[None, :])
        logits = out["logits"][0, -1].astype(float)
        order = [int(i) for i in np.argsort(-logits, kind="stable")]
        if exclude_history:
            seen = set(int(i) for i in ids)
            order = [i for i in order if i not in seen]
        top1 += float(order[0] in targets) if order else 0.0
        for k in ks:
            prec[k] += precision_at_k(order, targets, k)
        for k in map_ks:
            ap[k] += map_at_k(order, targets, k)
    n = len(histories)
    return EvalReport(accuracy=top1 / n, precision_at_k={k: v / n for k, v in prec.items()},
                      map_at_k={k: v / n for k, v in ap.items()}, n_steps=n)


# -- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    history: list
    sigma: float | None
    best_epoch: int
    steps: int


HISTORY_COLUMNS = ("epoch", "train_loss", "valid_loss", "valid_accuracy", "valid_p_at_5", "sigma")


def write_history(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(history)


def train(model_config: ModelConfig, train_config: TrainConfig, train_data: Sequence, valid_data: Sequence,
          vocab_size: int, model: Model | None = None, sigma0: float | None = None,
          eval_every_epoch: bool = True) -> TrainResult:
    """Fit a model with truncated BPTT and keep the best-validation parameters."""
    tc = train_config
    rng = np.random.default_rng(tc.seed)
    dtype = np.dtype(tc.dtype)
    if model is None:
        model = Model(model_config, vocab_size, seed=int(rng.integers(2**31)), dtype=dtype)
    cfg = model.config
    opt = make_optimizer(tc)
    seqs = [as_arrays(s) for s in train_data]
    seqs = [s for s in seqs if len(s[0]) >= 2]
    if not seqs:
        raise ValueError("training data has no sequence with at least two events")

    sigma_state = None
    if cfg.regularizer == "nll":
        if sigma0 is None:
            sigma0 = seed_sigma(np.concatenate([d for _, d in seqs]), cfg.duration_target_log)
        sigma_state = SigmaState(sigma0, update_interval=tc.sigma_update_interval)

    history = []
    best = (math.inf, model.copy(), 0)
    bad_epochs = 0
    steps = 0
    for epoch in range(1, tc.max_epochs + 1):
        order = rng.permutation(len(seqs))
        loss_sum = weight_sum = 0.0
        for start in range(0, len(order), tc.batch_size):
            batch = Batch.from_arrays([seqs[i] for i in order[start:start + tc.batch_size]], cfg.exclude_idle_targets)
            state = None
            for t0 in range(0, batch.shape[1], tc.unroll_steps):
                win = batch.window(t0, t0 + tc.unroll_steps)
                sigma = sigma_state.sigma if sigma_state else 1.0
                loss, grads, info = loss_and_grads(model, win, sigma, state, train=True, rng=rng)
                state = info["state"]
                if info["n"] == 0:
                    continue
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps + 1}")
                if sigma_state is not None:
                    sigma_state.record(info["errors"])
                opt.step(model.params, _cast(clip_gradients(grads, tc.clip_norm), dtype))
                steps += 1
                loss_sum += loss * info["n"]
                weight_sum += info["n"]
                if tc.max_steps is not None and steps >= tc.max_steps:
                    break
            if tc.max_steps is not None and steps >= tc.max_steps:
                break
        if sigma_state is not None:
            sigma_state.tick()
        row = {"epoch": epoch, "train_loss": loss_sum / max(weight_sum, 1.0),
               "sigma": sigma_state.sigma if sigma_state else ""}
        if eval_every_epoch and valid_data:
            rep = evaluate(model, valid_data)
            row.update(valid_loss=rep.event_loss, valid_accuracy=rep.accuracy,
                       valid_p_at_5=rep.precision_at_k.get(5, float("nan")))
            score = rep.event_loss
        else:
            row.update(valid_loss="", valid_accuracy="", valid_p_at_5="")
            score = row["train_loss"]
        history.append(row)
        log.info("epoch %d train_loss %.4f valid_loss %s", epoch, row["train_loss"], row["valid_loss"])
        if score < best[0]:
            best = (score, model.copy(), epoch)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= tc.patience:
                break
        if tc.max_steps is not None and steps >= tc.max_steps:
            break
    return TrainResult(best[1], history, sigma_state.sigma if sigma_state else None, best[2], steps)


def _cast(grads: dict, dtype) -> dict:
    return {k: g.astype(dtype, copy=False) for k, g in grads.items()}
