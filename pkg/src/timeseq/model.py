"""LSTM next-event predictor with time-dependent inputs and a duration head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import timerep
from .dataio import D_MIN, IDLE, EventToken
from .numerics import (
    DimensionError,
    affine_backward,
    relu,
    sigmoid,
    softmax,
    softplus,
)

VARIANTS = ("no_time", "time_concat", "time_mask", "time_joint")
REGULARIZERS = ("none", "nll", "xent")
DURATION_HEAD_INPUTS = ("recurrent", "recurrent_plus_hidden")

_ALIASES = {
    "notime": "no_time", "timeconcat": "time_concat", "timemask": "time_mask", "timejoint": "time_joint",
    "rn": "nll", "r_n": "nll", "rx": "xent", "r_x": "xent", "": "none",
}


def _canon(name: str) -> str:
    key = str(name).strip().lower().replace("-", "_")
    return _ALIASES.get(key.replace("_", ""), _ALIASES.get(key, key))


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "time_joint"
    regularizer: str = "none"
    embed_dim: int = 128
    hidden: int = 128
    context_size: int = 32
    proj_size: int = 30
    post_recurrent_projection: Optional[int] = 128
    share_projection_weights: bool = False
    duration_head_input: str = "recurrent"
    joint_log_input: bool = False
    reg_weight: float = 1.0
    dropout: float = 0.0
    duration_head_linear: bool = False
    duration_target_log: bool = False
    exclude_idle_targets: bool = False

    def __post_init__(self):
        self.variant = _canon(self.variant)
        self.regularizer = _canon(self.regularizer)
        if self.post_recurrent_projection in (0, "0", "none", "None"):
            self.post_recurrent_projection = None
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"unknown regularizer {self.regularizer!r}; choose from {REGULARIZERS}")
        if self.duration_head_input not in DURATION_HEAD_INPUTS:
            raise ConfigError(f"unknown duration_head_input {self.duration_head_input!r}")
        dims = [self.embed_dim, self.hidden, self.context_size, self.proj_size]
        if self.post_recurrent_projection is not None:
            dims.append(self.post_recurrent_projection)
        if any(int(v) <= 0 for v in dims):
            raise ConfigError("all dimensions must be positive")
        if self.share_projection_weights and not (self.variant == "time_joint" and self.regularizer == "xent"):
            raise ConfigError("share_projection_weights requires variant=time_joint and regularizer=xent")
        if self.duration_head_input == "recurrent_plus_hidden" and self.post_recurrent_projection is None:
            raise ConfigError("duration_head_input=recurrent_plus_hidden needs a post-recurrent projection")
        if self.reg_weight < 0:
            raise ConfigError("reg_weight must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.duration_head_linear and self.duration_target_log:
            raise ConfigError("duration_head_linear and duration_target_log are mutually exclusive")

    @property
    def input_dim(self) -> int:
        return self.embed_dim + (1 if self.variant == "time_concat" else 0)

    @property
    def top_dim(self) -> int:
        return self.post_recurrent_projection or self.hidden

    @property
    def duration_input_dim(self) -> int:
        if self.duration_head_input == "recurrent_plus_hidden":
            return self.hidden + self.post_recurrent_projection
        return self.hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(config: ModelConfig, vocab_size: int) -> dict[str, tuple]:
    """Declared parameter order and shapes; checkpoints follow this order."""
    E, H, C, P = config.embed_dim, config.hidden, config.context_size, config.proj_size
    shapes = {"emb": (vocab_size, E)}
    if config.variant == "time_mask":
        shapes.update(phi_W=(1, C), phi_b=(C,), mask_W=(C, E), mask_b=(E,))
    elif config.variant == "time_joint":
        shapes.update(proj_W=(1, P), proj_b=(P,), time_emb=(P, E))
    shapes.update(lstm_Wx=(config.input_dim, 4 * H), lstm_Wh=(H, 4 * H), lstm_b=(4 * H,))
    if config.post_recurrent_projection is not None:
        shapes.update(post_W=(H, config.post_recurrent_projection), post_b=(config.post_recurrent_projection,))
    shapes.update(out_W=(config.top_dim, vocab_size), out_b=(vocab_size,))
    shapes.update(dur_W=(config.duration_input_dim, 1), dur_b=(1,))
    if config.regularizer == "xent" and not config.share_projection_weights:
        shapes.update(xproj_W=(1, P), xproj_b=(P,))
    return shapes


def init_params(config: ModelConfig, vocab_size: int, rng: np.random.Generator, dtype=np.float64) -> dict:
    params = {}
    for name, shape in param_shapes(config, vocab_size).items():
        if name in ("emb", "time_emb"):
            arr = rng.uniform(-0.05, 0.05, size=shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = np.ascontiguousarray(arr, dtype=dtype)
    return params


@dataclass
class Batch:
    """A ``(batch, time)`` window of inputs and next-step targets."""

    idx: np.ndarray
    dur: np.ndarray
    next_idx: np.ndarray
    next_dur: np.ndarray
    mask: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.idx.shape

    @classmethod
    def from_arrays(cls, seqs, exclude_idle_targets: bool = False) -> "Batch":
        """Pad ``(ids, durations)`` pairs; step t predicts event t+1."""
        B = len(seqs)
        T = max(max(len(ids) - 1, 1) for ids, _ in seqs)
        idx = np.zeros((B, T), dtype=np.int64)
        dur = np.ones((B, T))
        nidx = np.zeros((B, T), dtype=np.int64)
        ndur = np.ones((B, T))
        mask = np.zeros((B, T))
        for b, (ids, ds) in enumerate(seqs):
            n = len(ids)
            if n == 1:
                idx[b, 0], dur[b, 0] = ids[0], ds[0]
                continue
            idx[b, :n - 1], dur[b, :n - 1] = ids[:-1], ds[:-1]
            nidx[b, :n - 1], ndur[b, :n - 1] = ids[1:], ds[1:]
            mask[b, :n - 1] = 1.0
        if exclude_idle_targets:
            mask *= nidx != IDLE
        return cls(idx, dur, nidx, ndur, mask)

    @classmethod
    def from_tokens(cls, token_lists, exclude_idle_targets: bool = False) -> "Batch":
        return cls.from_arrays([([tk.index for tk in toks], [tk.duration for tk in toks])
                                for toks in token_lists], exclude_idle_targets)

    def window(self, start: int, stop: int) -> "Batch":
        s = slice(start, stop)
        return Batch(self.idx[:, s], self.dur[:, s], self.next_idx[:, s], self.next_dur[:, s], self.mask[:, s])


@dataclass
class StepOutput:
    event_logits: np.ndarray
    duration_pred: float
    hidden: np.ndarray


class Model:
    """Parameters plus the forward and backward passes over a padded batch."""

    def __init__(self, config: ModelConfig, vocab_size: int, params: dict | None = None,
                 seed: int = 0, dtype=np.float64):
        self.config = config
        self.vocab_size = int(vocab_size)
        if params is None:
            params = init_params(config, vocab_size, np.random.default_rng(seed), dtype)
        expected = param_shapes(config, vocab_size)
        if list(params) != list(expected) and set(params) != set(expected):
            raise DimensionError(f"parameter set {sorted(params)} does not match {sorted(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.params = {name: params[name] for name in expected}

    @property
    def dtype(self):
        return self.params["emb"].dtype

    def projection_params(self) -> tuple[np.ndarray, np.ndarray]:
        """The (W, b) of the projection used by the cross-entropy regularizer."""
        p = self.params
        if "xproj_W" in p:
            return p["xproj_W"], p["xproj_b"]
        return p["proj_W"], p["proj_b"]

    def copy(self) -> "Model":
        return Model(self.config, self.vocab_size, {k: v.copy() for k, v in self.params.items()})

    # -- pieces --------------------------------------------------------

    def embed_event(self, index) -> np.ndarray:
        index = np.asarray(index)
        if np.any(index < 0) or np.any(index >= self.vocab_size):
            raise IndexError(f"event index out of range [0, {self.vocab_size})")
        return self.params["emb"][index]

    def build_input(self, x, d):
        v = self.config.variant
        p = self.params
        if v == "no_time":
            return x, None
        if v == "time_concat":
            return timerep.concat_forward(x, d)
        if v == "time_mask":
            return timerep.mask_forward(x, d, p["phi_W"], p["phi_b"], p["mask_W"], p["mask_b"])
        return timerep.joint_forward(x, d, p["proj_W"], p["proj_b"], p["time_emb"], self.config.joint_log_input)

    def build_input_backward(self, du, cache) -> tuple[np.ndarray, dict]:
        v = self.config.variant
        p = self.params
        if v == "no_time":
            return du, {}
        if v == "time_concat":
            return timerep.concat_backward(du, cache)
        if v == "time_mask":
            return timerep.mask_backward(du, cache, p["phi_W"], p["mask_W"])
        return timerep.joint_backward(du, cache, p["proj_W"], p["time_emb"])

    def lstm_step(self, h, c, gx_t):
        """One LSTM update; ``gx_t`` is the input contribution ``u W_x + b``."""
        H = self.config.hidden
        z = gx_t + h @ self.params["lstm_Wh"]
        ifo = sigmoid(z[..., :3 * H])
        g = np.tanh(z[..., 3 * H:])
        i, f, o = ifo[..., :H], ifo[..., H:2 * H], ifo[..., 2 * H:]
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        return o * tc, c_new, (ifo, g, tc)

    # -- full pass -------------------------------------------------------

    def forward(self, idx, dur, state=None, train: bool = False, rng: np.random.Generator | None = None):
        """Run a padded ``(B, T)`` window.

        Returns ``(out, cache)`` where ``out`` holds ``logits (B,T,V)``,
        ``dur_pred (B,T)`` in seconds, ``dur_reg (B,T)`` (the value regressed
        by the Gaussian regularizer) and the final ``state = (h, c)``.
        """
        cfg, p = self.config, self.params
        dt = self.dtype
        idx = np.asarray(idx)
        dur = np.maximum(np.asarray(dur, dtype=dt), D_MIN)
        B, T = idx.shape
        H = cfg.hidden
        x = self.embed_event(idx)
        u, in_cache = self.build_input(x, dur)
        gx = u @ p["lstm_Wx"] + p["lstm_b"]
        if state is None:
            h = np.zeros((B, H), dtype=dt)
            c = np.zeros((B, H), dtype=dt)
        else:
            h, c = state
        hs = np.empty((B, T, H), dtype=dt)
        cs = np.empty((B, T, H), dtype=dt)
        gates = []
        h0, c0 = h, c
        for t in range(T):
            h, c, g = self.lstm_step(h, c, gx[:, t])
            hs[:, t], cs[:, t] = h, c
            gates.append(g)

        drop = None
        top_h = hs
        if train and cfg.dropout > 0:
            rng = rng if rng is not None else np.random.default_rng()
            drop = (rng.random(hs.shape) >= cfg.dropout).astype(dt) / (1 - cfg.dropout)
            top_h = hs * drop
        pre_q = q = None
        top = top_h
        if cfg.post_recurrent_projection is not None:
            pre_q = top_h @ p["post_W"] + p["post_b"]
            q = relu(pre_q)
            top = q
        logits = top @ p["out_W"] + p["out_b"]

        dur_in = np.concatenate([top_h, q], axis=-1) if cfg.duration_head_input == "recurrent_plus_hidden" else top_h
        zd = (dur_in @ p["dur_W"])[..., 0] + p["dur_b"][0]
        if cfg.duration_target_log:
            dur_pred = np.exp(np.minimum(zd, 50.0))
            dur_reg = zd
        elif cfg.duration_head_linear:
            dur_pred = dur_reg = zd
        else:
            dur_pred = dur_reg = softplus(zd)

        out = {"logits": logits, "dur_pred": dur_pred, "dur_reg": dur_reg, "hidden": hs, "state": (h, c)}
        cache = dict(idx=idx, x=x, u=u, in_cache=in_cache, hs=hs, cs=cs, gates=gates, h0=h0, c0=c0,
                     drop=drop, top_h=top_h, pre_q=pre_q, top=top, dur_in=dur_in, zd=zd, dur_pred=dur_pred)
        return out, cache

    def backward(self, cache, dlogits, ddur_pred=None, ddur_reg=None) -> dict:
        """Gradients of a scalar loss given its gradients w.r.t. the outputs.

        The incoming state is treated as a constant (truncated BPTT).
        """
        cfg, p = self.config, self.params
        H = cfg.hidden
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        B, T = cache["idx"].shape

        dzd = np.zeros((B, T), dtype=self.dtype)
        zd = cache["zd"]
        if ddur_pred is not None:
            if cfg.duration_target_log:
                dzd += ddur_pred * cache["dur_pred"] * (zd < 50.0)
            elif cfg.duration_head_linear:
                dzd += ddur_pred
            else:
                dzd += ddur_pred * sigmoid(zd)
        if ddur_reg is not None:
            if cfg.duration_target_log or cfg.duration_head_linear:
                dzd += ddur_reg
            else:
                dzd += ddur_reg * sigmoid(zd)
        ddur_in, grads["dur_W"], grads["dur_b"] = affine_backward(dzd[..., None], cache["dur_in"], p["dur_W"])

        dtop, grads["out_W"], grads["out_b"] = affine_backward(dlogits, cache["top"], p["out_W"])
        if cfg.duration_head_input == "recurrent_plus_hidden":
            dtop = dtop + ddur_in[..., H:]
            ddur_in = ddur_in[..., :H]
        if cfg.post_recurrent_projection is not None:
            dpre_q = dtop * (cache["pre_q"] > 0)
            dtop_h, grads["post_W"], grads["post_b"] = affine_backward(dpre_q, cache["top_h"], p["post_W"])
        else:
            dtop_h = dtop
        dtop_h = dtop_h + ddur_in
        dhs = dtop_h * cache["drop"] if cache["drop"] is not None else dtop_h

        hs, cs = cache["hs"], cache["cs"]
        Wh = p["lstm_Wh"]
        dgx = np.empty((B, T, 4 * H), dtype=self.dtype)
        dh_next = np.zeros((B, H), dtype=self.dtype)
        dc_next = np.zeros((B, H), dtype=self.dtype)
        dWh = grads["lstm_Wh"]
        for t in range(T - 1, -1, -1):
            ifo, g, tc = cache["gates"][t]
            i, f, o = ifo[:, :H], ifo[:, H:2 * H], ifo[:, 2 * H:]
            h_prev = hs[:, t - 1] if t > 0 else cache["h0"]
            c_prev = cs[:, t - 1] if t > 0 else cache["c0"]
            dh = dhs[:, t] + dh_next
            dc = dc_next + dh * o * (1 - tc * tc)
            dz = dgx[:, t]
            dz[:, :H] = dc * g * i * (1 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1 - f)
            dz[:, 2 * H:3 * H] = dh * tc * o * (1 - o)
            dz[:, 3 * H:] = dc * i * (1 - g * g)
            dWh += h_prev.T @ dz
            dh_next = dz @ Wh.T
            dc_next = dc * f
        du, grads["lstm_Wx"], grads["lstm_b"] = affine_backward(dgx, cache["u"], p["lstm_Wx"])

        dx, tgrads = self.build_input_backward(du, cache["in_cache"])
        for k, v in tgrads.items():
            grads[k] += v
        E = cfg.embed_dim
        np.add.at(grads["emb"], cache["idx"].reshape(-1), dx.reshape(-1, E))
        return grads

    # -- inference helpers ---------------------------------------------

    def run(self, tokens: list[EventToken]) -> list[StepOutput]:
        """Per-step outputs for one sequence, starting from a zero state."""
        if not tokens:
            raise ValueError("need at least one token")
        idx = np.array([[tk.index for tk in tokens]])
        dur = np.array([[tk.duration for tk in tokens]])
        out, _ = self.forward(idx, dur)
        return [StepOutput(out["logits"][0, t], float(out["dur_pred"][0, t]), out["hidden"][0, t])
                for t in range(len(tokens))]

    def next_distribution(self, tokens: list[EventToken]) -> np.ndarray:
        return softmax(self.run(tokens)[-1].event_logits)


def forward(tokens: list[EventToken], model: Model) -> list[StepOutput]:
    return model.run(tokens)


def predict_topk(event_logits, K: int, exclude=None) -> list[int]:
    """Indices of the K largest logits outside ``exclude``; ties go to the lower index."""
    logits = np.asarray(event_logits, dtype=float)
    exclude = set(int(i) for i in exclude) if exclude else set()
    avail = logits.shape[-1] - len(exclude & set(range(logits.shape[-1])))
    if K > avail or K < 0:
        raise ValueError(f"K={K} exceeds the {avail} selectable events")
    order = np.argsort(-logits, kind="stable")
    return [int(i) for i in order if int(i) not in exclude][:K]
