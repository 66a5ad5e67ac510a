"""Event sequence ingestion, vocabulary, splitting and synthetic data."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

IDLE = 0
OOV = 1
IDLE_LABEL = "<idle>"
OOV_LABEL = "<oov>"

D_MIN = 1e-3
DEFAULT_MIN_GAP = 1.0
TIME_SLACK = 1e-6


class ParseError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class RawEvent:
    label: str
    start: float
    duration: float | None = None


@dataclass
class EventSequence:
    id: str
    events: list[RawEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class EventToken:
    index: int
    duration: float


def _validate(events: Sequence[RawEvent], where: str) -> None:
    for i, ev in enumerate(events):
        if ev.start < 0 or not math.isfinite(ev.start):
            raise ParseError(f"{where}: invalid timestamp at index {i}")
        if ev.duration is not None and (ev.duration < 0 or not math.isfinite(ev.duration)):
            raise ParseError(f"{where}: negative duration at index {i}")
        if i > 0:
            prev = events[i - 1]
            if ev.start < prev.start:
                raise ParseError(f"{where}: non-monotone timestamp at index {i}")
            if prev.duration is not None and prev.start + prev.duration > ev.start + TIME_SLACK:
                raise ParseError(f"{where}: event at index {i - 1} overlaps the next event")


def parse_record(record: dict, where: str = "record") -> EventSequence:
    if not isinstance(record, dict) or "id" not in record or "events" not in record:
        raise ParseError(f"{where}: missing required field 'id' or 'events'")
    events = []
    for i, ev in enumerate(record["events"]):
        try:
            label, start = ev["e"], ev["t"]
        except (KeyError, TypeError):
            raise ParseError(f"{where}: missing required field 'e' or 't' at index {i}") from None
        dur = ev.get("d")
        events.append(RawEvent(str(label), float(start), None if dur is None else float(dur)))
    _validate(events, where)
    return EventSequence(str(record["id"]), events)


def parse_sequences(path) -> list[EventSequence]:
    """Read a JSON Lines sequence file; blank lines are skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{where}: malformed JSON ({exc.msg})") from None
            out.append(parse_record(record, where))
    return out


def sequence_to_record(seq: EventSequence) -> dict:
    events = []
    for ev in seq.events:
        item = {"e": ev.label, "t": ev.start}
        if ev.duration is not None:
            item["d"] = ev.duration
        events.append(item)
    return {"id": seq.id, "events": events}


def write_sequences(path, sequences: Iterable[EventSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(json.dumps(sequence_to_record(seq), separators=(",", ":")))
            fh.write("\n")


def inject_idle_events(seq: EventSequence, min_gap: float = DEFAULT_MIN_GAP) -> EventSequence:
    """Fill gaps longer than ``min_gap`` with an idle event spanning the gap.

    Sequences without explicit durations are returned unchanged.
    """
    if min_gap < 0:
        raise ValueError("min_gap must be non-negative")
    if not seq.events or any(ev.duration is None for ev in seq.events):
        return EventSequence(seq.id, list(seq.events))
    out = [seq.events[0]]
    for prev, nxt in zip(seq.events, seq.events[1:]):
        end = prev.start + prev.duration
        gap = nxt.start - end
        if gap > min_gap:
            out.append(RawEvent(IDLE_LABEL, end, gap))
        out.append(nxt)
    return EventSequence(seq.id, out)


def compute_durations(seq: EventSequence, d_min: float = D_MIN) -> EventSequence:
    """Fill in missing durations from inter-event intervals and clamp at ``d_min``.

    Explicit durations win. Without them each event lasts until the next
    one starts, and the last event gets the median interval of the sequence.
    """
    events = seq.events
    if not events:
        return EventSequence(seq.id, [])
    if all(ev.duration is not None for ev in events):
        durs = [ev.duration for ev in events]
    else:
        starts = np.array([ev.start for ev in events], dtype=float)
        gaps = np.diff(starts)
        last = float(np.median(gaps)) if gaps.size else d_min
        durs = [ev.duration if ev.duration is not None else None for ev in events]
        for i in range(len(events)):
            if durs[i] is None:
                durs[i] = float(gaps[i]) if i < gaps.size else last
    return EventSequence(
        seq.id, [RawEvent(ev.label, ev.start, max(float(d), d_min)) for ev, d in zip(events, durs)]
    )


class Vocabulary:
    """Label <-> index map with reserved IDLE (0) and OOV (1) slots."""

    def __init__(self, labels: Sequence[str] = (), min_count: int = 1):
        self.min_count = min_count
        self.itos: list[str] = [IDLE_LABEL, OOV_LABEL]
        self.stoi: dict[str, int] = {IDLE_LABEL: IDLE, OOV_LABEL: OOV}
        for lab in labels:
            if lab in self.stoi:
                raise DataError(f"duplicate label {lab!r}")
            self.stoi[lab] = len(self.itos)
            self.itos.append(lab)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, label: str) -> int:
        return self.stoi.get(label, OOV)

    def label(self, index: int) -> str:
        return self.itos[index]

    def to_dict(self) -> dict:
        return {"labels": self.itos[2:], "min_count": self.min_count}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["labels"], d.get("min_count", 1))


def build_vocabulary(train_sequences: Sequence[EventSequence], min_count: int = 5) -> Vocabulary:
    if not train_sequences:
        raise DataError("cannot build a vocabulary from an empty training set")
    counts = Counter(ev.label for seq in train_sequences for ev in seq.events)
    counts.pop(IDLE_LABEL, None)
    counts.pop(OOV_LABEL, None)
    # most frequent first, ties alphabetical, so the index order is stable
    kept = sorted((lab for lab, c in counts.items() if c >= min_count), key=lambda s: (-counts[s], s))
    return Vocabulary(kept, min_count)


def encode(seq: EventSequence, vocab: Vocabulary) -> list[EventToken]:
    return [EventToken(vocab.index(ev.label), float(ev.duration if ev.duration is not None else D_MIN))
            for ev in seq.events]


def encode_arrays(seq: EventSequence, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`encode` but returns ``(ids, durations)`` arrays."""
    ids = np.fromiter((vocab.index(ev.label) for ev in seq.events), dtype=np.int64, count=len(seq.events))
    durs = np.fromiter((D_MIN if ev.duration is None else ev.duration for ev in seq.events),
                       dtype=float, count=len(seq.events))
    return ids, durs


def decode(tokens: Sequence[EventToken], vocab: Vocabulary, seq_id: str = "", start: float = 0.0) -> EventSequence:
    """Inverse of :func:`encode` for in-vocabulary events laid back to back."""
    events, t = [], start
    for tok in tokens:
        events.append(RawEvent(vocab.label(tok.index), t, tok.duration))
        t += tok.duration
    return EventSequence(seq_id, events)


def prepare_sequence(seq: EventSequence, min_gap: float = DEFAULT_MIN_GAP, d_min: float = D_MIN) -> EventSequence:
    return compute_durations(inject_idle_events(seq, min_gap), d_min)


def split_dataset(sequences: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """User-level random split. Returns (train, valid, test) lists."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(sequences)
    if n < 3:
        raise DataError("need at least 3 sequences to split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_valid = min(int(round(ratios[1] * n)), n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:])
    return tuple([sequences[i] for i in sorted(p)] for p in parts)


# -- synthetic benchmark ---------------------------------------------------


@dataclass
class SyntheticConfig:
    vocab_size: int = 8
    buckets: int = 4
    bucket_edges: tuple = (0.5, 2.0, 5.0, 10.0, 20.0)
    table_seed: int = 0
    length: int = 100
    num_sequences: int = 2500
    noise: float = 0.05
    # "bucket": d_t uniform in a uniformly chosen bucket, independent of events.
    # "event": d_{t+1} is the midpoint of a bucket chosen by e_t.
    duration_mode: str = "bucket"

    def validate(self) -> None:
        edges = np.asarray(self.bucket_edges, dtype=float)
        if self.vocab_size < 1 or self.buckets < 1:
            raise DataError("vocab_size and buckets must be positive")
        if edges.size != self.buckets + 1:
            raise DataError(f"expected {self.buckets + 1} bucket edges, got {edges.size}")
        if np.any(np.diff(edges) <= 0) or edges[0] < 0:
            raise DataError("bucket_edges must be non-negative and strictly increasing")
        if not 0 <= self.noise <= 1:
            raise DataError("noise must lie in [0, 1]")
        if self.length < 1 or self.num_sequences < 1:
            raise DataError("length and num_sequences must be positive")
        if self.duration_mode not in ("bucket", "event"):
            raise DataError(f"unknown duration_mode {self.duration_mode!r}")


@dataclass
class SyntheticOracle:
    """Table-lookup predictor that knows the generating rule."""

    table: np.ndarray  # (K, B) next-event ids
    bucket_edges: np.ndarray
    noise: float
    duration_table: np.ndarray | None = None  # (K,) next-duration bucket per event, "event" mode

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    def bucket(self, d) -> np.ndarray:
        b = np.searchsorted(self.bucket_edges, d, side="right") - 1
        return np.clip(b, 0, len(self.bucket_edges) - 2)

    def predict(self, event: int, duration: float) -> int:
        return int(self.table[event, self.bucket(duration)])

    def expected_accuracy(self) -> float:
        k = self.vocab_size
        return 1.0 - self.noise + self.noise / k

    def next_duration(self, event: int) -> float:
        b = int(self.duration_table[event])
        return 0.5 * float(self.bucket_edges[b] + self.bucket_edges[b + 1])

    def to_dict(self) -> dict:
        d = {
            "table": self.table.tolist(),
            "bucket_edges": self.bucket_edges.tolist(),
            "noise": self.noise,
            "expected_accuracy": self.expected_accuracy(),
        }
        if self.duration_table is not None:
            d["duration_table"] = self.duration_table.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticOracle":
        dt = d.get("duration_table")
        return cls(np.asarray(d["table"], dtype=int), np.asarray(d["bucket_edges"], dtype=float),
                   float(d["noise"]), None if dt is None else np.asarray(dt, dtype=int))


def synthetic_label(k: int) -> str:
    return f"e{k}"


def make_transition_table(vocab_size: int, buckets: int, seed: int) -> np.ndarray:
    """Rows hit min(K, B) distinct targets so duration carries real information."""
    rng = np.random.default_rng(seed)
    table = np.empty((vocab_size, buckets), dtype=int)
    for k in range(vocab_size):
        perm = rng.permutation(vocab_size)
        table[k] = np.resize(perm[:min(vocab_size, buckets)], buckets)
    return table


def generate_synthetic(config: SyntheticConfig, seed: int = 0, table: np.ndarray | None = None):
    """Sample sequences from the bucketed transition rule.

    Returns ``(sequences, oracle)``. Events are laid back to back so no idle
    events appear after preparation.
    """
    config.validate()
    K, B = config.vocab_size, config.buckets
    edges = np.asarray(config.bucket_edges, dtype=float)
    if table is None:
        table = make_transition_table(K, B, config.table_seed)
    table = np.asarray(table, dtype=int)
    if table.shape != (K, B) or table.min() < 0 or table.max() >= K:
        raise DataError(f"transition table must be {K}x{B} with entries in [0, {K})")
    dur_table = None
    if config.duration_mode == "event":
        dur_table = np.random.default_rng(config.table_seed + 1).integers(0, B, size=K)
    oracle = SyntheticOracle(table, edges, float(config.noise), dur_table)

    rng = np.random.default_rng(seed)
    sequences = []
    for n in range(config.num_sequences):
        L = config.length
        ev = np.empty(L, dtype=int)
        dur = np.empty(L)
        ev[0] = rng.integers(K)
        for t in range(L):
            if config.duration_mode == "bucket" or t == 0:
                b = rng.integers(B)
                dur[t] = rng.uniform(edges[b], edges[b + 1])
            else:
                dur[t] = oracle.next_duration(ev[t - 1])
            if t + 1 < L:
                if rng.random() < config.noise:
                    ev[t + 1] = rng.integers(K)
                else:
                    ev[t + 1] = table[ev[t], oracle.bucket(dur[t])]
        starts = np.concatenate([[0.0], np.cumsum(dur[:-1])])
        events = [RawEvent(synthetic_label(int(e)), float(s), float(d)) for e, s, d in zip(ev, starts, dur)]
        sequences.append(EventSequence(f"s{n}", events))
    return sequences, oracle


def oracle_accuracy(oracle: SyntheticOracle, sequences: Sequence[EventSequence]) -> float:
    hits = total = 0
    for seq in sequences:
        for cur, nxt in zip(seq.events, seq.events[1:]):
            pred = oracle.predict(int(cur.label[1:]), cur.duration)
            hits += synthetic_label(pred) == nxt.label
            total += 1
    return hits / total if total else float("nan")


def duration_blind_ceiling(oracle: SyntheticOracle) -> float:
    """Best accuracy of any predictor that ignores the current duration.

    Enumerates the generative distribution in "bucket" mode: given the current
    event, the next event is ``table[e, b]`` with b uniform, plus uniform noise.
    """
    K, B = oracle.table.shape
    eps = oracle.noise
    best = 0.0
    for e in range(K):
        probs = np.full(K, eps / K)
        for b in range(B):
            probs[oracle.table[e, b]] += (1 - eps) / B
        best += probs.max() / K
    return float(best)


# -- key-value config files ----------------------------------------------


def read_kv_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def parse_floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


_SYNTH_KEYS = {
    "vocab_size": int, "buckets": int, "bucket_edges": parse_floats, "table_seed": int,
    "length": int, "num_sequences": int, "noise": float, "duration_mode": str,
}


def synthetic_config_from_kv(kv: dict[str, str]) -> SyntheticConfig:
    unknown = set(kv) - set(_SYNTH_KEYS)
    if unknown:
        raise DataError(f"unknown generator config keys: {sorted(unknown)}")
    cfg = SyntheticConfig(**{k: _SYNTH_KEYS[k](v) for k, v in kv.items()})
    cfg.validate()
    return cfg


def load_synthetic_config(path) -> SyntheticConfig:
    return synthetic_config_from_kv(read_kv_file(path))
