"""Binary checkpoint: magic, JSON header, then little-endian float32 arrays.

Layout::

    b"TSEQ1\\n"
    uint64 (little-endian) header length in bytes
    header: UTF-8 JSON with model config, vocabulary and the array table
    array payloads, in header order, each as raw '<f4' data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Vocabulary
from .model import Model, ModelConfig, param_shapes

MAGIC = b"TSEQ1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Model
    vocab: Vocabulary
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model: Model, vocab: Vocabulary, meta: dict | None = None) -> None:
    """Write ``model`` to ``path``; parameters are stored as float32."""
    if len(vocab) != model.vocab_size:
        raise CheckpointError(f"vocabulary has {len(vocab)} entries but the model expects {model.vocab_size}")
    order = list(param_shapes(model.config, model.vocab_size))
    header = {
        "model_config": model.config.to_dict(),
        "vocab": vocab.to_dict(),
        "vocab_size": model.vocab_size,
        "arrays": [{"name": k, "shape": list(model.params[k].shape)} for k in order],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for k in order:
            fh.write(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    config = ModelConfig.from_dict(header["model_config"])
    vocab = Vocabulary.from_dict(header["vocab"])
    params = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated while reading {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        params[entry["name"]] = arr.astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    model = Model(config, header["vocab_size"], params)
    return Checkpoint(model, vocab, header.get("meta", {}))
