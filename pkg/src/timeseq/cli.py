"""Command-line entry points: generate, prepare, train, evaluate, predict, inspect-projection."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dataio
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import ConfigError, ModelConfig, predict_topk
from .numerics import softmax
from .timerep import inspect_projection, projection_csv
from .train import TrainConfig, TrainingDiverged, evaluate, train, write_history

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- run configuration ---------------------------------------------------


@dataclass
class DataConfig:
    train: str = ""
    valid: str = ""
    test: str = ""
    min_count: int = 5
    min_gap: float = dataio.DEFAULT_MIN_GAP


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _convert(value: str, default):
    if isinstance(value, str) and value.strip().lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        try:
            return _BOOL[str(value).strip().lower()]
        except KeyError:
            raise ConfigError(f"expected a boolean, got {value!r}") from None
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if default is None:
        try:
            return int(value)
        except ValueError:
            return float(value)
    return str(value)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def build_run_config(kv: dict[str, str]) -> RunConfig:
    """Turn ``section.key -> text`` pairs into validated config objects."""
    values = {name: {} for name in _SECTIONS}
    for key, text in kv.items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}; expected model.*, train.* or data.*")
        known = {f.name: f for f in fields(_SECTIONS[section])}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(_SECTIONS[section](), name) if section != "model" else getattr(ModelConfig(), name)
        try:
            values[section][name] = _convert(text, default)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return RunConfig(ModelConfig(**values["model"]), TrainConfig(**values["train"]), DataConfig(**values["data"]))


def load_run_config(path: str | None, overrides: dict[str, str]) -> RunConfig:
    kv = dataio.read_kv_file(path) if path else {}
    kv.update(overrides)
    return build_run_config(kv)


# -- shared helpers --------------------------------------------------------


def _load_prepared(path, min_gap: float) -> list[dataio.EventSequence]:
    return [dataio.prepare_sequence(s, min_gap) for s in dataio.parse_sequences(path)]


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what} path")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _ks(text: str) -> tuple:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be positive")
    return ks


# -- commands --------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = dataio.load_synthetic_config(args.config) if args.config else dataio.SyntheticConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seqs, oracle = dataio.generate_synthetic(cfg, seed=args.seed)
    tr, va, te = dataio.split_dataset(seqs, seed=args.seed)
    for name, part in (("train", tr), ("valid", va), ("test", te)):
        dataio.write_sequences(out / f"{name}.jsonl", part)
    (out / "oracle.json").write_text(json.dumps(oracle.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"sequences train={len(tr)} valid={len(va)} test={len(te)}")
    print(f"oracle_accuracy_expected = {oracle.expected_accuracy():.6f}")
    print(f"oracle_accuracy_test = {dataio.oracle_accuracy(oracle, te):.6f}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    src = _require_file(args.input, "input")
    seqs = dataio.parse_sequences(src)
    ratios = dataio.parse_floats(args.ratios)
    tr, va, te = dataio.split_dataset(seqs, ratios, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prepped = {}
    for name, part in (("train", tr), ("valid", va), ("test", te)):
        prepped[name] = [dataio.prepare_sequence(s, args.min_gap) for s in part]
        dataio.write_sequences(out / f"{name}.jsonl", prepped[name])
    vocab = dataio.build_vocabulary(prepped["train"], args.min_count)
    (out / "vocab.json").write_text(json.dumps(vocab.to_dict(), indent=1) + "\n")
    print(f"sequences train={len(tr)} valid={len(va)} test={len(te)} vocab={len(vocab)}")
    return EXIT_OK


def _overrides(args) -> dict[str, str]:
    kv = dict(_parse_set(s) for s in args.set or [])
    flag_map = {
        "variant": "model.variant", "regularizer": "model.regularizer", "train_data": "data.train",
        "valid_data": "data.valid", "epochs": "train.max_epochs", "optimizer": "train.optimizer",
        "learning_rate": "train.learning_rate",
    }
    for attr, key in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            kv[key] = str(val)
    if args.share_projection:
        kv["model.share_projection_weights"] = "true"
    if args.exclude_idle_targets:
        kv["model.exclude_idle_targets"] = "true"
    if args.seed is not None:
        kv["train.seed"] = str(args.seed)
    return kv


def _parse_set(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def cmd_train(args) -> int:
    run = load_run_config(args.config, _overrides(args))
    train_path = _require_file(run.data.train, "training data")
    valid_path = _require_file(run.data.valid, "validation data")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train_seqs = _load_prepared(train_path, run.data.min_gap)
    valid_seqs = _load_prepared(valid_path, run.data.min_gap)
    vocab = dataio.build_vocabulary(train_seqs, run.data.min_count)
    tr = [dataio.encode_arrays(s, vocab) for s in train_seqs]
    va = [dataio.encode_arrays(s, vocab) for s in valid_seqs]
    result = train(run.model, run.train, tr, va, len(vocab))
    meta = {"train_config": vars(run.train), "best_epoch": result.best_epoch, "sigma": result.sigma,
            "min_gap": run.data.min_gap}
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, result.model, vocab, meta)
    write_history(out / "history.csv", result.history)
    print(f"checkpoint = {ckpt}")
    print(f"best_epoch = {result.best_epoch}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ck = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    seqs = _load_prepared(_require_file(args.data, "data"), ck.meta.get("min_gap", dataio.DEFAULT_MIN_GAP))
    labels = {ev.label for s in seqs for ev in s.events} - {dataio.IDLE_LABEL}
    known = labels & set(ck.vocab.itos)
    if labels and not known:
        raise CheckpointError("vocabulary mismatch: no event label in the data is known to the checkpoint")
    data = [dataio.encode_arrays(s, ck.vocab) for s in seqs]
    rep = evaluate(ck.model, data, ks=args.k, map_ks=(5, 10, 20))
    text = rep.to_kv()
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def _read_history(text: str) -> dataio.EventSequence:
    p = Path(text)
    raw = p.read_text(encoding="utf-8") if p.is_file() else text
    obj = json.loads(raw)
    if isinstance(obj, list):
        obj = {"id": "history", "events": obj}
    return dataio.parse_record(obj, "history")


def cmd_predict(args) -> int:
    ck = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    seq = dataio.prepare_sequence(_read_history(args.events), ck.meta.get("min_gap", dataio.DEFAULT_MIN_GAP))
    if not seq.events:
        raise UsageError("history must contain at least one event")
    unknown = sorted({ev.label for ev in seq.events} - set(ck.vocab.itos))
    if unknown:
        print(f"timeseq predict: warning: unknown labels mapped to OOV: {', '.join(unknown)}", file=sys.stderr)
    ids, durs = dataio.encode_arrays(seq, ck.vocab)
    out, _ = ck.model.forward(ids[None, :], durs[None, :])
    logits = out["logits"][0, -1].astype(float)
    probs = softmax(logits)
    for i in predict_topk(logits, min(args.k, len(probs))):
        print(f"{ck.vocab.label(i)}\t{probs[i]:.6f}")
    return EXIT_OK


def cmd_inspect_projection(args) -> int:
    ck = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    cfg = ck.model.config
    if cfg.variant != "time_joint":
        raise UsageError(f"inspect-projection needs a time_joint checkpoint, got {cfg.variant}")
    if not 0 < args.d_min < args.d_max:
        raise UsageError("need 0 < d_min < d_max")
    if args.scale == "log":
        grid = np.geomspace(args.d_min, args.d_max, args.num_points)
    else:
        grid = np.linspace(args.d_min, args.d_max, args.num_points)
    p = ck.model.params
    table = inspect_projection(p["proj_W"], p["proj_b"], grid, cfg.joint_log_input)
    text = projection_csv(table)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timeseq", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, out_required=False):
        p.add_argument("--config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("generate", help="write a synthetic benchmark with its oracle")
    shared(p, out_required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("prepare", help="split raw sequences, inject idle events, build a vocabulary")
    shared(p, out_required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--min-gap", type=float, default=dataio.DEFAULT_MIN_GAP)
    p.add_argument("--min-count", type=int, default=5)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    shared(p, out_required=True)
    # names are validated by ModelConfig, which also accepts aliases such as NoTime or R_X
    p.add_argument("--variant", help="no_time | time_concat | time_mask | time_joint")
    p.add_argument("--regularizer", help="none | nll | xent")
    p.add_argument("--share-projection", action="store_true")
    p.add_argument("--exclude-idle-targets", action="store_true")
    p.add_argument("--train-data")
    p.add_argument("--valid-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--optimizer", choices=["adagrad", "adam", "sgd"])
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. model.hidden=64")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a sequence file")
    shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=_ks, default=(1, 5, 10, 20))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="rank the next event after a history")
    shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--events", required=True, help="JSON record or event list, inline or as a file path")
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect-projection", help="dump the learned soft one-hot projection as CSV")
    shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--d-min", type=float, default=0.1)
    p.add_argument("--d-max", type=float, default=10000.0)
    p.add_argument("--num-points", type=int, default=100)
    p.add_argument("--scale", choices=["linear", "log"], default="log")
    p.set_defaults(func=cmd_inspect_projection)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is None and args.command in ("generate", "prepare"):
        args.seed = 0
    try:
        return args.func(args)
    except (UsageError, ConfigError, dataio.DataError) as exc:
        print(f"timeseq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, CheckpointError, dataio.ParseError, OSError) as exc:
        print(f"timeseq {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
