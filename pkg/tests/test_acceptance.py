"""Acceptance criteria, one test each; results are listed in the terminal summary."""

import math
import time

import numpy as np
from conftest import model_grad_error, random_tokens, record_criterion

from timeseq import timerep as tr
from timeseq.checkpoint import load_checkpoint, save_checkpoint
from timeseq.cli import main
from timeseq.dataio import (
    SyntheticConfig,
    Vocabulary,
    build_vocabulary,
    duration_blind_ceiling,
    encode_arrays,
    generate_synthetic,
    oracle_accuracy,
    prepare_sequence,
    split_dataset,
)
from timeseq.losses import reg_nll, reg_xent
from timeseq.model import REGULARIZERS, VARIANTS, Model, ModelConfig
from timeseq.numerics import global_norm, softmax
from timeseq.train import TrainConfig, clip_gradients, evaluate, train

TRIALS = 1000
MID = dict(embed_dim=16, hidden=32, proj_size=10, context_size=16, post_recurrent_projection=32)


def synthetic_splits(seed, **kw):
    seqs, oracle = generate_synthetic(SyntheticConfig(**kw), seed=seed)
    parts = split_dataset(seqs, seed=seed)
    prepared = [[prepare_sequence(s) for s in part] for part in parts]
    vocab = build_vocabulary(prepared[0], min_count=1)
    encoded = [[encode_arrays(s, vocab) for s in part] for part in prepared]
    return encoded, vocab, oracle, parts[2]


def test_gradient_correctness():
    t0 = time.perf_counter()
    errors = {(v, r): model_grad_error(v, r) for v in VARIANTS for r in REGULARIZERS}
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    ok = worst <= 1e-5 and elapsed < 120
    record_criterion("1 gradient correctness", ok,
                     f"max rel err {worst:.2e} over {len(errors)} combos (<= 1e-5), {elapsed:.1f}s (< 120s)")
    assert ok, errors


def test_normalisation_invariants():
    r = np.random.default_rng(2024)
    worst_sum, min_entry = 0.0, 1.0
    mask_ok = hull_ok = clip_ok = True
    for _ in range(TRIALS):
        n = int(r.integers(2, 40))
        z = r.normal(0, r.uniform(0.1, 20), n)
        for s in (softmax(z), tr.soft_one_hot(z)):
            worst_sum = max(worst_sum, abs(s.sum() - 1))
            min_entry = min(min_entry, s.min())

        d = float(np.exp(r.uniform(np.log(1e-3), np.log(1e4))))
        C, E, P = (int(v) for v in r.integers(1, 12, size=3))
        c = tr.time_context(d, r.normal(0, 0.5, (1, C)), r.normal(0, 0.5, C))
        m = tr.time_mask(c, r.normal(0, 0.5, (C, E)), r.normal(0, 0.5, E))
        mask_ok &= bool(np.all((m > 0) & (m < 1)))

        Es = r.normal(size=(P, E))
        s = tr.project(d, r.normal(0, 1 / d, (1, P)), r.normal(size=P))
        g = tr.time_embedding(s, Es)
        # support-function test: no direction separates g from the rows of Es
        dirs = r.normal(size=(64, E))
        hull_ok &= bool(np.all(dirs @ g <= (dirs @ Es.T).max(axis=1) + 1e-12))

        clip = float(r.uniform(1e-3, 10))
        grads = {"a": r.normal(0, r.uniform(0.01, 100), (3, 4)), "b": r.normal(size=7)}
        clip_ok &= global_norm(clip_gradients(grads, clip)) <= clip * (1 + 1e-12)
    ok = worst_sum <= 1e-6 and min_entry > 0 and mask_ok and hull_ok and clip_ok
    record_criterion("2 normalization invariants", ok,
                     f"{TRIALS} trials: max |sum-1| {worst_sum:.1e}, min prob {min_entry:.1e}, "
                     f"mask in (0,1) {mask_ok}, convex hull {hull_ok}, clip {clip_ok}")
    assert ok


def test_closed_form_spot_values():
    nll_ok = reg_nll(5.0, 3.0, 1.0) == 2.0 and reg_nll(5.0, 3.0, 2.0) == 0.5

    r = np.random.default_rng(7)
    gibbs_ok = True
    for d in (0.7, 3.0, 12.0, 40.0):
        W, b = r.normal(size=(1, 5)) / d, r.normal(size=5)
        grid = np.linspace(0.5 * d, 1.5 * d, 101)
        losses = reg_xent(grid, np.full_like(grid, d), W, b)
        gibbs_ok &= abs(grid[np.argmin(losses)] - d) <= grid[1] - grid[0]

    direct = [math.exp(k) / sum(math.exp(j) for j in (1, 2, 3)) for k in (1, 2, 3)]
    soh_err = float(np.max(np.abs(tr.soft_one_hot(np.array([1.0, 2.0, 3.0])) - direct)))
    ok = nll_ok and gibbs_ok and soh_err <= 1e-5
    record_criterion("3 closed-form spot values", ok,
                     f"reg_nll exact {nll_ok}, Gibbs grid minimum at d {gibbs_ok}, soft_one_hot err {soh_err:.1e}")
    assert ok


def test_overfit_sanity():
    t0 = time.perf_counter()
    seqs, _ = generate_synthetic(SyntheticConfig(length=50, num_sequences=1), seed=0)
    seq = prepare_sequence(seqs[0])
    vocab = build_vocabulary([seq], min_count=1)
    data = [encode_arrays(seq, vocab)]
    cfg = ModelConfig(variant="time_joint", **MID)
    tc = TrainConfig(optimizer="adam", learning_rate=0.01, batch_size=1, max_epochs=10_000, patience=10_000,
                     max_steps=2000, dtype="float64")
    res = train(cfg, tc, data, data, len(vocab))
    acc = evaluate(res.model, data).accuracy
    elapsed = time.perf_counter() - t0
    ok = acc >= 0.99 and res.steps <= 2000 and elapsed < 120
    record_criterion("4 overfit sanity", ok,
                     f"train accuracy {acc:.4f} (>= 0.99) after {res.steps} steps, {elapsed:.1f}s (< 120s)")
    assert ok


def test_time_sensitivity_ordering():
    t0 = time.perf_counter()
    K, B, eps = 8, 4, 0.05
    rows, ok = [], True
    for seed in (0, 1, 2):
        (train_d, valid_d, test_d), vocab, oracle, test_raw = synthetic_splits(
            seed, vocab_size=K, buckets=B, noise=eps, length=100, num_sequences=2500)
        assert len(train_d) == 2000
        acc = {}
        for variant in ("no_time", "time_concat", "time_mask", "time_joint"):
            tc = TrainConfig(optimizer="adam", learning_rate=0.01, batch_size=32, max_epochs=10, patience=3,
                             seed=seed)
            res = train(ModelConfig(variant=variant, **MID), tc, train_d, valid_d, len(vocab))
            acc[variant] = evaluate(res.model, test_d).accuracy
        seed_ok = (acc["no_time"] <= 0.35 and acc["time_joint"] >= 0.85 and acc["time_mask"] >= 0.85
                   and acc["no_time"] <= acc["time_concat"] <= acc["time_joint"])
        ok &= seed_ok
        rows.append(f"seed {seed}: oracle(test) {oracle_accuracy(oracle, test_raw):.3f} "
                    + " ".join(f"{k} {v:.3f}" for k, v in acc.items()))
    expected = oracle.expected_accuracy()
    ceiling = duration_blind_ceiling(oracle)
    ok &= abs(expected - (1 - eps + eps / K)) < 1e-12
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 15 * 60
    detail = (f"oracle {expected:.4f}, duration-blind ceiling {ceiling:.4f}, {elapsed:.0f}s (< 900s); "
              + "; ".join(rows))
    record_criterion("5 time-sensitivity ordering", ok, detail)
    assert ok, detail


def test_regularizer_duration_benefit():
    t0 = time.perf_counter()
    (train_d, valid_d, test_d), vocab, _, _ = synthetic_splits(
        0, noise=0.05, length=100, num_sequences=1250, duration_mode="event")
    train_durs = np.concatenate([d for _, d in train_d])
    next_durs = np.concatenate([d[1:] for _, d in test_d])
    const_mae = float(np.abs(next_durs - train_durs.mean()).mean())
    median_mae = float(np.abs(next_durs - np.median(train_durs)).mean())
    reports = {}
    for reg in ("none", "nll", "xent"):
        tc = TrainConfig(optimizer="adam", learning_rate=0.01, batch_size=32, max_epochs=8, patience=3, seed=0)
        res = train(ModelConfig(variant="time_joint", regularizer=reg, **MID), tc, train_d, valid_d, len(vocab))
        reports[reg] = evaluate(res.model, test_d)
    mae = reports["nll"].duration_mae
    shift = reports["xent"].accuracy - reports["none"].accuracy
    elapsed = time.perf_counter() - t0
    ok = mae < 0.5 * const_mae and abs(shift) <= 0.015 and elapsed < 15 * 60
    record_criterion("6 regularizer benefit", ok,
                     f"R^N MAE {mae:.3f} vs mean-predictor MAE {const_mae:.3f} (ratio {mae / const_mae:.3f} < 0.5; "
                     f"median-predictor MAE {median_mae:.3f}); R^X accuracy shift {100 * shift:+.2f} points "
                     f"(|.| <= 1.5); {elapsed:.0f}s")
    assert ok


def test_checkpoint_fidelity(tmp_path):
    r = np.random.default_rng(99)
    vocab = Vocabulary([f"e{k}" for k in range(10)])
    V = len(vocab)
    mismatches = 0
    for variant in VARIANTS:
        reg = "xent" if variant == "time_joint" else "nll"
        m = Model(ModelConfig(variant=variant, regularizer=reg, **MID), V, seed=1, dtype=np.float32)
        for k, v in m.params.items():
            m.params[k] = (v + r.normal(0, 0.1, v.shape)).astype(np.float32)
        seqs = [random_tokens(r, int(r.integers(1, 40)), V) for _ in range(100)]
        before = [m.run(s) for s in seqs]
        path = tmp_path / f"{variant}.ckpt"
        save_checkpoint(path, m, vocab)
        loaded = load_checkpoint(path).model
        for s, outs in zip(seqs, before):
            for a, b in zip(outs, loaded.run(s)):
                same = (np.array_equal(a.event_logits, b.event_logits) and a.duration_pred == b.duration_pred
                        and np.array_equal(a.hidden, b.hidden))
                mismatches += not same
    ok = mismatches == 0
    record_criterion("7 checkpoint fidelity", ok,
                     f"{len(VARIANTS)} variants x 100 sequences, {mismatches} non-identical steps")
    assert ok


def test_projection_shape(tmp_path, capsys):
    (train_d, valid_d, _), vocab, _, _ = synthetic_splits(0, noise=0.05, length=100, num_sequences=1250)
    cfg = ModelConfig(variant="time_joint", **{**MID, "proj_size": 5})
    tc = TrainConfig(optimizer="adam", learning_rate=0.01, max_epochs=8, seed=0)
    res = train(cfg, tc, train_d, valid_d, len(vocab))
    save_checkpoint(tmp_path / "joint.ckpt", res.model, vocab)
    capsys.readouterr()
    code = main(["inspect-projection", "--checkpoint", str(tmp_path / "joint.ckpt"), "--d-min", "0.1",
                 "--d-max", "10000", "--num-points", "100", "--scale", "log"])
    lines = capsys.readouterr().out.splitlines()
    table = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    sums_ok = code == 0 and table.shape == (100, 6) and bool(np.all(np.abs(table[:, 1:].sum(axis=1) - 1) <= 1e-6))
    lo, hi = table[0, 1:], table[-1, 1:]
    pairs = [(i + 1, j + 1) for i in range(5) for j in range(i + 1, 5)
             if abs(hi[i] - hi[j]) < 0.02 and abs(lo[i] - lo[j]) > 0.1]
    ok = sums_ok and bool(pairs)
    record_criterion("8 projection shape", ok,
                     f"rows sum to 1: {sums_ok}; converged pairs (s_i, s_j) {pairs}; "
                     f"s(0.1)={np.round(lo, 3).tolist()} s(1e4)={np.round(hi, 3).tolist()}")
    assert ok
