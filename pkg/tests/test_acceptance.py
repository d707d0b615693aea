"""Acceptance suite: one marked group of tests per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists
every criterion with PASS or FAIL.
"""

import math
import time

import numpy as np
import pytest

from cham.cell import AttentionParams, CellState, ConvLSTMParams, attention_cell_step, cell_step
from cham.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from cham.data import FeatureSequence, read_features, synthetic_split, write_features
from cham.model import (
    ChamConfig,
    ChamModel,
    ForwardTrace,
    HeadRecord,
    conv_attention_forward,
    forward_sequence,
    sequence_loss,
)
from cham.optim import TrainConfig, lr_schedule
from cham.training import GRADCHECK_CONFIG, accuracy, grad_check, train_loop

DESK = ChamConfig()
DESK_SHAPE = (DESK.seq_len, DESK.grid, DESK.grid, DESK.feature_channels)
# Faster rate for the short desk run; the schedule defaults are checked separately.
LEARN_CFG = TrainConfig(lr_initial=1e-2, lr_after=1e-2, max_iters=500, eval_every=25)


def detail(request, text):
    request.node.user_properties.append(("detail", text))


@pytest.mark.slow
@pytest.mark.criterion(1, "gradient oracle")
def test_gradient_oracle(request):
    assert GRADCHECK_CONFIG == ChamConfig(grid=3, feature_channels=4, n_hidden=6, a_channels=4,
                                          num_classes=2, seq_len=4, skip_stride=2,
                                          dropout_rate=0.0)
    start = time.perf_counter()
    reports = [grad_check(GRADCHECK_CONFIG.replace(g_activation=g), eps=1e-5)
               for g in ("sigmoid", "tanh")]
    elapsed = time.perf_counter() - start
    worst = max(max(r.errors.values()) for r in reports)
    detail(request, f"max rel error {worst:.2e} over {len(reports[0].errors)} tensors x 2 modes, "
                    f"{elapsed:.1f} s")
    for report in reports:
        assert set(report.errors) == set(ChamModel.init(GRADCHECK_CONFIG, 0).parameters())
        assert report.passed, report.format()
    assert elapsed < 60


@pytest.mark.criterion(2, "attention normalization")
def test_attention_normalization(request):
    rng = np.random.default_rng(2024)
    d, n = DESK.feature_channels, DESK.n_hidden
    p = ConvLSTMParams.init(rng, d, n, 3)
    ap = AttentionParams.init(rng, n, d, DESK.a_channels)
    worst = 0.0
    for step in range(100):
        scale = 10.0 ** rng.uniform(-1, 1)
        f_t = (scale * rng.normal(size=(DESK.grid, DESK.grid, d))).astype(np.float32)
        prev = CellState(np.tanh(rng.normal(size=(DESK.grid, DESK.grid, n))).astype(np.float32),
                         rng.normal(size=(DESK.grid, DESK.grid, n)).astype(np.float32))
        _, cache = attention_cell_step(f_t, prev, p, ap)
        worst = max(worst, abs(float(cache.l.sum(dtype=np.float64)) - 1.0))
        assert np.all(cache.l > 0), f"non-positive attention at step {step}"
    detail(request, f"100 steps, max |sum-1| = {worst:.1e}")
    assert worst < 1e-6


@pytest.mark.criterion(3, "zero-parameter closed forms")
def test_zero_cell(request):
    p = ConvLSTMParams.zeros(DESK.feature_channels, DESK.n_hidden)
    x = np.random.default_rng(0).normal(size=(DESK.grid, DESK.grid, DESK.feature_channels))
    state, _ = cell_step(x, CellState.zeros(DESK.grid, DESK.n_hidden), p, "sigmoid")
    err = np.abs(state.h - 0.122459).max()
    detail(request, f"h_1 max deviation from 0.122459: {err:.1e}")
    assert err < 1e-6
    assert abs(0.5 * math.tanh(0.25) - 0.122459) < 1e-6


@pytest.mark.criterion(3, "zero-parameter closed forms")
@pytest.mark.parametrize("num_classes", [2, 3, 5])
def test_zero_model_uniform(num_classes):
    cfg = DESK.replace(num_classes=num_classes)
    frames = np.random.default_rng(num_classes).normal(size=DESK_SHAPE)
    for mode in ("eval", "train"):
        trace = forward_sequence(ChamModel.zeros(cfg), frames, mode, 1)
        for rec in trace.head:
            assert np.array_equal(rec.probs, np.full(num_classes, 1.0 / num_classes))


@pytest.mark.criterion(4, "reduction equivalence")
@pytest.mark.parametrize("mode,seed", [("eval", None), ("train", 7)])
def test_reduction_equivalence(request, mode, seed):
    cfg = DESK.replace(layer2_enabled=False)
    model = ChamModel.init(cfg, 11)
    frames = synthetic_split(1, 3, DESK_SHAPE)[2].frames
    cham = forward_sequence(model, frames, mode, seed)
    single = conv_attention_forward(model, frames, mode, seed)
    assert len(cham.layer1) == len(single.layer1) == DESK.seq_len
    assert len(cham.head) == len(single.head) == DESK.seq_len
    for a, b in zip(cham.layer1, single.layer1):
        for name in ("l", "x", "i", "f", "o", "g", "c"):
            assert np.array_equal(getattr(a, name), getattr(b, name)), name
    for a, b in zip(cham.head, single.head):
        assert np.array_equal(a.probs, b.probs)
        assert (a.mask is None and b.mask is None) or np.array_equal(a.mask, b.mask)
    detail(request, f"{mode}: bit-identical over {DESK.seq_len} steps")


@pytest.mark.criterion(5, "structural unrolling")
@pytest.mark.parametrize("seq_len,expected", [(60, 30), (12, 6)])
def test_structural_unrolling(request, seq_len, expected):
    cfg = ChamConfig(grid=3, feature_channels=2, n_hidden=2, a_channels=2, seq_len=seq_len,
                     skip_stride=2)
    frames = np.random.default_rng(0).normal(size=(seq_len, 3, 3, 2))
    trace = forward_sequence(ChamModel.init(cfg, 0), frames)
    assert cfg.aligned_steps == expected
    assert len(trace.layer2) == expected and len(trace.head) == expected
    assert [r.frame for r in trace.head] == list(range(2, seq_len + 1, 2))
    detail(request, f"T={seq_len}: {len(trace.layer2)} layer-2 steps, {len(trace.head)} head evals")


@pytest.mark.slow
@pytest.mark.criterion(6, "learning oracle")
@pytest.mark.parametrize("layer2", [True, False], ids=["cham", "conv-attention"])
def test_learning_oracle(request, layer2):
    train = synthetic_split(20, 100, DESK_SHAPE)
    test = synthetic_split(10, 200, DESK_SHAPE)
    model = ChamModel.init(DESK.replace(layer2_enabled=layer2), 0)
    start = time.perf_counter()
    _, rows = train_loop(train, model, LEARN_CFG)
    elapsed = time.perf_counter() - start
    reached = next((r.iter for r in rows if r.train_acc >= 0.95), None)
    test_acc = accuracy(model, test)
    detail(request, f"{'CHAM' if layer2 else 'Conv-Attention'}: train acc >= 0.95 at iter "
                    f"{reached}, test acc {test_acc:.3f}, {elapsed:.0f} s")
    assert reached is not None and reached <= 500
    assert rows[-1].train_acc >= 0.95
    assert test_acc >= 0.9
    assert elapsed < 600


@pytest.mark.criterion(6, "learning oracle")
def test_single_sample_overfit(request):
    seq = synthetic_split(1, 9, DESK_SHAPE)[1]
    model = ChamModel.init(DESK, 0)
    train_loop([seq], model, LEARN_CFG.replace(max_iters=200, eval_every=200))
    loss = sequence_loss(forward_sequence(model, seq), seq.label)
    detail(request, f"single-sample loss {loss:.1e}")
    assert loss < 1e-2


def _trace(probs):
    trace = ForwardTrace()
    for k, p in enumerate(probs):
        p = np.asarray(p, dtype=float)
        trace.head.append(HeadRecord(2 * (k + 1), np.zeros(1), None, None, p.copy(), p))
    return trace


@pytest.mark.criterion(7, "loss closed forms")
@pytest.mark.parametrize("steps,classes", [(1, 2), (6, 3), (30, 5)])
def test_uniform_loss(steps, classes):
    loss = sequence_loss(_trace(np.full((steps, classes), 1.0 / classes)), 0)
    assert abs(loss - steps * math.log(classes)) < 1e-9


@pytest.mark.criterion(7, "loss closed forms")
def test_loss_from_models(request):
    frames = np.random.default_rng(1).normal(size=DESK_SHAPE)
    uniform = sequence_loss(forward_sequence(ChamModel.zeros(DESK), frames), 1)
    confident = ChamModel.zeros(DESK)
    confident.head.bias[2] = 50.0
    perfect = sequence_loss(forward_sequence(confident, frames), 2)
    detail(request, f"uniform {uniform:.12f} vs {6 * math.log(3):.12f}, one-hot {perfect:.1e}")
    assert abs(uniform - DESK.aligned_steps * math.log(DESK.num_classes)) < 1e-9
    assert perfect < 1e-9
    assert sequence_loss(_trace(np.eye(3)[[1, 1, 1]]), 1) < 1e-9


@pytest.mark.criterion(8, "determinism and persistence")
def test_fixed_seed_runs_identical(tmp_path):
    data = synthetic_split(2, 4, DESK_SHAPE)
    cfg = TrainConfig(max_iters=4, eval_every=2, batch_size=4)
    for tag in ("a", "b"):
        train_loop(data, ChamModel.init(DESK, 5), cfg, checkpoint_path=tmp_path / f"{tag}.ckpt",
                   metrics_path=tmp_path / f"{tag}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@pytest.mark.criterion(8, "determinism and persistence")
def test_checkpoint_round_trip(tmp_path):
    data = synthetic_split(1, 6, DESK_SHAPE)
    model = ChamModel.init(DESK, 6)
    ckpt, _ = train_loop(data, model, TrainConfig(max_iters=3, eval_every=3))
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    restored = loaded.to_model()
    for seq in data:
        for a, b in zip(forward_sequence(model, seq).head, forward_sequence(restored, seq).head):
            assert np.array_equal(a.probs, b.probs)
    fresh = Checkpoint.from_model(ChamModel.init(DESK, 1))
    save_checkpoint(tmp_path / "c.ckpt", fresh)
    assert load_checkpoint(tmp_path / "c.ckpt").adam is None


@pytest.mark.criterion(8, "determinism and persistence")
def test_feature_round_trip(tmp_path):
    seq = synthetic_split(1, 8, DESK_SHAPE)[0]
    write_features(tmp_path / "s.chamfeat", seq)
    back = read_features(tmp_path / "s.chamfeat")
    assert back.frames.tobytes() == seq.frames.tobytes() and back.label == seq.label
    noisy = FeatureSequence(np.random.default_rng(0).normal(size=(2, 3, 3, 2)).astype(np.float32), 1)
    write_features(tmp_path / "n.chamfeat", noisy)
    assert read_features(tmp_path / "n.chamfeat").frames.tobytes() == noisy.frames.tobytes()


@pytest.mark.criterion(9, "schedule conformance")
def test_schedule(request):
    cfg = TrainConfig()
    below = [lr_schedule(i, cfg) for i in (0, 1, 5000, 9999)]
    above = [lr_schedule(i, cfg) for i in (10000, 10001, 50000)]
    detail(request, f"lr(9999)={lr_schedule(9999, cfg)}, lr(10000)={lr_schedule(10000, cfg)}")
    assert below == [1e-4] * 4
    assert above == [1e-5] * 3
