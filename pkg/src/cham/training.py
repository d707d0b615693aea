"""Mini-batch training loop and finite-difference gradient checking."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .model import ChamConfig, ChamModel, backward_sequence, forward_sequence, predict, sequence_loss
from .optim import AdamState, TrainConfig, adam_step, lr_schedule

log = logging.getLogger(__name__)

METRICS_HEADER = ("iter", "loss", "train_acc", "val_acc")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MetricsRow:
    iter: int
    loss: float
    train_acc: float
    val_acc: Optional[float] = None

    def csv_fields(self):
        return [str(self.iter), repr(self.loss), repr(self.train_acc),
                "" if self.val_acc is None else repr(self.val_acc)]


def write_metrics(path, rows: Sequence[MetricsRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.csv_fields())


def accuracy(model: ChamModel, dataset) -> float:
    if not dataset:
        return float("nan")
    hits = sum(predict(forward_sequence(model, seq, "eval"))[0] == seq.label for seq in dataset)
    return hits / len(dataset)


def _check_dataset(dataset, cfg: ChamConfig) -> None:
    expected = (cfg.seq_len, cfg.grid, cfg.grid, cfg.feature_channels)
    for seq in dataset:
        if tuple(seq.frames.shape) != expected:
            raise ValueError(f"sequence {seq.id!r} has shape {seq.frames.shape}, model expects "
                             f"{expected}")
        if not 0 <= seq.label < cfg.num_classes:
            raise ValueError(f"sequence {seq.id!r} has label {seq.label} outside "
                             f"[0, {cfg.num_classes})")


def batch_gradients(model: ChamModel, batch, seeds):
    """Mean loss and mean gradients over ``batch``; summed in a fixed order."""
    total = None
    loss = 0.0
    for seq, seed in zip(batch, seeds):
        trace = forward_sequence(model, seq, "train", seed)
        loss += sequence_loss(trace, seq.label)
        grads = backward_sequence(model, trace, seq.label)
        if total is None:
            total = grads
        else:
            for k in total:
                total[k] += grads[k]
    n = len(batch)
    for k in total:
        total[k] /= n
    return loss / n, total


def train_loop(dataset, model: ChamModel, cfg: TrainConfig, val=None,
               checkpoint_path=None, metrics_path=None,
               on_iteration: Optional[Callable[[int, float], None]] = None):
    """Train ``model`` in place. Returns ``(final checkpoint, metrics rows)``.

    The ``loss`` column of a metrics row is the mean of the batch losses since
    the previous row. On a non-finite loss, :class:`TrainingDiverged` is
    raised and the checkpoint file keeps the last good state.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    _check_dataset(dataset, model.config)
    if val:
        _check_dataset(val, model.config)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    adam = AdamState.fresh(params)
    rows: List[MetricsRow] = []
    order: List[int] = []
    pending: List[float] = []
    good = Checkpoint.from_model(model, adam, 0)

    for it in range(cfg.max_iters):
        if not order:
            order = list(rng.permutation(len(dataset)))
        take, order = order[:cfg.batch_size], order[cfg.batch_size:]
        batch = [dataset[i] for i in take]
        seeds = [int(s) for s in rng.integers(0, 2 ** 31 - 1, size=len(batch))]
        loss, grads = batch_gradients(model, batch, seeds)
        if not math.isfinite(loss):
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, good)
            raise TrainingDiverged(f"non-finite loss at iteration {it}; "
                                   f"last good checkpoint is from iteration {good.iteration}")
        adam_step(params, grads, adam, cfg, lr_schedule(it, cfg))
        pending.append(loss)
        if on_iteration is not None:
            on_iteration(it, loss)
        done = it + 1
        if done % cfg.eval_every == 0 or done == cfg.max_iters:
            row = MetricsRow(done, float(np.mean(pending)), accuracy(model, dataset),
                             accuracy(model, val) if val else None)
            pending = []
            rows.append(row)
            log.info("iter %d loss %.5f train_acc %.3f val_acc %s", row.iter, row.loss,
                     row.train_acc, row.val_acc)
            good = Checkpoint.from_model(model, adam, done)
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, good)
            if metrics_path is not None:
                write_metrics(metrics_path, rows)

    final = Checkpoint.from_model(model, adam, cfg.max_iters)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, final)
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    return final, rows


GRADCHECK_CONFIG = ChamConfig(grid=3, feature_channels=4, n_hidden=6, a_channels=4, num_classes=2,
                              seq_len=4, skip_stride=2, dropout_rate=0.0)
GRADCHECK_TOL = 1e-4


@dataclass
class GradCheckReport:
    errors: Dict[str, float] = field(default_factory=OrderedDict)
    checked: Dict[str, int] = field(default_factory=OrderedDict)
    tol: float = GRADCHECK_TOL
    label: str = ""

    @property
    def failures(self) -> List[str]:
        return [k for k, v in self.errors.items() if not v < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    def format(self) -> str:
        head = f"gradient check {self.label}".rstrip()
        lines = [head]
        width = max(len(k) for k in self.errors)
        for k, v in self.errors.items():
            status = "ok" if v < self.tol else "FAIL"
            lines.append(f"  {k:<{width}}  n={self.checked[k]:<5d} max_rel_err={v:.3e}  {status}")
        lines.append("PASS" if self.passed else f"FAIL ({len(self.failures)} tensors)")
        return "\n".join(lines)


def grad_check(cfg: ChamConfig = GRADCHECK_CONFIG, seed: int = 0, eps: float = 1e-5,
               backward=backward_sequence, max_per_tensor: Optional[int] = None,
               tol: float = GRADCHECK_TOL, fd_dtype=np.longdouble) -> GradCheckReport:
    """Compare float64 analytic BPTT gradients with central differences.

    Dropout is forced off. The finite-difference losses are evaluated on a
    copy of the model in ``fd_dtype`` (extended precision by default) so that
    entries with gradients near 1e-8 are not swamped by rounding of the loss.
    ``backward`` can be swapped to test the checker itself;
    ``max_per_tensor`` samples that many entries per tensor (all when None).
    """
    cfg = cfg.replace(dropout_rate=0.0)
    rng = np.random.default_rng(seed)
    model = ChamModel.init(cfg, seed, np.float64)
    for arr in model.parameters().values():
        if arr.ndim == 1:
            arr += rng.normal(0.0, 0.1, size=arr.shape)
    frames = rng.normal(0.0, 1.0, size=(cfg.seq_len, cfg.grid, cfg.grid, cfg.feature_channels))
    label = int(rng.integers(cfg.num_classes))

    analytic = backward(model, forward_sequence(model, frames, "train", seed), label)

    probe = ChamModel.from_parameters(
        cfg, OrderedDict((k, v.astype(fd_dtype)) for k, v in model.parameters().items()))
    probe_frames = frames.astype(fd_dtype)

    def loss_fn():
        trace = forward_sequence(probe, probe_frames, "eval")
        return -sum(np.log(r.probs[label]) for r in trace.head)

    report = GradCheckReport(tol=tol, label=f"(g_activation={cfg.g_activation})")
    for name, param in probe.parameters().items():
        flat = param.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
        a = analytic[name].reshape(-1)
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn()
            flat[j] = orig - eps
            down = loss_fn()
            flat[j] = orig
            num = float((up - down) / (2 * eps))
            err = abs(a[j] - num) / max(abs(a[j]), abs(num), 1e-8)
            worst = max(worst, err)
        report.errors[name] = float(worst)
        report.checked[name] = int(idx.size)
    return report
