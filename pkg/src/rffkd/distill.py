"""Distillation losses and the supervised / fixed-temperature training loops."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .featurizer import DatasetSplit, SplitData
from .models import Model
from .numcore import Adam, Tensor, backward, ops
from .numcore.tensor import make_node

log = logging.getLogger(__name__)

KD_MODES = ("none", "fixed", "dynamic")
KL_DIRECTIONS = ("forward", "reverse")
TRACE_COLUMNS = ("epoch", "tau", "train_acc", "val_acc", "ce", "kl", "reward")


class NumericFailure(RuntimeError):
    """Raised when a training loss goes non-finite.

    ``state`` holds the last weights that produced a finite epoch; the model
    has already been rolled back to them.
    """

    def __init__(self, msg: str, state: dict[str, np.ndarray], epoch: int):
        super().__init__(msg)
        self.state = state
        self.epoch = epoch


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0

    def make(self, params: Sequence[Tensor]) -> Adam:
        return Adam(params, self.lr, self.beta1, self.beta2, self.eps, self.clip_norm)


@dataclass
class DistillConfig:
    beta: float = 0.5
    tau: float = 4.0
    epochs: int = 30
    batch_size: int = 32
    kd_mode: str = "fixed"
    tau_squared: bool = True
    direction: str = "forward"
    optim: OptimConfig = field(default_factory=OptimConfig)

    def validate(self) -> "DistillConfig":
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.kd_mode not in KD_MODES:
            raise ValueError(f"kd_mode must be one of {KD_MODES}, got {self.kd_mode!r}")
        if self.direction not in KL_DIRECTIONS:
            raise ValueError(f"direction must be one of {KL_DIRECTIONS}, got {self.direction!r}")
        return self


# ---------------------------------------------------------------- losses

def softened_probs(logits, tau: float) -> np.ndarray:
    """``softmax(logits / tau)`` along the last axis."""
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``sum p log(p/q)`` with the ``0 log 0 = 0`` convention."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * (np.log(safe) - np.log(np.where(p > 0, q, 1.0))), 0.0).sum(axis=-1)


def kl_loss(k_t, k_s, tau: float, tau_squared: bool = True, direction: str = "forward") -> Tensor:
    """Batch-mean KL between softened teacher and student distributions.

    ``forward`` is KL(teacher || student), ``reverse`` swaps the arguments.
    The teacher side is treated as a constant. With ``tau_squared`` the
    result is scaled by ``tau**2``.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if direction not in KL_DIRECTIONS:
        raise ValueError(f"direction must be one of {KL_DIRECTIONS}, got {direction!r}")
    t = np.asarray(k_t.data if isinstance(k_t, Tensor) else k_t, dtype=np.float64)
    k_s = k_s if isinstance(k_s, Tensor) else Tensor(np.asarray(k_s, dtype=np.float64))
    if t.shape != k_s.shape or t.ndim != 2:
        raise ValueError(f"kl_loss: teacher logits {t.shape} vs student logits {k_s.shape}")
    scale = tau * tau if tau_squared else 1.0
    log_p = ops.log_softmax(Tensor(t / tau)).data
    if direction == "reverse":
        log_q = ops.log_softmax(k_s / tau)
        return (ops.exp(log_q) * (log_q - Tensor(log_p))).sum(axis=-1).mean() * scale
    # fused forward KL: d/dk_s is exactly (q - p) / tau per row, so equal inputs give a zero gradient
    log_q = ops.log_softmax(Tensor(k_s.data / tau)).data
    p, q = np.exp(log_p), np.exp(log_q)
    bsz = t.shape[0]
    value = float((p * (log_p - log_q)).sum(axis=-1).mean()) * scale
    return make_node(np.array(value), (k_s,), lambda g: (g * scale * (q - p) / (tau * bsz),), "kl_forward")


def total_loss(ce, kl, beta: float):
    """``(1 - beta) * ce + beta * kl``; works on floats and Tensors."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return ce * (1.0 - beta) + kl * beta


# ---------------------------------------------------------------- traces

@dataclass
class EpochRecord:
    epoch: int
    tau: float | None
    train_acc: float
    val_acc: float
    ce: float
    kl: float | None
    reward: float | None = None
    wall_time: float = 0.0
    batch_acc: list[float] = field(default_factory=list, repr=False)


@dataclass
class DistillTrace:
    mode: str
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError(f"epoch {rec.epoch} after {self.records[-1].epoch}")
        vals = [rec.train_acc, rec.val_acc, rec.ce] + [v for v in (rec.tau, rec.kl, rec.reward) if v is not None]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite value in epoch {rec.epoch} record")
        self.records.append(rec)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    @property
    def wall_time(self) -> float:
        return float(sum(r.wall_time for r in self.records))

    def rows(self) -> list[dict]:
        return [{c: getattr(r, c) for c in TRACE_COLUMNS} for r in self.records]

    def to_csv(self, path: str | Path) -> None:
        """Deterministic columns only; wall time lives in the JSON summary."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for row in self.rows():
                w.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c]
                            for c in TRACE_COLUMNS])

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {"mode": self.mode, "epochs": len(self.records),
                "final_train_acc": last.train_acc if last else None,
                "final_val_acc": last.val_acc if last else None,
                "records": self.rows()}

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))


def read_trace_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (None if v == "" else int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- evaluation

@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray  # row-normalized, rows = true labels
    counts: np.ndarray
    correct: int
    total: int


def confusion_counts(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return counts


def evaluate(model: Model, split: SplitData, batch_size: int = 128) -> Evaluation:
    """Accuracy and row-normalized confusion matrix; rows with no samples stay zero."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    pred = model.predict_logits(split.x, batch_size).argmax(axis=1)
    return evaluation_from_predictions(split.y, pred, model.num_classes)


def evaluation_from_predictions(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> Evaluation:
    counts = confusion_counts(y_true, y_pred, n_classes)
    rows = counts.sum(axis=1, keepdims=True)
    conf = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    correct, total = int(np.trace(counts)), int(counts.sum())
    return Evaluation(correct / total, conf, counts, correct, total)


def accuracy(model: Model, split: SplitData) -> float:
    return evaluate(model, split).accuracy


# ---------------------------------------------------------------- training loops

@dataclass
class EpochMetrics:
    batch_acc: list[float]
    train_acc: float  # mean batch accuracy
    ce: float
    kl: float | None  # mean unscaled KL(teacher || student) at the epoch's tau
    val_acc: float


LossFn = Callable[[Tensor, np.ndarray, np.ndarray], tuple[Tensor, float, float | None]]


def _run_epoch(model: Model, train: SplitData, val: SplitData, opt: Adam, rng: np.random.Generator,
               batch_size: int, loss_fn: LossFn) -> EpochMetrics:
    order = rng.permutation(len(train))
    accs, ces, kls = [], [], []
    params = model.parameters()
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        logits = model.forward(train.x[idx], train=True, rng=rng)
        loss, ce, kl = loss_fn(logits, train.y[idx], idx)
        if not math.isfinite(float(loss.item())):
            raise FloatingPointError(f"non-finite loss at batch starting {start}")
        opt.step(backward(loss, params))
        accs.append(float(np.mean(logits.data.argmax(axis=1) == train.y[idx])))
        ces.append(ce)
        if kl is not None:
            kls.append(kl)
    val_acc = evaluate(model, val).accuracy
    return EpochMetrics(accs, float(np.mean(accs)), float(np.mean(ces)),
                        float(np.mean(kls)) if kls else None, val_acc)


def _supervised_loss(model: Model) -> LossFn:
    def fn(logits, y, idx):
        ce = ops.cross_entropy(logits, y)
        return ce + model.reg_loss(), float(ce.item()), None
    return fn


def _kd_loss(model: Model, teacher_logits: np.ndarray, tau: float, beta: float,
             tau_squared: bool, direction: str) -> LossFn:
    def fn(logits, y, idx):
        ce = ops.cross_entropy(logits, y)
        kl = kl_loss(teacher_logits[idx], logits, tau, tau_squared, direction)
        raw = float(kl.item()) / (tau * tau) if tau_squared else float(kl.item())
        if direction == "reverse":
            raw = float(kl_divergence(softened_probs(teacher_logits[idx], tau),
                                      softened_probs(logits.data, tau)).mean())
        return total_loss(ce, kl, beta) + model.reg_loss(), float(ce.item()), raw
    return fn


def _guarded(model: Model, epoch: int, fn: Callable[[], EpochMetrics]) -> EpochMetrics:
    snapshot = model.state_dict()
    try:
        return fn()
    except FloatingPointError as exc:
        model.load_state_dict(snapshot)
        log.error("epoch %d: %s; rolled back to last good weights", epoch, exc)
        raise NumericFailure(f"epoch {epoch}: {exc}", snapshot, epoch) from exc


def supervised_epoch(model: Model, data: DatasetSplit, opt: Adam, rng: np.random.Generator,
                     batch_size: int = 32) -> EpochMetrics:
    return _run_epoch(model, data.train, data.val, opt, rng, batch_size, _supervised_loss(model))


def train_supervised(model: Model, data: DatasetSplit, cfg: DistillConfig, rng: np.random.Generator,
                     opt: Adam | None = None) -> DistillTrace:
    """Cross-entropy training (plus the model's head regularizer), in place.

    Returns the per-epoch trace. Zero epochs leave the weights untouched.
    """
    cfg.validate()
    if len(data.train) == 0 or len(data.val) == 0:
        raise ValueError("train and val splits must be nonempty")
    opt = opt or cfg.optim.make(model.parameters())
    trace = DistillTrace("none")
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        m = _guarded(model, epoch, lambda: supervised_epoch(model, data, opt, rng, cfg.batch_size))
        trace.append(EpochRecord(epoch, None, m.train_acc, m.val_acc, m.ce, None,
                                 wall_time=time.perf_counter() - t0, batch_acc=m.batch_acc))
        log.info("supervised epoch %d: train %.4f val %.4f ce %.4f", epoch, m.train_acc, m.val_acc, m.ce)
    return trace


def teacher_logits(teacher: Model, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Frozen teacher outputs in eval mode (dropout off)."""
    return teacher.predict_logits(x, batch_size)


def distill_epoch(student: Model, teacher: Model | np.ndarray, data: DatasetSplit, tau: float, beta: float,
                  opt: Adam, rng: np.random.Generator, batch_size: int = 32, tau_squared: bool = True,
                  direction: str = "forward") -> EpochMetrics:
    """One pass over the training batches minimizing the blended loss.

    ``teacher`` is either a model or its precomputed eval-mode logits for
    ``data.train.x`` row for row. The teacher is never updated.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    t_logits = teacher if isinstance(teacher, np.ndarray) else teacher_logits(teacher, data.train.x)
    if t_logits.shape != (len(data.train), student.num_classes):
        raise ValueError(f"teacher logits {t_logits.shape} do not match the training split")
    fn = _kd_loss(student, t_logits, tau, beta, tau_squared, direction)
    return _run_epoch(student, data.train, data.val, opt, rng, batch_size, fn)


def train_fixed(student: Model, teacher: Model | np.ndarray, data: DatasetSplit, cfg: DistillConfig,
                rng: np.random.Generator) -> DistillTrace:
    """Distillation at the constant temperature ``cfg.tau``."""
    cfg.validate()
    t_logits = teacher if isinstance(teacher, np.ndarray) else teacher_logits(teacher, data.train.x)
    opt = cfg.optim.make(student.parameters())
    trace = DistillTrace("fixed")
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        m = _guarded(student, epoch, lambda: distill_epoch(
            student, t_logits, data, cfg.tau, cfg.beta, opt, rng, cfg.batch_size, cfg.tau_squared, cfg.direction))
        trace.append(EpochRecord(epoch, cfg.tau, m.train_acc, m.val_acc, m.ce, m.kl,
                                 wall_time=time.perf_counter() - t0, batch_acc=m.batch_acc))
        log.info("fixed tau=%g epoch %d: train %.4f val %.4f kl %.4f", cfg.tau, epoch, m.train_acc, m.val_acc, m.kl)
    return trace
