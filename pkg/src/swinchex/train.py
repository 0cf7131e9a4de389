"""Training loop, AUROC evaluation, max-validation-AUC model selection and reports."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import CLASS_NAMES
from .model import SwinModel, bce_loss, predict_proba
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class UndefinedAUCError(ValueError):
    """AUROC requested for labels containing a single class."""


# ---------------------------------------------------------------------------
# metrics


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outscores a random negative, ties counted half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks over ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalReport:
    per_class_auc: list[float]
    mean_auc: float
    split: str = "val"
    epoch: int | None = None

    @property
    def defined(self) -> list[bool]:
        return [not math.isnan(v) for v in self.per_class_auc]


def report_from_scores(scores: np.ndarray, labels: np.ndarray, split: str = "val",
                       epoch: int | None = None) -> EvalReport:
    """Per-class AUROC over columns; single-class columns become NaN and are left out of the mean."""
    per_class = []
    for k in range(labels.shape[1]):
        try:
            per_class.append(auroc(scores[:, k], labels[:, k]))
        except UndefinedAUCError:
            name = CLASS_NAMES[k] if k < len(CLASS_NAMES) else str(k)
            warnings.warn(f"AUROC undefined for {name} on {split}: single-class labels", stacklevel=2)
            per_class.append(math.nan)
    defined = [v for v in per_class if not math.isnan(v)]
    mean_auc = float(np.mean(defined)) if defined else math.nan
    return EvalReport(per_class, mean_auc, split, epoch)


def predict(model: SwinModel, batches) -> tuple[np.ndarray, np.ndarray]:
    probs, labels = [], []
    with no_grad():
        for x, y in batches:
            probs.append(predict_proba(x, model).data)
            labels.append(y.data)
    return np.concatenate(probs), np.concatenate(labels)


def evaluate(model: SwinModel, batches, split: str = "val", epoch: int | None = None) -> EvalReport:
    scores, labels = predict(model, batches)
    return report_from_scores(scores, labels, split, epoch)


def select_best_epoch(history) -> int:
    """Index of the maximum validation mean AUC; the earliest epoch wins ties."""
    values = [h.val_mean_auc if isinstance(h, EpochRecord) else float(h) for h in history]
    if not values:
        raise ValueError("cannot select from an empty history")
    best = 0
    for i, v in enumerate(values):
        if v > values[best] or (math.isnan(values[best]) and not math.isnan(v)):
            best = i
    return best


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamW:
    """Adam with decoupled weight decay; decay skips 1-D tensors (biases, norms)."""

    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for path, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.setdefault(path, np.zeros_like(p.data))
            v = self.v.setdefault(path, np.zeros_like(p.data))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and p.ndim > 1:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class SGD:
    momentum: float = 0.0
    step_count: int = 0
    buf: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params, lr: float) -> None:
        self.step_count += 1
        for path, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.momentum:
                b = self.buf.setdefault(path, np.zeros_like(p.data))
                b *= self.momentum
                b += g
                g = b
            p.data -= lr * g


def make_optimizer(name: str = "adamw", weight_decay: float = 0.01):
    if name == "adamw":
        return AdamW(weight_decay=weight_decay)
    if name == "sgd":
        return SGD()
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mean_auc: float = math.nan
    per_class_auc: list[float] = field(default_factory=list)


@dataclass
class TrainState:
    model: SwinModel
    optimizer: AdamW | SGD
    seed: int = 0
    epoch: int = 0
    history: list[EpochRecord] = field(default_factory=list)


def train_epoch(state: TrainState, batches, lr: float = 3e-5) -> TrainState:
    """One pass of forward, BCE, backward and optimiser step per batch; records mean loss."""
    params = state.model.params
    losses = []
    for i, (x, y) in enumerate(batches):
        params.zero_grad()
        loss = bce_loss(predict_proba(x, state.model), y)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at epoch {state.epoch}, batch {i}")
        backward(loss)
        state.optimizer.step(params, lr)
        losses.append(value)
    state.history.append(EpochRecord(state.epoch, float(np.mean(losses)) if losses else math.nan))
    state.epoch += 1
    return state


def mean_loss(model: SwinModel, batches) -> float:
    total, n = 0.0, 0
    with no_grad():
        for x, y in batches:
            total += bce_loss(predict_proba(x, model), y).item() * y.shape[0]
            n += y.shape[0]
    return total / n


def fit(
    state: TrainState,
    train_batches: Callable[[int], list[tuple[Tensor, Tensor]]],
    val_batches,
    epochs: int,
    lr: float,
    on_epoch: Callable[[TrainState, EpochRecord], None] | None = None,
) -> TrainState:
    """Train for a fixed number of epochs, scoring validation AUROC after each.

    ``train_batches(epoch)`` supplies that epoch's (shuffled) batches.
    """
    if epochs < 1:
        raise ValueError("nothing to train: epochs must be >= 1")
    for _ in range(epochs):
        epoch = state.epoch
        train_epoch(state, train_batches(epoch), lr)
        rec = state.history[-1]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = evaluate(state.model, val_batches, "val", epoch)
        rec.val_mean_auc, rec.per_class_auc = report.mean_auc, report.per_class_auc
        log.info("epoch %d train_loss %.6f val_mean_auc %.6f", epoch, rec.train_loss, rec.val_mean_auc)
        if on_epoch is not None:
            on_epoch(state, rec)
    return state


# ---------------------------------------------------------------------------
# reports


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def write_metrics_csv(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_mean_auc", *CLASS_NAMES])
        for r in history:
            per = r.per_class_auc or [math.nan] * len(CLASS_NAMES)
            w.writerow([r.epoch, _fmt(r.train_loss), _fmt(r.val_mean_auc), *map(_fmt, per)])


def read_metrics_csv(path) -> list[EpochRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_mean_auc"]),
                        [float(r[c]) for c in CLASS_NAMES]) for r in rows]


def write_report_csv(reports: dict[str, EvalReport], path, digits: int = 3) -> None:
    """Pathology rows plus a Mean row; one column per evaluated model variant."""
    names = list(reports)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pathology", *names])

        def cell(v):
            return "nan" if math.isnan(v) else f"{v:.{digits}f}"

        for k, cls in enumerate(CLASS_NAMES):
            w.writerow([cls, *(cell(reports[n].per_class_auc[k]) for n in names)])
        w.writerow(["Mean", *(cell(reports[n].mean_auc) for n in names)])


def read_report_csv(path) -> dict[str, list[float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return {n: [float(r[i + 1]) for r in rows[1:]] for i, n in enumerate(names)}


def write_best(path, epoch: int, checkpoint: str, val_mean_auc: float) -> None:
    Path(path).write_text(
        f"epoch={epoch}\ncheckpoint={checkpoint}\nval_mean_auc={_fmt(val_mean_auc)}\n", encoding="utf-8"
    )


def read_best(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out
