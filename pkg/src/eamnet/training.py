"""
Training protocol: stratified splits, learning-rate schedule, Adam, early
stopping with best-weight restoration, evaluation and k-fold cross-validation.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import TrainingDivergedError, ValidationError
from .layers import softmax_xent
from .metrics import FoldReport, MetricsReport, compute_metrics, summarize_folds
from .model import Model
from .tensor import GradTape, backward


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    fixed_epochs: int = 2
    decay_factor: float = 0.97
    batch_size: int = 32
    max_epochs: int = 50
    patience: Optional[int] = 10
    monitor: str = "validation_loss"
    seed: int = 0
    freeze_fraction: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.decay_factor <= 1:
            raise ValidationError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.patience is not None and self.patience < 1:
            raise ValidationError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.fixed_epochs < 0:
            raise ValidationError("batch_size and max_epochs must be >= 1, fixed_epochs >= 0")
        if self.base_lr <= 0:
            raise ValidationError(f"base_lr must be positive, got {self.base_lr}")
        if self.monitor != "validation_loss":
            raise ValidationError(f"only 'validation_loss' can be monitored, got {self.monitor!r}")
        if not 0 <= self.freeze_fraction < 1:
            raise ValidationError(f"freeze_fraction must lie in [0, 1), got {self.freeze_fraction}")


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, ...] = (0.65, 0.15, 0.20)
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if len(self.ratios) not in (2, 3):
            raise ValidationError(f"ratios must be train/test or train/val/test, got {self.ratios}")
        if any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValidationError(f"ratios must be non-negative and sum to 1, got {self.ratios}")


@dataclass
class ArrayDataset:
    x: np.ndarray
    y: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValidationError(f"{len(self.x)} images but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ArrayDataset(self.x[idx], self.y[idx], self.class_names)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Constant for the first ``fixed_epochs`` epochs, then multiplied by ``decay_factor`` each epoch."""
    if epoch < 1:
        raise ValidationError(f"epochs are 1-based, got {epoch}")
    if epoch <= config.fixed_epochs:
        return config.base_lr
    return config.base_lr * config.decay_factor ** (epoch - config.fixed_epochs)


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    # largest remainder: every share is within one sample of ratio * n
    exact = [r * n for r in ratios]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _class_indices(labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def stratified_split(labels, spec: SplitSpec = SplitSpec()) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Indices for (train, val, test); ``val`` is empty for a two-way split."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(spec.seed)
    ratios = spec.ratios
    parts: list[list[np.ndarray]] = [[] for _ in ratios]
    if spec.stratified:
        for cls, idx in _class_indices(labels).items():
            if len(idx) < len(ratios):
                raise ValidationError(f"class {cls} has {len(idx)} samples; a {len(ratios)}-way stratified split needs >= {len(ratios)}")
            idx = rng.permutation(idx)
            start = 0
            for p, count in enumerate(_allocate(len(idx), ratios)):
                parts[p].append(idx[start : start + count])
                start += count
    else:
        idx = rng.permutation(len(labels))
        start = 0
        for p, count in enumerate(_allocate(len(idx), ratios)):
            parts[p].append(idx[start : start + count])
            start += count
    out = [np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64) for p in parts]
    if len(out) == 2:
        return out[0], np.array([], dtype=np.int64), out[1]
    return out[0], out[1], out[2]


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """k (train, test) index pairs whose test folds partition the data class by class."""
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for cls, idx in _class_indices(labels).items():
        if len(idx) < k:
            raise ValidationError(f"class {cls} has {len(idx)} samples, fewer than k={k}")
        idx = rng.permutation(idx)
        fold_of[idx] = (np.arange(len(idx)) + offset) % k
        offset = (offset + len(idx)) % k
    folds = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((train, test))
    return folds


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(name, 0.0) * b2 + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            # rebind rather than mutate so tensors from earlier passes stay valid
            params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + self.eps)


class EarlyStopping:
    """Tracks the monitored loss; ``update`` returns True once training should stop."""

    def __init__(self, patience: Optional[int]):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.patience is not None and self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    val_loss: Optional[float]
    val_accuracy: Optional[float]
    seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def train_loss(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def val_loss(self) -> list[Optional[float]]:
        return [r.val_loss for r in self.records]

    @property
    def secs_per_epoch(self) -> float:
        return float(np.mean([r.seconds for r in self.records])) if self.records else 0.0

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in self.records],
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }


def dataset_loss(model: Model, data: ArrayDataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of ``model`` on ``data`` in inference mode."""
    total, correct = 0.0, 0
    for i in range(0, len(data), batch_size):
        xb, yb = data.x[i : i + batch_size], data.y[i : i + batch_size]
        probs, loss = softmax_xent(model.forward(xb).logits, yb)
        total += loss.item() * len(yb)
        correct += int((probs.argmax(axis=1) == yb).sum())
    return total / len(data), correct / len(data)


def train(
    model: Model,
    train_data: ArrayDataset,
    val_data: Optional[ArrayDataset],
    config: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> tuple[dict[str, np.ndarray], History]:
    """Mini-batch Adam training with the epoch-wise schedule and early stopping.

    Stops after ``max_epochs`` or once the validation loss has not improved
    for ``patience`` consecutive epochs; the best-validation weights are then
    loaded back into ``model``.  Without validation data no early stopping
    happens and the final weights are kept.
    """
    if train_data.num_classes != model.num_classes:
        raise ValidationError(f"dataset has {train_data.num_classes} classes, model expects {model.num_classes}")
    if len(train_data) == 0:
        raise ValidationError("empty training set")
    use_val = val_data is not None and len(val_data) > 0
    rng = np.random.default_rng(config.seed)
    frozen_blocks = math.floor(config.freeze_fraction * model.graph.num_blocks)
    names = model.trainable_names(frozen_blocks)
    opt = Adam(config.beta1, config.beta2, config.eps)
    stopper = EarlyStopping(config.patience if use_val else None)
    history = History()
    best_state = model.state()

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        order = rng.permutation(len(train_data))
        loss_sum, correct = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            xb, yb = train_data.x[idx], train_data.y[idx]
            with GradTape() as tape:
                fp = model.forward(xb, training=True, track=names)
                probs, loss = softmax_xent(fp.logits, yb)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(epoch, f"training loss became {loss.item()} in epoch {epoch}")
            backward(loss, tape)
            opt.step(model.params, {n: t.grad for n, t in fp.params.items()}, lr)
            tape.clear()
            loss_sum += loss.item() * len(idx)
            correct += int((probs.argmax(axis=1) == yb).sum())
        val_loss = val_acc = None
        if use_val:
            val_loss, val_acc = dataset_loss(model, val_data)
            if not math.isfinite(val_loss):
                raise TrainingDivergedError(epoch, f"validation loss became {val_loss} in epoch {epoch}")
        record = EpochRecord(
            epoch,
            lr,
            loss_sum / len(order),
            correct / len(order),
            val_loss,
            val_acc,
            time.perf_counter() - started,
        )
        history.records.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if use_val:
            stop = stopper.update(epoch, val_loss)
            if stopper.best_epoch == epoch:
                best_state = model.state()
            if stop:
                history.stopped_early = True
                break

    if use_val:
        model.load_state(best_state)
        history.best_epoch = stopper.best_epoch
    else:
        history.best_epoch = len(history.records)
    return model.state(), history


def evaluate(model: Model, data: ArrayDataset, batch_size: int = 256) -> MetricsReport:
    if len(data) == 0:
        raise ValidationError("cannot evaluate on an empty test set")
    probs = model.predict_proba(data.x, batch_size)
    return compute_metrics(data.y, probs.argmax(axis=1), model.num_classes, probs)


def crossval(
    model_factory: Callable[[int], Model],
    data: ArrayDataset,
    k: int = 5,
    config: TrainConfig = TrainConfig(),
    val_fraction: float = 0.15,
    on_fold: Optional[Callable[[int, MetricsReport, History], None]] = None,
) -> FoldReport:
    """Stratified k-fold: a fresh model per fold, early stopping on a stratified slice of each training fold."""
    reports = []
    for f, (train_idx, test_idx) in enumerate(stratified_kfold(data.y, k, config.seed), start=1):
        fold_train = data.subset(train_idx)
        val = None
        if val_fraction > 0:
            tr, _, va = stratified_split(fold_train.y, SplitSpec((1 - val_fraction, val_fraction), True, config.seed + f))
            fold_train, val = fold_train.subset(tr), fold_train.subset(va)
        model = model_factory(f)
        _, history = train(model, fold_train, val, config)
        report = evaluate(model, data.subset(test_idx))
        report.epoch_seconds = [r.seconds for r in history.records]
        reports.append(report)
        if on_fold is not None:
            on_fold(f, report, history)
    return summarize_folds(reports)
