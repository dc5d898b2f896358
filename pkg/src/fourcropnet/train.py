"""Loss, optimizers, the training loop, evaluation and finite-difference gradient checking."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .data import AugmentConfig, ImageStore, batch_iterator
from .errors import ConfigError, NumericalError
from .metrics import confusion_matrix, metrics_from_confusion, roc_curve
from .model import FourCropNet

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


def cross_entropy_loss(probabilities, labels):
    """Mean negative log-likelihood and the fused softmax+CE logit gradient ``(p - onehot) / N``."""
    p = np.asarray(probabilities)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = p.shape
    if labels.shape != (n,):
        raise ConfigError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ConfigError(f"labels must lie in [0, {c})")
    picked = p[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, LOG_CLAMP))))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


def softmax_cross_entropy(logits, labels):
    return cross_entropy_loss(tc.softmax(logits), labels)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params):
        for p in params:
            p.value -= p.value.dtype.type(self.lr) * p.grad


class Adam:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p in params:
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value -= update.astype(p.value.dtype)


@dataclass
class TrainConfig:
    epochs: int = 110
    batch_size: int = 32
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    patience: int | None = None
    augment: bool = True
    # stop as soon as an epoch ends with train accuracy at or above this value
    target_train_accuracy: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return SGD(self.learning_rate)
        return Adam(self.learning_rate, (self.beta1, self.beta2), self.adam_eps)


@dataclass
class CurveRow:
    epoch: int
    train_loss: float
    train_acc: float
    valid_loss: float
    valid_acc: float


@dataclass
class TrainingCurve:
    rows: list[CurveRow] = field(default_factory=list)

    def append(self, row: CurveRow):
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_acc", "valid_loss", "valid_acc"])
            for r in self.rows:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.valid_loss), repr(r.valid_acc)])


@dataclass
class TrainResult:
    model: FourCropNet
    curve: TrainingCurve
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_valid_acc: float


def state_dict(model: FourCropNet) -> dict[str, np.ndarray]:
    return {p.name: p.value.copy() for p in model.params()}


def load_state(model: FourCropNet, state: dict[str, np.ndarray]) -> FourCropNet:
    for p in model.params():
        p.value = state[p.name].copy()
    return model


def evaluate_loss_accuracy(model, part, batch_size=32, store=None):
    """Mean loss and accuracy in inference mode; never touches parameters or BN statistics."""
    total_loss, correct, n = 0.0, 0, 0
    for images, labels in batch_iterator(part, batch_size, store=store):
        probs = tc.softmax(model.forward(images, train=False))
        loss, _ = cross_entropy_loss(probs, labels)
        total_loss += loss * len(labels)
        correct += int((probs.argmax(axis=1) == labels).sum())
        n += len(labels)
    return total_loss / n, correct / n


def predict_part(model, part, batch_size=32, store=None):
    """(probabilities, labels) for every sample of ``part`` in stored order."""
    probs, labels = [], []
    for images, y in batch_iterator(part, batch_size, store=store):
        probs.append(tc.softmax(model.forward(images, train=False)))
        labels.append(y)
    return np.concatenate(probs), np.concatenate(labels)


def train(model: FourCropNet, train_part, valid_part, cfg: TrainConfig,
          augment_cfg: AugmentConfig | None = None, store: ImageStore | None = None,
          on_epoch=None) -> TrainResult:
    """Minibatch training; each epoch ends with an inference-mode pass over train and valid."""
    store = store or ImageStore(model.config.input_size)
    optimizer = cfg.make_optimizer()
    params = model.trainable_params()
    augment_cfg = (augment_cfg or AugmentConfig()) if cfg.augment else None
    curve = TrainingCurve()
    best_state, best_epoch, best_acc = state_dict(model), 0, -1.0
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        for b, (images, labels) in enumerate(batch_iterator(
                train_part, cfg.batch_size, cfg.seed, epoch, augment_cfg, store)):
            model.zero_grad()
            loss, dlogits = softmax_cross_entropy(model.forward(images, train=True), labels)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}, lr {cfg.learning_rate}")
            model.backward(dlogits.astype(model.dtype))
            optimizer.step(params)
        tr_loss, tr_acc = evaluate_loss_accuracy(model, train_part, cfg.batch_size, store)
        va_loss, va_acc = evaluate_loss_accuracy(model, valid_part, cfg.batch_size, store)
        row = CurveRow(epoch, tr_loss, tr_acc, va_loss, va_acc)
        curve.append(row)
        log.info("epoch %d train_loss %.4f train_acc %.4f valid_loss %.4f valid_acc %.4f", *asdict(row).values())
        if on_epoch is not None:
            on_epoch(row)
        if va_acc > best_acc:
            best_state, best_epoch, best_acc = state_dict(model), epoch, va_acc
            stale = 0
        else:
            stale += 1
        if cfg.patience is not None and stale >= cfg.patience:
            break
        if cfg.target_train_accuracy is not None and tr_acc >= cfg.target_train_accuracy:
            break
    return TrainResult(model, curve, best_state, best_epoch, best_acc)


@dataclass
class EvalReport:
    confusion: np.ndarray
    metrics: dict
    roc: object
    class_names: list[str]

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "confusion.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.class_names])
            for name, row in zip(self.class_names, self.confusion):
                w.writerow([name, *(int(v) for v in row)])
        for k, (fpr, tpr) in self.roc.curves.items():
            with open(out / f"roc_{self.class_names[k]}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["fpr", "tpr"])
                for a, b in zip(fpr, tpr):
                    w.writerow([repr(float(a)), repr(float(b))])
        payload = {
            "accuracy": self.metrics["accuracy"],
            "total": self.metrics["total"],
            "macro": self.metrics["macro"],
            "per_class": {n: m for n, m in zip(self.class_names, self.metrics["per_class"])},
            "auc": {self.class_names[k]: v for k, v in self.roc.auc.items()},
            "macro_auc": self.roc.macro_auc,
            "roc_skipped": [self.class_names[k] for k in self.roc.skipped],
            "warnings": self.metrics["warnings"],
        }
        (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def evaluate(model: FourCropNet, part, batch_size=32, store=None) -> EvalReport:
    import warnings

    probs, labels = predict_part(model, part, batch_size, store)
    cm = confusion_matrix(labels, probs.argmax(axis=1), model.config.num_classes)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        metrics = metrics_from_confusion(cm)
        roc = roc_curve(probs, labels)
    return EvalReport(cm, metrics, roc, model.class_names)


# gradient checking

@dataclass
class GradCheckEntry:
    param: str
    layer: str
    layer_type: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max(e.rel_error for e in self.entries)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.rel_error)

    def per_layer(self) -> dict[str, tuple[str, float]]:
        out: dict[str, tuple[str, float]] = {}
        for e in self.entries:
            prev = out.get(e.layer, (e.layer_type, 0.0))[1]
            out[e.layer] = (e.layer_type, max(prev, e.rel_error))
        return out

    def layer_types(self) -> set[str]:
        return {e.layer_type for e in self.entries}


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _model_loss(model, images, labels) -> float:
    loss, _ = softmax_cross_entropy(model.forward(images, train=False), labels)
    return loss


def gradient_check(model: FourCropNet, images, labels, per_tensor: int = 2, eps: float = 1e-5,
                   tolerance: float = 1e-3, seed: int = 0) -> GradCheckReport:
    """Central differences against backprop for ``per_tensor`` random scalars of every trainable tensor.

    Runs in inference mode (BN uses running statistics) with dropout off; the
    model must already hold float64 parameters.
    """
    if per_tensor < 1:
        raise ConfigError("gradient check needs at least one scalar per parameter tensor")
    if model.dtype != np.float64:
        raise ConfigError("gradient check requires a float64 model")
    images = np.asarray(images, dtype=np.float64)
    model.set_dropout(False)
    try:
        model.zero_grad()
        _, dlogits = softmax_cross_entropy(model.forward(images, train=False), labels)
        model.backward(dlogits)
        owners = {}
        for layer in model.iter_leaf_layers():
            for p in layer.params():
                owners[p.name] = layer
        rng = np.random.default_rng(seed)
        entries = []
        for p in model.trainable_params():
            layer = owners[p.name]
            flat = rng.choice(p.value.size, size=min(per_tensor, p.value.size), replace=False)
            for fi in flat:
                idx = np.unravel_index(int(fi), p.value.shape)
                orig = p.value[idx]
                p.value[idx] = orig + eps
                plus = _model_loss(model, images, labels)
                p.value[idx] = orig - eps
                minus = _model_loss(model, images, labels)
                p.value[idx] = orig
                numeric = (plus - minus) / (2 * eps)
                analytic = float(p.grad[idx])
                kind = type(layer).__name__
                if ".proj" in layer.name:
                    kind = "Projection" + kind
                entries.append(GradCheckEntry(p.name, layer.name, kind, tuple(int(i) for i in idx),
                                              analytic, numeric, relative_error(analytic, numeric)))
    finally:
        model.set_dropout(True)
    return GradCheckReport(entries, tolerance)


def gradcheck_inputs(config, batch: int = 2, seed: int = 0):
    rng = np.random.default_rng(seed)
    s = config.input_size
    images = rng.random((batch, s, s, 3))
    labels = rng.integers(0, config.num_classes, size=batch)
    return images, labels


def layer_summary(report: GradCheckReport) -> dict[str, list]:
    by_type = defaultdict(list)
    for layer, (kind, err) in report.per_layer().items():
        by_type[kind].append((layer, err))
    return dict(by_type)
