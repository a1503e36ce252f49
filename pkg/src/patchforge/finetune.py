"""Fine-tuning loop, training augmentation and person-positive classification metrics."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.transforms.v2 import functional as TF

from ._validation import check_images, check_labels
from .models import ClassifierModel

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugConfig:
    hflip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        for name in ("brightness", "contrast"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} jitter must be in [0, 1), got {getattr(self, name)}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-4
    epochs: int = 5
    seed: int = 2
    augmentation: AugConfig = field(default_factory=AugConfig)
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be finite and >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int

    def to_dict(self) -> dict:
        return asdict(self)


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def metrics_from_predictions(y_true, y_pred) -> MetricsReport:
    """Confusion counts and derived metrics with person (1) as the positive class."""
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("labels and predictions must be 1-d arrays of equal length")
    if y_true.size == 0:
        raise ValueError("cannot compute metrics on an empty split")
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return MetricsReport((tp + tn) / y_true.size, precision, recall, f1_score(precision, recall), tp, fp, fn, tn)


@torch.no_grad()
def predict_person_proba(model: ClassifierModel, X: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = [model.predict_proba(X[i:i + batch_size].to(dtype))[:, model.person_class_index]
           for i in range(0, len(X), batch_size)]
    model.train(was_training)
    return torch.cat(out).cpu().numpy()


def evaluate_metrics(model: ClassifierModel, X, y, batch_size: int = 256) -> MetricsReport:
    X = check_images(X)
    y = check_labels(y, len(X))
    probs = predict_person_proba(model, X, batch_size)
    return metrics_from_predictions(y, probs >= 0.5)


def augment_batch(images: torch.Tensor, aug: AugConfig, rng: np.random.Generator) -> torch.Tensor:
    """Independently flip and colour-jitter each image; output stays in [0, 1].

    Brightness and contrast are multiplicative factors drawn from
    [1 - b, 1 + b] and [1 - c, 1 + c]; contrast blends towards each image's
    mean gray level.
    """
    n = images.shape[0]
    flips = rng.random(n) < aug.hflip_prob
    bright = rng.uniform(1 - aug.brightness, 1 + aug.brightness, n)
    contrast = rng.uniform(1 - aug.contrast, 1 + aug.contrast, n)
    out = []
    for i in range(n):
        img = images[i]
        if flips[i]:
            img = TF.horizontal_flip(img)
        if aug.brightness:
            img = TF.adjust_brightness(img, float(bright[i]))
        if aug.contrast:
            img = TF.adjust_contrast(img, float(contrast[i]))
        out.append(img.clamp(0.0, 1.0))
    return torch.stack(out)


def train(model: ClassifierModel, X, y, config: TrainConfig = TrainConfig(), X_val=None, y_val=None,
          log_path: str | Path | None = None):
    """Fine-tune the trainable parameters of ``model`` with cross-entropy and Adam.

    Validation metrics are computed after every epoch (on the training data
    when no validation set is given) and the weights with the best F1 are
    restored at the end. Returns ``(model, log)`` where ``log`` is a list of
    ``{"epoch", "split", "metric", "value"}`` rows, also appended to
    ``log_path`` as JSON lines when given.
    """
    X = check_images(X)
    y = check_labels(y, len(X))
    if X_val is None:
        X_val, y_val = X, y
    else:
        X_val = check_images(X_val, name="X_val")
        y_val = check_labels(y_val, len(X_val), name="y_val")

    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("model has no trainable parameters")
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    targets = torch.as_tensor(y)
    log: list[dict] = []

    def emit(epoch, split, metric, value):
        row = {"epoch": epoch, "split": split, "metric": metric, "value": float(value)}
        log.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    best_f1, best_state, best_epoch = -1.0, None, 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(X))
        total, seen = 0.0, 0
        for start in range(0, len(X), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = augment_batch(X[idx], config.augmentation, rng)
            logits = model(batch)
            loss = F.cross_entropy(logits, targets[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite training loss {float(loss.detach())} at epoch {epoch}, batch starting {start}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        model.eval()
        emit(epoch, "train", "loss", total / seen)
        report = evaluate_metrics(model, X_val, y_val, config.eval_batch_size)
        for metric in ("accuracy", "precision", "recall", "f1"):
            emit(epoch, "val", metric, getattr(report, metric))
        logger.info("epoch %d loss %.4f val acc %.4f f1 %.4f", epoch, total / seen, report.accuracy, report.f1)
        if report.f1 > best_f1:
            best_f1, best_epoch = report.f1, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.metrics = {"best_epoch": best_epoch, "val_f1": best_f1}
    return model.eval(), log
