"""Toy end-to-end training on the synthetic texture set, plus a pixel-space baseline."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax as _np_log_softmax

from . import numerics as nx
from .config import PiipConfig
from .data import NUM_CLASSES, Split, make_dataset
from .errors import ConfigError, NumericError
from .model import build_model, forward
from .numerics import GradTape, no_record

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_acc")


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    model: object = None

    @property
    def final(self) -> dict:
        return self.history[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.history:
            w.writerow({k: row[k] for k in METRIC_COLUMNS})
        return buf.getvalue()


def toy_config(cfg: PiipConfig) -> PiipConfig:
    """Dense configs are switched to per-branch class-token heads; class count set to 8."""
    if cfg.mode == "dense":
        cfg = cfg.replace(mode="classify_finetune",
                          branches=tuple(b.replace(use_cls_token=True) for b in cfg.branches))
    return cfg.replace(num_classes=NUM_CLASSES).validate()


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))


def _predict(model, images: np.ndarray, batch: int) -> np.ndarray:
    out = []
    with no_record():
        for i in range(0, len(images), batch):
            out.append(forward(model, images[i:i + batch]).data.argmax(-1))
    return np.concatenate(out)


def train_toy(cfg: PiipConfig, dataset_seed: int = 0, epochs: int = 30, batch: int = 16,
              lr: float = 0.1, seed: int = 0, init_std: float = 0.2, data: tuple[Split, Split] | None = None,
              log=None, return_model: bool = False) -> TrainResult:
    """Plain SGD with a per-step cosine schedule; metrics recorded once per epoch.

    ``init_std`` defaults well above the model default: at std 0.02 the
    image-dependent part of the tiny model's class tokens is ~100x smaller
    than the constant part and plain SGD stalls near chance.

    Raises :class:`DivergenceError` carrying the global step index on a
    non-finite loss.
    """
    cfg = toy_config(cfg)
    if cfg.mode not in ("classify_pretrain", "classify_finetune"):
        raise ConfigError(f"toy training needs a classification mode, got {cfg.mode}")
    train, test = data or make_dataset(cfg.max_resolution, dataset_seed)
    model = build_model(cfg, seed=seed, std=init_std)
    params = model.parameters()
    rng = np.random.default_rng(seed)
    steps_per_epoch = math.ceil(len(train.labels) / batch)
    total = epochs * steps_per_epoch
    step = 0
    result = TrainResult()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train.labels))
        loss_sum, seen = 0.0, 0
        rate = lr
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            rate = cosine_lr(lr, step, total)
            try:
                # overflow is reported as divergence below, not as numpy warnings
                with GradTape() as tape, np.errstate(over="ignore", invalid="ignore"):
                    loss = nx.cross_entropy(forward(model, train.images[idx]), train.labels[idx])
            except NumericError:
                raise DivergenceError(step) from None
            if not np.isfinite(loss.data).all():
                raise DivergenceError(step)
            tape.backward(loss)
            for p in params:
                if p.grad is not None:
                    p.data -= np.asarray(rate, p.dtype) * p.grad.data
                p.grad = None
            loss_sum += loss.item() * len(idx)
            seen += len(idx)
            step += 1
        row = {
            "epoch": epoch,
            "lr": rate,
            "train_loss": loss_sum / seen,
            "train_acc": float((_predict(model, train.images, 128) == train.labels).mean()),
            "test_acc": float((_predict(model, test.images, 128) == test.labels).mean()),
        }
        result.history.append(row)
        if log:
            log(row)
    if return_model:
        result.model = model
    return result


def logistic_baseline(train: Split, test: Split, epochs: int = 200, lr: float = 0.1,
                      l2: float = 1e-3) -> dict:
    """Multinomial logistic regression on standardised raw pixels, full-batch gradient descent."""
    x = train.images.reshape(len(train.labels), -1).astype(np.float64)
    mu, sd = x.mean(0), x.std(0) + 1e-8
    x = (x - mu) / sd
    xt = (test.images.reshape(len(test.labels), -1) - mu) / sd
    n, d = x.shape
    w = np.zeros((d, NUM_CLASSES))
    b = np.zeros(NUM_CLASSES)
    onehot = np.eye(NUM_CLASSES)[train.labels]
    for _ in range(epochs):
        p = np.exp(_np_log_softmax(x @ w + b, axis=1))
        g = (p - onehot) / n
        w -= lr * (x.T @ g + l2 * w)
        b -= lr * g.sum(0)
    return {
        "train_acc": float(((x @ w + b).argmax(1) == train.labels).mean()),
        "test_acc": float(((xt @ w + b).argmax(1) == test.labels).mean()),
    }
