"""Adam optimisation loop, evaluation and per-epoch history."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .checkpoint import AdamState, save_checkpoint
from .data import Dataset, batch_indices, stack
from .metrics import LOSSES, REPORT_FIELDS, MetricsReport, dice_coef, score_batch, summarize
from .models import Model
from .tensor_core import Tape, Tensor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch",) + REPORT_FIELDS + tuple("val_" + f for f in REPORT_FIELDS)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_kind: str = "dice"
    threshold: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.loss_kind not in LOSSES:
            raise ValueError(f"loss_kind must be one of {sorted(LOSSES)}")


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise TrainingError(f"missing gradient for {', '.join(missing[:5])}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)).astype(p.data.dtype)


class History:
    """Per-epoch metric rows keyed by :data:`HISTORY_COLUMNS`."""

    def __init__(self, rows: Iterable[dict] = ()):
        self.rows: list[dict] = list(rows)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def final(self) -> dict:
        return self.rows[-1]

    def best(self) -> dict:
        """Row with the highest val_dice_coef (earliest on ties)."""
        return max(self.rows, key=lambda r: (r["val_dice_coef"], -r["epoch"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()


def _check_resolution(model: Model, ds: Dataset) -> None:
    if len(ds) == 0:
        raise TrainingError("dataset is empty")
    if tuple(ds.target_hw) != tuple(model.spec.input_hw):
        raise TrainingError(f"dataset resolution {ds.target_hw} != model input_hw {model.spec.input_hw}")


def image_loss(kind: str, pred: np.ndarray, truth: np.ndarray) -> float:
    if kind == "dice":
        return 1.0 - dice_coef(pred, truth)
    return LOSSES[kind](Tensor(pred.astype(np.float64)), truth).item()


def predict(model: Model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    out = [model.forward(images[i : i + batch_size], mode="eval").data for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def evaluate(model: Model, ds: Dataset, cfg: TrainConfig) -> tuple[MetricsReport, list[dict]]:
    """Eval-mode metrics averaged over images, plus the per-image rows."""
    _check_resolution(model, ds)
    per_image: list[dict] = []
    scores = []
    losses = []
    for chunk in batch_indices(len(ds), cfg.batch_size):
        samples = [ds.samples[i] for i in chunk]
        images, masks = stack(samples)
        pred = model.forward(images, mode="eval").data
        for s, sc, p, t in zip(samples, score_batch(pred, masks.data, cfg.threshold), pred, masks.data):
            scores.append(sc)
            losses.append(image_loss(cfg.loss_kind, p, t))
            per_image.append({"id": s.id, "dice": sc.dice, "jaccard": sc.jaccard, "precision": sc.precision, "recall": sc.recall})
    return summarize(scores, float(np.mean(losses))), per_image


def train_epoch(model: Model, ds: Dataset, cfg: TrainConfig, state: AdamState, epoch: int) -> MetricsReport:
    loss_fn = LOSSES[cfg.loss_kind]
    batch_reports = []
    for b, chunk in enumerate(batch_indices(len(ds), cfg.batch_size, shuffle_seed=[cfg.seed, epoch])):
        images, masks = stack([ds.samples[i] for i in chunk])
        with Tape() as tape:
            pred = model.forward(images, mode="train")
            loss = loss_fn(pred, masks)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
        model.zero_grad()
        tape.backward(loss)
        adam_step(model.params, {n: t.grad for n, t in model.params.items()}, state, cfg)
        batch_reports.append(summarize(score_batch(pred.data, masks.data, cfg.threshold), value))
        del tape
    mean = lambda f: float(np.mean([getattr(r, f) for r in batch_reports]))  # noqa: E731
    return MetricsReport(*(mean(f) for f in REPORT_FIELDS))


def train(
    model: Model,
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    state: AdamState | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    stop_fn: Callable[[History], bool] | None = None,
) -> History:
    """Train for ``cfg.epochs`` epochs and return one History row per epoch.

    With ``checkpoint_dir`` set, ``final.ckpt`` is rewritten after every
    completed epoch, ``best.ckpt`` whenever val_dice_coef improves, and
    ``epoch_NNNN.ckpt`` every ``cfg.checkpoint_every`` epochs. ``stop_fn``
    may end training early once it returns True.
    """
    _check_resolution(model, train_ds)
    _check_resolution(model, val_ds)
    state = state or AdamState()
    history = History()
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    best = -math.inf
    for epoch in range(1, cfg.epochs + 1):
        tr = train_epoch(model, train_ds, cfg, state, epoch)
        val, _ = evaluate(model, val_ds, cfg)
        row = {"epoch": epoch, **tr.row(), **val.row("val_")}
        history.append(row)
        log.info("epoch %d loss %.4f dice %.4f val_loss %.4f val_dice %.4f", epoch, tr.loss, tr.dice_coef, val.loss, val.dice_coef)
        if ckdir is not None:
            save_checkpoint(model, state, epoch, ckdir / "final.ckpt")
            if val.dice_coef > best:
                save_checkpoint(model, state, epoch, ckdir / "best.ckpt")
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(model, state, epoch, ckdir / f"epoch_{epoch:04d}.ckpt")
        best = max(best, val.dice_coef)
        if on_epoch is not None:
            on_epoch(row)
        if stop_fn is not None and stop_fn(history):
            break
    return history
