"""Inference-time helpers: mask filling, task prediction and gate reports."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import metrics
from .data import IGNORE, MLMBatch, TaskBatch, pad_batch
from .model import MixDAModel, RoutingMode, encoder_forward, lm_head_forward, task_head_forward
from .tensor import Tensor, no_grad


def task_batch(items: Sequence[tuple[Sequence[int], float]], regression: bool = False) -> TaskBatch:
    ids, mask = pad_batch([it[0] for it in items])
    dtype = np.float64 if regression else np.int64
    return TaskBatch(ids, mask, np.asarray([it[1] for it in items], dtype=dtype))


def mask_fill_predictions(model: MixDAModel, batch: MLMBatch, mode: RoutingMode) -> tuple[np.ndarray, np.ndarray]:
    """Argmax predictions and gold ids at supervised positions."""
    with no_grad():
        hidden, _ = encoder_forward(
            batch.input_ids, model.store, model.cfg, mode, attention_mask=batch.attention_mask
        )
    flat = batch.labels.reshape(-1)
    rows = np.flatnonzero(flat != IGNORE)
    h = hidden.data.reshape(-1, model.cfg.d_model)[rows]
    logits = lm_head_forward(Tensor(h), model.store, model.cfg).data
    return logits.argmax(axis=-1), flat[rows]


def mask_fill_accuracy(model: MixDAModel, batch: MLMBatch, mode: RoutingMode, chunk: int = 64) -> float:
    hits = total = 0
    for s in range(0, len(batch), chunk):
        sub = MLMBatch(
            batch.input_ids[s : s + chunk], batch.labels[s : s + chunk], batch.attention_mask[s : s + chunk]
        )
        pred, gold = mask_fill_predictions(model, sub, mode)
        hits += int((pred == gold).sum())
        total += gold.size
    if total == 0:
        raise ValueError("no supervised positions to score")
    return hits / total


def predict(model: MixDAModel, batch: TaskBatch, mode: RoutingMode, gate_log: list | None = None) -> np.ndarray:
    with no_grad():
        hidden, _ = encoder_forward(
            batch.input_ids, model.store, model.cfg, mode, attention_mask=batch.attention_mask, gate_log=gate_log
        )
        out = task_head_forward(hidden, model.store, model.cfg).data
    return out if model.cfg.task == "regression" else out.argmax(axis=-1)


def evaluate_task(model: MixDAModel, batch: TaskBatch, metric: str, mode: RoutingMode) -> metrics.MetricReport:
    preds = predict(model, batch, mode)
    return metrics.compute(metric, preds.tolist(), batch.targets.tolist(), model.cfg.task)


def gate_report(model: MixDAModel, batch: TaskBatch | MLMBatch, mode: RoutingMode | None = None):
    """Per-layer mean mixture weight of every expert over non-padded tokens."""
    log: list = []
    with no_grad():
        encoder_forward(
            batch.input_ids,
            model.store,
            model.cfg,
            mode or model.default_mode(),
            attention_mask=batch.attention_mask,
            gate_log=log,
        )
    return metrics.summarize_gate_log(log)
