"""Two-stage training: domain-adapter knowledge injection (Stage 1) and
gate + task-adapter fitting on few-shot labeled data (Stage 2)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, Union

import numpy as np

from . import tensor as T
from .data import FewShotSplit, MLMBatch, derive_seed, fixed_mask_batch, mlm_collate, pad_batch
from .evaluate import evaluate_task, task_batch
from .metrics import MetricError
from .model import (
    AdapterOnly,
    ConfigError,
    MixDAModel,
    RoutingMode,
    Vanilla,
    encoder_forward,
    freeze_mask,
    lm_head_forward,
    parameter_shapes,
    task_head_forward,
)
from .optim import OptimizerState, ScheduleConfig, adamw_step, lr_at

log = logging.getLogger(__name__)

# A domain item is either raw token ids (masked on the fly) or a
# pre-masked (ids, labels) pair such as a cloze sentence.
DomainItem = Union[Sequence[int], tuple]

STAGE2_LR_GRID = (5e-5, 1e-4, 5e-4)
STAGE2_BATCH_GRID = (2, 4, 8, 16)


@dataclass
class Stage1Config:
    lam: float = 0.5
    lr: float = 1e-4
    batch_size: int = 20
    weight_decay: float = 0.05
    epochs: int = 10
    mix_ratio: float = 0.5
    adapter_index: int = 0
    seed: int = 0
    use_general: bool = True

    def __post_init__(self):
        if not 0.0 < self.mix_ratio < 1.0:
            raise ConfigError("mix_ratio must be in (0, 1)")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("stage-1 batch_size must be >= 2")

    @property
    def domain_batch(self) -> int:
        return max(1, round(self.batch_size * self.mix_ratio))

    @property
    def general_batch(self) -> int:
        return max(1, self.batch_size - self.domain_batch)


@dataclass
class Stage2Config:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 20
    warmup_epochs: int = 2
    weight_decay: float = 0.05
    metric: str = "micro_f1"
    seed: int = 0


@dataclass
class LossReport:
    step: int
    L_K: float | None
    L_S: float | None
    L: float | None

    def csv_row(self) -> str:
        def f(v):
            return "" if v is None else repr(v)

        return f"{self.step},{f(self.L_K)},{f(self.L_S)},{f(self.L)}"


def loss_csv(reports: Sequence[LossReport]) -> str:
    return "step,L_K,L_S,L\n" + "".join(r.csv_row() + "\n" for r in reports)


# ------------------------------------------------------------------ stage 1


def stage1_loss(
    model: MixDAModel,
    domain: MLMBatch | None,
    general: tuple[np.ndarray, np.ndarray] | None,
    cfg: Stage1Config,
    rng: np.random.Generator | None = None,
    mode: RoutingMode | None = None,
) -> tuple[T.Tensor | None, T.Tensor | None, T.Tensor | None]:
    """Knowledge loss, sampling loss and their weighted sum (any may be None).

    The knowledge pass routes through the trained adapter unless ``mode``
    says otherwise.
    """
    store, mcfg = model.store, model.cfg
    mode = AdapterOnly(cfg.adapter_index) if mode is None else mode
    L_K = L_S = None
    if domain is not None:
        hidden, _ = encoder_forward(
            domain.input_ids, store, mcfg, mode, attention_mask=domain.attention_mask, rng=rng
        )
        logits = lm_head_forward(hidden.reshape(-1, mcfg.d_model), store, mcfg)
        try:
            L_K, _ = T.masked_cross_entropy(logits, domain.labels.reshape(-1))
        except T.NoSupervisedPositions:
            log.info("domain half has no masked positions; skipping knowledge loss")
    if general is not None:
        ids, mask = general
        _, caps = encoder_forward(ids, store, mcfg, Vanilla(), capture=True, attention_mask=mask, rng=rng)
        L_S = T.l2_alignment([(c.ffn, c.adapters[cfg.adapter_index]) for c in caps])
    if L_K is not None and L_S is not None:
        total = T.scale(L_K, cfg.lam) + L_S
    elif L_K is not None:
        total = T.scale(L_K, cfg.lam)
    else:
        total = L_S
    return L_K, L_S, total


def stage1_step(
    model: MixDAModel,
    domain: MLMBatch | None,
    general: tuple[np.ndarray, np.ndarray] | None,
    cfg: Stage1Config,
    opt: OptimizerState,
    lr_scale: float = 1.0,
    rng: np.random.Generator | None = None,
    step: int = 0,
    mode: RoutingMode | None = None,
) -> LossReport:
    L_K, L_S, total = stage1_loss(model, domain, general, cfg, rng, mode)
    if total is None:
        return LossReport(step, None, None, None)
    T.backward(total)
    adamw_step(model.store, opt, lr_scale)
    return LossReport(
        step,
        None if L_K is None else L_K.item(),
        None if L_S is None else L_S.item(),
        total.item(),
    )


def collate_domain(items: Sequence[DomainItem], vocab_size: int, rng: np.random.Generator) -> MLMBatch:
    pairs = []
    for it in items:
        if isinstance(it, tuple):
            pairs.append((list(it[0]), list(it[1])))
        else:
            b = mlm_collate([it], vocab_size, rng)
            pairs.append((b.input_ids[0].tolist(), b.labels[0].tolist()))
    return fixed_mask_batch(pairs)


class _Cycler:
    """Endless reshuffled stream over a corpus."""

    def __init__(self, items: Sequence, rng: np.random.Generator):
        self.items, self.rng = items, rng
        self.order: list[int] = []

    def take(self, n: int) -> list:
        out = []
        while len(out) < n:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.items)))
            out.append(self.items[self.order.pop()])
        return out


@dataclass
class Stage1Result:
    reports: list[LossReport]
    epoch_means: list[dict]


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def stage1_train(
    domain: Sequence[DomainItem],
    general: Sequence[Sequence[int]],
    model: MixDAModel,
    cfg: Stage1Config,
    on_epoch: Callable[[int, MixDAModel], bool | None] | None = None,
    mode: RoutingMode | None = None,
    trainable: set[str] | None = None,
) -> Stage1Result:
    """Train one domain adapter; every other parameter stays frozen.

    Each step pairs a domain half with a general half. An epoch covers the
    longer corpus once while the shorter one cycles (reshuffled on every
    wrap). With ``use_general`` off the general half and the sampling loss
    are dropped and an epoch is one pass over the domain corpus.

    ``mode`` and ``trainable`` override the knowledge-pass routing and the
    trained names; the adapter-free ablation trains task adapters this way.
    ``on_epoch`` may return True to stop early; the schedule still spans
    ``cfg.epochs``.
    """
    if not domain:
        raise ValueError("empty domain corpus")
    if cfg.use_general and not general:
        raise ValueError("empty general corpus")
    store = model.store
    store.set_trainable(freeze_mask(1, model.cfg, cfg.adapter_index) if trainable is None else trainable)
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    dom_stream = _Cycler(domain, np.random.default_rng([cfg.seed, 0]))
    gen_stream = _Cycler(general, np.random.default_rng([cfg.seed, 1])) if cfg.use_general else None
    hd, hg = cfg.domain_batch, cfg.general_batch
    spe = math.ceil(len(domain) / hd)
    if gen_stream is not None:
        spe = max(spe, math.ceil(len(general) / hg))
    sched = ScheduleConfig(total_steps=spe * cfg.epochs, warmup_steps=0)
    reports: list[LossReport] = []
    epoch_means = []
    step = 0
    for epoch in range(cfg.epochs):
        ep_reports = []
        for _ in range(spe):
            items = dom_stream.take(hd)
            batch_rng = derive_seed(cfg.seed, step)
            dom = collate_domain(items, model.cfg.vocab_size, batch_rng)
            gen = pad_batch(gen_stream.take(hg)) if gen_stream else None
            r = stage1_step(model, dom, gen, cfg, opt, lr_at(step, sched), batch_rng, step, mode)
            reports.append(r)
            ep_reports.append(r)
            step += 1
        means = {
            "epoch": epoch,
            "L_K": _mean([r.L_K for r in ep_reports]),
            "L_S": _mean([r.L_S for r in ep_reports]),
            "L": _mean([r.L for r in ep_reports]),
        }
        epoch_means.append(means)
        log.info("stage1 epoch %d: %s", epoch, means)
        if on_epoch is not None and on_epoch(epoch, model):
            break
    return Stage1Result(reports, epoch_means)


# ------------------------------------------------------- base pre-fitting


def pretrain_mlm(
    model: MixDAModel,
    corpus: Sequence[Sequence[int]],
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    weight_decay: float = 0.01,
) -> list[float]:
    """Fit every base (non-adapter, non-head) parameter with masked-LM loss."""
    excluded = (".domain_adapter.", ".gate.", ".task_adapter.")
    names = [n for n in parameter_shapes(model.cfg) if not any(e in n for e in excluded) and not n.startswith("head.")]
    model.store.set_trainable(names)
    opt = OptimizerState(lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    spe = math.ceil(len(corpus) / batch_size)
    sched = ScheduleConfig(total_steps=spe * epochs, warmup_steps=min(spe, spe * epochs))
    losses = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        ep = []
        for b in range(spe):
            seqs = [corpus[i] for i in order[b * batch_size : (b + 1) * batch_size]]
            brng = derive_seed(seed, step)
            batch = mlm_collate(seqs, model.cfg.vocab_size, brng)
            step += 1
            if batch.num_supervised == 0:
                continue
            hidden, _ = encoder_forward(
                batch.input_ids, model.store, model.cfg, attention_mask=batch.attention_mask, rng=brng
            )
            logits = lm_head_forward(hidden.reshape(-1, model.cfg.d_model), model.store, model.cfg)
            loss, _ = T.masked_cross_entropy(logits, batch.labels.reshape(-1))
            T.backward(loss)
            adamw_step(model.store, opt, lr_at(step - 1, sched))
            ep.append(loss.item())
        losses.append(_mean(ep))
    model.store.set_trainable(())
    return losses


# ------------------------------------------------------------------ stage 2


def stage2_step(
    model: MixDAModel,
    batch,
    opt: OptimizerState,
    mode: RoutingMode,
    lr_scale: float = 1.0,
    rng: np.random.Generator | None = None,
) -> float:
    """Cross-entropy (classification) or squared error (regression), one update."""
    hidden, _ = encoder_forward(
        batch.input_ids, model.store, model.cfg, mode, attention_mask=batch.attention_mask, rng=rng
    )
    out = task_head_forward(hidden, model.store, model.cfg)
    if model.cfg.task == "classification":
        C = model.cfg.num_classes
        if batch.targets.min() < 0 or batch.targets.max() >= C:
            raise ValueError(f"label outside [0, {C})")
        loss, _ = T.masked_cross_entropy(out, batch.targets)
    else:
        loss = T.mse(out, batch.targets)
    T.backward(loss)
    adamw_step(model.store, opt, lr_scale)
    return loss.item()


@dataclass
class Stage2Result:
    best_epoch: int
    best_val: float
    val_history: list[float]
    train_losses: list[float]
    test: float | None
    best_state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def stage2_train(
    split_items: FewShotSplit,
    model: MixDAModel,
    cfg: Stage2Config,
    mode: RoutingMode | None = None,
    trainable: set[str] | None = None,
) -> Stage2Result:
    """Fit task adapters, gate and head; keep the epoch with the best validation metric.

    ``split_items`` holds encoded ``(ids, target)`` pairs in each part. The
    model is left holding the selected parameters.
    """
    train, val, test = split_items.train, split_items.validation, split_items.test
    if not train or not val:
        raise ValueError("few-shot split has an empty train or validation part")
    mode = model.default_mode() if mode is None else mode
    names = freeze_mask(2, model.cfg) if trainable is None else trainable
    model.store.set_trainable(names)
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    regression = model.cfg.task == "regression"
    rng = np.random.default_rng(cfg.seed)
    bs = cfg.batch_size
    spe = math.ceil(len(train) / bs)
    total = spe * cfg.epochs
    sched = ScheduleConfig(total_steps=total, warmup_steps=min(total, cfg.warmup_epochs * spe))
    val_batch = task_batch(val, regression)

    best_val, best_epoch, best_state = -math.inf, -1, {}
    history, losses = [], []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        ep = []
        for b in range(spe):
            batch = task_batch([train[i] for i in order[b * bs : (b + 1) * bs]], regression)
            ep.append(stage2_step(model, batch, opt, mode, lr_at(step, sched), derive_seed(cfg.seed, step)))
            step += 1
        losses.append(_mean(ep))
        try:
            v = evaluate_task(model, val_batch, cfg.metric, mode).value
        except MetricError:
            # e.g. Pearson of constant predictions; never selected
            v = -math.inf
        history.append(v)
        if v > best_val:
            best_val, best_epoch = v, epoch
            best_state = {n: model.store[n].data.copy() for n in names}
    model.store.load_state_dict(best_state)
    test_value = evaluate_task(model, task_batch(test, regression), cfg.metric, mode).value if test else None
    model.store.set_trainable(())
    return Stage2Result(best_epoch, best_val, history, losses, test_value, best_state)


@dataclass
class GridResult:
    lr: float
    batch_size: int
    best_val: float
    table: list[tuple[float, int, float]]


def grid_search(
    split_items: FewShotSplit,
    build_model: Callable[[], MixDAModel],
    cfg: Stage2Config,
    lrs: Sequence[float] = STAGE2_LR_GRID,
    batch_sizes: Sequence[int] = STAGE2_BATCH_GRID,
    mode: RoutingMode | None = None,
) -> GridResult:
    """Train one fresh model per (lr, batch) cell; ties go to lower lr, then smaller batch."""
    cells = sorted({(float(lr), int(bs)) for lr in lrs for bs in batch_sizes})
    if not cells:
        raise ValueError("empty grid")
    table = []
    best = None
    for lr, bs in cells:
        res = stage2_train(split_items, build_model(), replace(cfg, lr=lr, batch_size=bs), mode)
        table.append((lr, bs, res.best_val))
        if best is None or res.best_val > best[2]:
            best = (lr, bs, res.best_val)
    return GridResult(best[0], best[1], best[2], table)
