import math

import numpy as np
import pytest

from mixda.data import CLS_ID, IGNORE, FewShotSplit, fixed_mask_batch, pad_batch
from mixda.evaluate import task_batch
from mixda.gradcheck import grad_check
from mixda.model import ConfigError, MixDAModel, ModelConfig, Vanilla, encoder_forward, freeze_mask
from mixda.optim import OptimizerState, ParameterStore, ScheduleConfig, adamw_step, lr_at
from mixda.training import (
    LossReport,
    Stage1Config,
    Stage2Config,
    grid_search,
    loss_csv,
    stage1_loss,
    stage1_step,
    stage1_train,
    stage2_step,
    stage2_train,
)


def toy(**kw):
    base = dict(vocab_size=50, d_model=16, d_ff=32, num_layers=2, num_heads=2, max_len=12, adapter_layers=(0, 1))
    base.update(kw)
    return ModelConfig(**base)


def stage1_model(seed=0, **kw):
    return MixDAModel.build(toy(task_adapter="none", gate_style="none", **kw), seed)


def rand_seqs(rng, n, L=6):
    return [[CLS_ID] + rng.integers(5, 50, L - 1).tolist() for _ in range(n)]


def domain_batch(rng, n=3):
    pairs = []
    for s in rand_seqs(rng, n):
        labels = [IGNORE] * len(s)
        labels[2] = s[2]
        s = list(s)
        s[2] = 2
        pairs.append((s, labels))
    return fixed_mask_batch(pairs)


# ----------------------------------------------------------------- optimizer


def test_lr_schedule_shape():
    sched = ScheduleConfig(total_steps=10, warmup_steps=2)
    assert [lr_at(s, sched) for s in (0, 1, 2, 6, 10, 11)] == [0.0, 0.5, 1.0, 0.5, 0.0, 0.0]
    flat = ScheduleConfig(total_steps=4)
    assert [lr_at(s, flat) for s in range(4)] == [1.0, 0.75, 0.5, 0.25]


def test_adamw_first_step_magnitude_and_decay():
    store = ParameterStore()
    p = store.add("w", np.array([1.0, -2.0]))
    store.set_trainable(["w"])
    p.grad = np.array([0.3, -5.0])
    adamw_step(store, OptimizerState(lr=0.1, weight_decay=0.5))
    # decoupled decay then a unit-magnitude bias-corrected step
    expect = np.array([1.0, -2.0]) * (1 - 0.05) - 0.1 * np.sign([0.3, -5.0])
    assert np.allclose(p.data, expect, atol=1e-7)
    assert p.grad.tolist() == [0.0, 0.0]


def test_adamw_requires_grad():
    store = ParameterStore()
    store.add("w", np.zeros(2))
    store.set_trainable(["w"])
    store["w"].grad = None
    with pytest.raises(ValueError):
        adamw_step(store, OptimizerState(lr=0.1))


# ------------------------------------------------------------------ stage 1


def test_eq1_bookkeeping_exact():
    rng = np.random.default_rng(0)
    m = stage1_model()
    for lam in (0.0, 0.5, 1.7):
        cfg = Stage1Config(lam=lam)
        m.store.set_trainable(freeze_mask(1, m.cfg))
        r = stage1_step(m, domain_batch(rng), pad_batch(rand_seqs(rng, 3)), cfg, OptimizerState(lr=1e-3))
        assert r.L == lam * r.L_K + r.L_S
        if lam == 0.0:
            assert r.L == r.L_S


def test_loss_report_csv_arithmetic():
    r = LossReport(0, 1.0, 0.2, 0.5 * 1.0 + 0.2)
    assert r.L == pytest.approx(0.7)
    assert loss_csv([r, LossReport(1, 0.4, None, 0.2)]) == "step,L_K,L_S,L\n0,1.0,0.2,0.7\n1,0.4,,0.2\n"


def test_zero_adapter_first_ls_is_ffn_norm():
    rng = np.random.default_rng(1)
    m = stage1_model(dropout=0.0)
    ids, mask = pad_batch(rand_seqs(rng, 4))
    _, L_S, _ = stage1_loss(m, None, (ids, mask), Stage1Config())
    _, caps = encoder_forward(ids, m.store, m.cfg, Vanilla(), capture=True, attention_mask=mask)
    direct = np.mean([np.mean(np.sum(c.ffn.data**2, axis=-1)) for c in caps])
    assert L_S.item() == pytest.approx(direct, rel=1e-12)


def test_maskless_domain_half_skips_knowledge_loss():
    rng = np.random.default_rng(2)
    m = stage1_model()
    seqs = rand_seqs(rng, 2)
    empty = fixed_mask_batch([(s, [IGNORE] * len(s)) for s in seqs])
    m.store.set_trainable(freeze_mask(1, m.cfg))
    r = stage1_step(m, empty, pad_batch(rand_seqs(rng, 2)), Stage1Config(), OptimizerState(lr=1e-3))
    assert r.L_K is None and r.L == r.L_S


def test_stage1_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    m = stage1_model(dropout=0.0)
    for name in freeze_mask(1, m.cfg):
        m.store[name].data[...] = rng.normal(0, 0.3, m.store[name].shape)
    dom = domain_batch(rng)
    gen = pad_batch(rand_seqs(rng, 2))
    names = sorted(freeze_mask(1, m.cfg))
    m.store.set_trainable(names)
    rep = grad_check(lambda: stage1_loss(m, dom, gen, Stage1Config())[2], [m.store[n] for n in names])
    assert rep.max_rel_err < 1e-4


def test_stage1_freezes_everything_else_and_learns():
    rng = np.random.default_rng(4)
    m = stage1_model()
    outside = [n for n in m.store.names() if n not in freeze_mask(1, m.cfg)]
    before = m.store.digest(outside)
    dom = [(b.input_ids[i].tolist(), b.labels[i].tolist()) for b in [domain_batch(rng, 10)] for i in range(10)]
    res = stage1_train(dom, rand_seqs(rng, 10), m, Stage1Config(epochs=6, lr=1e-2, batch_size=4))
    assert m.store.digest(outside) == before
    assert res.epoch_means[-1]["L_K"] < res.epoch_means[0]["L_K"]


def test_sampling_loss_alone_pulls_adapter_to_ffn():
    rng = np.random.default_rng(5)
    # bottleneck 16 so the adapter has the capacity to copy a 16-wide FFN
    m = stage1_model(dropout=0.0, reduction=2)
    seqs = rand_seqs(rng, 8)
    dom = [(s, [IGNORE] * len(s)) for s in seqs]
    res = stage1_train(dom, seqs, m, Stage1Config(lam=0.0, epochs=100, lr=1e-2, batch_size=8))
    assert res.epoch_means[-1]["L_S"] < 0.1 * res.epoch_means[0]["L_S"]


def test_stage1_empty_corpus():
    with pytest.raises(ValueError):
        stage1_train([], [[CLS_ID, 5]], stage1_model(), Stage1Config())


def test_stage1_config_validation():
    with pytest.raises(ConfigError):
        Stage1Config(mix_ratio=1.0)
    with pytest.raises(ConfigError):
        Stage1Config(lam=-1)


# ------------------------------------------------------------------ stage 2


def task_model(seed=0, **kw):
    return MixDAModel.build(toy(task="classification", num_classes=3, dropout=0.0, **kw), seed)


def test_stage2_initial_loss_is_log_c_and_freezing():
    rng = np.random.default_rng(6)
    m = task_model()
    batch = task_batch([(s, i % 3) for i, s in enumerate(rand_seqs(rng, 6))])
    outside = [n for n in m.store.names() if n not in freeze_mask(2, m.cfg)]
    before = m.store.digest(outside)
    m.store.set_trainable(freeze_mask(2, m.cfg))
    loss = stage2_step(m, batch, OptimizerState(lr=1e-3), m.default_mode())
    assert loss == pytest.approx(math.log(3))
    assert m.store.digest(outside) == before


def test_stage2_label_range_error():
    m = task_model()
    m.store.set_trainable(freeze_mask(2, m.cfg))
    with pytest.raises(ValueError):
        stage2_step(m, task_batch([([CLS_ID, 6], 3)]), OptimizerState(lr=1e-3), m.default_mode())


def test_stage2_overfits_single_example():
    m = task_model()
    batch = task_batch([([CLS_ID, 7, 8, 9], 2)])
    m.store.set_trainable(freeze_mask(2, m.cfg))
    opt = OptimizerState(lr=1e-2)
    for _ in range(300):
        loss = stage2_step(m, batch, opt, m.default_mode())
    assert loss < 1e-2


def test_regression_overfits():
    m = MixDAModel.build(toy(task="regression", dropout=0.0), 0)
    batch = task_batch([([CLS_ID, 7, 8], 0.8)], regression=True)
    m.store.set_trainable(freeze_mask(2, m.cfg))
    opt = OptimizerState(lr=1e-2)
    for _ in range(200):
        loss = stage2_step(m, batch, opt, m.default_mode())
    assert loss < 1e-6


def _split(rng, seed=0):
    items = [(s, i % 2) for i, s in enumerate(rand_seqs(rng, 24))]
    return FewShotSplit(items[:8], items[8:16], items[16:], seed)


def test_stage2_selection_and_determinism():
    split = _split(np.random.default_rng(7))
    cfg = Stage2Config(lr=5e-3, batch_size=4, epochs=5, metric="accuracy")
    a = stage2_train(split, task_model(num_domain_adapters=1), cfg)
    b = stage2_train(split, task_model(num_domain_adapters=1), cfg)
    assert a.best_val >= a.val_history[0]
    assert a.best_val == max(a.val_history)
    assert a.val_history == b.val_history and a.test == b.test


def test_stage2_without_domain_adapters_is_plain_adapter_path():
    m = task_model(num_domain_adapters=0, gate_style="none")
    assert all(".gate." not in n and ".domain_adapter." not in n for n in freeze_mask(2, m.cfg))
    res = stage2_train(_split(np.random.default_rng(8)), m, Stage2Config(epochs=2, metric="accuracy"))
    assert 0.0 <= res.test <= 1.0


def test_stage2_trainable_count_depends_only_on_expert_count():
    a = toy(task="classification", num_domain_adapters=1, reduction=16)
    b = toy(task="classification", num_domain_adapters=1, reduction=2)
    from mixda.model import count_parameters

    assert count_parameters(freeze_mask(2, a), a) == count_parameters(freeze_mask(2, b), b)


def test_stage2_empty_split():
    with pytest.raises(ValueError):
        stage2_train(FewShotSplit([], [], [], 0), task_model(), Stage2Config())


def test_grid_search_cells_and_order_invariance():
    split = _split(np.random.default_rng(9))
    cfg = Stage2Config(epochs=1, metric="accuracy")
    one = grid_search(split, lambda: task_model(), cfg, lrs=[1e-3], batch_sizes=[4])
    assert (one.lr, one.batch_size) == (1e-3, 4) and len(one.table) == 1
    a = grid_search(split, lambda: task_model(), cfg, lrs=[1e-3, 1e-2], batch_sizes=[8, 4])
    b = grid_search(split, lambda: task_model(), cfg, lrs=[1e-2, 1e-3], batch_sizes=[4, 8])
    assert (a.lr, a.batch_size, a.table) == (b.lr, b.batch_size, b.table)
    assert len(a.table) == 4


def test_default_grid_has_twelve_cells():
    from mixda.training import STAGE2_BATCH_GRID, STAGE2_LR_GRID

    assert len(STAGE2_LR_GRID) * len(STAGE2_BATCH_GRID) == 12


def test_stage1_on_epoch_can_stop_early():
    rng = np.random.default_rng(10)
    seen = []
    dom = [(s, [IGNORE] * len(s)) for s in rand_seqs(rng, 4)]
    res = stage1_train(dom, rand_seqs(rng, 4), stage1_model(), Stage1Config(epochs=9), on_epoch=lambda e, m: seen.append(e) or e == 2)
    assert seen == [0, 1, 2] and len(res.epoch_means) == 3
