"""``mixda`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from . import config as C
from . import metrics
from .data import DataError, FewShotSplit, Vocab, build_vocab, encode, few_shot_sample, load_corpus, load_templates
from .data import triple_to_cloze
from .evaluate import gate_report, predict, task_batch
from .metrics import MetricError
from .model import (
    AdapterOnly,
    ConfigError,
    Forced,
    Gated,
    MixDAModel,
    ModelConfig,
    Vanilla,
    freeze_mask,
    parameter_shapes,
)
from .training import (
    STAGE2_BATCH_GRID,
    STAGE2_LR_GRID,
    Stage2Result,
    grid_search,
    loss_csv,
    pretrain_mlm,
    stage1_train,
    stage2_train,
)

log = logging.getLogger("mixda")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4

# model fields that must agree between an adapter checkpoint and the stage-2 model
COMPAT_FIELDS = ("d_model", "d_ff", "num_layers", "num_heads", "max_len", "adapter_layers", "reduction", "attachment")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _expected_shapes(text: str):
    return parameter_shapes(C.model_from_snapshot(text)[0])


def _load_checked(path: Path):
    """Load a checkpoint and its model config, validating shapes against it."""
    text, tensors = ckpt.load(path, _expected_shapes)
    mcfg, tokens = C.model_from_snapshot(text)
    return text, tensors, mcfg, tokens


# ----------------------------------------------------------------- data


@dataclass
class Corpora:
    vocab: Vocab
    general: list[str]
    domain: list  # KnowledgeTriple or {"text": ...}
    train: list[dict]
    test: list[dict]
    templates: dict | None


def _require_files(cfg: C.RunConfig, keys: Sequence[str]) -> None:
    for k in keys:
        p = cfg.path(k)
        if not p.is_file():
            raise DataError(f"data.{k}: no such file {p}")


def _domain_texts(domain, templates) -> list[str]:
    out = []
    for d in domain:
        out.append(" ".join(triple_to_cloze(d, templates).filled()) if not isinstance(d, dict) else d["text"])
    return out


def load_corpora(cfg: C.RunConfig, needed: Sequence[str]) -> Corpora:
    """Read every configured corpus; the vocabulary covers all of them unless a base fixes it."""
    _require_files(cfg, needed)
    for k in ("general", "domain", "train", "test", "templates", "base"):
        p = cfg.path(k, required=False)
        if p is not None and not p.is_file():
            raise DataError(f"data.{k}: no such file {p}")
    tpl_path = cfg.path("templates", required=False)
    templates = load_templates(tpl_path) if tpl_path else None
    general = [d["text"] for d in load_corpus(cfg.path("general"), "jsonl-text")] if cfg.path("general", False) else []
    domain = []
    if cfg.path("domain", False):
        domain = load_corpus(cfg.path("domain"), cfg.get("data", "domain_format", "tsv-triples"))
    train = load_corpus(cfg.path("train"), "jsonl-labeled") if cfg.path("train", False) else []
    test = load_corpus(cfg.path("test"), "jsonl-labeled") if cfg.path("test", False) else []
    base = cfg.path("base", required=False)
    if base is not None:
        _, _, _, tokens = _load_checked(base)
        vocab = Vocab(list(tokens))
    else:
        texts = general + _domain_texts(domain, templates)
        for ex in train + test:
            texts.append(ex["text"])
            if "text2" in ex:
                texts.append(ex["text2"])
        vocab = build_vocab(texts, cfg.get("data", "vocab_max"))
    return Corpora(vocab, general, domain, train, test, templates)


def build_model(cfg: C.RunConfig, mcfg: ModelConfig) -> MixDAModel:
    """Fresh model from the run seed, with base tensors from ``data.base`` when given."""
    model = MixDAModel.build(mcfg, cfg.seed)
    base = cfg.path("base", required=False)
    if base is not None:
        _, tensors, bcfg, _ = _load_checked(base)
        for f in ("d_model", "d_ff", "num_layers", "num_heads", "max_len", "tie_lm_head"):
            if getattr(bcfg, f) != getattr(mcfg, f):
                raise ckpt.ShapeMismatch(f"{base}: base {f}={getattr(bcfg, f)} but config has {getattr(mcfg, f)}")
        for name, arr in tensors.items():
            if name in model.store and not name.startswith("head."):
                model.store[name].data[...] = arr
    return model


def _domain_items(corp: Corpora, max_len: int) -> list:
    items = []
    for d in corp.domain:
        if isinstance(d, dict):
            items.append(encode(d["text"], corp.vocab, max_len))
        else:
            items.append(triple_to_cloze(d, corp.templates).encode(corp.vocab, max_len))
    return items


def _labeled_items(examples: list[dict], vocab: Vocab, max_len: int, task: str) -> list[tuple[list[int], float]]:
    out = []
    for ex in examples:
        label = ex["label"]
        if task == "classification" and (not isinstance(label, int) or isinstance(label, bool)):
            raise DataError(f"classification label must be an integer, got {label!r}")
        if task == "regression" and not isinstance(label, (int, float)):
            raise DataError(f"regression label must be a number, got {label!r}")
        out.append((encode(ex["text"], vocab, max_len, ex.get("text2")), label))
    return out


def few_shot_items(items, K: int, seed: int, test_items, task: str) -> FewShotSplit:
    if task == "classification":
        keyed = [{"text": i, "label": it[1]} for i, it in enumerate(items)]
        split = few_shot_sample(keyed, K, seed)
        train = [items[e["text"]] for e in split.train]
        val = [items[e["text"]] for e in split.validation]
    else:
        # regression has no classes: K train and K validation examples overall
        if len(items) < 2 * K:
            raise DataError(f"need {2 * K} regression examples, have {len(items)}")
        order = np.random.default_rng(seed).permutation(len(items))
        train = [items[i] for i in order[:K]]
        val = [items[i] for i in order[K : 2 * K]]
    return FewShotSplit(train, val, list(test_items), seed)


# ------------------------------------------------------------- commands


def cmd_pretrain(cfg: C.RunConfig) -> Path:
    """Pre-fit base weights with masked-LM on the general corpus (stand-in for a pretrained encoder)."""
    corp = load_corpora(cfg, ["general"])
    mcfg = cfg.model_config(len(corp.vocab), num_domain_adapters=0, task_adapter="none", gate_style="none", task="none")
    model = build_model(cfg, mcfg)
    seqs = [encode(t, corp.vocab, mcfg.max_len) for t in corp.general]
    p = cfg.sections.get("pretrain", {})
    losses = pretrain_mlm(
        model,
        seqs,
        epochs=p.get("epochs", 50),
        lr=p.get("lr", 1e-3),
        batch_size=p.get("batch_size", 16),
        seed=cfg.seed,
        weight_decay=p.get("weight_decay", 0.01),
    )
    out = cfg.output_dir
    _write(out / "pretrain_loss.csv", "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses)))
    path = out / "base.ckpt"
    ckpt.save(path, C.snapshot(cfg, mcfg, corp.vocab.itos), model.store.state_dict())
    return path


def cmd_stage1(cfg: C.RunConfig, use_general: bool | None = None, out_dir: Path | None = None) -> Path:
    """Train one domain adapter; the checkpoint holds only its tensors."""
    s1 = cfg.stage1_config(**({} if use_general is None else {"use_general": use_general}))
    corp = load_corpora(cfg, ["domain"] + (["general"] if s1.use_general else []))
    if not corp.domain:
        raise DataError(f"domain corpus {cfg.path('domain')} is empty")
    mcfg = cfg.model_config(len(corp.vocab), num_domain_adapters=1, task_adapter="none", gate_style="none", task="none")
    model = build_model(cfg, mcfg)
    general = [encode(t, corp.vocab, mcfg.max_len) for t in corp.general] if s1.use_general else []
    res = stage1_train(_domain_items(corp, mcfg.max_len), general, model, s1)
    out = out_dir or cfg.output_dir
    _write(out / "stage1_loss.csv", loss_csv(res.reports))
    tensors = {n: model.store[n].data for n in sorted(freeze_mask(1, mcfg, 0))}
    path = out / "adapter.ckpt"
    ckpt.save(path, C.snapshot(cfg, mcfg, corp.vocab.itos), tensors)
    return path


def _routing(name: str, n_adapters: int):
    if name == "gated":
        return Gated()
    if name == "adapter-only":
        return AdapterOnly(0)
    if name == "forced-closed":
        return Forced((0.0,) * n_adapters + (1.0,))
    return Vanilla()


def _load_adapters(paths: Sequence[Path], mcfg: ModelConfig, vocab: Vocab) -> list[dict[str, np.ndarray]]:
    seen = set()
    loaded = []
    for p in paths:
        key = Path(p).resolve()
        if key in seen:
            raise ConfigError(f"adapter checkpoint {p} given twice")
        seen.add(key)
        _, tensors, acfg, tokens = _load_checked(key)
        if list(tokens) != vocab.itos:
            raise ckpt.ShapeMismatch(f"{p}: vocabulary differs from this run's vocabulary")
        for f in COMPAT_FIELDS:
            if getattr(acfg, f) != getattr(mcfg, f):
                raise ckpt.ShapeMismatch(f"{p}: adapter {f}={getattr(acfg, f)} incompatible with model {getattr(mcfg, f)}")
        if not any(".domain_adapter.0." in n for n in tensors):
            raise ckpt.MalformedCheckpoint(f"{p}: no domain-adapter tensors")
        loaded.append(tensors)
    return loaded


def _stage2_model(cfg, corp, adapters, overrides) -> tuple[ModelConfig, list]:
    n = len(adapters)
    kw = dict(num_domain_adapters=n)
    if n == 0:
        kw["gate_style"] = "none"
    kw.update(overrides)
    mcfg = cfg.model_config(len(corp.vocab), **kw)
    if mcfg.task == "none":
        raise ConfigError("model.task must be classification or regression for stage 2")
    return mcfg, _load_adapters(adapters, mcfg, corp.vocab)


def _place_adapters(model: MixDAModel, loaded: list[dict[str, np.ndarray]]) -> None:
    for j, tensors in enumerate(loaded):
        for name, arr in tensors.items():
            model.store[name.replace(".domain_adapter.0.", f".domain_adapter.{j}.")].data[...] = arr


def cmd_stage2(
    cfg: C.RunConfig,
    adapters: Sequence[Path] = (),
    routing: str | None = None,
    model_overrides: dict | None = None,
    out_dir: Path | None = None,
    init_tensors: dict[str, np.ndarray] | None = None,
    trainable_filter=None,
) -> dict:
    """Few-shot fine-tuning per seed; returns the aggregate report."""
    corp = load_corpora(cfg, ["train"])
    mcfg, loaded = _stage2_model(cfg, corp, adapters, model_overrides or {})
    routing = routing or cfg.get("stage2", "routing") or ("gated" if mcfg.has_gate else "vanilla")
    if routing == "gated" and not mcfg.has_gate:
        raise ConfigError("gated routing needs at least one adapter checkpoint and a gate")
    if routing in ("adapter-only",) and not loaded:
        raise ConfigError(f"{routing} routing needs an adapter checkpoint")
    mode = _routing(routing, len(loaded))
    K = cfg.get("data", "k", 16)
    items = _labeled_items(corp.train, corp.vocab, mcfg.max_len, mcfg.task)
    test_items = _labeled_items(corp.test, corp.vocab, mcfg.max_len, mcfg.task)
    out = out_dir or cfg.output_dir
    values, lines = [], []
    for seed in cfg.seeds:
        split = few_shot_items(items, K, seed, test_items, mcfg.task)
        model = build_model(cfg, mcfg)
        if init_tensors:
            for name, arr in init_tensors.items():
                model.store[name].data[...] = arr
        _place_adapters(model, loaded)
        names = freeze_mask(2, mcfg)
        if trainable_filter is not None:
            names = {n for n in names if trainable_filter(n)}
        res: Stage2Result = stage2_train(split, model, cfg.stage2_config(seed), mode, names)
        score = res.test if res.test is not None else res.best_val
        values.append(score)
        sd = out / f"seed_{seed}"
        _write(
            sd / "metrics.csv",
            "epoch,train_loss,val\n"
            + "".join(f"{i},{l!r},{v!r}\n" for i, (l, v) in enumerate(zip(res.train_losses, res.val_history))),
        )
        ckpt.save(sd / "task.ckpt", C.snapshot(cfg, mcfg, corp.vocab.itos), model.store.state_dict())
        if mcfg.has_gate and routing == "gated":
            probe = split.test or split.validation
            rows = gate_report(model, task_batch(probe, mcfg.task == "regression"), mode)
            _write(sd / "gate_weights.csv", metrics.gate_weights_csv(rows))
        lines.append(f"seed {seed}: best_epoch={res.best_epoch} val={res.best_val!r} score={score!r}")
    agg = metrics.aggregate_seeds(values)
    metric = cfg.stage2_config(0).metric
    split_name = "test" if test_items else "validation"
    report = "\n".join([f"routing: {routing}", f"{metric} ({split_name}): {agg.format()}", *lines]) + "\n"
    _write(out / "stage2_report.txt", report)
    return {"values": values, "aggregate": agg, "report": report, "routing": routing}


def cmd_eval(checkpoint_path: Path, data: Path, metric: str) -> str:
    """Inference-only scoring of a task checkpoint; dropout is off."""
    _, tensors, mcfg, tokens = _load_checked(Path(checkpoint_path))
    if mcfg.task == "none":
        raise ConfigError(f"{checkpoint_path}: checkpoint has no task head")
    missing = sorted(set(parameter_shapes(mcfg)) - set(tensors))
    if missing:
        raise ckpt.MalformedCheckpoint(f"{checkpoint_path}: missing tensors, e.g. {missing[0]!r}")
    model = MixDAModel.build(mcfg, 0)
    model.store.load_state_dict(tensors)
    vocab = Vocab(list(tokens))
    examples = load_corpus(data, "jsonl-labeled")
    if not examples:
        raise DataError(f"{data}: no examples")
    items = _labeled_items(examples, vocab, mcfg.max_len, mcfg.task)
    batch = task_batch(items, mcfg.task == "regression")
    mode = model.default_mode()
    preds = predict(model, batch, mode)
    report = metrics.compute(metric, preds.tolist(), batch.targets.tolist(), mcfg.task)
    out = [report.line()]
    if mcfg.has_gate:
        out.append(metrics.gate_weights_csv(gate_report(model, batch, mode)).rstrip("\n"))
    return "\n".join(out) + "\n"


def _task_adapter_names(n: str) -> bool:
    return ".task_adapter." in n


def cmd_ablate(cfg: C.RunConfig, mode: str, adapters: Sequence[Path] = ()) -> dict:
    out = cfg.output_dir / f"ablate-{mode}"
    if mode == "no-old":
        path = cmd_stage1(cfg, use_general=False, out_dir=out)
        return {"checkpoint": path}
    if mode == "no-moa":
        if not adapters:
            raise ConfigError("no-moa needs at least one adapter checkpoint")
        return cmd_stage2(
            cfg, adapters[:1], routing="adapter-only", model_overrides={"gate_style": "none"}, out_dir=out
        )
    if mode == "no-da":
        corp = load_corpora(cfg, ["domain", "train"])
        style = cfg.get("model", "task_adapter") or "pfeiffer"
        if style == "none":
            raise ConfigError("no-da needs model.task_adapter = pfeiffer or houlsby")
        mcfg = cfg.model_config(
            len(corp.vocab), num_domain_adapters=0, gate_style="none", task_adapter=style, task="none"
        )
        model = build_model(cfg, mcfg)
        trainable = {n for n in parameter_shapes(mcfg) if _task_adapter_names(n)}
        res = stage1_train(
            _domain_items(corp, mcfg.max_len), [], model, cfg.stage1_config(use_general=False), mode=Vanilla(),
            trainable=trainable,
        )
        _write(out / "stage1_loss.csv", loss_csv(res.reports))
        init = {n: model.store[n].data.copy() for n in sorted(trainable)}
        return cmd_stage2(
            cfg, (), routing="vanilla", model_overrides={"gate_style": "none", "task_adapter": style},
            out_dir=out, init_tensors=init,
        )
    raise ConfigError(f"unknown ablation mode {mode!r}; expected no-moa, no-old or no-da")


def cmd_grid(cfg: C.RunConfig, adapters: Sequence[Path] = ()) -> str:
    """Stage-2 learning-rate x batch-size sweep on the first seed's split."""
    corp = load_corpora(cfg, ["train"])
    mcfg, loaded = _stage2_model(cfg, corp, adapters, {})
    routing = cfg.get("stage2", "routing") or ("gated" if mcfg.has_gate else "vanilla")
    mode = _routing(routing, len(loaded))
    items = _labeled_items(corp.train, corp.vocab, mcfg.max_len, mcfg.task)
    seed = cfg.seeds[0]
    split = few_shot_items(items, cfg.get("data", "k", 16), seed, [], mcfg.task)

    def fresh():
        m = build_model(cfg, mcfg)
        _place_adapters(m, loaded)
        return m

    res = grid_search(
        split,
        fresh,
        cfg.stage2_config(seed),
        cfg.get("stage2", "lrs", STAGE2_LR_GRID),
        cfg.get("stage2", "batch_sizes", STAGE2_BATCH_GRID),
        mode,
    )
    text = "lr,batch_size,best_val\n" + "".join(f"{lr!r},{bs},{v!r}\n" for lr, bs, v in res.table)
    _write(cfg.output_dir / "grid.csv", text)
    return f"best lr={res.lr!r} batch_size={res.batch_size} val={res.best_val!r}\n"


# ----------------------------------------------------------------- main


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixda", description="Mixture-of-domain-adapters training pipeline")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("pretrain", help="pre-fit base weights on the general corpus")
    p.add_argument("--config", required=True, type=Path)
    p = sub.add_parser("stage1", help="train a domain adapter")
    p.add_argument("--config", required=True, type=Path)
    p = sub.add_parser("stage2", help="few-shot fine-tuning with gate and task adapters")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--adapter", action="append", default=[], type=Path, help="domain-adapter checkpoint (repeatable)")
    p = sub.add_parser("eval", help="score a task checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--metric", required=True)
    p = sub.add_parser("ablate", help="run an ablation")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--mode", required=True, choices=("no-moa", "no-old", "no-da"))
    p.add_argument("--adapter", action="append", default=[], type=Path)
    p = sub.add_parser("grid", help="stage-2 hyperparameter grid")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--adapter", action="append", default=[], type=Path)
    return ap


def run(args: argparse.Namespace) -> str:
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.data, args.metric)
    cfg = C.load(args.config)
    if args.command == "pretrain":
        return f"wrote {cmd_pretrain(cfg)}\n"
    if args.command == "stage1":
        return f"wrote {cmd_stage1(cfg)}\n"
    if args.command == "stage2":
        return cmd_stage2(cfg, args.adapter)["report"]
    if args.command == "ablate":
        res = cmd_ablate(cfg, args.mode, args.adapter)
        return res["report"] if "report" in res else f"wrote {res['checkpoint']}\n"
    return cmd_grid(cfg, args.adapter)


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        sys.stdout.write(run(args))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MetricError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ckpt.CheckpointError as e:
        print(f"checkpoint error [{e.code}]: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
