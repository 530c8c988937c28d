"""INI-style run configuration with a fixed schema.

Unknown sections or keys are rejected by name. ``canonical_text`` renders a
config in a fixed order so it can be embedded in checkpoints and compared
byte-for-byte.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ConfigError, ModelConfig
from .training import Stage1Config, Stage2Config

SEED_ENV = "MIXDA_SEED"


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none") else int(s)


def _words(s: str) -> tuple[str, ...]:
    return tuple(s.split())


# section -> key -> parser
SCHEMA: dict[str, dict[str, object]] = {
    "run": {"seed": int, "seeds": _ints, "output_dir": Path},
    "data": {
        "base": Path,
        "general": Path,
        "domain": Path,
        "domain_format": str,
        "templates": Path,
        "train": Path,
        "test": Path,
        "vocab_max": int,
        "k": int,
    },
    "model": {
        "vocab_size": int,
        "d_model": int,
        "d_ff": int,
        "num_layers": int,
        "num_heads": int,
        "max_len": int,
        "adapter_layers": _ints,
        "reduction": int,
        "attachment": str,
        "num_domain_adapters": int,
        "task_adapter": str,
        "task_reduction": int,
        "gate_style": str,
        "gate_input": str,
        "gate_hidden": _opt_int,
        "dropout": float,
        "tie_lm_head": _bool,
        "task": str,
        "num_classes": int,
    },
    "pretrain": {"epochs": int, "lr": float, "batch_size": int, "weight_decay": float},
    "stage1": {
        "lam": float,
        "lr": float,
        "batch_size": int,
        "weight_decay": float,
        "epochs": int,
        "mix_ratio": float,
        "use_general": _bool,
    },
    "stage2": {
        "lr": float,
        "batch_size": int,
        "epochs": int,
        "warmup_epochs": int,
        "weight_decay": float,
        "metric": str,
        "routing": str,
        "lrs": _floats,
        "batch_sizes": _ints,
    },
    "vocab": {"tokens": _words},
}

DOMAIN_FORMATS = ("tsv-triples", "jsonl-text")
ROUTINGS = ("gated", "adapter-only", "forced-closed", "vanilla")


@dataclass
class RunConfig:
    sections: dict[str, dict[str, object]]
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    @property
    def seed(self) -> int:
        return int(self.get("run", "seed", 0))

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(self.get("run", "seeds", ())) or (self.seed,)

    @property
    def output_dir(self) -> Path:
        return self.get("run", "output_dir", self.base_dir / "out")

    @property
    def vocab_tokens(self) -> tuple[str, ...] | None:
        return self.get("vocab", "tokens")

    def path(self, key: str, required: bool = True) -> Path | None:
        p = self.get("data", key)
        if p is None and required:
            raise ConfigError(f"missing required key data.{key}")
        return p

    def model_config(self, vocab_size: int, **overrides) -> ModelConfig:
        kw = {k: v for k, v in self.sections.get("model", {}).items() if k != "vocab_size"}
        kw.update(overrides)
        kw["vocab_size"] = vocab_size
        return ModelConfig(**kw)

    def stage1_config(self, **overrides) -> Stage1Config:
        kw = dict(self.sections.get("stage1", {}))
        kw.update(overrides)
        kw.setdefault("seed", self.seed)
        return Stage1Config(**kw)

    def stage2_config(self, seed: int, **overrides) -> Stage2Config:
        names = {f.name for f in fields(Stage2Config)}
        kw = {k: v for k, v in self.sections.get("stage2", {}).items() if k in names}
        kw.update(overrides)
        kw["seed"] = seed
        return Stage2Config(**kw)

    def replace_section(self, section: str, values: dict) -> RunConfig:
        secs = {k: dict(v) for k, v in self.sections.items()}
        secs[section] = dict(values)
        return RunConfig(secs, self.base_dir)


def _coerce(section: str, key: str, raw: str, base_dir: Path):
    parser = SCHEMA[section][key]
    try:
        if parser is Path:
            p = Path(raw.strip()).expanduser()
            return (p if p.is_absolute() else base_dir / p).resolve()
        return parser(raw.strip()) if parser is not str else raw.strip()
    except ValueError as e:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({e})") from None


def parse_text(text: str, base_dir: Path | str = ".", env: dict | None = None) -> RunConfig:
    """Parse and validate config text; relative paths resolve against ``base_dir``."""
    base_dir = Path(base_dir).resolve()
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unparseable config: {e}") from None
    sections: dict[str, dict[str, object]] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        vals = {}
        for key, raw in cp.items(sec):
            k = key.replace("-", "_")
            if k not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            vals[k] = _coerce(sec, k, raw, base_dir)
        sections[sec] = vals
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            sections.setdefault("run", {})["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    cfg = RunConfig(sections, base_dir)
    _validate(cfg)
    return cfg


def load(path: str | Path, env: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_text(text, path.parent, env)


def _validate(cfg: RunConfig) -> None:
    fmt = cfg.get("data", "domain_format")
    if fmt is not None and fmt not in DOMAIN_FORMATS:
        raise ConfigError(f"data.domain_format must be one of {DOMAIN_FORMATS}")
    routing = cfg.get("stage2", "routing")
    if routing is not None and routing not in ROUTINGS:
        raise ConfigError(f"stage2.routing must be one of {ROUTINGS}")
    # surface model/stage errors before any run starts
    try:
        cfg.model_config(vocab_size=max(1, int(cfg.get("model", "vocab_size", 1) or 1)))
        cfg.stage1_config()
        cfg.stage2_config(cfg.seed)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, Path):
        return str(v)
    return str(v)


def canonical_text(cfg: RunConfig) -> str:
    """Sections in schema order, keys sorted, ``None`` values omitted."""
    lines = []
    for sec in SCHEMA:
        vals = {k: v for k, v in cfg.sections.get(sec, {}).items() if v is not None}
        if not vals:
            continue
        lines.append(f"[{sec}]")
        lines += [f"{k} = {_fmt(vals[k])}" for k in sorted(vals)]
        lines.append("")
    return "\n".join(lines)


def snapshot(cfg: RunConfig, model_cfg: ModelConfig, vocab_tokens) -> str:
    """Canonical text with the exact model section and vocabulary of a checkpoint."""
    model = {k: v for k, v in model_cfg.to_dict().items()}
    out = cfg.replace_section("model", model).replace_section("vocab", {"tokens": tuple(vocab_tokens)})
    return canonical_text(out)


def model_from_snapshot(text: str) -> tuple[ModelConfig, tuple[str, ...]]:
    cfg = parse_text(text, env={})
    tokens = cfg.vocab_tokens
    if not tokens:
        raise ConfigError("snapshot has no [vocab] section")
    return cfg.model_config(vocab_size=len(tokens)), tokens
