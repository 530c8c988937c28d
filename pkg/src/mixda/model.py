"""Pre-norm transformer encoder with parallel domain adapters and a sigmoid
mixture-of-adapters gate.

Expert order everywhere is ``[adapter 0, ..., adapter N-1, FFN]``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, fields, replace
from typing import Union

import numpy as np

from . import tensor as T
from .optim import ParameterStore
from .tensor import Tensor

ATTACHMENTS = ("ffn-intermediate", "sublayer-input")
TASK_ADAPTER_STYLES = ("pfeiffer", "houlsby", "none")
GATE_STYLES = ("mlp", "linear", "none")
TASK_KINDS = ("none", "classification", "regression")

MASK_BIAS = -1e9


class ConfigError(ValueError):
    """Invalid or inconsistent model / run configuration."""


def scaled_adapter_layers(num_layers: int, reference=(7, 11), reference_depth: int = 24) -> tuple[int, ...]:
    """Map the reference adapter layers onto a shallower stack."""
    return tuple(sorted({min(num_layers - 1, round(l * num_layers / reference_depth)) for l in reference}))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    d_ff: int = 128
    num_layers: int = 2
    num_heads: int = 2
    max_len: int = 32
    adapter_layers: tuple[int, ...] | None = None
    reduction: int = 16
    attachment: str = "ffn-intermediate"
    num_domain_adapters: int = 1
    task_adapter: str = "pfeiffer"
    task_reduction: int = 16
    gate_style: str = "mlp"
    gate_input: str = "sublayer-input"
    gate_hidden: int | None = None
    dropout: float = 0.1
    tie_lm_head: bool = True
    task: str = "none"
    num_classes: int = 2

    def __post_init__(self):
        if self.adapter_layers is None:
            object.__setattr__(self, "adapter_layers", scaled_adapter_layers(self.num_layers))
        else:
            object.__setattr__(self, "adapter_layers", tuple(sorted(set(int(l) for l in self.adapter_layers))))
        self.validate()

    def validate(self) -> None:
        if self.vocab_size < 1 or self.d_model < 1 or self.d_ff < 1 or self.num_layers < 1:
            raise ConfigError("vocab_size, d_model, d_ff and num_layers must be positive")
        if self.num_heads < 1 or self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        bad = [l for l in self.adapter_layers if not 0 <= l < self.num_layers]
        if bad:
            raise ConfigError(f"adapter_layers {bad} outside [0, {self.num_layers})")
        if self.reduction < 1 or self.task_reduction < 1:
            raise ConfigError("reductions must be >= 1")
        if self.attachment not in ATTACHMENTS:
            raise ConfigError(f"attachment must be one of {ATTACHMENTS}")
        if self.gate_input not in ATTACHMENTS:
            raise ConfigError(f"gate_input must be one of {ATTACHMENTS}")
        if self.task_adapter not in TASK_ADAPTER_STYLES:
            raise ConfigError(f"task_adapter must be one of {TASK_ADAPTER_STYLES}")
        if self.gate_style not in GATE_STYLES:
            raise ConfigError(f"gate_style must be one of {GATE_STYLES}")
        if self.task not in TASK_KINDS:
            raise ConfigError(f"task must be one of {TASK_KINDS}")
        if self.num_domain_adapters < 0:
            raise ConfigError("num_domain_adapters must be >= 0")
        if self.task == "classification" and self.num_classes < 2:
            raise ConfigError("classification needs num_classes >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def adapter_input_dim(self) -> int:
        return self.d_ff if self.attachment == "ffn-intermediate" else self.d_model

    @property
    def adapter_bottleneck(self) -> int:
        return max(1, self.adapter_input_dim // self.reduction)

    @property
    def task_bottleneck(self) -> int:
        return max(1, self.d_model // self.task_reduction)

    @property
    def gate_input_dim(self) -> int:
        return self.d_ff if self.gate_input == "ffn-intermediate" else self.d_model

    @property
    def gate_hidden_dim(self) -> int:
        return self.gate_hidden or max(4, self.gate_input_dim // 16)

    @property
    def num_experts(self) -> int:
        return self.num_domain_adapters + 1

    @property
    def has_gate(self) -> bool:
        return self.gate_style != "none" and self.num_domain_adapters > 0

    def replace(self, **kw) -> ModelConfig:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ------------------------------------------------------------------- layout


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape implied by ``cfg``, without allocating."""
    d, dff, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    s: dict[str, tuple[int, ...]] = {
        "embed.tokens.weight": (V, d),
        "embed.positions.weight": (cfg.max_len, d),
    }

    def linear(prefix, n_in, n_out, bias=True):
        s[f"{prefix}.weight"] = (n_in, n_out)
        if bias:
            s[f"{prefix}.bias"] = (n_out,)

    def norm(prefix):
        s[f"{prefix}.gain"] = (d,)
        s[f"{prefix}.bias"] = (d,)

    tb = cfg.task_bottleneck
    for i in range(cfg.num_layers):
        p = f"layer.{i}"
        norm(f"{p}.attn.ln")
        for w in "qkvo":
            linear(f"{p}.attn.{w}", d, d)
        norm(f"{p}.ffn.ln")
        linear(f"{p}.ffn.fc1", d, dff)
        linear(f"{p}.ffn.fc2", dff, d)
        if i in cfg.adapter_layers:
            for j in range(cfg.num_domain_adapters):
                linear(f"{p}.domain_adapter.{j}.down", cfg.adapter_input_dim, cfg.adapter_bottleneck)
                linear(f"{p}.domain_adapter.{j}.up", cfg.adapter_bottleneck, d)
            if cfg.has_gate:
                if cfg.gate_style == "mlp":
                    linear(f"{p}.gate.down", cfg.gate_input_dim, cfg.gate_hidden_dim, bias=False)
                    linear(f"{p}.gate.up", cfg.gate_hidden_dim, cfg.num_experts, bias=False)
                else:
                    linear(f"{p}.gate.proj", cfg.gate_input_dim, cfg.num_experts, bias=False)
        sites = {"pfeiffer": ("ffn",), "houlsby": ("attn", "ffn"), "none": ()}[cfg.task_adapter]
        for site in sites:
            linear(f"{p}.task_adapter.{site}.down", d, tb)
            linear(f"{p}.task_adapter.{site}.up", tb, d)
    norm("final_ln")
    if not cfg.tie_lm_head:
        s["lm_head.weight"] = (d, V)
    s["lm_head.bias"] = (V,)
    if cfg.task == "classification":
        linear("head", d, cfg.num_classes)
    elif cfg.task == "regression":
        linear("head", d, 1)
    return s


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # per-name streams: adding modules never perturbs existing parameters
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _init_array(name: str, shape: tuple[int, ...], seed: int, d: int) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gain":
        return np.ones(shape)
    if leaf == "bias":
        return np.zeros(shape)
    zero_init = (
        ".up.weight" in name and ("domain_adapter" in name or "task_adapter" in name or ".gate." in name)
    ) or name in ("head.weight",) or name.endswith("gate.proj.weight")
    if zero_init:
        return np.zeros(shape)
    rng = _param_rng(seed, name)
    if name.startswith("embed.") or name == "lm_head.weight":
        return rng.normal(0.0, 1.0 / math.sqrt(d), size=shape)
    bound = 1.0 / math.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParameterStore:
    store = ParameterStore()
    for name, shape in parameter_shapes(cfg).items():
        store.add(name, _init_array(name, shape, seed, cfg.d_model))
    return store


def init_missing(store: ParameterStore, cfg: ModelConfig, seed: int) -> None:
    """Add freshly initialized arrays for names the config needs but the store lacks."""
    for name, shape in parameter_shapes(cfg).items():
        if name not in store:
            store.add(name, _init_array(name, shape, seed, cfg.d_model))


def freeze_mask(stage: int, cfg: ModelConfig, adapter_index: int = 0) -> set[str]:
    """Names trained in ``stage``.

    Stage 1 trains one domain adapter (``adapter_index``) in every adapter
    layer. Stage 2 trains task adapters, the gate and the task head.
    """
    names = parameter_shapes(cfg)
    if stage == 1:
        if not 0 <= adapter_index < cfg.num_domain_adapters:
            raise ConfigError(f"stage 1 needs domain adapter {adapter_index}, config has {cfg.num_domain_adapters}")
        tag = f".domain_adapter.{adapter_index}."
        return {n for n in names if tag in n}
    if stage == 2:
        if cfg.task_adapter == "none" and not cfg.has_gate:
            raise ConfigError("stage 2 needs a task adapter or a gate")
        return {n for n in names if ".task_adapter." in n or ".gate." in n or n.startswith("head.")}
    raise ConfigError(f"unknown stage {stage}")


def count_parameters(names, cfg: ModelConfig, weights_only: bool = False) -> int:
    shapes = parameter_shapes(cfg)
    return sum(
        int(np.prod(shapes[n])) for n in names if not (weights_only and n.endswith(".bias"))
    )


# ----------------------------------------------------------------- routing


@dataclass(frozen=True)
class Vanilla:
    """FFN output only."""


@dataclass(frozen=True)
class AdapterOnly:
    """Domain adapter ``index`` replaces the FFN output."""

    index: int = 0


@dataclass(frozen=True)
class Gated:
    """Sigmoid mixture over all adapters and the FFN."""


@dataclass(frozen=True)
class Forced:
    """Fixed per-expert mixture weights (adapters first, FFN last)."""

    weights: tuple[float, ...]


RoutingMode = Union[Vanilla, AdapterOnly, Gated, Forced]


@dataclass
class LayerCapture:
    layer: int
    ffn: Tensor
    adapters: list[Tensor] = field(default_factory=list)


# ------------------------------------------------------------- components


@dataclass
class DomainAdapterParams:
    down_w: Tensor
    down_b: Tensor
    up_w: Tensor
    up_b: Tensor

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str) -> DomainAdapterParams:
        return cls(
            store[f"{prefix}.down.weight"],
            store[f"{prefix}.down.bias"],
            store[f"{prefix}.up.weight"],
            store[f"{prefix}.up.bias"],
        )


TaskAdapterParams = DomainAdapterParams


@dataclass
class MoAGateParams:
    down: Tensor | None = None
    up: Tensor | None = None
    proj: Tensor | None = None

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str) -> MoAGateParams:
        if f"{prefix}.proj.weight" in store:
            return cls(proj=store[f"{prefix}.proj.weight"])
        return cls(down=store[f"{prefix}.down.weight"], up=store[f"{prefix}.up.weight"])

    @property
    def num_experts(self) -> int:
        return (self.proj if self.proj is not None else self.up).shape[-1]


def _bottleneck(x: Tensor, p: DomainAdapterParams) -> Tensor:
    if x.shape[-1] != p.down_w.shape[0]:
        raise T.DimensionError(f"adapter expects input width {p.down_w.shape[0]}, got {x.shape[-1]}")
    return T.relu(x @ p.down_w + p.down_b) @ p.up_w + p.up_b


def domain_adapter_forward(x: Tensor, p: DomainAdapterParams) -> Tensor:
    """up(ReLU(down(x)))."""
    return _bottleneck(x, p)


def task_adapter_forward(x: Tensor, p: TaskAdapterParams) -> Tensor:
    """Residual bottleneck: x + up(ReLU(down(x)))."""
    return x + _bottleneck(x, p)


def mix_experts(weights: Tensor, experts: list[Tensor]) -> Tensor:
    """Per-token weighted sum; ``weights[..., e]`` scales ``experts[e]``."""
    if weights.shape[-1] != len(experts):
        raise ValueError(f"{len(experts)} expert outputs for {weights.shape[-1]} gate weights")
    out = None
    for e, x in enumerate(experts):
        term = weights[..., e : e + 1] * x
        out = term if out is None else out + term
    return out


def moa_gate_forward(q: Tensor, g: MoAGateParams, expert_outputs: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Gate logits from ``q``, independent sigmoid weights, weighted sum of experts."""
    if len(expert_outputs) != g.num_experts:
        raise ValueError(f"gate built for {g.num_experts} experts, got {len(expert_outputs)}")
    if g.proj is not None:
        h = q @ g.proj
    else:
        h = T.relu(q @ g.down) @ g.up
    w = T.sigmoid(h)
    return mix_experts(w, expert_outputs), w


def _attention(x: Tensor, store: ParameterStore, p: str, cfg: ModelConfig, bias: np.ndarray) -> Tensor:
    B, L, d = x.shape
    H = cfg.num_heads
    dh = d // H

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

    q = heads(x @ store[f"{p}.q.weight"] + store[f"{p}.q.bias"])
    k = heads(x @ store[f"{p}.k.weight"] + store[f"{p}.k.bias"])
    v = heads(x @ store[f"{p}.v.weight"] + store[f"{p}.v.bias"])
    scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh)) + Tensor(bias)
    ctx = T.softmax_rows(scores) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, L, d)
    return ctx @ store[f"{p}.o.weight"] + store[f"{p}.o.bias"]


def _layer_norm(x: Tensor, store: ParameterStore, p: str) -> Tensor:
    return T.layer_norm(x, store[f"{p}.gain"], store[f"{p}.bias"])


def encoder_forward(
    input_ids,
    store: ParameterStore,
    cfg: ModelConfig,
    mode: RoutingMode = Vanilla(),
    capture: bool = False,
    attention_mask=None,
    rng: np.random.Generator | None = None,
    gate_log: list | None = None,
) -> tuple[Tensor, list[LayerCapture]]:
    """Run the encoder stack.

    ``rng`` enables dropout (training); ``None`` is inference. When
    ``capture`` is set, every adapter layer reports the FFN output and all
    domain-adapter outputs on the non-padded token rows. ``gate_log``, if
    given, receives ``(layer, weights[B, T, E], attention_mask)`` per
    mixing layer.
    """
    ids = np.asarray(input_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, L = ids.shape
    if L > cfg.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id outside [0, {cfg.vocab_size})")
    mask = np.ones((B, L)) if attention_mask is None else np.asarray(attention_mask, dtype=np.float64)
    valid = mask.astype(bool)
    N = cfg.num_domain_adapters
    if isinstance(mode, Gated) and not cfg.has_gate:
        raise ConfigError("gated routing needs at least one domain adapter and a gate")
    if isinstance(mode, AdapterOnly) and not 0 <= mode.index < N:
        raise ConfigError(f"adapter index {mode.index} outside [0, {N})")
    if isinstance(mode, Forced) and len(mode.weights) != cfg.num_experts:
        raise ConfigError(f"forced routing needs {cfg.num_experts} weights, got {len(mode.weights)}")

    attn_bias = ((1.0 - mask) * MASK_BIAS)[:, None, None, :]
    x = T.embedding(store["embed.tokens.weight"], ids) + store["embed.positions.weight"][:L]
    captures: list[LayerCapture] = []
    p_drop = cfg.dropout

    for i in range(cfg.num_layers):
        p = f"layer.{i}"
        h = _attention(_layer_norm(x, store, f"{p}.attn.ln"), store, f"{p}.attn", cfg, attn_bias)
        h = T.dropout(h, p_drop, rng)
        if cfg.task_adapter == "houlsby":
            h = task_adapter_forward(h, TaskAdapterParams.from_store(store, f"{p}.task_adapter.attn"))
        x = x + h

        u = _layer_norm(x, store, f"{p}.ffn.ln")
        inter = T.gelu(u @ store[f"{p}.ffn.fc1.weight"] + store[f"{p}.ffn.fc1.bias"])
        ffn = inter @ store[f"{p}.ffn.fc2.weight"] + store[f"{p}.ffn.fc2.bias"]
        out = ffn
        if i in cfg.adapter_layers and N > 0:
            src = inter if cfg.attachment == "ffn-intermediate" else u
            adapters: dict[int, Tensor] = {}

            def adapter(j: int) -> Tensor:
                if j not in adapters:
                    adapters[j] = domain_adapter_forward(
                        src, DomainAdapterParams.from_store(store, f"{p}.domain_adapter.{j}")
                    )
                return adapters[j]

            if isinstance(mode, AdapterOnly):
                out = adapter(mode.index)
            elif isinstance(mode, Gated):
                q = u if cfg.gate_input == "sublayer-input" else inter
                out, w = moa_gate_forward(
                    q, MoAGateParams.from_store(store, f"{p}.gate"), [adapter(j) for j in range(N)] + [ffn]
                )
                if gate_log is not None:
                    gate_log.append((i, w.data, mask))
            elif isinstance(mode, Forced):
                w = Tensor(np.broadcast_to(np.asarray(mode.weights, dtype=np.float64), (B, L, N + 1)))
                out = mix_experts(w, [adapter(j) for j in range(N)] + [ffn])
                if gate_log is not None:
                    gate_log.append((i, w.data, mask))
            if capture:
                captures.append(
                    LayerCapture(i, Tensor(ffn.data[valid]), [adapter(j)[valid] for j in range(N)])
                )
        out = T.dropout(out, p_drop, rng)
        if cfg.task_adapter != "none":
            out = task_adapter_forward(out, TaskAdapterParams.from_store(store, f"{p}.task_adapter.ffn"))
        x = x + out

    return _layer_norm(x, store, "final_ln"), captures


def lm_head_forward(hidden: Tensor, store: ParameterStore, cfg: ModelConfig) -> Tensor:
    """Vocabulary logits; tied heads reuse the token embedding."""
    w = store["embed.tokens.weight"].transpose(1, 0) if cfg.tie_lm_head else store["lm_head.weight"]
    return hidden @ w + store["lm_head.bias"]


def task_head_forward(hidden: Tensor, store: ParameterStore, cfg: ModelConfig) -> Tensor:
    """Linear head on the first-token vector: [B, C] logits or [B] predictions."""
    if cfg.task == "none":
        raise ConfigError("model has no task head")
    pooled = hidden[:, 0, :]
    out = pooled @ store["head.weight"] + store["head.bias"]
    if cfg.task == "regression":
        out = out.reshape(out.shape[0])
    return out


@dataclass
class MixDAModel:
    """A config plus its parameters; thin convenience over the functions above."""

    cfg: ModelConfig
    store: ParameterStore

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 0) -> MixDAModel:
        return cls(cfg, init_params(cfg, seed))

    def encode(self, input_ids, attention_mask=None, mode: RoutingMode = Vanilla(), **kw):
        return encoder_forward(input_ids, self.store, self.cfg, mode, attention_mask=attention_mask, **kw)

    def mlm_logits(self, input_ids, attention_mask=None, mode: RoutingMode = Vanilla(), **kw) -> Tensor:
        hidden, _ = self.encode(input_ids, attention_mask, mode, **kw)
        return lm_head_forward(hidden.reshape(-1, self.cfg.d_model), self.store, self.cfg)

    def task_output(self, input_ids, attention_mask=None, mode: RoutingMode = Vanilla(), **kw) -> Tensor:
        hidden, _ = self.encode(input_ids, attention_mask, mode, **kw)
        return task_head_forward(hidden, self.store, self.cfg)

    def default_mode(self) -> RoutingMode:
        return Gated() if self.cfg.has_gate else Vanilla()
