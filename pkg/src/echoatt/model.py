"""Decoder-only transformer whose layers may reuse an earlier layer's attention.

Layers follow the LLaMA recipe: pre-RMSNorm, rotary positions on Q/K,
grouped-query attention and a SwiGLU MLP.  A :class:`SharingPlan` decides, for
each layer, whether it computes its own attention probabilities or applies
those of an earlier root layer to its own values.  Consumer layers own no
``wq``/``wk`` weights.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError, ContractError, InputError
from .plan import SharingPlan
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads={self.n_heads} is not divisible by n_kv_heads={self.n_kv_heads}")
        if self.d_head % 2:
            raise ConfigError(f"rotary embeddings need an even head width, got {self.d_head}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_kv(self) -> int:
        return self.n_kv_heads * self.d_head

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


TINYLLAMA = ModelConfig(n_layers=22, d_model=2048, n_heads=32, n_kv_heads=4, d_ff=5632,
                        vocab_size=32000, max_seq_len=2048, rope_theta=10000.0, norm_eps=1e-5)

LAYER_KEYS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")


def layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, kv, f = cfg.d_model, cfg.d_kv, cfg.d_ff
    return {"attn_norm": (d,), "wq": (d, d), "wk": (d, kv), "wv": (d, kv), "wo": (d, d),
            "mlp_norm": (d,), "w_gate": (d, f), "w_up": (d, f), "w_down": (f, d)}


def parameter_shapes(cfg: ModelConfig, plan: SharingPlan | None = None) -> dict[str, tuple[int, ...]]:
    plan = plan or SharingPlan.identity(cfg.n_layers)
    plan.check_layers(cfg.n_layers)
    shapes = {"tok_emb": (cfg.vocab_size, cfg.d_model)}
    per_layer = layer_shapes(cfg)
    for j in range(cfg.n_layers):
        for key in LAYER_KEYS:
            if key in ("wq", "wk") and not plan.is_root(j):
                continue
            shapes[f"layers.{j}.{key}"] = per_layer[key]
    shapes["final_norm"] = (cfg.d_model,)
    shapes["lm_head"] = (cfg.d_model, cfg.vocab_size)
    return shapes


def count_parameters(cfg: ModelConfig, plan: SharingPlan | None = None) -> int:
    """Analytic parameter count; no weights are allocated."""
    return sum(math.prod(s) for s in parameter_shapes(cfg, plan).values())


def removed_parameters(cfg: ModelConfig, plan_or_count: SharingPlan | int) -> int:
    """Parameters dropped with the ``wq`` and grouped-query ``wk`` of each consumer layer."""
    n = plan_or_count if isinstance(plan_or_count, int) else plan_or_count.n_shared
    return n * (cfg.d_model * cfg.d_model + cfg.d_model * cfg.d_kv)


@lru_cache(maxsize=16)
def rope_tables(seq_len: int, d_head: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = theta ** (-np.arange(0, d_head // 2, dtype=np.float64) * 2.0 / d_head)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


@lru_cache(maxsize=16)
def causal_mask(seq_len: int, groups: int = 1) -> np.ndarray:
    """Additive mask with ``-inf`` above the diagonal, tiled for stacked query groups."""
    return np.tile(np.triu(np.full((seq_len, seq_len), -np.inf), k=1), (groups, 1))


@dataclass
class AttentionTrace:
    """Per-layer attention probabilities and post-block hidden states of one forward.

    ``probs[j]`` has shape ``(batch, n_kv_heads, group * seq, seq)``: the query
    heads of one kv group are stacked along the row axis.  Consumer layers hold
    the very same object as their root.
    """

    source_of: tuple[int, ...]
    probs: list[Tensor] = field(default_factory=list)
    hidden: list[Tensor] = field(default_factory=list)

    def attention(self, j: int) -> np.ndarray:
        p = self.probs[j].data
        b, kv, rows, s = p.shape
        return p.reshape(b, kv * (rows // s), s, s)

    @property
    def links(self) -> dict[int, int]:
        return {j: s for j, s in enumerate(self.source_of) if s != j}


class TransformerModel:
    def __init__(self, config: ModelConfig, plan: SharingPlan | None = None,
                 params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.plan = plan or SharingPlan.identity(config.n_layers)
        self.plan.check_layers(config.n_layers)
        shapes = parameter_shapes(config, self.plan)
        if params is None:
            params = init_parameters(config, self.plan, seed)
        missing = set(shapes) - set(params)
        unexpected = set(params) - set(shapes)
        if missing or unexpected:
            raise ContractError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

    # -- parameters -------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def freeze(self) -> TransformerModel:
        for p in self.params.values():
            p.requires_grad = False
        return self

    # -- forward ----------------------------------------------------------

    def check_tokens(self, tokens) -> np.ndarray:
        tok = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens)
        if tok.ndim != 2:
            raise InputError(f"tokens must have shape [batch, seq], got {tok.shape}")
        if tok.dtype.kind == "f":
            if not np.all(tok == np.round(tok)):
                raise InputError("token ids must be integers")
        tok = tok.astype(np.int64)
        if tok.shape[1] > self.config.max_seq_len:
            raise InputError(f"sequence length {tok.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        if tok.size and (tok.min() < 0 or tok.max() >= self.config.vocab_size):
            raise InputError(f"token ids must lie in [0, {self.config.vocab_size}); got range "
                             f"[{tok.min()}, {tok.max()}]")
        return tok

    def forward(self, tokens) -> tuple[Tensor, AttentionTrace]:
        cfg = self.config
        tok = self.check_tokens(tokens)
        B, S = tok.shape
        H, KV, Dh = cfg.n_heads, cfg.n_kv_heads, cfg.d_head
        G = H // KV
        cos, sin = rope_tables(S, Dh, cfg.rope_theta)
        mask = causal_mask(S, G)
        inv_sqrt = 1.0 / math.sqrt(Dh)
        p = self.params
        trace = AttentionTrace(self.plan.source_of)

        x = T.embedding(p["tok_emb"], tok)
        for j in range(cfg.n_layers):
            pre = f"layers.{j}."
            xn = T.rmsnorm(x, p[pre + "attn_norm"], cfg.norm_eps)
            src = self.plan.source_of[j]
            if src == j:
                q = (xn @ p[pre + "wq"]).reshape(B, S, H, Dh).transpose(0, 2, 1, 3)
                k = (xn @ p[pre + "wk"]).reshape(B, S, KV, Dh).transpose(0, 2, 1, 3)
                # query heads of one kv group are stacked along the row axis
                q = T.rotary(q, cos, sin).reshape(B, KV, G * S, Dh)
                k = T.rotary(k, cos, sin)
                scores = T.scale(q @ k.swap_last(), inv_sqrt) + mask
                probs = T.softmax(scores, axis=-1)
            else:
                probs = trace.probs[src]
            trace.probs.append(probs)
            v = (xn @ p[pre + "wv"]).reshape(B, S, KV, Dh).transpose(0, 2, 1, 3)
            att = (probs @ v).reshape(B, H, S, Dh).transpose(0, 2, 1, 3).reshape(B, S, cfg.d_model)
            x = x + att @ p[pre + "wo"]
            hn = T.rmsnorm(x, p[pre + "mlp_norm"], cfg.norm_eps)
            x = x + (T.silu(hn @ p[pre + "w_gate"]) * (hn @ p[pre + "w_up"])) @ p[pre + "w_down"]
            trace.hidden.append(x)
        logits = T.rmsnorm(x, p["final_norm"], cfg.norm_eps) @ p["lm_head"]
        return logits, trace

    __call__ = forward

    # -- persistence ------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"config": self.config.to_dict(), "plan": self.plan.to_dict()}
        if extra:
            meta["extra"] = extra
        save_tensors(path, {k: v.data for k, v in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> TransformerModel:
        meta, tensors = load_tensors(path)
        cfg = ModelConfig.from_dict(meta["config"])
        return cls(cfg, SharingPlan.from_dict(meta["plan"]), params=tensors)


def init_parameters(cfg: ModelConfig, plan: SharingPlan, seed: int) -> dict[str, np.ndarray]:
    """Seeded init: N(0, init_std) matrices, residual outputs scaled by 1/sqrt(2L), unit norms."""
    rng = np.random.default_rng(seed)
    std = cfg.init_std
    out = {}
    for name, shape in parameter_shapes(cfg).items():
        key = name.rsplit(".", 1)[-1]
        if key.endswith("norm"):
            arr = np.ones(shape)
        else:
            s = std / math.sqrt(2 * cfg.n_layers) if key in ("wo", "w_down") else std
            arr = rng.normal(0.0, s, size=shape)
        out[name] = arr
    # draw the dense layout first so a plan never changes the surviving weights
    keep = parameter_shapes(cfg, plan)
    return {k: v for k, v in out.items() if k in keep}


def build_student(teacher: TransformerModel, plan: SharingPlan) -> TransformerModel:
    """Copy every teacher weight except ``wq``/``wk`` of the plan's consumer layers."""
    if any(s != j for j, s in enumerate(teacher.plan.source_of)):
        raise ContractError("the teacher must be a dense model (identity plan)")
    plan.check_layers(teacher.config.n_layers)
    keep = parameter_shapes(teacher.config, plan)
    return TransformerModel(teacher.config, plan,
                            params={k: v.data.copy() for k, v in teacher.params.items() if k in keep})
