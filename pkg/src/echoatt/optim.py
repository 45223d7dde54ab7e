"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .errors import ContractError, NonFiniteGradientError
from .tensor import Tensor


@dataclass
class OptimState:
    lr_peak: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {"lr_peak": self.lr_peak, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}

    def save(self, path) -> None:
        tensors = {f"m.{k}": a for k, a in self.m.items()}
        tensors.update({f"v.{k}": a for k, a in self.v.items()})
        save_tensors(path, tensors, {"optimizer": "adamw", **self.hyperparameters()})

    @classmethod
    def load(cls, path) -> OptimState:
        meta, tensors = load_tensors(path)
        st = cls(lr_peak=meta["lr_peak"], betas=tuple(meta["betas"]), eps=meta["eps"],
                 weight_decay=meta["weight_decay"], step=meta["step"])
        for key, arr in tensors.items():
            kind, name = key.split(".", 1)
            (st.m if kind == "m" else st.v)[name] = arr
        return st


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
               lr: float) -> None:
    """Update ``params`` in place and advance ``state`` by one step."""
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    step = state.step + 1
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name, step)
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step = step


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for named :class:`Tensor` parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.state = OptimState(lr_peak=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def step(self, lr: float | None = None) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step({k: p.data for k, p in self.params.items()}, grads, self.state,
                   self.state.lr_peak if lr is None else lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass(frozen=True)
class CosineSchedule:
    total_steps: int
    lr_peak: float = 1e-4
    warmup_ratio: float = 0.005

    def __post_init__(self):
        if self.total_steps < 1:
            raise ContractError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ContractError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_ratio * self.total_steps)

    def lr_at(self, step: int) -> float:
        return lr_at(self, step)


def lr_at(schedule: CosineSchedule, step: int) -> float:
    """Linear ramp to ``lr_peak`` over the warmup, then half-cosine down to 0 at ``total_steps``."""
    total, warm = schedule.total_steps, schedule.warmup_steps
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if step < warm:
        return schedule.lr_peak * step / warm
    if total == warm:
        return schedule.lr_peak if step < total else 0.0
    progress = (step - warm) / (total - warm)
    return schedule.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))
