"""Run configuration: one JSON document, schema-checked, then cross-validated."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .distill import DistillConfig, OptimConfig
from .errors import ConfigError, PlanMismatchError
from .model import ModelConfig

SEED_ENV = "ECHOATT_SEED"


def load_schema(name: str) -> dict:
    text = (resources.files("echoatt") / "schemas" / f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(doc, schema_name: str) -> None:
    try:
        jsonschema.validate(doc, load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{schema_name}: {where}: {exc.message}") from None


def derive_seed(seed: int, label: str) -> int:
    """Independent stream seed for one consumer of the run seed."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    mode: str = "byte"
    vocab: str | None = None
    val_fraction: float = 0.05
    seq_len: int = 64
    batch_size: int = 16
    max_train_tokens: int | None = None
    analysis_samples: int = 32
    analysis_seq_len: int = 64


@dataclass(frozen=True)
class PlanConfig:
    source: str = "auto"
    k: int = 2
    b: int | None = None
    indices: tuple[int, ...] | None = None


@dataclass(frozen=True)
class BenchConfig:
    seq_len: int = 128
    batch: int = 4
    repeats: int = 7
    warmup: int = 2


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    seed: int = 0
    out: str = "runs/echoatt"
    data: DataConfig = field(default_factory=DataConfig)
    teacher_epochs: float = 2.0
    teacher_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=3e-3, warmup_ratio=0.02))
    plan: PlanConfig = field(default_factory=PlanConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    report_timing: bool = True

    def seed_for(self, label: str) -> int:
        return derive_seed(self.seed, label)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["teacher"] = {"epochs": d.pop("teacher_epochs"), "optim": d.pop("teacher_optim")}
        return d

    @classmethod
    def from_dict(cls, doc: dict, env: dict | None = None) -> RunConfig:
        validate(doc, "config")
        env = os.environ if env is None else env
        seed = int(env[SEED_ENV]) if env.get(SEED_ENV) else doc.get("seed", 0)
        teacher = doc.get("teacher", {})
        plan = dict(doc.get("plan", {}))
        if plan.get("indices") is not None:
            plan["indices"] = tuple(plan["indices"])
        cfg = cls(
            model=ModelConfig(**doc["model"]),
            seed=seed,
            out=doc.get("out", "runs/echoatt"),
            data=DataConfig(**doc.get("data", {})),
            teacher_epochs=teacher.get("epochs", 2.0),
            teacher_optim=_optim(teacher.get("optim"), OptimConfig(lr=3e-3, warmup_ratio=0.02)),
            plan=PlanConfig(**plan),
            distill=DistillConfig(**doc.get("distill", {})),
            optim=_optim(doc.get("optim"), OptimConfig()),
            bench=BenchConfig(**doc.get("bench", {})),
            report_timing=doc.get("report_timing", True),
        )
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path, env: dict | None = None) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc, env)

    def check(self) -> None:
        m, d = self.model, self.data
        if self.plan.source == "explicit" and not self.plan.indices:
            raise ConfigError("plan.source 'explicit' needs plan.indices")
        if self.plan.indices:
            bad = [i for i in self.plan.indices if not 0 < i < m.n_layers]
            if bad:
                raise PlanMismatchError(f"plan indices {bad} are outside 1..{m.n_layers - 1}")
        if d.mode == "byte" and m.vocab_size < 257:
            raise ConfigError(f"byte mode needs vocab_size >= 257, got {m.vocab_size}")
        if d.mode == "vocab" and not d.vocab:
            raise ConfigError("data.mode 'vocab' needs data.vocab")
        for name in ("seq_len", "analysis_seq_len"):
            if getattr(d, name) > m.max_seq_len:
                raise ConfigError(f"data.{name}={getattr(d, name)} exceeds model.max_seq_len={m.max_seq_len}")
        if self.bench.seq_len > m.max_seq_len:
            raise ConfigError(f"bench.seq_len={self.bench.seq_len} exceeds model.max_seq_len={m.max_seq_len}")
        if self.distill.k < 2:
            raise ConfigError("distill.k must be >= 2")


def _optim(doc: dict | None, default: OptimConfig) -> OptimConfig:
    if not doc:
        return default
    merged = {**asdict(default), **doc}
    merged["betas"] = tuple(merged["betas"])
    return OptimConfig(**merged)
