"""Parameter, FLOP and throughput accounting for dense vs shared-attention models.

FLOPs count two per multiply-accumulate.  Softmax is charged
``SOFTMAX_FLOPS`` per score (max, subtract, exp, sum, divide).
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import TINYLLAMA, ModelConfig, TransformerModel, count_parameters, removed_parameters
from .optim import AdamW
from .plan import PUBLISHED_SHARED_INDICES, SharingPlan
from .tensor import no_grad

SOFTMAX_FLOPS = 5
ATTENTION_TERMS = ("q_proj", "k_proj", "v_proj", "qk", "softmax", "av", "o_proj")
SKIPPED_WHEN_SHARED = ("q_proj", "k_proj", "qk", "softmax")

# Reported TinyLlaMA-1.1B figures, keyed by sharing ratio label.
REPORTED_FIGURES = {
    "baseline": {"tokens_per_sec": 28.44, "training_time": "43h,30m"},
    "23%": {"removed": 24e6, "percent": 2.14, "tokens_per_sec": 30.99, "inference_gain": 9, "training_gain": 14},
    "41%": {"removed": 43e6, "percent": 3.86, "tokens_per_sec": 32.61, "inference_gain": 15, "training_gain": 25},
    "77%": {"removed": 80e6, "percent": 7.29, "tokens_per_sec": 40.50, "inference_gain": 42, "training_gain": 46},
}


def layer_flops(cfg: ModelConfig, seq_len: int) -> dict[str, int]:
    """Forward FLOPs of one dense layer over a length-``seq_len`` sequence."""
    t, d, kv, h, f = seq_len, cfg.d_model, cfg.d_kv, cfg.n_heads, cfg.d_ff
    return {
        "q_proj": 2 * t * d * d,
        "k_proj": 2 * t * d * kv,
        "v_proj": 2 * t * d * kv,
        "qk": 2 * t * t * d,
        "softmax": SOFTMAX_FLOPS * h * t * t,
        "av": 2 * t * t * d,
        "o_proj": 2 * t * d * d,
        "mlp": 2 * t * 3 * d * f,
    }


@dataclass
class FlopReport:
    seq_len: int
    baseline: int
    shared: int
    per_layer: list[dict[str, int]]

    @property
    def saved(self) -> int:
        return self.baseline - self.shared

    @property
    def baseline_per_token(self) -> float:
        return self.baseline / self.seq_len

    @property
    def shared_per_token(self) -> float:
        return self.shared / self.seq_len

    def to_dict(self) -> dict:
        return {"seq_len": self.seq_len, "baseline": self.baseline, "shared": self.shared,
                "saved": self.saved, "baseline_per_token": self.baseline_per_token,
                "shared_per_token": self.shared_per_token}


def analytic_flops(cfg: ModelConfig, plan: SharingPlan, seq_len: int) -> FlopReport:
    plan.check_layers(cfg.n_layers)
    dense = layer_flops(cfg, seq_len)
    head = 2 * seq_len * cfg.d_model * cfg.vocab_size
    per_layer = []
    for j in range(cfg.n_layers):
        terms = dict(dense)
        if not plan.is_root(j):
            for key in SKIPPED_WHEN_SHARED:
                terms[key] = 0
        per_layer.append(terms)
    baseline = cfg.n_layers * sum(dense.values()) + head
    shared = sum(sum(t.values()) for t in per_layer) + head
    return FlopReport(seq_len, baseline, shared, per_layer)


@dataclass
class Throughput:
    median: float
    iqr: float
    repeats: int
    samples: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"median": self.median, "iqr": self.iqr, "repeats": self.repeats, "samples": self.samples}


def _summarise(samples: list[float]) -> Throughput:
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return Throughput(float(med), float(q3 - q1), len(samples), [float(s) for s in samples])


def _tokens(cfg: ModelConfig, seq_len: int, batch: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, cfg.vocab_size, size=(batch, seq_len))


def compare_throughput(models: dict[str, TransformerModel], seq_len: int, batch: int, repeats: int = 7,
                       warmup: int = 2, seed: int = 0) -> dict[str, Throughput]:
    """Forward tokens/sec per model, interleaving repeats so drift hits every model alike."""
    if repeats < 5:
        raise ValueError(f"need at least 5 repeats, got {repeats}")
    cfgs = {m.config.vocab_size for m in models.values()}
    tok = _tokens(next(iter(models.values())).config, seq_len, batch, seed)
    if len(cfgs) != 1:
        raise ValueError("models must share a vocabulary")
    samples: dict[str, list[float]] = {name: [] for name in models}
    with no_grad():
        for _ in range(warmup):
            for m in models.values():
                m.forward(tok)
        for _ in range(repeats):
            for name, m in models.items():
                t0 = time.perf_counter()
                m.forward(tok)
                samples[name].append(tok.size / (time.perf_counter() - t0))
    return {name: _summarise(s) for name, s in samples.items()}


def measure_throughput(model: TransformerModel, seq_len: int, batch: int, repeats: int = 7,
                       warmup: int = 2, seed: int = 0) -> Throughput:
    return compare_throughput({"model": model}, seq_len, batch, repeats, warmup, seed)["model"]


def measure_train_step(model: TransformerModel, seq_len: int, batch: int, repeats: int = 5,
                       warmup: int = 1, teacher: TransformerModel | None = None, seed: int = 0) -> Throughput:
    """Seconds per optimizer step; with ``teacher`` the step includes the frozen teacher forward.

    Runs AdamW at learning rate 0 so the weights are left as they were.
    """
    from .distill import DistillConfig, lm_loss, stage1_losses

    tok = _tokens(model.config, seq_len + 1, batch, seed)
    x, y = tok[:, :-1], tok[:, 1:]
    opt = AdamW(model.params)
    cfg = DistillConfig()

    def step():
        opt.zero_grad()
        if teacher is None:
            logits, _ = model.forward(x)
            loss = lm_loss(logits, y)
        else:
            loss = stage1_losses(model, teacher, x, cfg)["total"]
        T.backward(loss)
        opt.step(0.0)

    for _ in range(warmup):
        step()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        step()
        samples.append(time.perf_counter() - t0)
    opt.zero_grad()
    return _summarise(samples)


@dataclass
class BenchReport:
    config: dict
    seq_len: int
    batch: int
    params: dict
    flops: dict
    throughput: dict
    train_step: dict
    reported: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    def table(self) -> str:
        p, fl, th, tr = self.params, self.flops, self.throughput, self.train_step
        base_tps, stud_tps = th["baseline"]["median"], th["student"]["median"]
        lines = [
            f"{'':24s}{'baseline':>16s}{'student':>16s}",
            f"{'parameters':24s}{p['baseline']:>16,d}{p['student']:>16,d}",
            f"{'removed':24s}{'':>16s}{p['removed']:>16,d}  ({p['percent']:.2f}%)",
            f"{'forward FLOPs/token':24s}{fl['baseline_per_token']:>16,.0f}{fl['shared_per_token']:>16,.0f}",
            f"{'tokens/sec (median)':24s}{base_tps:>16,.1f}{stud_tps:>16,.1f}  "
            f"({100 * (stud_tps / base_tps - 1):+.1f}%)",
            f"{'train s/step':24s}{tr['baseline']['median']:>16.4f}{tr['student']['median']:>16.4f}",
        ]
        if "student_distill" in tr:
            lines.append(f"{'distill s/step':24s}{'':>16s}{tr['student_distill']['median']:>16.4f}")
        return "\n".join(lines)


def run_bench(baseline: TransformerModel, student: TransformerModel, seq_len: int, batch: int,
              repeats: int = 7, warmup: int = 2, seed: int = 0) -> BenchReport:
    if baseline.config != student.config:
        raise ValueError("baseline and student must share an architecture config")
    cfg = baseline.config
    pb, ps = baseline.parameter_count(), student.parameter_count()
    removed = pb - ps
    flops = analytic_flops(cfg, student.plan, seq_len)
    th = compare_throughput({"baseline": baseline, "student": student}, seq_len, batch, repeats, warmup, seed)
    train = {
        "baseline": measure_train_step(baseline, seq_len, batch, max(5, repeats // 2), seed=seed).to_dict(),
        "student": measure_train_step(student, seq_len, batch, max(5, repeats // 2), seed=seed).to_dict(),
        "student_distill": measure_train_step(student, seq_len, batch, max(5, repeats // 2),
                                              teacher=baseline, seed=seed).to_dict(),
    }
    return BenchReport(
        config=cfg.to_dict(), seq_len=seq_len, batch=batch,
        params={"baseline": pb, "student": ps, "removed": removed, "percent": 100.0 * removed / pb,
                "sharing_ratio": student.plan.sharing_ratio},
        flops=flops.to_dict(),
        throughput={k: v.to_dict() for k, v in th.items()},
        train_step=train,
        reported=REPORTED_FIGURES,
    )


def table3(cfg: ModelConfig = TINYLLAMA, tolerance: float = 0.05) -> dict:
    """Parameter column for the three TinyLlaMA sharing ratios, from architecture constants alone.

    Each row uses the published shared-index list.  ``ratio_implied`` also
    gives the count implied by the ratio label itself, which is where the 41%
    row's list (8 layers) and its reported removal (~9 layers) part ways.
    """
    baseline = count_parameters(cfg)
    per_layer = removed_parameters(cfg, 1)
    rows = []
    for label in ("23%", "41%", "77%"):
        n_layers, idx = PUBLISHED_SHARED_INDICES[f"tinyllama-{label}"]
        ref = REPORTED_FIGURES[label]
        n_shared = len(idx) if n_layers == cfg.n_layers else None
        removed = removed_parameters(cfg, n_shared) if n_shared is not None else None
        implied = round(float(label.rstrip("%")) / 100 * cfg.n_layers)
        row = {
            "label": f"published-{label}",
            "shared_indices": list(idx),
            "n_shared": n_shared,
            "sharing_ratio": n_shared / cfg.n_layers if n_shared is not None else None,
            "removed": removed,
            "percent": 100.0 * removed / baseline if removed is not None else None,
            "reported_removed": ref["removed"],
            "reported_percent": ref["percent"],
            "ratio_implied_n_shared": implied,
            "ratio_implied_removed": removed_parameters(cfg, implied),
            "ratio_implied_percent": 100.0 * removed_parameters(cfg, implied) / baseline,
        }
        row["matches_reported"] = bool(removed is not None
                                    and abs(removed - ref["removed"]) <= tolerance * ref["removed"])
        row["discrepancy"] = None if row["matches_reported"] else (
            f"index list has {n_shared} layers ({removed / 1e6:.1f}M removed) but the reported "
            f"{ref['removed'] / 1e6:.0f}M matches {implied} layers ({row['ratio_implied_removed'] / 1e6:.1f}M)")
        rows.append(row)
    return {"config": cfg.to_dict(), "baseline_parameters": baseline, "removed_per_shared_layer": per_layer,
            "tolerance": tolerance, "rows": rows}


def format_table3(result: dict) -> str:
    lines = [f"baseline parameters: {result['baseline_parameters']:,d}; "
             f"removed per shared layer: {result['removed_per_shared_layer']:,d}",
             f"{'row':12s}{'shared':>8s}{'ratio':>8s}{'removed':>14s}{'percent':>9s}{'reported':>14s}  status"]
    for r in result["rows"]:
        status = "ok" if r["matches_reported"] else "DISCREPANCY: " + r["discrepancy"]
        lines.append(f"{r['label']:12s}{r['n_shared']:>8d}{100 * r['sharing_ratio']:>7.1f}%"
                     f"{r['removed'] / 1e6:>13.1f}M{r['percent']:>8.2f}%"
                     f"{r['reported_removed'] / 1e6:>8.0f}M ({r['reported_percent']:.2f}%)  {status}")
    return "\n".join(lines)
