"""Two-stage training of a shared-attention student.

Stage 1 fits the student to the frozen teacher with
``alpha * L_I + beta * L_S + gamma * L_H``; Stage 2 continues on the true
next-token labels.  Teacher pretraining reuses the Stage 2 loss.
"""
from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BatchPlan, Corpus, batches, n_batches
from .errors import ConfigError, ContractError
from .optim import AdamW, CosineSchedule
from .tensor import Tensor, no_grad

KL_DIRECTIONS = ("student_teacher", "teacher_student")


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.25
    beta: float = 0.25
    gamma: float = 0.5
    k: int = 2
    b: int | None = None
    stage1_epochs: float = 1.0
    stage2_epochs: float = 0.25
    kl_direction: str = "student_teacher"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.alpha + self.beta + self.gamma <= 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("stage epochs must be nonnegative")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"kl_direction must be one of {KL_DIRECTIONS}")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.005

    def make(self, params) -> AdamW:
        return AdamW(params, lr=self.lr, betas=self.betas, eps=self.eps, weight_decay=self.weight_decay)

    def schedule(self, total_steps: int) -> CosineSchedule:
        return CosineSchedule(max(total_steps, 1), self.lr, self.warmup_ratio)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over positions of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ContractError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    return -T.mean(T.gather_last(T.log_softmax(logits, -1), targets))


def lm_loss(logits: Tensor, targets) -> Tensor:
    return cross_entropy(logits, targets)


def _teacher_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def soft_label_loss(student_logits: Tensor, teacher_logits, direction: str = "student_teacher") -> Tensor:
    """KL between vocab softmaxes, averaged over positions; the teacher side is a constant.

    ``student_teacher`` computes KL(student || teacher); ``teacher_student`` is the
    usual distillation direction KL(teacher || student).
    """
    t = _teacher_array(teacher_logits)
    if t.shape != student_logits.shape:
        raise ContractError(f"logit shapes differ: {student_logits.shape} vs {t.shape}")
    t_shift = t - t.max(axis=-1, keepdims=True)
    log_pt = t_shift - np.log(np.exp(t_shift).sum(axis=-1, keepdims=True))
    log_ps = T.log_softmax(student_logits, -1)
    if direction == "student_teacher":
        per_pos = T.tsum(T.exp(log_ps) * (log_ps - log_pt), axis=-1)
    elif direction == "teacher_student":
        per_pos = T.tsum(T.mul(np.exp(log_pt), log_pt - log_ps), axis=-1)
    else:
        raise ConfigError(f"unknown KL direction {direction!r}")
    return T.mean(per_pos)


def hard_label_loss(student_logits: Tensor, teacher_logits) -> Tensor:
    """Cross-entropy against the teacher's argmax token (ties go to the lowest id)."""
    t = _teacher_array(teacher_logits)
    if t.shape != student_logits.shape:
        raise ContractError(f"logit shapes differ: {student_logits.shape} vs {t.shape}")
    return cross_entropy(student_logits, np.argmax(t, axis=-1))


def intermediate_loss(student_trace, teacher_trace, plan) -> Tensor:
    """Mean over alignment layers of the MSE between student and teacher hidden states.

    Alignment layers are the last layer of every shared run.  A plan without
    shared runs gives a constant zero; check ``plan.alignment_points()`` to tell
    that case apart.
    """
    points = plan.alignment_points()
    if not points:
        return Tensor(0.0)
    terms = []
    for j in points:
        diff = student_trace.hidden[j] - _teacher_array(teacher_trace.hidden[j])
        terms.append(T.mean(diff * diff))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.scale(total, 1.0 / len(points))


def stage1_losses(student, teacher, tokens, cfg: DistillConfig) -> dict[str, Tensor]:
    with no_grad():
        t_logits, t_trace = teacher.forward(tokens)
    s_logits, s_trace = student.forward(tokens)
    li = intermediate_loss(s_trace, t_trace, student.plan)
    ls = soft_label_loss(s_logits, t_logits, cfg.kl_direction)
    lh = hard_label_loss(s_logits, t_logits)
    total = T.scale(li, cfg.alpha) + T.scale(ls, cfg.beta) + T.scale(lh, cfg.gamma)
    return {"L_I": li, "L_S": ls, "L_H": lh, "total": total}


# ---------------------------------------------------------------------------
# steps


def stage1_step(student, teacher, tokens, cfg: DistillConfig, optimizer: AdamW, lr: float,
                step: int = 0) -> dict:
    t0 = time.perf_counter()
    optimizer.zero_grad()
    losses = stage1_losses(student, teacher, tokens, cfg)
    T.backward(losses["total"])
    optimizer.step(lr)
    dt = time.perf_counter() - t0
    rec = {"step": step, "stage": 1, "lr": lr, "tokens_per_sec": np.size(tokens) / dt,
           "li_vacuous": not student.plan.alignment_points()}
    rec.update({k: v.item() for k, v in losses.items()})
    return rec


def stage2_step(student, tokens, targets, optimizer: AdamW, lr: float, step: int = 0,
                stage: int | str = 2) -> dict:
    t0 = time.perf_counter()
    optimizer.zero_grad()
    logits, _ = student.forward(tokens)
    loss = lm_loss(logits, targets)
    T.backward(loss)
    optimizer.step(lr)
    dt = time.perf_counter() - t0
    return {"step": step, "stage": stage, "lr": lr, "tokens_per_sec": np.size(tokens) / dt,
            "total": loss.item()}


# ---------------------------------------------------------------------------
# reporting and loops


@dataclass
class TrainReport:
    """Per-step records, optionally streamed as newline-delimited JSON after a header line."""

    records: list[dict] = field(default_factory=list)
    perplexity: dict[str, float] = field(default_factory=dict)
    sink: object = None
    timing: bool = True

    def header(self, config: dict) -> None:
        if self.sink is not None:
            self.sink.write(json.dumps({"type": "header", "config": config}, sort_keys=True) + "\n")

    def add(self, rec: dict) -> None:
        if not self.timing:
            rec = {k: v for k, v in rec.items() if k != "tokens_per_sec"}
        rec = {"type": "step", **rec}
        self.records.append(rec)
        if self.sink is not None:
            self.sink.write(json.dumps(rec, sort_keys=True) + "\n")

    def summary(self, name: str, value: float) -> None:
        self.perplexity[name] = value
        if self.sink is not None:
            self.sink.write(json.dumps({"type": "perplexity", "name": name, "value": value},
                                       sort_keys=True) + "\n")

    def losses(self, stage) -> np.ndarray:
        return np.array([r["total"] for r in self.records if r["stage"] == stage])


def stage_steps(n_tokens: int, plan: BatchPlan, epochs: float) -> int:
    return math.ceil(epochs * n_batches(n_tokens, plan))


def _epoch_batches(tokens, plan: BatchPlan, steps: int, epoch_offset: int = 0):
    """``steps`` batches drawn from consecutive shuffled epochs."""
    per_epoch = n_batches(tokens.size, plan)
    epoch = epoch_offset
    done = 0
    while done < steps:
        for batch in batches(tokens, plan, epoch=epoch, limit=min(per_epoch, steps - done)):
            yield batch
            done += 1
        epoch += 1


@no_grad()
def evaluate_perplexity(model, tokens: np.ndarray, seq_len: int, batch_size: int = 16) -> float:
    """``exp`` of the mean next-token cross-entropy over non-overlapping validation windows."""
    tokens = np.asarray(tokens, dtype=np.int64)
    nw = (tokens.size - 1) // seq_len
    if nw < 1:
        raise ContractError(f"validation stream of {tokens.size} tokens is shorter than one window")
    plan = BatchPlan(seq_len=seq_len, batch_size=min(batch_size, nw), shuffle=False)
    total, count = 0.0, 0
    for x, y in batches(tokens, plan):
        logits, _ = model.forward(x)
        total += lm_loss(logits, y).item() * y.size
        count += y.size
    return math.exp(total / count)


def pretrain(model, corpus: Corpus, plan: BatchPlan, optim_cfg: OptimConfig, epochs: float,
             report: TrainReport | None = None, log_every: int = 0) -> TrainReport:
    """Plain next-token training, used for the dense teacher."""
    report = report or TrainReport()
    steps = stage_steps(corpus.train.size, plan, epochs)
    opt = optim_cfg.make(model.params)
    sched = optim_cfg.schedule(steps)
    for i, (x, y) in enumerate(_epoch_batches(corpus.train, plan, steps)):
        rec = stage2_step(model, x, y, opt, sched.lr_at(i), step=i, stage="pretrain")
        report.add(rec)
        if log_every and i % log_every == 0:
            print(f"pretrain step {i}/{steps} loss {rec['total']:.4f}", flush=True)
    return report


@dataclass
class DistillResult:
    report: TrainReport
    stage1_state: dict[str, np.ndarray]
    stage1_optimizer: object
    optimizer: object


def run_distillation(teacher, student, corpus: Corpus, plan: BatchPlan, cfg: DistillConfig,
                     optim_cfg: OptimConfig, report: TrainReport | None = None,
                     eval_seq_len: int | None = None, log_every: int = 0) -> DistillResult:
    """Stage 1 for ``cfg.stage1_epochs`` then Stage 2 for ``cfg.stage2_epochs``.

    Each stage runs its own warmup + cosine schedule with the same
    hyperparameters; the optimizer state carries over.  Validation perplexity
    is recorded after each stage.
    """
    report = report or TrainReport()
    if teacher.config != student.config:
        raise ContractError("teacher and student must share one architecture config")
    before = {k: v.data.copy() for k, v in teacher.params.items()}
    opt = optim_cfg.make(student.params)
    eval_len = eval_seq_len or plan.seq_len

    s1 = stage_steps(corpus.train.size, plan, cfg.stage1_epochs)
    sched = optim_cfg.schedule(s1)
    for i, (x, _) in enumerate(_epoch_batches(corpus.train, plan, s1)):
        rec = stage1_step(student, teacher, x, cfg, opt, sched.lr_at(i), step=i)
        report.add(rec)
        if log_every and i % log_every == 0:
            print(f"stage1 step {i}/{s1} loss {rec['total']:.4f}", flush=True)
    stage1_state = student.state_dict()
    stage1_opt = copy.deepcopy(opt.state)
    report.summary("stage1", evaluate_perplexity(student, corpus.val, eval_len))

    s2 = stage_steps(corpus.train.size, plan, cfg.stage2_epochs)
    sched = optim_cfg.schedule(s2)
    # continue the shuffled epoch sequence where Stage 1 stopped
    offset = math.ceil(cfg.stage1_epochs)
    for i, (x, y) in enumerate(_epoch_batches(corpus.train, plan, s2, epoch_offset=offset)):
        rec = stage2_step(student, x, y, opt, sched.lr_at(i), step=s1 + i)
        report.add(rec)
        if log_every and i % log_every == 0:
            print(f"stage2 step {i}/{s2} loss {rec['total']:.4f}", flush=True)
    if s2:
        report.summary("stage2", evaluate_perplexity(student, corpus.val, eval_len))

    for k, v in teacher.params.items():
        if not np.array_equal(v.data, before[k]):
            raise ContractError(f"teacher parameter {k} changed during distillation")
    return DistillResult(report, stage1_state, stage1_opt, opt.state)

