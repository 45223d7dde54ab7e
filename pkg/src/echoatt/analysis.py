"""Cross-layer attention similarity and sharing-plan construction."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ContractError, DegenerateInputError, InputError
from .plan import SharingPlan
from .tensor import no_grad


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise InputError(f"cosine similarity needs equal lengths, got {u.size} and {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass
class SimilarityReport:
    n_layers: int
    pairwise: np.ndarray
    per_layer_avg: np.ndarray
    n_samples: int
    seq_len: int

    def to_dict(self) -> dict:
        return {"n_layers": self.n_layers, "n_samples": self.n_samples, "seq_len": self.seq_len,
                "pairwise": self.pairwise.tolist(), "per_layer_avg": self.per_layer_avg.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> SimilarityReport:
        return cls(d["n_layers"], np.array(d["pairwise"], dtype=np.float64),
                   np.array(d["per_layer_avg"], dtype=np.float64), d["n_samples"], d["seq_len"])

    def write(self, json_path, pairs_csv=None, avg_csv=None) -> None:
        with open(json_path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
        if pairs_csv is not None:
            with open(pairs_csv, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["i", "j", "similarity"])
                for i in range(self.n_layers):
                    for j in range(i + 1, self.n_layers):
                        w.writerow([i, j, repr(float(self.pairwise[i, j]))])
        if avg_csv is not None:
            with open(avg_csv, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["layer", "avg_similarity"])
                for i, a in enumerate(self.per_layer_avg):
                    w.writerow([i, repr(float(a))])

    @classmethod
    def read(cls, path) -> SimilarityReport:
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class SimilarityAccumulator:
    """Running sum of per-sample cosine matrices; merging is order independent up to rounding."""

    n_layers: int
    seq_len: int | None = None
    total: np.ndarray = None
    count: int = 0

    def __post_init__(self):
        if self.total is None:
            self.total = np.zeros((self.n_layers, self.n_layers))

    def add_sample(self, flat: np.ndarray) -> None:
        """``flat`` is ``(n_layers, features)``: one flattened attention tensor per layer."""
        norms = np.linalg.norm(flat, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise DegenerateInputError("a layer produced an all-zero attention tensor")
        unit = flat / norms
        self.total += unit @ unit.T
        self.count += 1

    def add_trace(self, trace, seq_len: int) -> None:
        if self.seq_len is None:
            self.seq_len = seq_len
        elif seq_len != self.seq_len:
            raise InputError(f"all samples must share one length; got {seq_len} after {self.seq_len}")
        per_layer = [trace.attention(j) for j in range(self.n_layers)]
        for b in range(per_layer[0].shape[0]):
            self.add_sample(np.stack([a[b].ravel() for a in per_layer]))

    def merge(self, other: SimilarityAccumulator) -> SimilarityAccumulator:
        if other.n_layers != self.n_layers:
            raise ContractError("cannot merge accumulators over different layer counts")
        if self.seq_len is not None and other.seq_len is not None and self.seq_len != other.seq_len:
            raise InputError("cannot merge accumulators over different sequence lengths")
        return SimilarityAccumulator(self.n_layers, self.seq_len or other.seq_len,
                                     self.total + other.total, self.count + other.count)

    def report(self) -> SimilarityReport:
        if self.count == 0:
            raise InputError("no samples were accumulated")
        mean = self.total / self.count
        upper = np.triu(mean, k=1)
        pairwise = np.clip(upper + upper.T, -1.0, 1.0)
        np.fill_diagonal(pairwise, 1.0)
        n = self.n_layers
        if n > 1:
            avg = (pairwise.sum(axis=1) - 1.0) / (n - 1)
        else:
            avg = np.zeros(1)
        return SimilarityReport(n, pairwise, avg, self.count, self.seq_len or 0)


def _as_batches(corpus_batches) -> list[np.ndarray]:
    if isinstance(corpus_batches, np.ndarray):
        corpus_batches = [corpus_batches]
    out = []
    for batch in corpus_batches:
        try:
            arr = batch if isinstance(batch, np.ndarray) else np.asarray(batch)
        except ValueError:
            raise InputError("ragged batch; samples must be fixed-length") from None
        if arr.dtype == object or arr.ndim != 2:
            raise InputError("every batch must be a rectangular [batch, seq] token array")
        out.append(arr)
    return out


def attention_similarity(model, corpus_batches: Iterable, workers: int = 1) -> SimilarityReport:
    """Mean over samples of the cosine similarity between flattened per-layer attention tensors.

    Each sample's ``(heads, seq, seq)`` probabilities, masked zeros included,
    form one vector per layer.  With ``workers > 1`` batches are processed in a
    thread pool and merged in batch order.
    """
    if model.plan.n_shared:
        raise ContractError("similarity analysis runs on the dense teacher (identity plan)")
    batches = _as_batches(corpus_batches)
    if not batches:
        raise InputError("no batches given")
    lengths = {b.shape[1] for b in batches}
    if len(lengths) != 1:
        raise InputError(f"ragged sample lengths {sorted(lengths)}; samples must be fixed-length")
    (seq_len,) = lengths
    n_layers = model.config.n_layers

    def work(batch):
        acc = SimilarityAccumulator(n_layers)
        with no_grad():
            _, trace = model.forward(batch)
        acc.add_trace(trace, seq_len)
        return acc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, batches))
    else:
        parts = [work(b) for b in batches]
    acc = SimilarityAccumulator(n_layers, seq_len)
    for part in parts:
        acc = acc.merge(part)
    return acc.report()


@dataclass
class LayerSelection:
    unchanged: frozenset[int]
    candidates: frozenset[int]
    rejected: frozenset[int]
    cutoff_gap: float
    warning: str | None = None

    def to_dict(self) -> dict:
        return {"unchanged": sorted(self.unchanged), "candidates": sorted(self.candidates),
                "rejected": sorted(self.rejected), "cutoff_gap": self.cutoff_gap, "warning": self.warning}


def select_unchanged_layers(report_or_avgs) -> LayerSelection:
    """Max-gap cutoff on sorted per-layer averages, restricted to a prefix and/or suffix.

    Layers below the largest gap are candidates; those not in the leading or
    trailing contiguous run of candidates end up in ``rejected``.  Equal gaps
    resolve to the one nearest the low end.
    """
    avgs = report_or_avgs.per_layer_avg if isinstance(report_or_avgs, SimilarityReport) else report_or_avgs
    avgs = np.asarray(avgs, dtype=np.float64)
    n = avgs.size
    if n < 2:
        raise ContractError("layer selection needs at least two layers")
    order = sorted(range(n), key=lambda i: (avgs[i], i))
    gaps = [avgs[order[p + 1]] - avgs[order[p]] for p in range(n - 1)]
    best = max(gaps)
    if best <= 0.0:
        return LayerSelection(frozenset(), frozenset(), frozenset(), 0.0,
                              warning="all per-layer averages are equal; no cutoff exists")
    cut = gaps.index(best)
    candidates = set(order[:cut + 1])
    keep = set()
    i = 0
    while i < n and i in candidates:
        keep.add(i)
        i += 1
    i = n - 1
    while i >= 0 and i in candidates:
        keep.add(i)
        i -= 1
    rejected = candidates - keep
    warning = None
    if rejected:
        warning = f"layers {sorted(rejected)} fall below the cutoff but are not at either end of the stack"
    return LayerSelection(frozenset(keep), frozenset(candidates), frozenset(rejected), float(best), warning)


def build_plan(unchanged, n_layers: int, k: int, b: int | None = None) -> SharingPlan:
    """Group the remaining layers into consecutive runs of at most ``k``.

    The first layer of a run computes attention and the rest reuse it; runs
    never cross an unchanged layer.  ``b`` defaults to the number of leading
    unchanged layers.
    """
    if k < 2:
        raise ContractError(f"block size k must be >= 2, got {k}")
    unchanged = set(int(u) for u in unchanged)
    if any(not 0 <= u < n_layers for u in unchanged):
        raise ContractError(f"unchanged layers {sorted(unchanged)} out of range for {n_layers} layers")
    if b is None:
        b = 0
        while b < n_layers and b in unchanged:
            b += 1
    source = list(range(n_layers))
    segment: list[int] = []

    def flush():
        for start in range(0, len(segment), k):
            run = segment[start:start + k]
            for j in run[1:]:
                source[j] = run[0]
        segment.clear()

    for j in range(n_layers):
        if j in unchanged:
            flush()
        else:
            segment.append(j)
    flush()
    return SharingPlan(tuple(source), k=k, b=b)
