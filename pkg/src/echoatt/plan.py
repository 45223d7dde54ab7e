"""Attention-source maps for shared-attention students."""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractError, PlanMismatchError

# Shared-layer index lists used for the TinyLlaMA and LlaMA-160m students.
PUBLISHED_SHARED_INDICES = {
    "tinyllama-23%": (22, (2, 5, 4, 3, 7)),
    "tinyllama-41%": (22, (2, 5, 4, 3, 7, 6, 18, 9)),
    "tinyllama-77%": (22, (2, 5, 4, 3, 7, 6, 18, 9, 8, 11, 12, 1, 17, 10, 14, 13, 16)),
    "llama160m-33%": (12, (4, 6, 8, 10)),
}


@dataclass(frozen=True)
class SharingPlan:
    """``source_of[j] == j`` for layers computing attention, else the root they reuse."""

    source_of: tuple[int, ...]
    k: int | None = None
    b: int | None = None
    label: str | None = field(default=None, compare=False)

    def __post_init__(self):
        src = tuple(int(s) for s in self.source_of)
        object.__setattr__(self, "source_of", src)
        if not src:
            raise ContractError("a sharing plan needs at least one layer")
        for j, s in enumerate(src):
            if not 0 <= s <= j:
                raise ContractError(f"layer {j} has source {s}; sources must satisfy 0 <= source <= layer")
            if src[s] != s:
                raise ContractError(f"layer {j} points at {s}, which is not a root layer")

    @classmethod
    def identity(cls, n_layers: int) -> SharingPlan:
        return cls(tuple(range(n_layers)))

    @classmethod
    def from_shared_indices(cls, indices, n_layers: int, label: str | None = None) -> SharingPlan:
        """Each listed layer reuses the nearest preceding layer that is not listed."""
        indices = [int(i) for i in indices]
        shared = set(indices)
        if len(shared) != len(indices):
            raise ContractError(f"duplicate shared indices in {indices}")
        bad = sorted(i for i in shared if not 0 <= i < n_layers)
        if bad:
            raise PlanMismatchError(f"shared indices {bad} out of range for {n_layers} layers")
        if 0 in shared:
            raise ContractError("layer 0 has no preceding layer to share attention with")
        src, root = [], 0
        for j in range(n_layers):
            if j not in shared:
                root = j
            src.append(root)
        return cls(tuple(src), label=label)

    @classmethod
    def from_published(cls, name: str) -> SharingPlan:
        n_layers, idx = PUBLISHED_SHARED_INDICES[name]
        return cls.from_shared_indices(idx, n_layers, label=f"published-{name.split('-')[-1]}")

    @property
    def n_layers(self) -> int:
        return len(self.source_of)

    def is_root(self, j: int) -> bool:
        return self.source_of[j] == j

    @property
    def shared_layers(self) -> list[int]:
        return [j for j, s in enumerate(self.source_of) if s != j]

    @property
    def n_shared(self) -> int:
        return len(self.shared_layers)

    @property
    def sharing_ratio(self) -> float:
        return self.n_shared / self.n_layers

    def runs(self) -> list[list[int]]:
        """Groups ``[root, consumer, ...]`` for every root with at least one consumer."""
        groups: dict[int, list[int]] = {}
        for j, s in enumerate(self.source_of):
            if s != j:
                groups.setdefault(s, [s]).append(j)
        return [groups[r] for r in sorted(groups)]

    def alignment_points(self) -> list[int]:
        """Last layer of each shared run; the ``k*i + b`` layers for contiguous blocks."""
        return [run[-1] for run in self.runs()]

    def check_layers(self, n_layers: int) -> None:
        if n_layers != self.n_layers:
            raise PlanMismatchError(f"plan covers {self.n_layers} layers but the model has {n_layers}")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "source_of": list(self.source_of),
            "shared_layers": self.shared_layers,
            "sharing_ratio": self.sharing_ratio,
            "k": self.k,
            "b": self.b,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SharingPlan:
        return cls(tuple(d["source_of"]), k=d.get("k"), b=d.get("b"), label=d.get("label"))
