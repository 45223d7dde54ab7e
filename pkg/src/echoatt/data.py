"""Corpus loading, tokenization and fixed-length batching.

Byte mode maps every byte to its value and reserves id 256 as an
end-of-document marker, so any file round-trips exactly.  Vocab mode reads a
JSON ``token -> id`` map and tokenizes on whitespace.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, InputError

EOD = 256
BYTE_VOCAB_SIZE = 257
_DOC_SPLIT = re.compile(rb"\n\s*\n")


class ByteTokenizer:
    vocab_size = BYTE_VOCAB_SIZE
    eod_id = EOD

    def encode(self, text: str | bytes) -> np.ndarray:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    def decode_bytes(self, ids) -> bytes:
        return bytes(int(i) for i in ids if int(i) < 256)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")


class VocabTokenizer:
    """Whitespace tokenizer over a supplied ``token -> id`` map with an ``<unk>`` entry."""

    def __init__(self, vocab: dict[str, int]):
        if "<unk>" not in vocab:
            raise InputError("vocab file must define an <unk> token")
        ids = sorted(vocab.values())
        if ids != list(range(len(ids))):
            raise InputError("vocab ids must be the contiguous range 0..n-1")
        self.vocab = vocab
        self.inverse = {i: t for t, i in vocab.items()}
        self.eod_id = vocab.get("<eod>", vocab["<unk>"])
        self.vocab_size = len(vocab)

    @classmethod
    def from_file(cls, path) -> VocabTokenizer:
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f))

    def encode(self, text: str | bytes) -> np.ndarray:
        if isinstance(text, bytes):
            text = text.decode("utf-8", errors="replace")
        unk = self.vocab["<unk>"]
        return np.array([self.vocab.get(w, unk) for w in text.split()], dtype=np.int64)

    def decode(self, ids) -> str:
        return " ".join(self.inverse[int(i)] for i in ids)


@dataclass
class Corpus:
    train: np.ndarray
    val: np.ndarray
    vocab_size: int
    n_docs: int
    val_doc_ids: tuple[int, ...]

    @property
    def split_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.val_doc_ids, dtype=np.int64).tobytes())
        h.update(self.train.astype("<i8").tobytes())
        h.update(self.val.astype("<i8").tobytes())
        return h.hexdigest()

    def summary(self) -> dict:
        return {"train_tokens": int(self.train.size), "val_tokens": int(self.val.size),
                "vocab_size": self.vocab_size, "n_docs": self.n_docs, "split_hash": self.split_hash}


def read_documents(path) -> list[bytes]:
    """Blank-line separated documents from one file, or from every file of a directory in name order."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.is_file())
    elif path.is_file():
        files = [path]
    else:
        raise FileNotFoundError(f"corpus path not found: {path}")
    docs = []
    for f in files:
        docs.extend(d for d in _DOC_SPLIT.split(f.read_bytes()) if d.strip())
    return docs


def load_corpus(path, mode: str = "byte", vocab_path=None, val_fraction: float = 0.05,
                seed: int = 0) -> Corpus:
    """Tokenize documents and split them train/validation at document granularity."""
    if mode == "byte":
        tok = ByteTokenizer()
    elif mode == "vocab":
        if vocab_path is None:
            raise InputError("vocab mode needs a vocab file")
        tok = VocabTokenizer.from_file(vocab_path)
    else:
        raise InputError(f"unknown tokenizer mode {mode!r}")
    if not 0.0 <= val_fraction < 1.0:
        raise ContractError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    docs = read_documents(path)
    if not docs:
        raise InputError(f"corpus at {path} is empty")
    n_val = int(round(val_fraction * len(docs)))
    if val_fraction > 0 and len(docs) > 1:
        n_val = min(max(n_val, 1), len(docs) - 1)
    order = np.random.default_rng(seed).permutation(len(docs))
    val_ids = tuple(sorted(int(i) for i in order[:n_val]))
    val_set = set(val_ids)

    def stream(ids):
        parts = []
        for i in ids:
            parts.append(tok.encode(docs[i]))
            parts.append(np.array([tok.eod_id], dtype=np.int64))
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    train = stream(i for i in range(len(docs)) if i not in val_set)
    val = stream(val_ids)
    return Corpus(train, val, tok.vocab_size, len(docs), val_ids)


@dataclass(frozen=True)
class BatchPlan:
    seq_len: int = 128
    batch_size: int = 16
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.seq_len < 1 or self.batch_size < 1:
            raise ContractError("seq_len and batch_size must be >= 1")


def n_windows(n_tokens: int, seq_len: int) -> int:
    """Non-overlapping windows that still have a next-token target for every position."""
    return max(n_tokens - 1, 0) // seq_len


def n_batches(n_tokens: int, plan: BatchPlan) -> int:
    return n_windows(n_tokens, plan.seq_len) // plan.batch_size


def batches(tokens: np.ndarray, plan: BatchPlan, epoch: int = 0,
            limit: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(inputs, targets)`` of exact shape ``[batch_size, seq_len]``.

    Window ``i`` covers ``tokens[i*L:(i+1)*L]`` with targets shifted by one.
    Incomplete trailing batches are dropped; with ``shuffle`` the window order
    is a permutation seeded by ``(seed, epoch)``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    L, B = plan.seq_len, plan.batch_size
    nw = n_windows(tokens.size, L)
    if nw < B:
        raise InputError(f"corpus of {tokens.size} tokens is too short for one batch of "
                         f"{B} x {L} (+1 target)")
    order = np.arange(nw)
    if plan.shuffle:
        order = np.random.default_rng([plan.seed, epoch]).permutation(nw)
    starts = order * L
    idx = starts[:, None] + np.arange(L)[None, :]
    total = nw // B if limit is None else min(limit, nw // B)
    for b in range(total):
        rows = idx[b * B:(b + 1) * B]
        yield tokens[rows], tokens[rows + 1]


def fixed_length_samples(tokens: np.ndarray, seq_len: int, n_samples: int) -> np.ndarray:
    """First ``n_samples`` consecutive windows of exactly ``seq_len`` tokens (no padding)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < seq_len * n_samples:
        raise InputError(f"need {seq_len * n_samples} tokens for {n_samples} samples, have {tokens.size}")
    return tokens[: seq_len * n_samples].reshape(n_samples, seq_len)
