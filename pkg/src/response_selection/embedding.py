"""Vocabulary and the word representation layer.

Word vectors are the concatenation of a general pretrained vector (e.g.
GloVe, read from a text file) and a task-specific vector trained on the
training corpus with skip-gram negative sampling.  Either half is zero-filled
when a word is missing from that source, so words unknown to the general
inventory still get a task-specific representation.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import DataError

PAD, UNK, EOU = 0, 1, 2
SPECIALS = ("<pad>", "<unk>", "<eou>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

VOCAB_HEADER = (
    "# vocabulary: one token per line; id = line number - 1 + 3 counting token lines "
    "from 1 (ids 0-2 are <pad> <unk> <eou>)"
)


def tokenize(text: str) -> list[str]:
    """Lowercase; punctuation characters become standalone tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIALS) + list(tokens)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        lines = [VOCAB_HEADER] + self.itos[len(SPECIALS):]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if not lines or not lines[0].startswith("#"):
            raise DataError(f"{path}: missing vocabulary header line")
        tokens = [t for t in lines[1:] if t]
        return cls(tokens)


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Ids by descending frequency, ties broken lexicographically."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for sent in corpus:
        counts.update(sent)
    for special in SPECIALS:
        counts.pop(special, None)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def load_embedding_file(path, expected_dim: int) -> dict[str, np.ndarray]:
    """Read ``token v1 v2 ...`` lines; an optional ``count dim`` header is skipped."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) - 1 != expected_dim:
                raise DataError(
                    f"{path}:{lineno}: expected {expected_dim} values, found {len(parts) - 1}"
                )
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            vectors.setdefault(parts[0], vec)
    return vectors


@dataclass
class EmbeddingTable:
    matrix: np.ndarray  # (|V|, general_dim + task_dim)
    general_dim: int
    task_dim: int
    trainable: bool = False

    @property
    def dim(self) -> int:
        return self.general_dim + self.task_dim

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.save(fh, self.matrix.astype("<f4"), allow_pickle=False)

    @classmethod
    def load(cls, path, general_dim: int, task_dim: int) -> "EmbeddingTable":
        try:
            matrix = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise DataError(f"{path}: cannot read embedding table ({exc})") from None
        if matrix.ndim != 2 or matrix.shape[1] != general_dim + task_dim:
            raise DataError(
                f"{path}: table shape {matrix.shape} does not match dims {general_dim}+{task_dim}"
            )
        return cls(matrix.astype(np.float32), general_dim, task_dim)


def combine_embeddings(vocab: Vocabulary, general: dict, task: dict,
                       general_dim: int, task_dim: int) -> EmbeddingTable:
    matrix = np.zeros((len(vocab), general_dim + task_dim), dtype=np.float32)
    for idx, token in enumerate(vocab.itos):
        if idx == PAD:
            continue
        if idx >= len(SPECIALS) and token in general:
            vec = np.asarray(general[token])
            if vec.shape != (general_dim,):
                raise DataError(f"general vector for {token!r} has shape {vec.shape}")
            matrix[idx, :general_dim] = vec
        if token in task:
            vec = np.asarray(task[token])
            if vec.shape != (task_dim,):
                raise DataError(f"task vector for {token!r} has shape {vec.shape}")
            matrix[idx, general_dim:] = vec
    return EmbeddingTable(matrix, general_dim, task_dim)


def general_coverage(vocab: Vocabulary, general: dict) -> float:
    words = vocab.itos[len(SPECIALS):]
    if not words:
        return 0.0
    return sum(w in general for w in words) / len(words)


def train_task_embeddings(
    corpus: Sequence[Sequence[int]],
    vocab: Vocabulary,
    dim: int,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    seed: int = 0,
    lr: float = 0.025,
) -> dict[str, np.ndarray]:
    """Skip-gram with negative sampling over id sequences.

    Learning rate decays linearly to ``lr * 1e-4`` over all epochs; negatives
    are drawn from the unigram distribution raised to 0.75; no subsampling.
    Returns one vector per vocabulary token except PAD: the sum of its input
    and output vectors, which places words that co-occur close together.
    """
    if dim < 1 or window < 1 or negatives < 1:
        raise ValueError("dim, window and negatives must all be >= 1")
    total_tokens = sum(len(s) for s in corpus)
    if total_tokens < window + 1:
        raise DataError(f"corpus has {total_tokens} tokens; need at least window + 1 = {window + 1}")
    rng = np.random.default_rng(seed)
    size = len(vocab)
    w_in = rng.uniform(-0.5 / dim, 0.5 / dim, size=(size, dim))
    w_out = np.zeros((size, dim))

    counts = np.zeros(size)
    for sent in corpus:
        np.add.at(counts, np.asarray(sent, dtype=np.int64), 1)
    counts[PAD] = 0
    noise = counts ** 0.75
    cdf = np.cumsum(noise / noise.sum())

    work = epochs * total_tokens
    seen = 0
    for _ in range(epochs):
        for sent in corpus:
            for pos, center in enumerate(sent):
                alpha = lr * max(1.0 - seen / work, 1e-4)
                seen += 1
                if center == PAD:
                    continue
                lo, hi = max(0, pos - window), min(len(sent), pos + window + 1)
                contexts = [sent[j] for j in range(lo, hi) if j != pos and sent[j] != PAD]
                if not contexts:
                    continue
                draws = np.searchsorted(cdf, rng.random((len(contexts), negatives)), side="right")
                draws = np.minimum(draws, size - 1)
                for ctx, neg in zip(contexts, draws):
                    targets = np.concatenate(([ctx], neg))
                    labels = np.zeros(len(targets))
                    labels[0] = 1.0
                    v = w_in[center]
                    u = w_out[targets]
                    pred = 1.0 / (1.0 + np.exp(-(u @ v)))
                    step = (labels - pred) * alpha
                    grad_in = step @ u
                    np.add.at(w_out, targets, np.outer(step, v))
                    w_in[center] += grad_in
    vectors = w_in + w_out
    return {tok: vectors[i].copy() for i, tok in enumerate(vocab.itos) if i != PAD}


def lookup(vocab: Vocabulary | None, table: EmbeddingTable | np.ndarray, ids) -> Tensor:
    """Gather embedding rows as a constant tensor of shape ``ids.shape + (dim,)``."""
    matrix = table.matrix if isinstance(table, EmbeddingTable) else np.asarray(table)
    if vocab is not None and len(vocab) != matrix.shape[0]:
        raise DataError(f"vocabulary size {len(vocab)} != table rows {matrix.shape[0]}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= matrix.shape[0]):
        raise IndexError(f"token id out of range [0, {matrix.shape[0]})")
    return Tensor(matrix[ids])
