"""Ranking metrics (recall@k, MRR), ensembling and score-file I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

DEFAULT_KS = (1, 2, 5, 10, 50)


@dataclass
class RankedDialogue:
    example_id: str
    order: list[int]  # candidate indices, best first
    gold_rank: int | None = None  # 1-based


def rank_candidates(scores: Sequence[float], label: int | None = None,
                    example_id: str = "") -> RankedDialogue:
    """Sort by score descending; ties keep ascending candidate index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 1:
        raise ValueError("need a non-empty 1-D score vector")
    order = np.lexsort((np.arange(scores.size), -scores)).tolist()
    gold = None if label is None else order.index(label) + 1
    return RankedDialogue(example_id, order, gold)


def _gold_ranks(ranked: Iterable[RankedDialogue]) -> np.ndarray:
    ranks = []
    for r in ranked:
        if r.gold_rank is None:
            raise ValueError(f"dialogue {r.example_id!r} has no label")
        ranks.append(r.gold_rank)
    if not ranks:
        raise ValueError("no dialogues to evaluate")
    return np.asarray(ranks)


def recall_at_k(ranked: Sequence[RankedDialogue], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(np.mean(_gold_ranks(ranked) <= k))


def mrr(ranked: Sequence[RankedDialogue]) -> float:
    return float(np.mean(1.0 / _gold_ranks(ranked)))


@dataclass
class MetricsReport:
    recall_at: dict[int, float]
    mrr: float
    num_dialogues: int
    composite: float | None = field(default=None)

    def to_dict(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "mrr": self.mrr,
            "composite": self.composite,
            "num_dialogues": self.num_dialogues,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @property
    def selection_metric(self) -> float:
        """Challenge criterion (R@10 + MRR)/2, or MRR alone when fewer than 10 candidates."""
        return self.mrr if self.composite is None else self.composite


def evaluate(ranked: Sequence[RankedDialogue], ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    n_min = min(len(r.order) for r in ranked)
    ks = sorted({k for k in ks if k <= n_min} | {1})
    recall = {k: recall_at_k(ranked, k) for k in ks}
    m = mrr(ranked)
    composite = (recall[10] + m) / 2 if 10 in recall else None
    return MetricsReport(recall, m, len(ranked), composite)


def ensemble_average(matrices: Sequence[Sequence[Sequence[float]]]) -> list[np.ndarray]:
    """Element-wise mean of per-dialogue probability (or score) rows over models."""
    if not matrices:
        raise ValueError("nothing to ensemble")
    first = matrices[0]
    for m, mat in enumerate(matrices[1:], start=1):
        if len(mat) != len(first):
            raise ValueError(f"model {m} has {len(mat)} dialogues, expected {len(first)}")
        for i, (row, ref) in enumerate(zip(mat, first)):
            if len(row) != len(ref):
                raise ValueError(f"model {m}, dialogue {i}: {len(row)} candidates, expected {len(ref)}")
    return [np.mean([np.asarray(mat[i], dtype=np.float64) for mat in matrices], axis=0)
            for i in range(len(first))]


# score files: JSON lines {"example_id", "scores", "probabilities"}

@dataclass
class ScoreRecord:
    example_id: str
    scores: list[float]
    probabilities: list[float]


def write_score_file(path, records: Iterable[ScoreRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"example_id": r.example_id, "scores": list(map(float, r.scores)),
                                 "probabilities": list(map(float, r.probabilities))}) + "\n")


def read_score_file(path) -> list[ScoreRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = ScoreRecord(str(d["example_id"]), [float(x) for x in d["scores"]],
                                  [float(x) for x in d["probabilities"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed score record ({exc})") from None
            if len(rec.scores) != len(rec.probabilities) or not rec.scores:
                raise DataError(f"{path}:{lineno}: scores/probabilities length mismatch")
            out.append(rec)
    return out
