"""Dataset reading, context assembly, truncation, padding and batching.

Dataset files are JSON lines, one dialogue per line::

    {"example_id": "d1",
     "context": [{"speaker": "A", "text": "..."}, ...],
     "candidates": ["...", "..."],
     "label": 0}

``label`` is optional (absent at inference time).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .embedding import EOU, PAD, Vocabulary, tokenize
from .errors import DataError

MAX_CONTEXT_LEN = 160
MAX_CANDIDATE_LEN = 40


@dataclass
class DialogueExample:
    example_id: str
    context_utterances: list[tuple[str, list[int]]]
    candidates: list[list[int]]
    label: int | None = None


def speaker_token(speaker: str) -> str:
    return f"<spk:{speaker.lower()}>"


def read_records(path) -> list[dict]:
    """Parse and validate the raw JSON-lines records (no tokenisation)."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON ({exc.msg})") from None
            _validate_record(rec, where)
            records.append(rec)
    return records


def _validate_record(rec, where: str) -> None:
    if not isinstance(rec, dict):
        raise DataError(f"{where}: record must be a JSON object")
    for key in ("example_id", "context", "candidates"):
        if key not in rec:
            raise DataError(f"{where}: missing field {key!r}")
    if not isinstance(rec["example_id"], str):
        raise DataError(f"{where}: example_id must be a string")
    ctx = rec["context"]
    if not isinstance(ctx, list) or not ctx:
        raise DataError(f"{where}: context must be a non-empty list")
    for turn in ctx:
        if not (isinstance(turn, dict) and isinstance(turn.get("text"), str)
                and isinstance(turn.get("speaker", ""), str)):
            raise DataError(f"{where}: context entries need string 'speaker' and 'text'")
    cands = rec["candidates"]
    if not isinstance(cands, list) or not cands or not all(isinstance(c, str) for c in cands):
        raise DataError(f"{where}: candidates must be a non-empty list of strings")
    label = rec.get("label")
    if label is not None:
        if isinstance(label, bool) or not isinstance(label, int):
            raise DataError(f"{where}: label must be an integer")
        if not 0 <= label < len(cands):
            raise DataError(f"{where}: label {label} out of range for {len(cands)} candidates")


def record_sentences(records: Sequence[dict], speaker_tokens: bool = False) -> list[list[str]]:
    """Token lists of every utterance and candidate, used for vocabulary building."""
    out = []
    for rec in records:
        for turn in rec["context"]:
            toks = tokenize(turn["text"])
            if speaker_tokens:
                toks = [speaker_token(turn.get("speaker", ""))] + toks
            out.append(toks)
        out.extend(tokenize(c) for c in rec["candidates"])
    return out


def to_example(rec: dict, vocab: Vocabulary, speaker_tokens: bool = False) -> DialogueExample:
    utterances = []
    for turn in rec["context"]:
        speaker = turn.get("speaker", "")
        toks = tokenize(turn["text"])
        if speaker_tokens:
            toks = [speaker_token(speaker)] + toks
        utterances.append((speaker, vocab.encode(toks)))
    candidates = [vocab.encode(tokenize(c)) for c in rec["candidates"]]
    return DialogueExample(rec["example_id"], utterances, candidates, rec.get("label"))


def load_dataset(path, vocab: Vocabulary, speaker_tokens: bool = False) -> list[DialogueExample]:
    return [to_example(r, vocab, speaker_tokens) for r in read_records(path)]


def corpus_ids(examples: Sequence[DialogueExample], max_context_len: int | None = None) -> list[list[int]]:
    """Id sequences for skip-gram training: each flattened context plus each candidate."""
    out = []
    for ex in examples:
        ids, _ = assemble_context([u for _, u in ex.context_utterances],
                                  max_context_len or 10 ** 9, allow_empty_last=True)
        out.append(ids)
        out.extend(c for c in ex.candidates if c)
    return out


def assemble_context(utterances: Sequence[Sequence[int]], max_len: int,
                     allow_empty_last: bool = False) -> tuple[list[int], tuple[int, int]]:
    """Join utterances with EOU separators and keep the trailing ``max_len`` ids.

    Returns the ids and the ``[start, end)`` span of the final utterance
    after truncation.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if not utterances:
        raise DataError("empty context")
    ids: list[int] = []
    for k, utt in enumerate(utterances):
        if k:
            ids.append(EOU)
        ids.extend(utt)
    end = len(ids)
    start = end - len(utterances[-1])
    drop = max(0, len(ids) - max_len)
    ids = ids[drop:]
    start, end = max(start - drop, 0), end - drop
    if start >= end and not allow_empty_last:
        raise DataError("last utterance is empty after truncation")
    return ids, (start, end)


@dataclass
class DialogueInput:
    """One dialogue in model-ready padded form."""

    example_id: str
    context_ids: np.ndarray  # (Lc,)
    context_mask: np.ndarray  # (Lc,) bool
    last_span: tuple[int, int]
    candidate_ids: np.ndarray  # (n, Lr)
    candidate_mask: np.ndarray  # (n, Lr) bool
    label: int | None = None

    @property
    def num_candidates(self) -> int:
        return self.candidate_ids.shape[0]


@dataclass
class PaddedBatch:
    example_ids: list[str]
    context_ids: np.ndarray  # (B, Lc)
    context_mask: np.ndarray
    candidate_ids: np.ndarray  # (B, N, Lr)
    candidate_mask: np.ndarray
    num_candidates: np.ndarray  # (B,)
    last_spans: np.ndarray  # (B, 2)
    labels: np.ndarray  # (B,), -1 where absent

    def __len__(self) -> int:
        return len(self.example_ids)

    def dialogue(self, b: int) -> DialogueInput:
        n = int(self.num_candidates[b])
        label = int(self.labels[b])
        return DialogueInput(
            self.example_ids[b],
            self.context_ids[b],
            self.context_mask[b],
            (int(self.last_spans[b, 0]), int(self.last_spans[b, 1])),
            self.candidate_ids[b, :n],
            self.candidate_mask[b, :n],
            None if label < 0 else label,
        )

    def dialogues(self) -> Iterator[DialogueInput]:
        return (self.dialogue(b) for b in range(len(self)))


def pad_batch(examples: Sequence[DialogueExample], max_context_len: int = MAX_CONTEXT_LEN,
              max_candidate_len: int = MAX_CANDIDATE_LEN) -> PaddedBatch:
    """Assemble/truncate every example and right-pad with PAD to the batch maxima."""
    contexts, spans, cands = [], [], []
    for ex in examples:
        ids, span = assemble_context([u for _, u in ex.context_utterances], max_context_len)
        contexts.append(ids)
        spans.append(span)
        cands.append([c[:max_candidate_len] for c in ex.candidates])
    B = len(examples)
    lc = max((len(c) for c in contexts), default=0)
    nmax = max((len(c) for c in cands), default=0)
    lr = max((len(r) for c in cands for r in c), default=0)
    ctx_ids = np.full((B, lc), PAD, dtype=np.int64)
    cand_ids = np.full((B, nmax, lr), PAD, dtype=np.int64)
    ctx_mask = np.zeros((B, lc), dtype=bool)
    cand_mask = np.zeros((B, nmax, lr), dtype=bool)
    for b in range(B):
        ctx_ids[b, :len(contexts[b])] = contexts[b]
        ctx_mask[b, :len(contexts[b])] = True
        for j, r in enumerate(cands[b]):
            cand_ids[b, j, :len(r)] = r
            cand_mask[b, j, :len(r)] = True
    labels = np.array([-1 if ex.label is None else ex.label for ex in examples], dtype=np.int64)
    return PaddedBatch(
        [ex.example_id for ex in examples], ctx_ids, ctx_mask, cand_ids, cand_mask,
        np.array([len(c) for c in cands], dtype=np.int64),
        np.array(spans, dtype=np.int64).reshape(B, 2), labels,
    )


def unpad(batch: PaddedBatch) -> tuple[list[list[int]], list[list[list[int]]]]:
    """Recover context and candidate id sequences from a batch via its masks."""
    ctxs = [batch.context_ids[b][batch.context_mask[b]].tolist() for b in range(len(batch))]
    cands = [
        [batch.candidate_ids[b, j][batch.candidate_mask[b, j]].tolist()
         for j in range(int(batch.num_candidates[b]))]
        for b in range(len(batch))
    ]
    return ctxs, cands


def batches(examples: Sequence[DialogueExample], batch_size: int, rng: np.random.Generator | None = None,
            max_context_len: int = MAX_CONTEXT_LEN, max_candidate_len: int = MAX_CANDIDATE_LEN
            ) -> Iterator[PaddedBatch]:
    """One pass over ``examples`` in (optionally shuffled) batches."""
    order = np.arange(len(examples))
    if rng is not None:
        rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        chunk = [examples[k] for k in order[i:i + batch_size]]
        yield pad_batch(chunk, max_context_len, max_candidate_len)
