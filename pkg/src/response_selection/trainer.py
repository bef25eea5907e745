"""Adam training loop with staircase learning-rate decay and dev-set model selection.

Checkpoint file layout::

    b"SQM1" | uint32 LE manifest length | JSON manifest | float32 LE payloads

The manifest lists parameter names and shapes in payload order, plus the
model config, vocabulary size, embedding width, step and dev metric.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Parameter, Tape
from .data import MAX_CANDIDATE_LEN, MAX_CONTEXT_LEN, DialogueExample, batches, pad_batch
from .errors import CheckpointError, NumericError
from .evalkit import MetricsReport, evaluate, rank_candidates
from .model import ModelConfig, ResponseSelector

log = logging.getLogger(__name__)

MAGIC = b"SQM1"


@dataclass
class TrainConfig:
    lr0: float = 0.001
    decay_rate: float = 0.96
    decay_steps: int = 5000
    batch_size: int = 2
    max_steps: int = 100000
    eval_every: int = 1000
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    max_context_len: int = MAX_CONTEXT_LEN
    max_candidate_len: int = MAX_CANDIDATE_LEN


def lr_at(step: int, config: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.lr0 * config.decay_rate ** (step // config.decay_steps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * np.asarray(scale, dtype=grads[name].dtype)
    return total


def adam_step(params: dict[str, Parameter], grads: dict[str, np.ndarray], step: int,
              config: TrainConfig) -> None:
    """One bias-corrected Adam update in place; ``step`` counts from 0."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {step}")
    lr = lr_at(step, config)
    t = step + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    for name, g in grads.items():
        p = params[name]
        p.adam_m[...] = b1 * p.adam_m + (1 - b1) * g
        p.adam_v[...] = b2 * p.adam_v + (1 - b2) * g * g
        m_hat = p.adam_m / (1 - b1 ** t)
        v_hat = p.adam_v / (1 - b2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        p.value[...] = p.value - update.astype(p.value.dtype)


def compute_gradients(model: ResponseSelector, dialogues) -> tuple[float, dict[str, np.ndarray]]:
    """Mean candidate cross-entropy over the dialogues and its parameter gradients."""
    tape = Tape()
    P = model.bind(tape)
    losses = [model.loss(P, d) for d in dialogues]
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    total = total * (1.0 / len(losses))
    value = float(total.data)
    if not math.isfinite(value):
        raise NumericError(f"loss became {value}")
    tape.backward(total)
    grads = {}
    for name, p in model.params.items():
        g = tape.grad(name)
        grads[name] = np.zeros_like(p.value) if g is None else g.astype(p.value.dtype, copy=False)
    for name, rows in model.frozen_rows.items():
        grads[name] = grads[name].copy()
        grads[name][rows] = 0
    return value, grads


def score_examples(model: ResponseSelector, examples: Sequence[DialogueExample],
                   max_context_len: int = MAX_CONTEXT_LEN,
                   max_candidate_len: int = MAX_CANDIDATE_LEN) -> list[np.ndarray]:
    out = []
    for ex in examples:
        inp = pad_batch([ex], max_context_len, max_candidate_len).dialogue(0)
        scores = model.score(inp)
        if not np.all(np.isfinite(scores)):
            raise NumericError(f"{ex.example_id}: non-finite scores")
        out.append(scores)
    return out


def evaluate_model(model: ResponseSelector, examples: Sequence[DialogueExample],
                   config: TrainConfig | None = None) -> tuple[MetricsReport, float]:
    """Ranking metrics and mean loss of ``model`` on labelled examples."""
    config = config or TrainConfig()
    scores = score_examples(model, examples, config.max_context_len, config.max_candidate_len)
    ranked = [rank_candidates(s, ex.label, ex.example_id) for s, ex in zip(scores, examples)]
    losses = []
    for s, ex in zip(scores, examples):
        z = s.astype(np.float64)
        m = z.max()
        losses.append(m + math.log(np.exp(z - m).sum()) - z[ex.label])
    return evaluate(ranked), float(np.mean(losses))


@dataclass
class TrainResult:
    model: ResponseSelector  # holds the best parameters
    best_step: int
    best_metric: float
    log: list[dict] = field(default_factory=list)
    final_train_loss: float | None = None


def snapshot(model: ResponseSelector) -> dict[str, np.ndarray]:
    return {n: p.value.copy() for n, p in model.params.items()}


def restore(model: ResponseSelector, values: dict[str, np.ndarray]) -> None:
    for n, v in values.items():
        model.params[n].value[...] = v


class TrainingDiverged(NumericError):
    def __init__(self, msg: str, result: TrainResult):
        super().__init__(msg)
        self.result = result


def train(model: ResponseSelector, train_set: Sequence[DialogueExample],
          dev_set: Sequence[DialogueExample], config: TrainConfig,
          log_fn: Callable[[dict], None] | None = None) -> TrainResult:
    """Train in place; on return the model holds the best dev-selected parameters."""
    if not train_set or not dev_set:
        raise ValueError("train and dev sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    records: list[dict] = []
    best = {"metric": -math.inf, "step": 0, "values": snapshot(model)}
    recent: list[float] = []

    def do_eval(step: int):
        report, dev_loss = evaluate_model(model, dev_set, config)
        rec = {
            "step": step,
            "lr": lr_at(step, config),
            "train_loss": float(np.mean(recent)) if recent else None,
            "dev_loss": dev_loss,
            "dev": report.to_dict(),
            "ahre_layer_weights": model.layer_weights(),
        }
        recent.clear()
        records.append(rec)
        if log_fn:
            log_fn(rec)
        log.info("step %d dev %s", step, report.to_dict())
        if report.selection_metric > best["metric"]:
            best.update(metric=report.selection_metric, step=step, values=snapshot(model))

    do_eval(0)
    step = 0
    try:
        while step < config.max_steps:
            for batch in batches(train_set, config.batch_size, rng,
                                 config.max_context_len, config.max_candidate_len):
                loss, grads = compute_gradients(model, list(batch.dialogues()))
                clip_by_global_norm(grads, config.clip_norm)
                adam_step(model.params, grads, step, config)
                recent.append(loss)
                step += 1
                if step % config.eval_every == 0 or step == config.max_steps:
                    do_eval(step)
                if step >= config.max_steps:
                    break
    except NumericError as exc:
        restore(model, best["values"])
        result = TrainResult(model, best["step"], best["metric"], records)
        raise TrainingDiverged(f"training diverged at step {step}: {exc}", result) from exc
    restore(model, best["values"])
    final = records[-1]["train_loss"] if records else None
    return TrainResult(model, best["step"], best["metric"], records, final)


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: ResponseSelector, path, step: int = 0, dev_metric: float | None = None,
                    extra: dict | None = None) -> None:
    names = list(model.params)
    manifest = {
        "format": "SQM1",
        "model_config": model.config.to_dict(),
        "vocab_size": model.vocab_size,
        "embed_dim": model.embed_dim,
        "step": step,
        "dev_metric": dev_metric,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].value, dtype="<f4").tobytes())


def _read_manifest(raw: bytes, path) -> tuple[dict, list[tuple[str, tuple[int, ...]]], int]:
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (mlen,) = struct.unpack("<I", raw[4:8])
    if 8 + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[8:8 + mlen].decode("utf-8"))
        entries = [(e["name"], tuple(int(x) for x in e["shape"])) for e in manifest["params"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    return manifest, entries, 8 + mlen


def _read_payloads(raw: bytes, path, entries, offset: int) -> dict[str, np.ndarray]:
    values = {}
    for name, shape in entries:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at parameter {name!r}")
        values[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return values


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    manifest, entries, offset = _read_manifest(raw, path)
    return manifest, _read_payloads(raw, path, entries, offset)


def load_checkpoint(path, embeddings: np.ndarray | None = None) -> tuple[ResponseSelector, dict]:
    """Rebuild a model from a checkpoint and the prepared embedding table.

    With trainable embeddings the table is stored in the checkpoint and
    ``embeddings`` may be omitted.
    """
    raw = Path(path).read_bytes()
    manifest, entries, offset = _read_manifest(raw, path)
    try:
        config = ModelConfig.from_dict(manifest["model_config"])
        vocab_size, embed_dim = int(manifest["vocab_size"]), int(manifest["embed_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config ({exc})") from None
    if embeddings is None:
        if not config.trainable_embeddings:
            raise CheckpointError(f"{path}: fixed-embedding checkpoint needs the prepared table")
        embeddings = np.zeros((vocab_size, embed_dim), dtype=np.float32)
    embeddings = np.asarray(embeddings)
    if embeddings.shape != (vocab_size, embed_dim):
        raise CheckpointError(
            f"{path}: checkpoint expects embeddings {(vocab_size, embed_dim)}, got {embeddings.shape}"
        )
    model = ResponseSelector(config, embeddings)
    expected = {n: p.shape for n, p in model.params.items()}
    listed = dict(entries)
    for name, shape in expected.items():
        if name not in listed:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if listed[name] != shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {listed[name]}, model expects {shape}"
            )
    for name in listed:
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected parameter {name!r}")
    for name, v in _read_payloads(raw, path, entries, offset).items():
        model.params[name].value[...] = v
    return model, manifest


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
