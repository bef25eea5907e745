"""Command-line interface: prepare, train, predict, eval.

Configuration is one flat JSON object (``--config``) plus ``key=value``
overrides; values are parsed as JSON when possible, else kept as strings.
Unknown keys are rejected.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .data import corpus_ids, load_dataset, read_records, record_sentences
from .embedding import (EmbeddingTable, Vocabulary, build_vocab, combine_embeddings,
                        general_coverage, load_embedding_file, train_task_embeddings)
from .errors import ConfigError, DataError, NumericError
from .evalkit import (ScoreRecord, ensemble_average, evaluate, rank_candidates, read_score_file,
                      write_score_file)
from .model import ModelConfig, ResponseSelector
from .scorer import softmax
from .trainer import (TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint,
                      score_examples, train)

log = logging.getLogger("response_selection")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS: dict = {
    # files
    "train_path": None,
    "dev_path": None,
    "general_embeddings_path": None,
    "vocab_path": "vocab.txt",
    "embeddings_path": "embeddings.npy",
    "checkpoint_path": "model.ckpt",
    "log_path": "train_log.jsonl",
    # vocabulary / word vectors
    "min_count": 1,
    "general_dim": 300,
    "task_dim": 100,
    "w2v_window": 5,
    "w2v_negatives": 5,
    "w2v_epochs": 5,
    "w2v_lr": 0.025,
    "speaker_tokens": False,
    # data
    "max_context_len": 160,
    "max_candidate_len": 40,
    "batch_size": 2,
    # model
    "hidden_dim": 200,
    "ahre_layers": 3,
    "mlp_hidden": 256,
    "modification": True,
    "encoder": "ahre",
    "pooling": "multidim",
    "trainable_embeddings": False,
    # optimisation
    "lr": 0.001,
    "decay_rate": 0.96,
    "decay_steps": 5000,
    "max_steps": 100000,
    "eval_every": 1000,
    "seed": 0,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "clip_norm": 10.0,
    # evaluation
    "recall_ks": [1, 2, 5, 10, 50],
    "ensemble_mode": "probabilities",
}

_PATH_KEYS = {k for k in DEFAULTS if k.endswith("_path")}


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if key in _PATH_KEYS:
        if value is None or isinstance(value, str):
            return value
    elif isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, list):
        if isinstance(value, list) and all(isinstance(v, int) for v in value):
            return value
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    raise ConfigError(f"config key {key!r}: invalid value {value!r}")


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = dict(DEFAULTS)
    given: dict = {}
    if path:
        try:
            given.update(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(given, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            given[key] = json.loads(raw)
        except json.JSONDecodeError:
            given[key] = raw
    for key, value in given.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    if cfg["encoder"] not in ("ahre", "single") or cfg["pooling"] not in ("multidim", "legacy"):
        raise ConfigError("encoder must be ahre|single and pooling multidim|legacy")
    if cfg["ensemble_mode"] not in ("probabilities", "scores"):
        raise ConfigError("ensemble_mode must be probabilities|scores")
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        hidden_dim=cfg["hidden_dim"],
        ahre_layers=1 if cfg["encoder"] == "single" else cfg["ahre_layers"],
        mlp_hidden=cfg["mlp_hidden"],
        modification=cfg["modification"],
        encoder=cfg["encoder"],
        pooling=cfg["pooling"],
        trainable_embeddings=cfg["trainable_embeddings"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr0=cfg["lr"], decay_rate=cfg["decay_rate"], decay_steps=cfg["decay_steps"],
        batch_size=cfg["batch_size"], max_steps=cfg["max_steps"], eval_every=cfg["eval_every"],
        seed=cfg["seed"], adam_beta1=cfg["adam_beta1"], adam_beta2=cfg["adam_beta2"],
        adam_eps=cfg["adam_eps"], clip_norm=cfg["clip_norm"],
        max_context_len=cfg["max_context_len"], max_candidate_len=cfg["max_candidate_len"],
    )


def _require(cfg: dict, key: str) -> str:
    if not cfg[key]:
        raise ConfigError(f"config key {key!r} is required for this command")
    return cfg[key]


def _load_artifacts(cfg: dict) -> tuple[Vocabulary, EmbeddingTable]:
    try:
        vocab = Vocabulary.load(cfg["vocab_path"])
    except OSError as exc:
        raise DataError(f"cannot read vocabulary: {exc}") from None
    table = EmbeddingTable.load(cfg["embeddings_path"], cfg["general_dim"], cfg["task_dim"])
    if table.matrix.shape[0] != len(vocab):
        raise DataError(f"embedding table has {table.matrix.shape[0]} rows, vocabulary {len(vocab)}")
    return vocab, table


def cmd_prepare(cfg: dict) -> int:
    train_path = _require(cfg, "train_path")
    try:
        records = read_records(train_path)
    except OSError as exc:
        raise DataError(f"cannot read training corpus: {exc}") from None
    vocab = build_vocab(record_sentences(records, cfg["speaker_tokens"]), cfg["min_count"])
    general = {}
    if cfg["general_embeddings_path"]:
        try:
            general = load_embedding_file(cfg["general_embeddings_path"], cfg["general_dim"])
        except OSError as exc:
            raise DataError(f"cannot read general embeddings: {exc}") from None
    examples = load_dataset(train_path, vocab, cfg["speaker_tokens"])
    task = train_task_embeddings(
        corpus_ids(examples), vocab, cfg["task_dim"], cfg["w2v_window"], cfg["w2v_negatives"],
        cfg["w2v_epochs"], cfg["seed"], cfg["w2v_lr"],
    )
    table = combine_embeddings(vocab, general, task, cfg["general_dim"], cfg["task_dim"])
    vocab.save(cfg["vocab_path"])
    table.save(cfg["embeddings_path"])
    coverage = general_coverage(vocab, general)
    print(json.dumps({"vocab_size": len(vocab), "general_coverage": coverage,
                      "embedding_dim": table.dim}))
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    vocab, table = _load_artifacts(cfg)
    train_set = load_dataset(_require(cfg, "train_path"), vocab, cfg["speaker_tokens"])
    dev_set = load_dataset(_require(cfg, "dev_path"), vocab, cfg["speaker_tokens"])
    for name, split in (("train", train_set), ("dev", dev_set)):
        if not split:
            raise DataError(f"{name} split is empty")
        if any(ex.label is None for ex in split):
            raise DataError(f"{name} split has unlabelled dialogues")
    model = ResponseSelector(model_config(cfg), table.matrix, seed=cfg["seed"])
    tcfg = train_config(cfg)
    log_path = Path(cfg["log_path"])
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config": cfg}, sort_keys=True) + "\n")

        def emit(rec: dict):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        try:
            result = train(model, train_set, dev_set, tcfg, log_fn=emit)
        except TrainingDiverged as exc:
            r = exc.result
            save_checkpoint(r.model, cfg["checkpoint_path"], r.best_step, r.best_metric)
            print(f"error: {exc}; kept checkpoint from step {r.best_step}", file=sys.stderr)
            return EXIT_NUMERIC
    save_checkpoint(result.model, cfg["checkpoint_path"], result.best_step, result.best_metric)
    summary = dict(result.log[-1]) if result.log else {}
    summary["best_step"] = result.best_step
    summary["best_metric"] = result.best_metric
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_predict(cfg: dict, checkpoints: list[str], data_path: str, output: str) -> int:
    vocab, table = _load_artifacts(cfg)
    examples = load_dataset(data_path, vocab, cfg["speaker_tokens"])
    all_scores, all_probs = [], []
    for ckpt in checkpoints:
        try:
            model, _ = load_checkpoint(ckpt, table.matrix)
        except OSError as exc:
            raise DataError(f"cannot read checkpoint: {exc}") from None
        scores = score_examples(model, examples, cfg["max_context_len"], cfg["max_candidate_len"])
        all_scores.append(scores)
        all_probs.append([softmax(s) for s in scores])
    mean_scores = ensemble_average(all_scores)
    mean_probs = ensemble_average(all_probs)
    write_score_file(output, (ScoreRecord(ex.example_id, s.tolist(), p.tolist())
                              for ex, s, p in zip(examples, mean_scores, mean_probs)))
    return EXIT_OK


def cmd_eval(cfg: dict, score_paths: list[str], data_path: str) -> int:
    records = read_records(data_path)
    files = [read_score_file(p) for p in score_paths]
    for path, recs in zip(score_paths, files):
        if len(recs) != len(records):
            raise DataError(f"{path}: {len(recs)} records, dataset has {len(records)}")
        for i, (sr, dr) in enumerate(zip(recs, records)):
            if sr.example_id != dr["example_id"]:
                raise DataError(f"{path}: record {i} has id {sr.example_id!r}, "
                                f"dataset has {dr['example_id']!r}")
            if len(sr.scores) != len(dr["candidates"]):
                raise DataError(f"{path}: record {i} has {len(sr.scores)} scores, "
                                f"dataset has {len(dr['candidates'])} candidates")
    for i, dr in enumerate(records):
        if dr.get("label") is None:
            raise DataError(f"{data_path}: dialogue {dr['example_id']!r} has no label")
    field = "probabilities" if cfg["ensemble_mode"] == "probabilities" else "scores"
    combined = ensemble_average([[getattr(r, field) for r in recs] for recs in files])
    ranked = [rank_candidates(row, dr["label"], dr["example_id"]) for row, dr in zip(combined, records)]
    report = evaluate(ranked, cfg["recall_ks"])
    print(report.to_json())
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="response-select", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("overrides", nargs="*", metavar="key=value")

    common(sub.add_parser("prepare", help="build vocabulary and word-vector table"))
    common(sub.add_parser("train", help="train and keep the best dev checkpoint"))
    p = sub.add_parser("predict", help="score candidates; several checkpoints are averaged")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--output", required=True)
    common(p)
    p = sub.add_parser("eval", help="R@k / MRR report; several score files are ensembled")
    p.add_argument("--data", required=True)
    p.add_argument("--scores", nargs="+", required=True)
    common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "predict":
            return cmd_predict(cfg, args.checkpoint, args.data, args.output)
        return cmd_eval(cfg, args.scores, args.data)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
