"""Multi-turn response selection with an enhanced ESIM matcher on a small numpy autodiff core."""

from .autodiff import Parameter, Tape, Tensor, check_gradients
from .data import DialogueExample, DialogueInput, load_dataset, pad_batch
from .embedding import EmbeddingTable, Vocabulary, build_vocab, combine_embeddings
from .evalkit import MetricsReport, evaluate, mrr, rank_candidates, recall_at_k
from .model import ModelConfig, ResponseSelector
from .trainer import TrainConfig, load_checkpoint, lr_at, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Parameter", "Tape", "Tensor", "check_gradients",
    "DialogueExample", "DialogueInput", "load_dataset", "pad_batch",
    "EmbeddingTable", "Vocabulary", "build_vocab", "combine_embeddings",
    "MetricsReport", "evaluate", "mrr", "rank_candidates", "recall_at_k",
    "ModelConfig", "ResponseSelector",
    "TrainConfig", "load_checkpoint", "lr_at", "save_checkpoint", "train",
]
