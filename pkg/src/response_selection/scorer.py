"""Prediction and modification layers, plus the candidate cross-entropy loss."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import uniform_init


def init_mlp(prefix: str, in_dim: int, hidden: int, rng, dtype) -> list[Parameter]:
    return [
        Parameter(f"{prefix}.W1", uniform_init(rng, (in_dim, hidden), in_dim, dtype)),
        Parameter(f"{prefix}.b1", np.zeros(hidden, dtype=dtype)),
        Parameter(f"{prefix}.W2", uniform_init(rng, (hidden, 1), hidden, dtype)),
        Parameter(f"{prefix}.b2", np.zeros(1, dtype=dtype)),
    ]


def init_modification(prefix: str, width: int, dtype) -> list[Parameter]:
    return [
        Parameter(f"{prefix}.M", (0.1 * np.eye(width)).astype(dtype)),
        Parameter(f"{prefix}.w", np.zeros((), dtype=dtype)),
    ]


def mlp_score(f: Tensor, P: dict[str, Tensor], prefix: str = "mlp") -> Tensor:
    """One ReLU hidden layer and a linear scalar output: (batch, 8d) -> (batch,)."""
    W1 = P[f"{prefix}.W1"]
    if f.shape[-1] != W1.shape[0]:
        raise ad.ShapeError("mlp_score", [f.shape, W1.shape], "feature width mismatch")
    hidden = ad.relu(ad.add(ad.matmul(f, W1), P[f"{prefix}.b1"]))
    out = ad.add(ad.matmul(hidden, P[f"{prefix}.W2"]), P[f"{prefix}.b2"])
    return ad.reshape(out, out.shape[:-1])


def modification_score(u_last: Tensor, b_last: Tensor, M: Tensor, w: Tensor, s1: Tensor):
    """Bilinear score of the last context utterance against each candidate.

    ``u_last`` is (1, 2d) or (batch, 2d), ``b_last`` is (batch, 2d).
    Returns ``(s2, s)`` with ``s = s1 + w * s2``.
    """
    if u_last.shape[-1] != M.shape[0] or b_last.shape[-1] != M.shape[1]:
        raise ad.ShapeError("modification_score", [u_last.shape, M.shape, b_last.shape],
                            "bilinear width mismatch")
    s2 = ad.sum_(ad.mul(ad.matmul(u_last, M), b_last), axis=-1)
    return s2, ad.add(s1, ad.mul(w, s2))


def candidate_loss(scores: Tensor, label: int) -> Tensor:
    """-log softmax(scores)[label] over one dialogue's candidates."""
    n = scores.shape[-1]
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range for {n} candidates")
    return ad.sub(ad.logsumexp(scores, axis=-1), scores[label])


def softmax(scores: np.ndarray) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()
