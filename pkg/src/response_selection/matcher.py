"""Cross-attention matching between an encoded context and encoded candidates.

Shapes: the context side ``A`` is ``(1 or n, l_a, 2d)`` and broadcasts over
the ``n`` candidates ``B`` of shape ``(n, l_b, 2d)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import uniform_init


@dataclass
class AlignedPair:
    A: Tensor
    B: Tensor
    A_bar: Tensor  # (n, l_a, 2d): each context token as a mixture of candidate tokens
    B_bar: Tensor  # (n, l_b, 2d)
    e: Tensor  # (n, l_a, l_b) dot-product attention logits
    alpha: Tensor  # softmax of e over candidate positions
    beta: Tensor  # softmax of e over context positions


def _check_nonempty(mask: np.ndarray, side: str):
    if not np.asarray(mask, dtype=bool).any(axis=-1).all():
        raise ValueError(f"soft_align: {side} sequence is entirely padding")


def soft_align(A: Tensor, B: Tensor, mask_a: np.ndarray, mask_b: np.ndarray) -> AlignedPair:
    if A.shape[-1] != B.shape[-1]:
        raise ad.ShapeError("soft_align", [A.shape, B.shape], "feature widths differ")
    mask_a = np.asarray(mask_a, dtype=bool)
    mask_b = np.asarray(mask_b, dtype=bool)
    _check_nonempty(mask_a, "context")
    _check_nonempty(mask_b, "candidate")
    e = ad.matmul(A, ad.transpose(B, (0, 2, 1)))
    n, la, lb = e.shape
    over_b = np.broadcast_to(mask_b[:, None, :], (n, la, lb))
    over_a = np.broadcast_to(mask_a[:, :, None], (n, la, lb))
    alpha = ad.softmax_masked(e, over_b, axis=2)
    beta = ad.softmax_masked(e, over_a, axis=1)
    A_bar = ad.matmul(alpha, B)
    B_bar = ad.matmul(ad.transpose(beta, (0, 2, 1)), A)
    return AlignedPair(A, B, A_bar, B_bar, e, alpha, beta)


def enhance(X: Tensor, X_bar: Tensor) -> Tensor:
    """[X; X_bar; X - X_bar; X * X_bar] along the feature axis."""
    if X.shape != X_bar.shape:
        X = ad.broadcast(X, X_bar.shape)
    return ad.concat([X, X_bar, ad.sub(X, X_bar), ad.mul(X, X_bar)], axis=-1)


def init_pooling(prefix: str, width: int, rng, dtype) -> list[Parameter]:
    return [
        Parameter(f"{prefix}.W1", uniform_init(rng, (width, width), width, dtype)),
        Parameter(f"{prefix}.b1", np.zeros(width, dtype=dtype)),
        Parameter(f"{prefix}.W2", uniform_init(rng, (width, width), width, dtype)),
        Parameter(f"{prefix}.b2", np.zeros(width, dtype=dtype)),
    ]


def multidim_pool(V: Tensor, mask: np.ndarray, P: dict[str, Tensor], prefix: str) -> Tensor:
    """Attention pooling with a separate distribution over positions per feature.

    (batch, T, w) -> (batch, w).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("multidim_pool: empty sequence")
    hidden = ad.elu(ad.add(ad.matmul(V, P[f"{prefix}.W1"]), P[f"{prefix}.b1"]))
    logits = ad.add(ad.matmul(hidden, P[f"{prefix}.W2"]), P[f"{prefix}.b2"])
    weights = ad.softmax_masked(logits, np.broadcast_to(mask[:, :, None], logits.shape), axis=1)
    return ad.sum_(ad.mul(weights, V), axis=1)


def last_valid_index(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("last-state pooling over an empty sequence")
    return mask.shape[-1] - 1 - np.argmax(mask[..., ::-1], axis=-1)


def last_state(V: Tensor, mask: np.ndarray) -> Tensor:
    """Output vector at each row's last unmasked position: (batch, T, w) -> (batch, w)."""
    return state_at(V, last_valid_index(mask))


def state_at(V: Tensor, positions) -> Tensor:
    batch, steps, _ = V.shape
    positions = np.broadcast_to(np.asarray(positions), (batch,))
    onehot = np.zeros((batch, steps, 1), dtype=V.dtype)
    onehot[np.arange(batch), positions, 0] = 1
    return ad.sum_(ad.mul(V, onehot), axis=1)


def match_features(d_a: Tensor, d_b: Tensor, v_last_a: Tensor, v_last_b: Tensor) -> Tensor:
    """[d_a; d_b; v_last_a; v_last_b]; inputs (batch, 2d) -> (batch, 8d)."""
    parts = [d_a, d_b, v_last_a, v_last_b]
    batch = max(p.shape[0] for p in parts)
    parts = [p if p.shape[0] == batch else ad.broadcast(p, (batch,) + p.shape[1:]) for p in parts]
    return ad.concat(parts, axis=-1)


def legacy_pool(V: Tensor, mask: np.ndarray) -> Tensor:
    """Original ESIM pooling: [max over valid rows; mean over valid rows], (batch, 2*w)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("legacy_pool: empty sequence")
    dtype = V.dtype
    keep = mask[:, :, None].astype(dtype)
    penalty = (keep - 1) * dtype.type(ad.MASK_PENALTY)
    pooled_max = ad.max_(ad.add(V, penalty), axis=1)
    counts = mask.sum(axis=1, keepdims=True).astype(dtype)
    pooled_mean = ad.mul(ad.sum_(ad.mul(V, keep), axis=1), 1 / counts)
    return ad.concat([pooled_max, pooled_mean], axis=-1)
