"""BiLSTM layers and the attentive hierarchical recurrent encoder (AHRE).

All sequence tensors are batch-major: ``(batch, time, features)``; masks are
boolean ``(batch, time)`` arrays, true on real tokens.  Masked steps neither
emit output (zeros) nor advance the recurrent state, so masks may sit
anywhere in the sequence, not only at the tail.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

GATES = 4  # input, forget, cell, output


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    k = np.sqrt(1.0 / fan_in)
    return rng.uniform(-k, k, size=shape).astype(dtype)


def init_lstm_direction(prefix: str, in_dim: int, hidden: int, rng, dtype) -> list[Parameter]:
    bias = np.zeros(GATES * hidden, dtype=dtype)
    bias[hidden:2 * hidden] = 1.0  # forget gate
    return [
        Parameter(f"{prefix}.W_x", uniform_init(rng, (in_dim, GATES * hidden), in_dim, dtype)),
        Parameter(f"{prefix}.W_h", uniform_init(rng, (hidden, GATES * hidden), hidden, dtype)),
        Parameter(f"{prefix}.b", bias),
    ]


def init_bilstm(prefix: str, in_dim: int, hidden: int, rng, dtype) -> list[Parameter]:
    return (init_lstm_direction(f"{prefix}.fw", in_dim, hidden, rng, dtype)
            + init_lstm_direction(f"{prefix}.bw", in_dim, hidden, rng, dtype))


def init_ahre(prefix: str, in_dim: int, hidden: int, n_layers: int, rng, dtype) -> list[Parameter]:
    if n_layers < 1:
        raise ValueError("AHRE needs at least one layer")
    params = []
    for layer in range(n_layers):
        params += init_bilstm(f"{prefix}.layer{layer}", in_dim if layer == 0 else 2 * hidden,
                              hidden, rng, dtype)
    params.append(Parameter(f"{prefix}.layer_logits", np.zeros(n_layers, dtype=dtype)))
    return params


def lstm_direction(x: Tensor, mask: np.ndarray, W_x: Tensor, W_h: Tensor, b: Tensor,
                   reverse: bool = False) -> Tensor:
    """Run one LSTM direction over ``x`` (batch, T, in); returns (batch, T, hidden)."""
    batch, steps, _ = x.shape
    hidden = W_h.shape[0]
    dtype = x.dtype
    xw = ad.add(ad.matmul(x, W_x), b)  # input projections for all steps at once
    h = Tensor(np.zeros((batch, hidden), dtype=dtype))
    c = Tensor(np.zeros((batch, hidden), dtype=dtype))
    outputs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        m = mask[:, t]
        if not m.any():
            outputs[t] = Tensor(np.zeros((batch, hidden), dtype=dtype))
            continue
        gates = ad.add(xw[:, t, :], ad.matmul(h, W_h))
        i = ad.sigmoid(gates[:, :hidden])
        f = ad.sigmoid(gates[:, hidden:2 * hidden])
        g = ad.tanh(gates[:, 2 * hidden:3 * hidden])
        o = ad.sigmoid(gates[:, 3 * hidden:])
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        if m.all():
            h, c = h_new, c_new
            outputs[t] = h_new
        else:
            keep = m[:, None].astype(dtype)
            hold = 1 - keep
            h = ad.add(ad.mul(h_new, keep), ad.mul(h, hold))
            c = ad.add(ad.mul(c_new, keep), ad.mul(c, hold))
            outputs[t] = ad.mul(h_new, keep)
    return ad.stack(outputs, axis=1)


def bilstm_forward(seq: Tensor, mask: np.ndarray, P: dict[str, Tensor], prefix: str) -> Tensor:
    """Bidirectional LSTM: (batch, T, in) -> (batch, T, 2*hidden), forward ⊕ backward."""
    in_dim = P[f"{prefix}.fw.W_x"].shape[0]
    if seq.shape[-1] != in_dim:
        raise ad.ShapeError("bilstm", [seq.shape, P[f"{prefix}.fw.W_x"].shape],
                            f"{prefix} expects input width {in_dim}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != seq.shape[:2]:
        raise ad.ShapeError("bilstm", [seq.shape, mask.shape], "mask must be (batch, time)")
    fw = lstm_direction(seq, mask, P[f"{prefix}.fw.W_x"], P[f"{prefix}.fw.W_h"], P[f"{prefix}.fw.b"])
    bw = lstm_direction(seq, mask, P[f"{prefix}.bw.W_x"], P[f"{prefix}.bw.W_h"], P[f"{prefix}.bw.b"],
                        reverse=True)
    return ad.concat([fw, bw], axis=-1)


def layer_weights(logits) -> Tensor:
    """Softmax-normalised mixing weights of the AHRE layers."""
    return ad.softmax_masked(logits, None, axis=-1)


def ahre_layers(P: dict[str, Tensor], prefix: str) -> int:
    return P[f"{prefix}.layer_logits"].shape[0]


def ahre_encode(seq: Tensor, mask: np.ndarray, P: dict[str, Tensor], prefix: str) -> Tensor:
    """Stack of BiLSTMs whose per-layer outputs are mixed by learned softmax weights."""
    weights = layer_weights(P[f"{prefix}.layer_logits"])
    out = None
    x = seq
    for layer in range(ahre_layers(P, prefix)):
        x = bilstm_forward(x, mask, P, f"{prefix}.layer{layer}")
        term = ad.mul(x, weights[layer])
        out = term if out is None else ad.add(out, term)
    return out
