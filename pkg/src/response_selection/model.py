"""The full response selection network.

word vectors -> shared encoder (AHRE or a single BiLSTM) -> soft alignment
-> enhancement -> composition BiLSTM -> pooling -> MLP score, optionally
corrected by the bilinear last-utterance score.

The context is encoded once per dialogue; everything downstream of the
alignment runs batched over the dialogue's candidates.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .data import DialogueInput
from .embedding import PAD
from .encoder import ahre_encode, bilstm_forward, init_ahre, init_bilstm, layer_weights
from .matcher import (enhance, init_pooling, last_state, legacy_pool, match_features,
                      multidim_pool, soft_align, state_at)
from .scorer import candidate_loss, init_mlp, init_modification, mlp_score, modification_score

ENCODERS = ("ahre", "single")
POOLINGS = ("multidim", "legacy")


@dataclass
class ModelConfig:
    hidden_dim: int = 200
    ahre_layers: int = 3
    mlp_hidden: int = 256
    modification: bool = True
    encoder: str = "ahre"
    pooling: str = "multidim"
    trainable_embeddings: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.hidden_dim < 1 or self.ahre_layers < 1 or self.mlp_hidden < 1:
            raise ValueError("hidden_dim, ahre_layers and mlp_hidden must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class ResponseSelector:
    def __init__(self, config: ModelConfig, embeddings: np.ndarray, seed: int = 0):
        self.config = config
        dtype = np.dtype(config.dtype)
        self.dtype = dtype
        self.embeddings = np.asarray(embeddings, dtype=dtype)
        if self.embeddings.ndim != 2:
            raise ValueError("embedding table must be 2-D")
        rng = np.random.default_rng(seed)
        e = self.embeddings.shape[1]
        d = config.hidden_dim
        params: list[Parameter] = []
        if config.trainable_embeddings:
            params.append(Parameter("embedding", self.embeddings.copy()))
        if config.encoder == "ahre":
            params += init_ahre("encoder", e, d, config.ahre_layers, rng, dtype)
        else:
            params += init_bilstm("encoder.layer0", e, d, rng, dtype)
        params += init_bilstm("compose", 8 * d, d, rng, dtype)
        if config.pooling == "multidim":
            params += init_pooling("pool", 2 * d, rng, dtype)
        params += init_mlp("mlp", 8 * d, config.mlp_hidden, rng, dtype)
        params += init_modification("modification", 2 * d, dtype)
        self.params: dict[str, Parameter] = {}
        for p in params:
            if p.name in self.params:
                raise ValueError(f"duplicate parameter name {p.name}")
            self.params[p.name] = p

    # rows of trainable parameters that must never change
    @property
    def frozen_rows(self) -> dict[str, list[int]]:
        return {"embedding": [PAD]} if self.config.trainable_embeddings else {}

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def bind(self, tape: Tape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {name: Tensor(p.value) for name, p in self.params.items()}
        return {name: tape.watch(p) for name, p in self.params.items()}

    def embed(self, P: dict[str, Tensor], ids: np.ndarray) -> Tensor:
        if "embedding" in P:
            return ad.gather(P["embedding"], ids)
        return Tensor(self.embeddings[ids])

    def encode(self, P: dict[str, Tensor], x: Tensor, mask: np.ndarray) -> Tensor:
        if self.config.encoder == "ahre":
            return ahre_encode(x, mask, P, "encoder")
        return bilstm_forward(x, mask, P, "encoder.layer0")

    def forward(self, P: dict[str, Tensor], inp: DialogueInput) -> Tensor:
        """Scores of all candidates of one dialogue, shape (n,)."""
        ctx_mask = np.asarray(inp.context_mask, dtype=bool)
        cand_mask = np.asarray(inp.candidate_mask, dtype=bool)
        if not ctx_mask.any():
            raise ValueError(f"{inp.example_id}: empty context")
        if not cand_mask.any(axis=-1).all():
            raise ValueError(f"{inp.example_id}: empty candidate")
        n = cand_mask.shape[0]

        A = self.encode(P, self.embed(P, inp.context_ids[None]), ctx_mask[None])
        B = self.encode(P, self.embed(P, inp.candidate_ids), cand_mask)

        aligned = soft_align(A, B, ctx_mask[None], cand_mask)
        M_a = enhance(A, aligned.A_bar)
        M_b = enhance(B, aligned.B_bar)
        ctx_mask_n = np.broadcast_to(ctx_mask, (n, ctx_mask.shape[0]))
        V_a = bilstm_forward(M_a, ctx_mask_n, P, "compose")
        V_b = bilstm_forward(M_b, cand_mask, P, "compose")

        if self.config.pooling == "multidim":
            f = match_features(
                multidim_pool(V_a, ctx_mask_n, P, "pool"),
                multidim_pool(V_b, cand_mask, P, "pool"),
                last_state(V_a, ctx_mask_n),
                last_state(V_b, cand_mask),
            )
        else:
            f = ad.concat([legacy_pool(V_a, ctx_mask_n), legacy_pool(V_b, cand_mask)], axis=-1)
        s1 = mlp_score(f, P)
        if not self.config.modification:
            return s1

        start, end = inp.last_span
        if not (0 <= start < end <= ctx_mask.shape[0]) or not ctx_mask[end - 1]:
            raise ValueError(f"{inp.example_id}: last-utterance span {inp.last_span} not valid")
        u_last = state_at(A, end - 1)
        b_last = last_state(B, cand_mask)
        _, s = modification_score(u_last, b_last, P["modification.M"], P["modification.w"], s1)
        return s

    def loss(self, P: dict[str, Tensor], inp: DialogueInput) -> Tensor:
        if inp.label is None:
            raise ValueError(f"{inp.example_id}: no label")
        return candidate_loss(self.forward(P, inp), inp.label)

    def score(self, inp: DialogueInput) -> np.ndarray:
        """Inference-only scores (nothing is recorded)."""
        return self.forward(self.bind(None), inp).data.copy()

    def score_candidate(self, inp: DialogueInput, index: int) -> float:
        single = DialogueInput(inp.example_id, inp.context_ids, inp.context_mask, inp.last_span,
                               inp.candidate_ids[index:index + 1], inp.candidate_mask[index:index + 1])
        return float(self.score(single)[0])

    def layer_weights(self) -> list[float]:
        if self.config.encoder != "ahre":
            return [1.0]
        logits = self.params["encoder.layer_logits"].value.astype(np.float64)
        return [float(w) for w in layer_weights(Tensor(logits)).data]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].value).tobytes())
        return h.hexdigest()
