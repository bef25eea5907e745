import numpy as np
import pytest

from response_selection.data import DialogueExample, DialogueInput, pad_batch
from response_selection.model import ModelConfig, ResponseSelector


def make_model(vocab=20, embed_dim=6, hidden=4, layers=2, mlp=8, seed=0, dtype="float64",
               randomize=True, **flags):
    """Tiny model; ``randomize`` perturbs every parameter so no gradient is trivially zero."""
    rng = np.random.default_rng(seed + 1000)
    emb = rng.normal(scale=0.8, size=(vocab, embed_dim))
    emb[0] = 0
    cfg = ModelConfig(hidden_dim=hidden, ahre_layers=layers, mlp_hidden=mlp, dtype=dtype, **flags)
    model = ResponseSelector(cfg, emb, seed=seed)
    if randomize:
        for p in model.params.values():
            p.value[...] = p.value + rng.normal(scale=0.3, size=p.shape)
        if "embedding" in model.params:
            model.params["embedding"].value[0] = 0
    return model


def make_input(rng, vocab=20, ctx_utts=(4, 3), n=3, cand_len=(2, 5), label=0, example_id="x"):
    utts = [("A" if k % 2 == 0 else "B", [int(t) for t in rng.integers(3, vocab, size=u)])
            for k, u in enumerate(ctx_utts)]
    cands = [[int(t) for t in rng.integers(3, vocab, size=int(rng.integers(*cand_len)))]
             for _ in range(n)]
    ex = DialogueExample(example_id, utts, cands, label)
    return ex, pad_batch([ex]).dialogue(0)


def pad_input(inp: DialogueInput, extra_ctx=0, extra_cand=0) -> DialogueInput:
    """Append masked PAD positions to the context and/or all candidates."""
    n, lr = inp.candidate_ids.shape
    ctx_ids = np.concatenate([inp.context_ids, np.zeros(extra_ctx, dtype=np.int64)])
    ctx_mask = np.concatenate([inp.context_mask, np.zeros(extra_ctx, dtype=bool)])
    cand_ids = np.concatenate([inp.candidate_ids, np.zeros((n, extra_cand), dtype=np.int64)], axis=1)
    cand_mask = np.concatenate([inp.candidate_mask, np.zeros((n, extra_cand), dtype=bool)], axis=1)
    return DialogueInput(inp.example_id, ctx_ids, ctx_mask, inp.last_span, cand_ids, cand_mask, inp.label)


def synthetic_dialogues(n_dialogues=8, n_candidates=4, vocab=60, seed=0):
    """Dialogues with distinct random token patterns and random gold positions."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_dialogues):
        utts = [("A", [int(t) for t in rng.integers(3, vocab, size=4)]),
                ("B", [int(t) for t in rng.integers(3, vocab, size=3)])]
        cands = [[int(t) for t in rng.integers(3, vocab, size=int(rng.integers(2, 5)))]
                 for _ in range(n_candidates)]
        out.append(DialogueExample(f"syn{i}", utts, cands, int(rng.integers(0, n_candidates))))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return make_model()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} [{status}] {title}: {detail}")
