import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference
from conftest import make_input, make_model
from response_selection import autodiff as ad
from response_selection.autodiff import Tensor, check_gradients
from response_selection.data import DialogueExample, pad_batch
from response_selection.scorer import candidate_loss, init_mlp, mlp_score, modification_score, softmax


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def _mlp(in_dim=8, hidden=5, seed=0):
    plist = init_mlp("mlp", in_dim, hidden, np.random.default_rng(seed), np.float64)
    return {p.name: p.value for p in plist}


class TestMlp:
    def test_zero_params(self):
        vals = {k: np.zeros_like(v) for k, v in _mlp().items()}
        f = np.random.default_rng(0).normal(size=(3, 8))
        np.testing.assert_array_equal(mlp_score(T(f), {k: T(v) for k, v in vals.items()}).data, 0.0)

    def test_bias_only(self):
        vals = {k: np.zeros_like(v) for k, v in _mlp().items()}
        vals["mlp.b2"][...] = 1.25
        out = mlp_score(T(np.ones((2, 8))), {k: T(v) for k, v in vals.items()}).data
        np.testing.assert_array_equal(out, [1.25, 1.25])

    def test_direct_evaluation(self):
        rng = np.random.default_rng(1)
        vals = {k: rng.normal(size=v.shape) for k, v in _mlp().items()}
        f = rng.normal(size=8)
        hidden = [max(0.0, sum(f[i] * vals["mlp.W1"][i, j] for i in range(8)) + vals["mlp.b1"][j])
                  for j in range(5)]
        expected = sum(h * vals["mlp.W2"][j, 0] for j, h in enumerate(hidden)) + vals["mlp.b2"][0]
        out = mlp_score(T(f[None]), {k: T(v) for k, v in vals.items()}).data
        assert out[0] == pytest.approx(expected, abs=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ad.ShapeError):
            mlp_score(T(np.ones((1, 7))), {k: T(v) for k, v in _mlp().items()})


class TestModification:
    def test_identity_unit_vectors(self):
        e1 = np.array([[1.0, 0.0, 0.0]])
        s2, s = modification_score(T(e1), T(e1), T(np.eye(3)), T(np.array(2.0)), T([0.5]))
        assert s2.data[0] == 1.0 and s.data[0] == 2.5

    def test_zero_weight_passes_s1_through(self):
        rng = np.random.default_rng(2)
        s1 = rng.normal(size=3)
        _, s = modification_score(T(rng.normal(size=(1, 4))), T(rng.normal(size=(3, 4))),
                                  T(rng.normal(size=(4, 4))), T(np.array(0.0)), T(s1))
        np.testing.assert_array_equal(s.data, s1)

    def test_double_loop(self):
        rng = np.random.default_rng(3)
        u, b, M = rng.normal(size=4), rng.normal(size=4), rng.normal(size=(4, 4))
        expected = sum(u[i] * M[i, j] * b[j] for i in range(4) for j in range(4))
        s2, _ = modification_score(T(u[None]), T(b[None]), T(M), T(np.array(1.0)), T([0.0]))
        assert s2.data[0] == pytest.approx(expected, abs=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ad.ShapeError):
            modification_score(T(np.ones((1, 3))), T(np.ones((1, 4))), T(np.eye(4)), T(np.array(1.0)), T([0.0]))


class TestLoss:
    def test_uniform(self):
        assert candidate_loss(T(np.full(4, 0.3)), 2).item() == pytest.approx(math.log(4), abs=1e-12)
        assert candidate_loss(T(np.full(4, 0.3)), 2).item() == pytest.approx(1.38629, abs=1e-5)

    def test_saturated(self):
        assert candidate_loss(T([0.0, 1000.0, 0.0]), 1).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        expected = math.log(math.e + math.e ** 2 + math.e ** 3) - 3
        assert candidate_loss(T([1.0, 2.0, 3.0]), 2).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.40761, abs=1e-5)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            candidate_loss(T([1.0, 2.0]), 2)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.data(), st.floats(-100, 100))
    def test_softmax_properties(self, scores, data, shift):
        label = data.draw(st.integers(0, len(scores) - 1))
        s = np.array(scores)
        assert candidate_loss(T(s), label).item() >= -1e-12
        p = softmax(s)
        assert abs(p.sum() - 1) <= 1e-6
        np.testing.assert_allclose(softmax(s + shift), p, atol=1e-6)
        ranked_p = np.lexsort((np.arange(len(s)), -p))
        ranked_s = np.lexsort((np.arange(len(s)), -s))
        # ties in p that are not ties in s can only appear for near-equal scores
        if len(set(np.round(s, 6))) == len(s):
            np.testing.assert_array_equal(ranked_p, ranked_s)


# ---------------------------------------------------------------------------
# whole model

def test_identical_candidates_identical_scores():
    model = make_model(dtype="float32", randomize=False)
    ex = DialogueExample("x", [("A", [3, 4, 5]), ("B", [6, 7])], [[8, 9, 10], [8, 9, 10], [11]], 0)
    s = model.score(pad_batch([ex]).dialogue(0))
    assert s[0] == s[1]


@pytest.mark.parametrize("flags", [
    {},
    {"modification": False},
    {"encoder": "single", "layers": 1},
    {"pooling": "legacy"},
    {"trainable_embeddings": True},
])
def test_matches_step_by_step_trace(flags):
    model = make_model(seed=3, **flags)
    ex = DialogueExample("t", [("A", [5]), ("B", [9])], [[4, 7, 12], [15, 3]], 1)
    inp = pad_batch([ex]).dialogue(0)  # context: 5 <eou> 9
    scores = model.score(inp)
    for j, cand in enumerate(ex.candidates):
        expected = reference.score(model, inp.context_ids.tolist(), inp.last_span[0], cand)
        assert scores[j] == pytest.approx(expected, abs=1e-8)
        assert model.score_candidate(inp, j) == pytest.approx(expected, abs=1e-8)


def test_two_token_context_trace():
    model = make_model(seed=8)
    ex = DialogueExample("t", [("A", [6, 11])], [[4], [7, 8]], 0)
    inp = pad_batch([ex]).dialogue(0)
    for j, cand in enumerate(ex.candidates):
        expected = reference.score(model, [6, 11], 0, cand)
        assert model.score(inp)[j] == pytest.approx(expected, abs=1e-8)


def test_w_zero_matches_modification_off():
    model = make_model(seed=5)
    _, inp = make_input(np.random.default_rng(5))
    model.params["modification.w"].value[...] = 0.0
    on = model.score(inp)
    model.config.modification = False
    off = model.score(inp)
    np.testing.assert_allclose(on, off, atol=1e-12)


def test_empty_context_or_candidate_errors():
    model = make_model()
    _, inp = make_input(np.random.default_rng(0))
    inp.candidate_mask[1] = False
    with pytest.raises(ValueError, match="empty candidate"):
        model.score(inp)
    _, inp = make_input(np.random.default_rng(0))
    inp.context_mask[:] = False
    with pytest.raises(ValueError, match="empty context"):
        model.score(inp)


def test_full_pipeline_gradients_toy():
    """Loss through every layer on a d=4, L=2 model."""
    model = make_model(vocab=20, hidden=4, layers=2, seed=6)
    _, inp = make_input(np.random.default_rng(6), vocab=20, ctx_utts=(5, 4), n=3, label=1)
    report = check_gradients(lambda P: model.loss(P, inp), list(model.params.values()),
                             tol=1e-4, max_entries=25)
    assert report.passed, str(report)
