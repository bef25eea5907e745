import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from response_selection.data import (DialogueExample, assemble_context, batches, corpus_ids,
                                     load_dataset, pad_batch, read_records, unpad)
from response_selection.embedding import EOU, PAD, UNK, build_vocab, tokenize
from response_selection.errors import DataError


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def record(eid="d1", n=2, label=1, **extra):
    rec = {"example_id": eid,
           "context": [{"speaker": "A", "text": "my wifi is broken"}, {"speaker": "B", "text": "which card?"}],
           "candidates": [f"answer number {k}" for k in range(n)]}
    if label is not None:
        rec["label"] = label
    rec.update(extra)
    return rec


@pytest.fixture
def vocab():
    return build_vocab([tokenize("my wifi is broken which card ? answer number 0 1 2")])


class TestLoadDataset:
    def test_single_record(self, tmp_path, vocab):
        [ex] = load_dataset(write_jsonl(tmp_path / "d.jsonl", [record()]), vocab)
        assert ex.example_id == "d1" and ex.label == 1
        assert len(ex.candidates) == 2
        assert ex.context_utterances[0] == ("A", vocab.encode(["my", "wifi", "is", "broken"]))
        assert ex.candidates[1] == vocab.encode(["answer", "number", "1"])

    def test_missing_label_is_inference(self, tmp_path, vocab):
        [ex] = load_dataset(write_jsonl(tmp_path / "d.jsonl", [record(label=None)]), vocab)
        assert ex.label is None

    def test_label_out_of_range(self, tmp_path, vocab):
        path = write_jsonl(tmp_path / "d.jsonl", [record(), record("d2", n=3, label=5)])
        with pytest.raises(DataError, match=r"d\.jsonl:2: label 5 out of range"):
            load_dataset(path, vocab)

    @pytest.mark.parametrize("bad", [
        "not json",
        json.dumps({"example_id": "x", "candidates": ["a"]}),
        json.dumps({"example_id": "x", "context": [], "candidates": ["a"]}),
        json.dumps({"example_id": "x", "context": [{"speaker": "A", "text": "a"}], "candidates": []}),
        json.dumps({"example_id": "x", "context": [{"speaker": "A", "text": "a"}], "candidates": ["a"],
                    "label": "0"}),
    ])
    def test_malformed_reports_line(self, tmp_path, vocab, bad):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps(record()) + "\n" + bad + "\n")
        with pytest.raises(DataError, match=":2:"):
            load_dataset(path, vocab)

    def test_order_preserving_and_deterministic(self, tmp_path, vocab):
        path = write_jsonl(tmp_path / "d.jsonl", [record(f"d{k}") for k in (3, 1, 2)])
        a, b = load_dataset(path, vocab), load_dataset(path, vocab)
        assert [e.example_id for e in a] == ["d3", "d1", "d2"]
        assert a == b

    def test_unknown_words_map_to_unk(self, tmp_path, vocab):
        rec = record(candidates=["zebra number"])
        rec["label"] = 0
        [ex] = load_dataset(write_jsonl(tmp_path / "d.jsonl", [rec]), vocab)
        assert ex.candidates[0] == [UNK, vocab.id("number")]

    def test_speaker_tokens(self, tmp_path):
        path = write_jsonl(tmp_path / "d.jsonl", [record()])
        from response_selection.data import record_sentences
        sents = record_sentences(read_records(path), speaker_tokens=True)
        v = build_vocab(sents)
        [ex] = load_dataset(path, v, speaker_tokens=True)
        assert ex.context_utterances[0][1][0] == v.id("<spk:a>")
        assert ex.context_utterances[1][1][0] == v.id("<spk:b>")


class TestAssembleContext:
    def test_two_utterances(self):
        ids, span = assemble_context([[3, 4, 5], [6, 7, 8]], 160)
        assert ids == [3, 4, 5, EOU, 6, 7, 8]
        assert span == (4, 7)

    def test_long_single_utterance(self):
        utt = list(range(3, 203))
        ids, span = assemble_context([utt], 160)
        assert ids == utt[-160:]
        assert span == (0, 160)

    def test_truncation_splits_earlier_utterance(self):
        # 5 + 1 + 4 = 10 tokens, keep the last 6: one token of u1, EOU, then u2
        ids, span = assemble_context([[10, 11, 12, 13, 14], [20, 21, 22, 23]], 6)
        assert ids == [14, EOU, 20, 21, 22, 23]
        assert span == (2, 6)

    def test_last_utterance_truncated_away(self):
        with pytest.raises(DataError):
            assemble_context([[3, 4], []], 5)

    def test_bad_max_len(self):
        with pytest.raises(ValueError):
            assemble_context([[3]], 0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.lists(st.integers(3, 50), min_size=0, max_size=8), min_size=1, max_size=6)
           .filter(lambda u: len(u[-1]) > 0), st.integers(1, 40))
    def test_length_bound_and_lossless(self, utts, max_len):
        full = []
        for k, u in enumerate(utts):
            full += ([EOU] if k else []) + u
        ids, (start, end) = assemble_context(utts, max_len)
        assert len(ids) <= max_len
        assert ids == full[-max_len:]
        assert 0 <= start < end == len(ids)
        assert ids[start:end] == utts[-1][-(end - start):]
        if len(full) <= max_len:
            assert ids == full and end - start == len(utts[-1])


def _ex(ctx, cands, label=0, eid="e"):
    return DialogueExample(eid, [("A", ctx)], cands, label)


class TestPadBatch:
    def test_single_example_own_length(self):
        b = pad_batch([_ex([3, 4, 5], [[6], [7, 8]])])
        assert b.context_ids.shape == (1, 3) and b.context_mask.all()
        assert b.candidate_ids.shape == (1, 2, 2)
        np.testing.assert_array_equal(b.candidate_mask[0], [[True, False], [True, True]])

    def test_lengths_three_and_five(self):
        b = pad_batch([_ex([3, 4, 5], [[6]]), _ex([3, 4, 5, 6, 7], [[6]])])
        assert b.context_ids.shape == (2, 5)
        np.testing.assert_array_equal(b.context_mask[0], [True, True, True, False, False])
        np.testing.assert_array_equal(b.context_ids[0, 3:], [PAD, PAD])
        assert b.context_mask[1].all()

    def test_candidate_cap_keeps_leading_tokens(self):
        b = pad_batch([_ex([3], [list(range(3, 13))])], max_candidate_len=4)
        np.testing.assert_array_equal(b.candidate_ids[0, 0], [3, 4, 5, 6])

    def test_ragged_candidate_counts_and_labels(self):
        b = pad_batch([_ex([3], [[4], [5], [6]], label=2), _ex([3], [[4]], label=None)])
        assert b.num_candidates.tolist() == [3, 1]
        assert b.labels.tolist() == [2, -1]
        assert not b.candidate_mask[1, 1:].any()
        assert b.dialogue(1).label is None and b.dialogue(1).num_candidates == 1

    def test_random_batch_mask_counts(self):
        rng = np.random.default_rng(0)
        exs = []
        for i in range(6):
            ctx = rng.integers(3, 30, size=int(rng.integers(1, 12))).tolist()
            cands = [rng.integers(3, 30, size=int(rng.integers(1, 9))).tolist()
                     for _ in range(int(rng.integers(1, 5)))]
            exs.append(_ex(ctx, cands, eid=str(i)))
        b = pad_batch(exs)
        for i, ex in enumerate(exs):
            assert b.context_mask[i].sum() == len(ex.context_utterances[0][1])
            for j, c in enumerate(ex.candidates):
                assert b.candidate_mask[i, j].sum() == len(c)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.lists(st.integers(3, 99), min_size=1, max_size=20),
                              st.lists(st.lists(st.integers(3, 99), min_size=1, max_size=10),
                                       min_size=1, max_size=4)),
                    min_size=1, max_size=5))
    def test_unpad_round_trip(self, items):
        exs = [_ex(ctx, cands, eid=str(k)) for k, (ctx, cands) in enumerate(items)]
        b = pad_batch(exs, max_context_len=1000, max_candidate_len=1000)
        ctxs, cands = unpad(b)
        assert ctxs == [ctx for ctx, _ in items]
        assert cands == [c for _, c in items]
        # masks are true exactly on non-PAD positions
        assert np.array_equal(b.context_mask, b.context_ids != PAD)
        assert np.array_equal(b.candidate_mask, b.candidate_ids != PAD)
        for s, m in zip(b.last_spans, b.context_mask):
            assert m[s[0]:s[1]].all()


def test_batches_cover_every_example_once():
    exs = [_ex([3 + k], [[4]], eid=str(k)) for k in range(7)]
    seen = [eid for b in batches(exs, 2, np.random.default_rng(0)) for eid in b.example_ids]
    assert sorted(seen) == sorted(e.example_id for e in exs)
    assert [len(b) for b in batches(exs, 2)] == [2, 2, 2, 1]


def test_corpus_ids_flattens_contexts_and_candidates():
    ex = DialogueExample("e", [("A", [3, 4]), ("B", [5])], [[6], [7, 8]], 0)
    assert corpus_ids([ex]) == [[3, 4, EOU, 5], [6], [7, 8]]
