from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asrmix import alignment as A
from asrmix import tokenizer as T
from asrmix.errors import InvalidInputError

CORPUS = ["the cat sat on the mat", "the dog sat", "a cat and a dog", "that hat"]


@pytest.fixture(scope="module")
def bpe():
    return T.train_bpe(CORPUS, 30)


def _pair_counts(words):
    counts = Counter()
    for w in words:
        counts.update(zip(w, w[1:]))
    return counts


def test_no_budget_means_no_merges():
    model = T.train_bpe(["aaab"], 2)
    assert model.merges == []
    assert {"a", "b"} <= set(model.vocab)


def test_first_merge_is_most_frequent_pair():
    # hand count: (a,a) twice, (a,b) once
    assert _pair_counts(["aaab"]).most_common(1) == [(("a", "a"), 2)]
    model = T.train_bpe(["aaab"], 3 + 1)
    assert model.merges[0] == ("a", "a")


def test_pair_merged_across_repeated_words():
    model = T.train_bpe(["ab ab"], 4)
    assert model.merges == [("a", "b")]
    assert "ab" in model.vocab and "▁ab" in model.vocab


def test_frequency_ties_break_lexicographically():
    # (b,c) and (x,y) both occur twice
    model = T.train_bpe(["xy bc xy bc"], 10)
    assert model.merges[0] == ("b", "c")


def test_train_rejects_empty_and_small_vocab():
    with pytest.raises(InvalidInputError):
        T.train_bpe([], 10)
    with pytest.raises(InvalidInputError):
        T.train_bpe(["abc"], 2)


def test_training_is_deterministic():
    assert T.train_bpe(CORPUS, 30).to_dict() == T.train_bpe(CORPUS, 30).to_dict()


def test_encode_empty(bpe):
    assert bpe.encode("") == ([], [])


def test_encode_applies_merge():
    model = T.train_bpe(["ab ab"], 4)
    ids, offsets = model.encode("ab")
    assert [model.vocab[i] for i in ids] == ["▁ab"]
    assert offsets == [(0, 2)]


def test_encode_char_only_model():
    model = T.train_bpe(["hi"], 2)
    ids, offsets = model.encode("hi")
    assert [model.vocab[i] for i in ids] == ["▁h", "i"]
    assert offsets == [(0, 1), (1, 2)]


def test_unknown_characters_fall_back_to_unk(bpe):
    ids, offsets = bpe.encode("cat zq")
    assert offsets[-2:] == [(4, 5), (5, 6)]
    assert ids[-1] == bpe.unk_id
    assert "�" in bpe.decode(ids)


def test_decode_examples(bpe):
    assert bpe.decode([]) == ""
    ab = T.train_bpe(["a b"], 2)
    assert ab.decode(ab.encode("a b")[0]) == "a b"
    with pytest.raises(InvalidInputError):
        bpe.decode([len(bpe.vocab)])


def test_project_labels_examples():
    assert T.project_labels([(0, 2)], [0, 0]) == [0]
    assert T.project_labels([(0, 2)], [0, 1]) == [1]
    assert T.project_labels([(0, 1), (1, 2)], [1, 0]) == [1, 0]
    with pytest.raises(InvalidInputError):
        T.project_labels([(0, 3)], [0, 0])


def test_model_json_round_trip(bpe, tmp_path):
    path = tmp_path / "bpe.json"
    bpe.save(path)
    loaded = T.BpeModel.load(path)
    assert loaded.to_dict() == bpe.to_dict()
    assert set(loaded.to_dict()) == {"vocab", "merges", "special"}
    assert loaded.encode("the cat") == bpe.encode("the cat")


known_text = st.text(alphabet="thecasdogn \t", max_size=40)


@settings(max_examples=200, deadline=None)
@given(known_text)
def test_offsets_partition_non_whitespace(text):
    model = T.train_bpe(CORPUS, 30)
    _, offsets = model.encode(text)
    covered = [k for s, e in offsets for k in range(s, e)]
    assert covered == sorted(set(covered))
    assert covered == [k for k, c in enumerate(text) if not c.isspace()]


@settings(max_examples=200, deadline=None)
@given(known_text)
def test_decode_inverts_encode(text):
    model = T.train_bpe(CORPUS, 30)
    assert model.decode(model.encode(text)[0]) == T.normalize(text)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=20), st.data())
def test_projection_is_monotone(mask, data):
    cuts = sorted(set(data.draw(st.lists(st.integers(0, len(mask)), max_size=6))) | {0, len(mask)})
    offsets = [(a, b) for a, b in zip(cuts, cuts[1:])]
    k = data.draw(st.integers(0, len(mask) - 1))
    before = T.project_labels(offsets, mask)
    after = T.project_labels(offsets, mask[:k] + [True] + mask[k + 1:])
    assert all(a >= b for a, b in zip(after, before))


def test_tokenize_utterance_labels():
    utt = A.label_utterance("u", "the cxt um sat", "the cat um sat", [(8, 10)])
    model = T.train_bpe(["the cat um sat", "the cat"], 12)
    ex = T.tokenize_utterance(model, utt)
    err_text = {utt.hypothesis[s:e] for (s, e), y in zip(ex.offsets, ex.error_labels) if y}
    dis_chars = {k for (s, e), f in zip(ex.offsets, ex.disfluency_flags) if f for k in range(s, e)}
    assert any("x" in t for t in err_text)
    assert dis_chars == {8, 9}
    assert len(ex.token_ids) == len(ex.error_labels) == len(ex.pad_mask)
