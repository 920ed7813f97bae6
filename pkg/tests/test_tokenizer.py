import numpy as np
import pytest
from hypothesis import given, strategies as st

from retrorank.tokenizer import (
    BOS_ID,
    EmptyCorpus,
    EmptyString,
    PAD_ID,
    UNK_ID,
    Vocabulary,
    build_vocab,
    decode,
    encode,
    encode_batch,
)


def test_build_vocab_sorted_assignment():
    v = build_vocab(["CO", "OC"])
    assert v.char_to_id == {"C": 3, "O": 4}
    assert v.size == 5
    assert (PAD_ID, UNK_ID, BOS_ID) == (0, 1, 2)


def test_build_vocab_empty_corpus():
    with pytest.raises(EmptyCorpus):
        build_vocab([])


def test_build_vocab_deterministic():
    assert build_vocab(["A"]).char_to_id == build_vocab(["A"]).char_to_id
    a = build_vocab(["zyx", "abc"])
    b = build_vocab(["abc", "zyx"])
    assert a.char_to_id == b.char_to_id


def test_encode_basic():
    v = build_vocab(["CO", "OC"])
    t = encode(v, "CCO", 6)
    assert t.ids.tolist() == [2, 3, 3, 4, 0, 0]
    assert t.length == 4


def test_encode_unknown_maps_to_unk():
    v = build_vocab(["CO", "OC"])
    assert encode(v, "CXO", 6).ids.tolist() == [2, 3, 1, 4, 0, 0]


def test_encode_empty_string():
    v = build_vocab(["CO"])
    with pytest.raises(EmptyString):
        encode(v, "", 6)


def test_encode_truncates_prefix():
    v = build_vocab(["abc"])
    t = encode(v, "abcabc", 4)
    assert t.length == 4
    assert t.ids.tolist() == [BOS_ID, v.id_of("a"), v.id_of("b"), v.id_of("c")]


def test_no_pad_before_last_token():
    v = build_vocab(["ab"])
    ids = encode(v, "ab", 8).ids
    nonpad = np.flatnonzero(ids != PAD_ID)
    assert nonpad.tolist() == list(range(len(nonpad)))


@given(st.text(alphabet="abcXYZ[]0123456789.>", min_size=1, max_size=30))
def test_round_trip_without_unk_or_truncation(s):
    v = build_vocab([s])
    t = encode(v, s, max_len=64)
    assert decode(v, t.ids) == s


def test_encode_batch_width():
    v = build_vocab(["abcd"])
    batch = encode_batch(v, ["a", "abcd"], max_len=16)
    assert batch.shape == (2, 5)  # longest true length
    assert encode_batch(v, ["a"], 16, pad_to=10).shape == (1, 10)


def test_vocab_persistence_round_trip(tmp_path):
    v = build_vocab(["abc[1].x>>y"])
    path = tmp_path / "vocab.txt"
    v.save(path)
    loaded = Vocabulary.load(path)
    assert loaded.char_to_id == v.char_to_id
    text = path.read_text(encoding="utf-8")
    assert "\t" in text.splitlines()[0]
