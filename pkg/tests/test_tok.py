import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edit_distill.tok import (
    NUM_SPECIALS,
    SPECIAL_TOKENS,
    UNK_ID,
    Vocab,
    build_vocab,
    decode,
    encode,
    tokenize_text,
)


def test_build_vocab_lexicographic_assignment():
    vocab = build_vocab(["a b", "b c"])
    assert vocab.token_to_id == {
        "<pad>": 0, "<bos>": 1, "<eos>": 2, "<sep>": 3, "<unk>": 4,
        "a": 5, "b": 6, "c": 7,
    }


def test_build_vocab_order_independent():
    v1 = build_vocab(["a b", "b c"])
    v2 = build_vocab(["b c", "a b"])
    assert v1.token_to_id == v2.token_to_id


def test_build_vocab_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocab([])


def test_encode_separates_punctuation():
    vocab = build_vocab(["Therefore, the answer is (B)."])
    seq = encode("Therefore, the answer is (B).", vocab)
    tokens = [vocab.id_to_token[i] for i in seq.ids]
    assert tokens == ["Therefore", ",", "the", "answer", "is", "(", "B", ")", "."]


def test_encode_empty_text():
    vocab = build_vocab(["a"])
    seq = encode("", vocab)
    assert len(seq) == 0


def test_encode_whitespace_normalization():
    vocab = build_vocab(["a b"])
    assert encode("a  b", vocab).ids == encode("a b", vocab).ids


def test_encode_unknown_maps_to_unk():
    vocab = build_vocab(["a"])
    seq = encode("a zzz", vocab)
    assert seq.ids[1] == UNK_ID


def test_spans_index_source_bytes():
    vocab = build_vocab(["ab cd,"])
    text = "ab  cd,"
    seq = encode(text, vocab)
    raw = text.encode("utf-8")
    rendered = [raw[s:e].decode() for s, e in seq.spans]
    assert rendered == ["ab", "cd", ","]
    # ordered, non-overlapping
    for (s1, e1), (s2, e2) in zip(seq.spans, seq.spans[1:]):
        assert s1 < e1 <= s2 < e2


def test_spans_utf8_bytes():
    vocab = build_vocab(["héllo wörld"])
    text = "héllo wörld"
    seq = encode(text, vocab)
    raw = text.encode("utf-8")
    assert [raw[s:e].decode() for s, e in seq.spans] == ["héllo", "wörld"]


def test_decode_simple():
    vocab = build_vocab(["a b"])
    assert decode([5, 6], vocab) == "a b"
    assert decode([], vocab) == ""


def test_decode_omits_specials():
    vocab = build_vocab(["a b"])
    assert decode([1, 5, 3, 6, 2], vocab) == "a b"


def test_decode_invalid_id():
    vocab = build_vocab(["a"])
    with pytest.raises(ValueError, match="invalid id"):
        decode([99], vocab)


def test_round_trip_spaced_form():
    texts = [
        "The final stack is \"< (\". Therefore, the answer is ) >.",
        "1: < ; stack: <",
        "a  b   c",
    ]
    vocab = build_vocab(texts)
    for text in texts:
        expected = " ".join(t for t, _, _ in tokenize_text(text))
        assert decode(encode(text, vocab).ids, vocab) == expected


@settings(max_examples=200)
@given(st.text(alphabet=st.characters(codec="utf-8", exclude_characters="\x00"),
               max_size=80))
def test_round_trip_property(text):
    corpus = [text] if text.strip() else ["x"]
    vocab = build_vocab(corpus + ["x"])
    seq = encode(text, vocab)
    expected = " ".join(t for t, _, _ in tokenize_text(text))
    assert decode(seq.ids, vocab) == expected


def test_encode_deterministic():
    vocab = build_vocab(["a b c d"])
    a = encode("a b c d", vocab)
    b = encode("a b c d", vocab)
    assert a.ids == b.ids and a.spans == b.spans


def test_vocab_save_load_round_trip(tmp_path):
    vocab = build_vocab(["a b", "c (d)"])
    path = tmp_path / "vocab.tsv"
    vocab.save(path)
    loaded = Vocab.load(path)
    assert loaded.token_to_id == vocab.token_to_id
    assert loaded.id_to_token == vocab.id_to_token
    first_lines = path.read_text().splitlines()[:NUM_SPECIALS]
    assert [l.split("\t")[1] for l in first_lines] == list(SPECIAL_TOKENS)


def test_specials_never_induced():
    # "<pad>" in raw text tokenizes as < pad > and cannot collide
    vocab = build_vocab(["<pad> <unk>"])
    assert "<pad>" not in list(vocab.id_to_token[NUM_SPECIALS:])
    seq = encode("<pad>", vocab)
    assert [vocab.id_to_token[i] for i in seq.ids] == ["<", "pad", ">"]
