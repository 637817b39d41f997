import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from playfusion.errors import ShapeError, VocabularyError
from playfusion.goals import (GoalConfig, GoalEncoder, Vocabulary, build_vocabulary,
                              embed_instruction, encode_state, idf_weights, language_table,
                              pad_window, sentence_features)
from playfusion.quantizer import Codebook

OBJ = ("carrot", "bread", "cup")
CONT = ("pan", "toaster", "pot")


def test_vocabulary_layout_and_roundtrip(tmp_path):
    v = build_vocabulary(OBJ, CONT, n_paraphrases=3)
    assert len(v) == 27
    for i in range(len(v)):
        o, c = v.task_of(i)
        assert i // 3 == o * 3 + c
        assert OBJ[o] in v[i].text and CONT[c] in v[i].text
    assert v.ids_for_task((1, 2)) == [15, 16, 17]
    p = tmp_path / "vocab.txt"
    v.save(p)
    w = Vocabulary.load(p, OBJ, CONT)
    assert w.lines() == v.lines()
    assert [w.task_of(i) for i in range(27)] == [v.task_of(i) for i in range(27)]


@pytest.mark.parametrize("bad", [-1, 27, 100])
def test_unknown_instruction(bad):
    v = build_vocabulary(OBJ, CONT)
    with pytest.raises(VocabularyError):
        v.task_of(bad)


def test_bad_paraphrase_count_and_unparseable_text():
    with pytest.raises(VocabularyError):
        build_vocabulary(OBJ, CONT, n_paraphrases=0)
    with pytest.raises(VocabularyError):
        Vocabulary.from_lines(["0\tput the spoon in the pan"], OBJ, CONT)


def test_language_features_are_deterministic_and_distinct():
    v = build_vocabulary(OBJ, CONT)
    a = language_table(v, 16)
    b = language_table(build_vocabulary(OBJ, CONT), 16)
    np.testing.assert_array_equal(a, b)
    assert len({tuple(np.round(r, 12)) for r in a}) == len(v)


def test_idf_drops_shared_words():
    texts = ["put the carrot in the pan", "put the cup in the pot"]
    w = idf_weights(texts)
    assert w["the"] == 0.0 and w["put"] == 0.0
    assert w["carrot"] == pytest.approx(np.log(2))
    f = sentence_features(texts[0], 8, w)
    ref = (sentence_features("carrot", 8) + sentence_features("pan", 8)) / 2
    np.testing.assert_allclose(f, ref, rtol=1e-12)
    # all-zero weights fall back to the plain mean
    np.testing.assert_allclose(sentence_features("the the", 8, w),
                               sentence_features("the", 8), rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 6), T_o=st.integers(1, 5))
def test_pad_window(n, T_o):
    h = np.arange(n * 3, dtype=float).reshape(n, 3)
    w = pad_window(h, T_o)
    assert w.shape == (T_o, 3)
    np.testing.assert_array_equal(w[-min(n, T_o):], h[-min(n, T_o):])
    if n < T_o:
        assert np.all(w[:T_o - n] == h[0])


def test_pad_window_empty():
    with pytest.raises(ShapeError):
        pad_window(np.zeros((0, 3)), 2)


def _encoder(quant=True):
    cfg = GoalConfig(lang_feat_dim=8, lang_dim=4, state_dim=5, T_o=2, state_hidden=6,
                     state_out=3, lang_hidden=7, codebook_size=6)
    enc = GoalEncoder(cfg)
    p = {}
    enc.init(p, np.random.default_rng(0), with_codebook=quant)
    return enc, p


def test_goal_vector_shapes_and_codebook_snap():
    enc, p = _encoder()
    book = Codebook(codes=p["codebook_l"], name="language")
    feats = np.random.default_rng(1).standard_normal((4, 8))
    windows = np.random.default_rng(2).standard_normal((4, 2, 5))
    lang, state, vq, _ = enc.forward(p, feats, windows, book, quantize_lang=True)
    assert lang.shape == (4, 4) and state.shape == (4, 3)
    for row, i in zip(lang, vq.indices):
        np.testing.assert_array_equal(row, book.codes[i])
    lang2, _, vq2, _ = enc.forward(p, feats, windows)
    assert vq2 is None and not np.allclose(lang2, lang)


def test_state_window_shape_errors():
    enc, p = _encoder()
    with pytest.raises(ShapeError):
        enc.forward(p, np.zeros((1, 8)), np.zeros((1, 3, 5)))
    with pytest.raises(ShapeError):
        encode_state(p, enc, np.zeros((3, 5)))
    assert encode_state(p, enc, np.zeros((2, 5))).shape == (3,)


def test_embed_instruction_helper():
    enc, p = _encoder()
    book = Codebook(codes=p["codebook_l"], name="language")
    table = np.random.default_rng(3).standard_normal((5, 8))
    z, res = embed_instruction(table, p, enc, 2, book)
    np.testing.assert_array_equal(z, book.codes[res.indices[0]])
    assert book.usage_counts.sum() == 0
    with pytest.raises(VocabularyError):
        embed_instruction(table, p, enc, 5, book)
