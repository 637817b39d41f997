import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from playfusion.errors import ConfigError, ShapeError
from playfusion.quantizer import (Codebook, code_overlap_rates, codebook_metrics,
                                  frozen_surrogate, init_codebook, nearest_codes, quantize,
                                  read_code_assignments, vq_backward)


def brute_nearest(codes, z):
    out = []
    for row in z:
        d = [float(np.sum((row - c) ** 2)) for c in codes]
        out.append(int(np.argmin(d)))
    return np.array(out)


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(codes=arrays(float, st.tuples(st.integers(1, 12), st.just(3)), elements=finite),
       z=arrays(float, st.tuples(st.integers(1, 20), st.just(3)), elements=finite))
def test_quantized_output_is_a_code_and_nearest(codes, z):
    book = Codebook(codes=codes)
    res = quantize(book, z)
    for i, q in zip(res.indices, res.quantized):
        np.testing.assert_array_equal(q, codes[i])
    # chosen code is at least as close as the brute-force nearest one
    ref = brute_nearest(codes, z)
    d_sel = ((z - codes[res.indices]) ** 2).sum(1)
    d_ref = ((z - codes[ref]) ** 2).sum(1)
    assert np.all(d_sel <= d_ref + 1e-9 * (1 + d_ref))
    assert res.quant_dist == res.commit_dist >= 0


def test_ties_go_to_lowest_index():
    codes = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    idx = nearest_codes(codes, np.array([[0.0, 0.0], [1.0, 0.0]]))
    assert idx.tolist() == [0, 0]


def test_single_code_book():
    book = Codebook(codes=np.array([[0.5, -0.5]]))
    res = quantize(book, np.random.default_rng(0).standard_normal((7, 2)))
    assert np.all(res.indices == 0)
    assert book.usage_counts.tolist() == [7]


def test_usage_counts_and_metrics():
    book = Codebook(codes=np.eye(4))
    quantize(book, np.eye(4)[[0, 0, 1, 2, 3, 3, 3, 3]])
    assert book.usage_counts.tolist() == [2, 1, 1, 4]
    m = codebook_metrics(book)
    p = np.array([2, 1, 1, 4]) / 8
    assert m["perplexity"] == pytest.approx(np.exp(-(p * np.log(p)).sum()), rel=1e-14)
    assert m["active_fraction"] == 1.0
    quantize(book, np.eye(4)[:1], record_usage=False)
    assert book.usage_counts.sum() == 8
    book.reset_usage()
    with pytest.raises(ConfigError):
        codebook_metrics(book)


def test_collapsed_perplexity_is_one():
    book = Codebook(codes=np.eye(3))
    quantize(book, np.zeros((5, 3)) + np.eye(3)[1])
    assert codebook_metrics(book)["perplexity"] == 1.0


def test_shape_and_init_errors():
    book = init_codebook(8, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        quantize(book, np.zeros((2, 5)))
    with pytest.raises(ConfigError):
        init_codebook(0, 4, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        Codebook(codes=np.zeros((0, 3)))


def test_init_range():
    book = init_codebook(16, 8, np.random.default_rng(1))
    assert book.codes.shape == (16, 8)
    assert np.all(np.abs(book.codes) <= 8 / 16)


def test_multi_axis_latents_keep_shape():
    book = init_codebook(5, 3, np.random.default_rng(2))
    z = np.random.default_rng(3).standard_normal((4, 6, 3))
    res = quantize(book, z)
    assert res.indices.shape == (4, 6)
    assert res.quantized.shape == z.shape


def test_straight_through_gradients():
    rng = np.random.default_rng(4)
    book = init_codebook(6, 3, rng)
    z = rng.standard_normal((10, 3))
    res = quantize(book, z)
    g = rng.standard_normal(z.shape)
    dz, dcodes = vq_backward(book, res, g, 0.0, 0.0)
    # identity-quantizer gradient, bit for bit, and nothing for the codes
    assert np.array_equal(dz, g)
    assert not np.any(dcodes)
    dz, dcodes = vq_backward(book, res, np.zeros_like(z), 0.7, 0.0)
    assert not np.any(dz)
    # quantization term: d/de of 0.7 * mean((sg(z) - e)^2)
    ref = np.zeros_like(book.codes)
    for i, row in zip(res.indices, z):
        ref[i] += -0.7 * 2 / z.size * (row - book.codes[i])
    np.testing.assert_allclose(dcodes, ref, rtol=1e-14)
    dz, dcodes = vq_backward(book, res, np.zeros_like(z), 0.0, 0.3)
    np.testing.assert_allclose(dz, 0.3 * 2 / z.size * (z - res.quantized), rtol=1e-14)
    assert not np.any(dcodes)


def test_frozen_surrogate_matches_lookup_at_reference_point():
    rng = np.random.default_rng(5)
    book = init_codebook(7, 2, rng)
    z = rng.standard_normal((9, 2))
    res = quantize(book, z)
    fres, value = frozen_surrogate(book, z, (res.indices, z.copy(), res.quantized.copy()))
    np.testing.assert_allclose(value, res.quantized, atol=1e-15)
    assert fres.quant_dist == pytest.approx(res.quant_dist, rel=1e-14)
    assert fres.commit_dist == pytest.approx(res.commit_dist, rel=1e-14)


def test_overlap_rates_and_table_roundtrip(tmp_path):
    rows = [(0, 0, "1-2", 0), (1, 0, "1-2", 0), (2, 0, "3-4", 4), (3, 0, "3-5", 4),
            (4, 0, "1-2", 8)]
    task_of = {0: (0, 0), 4: (1, 1), 8: (2, 2)}.get
    r = code_overlap_rates(rows, task_of, max_pairs=5000, seed=0)
    assert r["same"] > r["disjoint"]
    assert r["n_same"] > 0 and r["n_disjoint"] > 0
    p = tmp_path / "codes.tsv"
    p.write_text("episode_id\twindow_start\tcode_index\tinstruction_id\n"
                 + "".join(f"{a}\t{b}\t{c}\t{d}\n" for a, b, c, d in rows))
    assert read_code_assignments(p) == rows
