import numpy as np
import pytest

from gradcheck import check_model, tiny_model, tiny_problem
from playfusion.denoiser import DenoiserConfig, ModelConfig, PlayFusionModel
from playfusion.errors import ConfigError, ShapeError, VocabularyError
from playfusion.goals import build_vocabulary


def test_output_shape_and_determinism():
    m = tiny_model()
    batch, xk, k, _ = tiny_problem(m)
    a = m.predict_noise(batch["instr"], batch["states"], xk, k)
    b = tiny_model().predict_noise(batch["instr"], batch["states"], xk, k)
    assert a.shape == xk.shape
    np.testing.assert_array_equal(a, b)
    # scalar k broadcasts over the batch
    c = m.predict_noise(batch["instr"], batch["states"], xk, 3)
    d = m.predict_noise(batch["instr"], batch["states"], xk, np.full(len(xk), 3))
    np.testing.assert_array_equal(c, d)


def test_predict_noise_does_not_touch_usage():
    m = tiny_model()
    batch, xk, k, _ = tiny_problem(m)
    m.predict_noise(batch["instr"], batch["states"], xk, k)
    assert m.book_u.usage_counts.sum() == 0 and m.book_l.usage_counts.sum() == 0
    m.forward(batch["instr"], batch["states"], xk, k)
    assert m.book_u.usage_counts.sum() == len(xk) * m.net.cfg.latent_length
    assert m.book_l.usage_counts.sum() == len(xk)


def test_conditioning_changes_output():
    m = tiny_model()
    batch, xk, k, _ = tiny_problem(m)
    base = m.predict_noise(batch["instr"], batch["states"], xk, k)
    other = m.predict_noise(batch["instr"], batch["states"] + 0.5, xk, k)
    assert not np.allclose(base, other)
    assert not np.allclose(base, m.predict_noise(batch["instr"], batch["states"], xk, k + 1))


def test_gradients_match_finite_differences():
    m = tiny_model(T_a=8)
    assert m.n_params <= 5000
    errs, terms = check_model(m)
    assert max(errs.values()) < 1e-4, sorted(errs.items(), key=lambda kv: -kv[1])[:3]
    assert "unet_quant" in terms and "lang_quant" in terms


def test_straight_through_at_model_level():
    m = tiny_model()
    batch, xk, k, eps = tiny_problem(m)
    rec = {}
    _, grads = m.loss_and_grads(batch, xk, k, eps, 0.0, 0.0, record=rec, record_usage=False)
    assert not np.any(grads["codebook_u"]) and not np.any(grads["codebook_l"])
    # decoder gradient passes to the encoder latent unchanged, bit for bit
    assert np.array_equal(rec["d_latent"], rec["d_quantized"])
    _, grads = m.loss_and_grads(batch, xk, k, eps, 0.5, 0.5, record_usage=False)
    assert np.any(grads["codebook_u"]) and np.any(grads["codebook_l"])


def test_loss_total_is_weighted_sum():
    m = tiny_model()
    batch, xk, k, eps = tiny_problem(m)
    for b1, b2 in ((0.5, 0.5), (1.0, 0.0), (0.25, 2.0)):
        terms, _ = m.loss_and_grads(batch, xk, k, eps, b1, b2, record_usage=False)
        ref = terms["denoise_mse"] + b1 * (terms["unet_quant"] + terms["unet_commit"]) \
            + b2 * (terms["lang_quant"] + terms["lang_commit"])
        assert terms["total"] == pytest.approx(ref, rel=1e-12)
        assert terms["unet_quant"] == terms["unet_commit"]
        assert terms["lang_quant"] == terms["lang_commit"]


def test_ablations_drop_terms_and_codebook_updates():
    m = tiny_model(quantize_unet=False, quantize_lang=False)
    batch, xk, k, eps = tiny_problem(m)
    terms, _ = m.loss_and_grads(batch, xk, k, eps, 0.5, 0.5)
    assert set(terms) == {"denoise_mse", "total"}
    assert terms["total"] == terms["denoise_mse"]
    assert "codebook_u" not in m.trainable_keys() and "codebook_l" not in m.trainable_keys()


def test_partial_quantization_fraction():
    m = tiny_model(code_dim=4, quantize_fraction=0.5)
    assert m.book_u.dim == 2
    errs, _ = check_model(m)
    assert max(errs.values()) < 1e-4


def test_shape_and_config_errors():
    m = tiny_model()
    batch, xk, k, _ = tiny_problem(m)
    with pytest.raises(ShapeError):
        m.predict_noise(batch["instr"], batch["states"], xk[:, :4], k)
    with pytest.raises(ShapeError):
        m.predict_noise(batch["instr"], batch["states"][:, :1], xk, k)
    with pytest.raises(VocabularyError):
        m.predict_noise(np.array([0, 1, 99]), batch["states"], xk, k)
    with pytest.raises(ConfigError):
        DenoiserConfig(horizon=6, widths=(4, 4), groups=2)
    with pytest.raises(ConfigError):
        DenoiserConfig(horizon=8, widths=(4, 4), groups=2, bottleneck="all")
    with pytest.raises(ConfigError):
        DenoiserConfig(horizon=8, widths=(4, 4), groups=3)


def test_config_dict_roundtrip():
    cfg = ModelConfig(widths=(8, 16), T_a=8)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    vocab = build_vocabulary(("a1", "b1"), ("c1", "d1"), 1)
    m = PlayFusionModel(ModelConfig(state_dim=15, widths=(8, 8), groups=4, code_dim=8,
                                    T_a=8, time_embed_dim=8, cond_hidden=0,
                                    codebook_size_u=4, codebook_size_l=4), vocab)
    assert "cond.0.w" not in m.params
