"""Finite-difference helpers shared by the unit and acceptance tests."""

import numpy as np

from playfusion.denoiser import ModelConfig, PlayFusionModel
from playfusion.goals import build_vocabulary

# five-point stencil: truncation error O(h^4), so h can stay large enough
# that cancellation noise is far below the tolerance
STENCIL = ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12))


def tiny_model(T_a=8, seed=1, **kw):
    vocab = build_vocabulary(("carrot", "bread"), ("pan", "toaster"), 2)
    base = dict(state_dim=5, action_dim=2, T_a=T_a, T_o=2, widths=(4, 4), code_dim=4,
                groups=2, time_embed_dim=4, lang_feat_dim=6, lang_dim=4, lang_hidden=6,
                state_out=4, state_hidden=6, codebook_size_u=8, codebook_size_l=8,
                cond_hidden=6)
    base.update(kw)
    return PlayFusionModel(ModelConfig(**base), vocab, seed=seed)


def tiny_problem(model, B=3, seed=0):
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    batch = {"instr": np.array([0, 3, 5, 6, 1, 2][:B]),
             "states": rng.random((B, cfg.T_o, cfg.state_dim))}
    xk = rng.standard_normal((B, cfg.T_a, cfg.action_dim))
    eps = rng.standard_normal(xk.shape)
    k = np.array([1, 3, 7, 20, 40, 50][:B])
    return batch, xk, k, eps


def numeric_grads(f, params, h=1e-3):
    out = {}
    for name, p in params.items():
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            acc = 0.0
            for step, w in STENCIL:
                p[i] = old + step * h
                acc += w * f()
            p[i] = old
            num[i] = acc / h
        out[name] = num
    return out


def relative_errors(analytic, numeric, floor=1e-8):
    """max |a - n| / max(|a|, |n|, floor) per parameter tensor."""
    return {k: float(np.max(np.abs(analytic[k] - numeric[k])
                            / np.maximum(np.maximum(np.abs(analytic[k]), np.abs(numeric[k])),
                                         floor)))
            for k in numeric}


def check_model(model, beta1=0.5, beta2=0.5, h=1e-3):
    batch, xk, k, eps = tiny_problem(model)
    terms, grads = model.loss_and_grads(batch, xk, k, eps, beta1, beta2, record_usage=False)
    _, aux = model.forward(batch["instr"], batch["states"], xk, k, record_usage=False)
    frozen = model.freeze_choices(aux)
    num = numeric_grads(lambda: model.loss(batch, xk, k, eps, beta1, beta2, frozen),
                        model.params, h)
    return relative_errors(grads, num), terms
