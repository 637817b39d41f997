"""Conditional noise-prediction network with a quantized bottleneck.

A 1-D U-Net over the action-chunk axis. Every residual block receives the
global conditioning vector ``[time_features, lang_part, state_part]`` as a
FiLM shift/scale. The innermost latent is projected to the code dimension
and its leading ``quantize_fraction`` of channels are replaced by their
nearest U-Net codebook entries with straight-through gradients.

Fixed design choices (held constant across ablations): SiLU activations,
GroupNorm inside every residual block, average-pool downsampling and
nearest-neighbour upsampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict, fields

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError
from .goals import GoalConfig, GoalEncoder, language_table
from .quantizer import (Codebook, QuantizeResult, frozen_surrogate, init_codebook,
                        quantize, vq_backward)


class ResBlock:
    """conv-GN-SiLU, FiLM, conv-GN-SiLU, plus (projected) residual."""

    def __init__(self, name, cin, cout, cond_dim, kernel, groups):
        self.cin, self.cout = cin, cout
        self.conv1 = nn.Conv1d(f"{name}.conv1", cin, cout, kernel)
        self.gn1 = nn.GroupNorm(f"{name}.gn1", cout, groups)
        self.film = nn.Linear(f"{name}.film", cond_dim, 2 * cout)
        self.conv2 = nn.Conv1d(f"{name}.conv2", cout, cout, kernel)
        self.gn2 = nn.GroupNorm(f"{name}.gn2", cout, groups)
        self.res = nn.Conv1d(f"{name}.res", cin, cout, 1) if cin != cout else None

    def layers(self):
        out = [self.conv1, self.gn1, self.film, self.conv2, self.gn2]
        return out + ([self.res] if self.res else [])

    def init(self, params, rng):
        for layer in self.layers():
            layer.init(params, rng)

    def forward(self, p, x, cond):
        h, c1 = self.conv1.forward(p, x)
        h, g1 = self.gn1.forward(p, h)
        h, s1 = nn.silu(h)
        film, cf = self.film.forward(p, cond)
        scale = film[:, None, :self.cout]
        shift = film[:, None, self.cout:]
        hf = h * (1.0 + scale) + shift
        h2, c2 = self.conv2.forward(p, hf)
        h2, g2 = self.gn2.forward(p, h2)
        h2, s2 = nn.silu(h2)
        if self.res is not None:
            r, cr = self.res.forward(p, x)
        else:
            r, cr = x, None
        return h2 + r, (c1, g1, s1, cf, h, scale, c2, g2, s2, cr)

    def backward(self, p, grads, cache, dy):
        c1, g1, s1, cf, h, scale, c2, g2, s2, cr = cache
        dx = self.res.backward(p, grads, cr, dy) if self.res is not None else dy.copy()
        d = nn.silu_backward(dy, s2)
        d = self.gn2.backward(p, grads, g2, d)
        dhf = self.conv2.backward(p, grads, c2, d)
        dfilm = np.concatenate([(dhf * h).sum(axis=1), dhf.sum(axis=1)], axis=1)
        dcond = self.film.backward(p, grads, cf, dfilm)
        d = nn.silu_backward(dhf * (1.0 + scale), s1)
        d = self.gn1.backward(p, grads, g1, d)
        dx += self.conv1.backward(p, grads, c1, d)
        return dx, dcond


@dataclass(frozen=True)
class DenoiserConfig:
    action_dim: int = 4
    horizon: int = 16
    widths: tuple = (64, 128)
    code_dim: int = 64
    kernel: int = 3
    groups: int = 8
    time_embed_dim: int = 256
    cond_dim: int = 128          # goal embedding width fed in beside the time features
    cond_hidden: int = 256       # width of the shared conditioning MLP (0: none)
    quantize_fraction: float = 1.0
    bottleneck: str = "innermost"
    codebook_size: int = 2048

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.horizon % (2 ** len(self.widths)):
            raise ConfigError(f"horizon {self.horizon} must be divisible by "
                              f"2**{len(self.widths)}")
        if not 0.0 < self.quantize_fraction <= 1.0:
            raise ConfigError("quantize_fraction must lie in (0, 1]")
        if self.bottleneck != "innermost":
            raise ConfigError(f"unsupported bottleneck position {self.bottleneck!r}")
        for w in self.widths:
            if w % self.groups:
                raise ConfigError(f"width {w} not divisible by {self.groups} groups")

    @property
    def quantized_channels(self):
        return max(1, int(round(self.quantize_fraction * self.code_dim)))

    @property
    def latent_length(self):
        return self.horizon // 2 ** len(self.widths)


class Denoiser:
    """The U-Net itself: (noisy chunk, conditioning) -> predicted noise."""

    codebook_key = "codebook_u"

    def __init__(self, cfg: DenoiserConfig):
        self.cfg = cfg
        ted = cfg.time_embed_dim
        self.time_mlp = nn.MLP("time", ted, 2 * ted, ted)
        cdim = ted + cfg.cond_dim
        self.cond_mlp = None
        if cfg.cond_hidden:
            self.cond_mlp = nn.MLP("cond", cdim, cfg.cond_hidden, cfg.cond_hidden)
            cdim = cfg.cond_hidden
        k, g = cfg.kernel, cfg.groups
        self.down = []
        cin = cfg.action_dim
        for i, w in enumerate(cfg.widths):
            self.down.append((ResBlock(f"down{i}.a", cin, w, cdim, k, g),
                              ResBlock(f"down{i}.b", w, w, cdim, k, g)))
            cin = w
        wl = cfg.widths[-1]
        self.mid1 = ResBlock("mid1", wl, wl, cdim, k, g)
        self.proj_in = nn.Conv1d("proj_in", wl, cfg.code_dim, 1)
        self.proj_out = nn.Conv1d("proj_out", cfg.code_dim, wl, 1)
        self.mid2 = ResBlock("mid2", wl, wl, cdim, k, g)
        self.up = []
        for i in reversed(range(len(cfg.widths))):
            w = cfg.widths[i]
            self.up.append((ResBlock(f"up{i}.a", cin + w, w, cdim, k, g),
                            ResBlock(f"up{i}.b", w, w, cdim, k, g)))
            cin = w
        w0 = cfg.widths[0]
        self.final_conv = nn.Conv1d("final.conv", w0, w0, k)
        self.final_gn = nn.GroupNorm("final.gn", w0, g)
        self.out = nn.Conv1d("final.out", w0, cfg.action_dim, 1)

    def blocks(self):
        out = [b for pair in self.down for b in pair] + [self.mid1, self.mid2]
        return out + [b for pair in self.up for b in pair]

    def init(self, params, rng, with_codebook=True):
        self.time_mlp.init(params, rng)
        if self.cond_mlp is not None:
            self.cond_mlp.init(params, rng)
        for b in self.blocks():
            b.init(params, rng)
        for layer in (self.proj_in, self.proj_out, self.final_conv, self.final_gn, self.out):
            layer.init(params, rng)
        if with_codebook:
            params[self.codebook_key] = init_codebook(
                self.cfg.codebook_size, self.cfg.quantized_channels, rng, name="unet").codes

    def time_features(self, p, k):
        emb = nn.sinusoidal_embedding(k, self.cfg.time_embed_dim)
        return self.time_mlp.forward(p, emb)

    def forward(self, p, x, time_feat, goal, book=None, quantize_latent=False,
                record_usage=True, frozen=None):
        """Returns (eps_hat, vq_result or None, cache)."""
        cfg = self.cfg
        if x.ndim != 3 or x.shape[1:] != (cfg.horizon, cfg.action_dim):
            raise ShapeError(f"chunk shape {x.shape[1:]} != ({cfg.horizon}, {cfg.action_dim})")
        if goal.shape != (len(x), cfg.cond_dim):
            raise ShapeError(f"goal shape {goal.shape} != ({len(x)}, {cfg.cond_dim})")
        cond = np.concatenate([time_feat, goal], axis=1)
        c_cm = None
        if self.cond_mlp is not None:
            cond, c_cm = self.cond_mlp.forward(p, cond)
        ca, cs = nn.silu(cond)

        h = x
        skips, down_c = [], []
        for a, b in self.down:
            h, c_a = a.forward(p, h, ca)
            h, c_b = b.forward(p, h, ca)
            skips.append(h)
            down_c.append((c_a, c_b))
            h = nn.avgpool2(h)
        h, c_m1 = self.mid1.forward(p, h, ca)
        z, c_pi = self.proj_in.forward(p, h)

        q = cfg.quantized_channels
        vq = None
        if quantize_latent:
            if book is None or book.size < 1:
                raise ConfigError("quantization requested without a codebook")
            if frozen is None:
                vq = quantize(book, z[..., :q], record_usage=record_usage)
                zq = vq.quantized
            else:
                vq, zq = frozen_surrogate(book, z[..., :q], frozen)
            z_dec = np.concatenate([zq, z[..., q:]], axis=-1) if q < cfg.code_dim else zq
        else:
            z_dec = z

        h, c_po = self.proj_out.forward(p, z_dec)
        h, c_m2 = self.mid2.forward(p, h, ca)
        up_c = []
        for (a, b), skip in zip(self.up, reversed(skips)):
            h = np.concatenate([nn.upsample2(h), skip], axis=-1)
            h, c_a = a.forward(p, h, ca)
            h, c_b = b.forward(p, h, ca)
            up_c.append((c_a, c_b))
        h, c_fc = self.final_conv.forward(p, h)
        h, c_fg = self.final_gn.forward(p, h)
        h, c_fs = nn.silu(h)
        eps_hat, c_out = self.out.forward(p, h)
        cache = dict(cs=cs, cm=c_cm, down=down_c, m1=c_m1, pi=c_pi, po=c_po, m2=c_m2, up=up_c,
                     fc=c_fc, fg=c_fg, fs=c_fs, out=c_out, skip_ch=[s.shape[-1] for s in skips],
                     z=z)
        return eps_hat, vq, cache

    def backward(self, p, grads, cache, d_eps, book=None, vq=None, weight=0.0,
                 record=None):
        """Backprop ``d_eps``; returns (d_time_feat, d_goal).

        ``record`` (a dict) receives the gradient w.r.t. the substituted
        latent and w.r.t. the encoder latent, for straight-through checks.
        """
        cfg = self.cfg
        dca = 0.0
        d = self.out.backward(p, grads, cache["out"], d_eps)
        d = nn.silu_backward(d, cache["fs"])
        d = self.final_gn.backward(p, grads, cache["fg"], d)
        d = self.final_conv.backward(p, grads, cache["fc"], d)
        d_skips = []
        # up blocks run deepest-first forward, so unwind shallowest-first
        for (a, b), (c_a, c_b), sc in zip(reversed(self.up), reversed(cache["up"]),
                                          cache["skip_ch"]):
            d, dc = b.backward(p, grads, c_b, d)
            dca = dca + dc
            d, dc = a.backward(p, grads, c_a, d)
            dca = dca + dc
            d_skips.append(d[..., -sc:])
            d = nn.upsample2_backward(d[..., :-sc])
        d, dc = self.mid2.backward(p, grads, cache["m2"], d)
        dca = dca + dc
        d_zdec = self.proj_out.backward(p, grads, cache["po"], d)

        q = cfg.quantized_channels
        if vq is not None:
            dz = d_zdec.copy()
            dzq, dcodes = vq_backward(book, vq, d_zdec[..., :q], weight, weight)
            dz[..., :q] = dzq
            grads[self.codebook_key] = grads.get(self.codebook_key, 0.0) + dcodes
        else:
            dz = d_zdec
        if record is not None:
            record["d_quantized"] = d_zdec
            record["d_latent"] = dz
        d = self.proj_in.backward(p, grads, cache["pi"], dz)
        d, dc = self.mid1.backward(p, grads, cache["m1"], d)
        dca = dca + dc
        for (a, b), (c_a, c_b), ds in zip(reversed(self.down), reversed(cache["down"]),
                                          reversed(d_skips)):
            d = nn.avgpool2_backward(d) + ds
            d, dc = b.backward(p, grads, c_b, d)
            dca = dca + dc
            d, dc = a.backward(p, grads, c_a, d)
            dca = dca + dc
        dcond = nn.silu_backward(dca, cache["cs"])
        if self.cond_mlp is not None:
            dcond = self.cond_mlp.backward(p, grads, cache["cm"], dcond)
        ted = cfg.time_embed_dim
        return dcond[:, :ted], dcond[:, ted:]


@dataclass(frozen=True)
class ModelConfig:
    state_dim: int = 24
    action_dim: int = 4
    T_a: int = 16
    T_o: int = 2
    widths: tuple = (64, 128)
    code_dim: int = 64
    kernel: int = 3
    groups: int = 8
    time_embed_dim: int = 256
    lang_feat_dim: int = 32
    lang_dim: int = 64
    lang_hidden: int = 128
    state_out: int = 64
    state_hidden: int = 128
    cond_hidden: int = 256
    codebook_size_u: int = 2048
    codebook_size_l: int = 2048
    quantize_unet: bool = True
    quantize_lang: bool = True
    quantize_fraction: float = 1.0
    bottleneck: str = "innermost"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.T_a < 1 or self.T_o < 1:
            raise ConfigError("T_a and T_o must be >= 1")

    def goal_config(self):
        return GoalConfig(lang_feat_dim=self.lang_feat_dim, lang_dim=self.lang_dim,
                          state_dim=self.state_dim, T_o=self.T_o,
                          state_hidden=self.state_hidden, state_out=self.state_out,
                          lang_hidden=self.lang_hidden, codebook_size=self.codebook_size_l)

    def denoiser_config(self):
        return DenoiserConfig(action_dim=self.action_dim, horizon=self.T_a, widths=self.widths,
                              code_dim=self.code_dim, kernel=self.kernel, groups=self.groups,
                              time_embed_dim=self.time_embed_dim,
                              cond_dim=self.lang_dim + self.state_out,
                              cond_hidden=self.cond_hidden,
                              quantize_fraction=self.quantize_fraction,
                              bottleneck=self.bottleneck, codebook_size=self.codebook_size_u)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class PlayFusionModel:
    """Goal encoders + U-Net denoiser + both codebooks, in one parameter dict."""

    kind = "playfusion"

    def __init__(self, cfg: ModelConfig, vocab, params=None, seed=0):
        self.cfg = cfg
        self.vocab = vocab
        self.goals = GoalEncoder(cfg.goal_config())
        self.net = Denoiser(cfg.denoiser_config())
        self.lang_table = language_table(vocab, cfg.lang_feat_dim)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            self.goals.init(params, rng)
            self.net.init(params, rng)
        self.params = params
        self.schedule = None
        self.book_u = Codebook(params[Denoiser.codebook_key], name="unet")
        self.book_l = Codebook(params[GoalEncoder.codebook_key], name="language")

    @property
    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    def trainable_keys(self):
        keys = set(self.params)
        if not self.cfg.quantize_unet:
            keys.discard(Denoiser.codebook_key)
        if not self.cfg.quantize_lang:
            keys.discard(GoalEncoder.codebook_key)
        return sorted(keys)

    # -- forward pieces -----------------------------------------------------

    def lang_features(self, instr):
        instr = np.asarray(instr)
        if instr.size and (instr.min() < 0 or instr.max() >= len(self.lang_table)):
            from .errors import VocabularyError
            raise VocabularyError(f"instruction id outside vocabulary of {len(self.lang_table)}")
        return self.lang_table[instr]

    def goal(self, instr, states, record_usage=False, frozen=None):
        """Conditioning vectors [B, lang_dim + state_out] plus VQ result and cache."""
        lang, state, vq, cache = self.goals.forward(
            self.params, self.lang_features(instr), states, self.book_l,
            quantize_lang=self.cfg.quantize_lang, record_usage=record_usage, frozen=frozen)
        return np.concatenate([lang, state], axis=1), vq, cache

    def forward(self, instr, states, xk, k, record_usage=True, frozen=None):
        frozen = frozen or {}
        p = self.params
        goal, vq_l, c_goal = self.goal(instr, states, record_usage, frozen.get("lang"))
        tf, c_time = self.net.time_features(p, k)
        eps_hat, vq_u, c_net = self.net.forward(
            p, xk, tf, goal, self.book_u, quantize_latent=self.cfg.quantize_unet,
            record_usage=record_usage, frozen=frozen.get("unet"))
        return eps_hat, dict(vq_l=vq_l, vq_u=vq_u, goal=c_goal, time=c_time, net=c_net)

    def predict_noise(self, instr, states, xk, k):
        eps_hat, _ = self.forward(instr, states, xk, np.broadcast_to(k, (len(xk),)),
                                  record_usage=False)
        return eps_hat

    # -- losses -------------------------------------------------------------

    def loss_terms(self, eps_hat, eps, aux, beta1, beta2):
        mse = float(np.mean((eps_hat - eps) ** 2))
        terms = {"denoise_mse": mse}
        total = mse
        if aux["vq_u"] is not None:
            terms["unet_quant"] = aux["vq_u"].quant_dist
            terms["unet_commit"] = aux["vq_u"].commit_dist
            total += beta1 * (terms["unet_quant"] + terms["unet_commit"])
        if aux["vq_l"] is not None:
            terms["lang_quant"] = aux["vq_l"].quant_dist
            terms["lang_commit"] = aux["vq_l"].commit_dist
            total += beta2 * (terms["lang_quant"] + terms["lang_commit"])
        terms["total"] = total
        return terms

    def loss(self, batch, xk, k, eps, beta1, beta2, frozen=None):
        eps_hat, aux = self.forward(batch["instr"], batch["states"], xk, k,
                                    record_usage=False, frozen=frozen)
        return self.loss_terms(eps_hat, eps, aux, beta1, beta2)["total"]

    def loss_and_grads(self, batch, xk, k, eps, beta1, beta2, record=None,
                       record_usage=True):
        eps_hat, aux = self.forward(batch["instr"], batch["states"], xk, k,
                                    record_usage=record_usage)
        terms = self.loss_terms(eps_hat, eps, aux, beta1, beta2)
        grads = {}
        p = self.params
        d_eps = 2.0 * (eps_hat - eps) / eps_hat.size
        d_time, d_goal = self.net.backward(p, grads, aux["net"], d_eps, self.book_u,
                                           aux["vq_u"], beta1, record=record)
        self.net.time_mlp.backward(p, grads, aux["time"], d_time)
        dl = self.cfg.lang_dim
        self.goals.backward(p, grads, aux["goal"], d_goal[:, :dl], d_goal[:, dl:],
                            self.book_l, aux["vq_l"], beta2, record=record)
        if record is not None:
            record["aux"] = aux
        for key in p:
            if key not in grads:
                grads[key] = np.zeros_like(p[key])
        return terms, grads

    def freeze_choices(self, aux):
        """Code choices of a forward pass, for the straight-through surrogate."""
        out = {}
        if aux["vq_u"] is not None:
            v = aux["vq_u"]
            out["unet"] = (v.indices, v.latents.copy(), v.quantized.copy())
        if aux["vq_l"] is not None:
            v = aux["vq_l"]
            out["lang"] = (v.indices, v.latents.copy(), v.quantized.copy())
        return out

    # -- analysis -----------------------------------------------------------

    def bottleneck_codes(self, batch, step=1, seed=0):
        """U-Net code indices [B, latent_length] for clean chunks noised to ``step``."""
        from .schedule import forward_noise, make_schedule

        if not self.cfg.quantize_unet:
            raise ConfigError("model has no U-Net quantizer")
        sched = self.schedule or make_schedule("squaredcos_cap_v2", 50)
        rng = np.random.default_rng(seed)
        x0 = batch["actions"]
        xk = forward_noise(sched, x0, step, rng.standard_normal(x0.shape))
        out = []
        for s in range(0, len(x0), 256):
            sl = slice(s, s + 256)
            _, aux = self.forward(batch["instr"][sl], batch["states"][sl], xk[sl],
                                  np.full(len(xk[sl]), step), record_usage=True)
            out.append(aux["vq_u"].indices)
        return np.concatenate(out, axis=0)
