"""Discrete-time DDPM noise schedules.

Holds the closed-form coefficients for the forward (noising) process and the
per-step reverse update. Step indices are 1-based: ``k = 1`` is the least
noisy step and ``k = K`` the noisiest, so ``betas[k - 1]`` is beta_k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

KINDS = ("squaredcos_cap_v2", "linear")
_ALIASES = {"squared-cosine-capped": "squaredcos_cap_v2", "cosine": "squaredcos_cap_v2"}
BETA_CAP = 0.999
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    K: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_sigmas: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars, self.posterior_sigmas):
            arr.setflags(write=False)

    def check_step(self, k):
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.K):
            raise ConfigError(f"step index must lie in [1, {self.K}], got {k}")
        return k.astype(np.int64)

    def to_dict(self):
        return {"kind": self.kind, "K": self.K}


def make_schedule(kind: str = "squaredcos_cap_v2", K: int = 50,
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a schedule of ``K`` steps.

    ``squaredcos_cap_v2`` is the improved-DDPM cosine schedule with betas
    capped at 0.999; ``linear`` interpolates betas between ``beta_start``
    and ``beta_end``.
    """
    if isinstance(K, bool) or not isinstance(K, (int, np.integer)) or K < 1:
        raise ConfigError(f"K must be a positive integer, got {K!r}")
    K = int(K)
    kind = _ALIASES.get(kind, kind)
    if kind == "squaredcos_cap_v2":
        theta = (np.arange(K + 1) / K + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * np.pi / 2
        a, b = theta[:-1], theta[1:]
        # 1 - cos^2(b)/cos^2(a) without the cancellation at small k
        betas = np.minimum(np.sin(b - a) * np.sin(b + a) / np.cos(a) ** 2, BETA_CAP)
    elif kind == "linear":
        if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
            raise ConfigError("linear beta bounds must lie in (0, 1)")
        betas = np.linspace(beta_start, beta_end, K) if K > 1 else np.array([beta_start])
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    # posterior variance of q(x_{k-1} | x_k, x_0); exactly zero at k = 1
    variances = betas * (1.0 - prev) / (1.0 - alpha_bars)
    return NoiseSchedule(kind=kind, K=K, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars, posterior_sigmas=np.sqrt(variances))


def _per_sample(coef, x):
    # broadcast a scalar or per-batch coefficient over the trailing dims of x
    coef = np.asarray(coef, dtype=float)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def forward_noise(schedule: NoiseSchedule, x0, k, eps):
    """Sample x^k ~ q(x^k | x^0) as sqrt(abar_k) x0 + sqrt(1 - abar_k) eps.

    ``k`` is either a scalar step or one step per leading batch entry.
    """
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ShapeError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    k = schedule.check_step(k)
    abar = schedule.alpha_bars[k - 1]
    return _per_sample(np.sqrt(abar), x0) * x0 + _per_sample(np.sqrt(1.0 - abar), x0) * eps


def reverse_step(schedule: NoiseSchedule, xk, eps_hat, k, noise=None, clip_x0=None):
    """One ancestral DDPM step x^k -> x^{k-1}.

    ``noise`` may be None (treated as zero). At k = 1 the posterior std is
    zero, so the step is deterministic whatever ``noise`` holds.

    With ``clip_x0 = c`` the implied clean sample
    x0_hat = (xk - sqrt(1 - abar_k) eps_hat) / sqrt(abar_k) is clipped to
    [-c, c] and the posterior mean is formed from it. Without clipping the
    two forms are algebraically identical; clipping keeps sampling stable
    when beta_k is close to 1 (1 / sqrt(alpha_k) amplifies any error in
    eps_hat at the noisiest steps).
    """
    xk = np.asarray(xk, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    if xk.shape != eps_hat.shape:
        raise ShapeError(f"eps_hat shape {eps_hat.shape} != x shape {xk.shape}")
    k = schedule.check_step(k)
    beta = schedule.betas[k - 1]
    alpha = schedule.alphas[k - 1]
    abar = schedule.alpha_bars[k - 1]
    if clip_x0 is None:
        mean = (xk - _per_sample(beta / np.sqrt(1.0 - abar), xk) * eps_hat) \
            / _per_sample(np.sqrt(alpha), xk)
    else:
        abar_prev = np.where(k > 1, schedule.alpha_bars[np.maximum(k - 2, 0)], 1.0)
        x0 = (xk - _per_sample(np.sqrt(1.0 - abar), xk) * eps_hat) \
            / _per_sample(np.sqrt(abar), xk)
        x0 = np.clip(x0, -clip_x0, clip_x0)
        c0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
        ck = np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
        mean = _per_sample(c0, xk) * x0 + _per_sample(ck, xk) * xk
    if noise is None:
        return mean
    noise = np.asarray(noise, dtype=float)
    if noise.shape != xk.shape:
        raise ShapeError(f"noise shape {noise.shape} != x shape {xk.shape}")
    return mean + _per_sample(schedule.posterior_sigmas[k - 1], xk) * noise
