"""Vector-quantization codebooks with straight-through gradients.

The two distance terms are reported as mean squared errors over all latent
entries. They are equal in value and differ only in where gradients go: the
quantization term moves the selected codes toward the (frozen) latents, the
commitment term moves the latents toward the (frozen) codes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class Codebook:
    codes: np.ndarray
    name: str = "unet"
    usage_counts: np.ndarray = None

    def __post_init__(self):
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ConfigError("codebook needs at least one code")
        if self.usage_counts is None:
            self.usage_counts = np.zeros(self.codes.shape[0], dtype=np.int64)

    @property
    def size(self):
        return self.codes.shape[0]

    @property
    def dim(self):
        return self.codes.shape[1]

    def reset_usage(self):
        self.usage_counts[:] = 0


def init_codebook(size, dim, rng, name="unet"):
    """Uniform(-1/M, 1/M) codes, scaled by the code dimension."""
    if size < 1 or dim < 1:
        raise ConfigError(f"invalid codebook shape ({size}, {dim})")
    codes = rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim)) * dim
    return Codebook(codes=codes, name=name)


@dataclass
class QuantizeResult:
    indices: np.ndarray
    quantized: np.ndarray
    quant_dist: float
    commit_dist: float
    latents: np.ndarray = field(repr=False, default=None)

    @property
    def residual(self):
        return self.quantized - self.latents


def nearest_codes(codes, z):
    """Index of the closest code for each row of ``z``; ties go to the lowest index."""
    d = (z * z).sum(axis=1, keepdims=True) - 2.0 * z @ codes.T + (codes * codes).sum(axis=1)
    return np.argmin(d, axis=1)


def quantize(book: Codebook, z, record_usage=True) -> QuantizeResult:
    """Replace each latent vector (last axis) by its nearest code."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != book.dim:
        raise ShapeError(f"latent dim {z.shape[-1]} != code dim {book.dim}")
    flat = z.reshape(-1, book.dim)
    idx = nearest_codes(book.codes, flat)
    q = book.codes[idx]
    dist = float(np.mean((flat - q) ** 2)) if flat.size else 0.0
    if record_usage:
        np.add.at(book.usage_counts, idx, 1)
    return QuantizeResult(indices=idx.reshape(z.shape[:-1]), quantized=q.reshape(z.shape),
                          quant_dist=dist, commit_dist=dist, latents=z)


def vq_backward(book: Codebook, result: QuantizeResult, d_quantized,
                quant_weight, commit_weight):
    """Gradients for one quantizer call.

    ``d_quantized`` is the downstream gradient w.r.t. the substituted latent;
    it passes to the encoder output unchanged (straight-through). The weighted
    commitment term adds to the encoder gradient, the weighted quantization
    term is the only source of codebook gradient.
    Returns ``(d_latents, d_codes)``.
    """
    z = result.latents
    n = z.size
    diff = (z - result.quantized).reshape(-1, book.dim)
    dz = np.array(d_quantized, dtype=float, copy=True)
    if commit_weight:
        dz += (commit_weight * 2.0 / n * diff).reshape(z.shape)
    dcodes = np.zeros_like(book.codes)
    if quant_weight:
        np.add.at(dcodes, result.indices.reshape(-1), -quant_weight * 2.0 / n * diff)
    return dz, dcodes


def frozen_surrogate(book: Codebook, z, frozen):
    """Straight-through surrogate with the code choice held fixed.

    ``frozen = (indices, latents_ref, codes_ref)`` from an earlier lookup.
    Returns ``(result, value)`` where ``value = z + (codes_ref - latents_ref)``,
    the quantization distance is measured from the frozen latents and the
    commitment distance to the frozen codes. The derivatives of these values
    are exactly the straight-through gradients, which is what
    finite-difference checks compare against.
    """
    idx, z_ref, e_ref = frozen
    value = z + (e_ref - z_ref)
    quant = float(np.mean((z_ref - book.codes[idx]) ** 2))
    commit = float(np.mean((z - e_ref) ** 2))
    return QuantizeResult(indices=idx, quantized=e_ref, quant_dist=quant,
                          commit_dist=commit, latents=z), value


def codebook_metrics(book: Codebook):
    counts = book.usage_counts.astype(float)
    total = counts.sum()
    if total <= 0:
        raise ConfigError(f"codebook '{book.name}' has no recorded usage")
    p = counts[counts > 0] / total
    entropy = float(-(p * np.log(p)).sum())
    return {"perplexity": float(np.exp(entropy)),
            "active_fraction": float((counts > 0).sum() / book.size)}


CODE_TABLE_COLUMNS = ("episode_id", "window_start", "code_index", "instruction_id")


def export_code_assignments(model, store, path=None, windows=None, step=1, seed=0):
    """Bottleneck code assignment of each dataset window.

    Each window's clean action chunk is noised to diffusion step ``step`` with
    a fixed seed and passed through the denoiser; the code indices selected at
    the innermost latent positions are joined with '-' in ``code_index``.
    Returns the rows, and writes them as tab-separated text when ``path`` is
    given.
    """
    from .dataset import gather_windows  # local import: dataset depends on playworld

    if windows is None:
        windows = store.windows
    rows = []
    if len(windows):
        batch = gather_windows(store, windows)
        codes = model.bottleneck_codes(batch, step=step, seed=seed)
        for (ep, start), c, instr in zip(windows, codes, batch["instr"]):
            rows.append((int(store.episodes[ep].episode_id), int(start),
                         "-".join(str(int(i)) for i in c), int(instr)))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(CODE_TABLE_COLUMNS)
            w.writerows(rows)
    return rows


def read_code_assignments(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh, delimiter="\t")
        header = next(r)
        if tuple(header) != CODE_TABLE_COLUMNS:
            raise ValueError(f"unexpected code table header {header}")
        return [(int(a), int(b), c, int(d)) for a, b, c, d in r]


def code_overlap_rates(rows, task_of, max_pairs=20000, seed=0):
    """Position-wise code agreement for window pairs.

    ``task_of`` maps an instruction id to its (object, container) task.
    Returns mean agreement for pairs with the same task and for pairs whose
    tasks share neither object nor container. Pairs drawn from one episode
    are skipped.
    """
    codes = [np.array([int(c) for c in r[2].split("-")]) for r in rows]
    tasks = [task_of(r[3]) for r in rows]
    n = len(rows)
    rng = np.random.default_rng(seed)
    same, disjoint = [], []
    if n >= 2:
        a = rng.integers(0, n, size=max_pairs)
        b = rng.integers(0, n, size=max_pairs)
        for i, j in zip(a, b):
            if rows[i][0] == rows[j][0]:
                continue
            ti, tj = tasks[i], tasks[j]
            agree = float(np.mean(codes[i] == codes[j]))
            if ti == tj:
                same.append(agree)
            elif ti[0] != tj[0] and ti[1] != tj[1]:
                disjoint.append(agree)
    return {"same": float(np.mean(same)) if same else float("nan"),
            "disjoint": float(np.mean(disjoint)) if disjoint else float("nan"),
            "n_same": len(same), "n_disjoint": len(disjoint)}
