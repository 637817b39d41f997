"""Training loop, checkpoints and telemetry.

Objective per batch (both VQ groups present only when their quantizer is on)::

    total = denoise_mse + beta1 * (unet_quant + unet_commit)
                        + beta2 * (lang_quant + lang_commit)

Optimizer: Adam (0.9, 0.999, 1e-8), constant learning rate, no weight EMA.
Diffusion steps k are drawn uniformly from 1..K per sample.

Checkpoint layout (little-endian)::

    0    8   magic b"PFCKPT\\x00\\x01"
    8    4   u32 format version (1)
    12   8   u64 total length in bytes, checksum included
    20   4   u32 header length N
    24   N   UTF-8 JSON header: model kind and config, training config,
             vocabulary lines, world config, schedule, normalisation
             constants, step, RNG state, optimizer step count
    ..   4   u32 tensor count
    ..       per tensor: u16 name length, name, u8 dtype (0 f64, 1 i64),
             u8 ndim, ndim x u32 dims, raw data
    end-4 4  u32 CRC-32 of every preceding byte

Telemetry is tab-separated text, one row per optimizer step, floats written
with ``repr`` so rows compare byte for byte.
"""

from __future__ import annotations

import configparser
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn
from .dataset import Normalizer, PlayStore, _Reader, sample_batch, store_vocabulary
from .denoiser import ModelConfig, PlayFusionModel
from .errors import (ChecksumError, CheckpointMismatchError, ConfigError, DivergenceError,
                     FormatError, TruncatedFileError, VersionMismatchError)
from .gcbc import GCBCModel
from .goals import Vocabulary
from .schedule import forward_noise, make_schedule

CKPT_MAGIC = b"PFCKPT\x00\x01"
CKPT_VERSION = 1


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 0.5
    beta2: float = 0.5

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass(frozen=True)
class ChunkingConfig:
    T_a: int = 16
    T_o: int = 2

    def __post_init__(self):
        if self.T_a < 1 or self.T_o < 1:
            raise ConfigError("T_a and T_o must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.5
    T_a: int = 16
    T_o: int = 2
    K: int = 50
    schedule: str = "squaredcos_cap_v2"
    seed: int = 0
    model: str = "playfusion"
    quantize_unet: bool = True
    quantize_lang: bool = True
    quantize_fraction: float = 1.0
    bottleneck: str = "innermost"
    codebook_size_u: int = 2048
    codebook_size_l: int = 2048
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
    gcbc_hidden: int = 256
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.K < 1:
            raise ConfigError("steps >= 0, batch_size >= 1, lr > 0 and K >= 1 required")
        if self.model not in ("playfusion", "gcbc"):
            raise ConfigError(f"unknown model kind {self.model!r}")
        if not 0.0 < self.quantize_fraction <= 1.0:
            raise ConfigError("quantize_fraction must be in (0, 1]")
        LossWeights(self.beta1, self.beta2)
        ChunkingConfig(self.T_a, self.T_o)

    @property
    def weights(self):
        return LossWeights(self.beta1, self.beta2)

    @property
    def chunking(self):
        return ChunkingConfig(self.T_a, self.T_o)

    def model_config(self, state_dim, action_dim):
        names = {f.name for f in fields(ModelConfig)}
        kw = {k: v for k, v in asdict(self).items() if k in names}
        return ModelConfig(state_dim=state_dim, action_dim=action_dim, **kw)

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def train_config_from_mapping(mapping, overrides=None):
    """Build a TrainConfig from string (or typed) values, rejecting unknown keys."""
    values = dict(mapping)
    values.update(overrides or {})
    defaults = TrainConfig()
    kw = {}
    for key, raw in values.items():
        if not hasattr(defaults, key):
            raise ConfigError(f"unknown training key {key!r}")
        cur = getattr(defaults, key)
        try:
            if isinstance(cur, bool):
                kw[key] = raw if isinstance(raw, bool) else \
                    str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(cur, tuple):
                kw[key] = tuple(int(x) for x in str(raw).replace(",", " ").split()) \
                    if isinstance(raw, str) else tuple(raw)
            elif isinstance(cur, int):
                kw[key] = int(raw)
            elif isinstance(cur, float):
                kw[key] = float(raw)
            else:
                kw[key] = str(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return TrainConfig(**kw)


def load_train_config(path, section="train", overrides=None):
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return train_config_from_mapping(dict(cp[section]) if cp.has_section(section) else {},
                                     overrides)


def build_model(cfg: TrainConfig, vocab, state_dim, action_dim, params=None):
    mcfg = cfg.model_config(state_dim, action_dim)
    if cfg.model == "gcbc":
        model = GCBCModel(mcfg, vocab, params=params, seed=cfg.seed, hidden=cfg.gcbc_hidden)
    else:
        model = PlayFusionModel(mcfg, vocab, params=params, seed=cfg.seed)
    model.schedule = make_schedule(cfg.schedule, cfg.K)
    return model


# ------------------------------------------------------------------ one step

def loss_and_grads(model, batch, schedule, cfg: TrainConfig, rng):
    """Loss breakdown and gradients for one batch.

    Draws k ~ U{1..K} and unit Gaussian noise per sample from ``rng``. For the
    regression baseline no noise is drawn and the loss is the action MSE.
    Returns ``(terms, grads, info)`` where ``info`` holds the drawn k values
    and per-batch code indices.
    """
    if model.kind == "gcbc":
        terms, grads = model.loss_and_grads(batch)
        return terms, grads, {"k": None}
    x0 = batch["actions"]
    k = rng.integers(1, schedule.K + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    xk = forward_noise(schedule, x0, k, eps)
    record = {}
    terms, grads = model.loss_and_grads(batch, xk, k, eps, cfg.beta1, cfg.beta2,
                                        record=record)
    aux = record["aux"]
    info = {"k": k,
            "unet_indices": None if aux["vq_u"] is None else aux["vq_u"].indices,
            "lang_indices": None if aux["vq_l"] is None else aux["vq_l"].indices}
    return terms, grads, info


def _batch_code_stats(indices):
    _, counts = np.unique(np.asarray(indices).ravel(), return_counts=True)
    p = counts / counts.sum()
    return float(np.exp(-(p * np.log(p)).sum())), int(len(counts))


def telemetry_columns(model):
    if model.kind == "gcbc":
        return ["step", "action_mse", "total", "grad_norm"]
    cols = ["step", "denoise_mse"]
    if model.cfg.quantize_unet:
        cols += ["unet_quant", "unet_commit"]
    if model.cfg.quantize_lang:
        cols += ["lang_quant", "lang_commit"]
    cols += ["total"]
    if model.cfg.quantize_unet:
        cols += ["unet_perplexity", "unet_codes_used"]
    if model.cfg.quantize_lang:
        cols += ["lang_perplexity", "lang_codes_used"]
    return cols + ["grad_norm"]


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class Trainer:
    """Owns model, optimizer and RNG; one instance per training run."""

    def __init__(self, store: PlayStore, cfg: TrainConfig, model=None, out_dir=None):
        self.store = store
        self.cfg = cfg
        if cfg.T_a != store.T_a or cfg.T_o != store.T_o:
            raise CheckpointMismatchError(
                f"config chunking (T_a={cfg.T_a}, T_o={cfg.T_o}) differs from store "
                f"(T_a={store.T_a}, T_o={store.T_o})")
        self.vocab = store_vocabulary(store)
        self.model = model or build_model(cfg, self.vocab, store.state_dim, store.action_dim)
        self.schedule = self.model.schedule
        self.opt = nn.Adam(lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.out_dir = out_dir
        self.columns = telemetry_columns(self.model)
        self.rows = []

    @property
    def telemetry_path(self):
        return None if self.out_dir is None else os.path.join(self.out_dir, "telemetry.tsv")

    def _row(self, terms, info, gnorm):
        vals = {"step": self.step, "grad_norm": gnorm, **terms}
        if info.get("unet_indices") is not None:
            vals["unet_perplexity"], vals["unet_codes_used"] = \
                _batch_code_stats(info["unet_indices"])
        if info.get("lang_indices") is not None:
            vals["lang_perplexity"], vals["lang_codes_used"] = \
                _batch_code_stats(info["lang_indices"])
        return "\t".join(_fmt(vals[c]) for c in self.columns)

    def train_step(self):
        batch = sample_batch(self.store, self.rng, self.cfg.batch_size, labeled_only=True)
        terms, grads, info = loss_and_grads(self.model, batch, self.schedule, self.cfg,
                                            self.rng)
        keys = self.model.trainable_keys()
        gnorm = float(np.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in keys)))
        if not (np.isfinite(terms["total"]) and np.isfinite(gnorm)):
            self._diverged(terms, info, gnorm)
        self.opt.step(self.model.params, {k: grads[k] for k in keys})
        self.step += 1
        row = self._row(terms, info, gnorm)
        self.rows.append(row)
        return terms, row

    def _diverged(self, terms, info, gnorm):
        diag = {"step": self.step + 1,
                "k": None if info.get("k") is None else [int(x) for x in info["k"]],
                "terms": {k: float(v) for k, v in terms.items()},
                "grad_norm": gnorm,
                "param_norms": {k: float(np.linalg.norm(v))
                                for k, v in sorted(self.model.params.items())}}
        if self.out_dir is not None:
            with open(os.path.join(self.out_dir, "divergence.json"), "w") as fh:
                json.dump(diag, fh, indent=1, sort_keys=True)
        raise DivergenceError(f"non-finite loss at step {self.step + 1}", diag)

    def run(self, until=None, telemetry_path=None):
        """Train up to step ``until`` (default cfg.steps), appending telemetry."""
        until = self.cfg.steps if until is None else until
        path = telemetry_path or self.telemetry_path
        fh = None
        if path is not None:
            fresh = not os.path.exists(path) or os.path.getsize(path) == 0
            fh = open(path, "a")
            if fresh:
                fh.write("\t".join(self.columns) + "\n")
        try:
            while self.step < until:
                _, row = self.train_step()
                if fh is not None:
                    fh.write(row + "\n")
                every = self.cfg.checkpoint_every
                if every and self.out_dir and self.step % every == 0 and self.step < until:
                    self.save(os.path.join(self.out_dir, f"checkpoint_{self.step:07d}.ckpt"))
        finally:
            if fh is not None:
                fh.close()
        return self

    def save(self, path):
        save_checkpoint(path, self.model, self.store.normalizer, self.store.meta,
                        train_cfg=self.cfg, step=self.step,
                        rng_state=self.rng.bit_generator.state, optimizer=self.opt)

    @classmethod
    def resume(cls, path, store, out_dir=None):
        ck = load_checkpoint(path)
        if ck.train_cfg is None:
            raise CheckpointMismatchError(f"{path} has no training state")
        cfg = train_config_from_mapping(ck.train_cfg)
        if not (np.array_equal(ck.normalizer.low, store.normalizer.low)
                and np.array_equal(ck.normalizer.high, store.normalizer.high)):
            raise CheckpointMismatchError("store normalisation differs from checkpoint")
        tr = cls(store, cfg, model=ck.model, out_dir=out_dir)
        tr.step = ck.step
        tr.rng.bit_generator.state = ck.rng_state
        tr.opt.load_state_arrays(ck.optimizer_arrays, ck.optimizer_t)
        return tr


def train(store, cfg: TrainConfig, out_dir=None, checkpoint_name="final.ckpt"):
    """Run a full training job; returns the Trainer (model, telemetry rows)."""
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        tp = os.path.join(out_dir, "telemetry.tsv")
        if os.path.exists(tp):
            os.remove(tp)
    tr = Trainer(store, cfg, out_dir=out_dir)
    tr.run()
    if out_dir is not None:
        tr.save(os.path.join(out_dir, checkpoint_name))
    return tr


def read_telemetry(path):
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    return header, rows


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: object
    normalizer: Normalizer
    meta: dict
    train_cfg: dict
    step: int
    rng_state: dict
    optimizer_t: int
    optimizer_arrays: dict
    header: dict

    @property
    def world(self):
        from .playworld import world_config_from_mapping
        return world_config_from_mapping(self.meta["world"])

    @property
    def vocab(self):
        return self.model.vocab


def save_checkpoint(path, model, normalizer, meta, train_cfg=None, step=0, rng_state=None,
                    optimizer=None):
    tensors = {f"param/{k}": v for k, v in model.params.items()}
    if model.kind == "playfusion":
        tensors["usage/unet"] = model.book_u.usage_counts
        tensors["usage/language"] = model.book_l.usage_counts
    if optimizer is not None:
        tensors.update({f"opt/{k}": v for k, v in optimizer.state_arrays().items()})
    extra = {}
    if model.kind == "gcbc":
        extra["gcbc_hidden"] = model.hidden
    header = {
        "kind": model.kind,
        "model": model.cfg.to_dict(),
        "extra": extra,
        "train": None if train_cfg is None else train_cfg.to_dict(),
        "meta": meta,
        "schedule": None if model.schedule is None else
        {"kind": model.schedule.kind, "K": model.schedule.K},
        "normalizer": {"low": [float(x) for x in normalizer.low],
                       "high": [float(x) for x in normalizer.high]},
        "step": int(step),
        "rng_state": rng_state,
        "optimizer_t": 0 if optimizer is None else int(optimizer.t),
    }
    htext = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), b"\0" * 8,
             struct.pack("<I", len(htext)), htext, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = 1 if np.issubdtype(arr.dtype, np.integer) else 0
        arr = arr.astype("<i8" if code else "<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    body = bytearray(b"".join(parts))
    struct.pack_into("<Q", body, 12, len(body) + 4)
    body += struct.pack("<I", zlib.crc32(body))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 24:
        raise TruncatedFileError(f"{path}: too short for a checkpoint")
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, "
                                   f"expected {CKPT_VERSION}")
    (declared,) = struct.unpack_from("<Q", buf, 12)
    if len(buf) < declared:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes, header declares {declared}")
    if len(buf) > declared:
        raise FormatError(f"{path}: trailing bytes")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")

    r = _Reader(memoryview(buf)[:-4])
    r.pos = 20
    (hlen,) = r.unpack("<I")
    header = json.loads(bytes(r.take(hlen)).decode("utf-8"))
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (nlen,) = r.unpack("<H")
        name = bytes(r.take(nlen)).decode("utf-8")
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        dt = "<i8" if code else "<f8"
        arr = np.frombuffer(r.take(8 * count), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(np.int64 if code else float)

    meta = header["meta"]
    w = meta["world"]
    vocab = Vocabulary.from_lines(meta["vocab"], w["objects"], w["containers"])
    mcfg = ModelConfig.from_dict(header["model"])
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    if header["kind"] == "gcbc":
        model = GCBCModel(mcfg, vocab, params=params,
                          hidden=header["extra"].get("gcbc_hidden", 256))
    else:
        model = PlayFusionModel(mcfg, vocab, params=params)
        model.book_u.usage_counts[:] = tensors["usage/unet"]
        model.book_l.usage_counts[:] = tensors["usage/language"]
    if header["schedule"] is not None:
        model.schedule = make_schedule(header["schedule"]["kind"], header["schedule"]["K"])
    opt = {k[4:]: v for k, v in tensors.items() if k.startswith("opt/")}
    norm = Normalizer(header["normalizer"]["low"], header["normalizer"]["high"])
    return Checkpoint(model=model, normalizer=norm, meta=meta, train_cfg=header["train"],
                      step=header["step"], rng_state=header["rng_state"],
                      optimizer_t=header["optimizer_t"], optimizer_arrays=opt, header=header)
