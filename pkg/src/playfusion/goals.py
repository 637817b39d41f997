"""Goal conditioning: instruction vocabulary, language and state encoders.

The conditioning vector is ``[lang_part, state_part]``. ``lang_part`` is the
language MLP applied to a fixed sentence feature of the instruction, then
optionally snapped to the language codebook. ``state_part`` is an MLP over
the flattened window of the last ``T_o`` state vectors.

Sentence features stand in for a frozen pre-trained sentence encoder: each
word gets a pseudo-random Gaussian vector seeded by a CRC of the word, and a
sentence is the weighted mean of its word vectors. Weights are inverse
document frequencies over the vocabulary, so filler words shared by every
instruction ("the", "in") drop out and the object and container words
dominate. Paraphrases of one task share those word vectors, and unseen
object/container pairings are built from seen words.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ShapeError, VocabularyError
from .quantizer import Codebook, frozen_surrogate, init_codebook, quantize, vq_backward

TEMPLATES = (
    "put the {o} in the {c}",
    "move the {o} into the {c}",
    "place the {o} inside the {c}",
    "drop the {o} into the {c}",
)


@dataclass(frozen=True)
class Instruction:
    id: int
    text: str
    task: tuple  # (object index, container index)


class Vocabulary:
    """Closed set of templated instructions, ``n_paraphrases`` per task."""

    def __init__(self, instructions, objects, containers):
        self.instructions = list(instructions)
        self.objects = tuple(objects)
        self.containers = tuple(containers)
        for i, ins in enumerate(self.instructions):
            if ins.id != i:
                raise VocabularyError(f"instruction ids must be 0..n-1, got {ins.id} at {i}")

    def __len__(self):
        return len(self.instructions)

    def __getitem__(self, i):
        if not 0 <= i < len(self.instructions):
            raise VocabularyError(f"instruction id {i} not in vocabulary of {len(self)}")
        return self.instructions[i]

    def task_of(self, instr_id):
        return self[instr_id].task

    def ids_for_task(self, task):
        return [ins.id for ins in self.instructions if ins.task == tuple(task)]

    def save(self, path):
        with open(path, "w") as fh:
            for ins in self.instructions:
                fh.write(f"{ins.id}\t{ins.text}\n")

    def lines(self):
        return [f"{ins.id}\t{ins.text}" for ins in self.instructions]

    @classmethod
    def from_lines(cls, lines, objects, containers):
        out = []
        for line in lines:
            line = line.rstrip("\n")
            if not line:
                continue
            i, text = line.split("\t", 1)
            out.append(Instruction(int(i), text, _parse_task(text, objects, containers)))
        return cls(out, objects, containers)

    @classmethod
    def load(cls, path, objects, containers):
        with open(path) as fh:
            return cls.from_lines(fh.readlines(), objects, containers)


def _parse_task(text, objects, containers):
    words = text.split()
    try:
        o = next(i for i, name in enumerate(objects) if name in words)
        c = next(i for i, name in enumerate(containers) if name in words)
    except StopIteration:
        raise VocabularyError(f"cannot resolve task of instruction {text!r}") from None
    return (o, c)


def build_vocabulary(objects, containers, n_paraphrases=3):
    if not 1 <= n_paraphrases <= len(TEMPLATES):
        raise VocabularyError(f"n_paraphrases must be in [1, {len(TEMPLATES)}]")
    out = []
    for o, obj in enumerate(objects):
        for c, cont in enumerate(containers):
            for p in range(n_paraphrases):
                out.append(Instruction(len(out), TEMPLATES[p].format(o=obj, c=cont), (o, c)))
    return Vocabulary(out, objects, containers)


def word_vector(word, dim):
    rng = np.random.default_rng(zlib.crc32(word.encode("utf-8")))
    return rng.standard_normal(dim)


def sentence_features(text, dim, weights=None):
    """Weighted mean of word vectors; unknown or zero-weight words are skipped
    unless every word would be, in which case the plain mean is used."""
    words = text.lower().split()
    if not words:
        raise VocabularyError("empty instruction text")
    w = np.array([1.0 if weights is None else weights.get(x, 0.0) for x in words])
    if w.sum() <= 0:
        w = np.ones(len(words))
    vecs = np.stack([word_vector(x, dim) for x in words])
    return w @ vecs / w.sum()


def idf_weights(texts):
    """log(N / df) per word over a list of sentences."""
    docs = [set(t.lower().split()) for t in texts]
    n = len(docs)
    df = {}
    for d in docs:
        for word in d:
            df[word] = df.get(word, 0) + 1
    return {word: float(np.log(n / c)) for word, c in df.items()}


def language_table(vocab: Vocabulary, dim):
    """Frozen instruction feature table, one row per instruction id."""
    texts = [ins.text for ins in vocab.instructions]
    weights = idf_weights(texts)
    return np.stack([sentence_features(t, dim, weights) for t in texts])


def pad_window(history, T_o):
    """Last ``T_o`` states of ``history``, left-padded by repeating the first."""
    history = np.asarray(history)
    if len(history) == 0:
        raise ShapeError("empty state history")
    if len(history) >= T_o:
        return history[-T_o:]
    pad = np.repeat(history[:1], T_o - len(history), axis=0)
    return np.concatenate([pad, history], axis=0)


@dataclass(frozen=True)
class GoalConfig:
    lang_feat_dim: int = 32
    lang_dim: int = 64
    state_dim: int = 24
    T_o: int = 2
    state_hidden: int = 128
    state_out: int = 64
    lang_hidden: int = 128
    codebook_size: int = 2048

    @property
    def out_dim(self):
        return self.lang_dim + self.state_out


class GoalEncoder:
    """phi_l (language MLP + optional codebook) and phi_v (state-window MLP)."""

    codebook_key = "codebook_l"

    def __init__(self, cfg: GoalConfig):
        self.cfg = cfg
        self.phi_l = nn.MLP("phi_l", cfg.lang_feat_dim, cfg.lang_hidden, cfg.lang_dim)
        self.phi_v = nn.MLP("phi_v", cfg.T_o * cfg.state_dim, cfg.state_hidden, cfg.state_out)

    def init(self, params, rng, with_codebook=True):
        self.phi_l.init(params, rng)
        self.phi_v.init(params, rng)
        if with_codebook:
            params[self.codebook_key] = init_codebook(
                self.cfg.codebook_size, self.cfg.lang_dim, rng, name="language").codes

    def encode_state(self, p, windows):
        windows = np.asarray(windows, dtype=float)
        if windows.shape[1:] != (self.cfg.T_o, self.cfg.state_dim):
            raise ShapeError(f"state window shape {windows.shape[1:]} != "
                             f"({self.cfg.T_o}, {self.cfg.state_dim})")
        return self.phi_v.forward(p, windows.reshape(len(windows), -1))

    def forward(self, p, lang_feats, windows, book: Codebook = None, quantize_lang=False,
                record_usage=True, frozen=None):
        """Returns (lang_part, state_part, vq_result, cache).

        ``frozen = (indices, latents_ref, codes_ref)`` evaluates the
        straight-through surrogate instead of a fresh lookup (used for
        finite-difference checks only).
        """
        z, cl = self.phi_l.forward(p, lang_feats)
        vq = None
        lang = z
        if quantize_lang:
            if frozen is None:
                vq = quantize(book, z, record_usage=record_usage)
                lang = vq.quantized
            else:
                vq, lang = frozen_surrogate(book, z, frozen)
        state, cv = self.encode_state(p, windows)
        return lang, state, vq, (cl, cv)

    def backward(self, p, grads, cache, d_lang, d_state, book=None, vq=None, weight=0.0,
                 record=None):
        cl, cv = cache
        dz = d_lang
        if vq is not None:
            dz, dcodes = vq_backward(book, vq, d_lang, weight, weight)
            grads[self.codebook_key] = grads.get(self.codebook_key, 0.0) + dcodes
        if record is not None:
            record["d_lang_quantized"] = d_lang
            record["d_lang_latent"] = dz
        self.phi_l.backward(p, grads, cl, dz)
        self.phi_v.backward(p, grads, cv, d_state)


# -- single-item helpers --------------------------------------------------

def embed_instruction(table, params, encoder: GoalEncoder, instr_id, book=None,
                      quantize_lang=True):
    """Language part of the goal for one instruction id."""
    if not 0 <= instr_id < len(table):
        raise VocabularyError(f"instruction id {instr_id} not in table of {len(table)}")
    z, _ = encoder.phi_l.forward(params, table[instr_id][None])
    if not quantize_lang:
        return z[0], None
    res = quantize(book, z, record_usage=False)
    return res.quantized[0], res


def encode_state(params, encoder: GoalEncoder, states):
    """State part of the goal for one window of exactly ``T_o`` states."""
    states = np.asarray(states, dtype=float)
    if len(states) != encoder.cfg.T_o:
        raise ShapeError(f"expected {encoder.cfg.T_o} states, got {len(states)}")
    out, _ = encoder.encode_state(params, states[None])
    return out[0]
