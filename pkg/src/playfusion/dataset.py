"""Play-data store: binary file format, windowing and batch sampling.

File layout (all integers and floats little-endian)::

    offset  size           field
    0       8              magic  b"PFPLAY\\x00\\x01"
    8       4   u32        format version (1)
    12      8   u64        total file length in bytes, checksum included
    20      16  4 x u32    state_dim, action_dim, T_a, T_o
    36      8*A f64        per-dimension action low  (A = action_dim)
    ..      8*A f64        per-dimension action high
    ..      4   u32        n_episodes
    ..      4   u32        n_segments (total over all episodes)
    ..      4   u32        header text length N
    ..      N              UTF-8 JSON text header (world config, vocabulary lines)
    ..      24 * n_episodes   episode table, one record per episode:
                              u32 episode_id, u32 H, u32 first_segment,
                              u32 n_segments, u64 payload offset
    ..      16 * n_segments   segment table: u32 start, u32 end, i32 label,
                              i32 path family (x1000, rounded)
    ..      payload        per episode: f64[H * state_dim] states then
                           f64[H * action_dim] raw (unnormalised) actions,
                           then f64[state_dim] final state
    end-4   4   u32        CRC-32 of every preceding byte

Actions are stored raw; the affine map to [-1, 1] uses the stored low/high.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (ChecksumError, ConfigError, FormatError, TruncatedFileError,
                     VersionMismatchError)

MAGIC = b"PFPLAY\x00\x01"
VERSION = 1
_EP = struct.Struct("<IIIIQ")
_SEG = struct.Struct("<IIii")


@dataclass
class StoredEpisode:
    episode_id: int
    states: np.ndarray
    actions: np.ndarray
    segments: list
    families: list
    final_state: np.ndarray

    @property
    def length(self):
        return len(self.actions)

    def label_at(self, t):
        for start, end, label in self.segments:
            if start <= t < end:
                return label
        return -1


class Normalizer:
    """Per-dimension affine map of actions onto [-1, 1]."""

    def __init__(self, low, high):
        self.low = np.asarray(low, dtype=float)
        self.high = np.asarray(high, dtype=float)
        span = self.high - self.low
        self.span = np.where(span > 1e-12, span, 1.0)

    @classmethod
    def fit(cls, actions):
        actions = np.asarray(actions, dtype=float)
        return cls(actions.min(axis=0), actions.max(axis=0))

    def normalize(self, a):
        return 2.0 * (np.asarray(a) - self.low) / self.span - 1.0

    def unnormalize(self, x):
        return (np.asarray(x) + 1.0) / 2.0 * self.span + self.low


class PlayStore:
    def __init__(self, episodes, T_a, T_o, normalizer=None, meta=None):
        self.episodes = list(episodes)
        self.T_a, self.T_o = int(T_a), int(T_o)
        if self.T_a < 1 or self.T_o < 1:
            raise ConfigError("T_a and T_o must be >= 1")
        if not self.episodes:
            raise ConfigError("store needs at least one episode")
        self.state_dim = self.episodes[0].states.shape[1]
        self.action_dim = self.episodes[0].actions.shape[1]
        if normalizer is None:
            normalizer = Normalizer.fit(np.concatenate([e.actions for e in self.episodes]))
        self.normalizer = normalizer
        self.meta = dict(meta or {})
        self.windows = self._index()
        labels = np.array([self.window_label(e, w) for e, w in self.windows], dtype=np.int64)
        self.labeled_windows = self.windows[labels >= 0]

    def _index(self):
        span = self.T_o + self.T_a
        out = []
        for i, ep in enumerate(self.episodes):
            for w in range(ep.length - span + 1):
                out.append((i, w))
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    def windows_per_episode(self):
        return np.bincount(self.windows[:, 0], minlength=len(self.episodes))

    def window_label(self, ep_index, start):
        return self.episodes[ep_index].label_at(start + self.T_o - 1)

    def labels(self):
        return {int(lbl) for ep in self.episodes for _, _, lbl in ep.segments}

    def subset(self, n_episodes):
        if n_episodes < 1 or n_episodes > len(self.episodes):
            raise ConfigError(f"subset size {n_episodes} outside [1, {len(self.episodes)}]")
        return PlayStore(self.episodes[:n_episodes], self.T_a, self.T_o, self.normalizer,
                         self.meta)

    def __eq__(self, other):
        if not isinstance(other, PlayStore):
            return NotImplemented
        if (self.T_a, self.T_o, len(self.episodes)) != (other.T_a, other.T_o,
                                                         len(other.episodes)):
            return False
        if not (np.array_equal(self.normalizer.low, other.normalizer.low)
                and np.array_equal(self.normalizer.high, other.normalizer.high)):
            return False
        for a, b in zip(self.episodes, other.episodes):
            if a.episode_id != b.episode_id or [tuple(s) for s in a.segments] != \
                    [tuple(s) for s in b.segments]:
                return False
            if not (np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
                    and np.array_equal(a.final_state, b.final_state)):
                return False
        return self.meta == other.meta


def from_play_episodes(play_episodes, T_a, T_o, meta=None, instruction_of=None):
    """Wrap generated episodes; ``instruction_of(task_id, rng_index)`` maps a
    hindsight task label to an instruction id (e.g. picking a paraphrase)."""
    eps = []
    for i, pe in enumerate(play_episodes):
        segs = []
        for j, (s, e, lbl) in enumerate(pe.segments):
            if instruction_of is not None and lbl >= 0:
                lbl = instruction_of(lbl, i * 1000 + j)
            segs.append((int(s), int(e), int(lbl)))
        eps.append(StoredEpisode(episode_id=int(pe.episode_id),
                                 states=pe.states, actions=pe.actions, segments=segs,
                                 families=list(pe.families), final_state=pe.final_state))
    return PlayStore(eps, T_a, T_o, meta=meta)


def write_store(store: PlayStore, path):
    eps = store.episodes
    header = json.dumps(store.meta, sort_keys=True).encode("utf-8")
    n_seg = sum(len(e.segments) for e in eps)
    A = store.action_dim

    fixed = (MAGIC + struct.pack("<I", VERSION) + b"\0" * 8
             + struct.pack("<IIII", store.state_dim, A, store.T_a, store.T_o)
             + store.normalizer.low.astype("<f8").tobytes()
             + store.normalizer.high.astype("<f8").tobytes()
             + struct.pack("<III", len(eps), n_seg, len(header)) + header)
    payload_start = len(fixed) + _EP.size * len(eps) + _SEG.size * n_seg
    ep_table, seg_table, payload = [], [], []
    offset, first = payload_start, 0
    for e in eps:
        ep_table.append(_EP.pack(e.episode_id, e.length, first, len(e.segments), offset))
        for j, (s, t, lbl) in enumerate(e.segments):
            fam = e.families[j] if j < len(e.families) else 0.0
            seg_table.append(_SEG.pack(s, t, lbl, int(round(fam * 1000))))
        first += len(e.segments)
        blob = (e.states.astype("<f8").tobytes() + e.actions.astype("<f8").tobytes()
                + np.asarray(e.final_state, dtype="<f8").tobytes())
        payload.append(blob)
        offset += len(blob)
    body = bytearray(fixed + b"".join(ep_table) + b"".join(seg_table) + b"".join(payload))
    struct.pack_into("<Q", body, 12, len(body) + 4)
    body += struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as fh:
        fh.write(body)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"unexpected end of data at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def floats(self, n):
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(float)


def read_store(path) -> PlayStore:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 20:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes is shorter than the fixed header")
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: not a play store (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: store version {version}, expected {VERSION}")
    (declared,) = struct.unpack_from("<Q", buf, 12)
    if len(buf) < declared:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes, header declares {declared}")
    if len(buf) > declared:
        raise FormatError(f"{path}: {len(buf) - declared} trailing bytes")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")

    r = _Reader(memoryview(buf)[:-4])
    r.pos = 20
    S, A, T_a, T_o = r.unpack("<IIII")
    low, high = r.floats(A), r.floats(A)
    n_ep, n_seg, n_hdr = r.unpack("<III")
    meta = json.loads(bytes(r.take(n_hdr)).decode("utf-8"))
    ep_rows = [_EP.unpack(r.take(_EP.size)) for _ in range(n_ep)]
    seg_rows = [_SEG.unpack(r.take(_SEG.size)) for _ in range(n_seg)]
    episodes = []
    for eid, H, first, cnt, offset in ep_rows:
        r.pos = offset
        states = r.floats(H * S).reshape(H, S)
        actions = r.floats(H * A).reshape(H, A)
        final = r.floats(S)
        segs = [(s, e, lbl) for s, e, lbl, _ in seg_rows[first:first + cnt]]
        fams = [f / 1000.0 for *_, f in seg_rows[first:first + cnt]]
        episodes.append(StoredEpisode(eid, states, actions, segs, fams, final))
    return PlayStore(episodes, T_a, T_o, Normalizer(low, high), meta)


def gather_windows(store: PlayStore, windows):
    """Batch dict for explicit (episode index, start) windows."""
    windows = np.asarray(windows, dtype=np.int64).reshape(-1, 2)
    B = len(windows)
    T_o, T_a = store.T_o, store.T_a
    states = np.zeros((B, T_o, store.state_dim))
    actions = np.zeros((B, T_a, store.action_dim))
    instr = np.zeros(B, dtype=np.int64)
    for b, (e, w) in enumerate(windows):
        ep = store.episodes[e]
        states[b] = ep.states[w:w + T_o]
        actions[b] = ep.actions[w + T_o - 1:w + T_o - 1 + T_a]
        instr[b] = ep.label_at(w + T_o - 1)
    return {"states": states, "actions": store.normalizer.normalize(actions),
            "instr": instr, "windows": windows}


def sample_batch(store: PlayStore, rng, batch_size, labeled_only=False):
    """Uniformly sampled windows. ``rng`` is a numpy Generator or an int seed.

    ``labeled_only`` restricts sampling to windows whose current step carries
    an instruction label (training needs one).
    """
    pool = store.labeled_windows if labeled_only else store.windows
    if len(pool) == 0:
        raise ConfigError("store has no complete windows" + (" with a label" if labeled_only
                                                              else ""))
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    idx = rng.integers(0, len(pool), size=batch_size)
    return gather_windows(store, pool[idx])


def generate_store(world_cfg, n_episodes, seed=0, T_a=16, T_o=2, allowed_tasks=None,
                   n_paraphrases=3):
    """Scripted play episodes wrapped as a store.

    Hindsight task labels are turned into instruction ids by picking one of
    the task's paraphrases at random. World config, vocabulary and task list
    are kept in the store header.
    """
    from .goals import build_vocabulary
    from .playworld import script_play

    if n_episodes < 1:
        raise ConfigError("need at least one episode")
    vocab = build_vocabulary(world_cfg.objects, world_cfg.containers, n_paraphrases)
    seeds = np.random.SeedSequence(seed).generate_state(n_episodes)
    episodes = []
    for i, s in enumerate(seeds):
        ep = script_play(world_cfg, int(s), allowed_tasks=allowed_tasks)
        ep.episode_id = i
        episodes.append(ep)
    pick = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    def instruction_of(task, _):
        return int(task * n_paraphrases + pick.integers(n_paraphrases))

    tasks = world_cfg.tasks if allowed_tasks is None else [tuple(t) for t in allowed_tasks]
    meta = {"world": world_cfg.to_dict(), "vocab": vocab.lines(),
            "n_paraphrases": n_paraphrases, "tasks": [list(t) for t in tasks], "seed": seed}
    return from_play_episodes(episodes, T_a, T_o, meta=meta, instruction_of=instruction_of)


def store_vocabulary(store):
    from .goals import Vocabulary
    w = store.meta["world"]
    return Vocabulary.from_lines(store.meta["vocab"], w["objects"], w["containers"])


def store_world(store):
    from .playworld import world_config_from_mapping
    return world_config_from_mapping(store.meta["world"])
