import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from playfusion.dataset import (MAGIC, Normalizer, PlayStore, gather_windows, generate_store,
                                read_store, sample_batch, store_vocabulary, store_world,
                                write_store)
from playfusion.errors import (ChecksumError, ConfigError, FormatError, TruncatedFileError,
                               VersionMismatchError)
from playfusion.playworld import WorldConfig, compositional_split


@pytest.fixture(scope="module")
def store():
    return generate_store(WorldConfig(segments=2), 12, seed=5, T_a=8, T_o=2)


def test_roundtrip_is_bit_exact(store, tmp_path):
    p = tmp_path / "a.pfd"
    write_store(store, p)
    back = read_store(p)
    assert back == store
    q = tmp_path / "b.pfd"
    write_store(back, q)
    assert p.read_bytes() == q.read_bytes()
    assert p.read_bytes()[:8] == MAGIC


def test_window_count_per_episode(store):
    H = store.episodes[0].length
    expect = H - (store.T_o + store.T_a) + 1
    assert np.all(store.windows_per_episode() == expect)
    assert len(store.windows) == expect * len(store.episodes)


@settings(max_examples=20, deadline=None)
@given(T_a=st.integers(1, 12), T_o=st.integers(1, 4), H=st.integers(2, 30))
def test_window_count_property(T_a, T_o, H):
    cfg = WorldConfig(episode_length=H)
    if H < T_a + T_o:
        with pytest.raises(ConfigError):
            sample_batch(generate_store(cfg, 2, seed=1, T_a=T_a, T_o=T_o), 0, 4)
        return
    s = generate_store(cfg, 2, seed=1, T_a=T_a, T_o=T_o)
    assert np.all(s.windows_per_episode() == H - (T_o + T_a) + 1)


def test_window_alignment(store):
    b = gather_windows(store, store.windows[[0, 5, 17]])
    for (e, w), st_, act, ins in zip(b["windows"], b["states"], b["actions"], b["instr"]):
        ep = store.episodes[e]
        np.testing.assert_array_equal(st_, ep.states[w:w + store.T_o])
        raw = store.normalizer.unnormalize(act)
        np.testing.assert_allclose(raw, ep.actions[w + store.T_o - 1:][:store.T_a], atol=1e-12)
        assert ins == ep.label_at(w + store.T_o - 1)


def test_normalizer_roundtrip_and_range():
    rng = np.random.default_rng(0)
    a = rng.uniform(-3, 5, (200, 4))
    a[:, 3] = 0.25     # constant column
    n = Normalizer.fit(a)
    x = n.normalize(a)
    assert x[:, :3].min() == pytest.approx(-1) and x[:, :3].max() == pytest.approx(1)
    np.testing.assert_allclose(n.unnormalize(x), a, atol=1e-12)


def test_sampling_is_seeded_and_labeled(store):
    a = sample_batch(store, 3, 16, labeled_only=True)
    b = sample_batch(store, np.random.default_rng(3), 16, labeled_only=True)
    np.testing.assert_array_equal(a["windows"], b["windows"])
    assert np.all(a["instr"] >= 0)
    assert a["actions"].shape == (16, store.T_a, store.action_dim)
    assert a["states"].shape == (16, store.T_o, store.state_dim)


def test_meta_recovers_world_and_vocabulary(store):
    w = store_world(store)
    assert w == WorldConfig(segments=2)
    v = store_vocabulary(store)
    assert len(v) == 27
    for lbl in store.labels():
        if lbl >= 0:
            assert 0 <= lbl < len(v)


def test_subset(store):
    s = store.subset(3)
    assert len(s.episodes) == 3
    assert np.array_equal(s.normalizer.low, store.normalizer.low)
    with pytest.raises(ConfigError):
        store.subset(0)


def test_allowed_tasks_only():
    split = compositional_split(3, 3)
    s = generate_store(WorldConfig(), 30, seed=2, allowed_tasks=split["train"])
    v = store_vocabulary(s)
    held = {tuple(t) for t in split["heldout"]}
    assert all(tuple(v.task_of(l)) not in held for l in s.labels() if l >= 0)


def test_bad_constructor_args(store):
    with pytest.raises(ConfigError):
        PlayStore([], 4, 2)
    with pytest.raises(ConfigError):
        PlayStore(store.episodes, 0, 2)
    with pytest.raises(ConfigError):
        generate_store(WorldConfig(), 0)


# ---------------------------------------------------------------- corruption

@pytest.fixture()
def blob(store, tmp_path):
    p = tmp_path / "s.pfd"
    write_store(store, p)
    return p, p.read_bytes()


def test_truncated(blob):
    p, data = blob
    for n in (5, 30, len(data) // 2, len(data) - 1):
        p.write_bytes(data[:n])
        with pytest.raises(TruncatedFileError):
            read_store(p)


def test_trailing_bytes(blob):
    p, data = blob
    p.write_bytes(data + b"\0")
    with pytest.raises(FormatError):
        read_store(p)


def test_bad_magic_and_version(blob):
    p, data = blob
    p.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(FormatError):
        read_store(p)
    p.write_bytes(data[:8] + struct.pack("<I", 2) + data[12:])
    with pytest.raises(VersionMismatchError):
        read_store(p)


@settings(max_examples=25, deadline=None)
@given(frac=st.floats(0.05, 0.999), bit=st.integers(0, 7))
def test_any_payload_bit_flip_is_detected(store, tmp_path_factory, frac, bit):
    p = tmp_path_factory.mktemp("flip") / "s.pfd"
    write_store(store, p)
    data = bytearray(p.read_bytes())
    i = 20 + int(frac * (len(data) - 24))
    data[i] ^= 1 << bit
    p.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        read_store(p)
