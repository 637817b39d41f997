import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from playfusion.dataset import generate_store
from playfusion.errors import CheckpointMismatchError, ConfigError, ShapeError, VocabularyError
from playfusion.goals import build_vocabulary
from playfusion.playworld import ACTION_HIGH, ACTION_LOW, WorldConfig
from playfusion.policy import (RECORD_COLUMNS, RandomPolicy, ScriptedPolicy, policy_from_checkpoint,
                               rollout, rollout_chain, run_rollouts, sample_chunk,
                               write_rollout_records)
from playfusion.trainer import TrainConfig, load_checkpoint, train

W = WorldConfig()
VOCAB = build_vocabulary(W.objects, W.containers)
TINY = dict(steps=3, batch_size=4, lr=1e-3, T_a=8, widths=(8, 8), code_dim=8, groups=4,
            time_embed_dim=8, lang_feat_dim=8, lang_dim=8, lang_hidden=8, state_out=8,
            state_hidden=8, cond_hidden=16, codebook_size_u=16, codebook_size_l=16, K=10)


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("pol")
    store = generate_store(W, 4, seed=0, T_a=8, T_o=2)
    train(store, TrainConfig(**TINY), out_dir=d)
    train(store, TrainConfig(**{**TINY, "model": "gcbc"}), out_dir=d,
          checkpoint_name="gcbc.ckpt")
    return load_checkpoint(d / "final.ckpt"), load_checkpoint(d / "gcbc.ckpt")


def test_sample_chunk_deterministic_and_bounded(ckpt):
    ck, _ = ckpt
    states = np.random.default_rng(0).random((2, W.state_dim))
    a = sample_chunk(ck, 4, states, seed=11)
    b = sample_chunk(ck, 4, states, seed=11)
    c = sample_chunk(ck, 4, states, seed=12)
    assert a.shape == (8, 4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.all(a >= ACTION_LOW) and np.all(a <= ACTION_HIGH)


def test_sample_chunk_errors(ckpt):
    ck, _ = ckpt
    states = np.zeros((2, W.state_dim))
    with pytest.raises(VocabularyError):
        sample_chunk(ck, 27, states, 0)
    with pytest.raises(CheckpointMismatchError):
        sample_chunk(ck, 0, states, 0, T_a=16)
    with pytest.raises(ShapeError):
        sample_chunk(ck, 0, states[:1], 0)
    with pytest.raises(CheckpointMismatchError):
        sample_chunk(ck, 0, np.zeros((2, 7)), 0)


def test_sampling_leaves_codebook_usage_alone(ckpt):
    ck, _ = ckpt
    before = ck.model.book_u.usage_counts.copy()
    sample_chunk(ck, 1, np.zeros((2, W.state_dim)), 0)
    np.testing.assert_array_equal(ck.model.book_u.usage_counts, before)


def test_scripted_policy_succeeds_and_random_does_not():
    pol = ScriptedPolicy(W, VOCAB, T_a=16)
    ids = [VOCAB.ids_for_task(t)[0] for t in W.tasks]
    recs = run_rollouts(pol, W, [[i] for i in ids], list(range(len(ids))), 64)
    assert all(r.success for r in recs)
    rnd = run_rollouts(RandomPolicy(16), W, [[i] for i in ids], list(range(len(ids))), 64)
    assert np.mean([r.success for r in rnd]) < 0.3


def test_zero_budget_and_prefix_validation(ckpt):
    ck, _ = ckpt
    pol = policy_from_checkpoint(ck)
    r = rollout(pol, W, 0, max_steps=0, seed=1)
    assert not r.success and r.steps == 0
    for m in (0, 9):
        with pytest.raises(ConfigError):
            rollout(pol, W, 0, 10, execute_prefix=m)
    with pytest.raises(ConfigError):
        rollout_chain(pol, W, [], 10)
    with pytest.raises(ConfigError):
        run_rollouts(pol, W, [[0], [1]], [0], 10)


def test_rollouts_independent_of_batching(ckpt):
    # batch shape changes BLAS blocking, so only ulp-level agreement is promised
    ck, _ = ckpt
    pol = policy_from_checkpoint(ck)
    chains = [[0], [5], [13], [26]]
    seeds = [3, 4, 5, 6]
    together = run_rollouts(pol, W, chains, seeds, 12, keep_trajectory=True)
    apart = [run_rollouts(pol, W, [c], [s], 12, keep_trajectory=True)[0]
             for c, s in zip(chains, seeds)]
    for a, b in zip(together, apart):
        assert a.steps == b.steps
        for x, y in zip(a.trajectory, b.trajectory):
            np.testing.assert_allclose(x[2], y[2], rtol=0, atol=1e-12)


def test_open_loop_boundary(ckpt):
    ck, _ = ckpt
    pol = policy_from_checkpoint(ck)
    r = rollout(pol, W, 3, 16, execute_prefix=8, seed=2)
    assert r.steps == 16 or r.success


def test_records_file(ckpt, tmp_path):
    _, gk = ckpt
    pol = policy_from_checkpoint(gk)
    recs = run_rollouts(pol, W, [[0], [1]], [0, 1], 5, keep_trajectory=True)
    p = tmp_path / "r.tsv"
    write_rollout_records(recs, p)
    lines = p.read_text().splitlines()
    assert tuple(lines[0].split("\t")) == RECORD_COLUMNS
    assert len(lines) == 1 + sum(len(r.trajectory) for r in recs)
    row = lines[1].split("\t")
    assert len(row[3].split()) == W.state_dim and len(row[4].split()) == 4
    assert len(row[5]) == W.n_objects * W.n_containers


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), b1=st.integers(0, 40), b2=st.integers(0, 40))
def test_chain_count_monotone_in_budget(seed, b1, b2):
    pol = ScriptedPolicy(W, VOCAB, T_a=8)
    lo, hi = sorted((b1, b2))
    chain = [VOCAB.ids_for_task((0, 1))[0], VOCAB.ids_for_task((1, 2))[0],
             VOCAB.ids_for_task((2, 0))[0]]
    a = rollout_chain(pol, W, chain, lo, seed=seed).completed
    b = rollout_chain(pol, W, chain, hi, seed=seed).completed
    assert a <= b


def test_single_instruction_chain_equals_rollout(ckpt):
    ck, _ = ckpt
    pol = policy_from_checkpoint(ck)
    a = rollout_chain(pol, W, [7], 10, seed=9, keep_trajectory=True)
    b = rollout(pol, W, 7, 10, seed=9)
    assert a.completed == int(b.success) and a.steps == b.steps


def test_state_dim_mismatch(ckpt):
    ck, _ = ckpt
    pol = policy_from_checkpoint(ck)
    with pytest.raises(CheckpointMismatchError):
        rollout(pol, WorldConfig(objects=("carrot", "bread")), 0, 5)
