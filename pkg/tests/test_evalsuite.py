import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from playfusion.dataset import generate_store
from playfusion.errors import ConfigError, SplitLeakageError
from playfusion.evalsuite import (VARIANTS, analyze_codebook, bimodality_coefficient,
                                  check_split_leakage, config_hash, eval_chains,
                                  eval_compositional, eval_scaling, eval_seed, eval_success,
                                  far_start_states, initial_headings, mode_report,
                                  sample_chains, success_rate, variant_config, wilson_interval,
                                  write_manifest)
from playfusion.goals import build_vocabulary
from playfusion.playworld import WorldConfig, compositional_split
from playfusion.policy import RandomPolicy, ScriptedPolicy
from playfusion.trainer import TrainConfig, train

W = WorldConfig()
VOCAB = build_vocabulary(W.objects, W.containers)
TINY = TrainConfig(steps=2, batch_size=4, lr=1e-3, T_a=8, widths=(8, 8), code_dim=8, groups=4,
                   time_embed_dim=8, lang_feat_dim=8, lang_dim=8, lang_hidden=8, state_out=8,
                   state_hidden=8, cond_hidden=16, codebook_size_u=16, codebook_size_l=16, K=10)


def wilson_closed_form(k, n, z=stats.norm.ppf(0.975)):
    p = k / n
    centre = (p + z * z / (2 * n)) / (1 + z * z / n)
    half = z / (1 + z * z / n) * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return centre - half, centre + half


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 500), frac=st.floats(0, 1))
def test_wilson_matches_closed_form(n, frac):
    k = int(round(frac * n))
    lo, hi = wilson_interval(k, n)
    elo, ehi = wilson_closed_form(k, n)
    assert lo == pytest.approx(max(elo, 0.0), abs=1e-9)
    assert hi == pytest.approx(min(ehi, 1.0), abs=1e-9)
    assert lo <= k / n <= hi


def test_wilson_empty():
    assert all(np.isnan(wilson_interval(0, 0)))


def test_variant_configs():
    assert variant_config(TINY, "full").quantize_unet and variant_config(TINY, "full").quantize_lang
    assert not variant_config(TINY, "no-unet-vq").quantize_unet
    assert not variant_config(TINY, "no-lang-vq").quantize_lang
    assert variant_config(TINY, "gcbc").model == "gcbc"
    with pytest.raises(ConfigError):
        variant_config(TINY, "bogus")
    hashes = {config_hash(variant_config(TINY, v)) for v in VARIANTS}
    assert len(hashes) == len(VARIANTS)
    assert config_hash(TINY) == config_hash(TINY.replace())


def test_eval_seed_distinct():
    seeds = {eval_seed(0, i, t) for i in range(20) for t in range(20)}
    assert len(seeds) == 400
    assert eval_seed(3, 1, 2) == eval_seed(3, 1, 2)


def test_eval_success_table():
    pol = ScriptedPolicy(W, VOCAB)
    ids = [0, 9, 18]
    tab = eval_success(pol, W, ids, trials=4, seed=1)
    assert tab.column("instruction_id") == ids + ["all"]
    assert tab.column("trials") == [4, 4, 4, 12]
    assert success_rate(tab) == 1.0
    rnd = eval_success(RandomPolicy(), W, ids, trials=4, seed=1)
    assert sum(rnd.column("successes")[:-1]) == rnd.column("successes")[-1]
    with pytest.raises(ConfigError):
        eval_success(pol, W, ids, trials=0)


def test_paired_initial_worlds():
    # two policies with the same base seed see the same initial worlds
    a = eval_success(ScriptedPolicy(W, VOCAB), W, [4], 3, seed=5)
    b = eval_success(ScriptedPolicy(W, VOCAB), W, [4], 3, seed=5)
    assert a.rows == b.rows


def test_sample_chains_distinct_objects():
    chains = sample_chains(VOCAB, W, 3, 50, seed=2)
    assert len(chains) == 50
    for c in chains:
        objs = [VOCAB.task_of(i)[0] for i in c]
        assert len(set(objs)) == 3
    assert chains == sample_chains(VOCAB, W, 3, 50, seed=2)
    with pytest.raises(ConfigError):
        sample_chains(VOCAB, W, 4, 5)
    with pytest.raises(ConfigError):
        sample_chains(VOCAB, W, 0, 5)


def test_eval_chains_scripted_completes_all():
    res = eval_chains(ScriptedPolicy(W, VOCAB), W, VOCAB, n=3, n_chains=16, seed=0, budget=80)
    assert res["mean_completed"] == 3.0
    assert res["histogram"] == [0, 0, 0, 16]
    rnd = eval_chains(RandomPolicy(), W, VOCAB, n=3, n_chains=16, seed=0)
    assert sum(rnd["histogram"]) == 16
    assert rnd["mean_completed"] == pytest.approx(np.mean(rnd["counts"]))


def test_split_leakage_detected():
    split = compositional_split(3, 3)
    ok = generate_store(W, 3, seed=0, T_a=8, allowed_tasks=split["train"])
    check_split_leakage(ok, split["heldout"], VOCAB)
    leaky = generate_store(W, 6, seed=0, T_a=8)
    with pytest.raises(SplitLeakageError):
        check_split_leakage(leaky, split["heldout"], VOCAB)
    with pytest.raises(SplitLeakageError):
        eval_compositional({"s": ScriptedPolicy(W, VOCAB)}, W, split, leaky, VOCAB, trials=1)


def test_eval_compositional_scripted():
    split = compositional_split(3, 3)
    store = generate_store(W, 3, seed=0, T_a=8, allowed_tasks=split["train"])
    tab = eval_compositional({"s": ScriptedPolicy(W, VOCAB), "r": RandomPolicy()}, W, split,
                             store, VOCAB, trials=2)
    assert tab.columns == ["variant", "config_hash", "seen_success", "heldout_success"]
    assert tab.rows[0][2:] == [1.0, 1.0]


def test_eval_scaling_shape():
    store = generate_store(W, 3, seed=0, T_a=8)
    tab = eval_scaling(store, [1, 3], ["gcbc"], TINY, W, VOCAB, seeds=(0,), trials=1,
                       instructions=[0])
    assert tab.column("episodes") == [1, 3]
    with pytest.raises(ConfigError):
        eval_scaling(store, [4], ["gcbc"], TINY, W, VOCAB)
    with pytest.raises(ConfigError):
        eval_scaling(store, [], ["gcbc"], TINY, W, VOCAB)


def test_bimodality_coefficient():
    rng = np.random.default_rng(0)
    uni = rng.normal(size=2000)
    bi = np.concatenate([rng.normal(-3, 0.5, 1000), rng.normal(3, 0.5, 1000)])
    assert bimodality_coefficient(uni) < 5 / 9 < bimodality_coefficient(bi)
    with pytest.raises(ConfigError):
        bimodality_coefficient([1, 2, 3])
    rep = mode_report(bi)
    assert rep["plus"] == pytest.approx(0.5, abs=0.05)
    assert rep["plus"] + rep["minus"] + rep["straight"] == pytest.approx(1.0)


def test_far_starts_and_headings():
    states = far_start_states(W, VOCAB, 3, 20, seed=1)
    o, _ = VOCAB.task_of(3)
    assert all(np.linalg.norm(s.obj_pos[o] - s.agent) >= 0.35 for s in states)
    ang = initial_headings(ScriptedPolicy(W, VOCAB), W, VOCAB, 3, n=20, seed=1)
    assert ang.shape == (20,) and np.all(np.abs(ang) <= np.pi)


def test_analyze_codebook_keeps_usage(tmp_path):
    store = generate_store(W, 3, seed=0, T_a=8)
    tr = train(store, TINY)
    before = tr.model.book_u.usage_counts.copy()
    res = analyze_codebook(tr.model, store, tmp_path / "codes.tsv", max_windows=50)
    np.testing.assert_array_equal(tr.model.book_u.usage_counts, before)
    assert res["windows"] == 50 and res["perplexity"] >= 1.0
    lines = (tmp_path / "codes.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["episode_id", "window_start", "code_index", "instruction_id"]
    assert len(lines) == 51


def test_manifest(tmp_path):
    p = write_manifest(tmp_path, "eval", {"a": 1}, 3, ["b.tsv", "a.tsv"])
    man = json.loads(open(p).read())
    assert man["command"] == "eval" and man["seed"] == 3
    assert man["outputs"] == ["a.tsv", "b.tsv"] and man["git"]
