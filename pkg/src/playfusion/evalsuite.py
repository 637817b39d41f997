"""Experiment harness: success tables, chains, compositional and scaling
studies, the regression baseline and multimodality / codebook analyses.

Every evaluation seed is derived from (base seed, instruction id, trial), so
two policies evaluated with the same base seed face the same initial worlds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import subprocess
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .dataset import PlayStore
from .errors import ConfigError, SplitLeakageError
from .goals import pad_window
from .playworld import heading_family, relative_heading, reset
from .policy import run_rollouts
from .trainer import TrainConfig, train

VARIANTS = ("full", "no-unet-vq", "no-lang-vq", "gcbc")


def config_hash(cfg):
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg)
    text = json.dumps(d, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def variant_config(base: TrainConfig, name):
    if name == "full":
        return base.replace(model="playfusion", quantize_unet=True, quantize_lang=True)
    if name == "no-unet-vq":
        return base.replace(model="playfusion", quantize_unet=False, quantize_lang=True)
    if name == "no-lang-vq":
        return base.replace(model="playfusion", quantize_unet=True, quantize_lang=False)
    if name == "no-vq":
        return base.replace(model="playfusion", quantize_unet=False, quantize_lang=False)
    if name == "gcbc":
        return base.replace(model="gcbc", quantize_unet=False, quantize_lang=False)
    raise ConfigError(f"unknown variant {name!r}")


def wilson_interval(successes, trials, level=0.95):
    if trials == 0:
        return float("nan"), float("nan")
    ci = stats.binomtest(int(successes), int(trials)).proportion_ci(level, method="wilson")
    return float(ci.low), float(ci.high)


def eval_seed(base, instr, trial):
    return int(np.random.SeedSequence([int(base), int(instr), int(trial)]).generate_state(1)[0])


# ----------------------------------------------------------------- tables

@dataclass
class Table:
    columns: list
    rows: list

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(x) if isinstance(x, float) else x for x in r])

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def eval_success(policy, world_cfg, instructions, trials, seed=0, budget=64,
                 execute_prefix=None, tag=""):
    """Per-instruction success with Wilson 95% intervals, plus an 'all' row."""
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    chains, seeds, owner = [], [], []
    for i in instructions:
        for j in range(trials):
            chains.append([int(i)])
            seeds.append(eval_seed(seed, i, j))
            owner.append(int(i))
    recs = run_rollouts(policy, world_cfg, chains, seeds, budget, execute_prefix)
    ok = np.array([r.success for r in recs])
    owner = np.array(owner)
    rows = []
    for i in instructions:
        s = ok[owner == i]
        lo, hi = wilson_interval(s.sum(), len(s))
        rows.append([tag, int(i), len(s), int(s.sum()), float(s.mean()), lo, hi])
    lo, hi = wilson_interval(ok.sum(), len(ok))
    rows.append([tag, "all", len(ok), int(ok.sum()), float(ok.mean()), lo, hi])
    return Table(["config_hash", "instruction_id", "trials", "successes", "rate",
                  "ci_low", "ci_high"], rows)


def success_rate(table: Table):
    return table.rows[-1][4]


def sample_chains(vocab, world_cfg, n, n_chains, seed=0, tasks=None):
    """Instruction chains of length ``n`` over distinct objects."""
    if n < 1 or n > world_cfg.n_objects:
        raise ConfigError(f"chain length must be in [1, {world_cfg.n_objects}]")
    tasks = world_cfg.tasks if tasks is None else [tuple(t) for t in tasks]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    chains = []
    for _ in range(n_chains):
        objs = rng.permutation(world_cfg.n_objects)[:n]
        chain = []
        for o in objs:
            opts = [t for t in tasks if t[0] == o] or [t for t in world_cfg.tasks if t[0] == o]
            task = opts[rng.integers(len(opts))]
            ids = vocab.ids_for_task(task)
            chain.append(ids[rng.integers(len(ids))])
        chains.append(chain)
    return chains


def eval_chains(policy, world_cfg, vocab, n=3, n_chains=128, seed=0, budget=64,
                tasks=None, execute_prefix=None):
    """Mean completed-prefix count over ``n_chains`` chains of ``n`` instructions."""
    chains = sample_chains(vocab, world_cfg, n, n_chains, seed, tasks)
    seeds = [eval_seed(seed, 10_000 + c, 0) for c in range(n_chains)]
    recs = run_rollouts(policy, world_cfg, chains, seeds, budget, execute_prefix)
    counts = np.array([r.completed for r in recs])
    return {"mean_completed": float(counts.mean()),
            "histogram": np.bincount(counts, minlength=n + 1).tolist(),
            "chains": chains, "counts": counts.tolist()}


# ----------------------------------------------------------------- training

def baseline_gcbc_train(store, cfg: TrainConfig, out_dir=None):
    """Regression baseline with the same data, seeds and goal encoders."""
    return train(store, variant_config(cfg, "gcbc"), out_dir=out_dir)


def train_variant(store, base: TrainConfig, variant, seed, out_dir=None):
    cfg = variant_config(base, variant).replace(seed=int(seed))
    return train(store, cfg, out_dir=out_dir)


def check_split_leakage(store: PlayStore, heldout, vocab):
    held = {tuple(t) for t in heldout}
    for ep in store.episodes:
        for _, _, label in ep.segments:
            if label >= 0 and tuple(vocab.task_of(label)) in held:
                raise SplitLeakageError(
                    f"held-out task {vocab.task_of(label)} annotated in episode {ep.episode_id}")


def eval_compositional(policies, world_cfg, split, store, vocab, trials=20, seed=0,
                       budget=64, hashes=None):
    """Seen and held-out success per variant.

    ``policies`` maps a variant name to a policy trained on ``store``. Raises
    SplitLeakageError when the store annotates a held-out task.
    """
    check_split_leakage(store, split["heldout"], vocab)
    hashes = hashes or {}
    seen = [vocab.ids_for_task(t)[0] for t in split["train"]]
    held = [vocab.ids_for_task(t)[0] for t in split["heldout"]]
    rows = []
    for name, pol in policies.items():
        s = success_rate(eval_success(pol, world_cfg, seen, trials, seed, budget))
        h = success_rate(eval_success(pol, world_cfg, held, trials, seed, budget))
        rows.append([name, hashes.get(name, ""), s, h])
    return Table(["variant", "config_hash", "seen_success", "heldout_success"], rows)


def eval_scaling(store, sizes, variants, base: TrainConfig, world_cfg, vocab, seeds=(0,),
                 trials=20, eval_seed_base=0, budget=64, instructions=None):
    """Retrain each variant on the first ``size`` episodes with a fixed step budget."""
    sizes = [int(s) for s in sizes]
    if not sizes or min(sizes) < 1:
        raise ConfigError("dataset sizes must be >= 1")
    if max(sizes) > len(store.episodes):
        raise ConfigError(f"size {max(sizes)} exceeds {len(store.episodes)} episodes")
    from .policy import policy_from_trainer
    if instructions is None:
        tasks = sorted({tuple(vocab.task_of(l)) for l in store.labels() if l >= 0})
        instructions = [vocab.ids_for_task(t)[0] for t in tasks]
    rows = []
    for variant in variants:
        for size in sizes:
            sub = store.subset(size)
            for s in seeds:
                tr = train_variant(sub, base, variant, s)
                pol = policy_from_trainer(tr)
                rate = success_rate(eval_success(pol, world_cfg, instructions, trials,
                                                 eval_seed_base, budget))
                rows.append([variant, config_hash(tr.cfg), size, int(s), rate])
    return Table(["variant", "config_hash", "episodes", "seed", "success"], rows)


# ----------------------------------------------------------------- analyses

def far_start_states(world_cfg, vocab, instr, n, seed=0, min_dist=0.35):
    """Initial states whose target object is at least ``min_dist`` from the agent."""
    o, _ = vocab.task_of(int(instr))
    out = []
    k = 0
    while len(out) < n:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 99, k]))
        s = reset(world_cfg, rng, free_objects=[o])
        k += 1
        if np.linalg.norm(s.obj_pos[o] - s.agent) >= min_dist:
            out.append(s)
    return out


def initial_headings(policy, world_cfg, vocab, instr, n=500, seed=0, n_actions=4,
                     states=None):
    """Heading of the first ``n_actions`` planned moves relative to the straight
    line from agent to target object; one sample per (start state, seed)."""
    o, _ = vocab.task_of(int(instr))
    if states is None:
        states = far_start_states(world_cfg, vocab, instr, n, seed)
    windows = np.stack([pad_window(s.vector()[None], policy.T_o) for s in states])
    rngs = [np.random.default_rng(np.random.SeedSequence([seed, 5, i]))
            for i in range(len(states))]
    instrs = np.full(len(states), int(instr))
    chunks = []
    for b in range(0, len(states), 256):
        sl = slice(b, b + 256)
        chunks.append(policy.plan(states[sl], windows[sl], instrs[sl], rngs[sl]))
    chunks = np.concatenate(chunks)
    starts = np.array([s.agent for s in states])
    targets = np.array([s.obj_pos[o] for s in states])
    return relative_heading(chunks[:, :n_actions], starts, targets)


def bimodality_coefficient(x):
    """Sarle's bimodality coefficient; values above 5/9 suggest two modes."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4:
        raise ConfigError("need at least 4 samples")
    g = stats.skew(x, bias=False)
    k = stats.kurtosis(x, bias=False)
    return float((g * g + 1.0) / (k + 3.0 * (n - 1) ** 2 / ((n - 2) * (n - 3))))


def mode_report(angles, threshold=np.pi / 12):
    fam = heading_family(angles, threshold)
    return {"plus": float(np.mean(fam == 1)), "minus": float(np.mean(fam == -1)),
            "straight": float(np.mean(fam == 0)),
            "bimodality": bimodality_coefficient(angles),
            "mean_deg": float(np.degrees(np.mean(angles))),
            "n": int(len(angles))}


def analyze_codebook(model, store, path=None, step=1, seed=0, max_windows=4000):
    """Usage metrics of the U-Net codebook over dataset windows and the
    same-instruction vs disjoint-instruction code overlap rates."""
    from .quantizer import codebook_metrics, code_overlap_rates, export_code_assignments

    windows = store.labeled_windows
    if len(windows) > max_windows:
        rng = np.random.default_rng(seed)
        windows = windows[np.sort(rng.choice(len(windows), max_windows, replace=False))]
    saved = model.book_u.usage_counts.copy()
    model.book_u.reset_usage()
    try:
        rows = export_code_assignments(model, store, path, windows=windows, step=step,
                                       seed=seed)
        metrics = codebook_metrics(model.book_u) if rows else {}
    finally:
        model.book_u.usage_counts[:] = saved
    overlap = code_overlap_rates(rows, model.vocab.task_of, seed=seed)
    overlap = {k: (None if isinstance(v, float) and np.isnan(v) else v)
               for k, v in overlap.items()}
    return {"windows": len(rows), **metrics, "overlap_same": overlap["same"],
            "overlap_disjoint": overlap["disjoint"], "pairs_same": overlap["n_same"],
            "pairs_disjoint": overlap["n_disjoint"]}


# ----------------------------------------------------------------- manifests

def git_describe(cwd=None):
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=cwd,
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out_dir, command, config, seed, outputs, extra=None):
    man = {"command": command, "config": config, "seed": seed,
           "git": git_describe(os.path.dirname(os.path.abspath(__file__))),
           "outputs": sorted(outputs)}
    if extra:
        man.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(man, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
    return path
