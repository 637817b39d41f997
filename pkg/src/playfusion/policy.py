"""Test-time action generation, receding-horizon rollouts and instruction chains.

Rollouts run in lockstep batches: every active rollout asks its policy for a
chunk at the same time, so the network sees one batch per denoising step.
Each rollout owns two RNG streams derived from its seed, one for the initial
world state and one for sampling noise, so results do not depend on which
other rollouts share the batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointMismatchError, ConfigError, ShapeError, VocabularyError
from .goals import pad_window
from .playworld import ACTION_DIM, ACTION_HIGH, ACTION_LOW, ScriptedOperator, reset, step
from .schedule import reverse_step


def _rngs(seed):
    ss = np.random.SeedSequence(seed)
    env, pol = ss.spawn(2)
    return np.random.default_rng(env), np.random.default_rng(pol)


class DiffusionPolicy:
    """Iterative denoising from unit Gaussian noise, quantizers active as trained."""

    name = "diffusion"

    def __init__(self, model, normalizer, clip_x0=1.0):
        if model.schedule is None:
            raise ConfigError("model has no noise schedule attached")
        self.clip_x0 = clip_x0
        self.model = model
        self.normalizer = normalizer
        self.T_a = model.cfg.T_a
        self.T_o = model.cfg.T_o

    def sample_normalized(self, windows, instr, rngs):
        m = self.model
        sched = m.schedule
        shape = (m.cfg.T_a, m.cfg.action_dim)
        x = np.stack([r.standard_normal(shape) for r in rngs])
        for k in range(sched.K, 0, -1):
            eps_hat = m.predict_noise(instr, windows, x, k)
            noise = np.stack([r.standard_normal(shape) for r in rngs]) if k > 1 else None
            x = reverse_step(sched, x, eps_hat, k, noise, clip_x0=self.clip_x0)
        return x

    def plan(self, world_states, windows, instr, rngs):
        x = np.clip(self.sample_normalized(windows, instr, rngs), -1.0, 1.0)
        return np.clip(self.normalizer.unnormalize(x), ACTION_LOW, ACTION_HIGH)


class GCBCPolicy:
    name = "gcbc"

    def __init__(self, model, normalizer):
        self.model = model
        self.normalizer = normalizer
        self.T_a = model.cfg.T_a
        self.T_o = model.cfg.T_o

    def plan(self, world_states, windows, instr, rngs):
        x = np.clip(self.model.predict(instr, windows), -1.0, 1.0)
        return np.clip(self.normalizer.unnormalize(x), ACTION_LOW, ACTION_HIGH)


class ScriptedPolicy:
    """Noise-free scripted operator on the true world state (harness oracle)."""

    name = "scripted"

    def __init__(self, world_cfg, vocab, T_a=16, T_o=2):
        self.world = world_cfg
        self.vocab = vocab
        self.T_a, self.T_o = T_a, T_o

    def plan(self, world_states, windows, instr, rngs):
        out = np.zeros((len(world_states), self.T_a, ACTION_DIM))
        for b, (s, i) in enumerate(zip(world_states, instr)):
            op = ScriptedOperator(self.world, self.vocab.task_of(int(i)), hesitate=False)
            s = s.copy()
            for t in range(self.T_a):
                a = op.act(s)
                out[b, t] = a
                s, _ = step(self.world, s, a)
        return out


class RandomPolicy:
    name = "random"

    def __init__(self, T_a=16, T_o=2):
        self.T_a, self.T_o = T_a, T_o

    def plan(self, world_states, windows, instr, rngs):
        return np.stack([r.uniform(ACTION_LOW, ACTION_HIGH, size=(self.T_a, ACTION_DIM))
                         for r in rngs])


def policy_from_checkpoint(ck):
    if ck.model.kind == "gcbc":
        return GCBCPolicy(ck.model, ck.normalizer)
    return DiffusionPolicy(ck.model, ck.normalizer)


def _check_world(policy, world_cfg):
    model = getattr(policy, "model", None)
    if model is not None and model.cfg.state_dim != world_cfg.state_dim:
        raise CheckpointMismatchError(
            f"model expects state_dim {model.cfg.state_dim}, world has {world_cfg.state_dim}")


# ----------------------------------------------------------------- sampling

def sample_chunk(ck, instruction, states, seed, T_a=None):
    """One de-normalised action chunk [T_a, action_dim] from a checkpoint.

    ``states`` must hold exactly T_o state vectors. Deterministic in ``seed``.
    """
    model = ck.model
    if T_a is not None and T_a != model.cfg.T_a:
        raise CheckpointMismatchError(f"requested T_a={T_a}, checkpoint has {model.cfg.T_a}")
    if not 0 <= int(instruction) < len(model.vocab):
        raise VocabularyError(f"instruction {instruction} not in vocabulary")
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or len(states) != model.cfg.T_o:
        raise ShapeError(f"expected {model.cfg.T_o} states, got shape {states.shape}")
    if states.shape[1] != model.cfg.state_dim:
        raise CheckpointMismatchError(f"state_dim {states.shape[1]} != {model.cfg.state_dim}")
    pol = policy_from_checkpoint(ck)
    rng = np.random.default_rng(seed)
    return pol.plan([None], states[None], np.array([int(instruction)]), [rng])[0]


# ----------------------------------------------------------------- rollouts

@dataclass
class RolloutRecord:
    seed: int
    instructions: list
    completed: int = 0
    steps: int = 0
    success_steps: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)   # (step, state, action, instr, flags)

    @property
    def success(self):
        return self.completed == len(self.instructions)


RECORD_COLUMNS = ("rollout", "step", "instruction_id", "state", "action", "success_flags")


def write_rollout_records(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r, rec in enumerate(records):
            for t, s, a, i, flags in rec.trajectory:
                w.writerow((r, t, i, " ".join(repr(float(x)) for x in s),
                            " ".join(repr(float(x)) for x in a),
                            "".join("1" if f else "0" for f in flags)))


def run_rollouts(policy, world_cfg, chains, seeds, budget, execute_prefix=None,
                 keep_trajectory=False, batch_size=256):
    """Lockstep rollouts; ``chains[i]`` is the instruction sequence of rollout i.

    Instructions run in order without resetting the world. Each instruction
    gets ``budget`` environment steps; a rollout stops at its first failure.
    The policy re-plans after ``execute_prefix`` actions (default T_a // 2),
    and immediately after an instruction succeeds.
    """
    _check_world(policy, world_cfg)
    if len(chains) != len(seeds):
        raise ConfigError("one seed per chain required")
    m = policy.T_a // 2 if execute_prefix is None else int(execute_prefix)
    if not 1 <= m <= policy.T_a:
        raise ConfigError(f"execute_prefix must be in [1, {policy.T_a}]")
    out = []
    for s in range(0, len(chains), batch_size):
        out += _run_batch(policy, world_cfg, chains[s:s + batch_size],
                          seeds[s:s + batch_size], budget, m, keep_trajectory)
    return out


def _task_index(policy_vocab, world_cfg, instr):
    o, c = policy_vocab.task_of(int(instr))
    return world_cfg.task_id(o, c), o


def _run_batch(policy, world_cfg, chains, seeds, budget, m, keep):
    from .goals import build_vocabulary
    vocab = getattr(policy, "vocab", None) or getattr(getattr(policy, "model", None),
                                                      "vocab", None)
    if vocab is None:
        vocab = build_vocabulary(world_cfg.objects, world_cfg.containers)
    n = len(chains)
    recs, states, hists, prng, pos, used = [], [], [], [], [], []
    for chain, seed in zip(chains, seeds):
        env_rng, pol_rng = _rngs(seed)
        objs = [vocab.task_of(int(i))[0] for i in chain]
        s = reset(world_cfg, env_rng, free_objects=objs)
        recs.append(RolloutRecord(seed=int(seed), instructions=[int(i) for i in chain]))
        states.append(s)
        hists.append([s.vector()])
        prng.append(pol_rng)
        pos.append(0)
        used.append(0)
    active = [i for i in range(n) if len(chains[i]) > 0 and budget > 0]
    T_o = policy.T_o
    while active:
        windows = np.stack([pad_window(np.array(hists[i][-T_o:]), T_o) for i in active])
        instr = np.array([chains[i][pos[i]] for i in active])
        plans = policy.plan([states[i] for i in active], windows, instr,
                            [prng[i] for i in active])
        still = []
        for b, i in enumerate(active):
            rec = recs[i]
            task, _ = _task_index(vocab, world_cfg, chains[i][pos[i]])
            alive = True
            for t in range(m):
                a = plans[b, t]
                s, flags = step(world_cfg, states[i], a)
                if keep:
                    rec.trajectory.append((rec.steps, states[i].vector(), a.copy(),
                                           int(chains[i][pos[i]]), flags))
                states[i] = s
                hists[i].append(s.vector())
                if len(hists[i]) > T_o:
                    hists[i] = hists[i][-T_o:]
                rec.steps += 1
                used[i] += 1
                if flags[task]:
                    rec.completed += 1
                    rec.success_steps.append(rec.steps)
                    pos[i] += 1
                    used[i] = 0
                    if pos[i] >= len(chains[i]):
                        alive = False
                    break
                if used[i] >= budget:
                    alive = False
                    break
            if alive:
                still.append(i)
        active = still
    return recs


def rollout(policy, world_cfg, instruction, max_steps, execute_prefix=None, seed=0,
            keep_trajectory=True):
    return run_rollouts(policy, world_cfg, [[instruction]], [seed], max_steps,
                        execute_prefix, keep_trajectory)[0]


def rollout_chain(policy, world_cfg, instructions, budget, seed=0, execute_prefix=None,
                  keep_trajectory=False):
    """Completed-prefix count for one instruction chain."""
    if len(instructions) < 1:
        raise ConfigError("chain needs at least one instruction")
    return run_rollouts(policy, world_cfg, [list(instructions)], [seed], budget,
                        execute_prefix, keep_trajectory)[0]


def policy_from_trainer(tr):
    if tr.model.kind == "gcbc":
        return GCBCPolicy(tr.model, tr.store.normalizer)
    return DiffusionPolicy(tr.model, tr.store.normalizer)
