"""
Scripted play in the desk world
===============================

Two path families, hindsight labels, the window index and the binary store.
"""

import os
import tempfile

import numpy as np

from playfusion.dataset import generate_store, read_store, write_store
from playfusion.evalsuite import bimodality_coefficient
from playfusion.goals import build_vocabulary
from playfusion.playworld import (WorldConfig, compositional_split, relative_heading,
                                  script_play)

world = WorldConfig()
vocab = build_vocabulary(world.objects, world.containers)
print(world.n_objects, "objects,", world.n_containers, "containers,",
      len(vocab), "instructions")
print("paraphrases of task (carrot, pan):",
      [vocab[i] for i in vocab.ids_for_task((0, 0))])

# one episode: a few tasks back to back, each labelled after the fact
ep = script_play(world, seed=3)
for (start, end, task), fam in zip(ep.segments, ep.families):
    text = vocab[vocab.ids_for_task(world.tasks[task])[0]] if task >= 0 else "(nothing placed)"
    print(f"steps {start:2d}-{end:2d} family {fam:+.0f}: {text}")

# the detour side is the path family: headings of the first reach split in
# two (short reaches are dropped, their detour is too small to see)
heads = []
for seed in range(600):
    e = script_play(world, seed=seed)
    start, _, task = e.segments[0]
    if task < 0:
        continue
    o = world.tasks[task][0]
    s = e.states[start]
    if np.linalg.norm(s[3 + 4 * o:5 + 4 * o] - s[:2]) < 0.35:
        continue
    moving = np.flatnonzero(np.abs(e.actions[start:, :2]).sum(axis=1) > 0)[:4] + start
    heads.append(relative_heading(e.actions[None, moving], s[None, :2],
                                  s[None, 3 + 4 * o:5 + 4 * o])[0])
heads = np.degrees(heads)
print(f"first-reach heading over {len(heads)} far starts (deg), "
      f"bimodality coefficient {bimodality_coefficient(heads):.2f}:")
counts, edges = np.histogram(heads, bins=12, range=(-90, 90))
for c, lo in zip(counts, edges):
    print(f"  {lo:+4.0f} {'#' * (c // 4)}")

split = compositional_split(world.n_objects, world.n_containers)
store = generate_store(world, 40, seed=0, allowed_tasks=split["train"])
print("held-out pairs:", split["heldout"])
print("windows per episode:", store.windows_per_episode()[0],
      "labelled windows:", len(store.labeled_windows))

path = os.path.join(tempfile.mkdtemp(), "play.pfd")
write_store(store, path)
print("store round trip equal:", read_store(path) == store, os.path.getsize(path), "bytes")
