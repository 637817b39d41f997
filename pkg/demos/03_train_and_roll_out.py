"""
Train a small policy and roll it out
====================================

A short run of the diffusion policy next to the regression baseline. Set
DEMO_STEPS to change the length. The default matches the preset (3000
steps, about four minutes on one core); at a few hundred steps the
diffusion policy has not yet learned to finish a task.
"""

import os
import time

import numpy as np

from playfusion.dataset import generate_store, store_vocabulary
from playfusion.evalsuite import eval_chains, eval_success, initial_headings, mode_report
from playfusion.playworld import WorldConfig, compositional_split
from playfusion.policy import ScriptedPolicy, policy_from_trainer
from playfusion.quantizer import codebook_metrics
from playfusion.trainer import TrainConfig, train

steps = int(os.environ.get("DEMO_STEPS", 3000))
world = WorldConfig()
split = compositional_split(3, 3)
store = generate_store(world, 150, seed=0, allowed_tasks=split["train"])
vocab = store_vocabulary(store)

cfg = TrainConfig(steps=steps, batch_size=32, lr=1e-3, widths=(32, 64), code_dim=32,
                  time_embed_dim=64, cond_hidden=128, lang_hidden=64, state_hidden=128,
                  codebook_size_u=512, codebook_size_l=512)

policies = {}
for kind in ("playfusion", "gcbc"):
    t = time.time()
    tr = train(store, cfg.replace(model=kind))
    policies[kind] = policy_from_trainer(tr)
    print(f"{kind}: {steps} steps in {time.time() - t:.0f} s, final loss {tr.rows[-1].split()[1]}")
    if kind == "playfusion":
        print("  U-Net codes:", codebook_metrics(tr.model.book_u))
        print("  language codes:", codebook_metrics(tr.model.book_l))
policies["scripted"] = ScriptedPolicy(world, vocab)

seen = [vocab.ids_for_task(t)[0] for t in split["train"]]
held = [vocab.ids_for_task(t)[0] for t in split["heldout"]]
for name, pol in policies.items():
    s = eval_success(pol, world, seen, 5)
    h = eval_success(pol, world, held, 5)
    c = eval_chains(pol, world, vocab, n=3, n_chains=32, tasks=split["train"])
    print(f"{name:10s} seen {s.rows[-1][4]:.2f}  held-out {h.rows[-1][4]:.2f}  "
          f"chain prefix {c['mean_completed']:.2f}")

for name in ("playfusion", "gcbc"):
    rep = mode_report(initial_headings(policies[name], world, vocab, seen[0], n=200))
    print(f"{name:10s} heading families +{rep['plus']:.2f} / -{rep['minus']:.2f}, "
          f"bimodality {rep['bimodality']:.2f}")
