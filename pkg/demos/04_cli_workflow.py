"""
The command-line workflow end to end
====================================

Runs the subcommands through ``playfusion.cli.main`` against the toy preset,
shrunk with --set overrides so the whole script finishes in about a minute.
"""

import json
import os
import tempfile

from playfusion.cli import main

root = tempfile.mkdtemp()
preset = os.path.join(os.path.dirname(__file__), "..", "presets", "toy.cfg")
small = ["--config", preset, "--set", "data.episodes=30", "--set", "train.steps=100",
         "--set", "eval.trials=3"]


def run(*argv):
    print("$ playfusion", " ".join(argv))
    code = main(list(argv))
    print("  exit", code)
    return code


run("gen-data", *small, "--out", f"{root}/data")
run("train", *small, "--data", f"{root}/data/play.pfd", "--out", f"{root}/train")
ck = f"{root}/train/final.ckpt"
run("inspect-checkpoint", "--checkpoint", ck, "--out", f"{root}/inspect")
run("rollout", "--checkpoint", ck, "--instruction", "0", "--n", "4", "--out", f"{root}/roll")
run("eval", "--checkpoint", ck, "--trials", "3", "--out", f"{root}/eval")
run("eval-chain", "--checkpoint", ck, "--chains", "16", "--out", f"{root}/chain")
run("analyze-codebook", "--checkpoint", ck, "--data", f"{root}/data/play.pfd",
    "--max-windows", "500", "--out", f"{root}/codes")

# failures come back as one JSON line on stderr and a distinct exit code
run("eval", "--checkpoint", f"{root}/nope.ckpt")
run("train", "--set", "train.lr=-1")

with open(f"{root}/train/manifest.json") as fh:
    man = json.load(fh)
print("manifest keys:", sorted(man))
print("outputs under", root)
