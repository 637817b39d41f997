"""Command-line entry point: ``playfusion <subcommand> [options]``.

Every subcommand reads an optional key=value config file with sections
(``[world]``, ``[data]``, ``[train]``, ``[eval]``), applies ``--set
section.key=value`` overrides and dedicated flags on top, validates the
result, and only then touches data. Outputs go under ``--out`` (default
``$PLAYFUSION_OUT/<subcommand>``, or ``runs/<subcommand>``); each run writes
``manifest.json`` there.

On failure a single JSON line goes to stderr::

    {"error": "ConfigError", "exit_code": 4, "message": "..."}

Exit codes:

    0  success
    1  unexpected internal error
    2  usage error (unknown flag, bad argument syntax)
    3  missing input file
    4  invalid configuration value
    5  config / checkpoint mismatch
    6  corrupt or unreadable data / checkpoint file
    7  training diverged
    8  held-out task leaked into training data
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

import numpy as np

from . import errors

EXIT_CODES = [
    (errors.SplitLeakageError, 8),
    (errors.DivergenceError, 7),
    (errors.FormatError, 6),
    (errors.CheckpointMismatchError, 5),
    (errors.ConfigError, 4),
    (errors.VocabularyError, 4),
    (errors.ShapeError, 4),
    (FileNotFoundError, 3),
]
USAGE_EXIT = 2
SECTIONS = ("world", "data", "train", "eval")

DATA_DEFAULTS = {"episodes": 300, "seed": 0, "split": "compositional", "n_paraphrases": 3}
EVAL_DEFAULTS = {"trials": 20, "budget": 64, "seed": 0, "execute_prefix": 0}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def exit_code_for(exc):
    if isinstance(exc, UsageError):
        return USAGE_EXIT
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def report_error(exc, stream=None):
    code = exit_code_for(exc)
    msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
    line = json.dumps({"error": type(exc).__name__, "exit_code": code,
                       "message": " ".join(msg.split())})
    print(line, file=stream or sys.stderr)
    return code


# ------------------------------------------------------------------ config

def read_config(path, sets=()):
    """Sections as plain dicts of strings; ``sets`` are 'section.key=value'."""
    out = {s: {} for s in SECTIONS}
    if path:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        cp.optionxform = str     # keys like T_a and K are case-sensitive
        try:
            cp.read(path)
        except configparser.Error as e:
            raise errors.ConfigError(f"{path}: {e}") from None
        for sec in cp.sections():
            if sec not in out:
                raise errors.ConfigError(f"unknown config section [{sec}]")
            out[sec].update(cp[sec])
    for item in sets:
        key, sep, value = item.partition("=")
        sec, dot, name = key.partition(".")
        if not sep or not dot or sec not in out:
            raise errors.ConfigError(f"--set expects section.key=value, got {item!r}")
        out[sec][name.strip()] = value.strip()
    return out


def _typed(defaults, section, raw):
    out = dict(defaults)
    for k, v in raw.items():
        if k not in defaults:
            raise errors.ConfigError(f"unknown {section} key {k!r}")
        try:
            out[k] = type(defaults[k])(v)
        except ValueError:
            raise errors.ConfigError(f"bad value for {section}.{k}: {v!r}") from None
    return out


def resolve(args):
    """World, data, training and eval settings after file + flag merging."""
    from .playworld import world_config_from_mapping
    from .trainer import train_config_from_mapping

    raw = read_config(getattr(args, "config", None), getattr(args, "set", None) or ())
    data = _typed(DATA_DEFAULTS, "data", raw["data"])
    ev = _typed(EVAL_DEFAULTS, "eval", raw["eval"])
    tr = dict(raw["train"])
    if getattr(args, "seed", None) is not None:
        tr["seed"] = args.seed
        data["seed"] = args.seed
        ev["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        tr["steps"] = args.steps
    if getattr(args, "episodes", None) is not None:
        data["episodes"] = args.episodes
    if getattr(args, "trials", None) is not None:
        ev["trials"] = args.trials
    if data["split"] not in ("compositional", "all"):
        raise errors.ConfigError("data.split must be 'compositional' or 'all'")
    if data["episodes"] < 1:
        raise errors.ConfigError("data.episodes must be >= 1")
    if ev["trials"] < 1 or ev["budget"] < 1:
        raise errors.ConfigError("eval.trials and eval.budget must be >= 1")
    world = world_config_from_mapping(raw["world"])
    train_cfg = train_config_from_mapping(tr)
    return world, data, train_cfg, ev


def output_dir(args):
    out = args.out or os.path.join(os.environ.get("PLAYFUSION_OUT", "runs"), args.command)
    os.makedirs(out, exist_ok=True)
    return out


def _split(world, data):
    from .playworld import compositional_split
    if data["split"] == "all":
        return {"train": world.tasks, "heldout": []}
    return compositional_split(world.n_objects, world.n_containers)


def _store(world, data, train_cfg):
    from .dataset import generate_store
    split = _split(world, data)
    return generate_store(world, data["episodes"], seed=data["seed"], T_a=train_cfg.T_a,
                          T_o=train_cfg.T_o, allowed_tasks=split["train"],
                          n_paraphrases=data["n_paraphrases"]), split


def _load_store(path):
    from .dataset import read_store
    if not os.path.isfile(path):
        raise FileNotFoundError(f"data file not found: {path}")
    return read_store(path)


def _load_ckpt(path):
    from .trainer import load_checkpoint
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _manifest(out, args, config, seed, outputs, extra=None):
    from .evalsuite import write_manifest
    cmd = [args.command] + list(getattr(args, "argv", []))
    return write_manifest(out, cmd, config, seed, [os.path.join(out, o) for o in outputs],
                          extra)


def _prefix(ev):
    return ev["execute_prefix"] or None


def _config_snapshot(world, data, train_cfg, ev):
    return {"world": world.to_dict(), "data": data, "train": train_cfg.to_dict(), "eval": ev}


def _policy(ck, world):
    from .errors import CheckpointMismatchError
    from .policy import policy_from_checkpoint
    if ck.world.state_dim != world.state_dim or ck.world.objects != world.objects \
            or ck.world.containers != world.containers:
        raise CheckpointMismatchError("checkpoint world differs from the configured world")
    return policy_from_checkpoint(ck)


def _eval_world(args, ck):
    """The checkpoint's own world unless a config file overrides it."""
    if getattr(args, "config", None) or getattr(args, "set", None):
        world, _, _, ev = resolve(args)
        return world, ev
    _, _, _, ev = resolve(args)
    return ck.world, ev


# ------------------------------------------------------------------ commands

def cmd_gen_data(args):
    from .dataset import write_store
    world, data, train_cfg, ev = resolve(args)
    out = output_dir(args)
    store, split = _store(world, data, train_cfg)
    path = os.path.join(out, "play.pfd")
    write_store(store, path)
    with open(os.path.join(out, "split.json"), "w") as fh:
        json.dump({k: [list(t) for t in v] for k, v in split.items()}, fh, indent=1)
        fh.write("\n")
    _manifest(out, args, _config_snapshot(world, data, train_cfg, ev), data["seed"],
              ["play.pfd", "split.json"],
              {"episodes": len(store.episodes), "windows": len(store.windows),
               "labeled_windows": len(store.labeled_windows)})
    print(path)


def cmd_train(args):
    from .trainer import Trainer, train
    world, data, train_cfg, ev = resolve(args)
    out = output_dir(args)
    if args.data:
        store = _load_store(args.data)
    else:
        store, _ = _store(world, data, train_cfg)
    if args.resume:
        tr = Trainer.resume(args.resume, store, out_dir=out)
        tr.run(train_cfg.steps)
        tr.save(os.path.join(out, "final.ckpt"))
    else:
        tr = train(store, train_cfg, out_dir=out)
    _manifest(out, args, _config_snapshot(world, data, train_cfg, ev), train_cfg.seed,
              ["telemetry.tsv", "final.ckpt"], {"steps": tr.step,
                                                "n_params": tr.model.n_params})
    print(os.path.join(out, "final.ckpt"))


def cmd_rollout(args):
    from .policy import run_rollouts, write_rollout_records
    ck = _load_ckpt(args.checkpoint)
    world, ev = _eval_world(args, ck)
    pol = _policy(ck, world)
    if not 0 <= args.instruction < len(ck.vocab):
        raise errors.VocabularyError(f"instruction {args.instruction} not in vocabulary "
                                     f"of {len(ck.vocab)}")
    out = output_dir(args)
    seeds = [int(ev["seed"]) + i for i in range(args.n)]
    recs = run_rollouts(pol, world, [[args.instruction]] * args.n, seeds, ev["budget"],
                        _prefix(ev), keep_trajectory=True)
    write_rollout_records(recs, os.path.join(out, "rollouts.tsv"))
    rate = float(np.mean([r.success for r in recs]))
    _manifest(out, args, {"world": world.to_dict(), "eval": ev,
                          "checkpoint": os.path.abspath(args.checkpoint)},
              ev["seed"], ["rollouts.tsv"], {"success_rate": rate})
    print(json.dumps({"success_rate": rate, "n": args.n}))


def cmd_eval(args):
    from .evalsuite import config_hash, eval_success, success_rate
    ck = _load_ckpt(args.checkpoint)
    world, ev = _eval_world(args, ck)
    pol = _policy(ck, world)
    if args.instructions:
        ids = [int(x) for x in args.instructions.split(",")]
    else:
        ids = [ck.vocab.ids_for_task(t)[0] for t in world.tasks]
    for i in ids:
        if not 0 <= i < len(ck.vocab):
            raise errors.VocabularyError(f"instruction {i} not in vocabulary")
    out = output_dir(args)
    tag = config_hash(ck.train_cfg or ck.header["model"])
    table = eval_success(pol, world, ids, ev["trials"], ev["seed"], ev["budget"],
                         _prefix(ev), tag=tag)
    table.write(os.path.join(out, "success.tsv"))
    _manifest(out, args, {"world": world.to_dict(), "eval": ev,
                          "checkpoint": os.path.abspath(args.checkpoint)},
              ev["seed"], ["success.tsv"], {"success_rate": success_rate(table)})
    print(json.dumps({"success_rate": success_rate(table)}))


def cmd_eval_chain(args):
    from .evalsuite import eval_chains
    ck = _load_ckpt(args.checkpoint)
    world, ev = _eval_world(args, ck)
    pol = _policy(ck, world)
    out = output_dir(args)
    res = eval_chains(pol, world, ck.vocab, n=args.n, n_chains=args.chains, seed=ev["seed"],
                      budget=ev["budget"], execute_prefix=_prefix(ev))
    with open(os.path.join(out, "chains.json"), "w") as fh:
        json.dump(res, fh, indent=1)
        fh.write("\n")
    _manifest(out, args, {"world": world.to_dict(), "eval": ev, "n": args.n,
                          "chains": args.chains,
                          "checkpoint": os.path.abspath(args.checkpoint)},
              ev["seed"], ["chains.json"], {"mean_completed": res["mean_completed"]})
    print(json.dumps({"mean_completed": res["mean_completed"],
                      "histogram": res["histogram"]}))


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise errors.ConfigError(f"bad seed list {text!r}") from None


def _variants(text):
    from .evalsuite import variant_config
    from .trainer import TrainConfig
    names = [v.strip() for v in text.split(",") if v.strip()]
    for v in names:
        variant_config(TrainConfig(), v)
    return names


def cmd_eval_compositional(args):
    from .dataset import store_vocabulary
    from .evalsuite import config_hash, eval_compositional, train_variant
    from .policy import policy_from_trainer
    world, data, train_cfg, ev = resolve(args)
    if data["split"] != "compositional":
        raise errors.ConfigError("eval-compositional needs data.split = compositional")
    variants, seeds = _variants(args.variants), _seeds(args.seeds)
    out = output_dir(args)
    store = _load_store(args.data) if args.data else _store(world, data, train_cfg)[0]
    split = _split(world, data)
    vocab = store_vocabulary(store)
    rows = []
    for s in seeds:
        pols, hashes = {}, {}
        for v in variants:
            tr = train_variant(store, train_cfg, v, s)
            pols[v] = policy_from_trainer(tr)
            hashes[v] = config_hash(tr.cfg)
        t = eval_compositional(pols, world, split, store, vocab, ev["trials"], ev["seed"],
                               ev["budget"], hashes)
        rows += [[r[0], r[1], s, r[2], r[3]] for r in t.rows]
    _write_rows(os.path.join(out, "compositional.tsv"),
                ["variant", "config_hash", "seed", "seen_success", "heldout_success"], rows)
    summary = {v: float(np.median([r[4] for r in rows if r[0] == v])) for v in variants}
    _manifest(out, args, _config_snapshot(world, data, train_cfg, ev), train_cfg.seed,
              ["compositional.tsv"], {"median_heldout": summary, "seeds": seeds})
    print(json.dumps({"median_heldout": summary}))


def _write_rows(path, columns, rows):
    from .evalsuite import Table
    Table(columns, rows).write(path)


def cmd_eval_scaling(args):
    from .dataset import store_vocabulary
    from .evalsuite import eval_scaling
    world, data, train_cfg, ev = resolve(args)
    variants, seeds = _variants(args.variants), _seeds(args.seeds)
    sizes = _seeds(args.sizes)
    out = output_dir(args)
    store = _load_store(args.data) if args.data else _store(world, data, train_cfg)[0]
    t = eval_scaling(store, sizes, variants, train_cfg, world, store_vocabulary(store), seeds,
                     ev["trials"], ev["seed"], ev["budget"])
    t.write(os.path.join(out, "scaling.tsv"))
    _manifest(out, args, _config_snapshot(world, data, train_cfg, ev), train_cfg.seed,
              ["scaling.tsv"], {"sizes": sizes, "seeds": seeds})
    print(os.path.join(out, "scaling.tsv"))


def cmd_analyze_codebook(args):
    from .evalsuite import analyze_codebook
    ck = _load_ckpt(args.checkpoint)
    if ck.model.kind != "playfusion":
        raise errors.CheckpointMismatchError("analyze-codebook needs a diffusion checkpoint")
    store = _load_store(args.data)
    if store.T_a != ck.model.cfg.T_a or store.T_o != ck.model.cfg.T_o \
            or store.state_dim != ck.model.cfg.state_dim:
        raise errors.CheckpointMismatchError("data windows do not match the checkpoint")
    out = output_dir(args)
    seed = 0 if args.seed is None else args.seed
    res = analyze_codebook(ck.model, store, os.path.join(out, "codes.tsv"), step=args.noise_step,
                           seed=seed, max_windows=args.max_windows)
    with open(os.path.join(out, "codebook.json"), "w") as fh:
        json.dump(res, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _manifest(out, args, {"checkpoint": os.path.abspath(args.checkpoint),
                          "data": os.path.abspath(args.data),
                          "max_windows": args.max_windows,
                          "noise_step": args.noise_step}, seed,
              ["codes.tsv", "codebook.json"], res)
    print(json.dumps(res, sort_keys=True))


def cmd_inspect_checkpoint(args):
    ck = _load_ckpt(args.checkpoint)
    h = ck.header
    info = {"kind": h["kind"], "step": h["step"], "n_params": ck.model.n_params,
            "T_a": ck.model.cfg.T_a, "T_o": ck.model.cfg.T_o,
            "state_dim": ck.model.cfg.state_dim, "vocabulary": len(ck.vocab),
            "schedule": h["schedule"], "world": h["meta"]["world"], "train": h["train"]}
    if h["kind"] == "playfusion":
        from .quantizer import codebook_metrics
        for key, book in (("unet_codebook", ck.model.book_u),
                          ("language_codebook", ck.model.book_l)):
            info[key] = codebook_metrics(book) if book.usage_counts.sum() else None
    out = output_dir(args)
    with open(os.path.join(out, "checkpoint.json"), "w") as fh:
        json.dump(info, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _manifest(out, args, {"checkpoint": os.path.abspath(args.checkpoint)}, None,
              ["checkpoint.json"])
    print(json.dumps(info, sort_keys=True))


# ------------------------------------------------------------------ parser

def _common(p, config=True):
    p.add_argument("--out", help="output directory (default $PLAYFUSION_OUT/<command>)")
    p.add_argument("--seed", type=int)
    if config:
        p.add_argument("--config", help="key=value config file with sections")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")


def build_parser():
    p = _Parser(prog="playfusion", description="Diffusion policies with discrete "
                "bottlenecks on synthetic play data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate scripted play data")
    _common(s)
    s.add_argument("--episodes", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a policy")
    _common(s)
    s.add_argument("--data", help="play data file (default: generate from config)")
    s.add_argument("--episodes", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("rollout", help="roll out one instruction and record trajectories")
    _common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--instruction", type=int, default=0)
    s.add_argument("--n", type=int, default=1)
    s.set_defaults(func=cmd_rollout)

    s = sub.add_parser("eval", help="per-instruction success with confidence intervals")
    _common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--instructions", help="comma-separated ids (default: one per task)")
    s.add_argument("--trials", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("eval-chain", help="long-horizon instruction chains")
    _common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=3, help="instructions per chain")
    s.add_argument("--chains", type=int, default=128)
    s.set_defaults(func=cmd_eval_chain)

    s = sub.add_parser("eval-compositional", help="train variants, score held-out combos")
    _common(s)
    s.add_argument("--data")
    s.add_argument("--episodes", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--trials", type=int)
    s.add_argument("--variants", default="full,no-unet-vq,no-lang-vq,gcbc")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.set_defaults(func=cmd_eval_compositional)

    s = sub.add_parser("eval-scaling", help="success versus number of play episodes")
    _common(s)
    s.add_argument("--data")
    s.add_argument("--episodes", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--trials", type=int)
    s.add_argument("--sizes", default="50,100,200")
    s.add_argument("--variants", default="full,gcbc")
    s.add_argument("--seeds", default="0")
    s.set_defaults(func=cmd_eval_scaling)

    s = sub.add_parser("analyze-codebook", help="code usage and per-instruction overlap")
    _common(s, config=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--max-windows", type=int, default=4000)
    s.add_argument("--noise-step", type=int, default=1,
                   help="diffusion step the clean chunks are noised to")
    s.set_defaults(func=cmd_analyze_codebook)

    s = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    _common(s, config=False)
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_inspect_checkpoint)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv[1:]
        for name in ("n", "chains", "max_windows", "steps", "episodes", "trials"):
            v = getattr(args, name, None)
            if v is not None and v < (0 if name == "steps" else 1):
                raise errors.ConfigError(f"--{name.replace('_', '-')} out of range: {v}")
        args.func(args)
    except SystemExit as e:      # --help
        return int(e.code or 0)
    except Exception as e:       # noqa: BLE001 - every failure becomes one error line
        return report_error(e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
