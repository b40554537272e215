"""Command-line entry point: ``lamp <subcommand> [--config FILE] [--seed N] [--out PATH] ...``.

Subcommands
  datagen       generate train.lampds and heldout.lampds
  train-motion  Stage 1 on a dataset; writes stage1.ckpt, loss trace, manifest
  train-action  Stage 2 from a Stage-1 checkpoint; writes stage2.ckpt, ...
  eval          paired closed-loop evaluation of one or more Stage-2 checkpoints
  ablate        train and evaluate gated/add/concat_mlp/none plus the 2D variant
  visualize     full motion generation drawn as blue-to-red tracks (PPM + SVG)
  selftest      run the fast invariant suite; exit 0 when everything passes
  config        print every config key with desk and full-scale defaults
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from lamp import config as cfgmod
from lamp.gradcore import Rng

log = logging.getLogger("lamp")


def _configs(args) -> dict:
    cfgs = cfgmod.load(args.config) if args.config else cfgmod.parse_text("")
    if args.seed is not None:
        for key in ("datagen", "stage1", "stage2"):
            cfgs[key] = cfgmod.with_seed(cfgs[key], args.seed)
    return cfgs


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_datagen(args) -> int:
    from lamp.motionrep import GridSpec
    from lamp.toyworld.dataset import generate_dataset

    d = _configs(args)["datagen"]
    if args.episodes is not None:
        d = replace(d, episodes=args.episodes)
    if args.heldout is not None:
        d = replace(d, heldout_episodes=args.heldout)
    out = _out(args, "run")
    grid = GridSpec(d.K_h, d.K_w, d.T, d.image, d.image)
    train = generate_dataset(d.task_list(), d.episodes, grid, d.horizon, Rng(d.seed), out / "train.lampds")
    held = generate_dataset(d.task_list(), d.heldout_episodes, grid, d.horizon, Rng(d.seed + 1000),
                            out / "heldout.lampds")
    print(f"wrote {out / 'train.lampds'} ({len(train)} records) and "
          f"{out / 'heldout.lampds'} ({len(held)} records)")
    return 0


def cmd_train_motion(args) -> int:
    from lamp.toyworld.dataset import load_dataset
    from lamp.trainer import train_stage1

    s1 = _configs(args)["stage1"]
    if args.steps is not None:
        s1 = replace(s1, steps=args.steps)
    if args.mask_depth:
        s1 = replace(s1, mask_depth=True)
    out = _out(args, "run")
    res = train_stage1(s1, load_dataset(args.data), out)
    print(f"stage 1: probe loss {res.probe_initial:.4f} -> {res.probe_final:.4f} "
          f"in {len(res.losses)} steps; wrote {out / 'stage1.ckpt'}")
    return 0


def cmd_train_action(args) -> int:
    from lamp.toyworld.dataset import load_dataset
    from lamp.trainer import load_checkpoint, train_stage2

    s2 = _configs(args)["stage2"]
    if args.steps is not None:
        s2 = replace(s2, steps=args.steps)
    if args.mode is not None:
        s2 = replace(s2, guidance_mode=args.mode)
    out = _out(args, "run")
    res = train_stage2(s2, load_dataset(args.data), load_checkpoint(args.stage1), out)
    print(f"stage 2 [{s2.guidance_mode}]: probe loss {res.probe_initial:.4f} -> {res.probe_final:.4f} "
          f"in {len(res.losses)} steps; wrote {out / 'stage2.ckpt'}")
    return 0


def _eval_config(args) -> cfgmod.EvalConfig:
    ev = _configs(args)["eval"]
    for key in ("episodes", "seeds", "tasks", "max_steps"):
        if getattr(args, key, None) is not None:
            ev = replace(ev, **{key: getattr(args, key)})
    return ev


def cmd_eval(args) -> int:
    from lamp.runtime import BundlePolicy, PolicyBundle, evaluate
    from lamp.trainer import load_checkpoint

    ev = _eval_config(args)
    policies = {}
    for spec in args.policy:
        label, _, path = spec.rpartition("=")
        bundle = PolicyBundle.from_checkpoint(load_checkpoint(path), ev.solver_steps, label)
        policies[bundle.label] = BundlePolicy(bundle)
    report = evaluate(policies, ev.task_list(), ev.episodes, ev.seed_list(), ev.max_steps)
    out = _out(args, "run")
    (out / "eval_report.json").write_text(report.to_json())
    (out / "eval_table.txt").write_text(report.table())
    timing = {k: {"decisions": p.decisions, "wall_per_decision": p.wall / max(p.decisions, 1)}
              for k, p in policies.items()}
    (out / "eval_timing.json").write_text(json.dumps(timing, indent=1) + "\n")
    print(report.table(), end="")
    return 0


def cmd_ablate(args) -> int:
    from lamp.ablation import VARIANTS, run_ablation
    from lamp.toyworld.dataset import load_dataset

    cfgs = _configs(args)
    s1, s2, ev = cfgs["stage1"], cfgs["stage2"], _eval_config(args)
    if args.stage1_steps is not None:
        s1 = replace(s1, steps=args.stage1_steps)
    if args.stage2_steps is not None:
        s2 = replace(s2, steps=args.stage2_steps)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        print(f"unknown variants: {sorted(unknown)}", file=sys.stderr)
        return 2
    res = run_ablation(load_dataset(args.data), s1, s2, ev, _out(args, "ablation"), variants)
    print(res.report.table(), end="")
    return 0


def cmd_visualize(args) -> int:
    from lamp.runtime import PolicyBundle, observe, visualize_motion, episode_start
    from lamp.trainer import load_checkpoint

    bundle = PolicyBundle.from_checkpoint(load_checkpoint(args.ckpt))
    task, start = episode_start(args.task, args.seed or 0, args.episode)
    obs = observe([start], bundle.grid)[0]
    (ppm, svg), _ = visualize_motion(bundle, obs, task.instruction_id, args.out or "motion",
                                     Rng(args.seed or 0))
    print(f"wrote {ppm} and {svg}")
    return 0


def cmd_selftest(args) -> int:
    from lamp.selftest import run_all

    results = run_all(verbose=True)
    return 0 if all(r.passed for r in results) else 1


def cmd_config(args) -> int:
    print(cfgmod.describe(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file (default: built-in desk values)")
    common.add_argument("--seed", type=int, help="override every section's seed")
    common.add_argument("--out", help="output directory or path prefix")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="lamp", description="desk-scale dual-expert VLA toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("datagen", parents=[common], help="generate expert datasets")
    s.add_argument("--episodes", type=int, help="training episodes (default 150)")
    s.add_argument("--heldout", type=int, help="held-out episodes (default 30)")
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("train-motion", parents=[common], help="stage 1")
    s.add_argument("--data", required=True, help="training dataset file")
    s.add_argument("--steps", type=int, help="optimizer steps (default 2000)")
    s.add_argument("--mask-depth", action="store_true", help="train on depth-masked flow (2D variant)")
    s.set_defaults(func=cmd_train_motion)

    s = sub.add_parser("train-action", parents=[common], help="stage 2")
    s.add_argument("--data", required=True, help="training dataset file")
    s.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    s.add_argument("--steps", type=int, help="optimizer steps (default 2000)")
    s.add_argument("--mode", choices=["gated", "add", "concat_mlp", "none"], help="guidance mode")
    s.set_defaults(func=cmd_train_action)

    def eval_flags(s):
        s.add_argument("--episodes", type=int, help="episodes per task per seed (default 100)")
        s.add_argument("--seeds", help="comma-separated evaluation seeds (default 0,1,2)")
        s.add_argument("--tasks", help="comma-separated tasks (default push,pick_place,stack)")
        s.add_argument("--max-steps", dest="max_steps", type=int, help="steps per episode (default 80)")

    s = sub.add_parser("eval", parents=[common], help="paired closed-loop evaluation")
    s.add_argument("--policy", action="append", required=True, metavar="[LABEL=]CKPT",
                   help="stage-2 checkpoint, repeatable")
    eval_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="guidance and 2D-flow ablations")
    s.add_argument("--data", required=True, help="training dataset file")
    s.add_argument("--stage1-steps", type=int, help="stage-1 steps per flow variant")
    s.add_argument("--stage2-steps", type=int, help="stage-2 steps per variant")
    s.add_argument("--variants", help="comma-separated subset of gated,none,add,concat_mlp,gated_2d")
    eval_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("visualize", parents=[common], help="motion foresight overlay")
    s.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    s.add_argument("--task", default="stack", choices=["push", "pick_place", "stack"])
    s.add_argument("--episode", type=int, default=0, help="episode index of the paired start state")
    s.set_defaults(func=cmd_visualize)

    s = sub.add_parser("selftest", parents=[common], help="run the fast invariant suite")
    s.set_defaults(func=cmd_selftest)

    s = sub.add_parser("config", parents=[common], help="print the config reference")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
