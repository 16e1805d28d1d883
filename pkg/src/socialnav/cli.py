"""Command line entry point: ``socialnav <command> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import dump_config, load_config
from .data import collect_episodes, iter_episodes, save_dataset
from .perspective import Condition

CONDITIONS = [c.value for c in Condition]


def _cmd_collect(args) -> int:
    cfg = load_config(args.config)
    ds = collect_episodes(args.episodes, args.mix, args.seed, cfg.env)
    save_dataset(ds, args.out)
    print(json.dumps(ds.manifest, sort_keys=True))
    return 0


def _cmd_train_model(args) -> int:
    from .pipeline import train_world_model, world_model_quality
    from .data import load_dataset

    cfg = load_config(args.config)
    ds = load_dataset(args.data)
    model = train_world_model(cfg, ds, args.out, steps=args.steps, verbose=args.verbose)
    print(json.dumps(world_model_quality(model, ds, cfg.world_model.holdout_fraction), sort_keys=True))
    return 0


def _cmd_train_policy(args) -> int:
    from .experiment import write_seed_csv
    from .policy import InfluenceDQN
    from .world_model import WorldModel

    cfg = load_config(args.config)
    if not Path(args.ckpt).exists():
        print(f"checkpoint not found: {args.ckpt}", file=sys.stderr)
        return 2
    model = WorldModel.load(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    episodes = args.episodes or cfg.policy.episodes
    for seed in range(args.seeds):
        est = InfluenceDQN(args.condition, episodes, seed, cfg.policy, cfg.env).fit(model)
        write_seed_csv(out / f"{args.condition}_seed{seed}.csv", est.curve_)
        est.save(out / f"{args.condition}_seed{seed}.pt")
        print(f"{args.condition} seed {seed}: mean reward (last 100) {est.curve_[-100:, 1].mean():.3f}")
    return 0


def _cmd_shift(args) -> int:
    from .viz import shift_panels
    from .world_model import WorldModel

    model = WorldModel.load(args.ckpt)
    for i, ep in enumerate(iter_episodes(args.episode)):
        if i == args.index:
            break
    else:
        print(f"episode index {args.index} not in {args.episode}", file=sys.stderr)
        return 2
    if not 0 <= args.t <= len(ep):
        print(f"t must lie in 0..{len(ep)}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"shift_ep{args.index}_t{args.t}.png"
    info = shift_panels(ep.state_at(args.t), model, path)
    print(json.dumps({"image": str(path), **info}))
    return 0


def _cmd_evaluate(args) -> int:
    from .experiment import run_experiment
    from .world_model import WorldModel

    cfg = load_config(args.config)
    ckpt = args.ckpt or cfg.experiment.checkpoint_path
    if ckpt is None or not Path(ckpt).exists():
        print(f"world-model checkpoint not found: {ckpt}", file=sys.stderr)
        return 2
    model = WorldModel.load(ckpt)
    run_experiment(cfg, model, args.out, resume=not args.fresh, progress=args.verbose)
    summary = json.loads((Path(args.out) / "summary.json").read_text())
    print(json.dumps(summary["gate"], indent=2))
    return 0


def _cmd_config(args) -> int:
    dump_config(load_config(args.config), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="socialnav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="collect random/expert episodes to a dataset file")
    c.add_argument("--episodes", type=int, required=True)
    c.add_argument("--mix", type=float, default=0.5, help="fraction of random-policy episodes")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--config")
    c.set_defaults(func=_cmd_collect)

    t = sub.add_parser("train-model", help="train the world model")
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path; a .csv loss log is written next to it")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=_cmd_train_model)

    tp = sub.add_parser("train-policy", help="train influence-augmented DQN policies")
    tp.add_argument("--ckpt", required=True)
    tp.add_argument("--condition", choices=CONDITIONS, required=True)
    tp.add_argument("--seeds", type=int, default=5)
    tp.add_argument("--episodes", type=int)
    tp.add_argument("--config")
    tp.add_argument("--out", required=True)
    tp.set_defaults(func=_cmd_train_policy)

    s = sub.add_parser("shift", help="render perspective-shift panels for one episode step")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--episode", required=True, help="dataset file")
    s.add_argument("--index", type=int, default=0, help="episode index inside the file")
    s.add_argument("--t", type=int, default=0)
    s.add_argument("--out", default=".")
    s.set_defaults(func=_cmd_shift)

    e = sub.add_parser("evaluate", help="run the condition x seed grid and write curves/summary/plot")
    e.add_argument("--config")
    e.add_argument("--ckpt")
    e.add_argument("--out", required=True)
    e.add_argument("--fresh", action="store_true", help="retrain runs even if per-seed CSVs exist")
    e.add_argument("--verbose", action="store_true")
    e.set_defaults(func=_cmd_evaluate)

    d = sub.add_parser("config", help="write the effective config (defaults filled in) as YAML")
    d.add_argument("--config")
    d.add_argument("--out", required=True)
    d.set_defaults(func=_cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
