"""Command-line entry points: train, eval, ablate, make-episodes."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint
from .config import DEFAULT_CONFIG, ConfigError, load_config
from .episodes import EpisodeFile, make_episode_file
from .evaluate import evaluate
from .experiments import AXES, ablate, format_table
from .training import Trainer, TrainingDiverged, dump_episode

log = logging.getLogger("cosrcnn")

MODES = {"sum": "sum_scores", "avg": "feature_average"}


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    tr = Trainer.create(cfg)

    def save(t: Trainer, name: str) -> None:
        checkpoint.save(out / name, t.checkpoint())
        log.info("saved %s", out / name)

    try:
        tr.run(on_checkpoint=lambda t: save(t, f"ckpt_{t.iteration:06d}.ckpt"))
    except TrainingDiverged as exc:
        path = out / f"diverged_iter{exc.iteration}_episode{exc.episode_seed}.json"
        dump_episode(path, exc.episode)
        log.error("%s; episode written to %s", exc, path)
        return 2
    finally:
        (out / "train_log.jsonl").write_text("".join(json.dumps(h) + "\n" for h in tr.history))
    save(tr, "final.ckpt")
    return 0


def cmd_eval(args) -> int:
    ck = checkpoint.load(args.checkpoint)
    episodes = EpisodeFile.load(args.episodes)
    aggregation = MODES[args.mode] if args.mode else ck.config.aggregation
    before = checkpoint.model_checksum(ck.model)
    report = evaluate(ck.model, episodes, shot=args.shot, aggregation=aggregation)
    if checkpoint.model_checksum(ck.model) != before:
        raise RuntimeError("evaluation changed model parameters")
    report["checkpoint"] = str(args.checkpoint)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    shots = [int(s) for s in args.shots.split(",")]
    rows = ablate(cfg, args.axis, shots=shots, cache_dir=args.cache_dir)
    print(format_table(args.axis, rows))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablate_{args.axis}.json").write_text(json.dumps(
        [{"variant": r.name, "overrides": r.overrides, "ap50": r.ap50} for r in rows], indent=2))
    return 0


def cmd_make_episodes(args) -> int:
    e = DEFAULT_CONFIG["eval"]
    ef = make_episode_file(e["dataset_seed"] if args.dataset_seed is None else args.dataset_seed,
                           e["num_images"] if args.num_images is None else args.num_images,
                           args.split, args.way, args.shot, args.count, args.seed)
    ef.save(args.out)
    print(f"wrote {len(ef.episodes)} {args.split} episodes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cosrcnn", description="Few-shot shape detection with a cosine box head.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="episodic base-class training")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AP50 report for a checkpoint on an episode file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", required=True)
    e.add_argument("--shot", type=int)
    e.add_argument("--mode", choices=sorted(MODES))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare the variants of one axis")
    a.add_argument("--config", required=True)
    a.add_argument("--axis", required=True, choices=sorted(AXES))
    a.add_argument("--shots", default="1,5")
    a.add_argument("--cache-dir")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("make-episodes", help="sample a fixed evaluation episode file")
    m.add_argument("--seed", type=int, required=True)
    m.add_argument("--way", type=int, required=True)
    m.add_argument("--shot", type=int, required=True)
    m.add_argument("--count", type=int, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--split", choices=("novel", "base"), default="novel")
    m.add_argument("--dataset-seed", type=int)
    m.add_argument("--num-images", type=int)
    m.set_defaults(func=cmd_make_episodes)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, checkpoint.CheckpointError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
