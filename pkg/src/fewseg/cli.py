"""Command line entry points.

Subcommands: gen-data, train, eval, prior-mask, ablate. Every run that
produces metrics writes them as CSV and renders matching PNG figures next
to them.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_model
from .config import Config
from .data import Dataset, Episode, SplitConfig, generate_synthetic_dataset, \
    sample_episode
from .evaluate import evaluate
from .model import FewShotModel
from .netpbm import write_pgm
from .prior import prior_mask
from .tensor import Tensor, no_grad
from .train import train

__all__ = ["main"]


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(f"--set expects KEY=VALUE, got '{pair}'")
        key, raw = pair.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _config_from_args(args, base: Config | None = None) -> Config:
    if getattr(args, "config", None):
        base = Config.load(args.config)
    elif base is None:
        base = Config()
    overrides = _parse_overrides(getattr(args, "set", []) or [])
    if not overrides:
        return base
    merged = base.to_dict()
    unknown = set(overrides) - set(merged)
    if unknown:
        raise SystemExit(f"unknown config keys in --set: {sorted(unknown)}")
    merged.update(overrides)
    return Config.from_dict(merged)


def _cmd_gen_data(args) -> int:
    generate_synthetic_dataset(args.out, n_classes=args.classes,
                               per_class=args.per_class,
                               resolution=args.resolution, seed=args.seed,
                               embedding_dim=args.embedding_dim)
    print(f"wrote {args.classes} classes x {args.per_class} pairs "
          f"at {args.resolution}x{args.resolution} to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .report import render_loss_curve

    config = _config_from_args(args)
    out = Path(args.out)
    result = train(config, out, resume=args.resume)
    config.save(out / "config.json")
    curve = render_loss_curve(result.log_path, out / "loss_curve.png")
    print(f"trained {result.steps} steps in {result.seconds:.1f}s "
          f"({result.skipped_episodes} degenerate episodes skipped)")
    print(f"final loss {result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    print(f"figure: {curve}")
    return 0


def _build_model(args) -> tuple[Config, FewShotModel, Dataset]:
    """Model from --checkpoint when given, otherwise untrained from config."""
    if getattr(args, "checkpoint", None):
        ckpt = load_checkpoint(args.checkpoint)
        model, _ = restore_model(ckpt)
        config = _config_from_args(args, base=ckpt.config)
    else:
        if not getattr(args, "config", None) and not getattr(args, "set", []):
            raise SystemExit("need --checkpoint or --config")
        config = _config_from_args(args)
        ds = Dataset(config.dataset)
        model = FewShotModel(config, ds.embeddings,
                             np.random.default_rng(config.seed))
        return config, model, ds
    return config, model, Dataset(config.dataset)


def _apply_eval_flags(config: Config, args) -> Config:
    """Named eval flags win over the config file and --set pairs."""
    named = {"test_fold": args.fold, "k_shot": args.k, "rounds": args.rounds,
             "episodes_per_round": args.episodes}
    named = {k: v for k, v in named.items() if v is not None}
    if not named:
        return config
    merged = config.to_dict()
    merged.update(named)
    return Config.from_dict(merged)


def _run_eval(args, extra_disable) -> int:
    from .report import render_eval_figures, write_eval_csv

    config, model, ds = _build_model(args)
    config = _apply_eval_flags(config, args)
    split = SplitConfig(ds.n_classes, config.n_folds, config.test_fold)
    disable = tuple(sorted(set(config.disable) | set(extra_disable)))
    on_episode = None
    if args.dump_masks:
        mask_dir = Path(args.out) / "masks"
        mask_dir.mkdir(parents=True, exist_ok=True)

        def on_episode(r, i, episode, pred):
            stem = f"round{r}_ep{i:03d}_class{episode.class_id:02d}"
            write_pgm(mask_dir / f"{stem}_pred.pgm", pred.astype(float))
            write_pgm(mask_dir / f"{stem}_true.pgm", episode.query_mask)

    report = evaluate(model, ds, split.test_classes(), k=config.k_shot,
                      rounds=config.rounds,
                      episodes_per_round=config.episodes_per_round,
                      base_seed=config.seed, disable=disable,
                      on_episode=on_episode)
    rounds_csv, classes_csv = write_eval_csv(report, args.out)
    figures = render_eval_figures(report, args.out)
    label = f" disable={','.join(disable)}" if disable else ""
    for r in report.rounds:
        print(f"round {r.index} seed {r.seed}: mIoU {r.miou:.4f} "
              f"({r.episodes} episodes, {r.skipped} skipped)")
    print(f"mean mIoU{label}: {report.mean_miou:.4f}")
    print(f"csv: {rounds_csv}, {classes_csv}")
    print(f"figures: {', '.join(str(p) for p in figures)}")
    if args.dump_masks:
        print(f"masks: {Path(args.out) / 'masks'}")
    return 0


def _cmd_eval(args) -> int:
    return _run_eval(args, args.disable or [])


def _cmd_ablate(args) -> int:
    if not args.disable:
        raise SystemExit("ablate requires at least one --disable flag")
    return _run_eval(args, args.disable)


def _cmd_prior_mask(args) -> int:
    from .report import render_prior_overview

    config, model, ds = _build_model(args)
    if args.class_id is not None:
        rec = ds.class_record(args.class_id)
        sup = ds.pair(args.class_id, args.support)
        qimg, qmask = ds.pair(args.class_id, args.query)
        episode = Episode(class_id=args.class_id, class_name=rec.name,
                          supports=[sup], query_image=qimg, query_mask=qmask,
                          text=ds.embeddings.table[args.class_id])
    else:
        # stream 3 of the run seed, indexed so each --episode N is stable
        ss = np.random.SeedSequence([int(config.seed), 3, int(args.episode)])
        episode = sample_episode(ds, list(range(ds.n_classes)), 1,
                                 np.random.default_rng(ss))

    with no_grad():
        sup_pyr = model.encoder.encode(Tensor(episode.supports[0][0],
                                              dtype=model.dtype))
        qry_pyr = model.encoder.encode(Tensor(episode.query_image,
                                              dtype=model.dtype))
    prior = prior_mask(sup_pyr.high_top, qry_pyr.high_top,
                       episode.supports[0][1],
                       windows=tuple(map(tuple, config.windows)),
                       kernel=config.sa_kernel)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "prior.pgm", prior.map)
    for win, wmap in zip(prior.windows, prior.per_window):
        write_pgm(out / f"prior_w{win[0]}x{win[1]}.pgm", wmap)
    fig = render_prior_overview(episode, prior, out / "prior_overview.png")
    with open(out / "prior_stats.csv", "w", encoding="utf-8") as fh:
        fh.write("map,min,max,mean\n")
        fh.write(f"averaged,{prior.map.min()!r},{prior.map.max()!r},"
                 f"{prior.map.mean()!r}\n")
        for win, wmap in zip(prior.windows, prior.per_window):
            fh.write(f"w{win[0]}x{win[1]},{wmap.min()!r},{wmap.max()!r},"
                     f"{wmap.mean()!r}\n")
    print(f"class {episode.class_id} ({episode.class_name}): prior mean "
          f"{prior.map.mean():.4f}, max {prior.map.max():.4f}")
    print(f"wrote {out / 'prior.pgm'} plus {len(prior.per_window)} window "
          f"maps, prior_stats.csv, {fig}")
    return 0


def _add_set(p) -> None:
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (value parsed as JSON)")


def _add_eval_args(p) -> None:
    p.add_argument("--checkpoint", help="trained checkpoint to score")
    p.add_argument("--config", help="config JSON (untrained model when no "
                                    "checkpoint is given)")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--fold", type=int, help="test fold to hold out")
    p.add_argument("--k", type=int, help="support shots per episode")
    p.add_argument("--rounds", type=int, help="independent seeded rounds")
    p.add_argument("--episodes", type=int, help="episodes per round")
    p.add_argument("--dump-masks", action="store_true",
                   help="write predicted and true query masks as PGM")
    p.add_argument("--disable", action="append", default=[],
                   choices=["spm", "apa", "tdc"],
                   help="ablate a module at evaluation time (repeatable)")
    _add_set(p)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fewseg",
        description="few-shot segmentation on synthetic episodes")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=20)
    g.add_argument("--per-class", type=int, default=25)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--embedding-dim", type=int, default=300)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train on the non-test folds")
    t.add_argument("--config", help="config JSON path")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    _add_set(t)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="score held-out classes over rounds")
    _add_eval_args(e)
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="eval with modules disabled")
    _add_eval_args(a)
    a.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("prior-mask",
                       help="dump prior maps for one episode as PGM + PNG")
    p.add_argument("--checkpoint", help="use a trained encoder")
    p.add_argument("--config", help="config JSON (fresh encoder)")
    p.add_argument("--out", required=True)
    p.add_argument("--episode", type=int, default=0,
                   help="index of a deterministically sampled episode")
    p.add_argument("--class-id", type=int,
                   help="explicit class (with --support/--query indices)")
    p.add_argument("--support", type=int, default=0)
    p.add_argument("--query", type=int, default=1)
    _add_set(p)
    p.set_defaults(func=_cmd_prior_mask)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
