"""Command-line entry point: ``multireg <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import pipeline as pl
from . import synth
from .config import ConfigError, RunConfig
from .evaluation import EmptyInput, evaluate, load_report, render_table
from .matching import OverlapTrainConfig, read_descriptors, train_overlap, write_descriptors
from .posegraph import load_poses, save_poses

log = logging.getLogger("multireg")

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


class LossLog:
    """Append (step, loss, lr) rows to a CSV file."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not (append and self.path.exists())
        self.fh = self.path.open("w" if new else "a", newline="")
        self.writer = csv.writer(self.fh)
        if new:
            self.writer.writerow(["step", "loss", "lr"])

    def __call__(self, step: int, loss: float, lr: float) -> None:
        self.writer.writerow([step, repr(loss), repr(lr)])
        if step % 100 == 0:
            self.fh.flush()
            log.info("step %d loss %.5f lr %.2e", step, loss, lr)

    def close(self):
        self.fh.close()


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run configuration JSON")
    p.add_argument("--dump-intermediates", action="store_true", default=None)
    for f in fields(RunConfig):
        if f.name == "dump_intermediates":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name == "ecdf_thresholds":
            p.add_argument(flag, type=float, nargs=4)
        elif f.name in ("profile",):
            p.add_argument(flag, choices=["indoor", "outdoor"])
        elif f.name in ("graph",):
            p.add_argument(flag, choices=["full", "sparse"])
        else:
            p.add_argument(flag, type=_flag_type(f))


def _flag_type(f):
    t = str(f.type)
    if "int" in t and "float" not in t:
        return int
    if "float" in t:
        return float
    if "bool" in t:
        return lambda s: _BOOL[s.lower()]
    return str


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    return cfg.updated(**overrides)


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.suite:
        for i, spec in enumerate(synth.gen_benchmark_suite(args.suite)):
            synth.save_scene(out / f"{args.suite}_{i:03d}", synth.gen_scene(spec))
        print(f"wrote {synth.SUITE_SIZE} '{args.suite}' scenes to {out}")
    if args.stats:
        data = synth.gen_stats_dataset(args.stats, cfg.seed)
        rows = [[s.count, s.mean, s.median, s.std, *s.ecdf, o] for s, o in data]
        (out / "stats_dataset.json").write_text(json.dumps(rows))
        print(f"wrote {len(rows)} statistics samples")
    if args.frames:
        frames, poses, overlap = synth.gen_descriptor_frames(args.frames, seed=cfg.seed)
        for i, f in enumerate(frames):
            write_descriptors(out / f"frame_{i:03d}.mdsc", f)
        save_poses(out / "frames.gt.json", poses)
        print(f"wrote {len(frames)} descriptor frames")
    return 0


def cmd_train_overlap(args, cfg: RunConfig) -> int:
    data = synth.gen_stats_dataset(cfg.overlap_samples, cfg.seed)
    Path(cfg.overlap_checkpoint).parent.mkdir(parents=True, exist_ok=True)
    losses = LossLog(Path(cfg.out) / "overlap_loss.csv")
    tc = OverlapTrainConfig(lr=cfg.lr_overlap, weight_decay=cfg.weight_decay, epochs=cfg.epochs_overlap,
                            batch_size=cfg.batch_overlap, seed=cfg.seed, width=cfg.overlap_width, n_cap=cfg.n_cap)
    train_overlap(data, tc, checkpoint=cfg.overlap_checkpoint, log=losses)
    losses.close()
    print(f"overlap checkpoint -> {cfg.overlap_checkpoint}")
    return 0


def cmd_train_sync(args, cfg: RunConfig) -> int:
    from .syncnet import train_sync

    Path(cfg.sync_checkpoint).parent.mkdir(parents=True, exist_ok=True)
    resume = args.resume if args.resume else None
    losses = LossLog(Path(cfg.out) / "sync_loss.csv", append=resume is not None)
    t0 = time.time()
    train_sync(pl.training_samples(cfg), cfg.train_scenes, pl.sync_config(cfg), checkpoint=cfg.sync_checkpoint,
               log=losses, resume_from=resume, stop_after=args.max_steps)
    losses.close()
    print(f"sync checkpoint -> {cfg.sync_checkpoint} ({time.time() - t0:.0f}s)")
    return 0


def cmd_register(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    sync_net = pl.load_sync_net(cfg)
    needs_overlap = bool(args.frames) or cfg.graph == "sparse"
    overlap_net = pl.load_overlap_net(cfg) if needs_overlap else None
    if args.frames:
        with pl.stage("read"):
            frames = [read_descriptors(p) for p in args.frames]
            gt = load_poses(args.gt) if args.gt else None
        result = pl.run_frames(frames, cfg, sync_net, overlap_net, gt)
        pl.write_result(out, args.name, result)
        if result.report:
            print(f"{args.name}: RR={result.report.rr:.4f} re={result.report.re_mean_deg:.3f}deg "
                  f"te={result.report.te_mean:.4f}m")
        return 0
    if args.scene:
        scenes = [(Path(s).name, synth.load_scene(s)) for s in args.scene]
    elif args.suite:
        scenes = [(f"{args.suite}_{i:03d}", synth.gen_scene(spec))
                  for i, spec in enumerate(synth.gen_benchmark_suite(args.suite))]
    else:
        raise pl.PipelineError("input", "give --frames, --scene or --suite")
    for name, scene in scenes:
        result = pl.run_scene(scene, cfg, sync_net, overlap_net)
        pl.write_result(out, name, result)
        r = result.report
        print(f"{name}: RR={r.rr:.4f} re={r.re_mean_deg:.3f}deg te={r.te_mean:.4f}m")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    with pl.stage("evaluate"):
        report = evaluate(load_poses(args.pred), load_poses(args.gt), cfg.te_eff, cfg.re_gate_deg)
    text = report.to_json()
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text)
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    if not args.reports:
        raise EmptyInput("report needs at least one report file")
    named = {Path(p).name.replace(".report.json", ""): load_report(p) for p in args.reports}
    table, csv_text = render_table(named)
    print(table, end="")
    if args.csv:
        Path(args.csv).write_text(csv_text)
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import run_gradient_suite

    ok = True
    for name, err, passed in run_gradient_suite(seeds=args.seeds):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: max rel err {err:.2e}")
    return 0 if ok else 1


COMMANDS = {
    "synth": cmd_synth, "train-overlap": cmd_train_overlap, "train-sync": cmd_train_sync,
    "register": cmd_register, "evaluate": cmd_evaluate, "report": cmd_report, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multireg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    ps = {name: sub.add_parser(name) for name in COMMANDS}
    for p in ps.values():
        _add_config_flags(p)
    ps["synth"].add_argument("--suite", choices=sorted(synth.SUITE_PARAMS))
    ps["synth"].add_argument("--stats", type=int, help="also write N matching-statistics samples")
    ps["synth"].add_argument("--frames", type=int, help="also write N descriptor frames")
    ps["train-sync"].add_argument("--resume", type=Path, help="checkpoint to continue from")
    ps["train-sync"].add_argument("--max-steps", type=int, help="stop after this optimiser step")
    ps["register"].add_argument("--frames", nargs="+", help="MDSC descriptor files, one per frame")
    ps["register"].add_argument("--gt", help="ground-truth poses JSON for the frames")
    ps["register"].add_argument("--scene", nargs="+", help="synthetic scene stems")
    ps["register"].add_argument("--suite", choices=sorted(synth.SUITE_PARAMS))
    ps["register"].add_argument("--name", default="frames")
    ps["evaluate"].add_argument("--pred", required=True)
    ps["evaluate"].add_argument("--gt", required=True)
    ps["evaluate"].add_argument("--output")
    ps["report"].add_argument("reports", nargs="*")
    ps["report"].add_argument("--csv")
    ps["gradcheck"].add_argument("--seeds", type=int, default=20)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except pl.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, EmptyInput, FileNotFoundError, ValueError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
