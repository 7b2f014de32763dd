"""Train the overlap net and the sync-net with the benchmark schedule.

    python3 scripts/train_all.py --out runs/bench

Writes overlap.mdgd, sync.mdgd, both loss CSVs and the resolved config.
"""
import argparse
import logging
import time
from pathlib import Path

from multireg import pipeline as pl
from multireg import synth
from multireg.cli import LossLog
from multireg.config import RunConfig
from multireg.matching import OverlapTrainConfig, train_overlap
from multireg.syncnet import train_sync


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/bench"))
    ap.add_argument("--scenes", type=int, default=500, help="distinct training scenes")
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig(train_scenes=args.scenes, epochs_sync=args.epochs, seed=args.seed, out=str(out),
                    overlap_checkpoint=str(out / "overlap.mdgd"), sync_checkpoint=str(out / "sync.mdgd"))
    cfg.save(out / "config.json")

    t0 = time.perf_counter()
    log = LossLog(out / "overlap_loss.csv")
    train_overlap(synth.gen_stats_dataset(cfg.overlap_samples, cfg.seed),
                  OverlapTrainConfig(lr=cfg.lr_overlap, weight_decay=cfg.weight_decay, epochs=cfg.epochs_overlap,
                                     batch_size=cfg.batch_overlap, seed=cfg.seed, width=cfg.overlap_width,
                                     n_cap=cfg.n_cap),
                  checkpoint=cfg.overlap_checkpoint, log=log)
    log.close()
    print(f"overlap net: {time.perf_counter() - t0:.0f}s")

    t0 = time.perf_counter()
    log = LossLog(out / "sync_loss.csv")
    train_sync(pl.training_samples(cfg), cfg.train_scenes, pl.sync_config(cfg), checkpoint=cfg.sync_checkpoint, log=log)
    log.close()
    print(f"sync-net: {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
