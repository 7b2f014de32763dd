"""End-to-end orchestration: descriptors or a synthetic scene in, poses and report out."""
from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .evaluation import EvalReport, evaluate
from .geometry import RigidPose, inverse
from .matching import DescriptorSet, MatchStats, OverlapNet, compute_stats, mutual_match
from .nn import load_checkpoint
from .posegraph import (InsufficientCorrespondence, NoConsensus, PoseGraph, RansacConfig, SpanningInit,
                        compute_icr, compute_ipr, graph_to_json, merged_inlier_cloud, ransac_register,
                        select_topk, spanning_init)
from .syncnet import SyncConfig, SyncNet, graph_tensors

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class MissingCheckpoint(PipelineError):
    pass


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:  # surface every failure with the stage that raised it
        raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc


def sync_config(cfg: RunConfig) -> SyncConfig:
    return SyncConfig(d=cfg.d, T=cfg.T, gamma=cfg.gamma, beta=cfg.beta, lr=cfg.lr_sync,
                      weight_decay=cfg.weight_decay, epochs=cfg.epochs_sync, seed=cfg.seed,
                      head_mode=cfg.head_mode, trans_scale=cfg.trans_scale)


def training_samples(cfg: RunConfig):
    """index -> training sample, generated on first use and cached."""
    from . import synth

    cache: dict[int, object] = {}

    def get(i: int):
        if i not in cache:
            spec = synth.training_spec(i, cfg.seed, (cfg.train_n_min, cfg.train_n_max))
            cache[i] = synth.gen_scene(spec).sample()
        return cache[i]

    return get


def load_sync_net(cfg: RunConfig, path=None) -> SyncNet:
    path = Path(path or cfg.sync_checkpoint)
    if not path.exists():
        raise MissingCheckpoint("load", f"missing sync-net checkpoint {path}")
    net = SyncNet(sync_config(cfg))
    with stage("load"):
        load_checkpoint(path, net.params)
    return net


def load_overlap_net(cfg: RunConfig, path=None) -> OverlapNet:
    path = Path(path or cfg.overlap_checkpoint)
    if not path.exists():
        raise MissingCheckpoint("load", f"missing overlap-net checkpoint {path}")
    net = OverlapNet(cfg.overlap_width, n_cap=cfg.n_cap, seed=cfg.seed)
    with stage("load"):
        load_checkpoint(path, net.params)
    return net


@dataclass
class PipelineResult:
    poses: list[RigidPose]
    coarse_poses: list[RigidPose]
    init: SpanningInit
    graph: PoseGraph
    weights: np.ndarray
    report: EvalReport | None = None
    intermediates: dict = field(default_factory=dict)


def _symmetric_overlaps(stats: dict, n: int, net: OverlapNet) -> np.ndarray:
    keys = sorted(stats)
    pred = net.predict([stats[k] for k in keys])
    o = np.zeros((n, n))
    for (u, v), p in zip(keys, pred):
        o[u, v] = o[v, u] = p
    np.fill_diagonal(o, 1.0)
    return o


def build_graph(frames: Sequence[DescriptorSet], overlap_net: OverlapNet, cfg: RunConfig,
                dump: dict | None = None) -> tuple[PoseGraph, np.ndarray]:
    """match -> stats -> overlap -> selection -> RANSAC/Procrustes -> ICR/IPR."""
    n = len(frames)
    with stage("match"):
        corr = {(u, v): mutual_match(frames[u], frames[v]) for u in range(n) for v in range(u + 1, n)}
    with stage("stats"):
        stats = {k: compute_stats(c, cfg.ecdf_thresholds) for k, c in corr.items()}
    with stage("overlap"):
        overlap = _symmetric_overlaps(stats, n, overlap_net)
    with stage("select"):
        if cfg.graph == "full":
            pairs = sorted(corr)
        else:
            pairs = sorted({(min(u, v), max(u, v)) for u, v in select_topk(overlap, min(cfg.k_eff, n - 1))})
    g = PoseGraph(n)
    rcfg = RansacConfig(iterations=cfg.ransac_iterations, tau=cfg.tau, seed=cfg.seed)
    failed = []
    with stage("pairwise"):
        for u, v in pairs:
            c, a, b = corr[(u, v)], frames[u], frames[v]
            try:
                T, _ = ransac_register(c, a, b, rcfg)
            except (InsufficientCorrespondence, NoConsensus) as exc:
                failed.append([u, v, str(exc)])
                log.warning("pair (%d, %d) dropped: %s", u, v, exc)
                continue
            icr_uv = compute_icr(c, a, b, T, cfg.tau)
            icr_vu = compute_icr(c.transposed(), b, a, inverse(T), cfg.tau)
            ipr = compute_ipr(merged_inlier_cloud(c, a, b, T, cfg.tau), cfg.kappa, cfg.ipr_iterations, cfg.seed)
            g.add_pair(u, v, T, float(overlap[u, v]), icr_uv, ipr, icr_reverse=icr_vu)
    if dump is not None:
        dump["stats"] = {f"{u}-{v}": [s.count, s.mean, s.median, s.std, *s.ecdf] for (u, v), s in stats.items()}
        dump["overlap"] = overlap.tolist()
        dump["selected_pairs"] = [list(p) for p in pairs]
        dump["failed_pairs"] = failed
        dump["keypoint_budget"] = [len(f) for f in frames]
    return g, overlap


def synchronize(g: PoseGraph, net: SyncNet, dump: dict | None = None):
    with stage("init"):
        g.validate()
        init = spanning_init(g)
    with stage("sync"):
        R, t_coarse, t, w = net.predict(graph_tensors(g, init))
    poses = [RigidPose(R[i], t[i]) for i in range(g.n_nodes)]
    coarse = [RigidPose(R[i], t_coarse[i]) for i in range(g.n_nodes)]
    if dump is not None:
        dump["graph"] = graph_to_json(g)
        dump["init"] = {"root": init.root, "hops": init.hops.tolist(), "priority": init.priority.tolist(),
                        "tree_edges": [list(e) for e in init.tree_edges],
                        "poses": [{"R": p.r.reshape(-1).tolist(), "t": p.t.tolist()} for p in init.poses]}
        dump["weights"] = w.tolist()
        dump["coarse_t"] = t_coarse.tolist()
    return poses, coarse, init, w


def run_frames(frames: Sequence[DescriptorSet], cfg: RunConfig, sync_net: SyncNet, overlap_net: OverlapNet,
               gt: Sequence[RigidPose] | None = None) -> PipelineResult:
    dump = {} if cfg.dump_intermediates else None
    g, _ = build_graph(frames, overlap_net, cfg, dump)
    poses, coarse, init, w = synchronize(g, sync_net, dump)
    report = None
    if gt is not None:
        with stage("evaluate"):
            report = evaluate(poses, gt, cfg.te_eff, cfg.re_gate_deg)
    return PipelineResult(poses, coarse, init, g, w, report, dump or {})


def scene_graph(scene, cfg: RunConfig, overlap_net: OverlapNet | None) -> PoseGraph:
    """Scene edges as measured (full) or re-selected by top-k overlap (sparse)."""
    if cfg.graph == "full":
        return scene.graph
    from .synth import sample_stats

    n = scene.n
    if overlap_net is None:
        raise MissingCheckpoint("overlap", "sparse selection on a scene needs an overlap checkpoint")
    rng = np.random.default_rng(np.random.SeedSequence([17, cfg.seed, *np.atleast_1d(scene.spec.seed)]))
    stats = {(u, v): sample_stats(float(scene.overlap[u, v]), rng) for u in range(n) for v in range(u + 1, n)}
    overlap = _symmetric_overlaps(stats, n, overlap_net)
    keep = {(min(u, v), max(u, v)) for u, v in select_topk(overlap, min(cfg.k_eff, n - 1))}
    g = PoseGraph(n)
    for (u, v), m in scene.graph.edges.items():
        if (min(u, v), max(u, v)) in keep:
            g.edges[(u, v)] = m
    return g


def run_scene(scene, cfg: RunConfig, sync_net: SyncNet, overlap_net: OverlapNet | None = None) -> PipelineResult:
    dump = {} if cfg.dump_intermediates else None
    with stage("select"):
        g = scene_graph(scene, cfg, overlap_net)
    poses, coarse, init, w = synchronize(g, sync_net, dump)
    with stage("evaluate"):
        report = evaluate(poses, scene.poses, cfg.te_eff, cfg.re_gate_deg)
    return PipelineResult(poses, coarse, init, g, w, report, dump or {})


def write_result(out_dir, name: str, result: PipelineResult) -> None:
    from .posegraph import save_poses

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_poses(out / f"{name}.poses.json", result.poses)
    if result.report is not None:
        (out / f"{name}.report.json").write_text(result.report.to_json())
    if result.intermediates:
        (out / f"{name}.intermediates.json").write_text(json.dumps(result.intermediates, indent=1, sort_keys=True))
