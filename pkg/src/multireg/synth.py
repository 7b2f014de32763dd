"""Deterministic synthetic scenes, matching-statistics data and benchmark suites.

Confidence-attribute distributions planted here are explicit knobs that
mimic how reliable and unreliable pairs tend to look; they are not
measurements of any real dataset.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RigidPose, axis_angle, euler_zyx, relative
from .matching import DescriptorSet, MatchStats, compute_stats
from .posegraph import PoseGraph, graph_to_json, save_graph, save_poses
from .syncnet import GroundTruth, TrainSample, graph_tensors

SUITE_VERSION = 1
SUITE_SEEDS = {"easy": 1001, "standard": 2002, "hard": 3003}
SUITE_PARAMS = {
    "easy": dict(n_frames=(10, 10), sigma_r=2.0, sigma_t=0.05, p_out=0.1),
    "standard": dict(n_frames=(30, 30), sigma_r=5.0, sigma_t=0.1, p_out=0.2),
    "hard": dict(n_frames=(40, 40), sigma_r=10.0, sigma_t=0.2, p_out=0.4),
}
SUITE_SIZE = 50
SUITE_K = 6


class UnknownProfile(KeyError):
    pass


class DisconnectedSample(RuntimeError):
    pass


@dataclass
class SceneSpec:
    n_frames: tuple[int, int] = (10, 10)
    sigma_r: float = 0.0  # degrees
    sigma_t: float = 0.0  # meters
    p_out: float = 0.0
    k: int = 6
    seed: int | list[int] = 0

    def __post_init__(self):
        lo, hi = self.n_frames
        if not 2 <= lo <= hi:
            raise ValueError(f"bad n_frames range {self.n_frames}")
        if not 0.0 <= self.p_out < 1.0:
            raise ValueError("p_out must lie in [0, 1)")
        if self.sigma_r < 0 or self.sigma_t < 0 or self.k < 1:
            raise ValueError("noise levels must be nonnegative and k >= 1")


@dataclass
class SyntheticScene:
    spec: SceneSpec
    poses: list[RigidPose]
    graph: PoseGraph
    outlier: dict[tuple[int, int], bool]  # keyed by undirected pair u < v
    overlap: np.ndarray  # (N, N) planted ground-truth overlap
    rel_R: np.ndarray = field(repr=False, default=None)  # (N, N, 3, 3)
    rel_t: np.ndarray = field(repr=False, default=None)  # (N, N, 3)

    def __post_init__(self):
        if self.rel_R is None:
            self.rel_R, self.rel_t = relative_truth(self.poses)

    @property
    def n(self) -> int:
        return len(self.poses)

    def truth(self) -> GroundTruth:
        return GroundTruth(self.rel_R, self.rel_t)

    def sample(self) -> TrainSample:
        return TrainSample(graph_tensors(self.graph), self.truth())


def relative_truth(poses) -> tuple[np.ndarray, np.ndarray]:
    """R_uv and t_uv for every ordered pair under T_uv = T_u o T_v^-1."""
    R = np.stack([p.r for p in poses])
    t = np.stack([p.t for p in poses])
    rel_R = np.einsum("uij,vkj->uvik", R, R)
    rel_t = t[:, None, :] - np.einsum("uvij,vj->uvi", rel_R, t)
    return rel_R, rel_t


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def random_euler_pose(rng: np.random.Generator, t_range: float = 6.0) -> RigidPose:
    a = np.deg2rad(rng.uniform(-180.0, 180.0, 3))
    return RigidPose(euler_zyx(*a), rng.uniform(-t_range, t_range, 3))


def random_edge_set(n: int, k: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Connected graph where every node has degree >= min(k, n - 1)."""
    k = min(k, n - 1)
    order = rng.permutation(n)
    pairs = {(min(a, b), max(a, b)) for a, b in zip(order[:-1], order[1:])}
    deg = np.zeros(n, dtype=int)
    for a, b in pairs:
        deg[a] += 1
        deg[b] += 1
    for u in rng.permutation(n):
        cand = [v for v in rng.permutation(n) if v != u and (min(u, v), max(u, v)) not in pairs]
        while deg[u] < k and cand:
            v = cand.pop()
            pairs.add((min(u, v), max(u, v)))
            deg[u] += 1
            deg[v] += 1
    return sorted((int(a), int(b)) for a, b in pairs)


def perturb(rel: RigidPose, sigma_r_deg: float, sigma_t: float, rng: np.random.Generator) -> RigidPose:
    """Axis-angle noise with half-normal angle and isotropic translation noise."""
    angle = abs(rng.normal(0.0, np.deg2rad(sigma_r_deg))) if sigma_r_deg > 0 else 0.0
    axis = rng.standard_normal(3)
    noise_t = rng.normal(0.0, sigma_t, 3) if sigma_t > 0 else np.zeros(3)
    if angle == 0.0:
        return RigidPose(rel.r, rel.t + noise_t)
    return RigidPose(axis_angle(axis, angle) @ rel.r, rel.t + noise_t)


def gen_scene(spec: SceneSpec, max_retries: int = 10) -> SyntheticScene:
    rng = _rng(spec.seed)
    for _ in range(max_retries):
        n = int(rng.integers(spec.n_frames[0], spec.n_frames[1] + 1))
        poses = [random_euler_pose(rng) for _ in range(n)]
        pairs = random_edge_set(n, spec.k, rng)
        g = PoseGraph(n)
        overlap = rng.uniform(0.0, 0.05, (n, n))
        overlap = np.triu(overlap, 1) + np.triu(overlap, 1).T
        labels = {}
        for u, v in pairs:
            is_out = bool(rng.random() < spec.p_out)
            if is_out:
                meas = relative(random_euler_pose(rng), random_euler_pose(rng))
                o = rng.uniform(0.05, 0.45)
                icr = rng.uniform(0.0, 0.15, 2)
                ipr = rng.uniform(0.4, 1.0)
            else:
                meas = perturb(relative(poses[u], poses[v]), spec.sigma_r, spec.sigma_t, rng)
                o = rng.uniform(0.35, 0.9)
                icr = rng.uniform(0.2, 0.6, 2) * o
                ipr = rng.uniform(0.05, 0.5)
            g.add_pair(u, v, meas, o, icr[0], ipr, icr_reverse=icr[1])
            overlap[u, v] = overlap[v, u] = o
            labels[(u, v)] = is_out
        if g.is_connected():
            np.fill_diagonal(overlap, 1.0)
            return SyntheticScene(spec, poses, g, labels, overlap)
    raise DisconnectedSample(f"no connected sample after {max_retries} draws")


# ------------------------------------------------------------ match statistics

def sample_distances(o: float, rng: np.random.Generator) -> np.ndarray:
    """Matching distances for a pair with overlap o.

    The count grows with o; a fraction o of matches are correct (short
    distances), the rest are wrong (long distances). The mean therefore falls
    with o and the spread peaks at intermediate overlap.
    """
    count = rng.poisson(20.0 + 900.0 * o)
    good = rng.random(count) < o
    d = np.where(good, rng.normal(0.18, 0.06, count), rng.normal(0.52, 0.08, count))
    return np.clip(d, 0.0, 2.0)


def sample_stats(o: float, rng: np.random.Generator) -> MatchStats:
    return compute_stats(sample_distances(o, rng))


def gen_stats_dataset(n_samples: int, seed: int = 0) -> list[tuple[MatchStats, float]]:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = _rng(seed)
    out = []
    for _ in range(n_samples):
        o = float(rng.uniform(0.0, 1.0))
        out.append((sample_stats(o, rng), o))
    return out


# ---------------------------------------------------------------- suites

def gen_benchmark_suite(profile: str) -> list[SceneSpec]:
    if profile not in SUITE_PARAMS:
        raise UnknownProfile(f"unknown benchmark profile {profile!r}; choose from {sorted(SUITE_PARAMS)}")
    base = SUITE_SEEDS[profile]
    return [SceneSpec(k=SUITE_K, seed=[SUITE_VERSION, base, i], **SUITE_PARAMS[profile]) for i in range(SUITE_SIZE)]


def training_spec(index: int, seed: int = 0, n_range=(8, 30)) -> SceneSpec:
    """Randomised spec covering the noise/outlier regimes of the suites."""
    rng = _rng([7, seed, index])
    return SceneSpec(n_frames=n_range, sigma_r=float(rng.uniform(0.0, 10.0)), sigma_t=float(rng.uniform(0.0, 0.2)),
                     p_out=float(rng.uniform(0.0, 0.4)), k=int(rng.integers(4, 9)), seed=[11, seed, index])


# ------------------------------------------------------------ serialisation

def save_scene(stem, scene: SyntheticScene) -> None:
    stem = Path(stem)
    save_graph(stem.with_suffix(".graph.json"), scene.graph)
    save_poses(stem.with_suffix(".gt.json"), scene.poses)
    labels = {"spec": asdict(scene.spec),
              "outliers": [[u, v, bool(b)] for (u, v), b in sorted(scene.outlier.items())],
              "overlap": scene.overlap.tolist()}
    stem.with_suffix(".outliers.json").write_text(json.dumps(labels, indent=1))


def load_scene(stem) -> SyntheticScene:
    from .posegraph import load_graph, load_poses

    stem = Path(stem)
    labels = json.loads(stem.with_suffix(".outliers.json").read_text())
    sd = labels["spec"]
    spec = SceneSpec(n_frames=tuple(sd["n_frames"]), sigma_r=sd["sigma_r"], sigma_t=sd["sigma_t"],
                     p_out=sd["p_out"], k=sd["k"], seed=sd["seed"])
    return SyntheticScene(spec, load_poses(stem.with_suffix(".gt.json")), load_graph(stem.with_suffix(".graph.json")),
                          {(u, v): b for u, v, b in labels["outliers"]}, np.array(labels["overlap"]))


# ---------------------------------------------------- descriptor-level frames

def gen_descriptor_frames(n_frames: int = 4, n_world: int = 600, window: float = 0.5, d_f: int = 32,
                          noise: float = 0.05, clutter: int = 40, seed: int = 0):
    """Small frames of matched keypoints for exercising the descriptor path.

    World points lie in a 3 m x 3 m x 1 m slab; frame u observes the slab
    strip x in [u*s, u*s + window*3m] where s spaces the strips evenly. Each
    world point carries a fixed random descriptor, observed with noise; a
    few clutter points per frame have no counterpart. Returns the frames, the
    ground-truth poses (world -> frame) and the planted overlap matrix.
    """
    rng = _rng([13, seed])
    world = rng.uniform([0, 0, 0], [3, 3, 1], (n_world, 3))
    wdesc = rng.standard_normal((n_world, d_f))
    wdesc /= np.linalg.norm(wdesc, axis=1, keepdims=True)
    width = 3.0 * window
    step = (3.0 - width) / max(n_frames - 1, 1)
    poses, frames, seen = [], [], []
    for u in range(n_frames):
        pose = random_euler_pose(rng, t_range=2.0)
        lo = u * step
        vis = np.flatnonzero((world[:, 0] >= lo) & (world[:, 0] <= lo + width))
        kp = pose.apply(world[vis])
        desc = wdesc[vis] + noise * rng.standard_normal((len(vis), d_f))
        ckp = pose.apply(rng.uniform([0, 0, 0], [3, 3, 1], (clutter, 3)))
        cdesc = rng.standard_normal((clutter, d_f))
        frames.append(DescriptorSet(np.concatenate([kp, ckp]), np.concatenate([desc, cdesc])))
        poses.append(pose)
        seen.append(set(vis.tolist()))
    overlap = np.array([[len(a & b) / max(len(a), 1) for b in seen] for a in seen])
    return frames, poses, overlap
