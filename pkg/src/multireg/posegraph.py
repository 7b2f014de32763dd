"""Pose-graph construction, robust pairwise registration and tree initialisation.

Absolute poses map world coordinates into frame coordinates, so the edge
transform ``T_uv = T_u o inverse(T_v)`` carries points of frame v into
frame u.
"""
from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DegenerateConfiguration, RigidPose, compose, inverse, kabsch
from .matching import CorrespondenceSet, DescriptorSet


class GraphError(ValueError):
    pass


class DisconnectedGraph(GraphError):
    pass


class KTooLarge(ValueError):
    pass


class InsufficientCorrespondence(ValueError):
    pass


class NoConsensus(ValueError):
    pass


@dataclass
class RelMeasure:
    transform: RigidPose
    overlap: float = 1.0
    icr: float = 1.0
    ipr: float = 0.0

    def __post_init__(self):
        for name in ("overlap", "icr", "ipr"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
            setattr(self, name, v)


@dataclass
class PoseGraph:
    n_nodes: int
    edges: dict[tuple[int, int], RelMeasure] = field(default_factory=dict)

    def add_pair(self, u: int, v: int, transform: RigidPose, overlap: float, icr: float, ipr: float,
                 icr_reverse: float | None = None) -> None:
        """Store (u, v) and its reverse (v, u) with the inverse transform."""
        if u == v:
            raise GraphError(f"self-loop on node {u}")
        if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
            raise GraphError(f"edge ({u}, {v}) outside 0..{self.n_nodes - 1}")
        self.edges[(u, v)] = RelMeasure(transform, overlap, icr, ipr)
        self.edges[(v, u)] = RelMeasure(inverse(transform), overlap,
                                        icr if icr_reverse is None else icr_reverse, ipr)

    def edge_list(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def pairs(self) -> list[tuple[int, int]]:
        return sorted((u, v) for u, v in self.edges if u < v)

    def neighbors(self, u: int) -> list[int]:
        return sorted(v for a, v in self.edges if a == u)

    def is_connected(self) -> bool:
        if self.n_nodes == 0:
            return False
        adj = _adjacency(self.n_nodes, self.pairs())
        return len(_bfs_order(adj, 0)[0]) == self.n_nodes

    def validate(self) -> None:
        for (u, v), m in self.edges.items():
            if u == v:
                raise GraphError("self-loop")
            if (v, u) not in self.edges:
                raise GraphError(f"edge ({u}, {v}) lacks its reverse")
        if not self.is_connected():
            raise DisconnectedGraph("pose graph is not connected")

    def priority(self, u: int, v: int) -> float:
        """Symmetric edge priority o_uv * (ICR_uv + ICR_vu) / 2."""
        a, b = self.edges[(u, v)], self.edges[(v, u)]
        return a.overlap * 0.5 * (a.icr + b.icr)

    def relabeled(self, perm) -> "PoseGraph":
        """Graph with node i renamed to perm[i]."""
        g = PoseGraph(self.n_nodes)
        for (u, v), m in self.edges.items():
            g.edges[(int(perm[u]), int(perm[v]))] = m
        return g


def _adjacency(n: int, pairs) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v in pairs:
        adj[u].append(v)
        adj[v].append(u)
    for a in adj:
        a.sort()
    return adj


def _bfs_order(adj, root: int):
    depth = {root: 0}
    parent = {root: -1}
    order = [root]
    q = deque([root])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in depth:
                depth[v] = depth[u] + 1
                parent[v] = u
                order.append(v)
                q.append(v)
    return order, depth, parent


# ------------------------------------------------------------------ selection

def select_topk(overlap: np.ndarray, k: int) -> list[tuple[int, int]]:
    """Directed edge list of the union of every node's k best partners."""
    o = np.asarray(overlap, dtype=np.float64)
    n = o.shape[0]
    if o.shape != (n, n):
        raise ValueError("overlap must be square")
    if k < 1 or k > n - 1:
        raise KTooLarge(f"k={k} must lie in [1, {n - 1}]")
    sym = 0.5 * (o + o.T)
    pairs = set()
    for u in range(n):
        cand = [v for v in range(n) if v != u]
        cand.sort(key=lambda v: (-sym[u, v], v))
        for v in cand[:k]:
            pairs.add((min(u, v), max(u, v)))
    return sorted([(u, v) for u, v in pairs] + [(v, u) for u, v in pairs])


# ----------------------------------------------------------------- pairwise

@dataclass
class RansacConfig:
    iterations: int = 1024
    tau: float = 0.07
    seed: int = 0
    refine_rounds: int = 3


def _batched_kabsch(src: np.ndarray, dst: np.ndarray):
    """Uniform-weight Kabsch for a batch of (h, m, 3) point sets."""
    cs = src.mean(1, keepdims=True)
    cd = dst.mean(1, keepdims=True)
    h = np.einsum("hmi,hmj->hij", src - cs, dst - cd)
    u, sv, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.einsum("hji,hkj->hik", vt, u)))
    d[d == 0] = 1.0
    fix = np.ones((len(src), 3))
    fix[:, 2] = d
    r = np.einsum("hji,hj,hkj->hik", vt, fix, u)
    t = cd[:, 0] - np.einsum("hij,hj->hi", r, cs[:, 0])
    ok = sv[:, 1] > 1e-9 * np.maximum(sv[:, 0], 1e-300)
    return r, t, ok


def ransac_register(c: CorrespondenceSet, a: DescriptorSet, b: DescriptorSet,
                    config: RansacConfig | None = None) -> tuple[RigidPose, np.ndarray]:
    """Estimate T_ab (frame b -> frame a) by 3-point RANSAC and Procrustes refinement.

    Returns the pose and a boolean inlier mask over ``c.pairs``; every masked
    pair has residual < tau under the returned pose.
    """
    cfg = config or RansacConfig()
    m = len(c)
    if m < 3:
        raise InsufficientCorrespondence(f"{m} correspondences, need 3")
    dst = a.keypoints[c.pairs[:, 0]]
    src = b.keypoints[c.pairs[:, 1]]
    rng = np.random.default_rng(cfg.seed)
    # three distinct indices per hypothesis
    i0 = rng.integers(0, m, cfg.iterations)
    i1 = rng.integers(0, m - 1, cfg.iterations)
    i1 += i1 >= i0
    i2 = rng.integers(0, m - 2, cfg.iterations)
    lo, hi = np.minimum(i0, i1), np.maximum(i0, i1)
    i2 += i2 >= lo
    i2 += i2 >= hi
    idx = np.stack([i0, i1, i2], axis=1)
    r, t, ok = _batched_kabsch(src[idx], dst[idx])
    best = (-1, np.inf, None)
    chunk = max(1, 2_000_000 // max(m, 1))
    for s in range(0, cfg.iterations, chunk):
        pred = np.einsum("hij,mj->hmi", r[s:s + chunk], src) + t[s:s + chunk, None, :]
        res = np.linalg.norm(pred - dst[None], axis=2)
        inl = res < cfg.tau
        counts = np.where(ok[s:s + chunk], inl.sum(1), -1)
        mean_res = np.where(counts > 0, (res * inl).sum(1) / np.maximum(counts, 1), np.inf)
        for h in range(len(counts)):
            if counts[h] > best[0] or (counts[h] == best[0] and mean_res[h] < best[1]):
                best = (int(counts[h]), float(mean_res[h]), s + h)
    if best[0] < 3:
        raise NoConsensus(f"best hypothesis has {best[0]} inliers")
    pose = RigidPose(r[best[2]], t[best[2]])
    mask = np.linalg.norm(pose.apply(src) - dst, axis=1) < cfg.tau
    for _ in range(cfg.refine_rounds):
        try:
            refined = kabsch(src, dst, mask.astype(np.float64))
        except DegenerateConfiguration:
            break
        new_mask = np.linalg.norm(refined.apply(src) - dst, axis=1) < cfg.tau
        if new_mask.sum() < 3:
            break
        pose = refined
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    mask = np.linalg.norm(pose.apply(src) - dst, axis=1) < cfg.tau
    return pose, mask


def compute_icr(c: CorrespondenceSet, a: DescriptorSet, b: DescriptorSet, t: RigidPose, tau: float = 0.07) -> float:
    """Correspondences within tau under T, over the keypoint count of frame a."""
    if len(c) == 0:
        return 0.0
    res = np.linalg.norm(a.keypoints[c.pairs[:, 0]] - t.apply(b.keypoints[c.pairs[:, 1]]), axis=1)
    return float(np.count_nonzero(res < tau) / len(a))


def merged_inlier_cloud(c: CorrespondenceSet, a: DescriptorSet, b: DescriptorSet, t: RigidPose,
                        tau: float = 0.07) -> np.ndarray:
    pa = a.keypoints[c.pairs[:, 0]]
    pb = t.apply(b.keypoints[c.pairs[:, 1]])
    keep = np.linalg.norm(pa - pb, axis=1) < tau
    return np.concatenate([pa[keep], pb[keep]])


def compute_ipr(points, kappa: float = 0.01, iterations: int = 512, seed: int = 0) -> float:
    """Fraction of points on the largest plane found by 3-point RANSAC.

    Fewer than 3 points returns 1.0. Small clouds are searched exhaustively.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(p)
    if n < 3:
        return 1.0
    if n * (n - 1) * (n - 2) // 6 <= iterations:
        tri = np.array(list(itertools.combinations(range(n), 3)))
    else:
        rng = np.random.default_rng(seed)
        tri = np.stack([rng.choice(n, 3, replace=False) for _ in range(iterations)])
    p0, p1, p2 = p[tri[:, 0]], p[tri[:, 1]], p[tri[:, 2]]
    normal = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(normal, axis=1)
    ok = norm > 1e-12
    if not ok.any():
        return 1.0  # all hypotheses collinear: the cloud lies on a line
    normal = normal[ok] / norm[ok, None]
    dist = np.abs(np.einsum("hj,nj->hn", normal, p) - np.einsum("hj,hj->h", normal, p0[ok])[:, None])
    return float((dist < kappa).sum(1).max() / n)


# ------------------------------------------------------------ tree init

@dataclass
class SpanningInit:
    root: int
    poses: list[RigidPose]
    hops: np.ndarray
    priority: np.ndarray
    tree_edges: list[tuple[int, int]]

    @property
    def max_hop(self) -> int:
        return int(self.hops.max())


def maximum_spanning_tree(n: int, weighted_pairs) -> list[tuple[int, int]]:
    """Kruskal on (u, v, w) triples; ties broken by (u, v) order."""
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    tree = []
    for u, v, _ in sorted(weighted_pairs, key=lambda e: (-e[2], e[0], e[1])):
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
            tree.append((min(u, v), max(u, v)))
    return sorted(tree)


def tree_center(n: int, tree_edges) -> int:
    adj = _adjacency(n, tree_edges)
    ecc = [max(_bfs_order(adj, r)[1].values()) for r in range(n)]
    return int(np.argmin(ecc))


def spanning_init(g: PoseGraph) -> SpanningInit:
    """Chain edge transforms from the centre of the max-priority spanning tree."""
    if not g.is_connected():
        raise DisconnectedGraph("cannot initialise a disconnected pose graph")
    n = g.n_nodes
    tree = maximum_spanning_tree(n, [(u, v, g.priority(u, v)) for u, v in g.pairs()])
    root = tree_center(n, tree)
    order, depth, parent = _bfs_order(_adjacency(n, tree), root)
    poses: list[RigidPose | None] = [None] * n
    prio = np.ones(n)
    poses[root] = RigidPose.identity()
    for v in order[1:]:
        u = parent[v]
        # T_uv = T_u o T_v^-1  =>  T_v = T_uv^-1 o T_u
        poses[v] = compose(inverse(g.edges[(u, v)].transform), poses[u])
        prio[v] = prio[u] * g.priority(u, v)
    hops = np.array([depth[i] for i in range(n)], dtype=np.int64)
    return SpanningInit(root, poses, hops, prio, tree)


def permute_init(init: SpanningInit, perm) -> SpanningInit:
    """The same initialisation expressed after renaming node i to perm[i]."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    return SpanningInit(int(perm[init.root]), [init.poses[i] for i in inv], init.hops[inv], init.priority[inv],
                        sorted((min(perm[u], perm[v]), max(perm[u], perm[v])) for u, v in init.tree_edges))


# ------------------------------------------------------------------ file I/O

def _pose_dict(p: RigidPose) -> dict:
    return {"R": [float(x) for x in p.r.reshape(-1)], "t": [float(x) for x in p.t]}


def _pose_from(d: dict) -> RigidPose:
    return RigidPose(np.array(d["R"], dtype=np.float64).reshape(3, 3), np.array(d["t"], dtype=np.float64))


def graph_to_json(g: PoseGraph) -> dict:
    edges = []
    for u, v in g.edge_list():
        m = g.edges[(u, v)]
        edges.append({"u": u, "v": v, **_pose_dict(m.transform), "overlap": m.overlap, "icr": m.icr, "ipr": m.ipr})
    return {"nodes": g.n_nodes, "edges": edges}


def graph_from_json(data: dict) -> PoseGraph:
    g = PoseGraph(int(data["nodes"]))
    for e in data["edges"]:
        u, v = int(e["u"]), int(e["v"])
        if u == v:
            raise GraphError(f"self-loop on node {u}")
        g.edges[(u, v)] = RelMeasure(_pose_from(e), e["overlap"], e["icr"], e["ipr"])
    for (u, v), m in list(g.edges.items()):
        if (v, u) not in g.edges:
            g.edges[(v, u)] = RelMeasure(inverse(m.transform), m.overlap, m.icr, m.ipr)
    return g


def save_graph(path, g: PoseGraph) -> None:
    Path(path).write_text(json.dumps(graph_to_json(g), indent=1))


def load_graph(path) -> PoseGraph:
    return graph_from_json(json.loads(Path(path).read_text()))


def save_poses(path, poses) -> None:
    Path(path).write_text(json.dumps([_pose_dict(p) for p in poses], indent=1))


def load_poses(path) -> list[RigidPose]:
    return [_pose_from(d) for d in json.loads(Path(path).read_text())]
