"""Learned motion synchronisation on a pose graph.

The network lifts relative measurements and the spanning-tree initialisation
into per-node and per-edge rotation / translation / confidence features,
alternates confidence-attention absolute updates with relative updates for
T rounds (weights shared across rounds), regresses poses and edge weights,
and finally refines translations by weighted least squares.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tensor
from .geometry import DegenerateSixd
from .nn import MLP, Dense, GRUCell, LayerNorm, OptimState, ParamStore, optim_step, save_checkpoint
from .posegraph import PoseGraph, SpanningInit, spanning_init


class SingularSystem(ArithmeticError):
    pass


class IsolatedNode(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass
class SyncConfig:
    d: int = 64
    T: int = 4
    n_abs_updates: int = 2
    gamma: float = 0.8
    beta: float = 0.2
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 15
    seed: int = 0
    # "absolute": heads regress poses directly; "residual": heads regress a
    # correction applied to the spanning-tree initialisation
    head_mode: str = "residual"
    trans_scale: float = 5.0
    weight_floor: float = 1e-4
    # append each edge's disagreement with the initialisation to its inputs
    init_relative_inputs: bool = True


# ------------------------------------------------------------ graph tensors

DISCREPANCY_GAIN = 5.0

@dataclass
class GraphTensors:
    """Per-graph constant arrays consumed by the network."""

    n: int
    src: np.ndarray
    dst: np.ndarray
    edge_R: np.ndarray  # (E, 3, 3) measured R_uv
    edge_t: np.ndarray  # (E, 3)
    edge_conf: np.ndarray  # (E, 3) overlap, icr, ipr
    init_R: np.ndarray  # (N, 3, 3)
    init_t: np.ndarray  # (N, 3)
    node_conf: np.ndarray  # (N, 2) hop / max_hop, cumulative priority
    root: int
    by_src: Segments = field(repr=False, default=None)
    by_end: Segments = field(repr=False, default=None)

    def __post_init__(self):
        self.by_src = Segments(self.src, self.n)
        self.by_end = Segments(np.concatenate([self.src, self.dst]), self.n)
        if np.any(self.by_src.counts == 0):
            raise IsolatedNode(f"nodes without neighbours: {np.flatnonzero(self.by_src.counts == 0).tolist()}")

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def init_discrepancy(self) -> tuple[np.ndarray, np.ndarray]:
        """How far each measurement is from agreeing with the initialisation.

        For edge (u, v) the measurement proposes R_uv R_v for node u; the
        rotation returned is that proposal times R_u^T (identity when the
        edge agrees), and the translation is t_uv + R_uv t_v - t_u.
        """
        Ru, Rv = self.init_R[self.src], self.init_R[self.dst]
        rot = np.einsum("eij,ejk,elk->eil", self.edge_R, Rv, Ru)
        trans = self.edge_t + np.einsum("eij,ej->ei", self.edge_R, self.init_t[self.dst]) - self.init_t[self.src]
        return rot, trans


def graph_tensors(g: PoseGraph, init: SpanningInit | None = None) -> GraphTensors:
    init = init or spanning_init(g)
    edges = g.edge_list()
    src = np.array([u for u, _ in edges], dtype=np.int64)
    dst = np.array([v for _, v in edges], dtype=np.int64)
    meas = [g.edges[e] for e in edges]
    max_hop = max(init.max_hop, 1)
    return GraphTensors(
        n=g.n_nodes, src=src, dst=dst,
        edge_R=np.stack([m.transform.r for m in meas]),
        edge_t=np.stack([m.transform.t for m in meas]),
        edge_conf=np.array([[m.overlap, m.icr, m.ipr] for m in meas]),
        init_R=np.stack([p.r for p in init.poses]),
        init_t=np.stack([p.t for p in init.poses]),
        node_conf=np.stack([init.hops / max_hop, init.priority], axis=1),
        root=init.root,
    )


# -------------------------------------------------------- rotation helpers

def sixd_rotations(s: Tensor, eps: float = 1e-8) -> Tensor:
    """Batched Gram-Schmidt: (n, 6) -> (n, 3, 3) with columns b1, b2, b3."""
    a1, a2 = ad.cols(s, 0, 3), ad.cols(s, 3, 6)
    n1 = ad.sqrt(ad.sum(ad.mul(a1, a1), axis=1, keepdims=True))
    if np.any(n1.data < eps):
        raise DegenerateSixd("regressed first column vanished")
    b1 = ad.div(a1, n1)
    u2 = ad.sub(a2, ad.mul(ad.sum(ad.mul(b1, a2), axis=1, keepdims=True), b1))
    n2 = ad.sqrt(ad.sum(ad.mul(u2, u2), axis=1, keepdims=True))
    if np.any(n2.data < eps):
        raise DegenerateSixd("regressed columns are parallel")
    b2 = ad.div(u2, n2)
    c = [ad.cols(b1, i, i + 1) for i in range(3)]
    d = [ad.cols(b2, i, i + 1) for i in range(3)]
    b3 = ad.concat([ad.sub(ad.mul(c[1], d[2]), ad.mul(c[2], d[1])),
                    ad.sub(ad.mul(c[2], d[0]), ad.mul(c[0], d[2])),
                    ad.sub(ad.mul(c[0], d[1]), ad.mul(c[1], d[0]))], axis=1)
    rows = ad.reshape(ad.concat([b1, b2, b3], axis=1), (-1, 3, 3))
    return ad.transpose(rows, (0, 2, 1))


# --------------------------------------------------- least-squares refinement

def _pcg(apply_a, b: np.ndarray, precond: np.ndarray, root: int, tol: float = 1e-13, max_iter: int | None = None):
    """Preconditioned CG with all reductions order independent; root row fixed at 0."""
    x = np.zeros_like(b)
    b = b.copy()
    b[root] = 0.0
    bb = ad.dot_sorted(b, b)
    if bb == 0.0:
        return x
    max_iter = max_iter or 20 * b.size + 50
    r = b.copy()
    z = r / precond[:, None]
    p = z.copy()
    rz = ad.dot_sorted(r, z)
    for _ in range(max_iter):
        ap = apply_a(p)
        ap[root] = 0.0
        alpha = rz / ad.dot_sorted(p, ap)
        x += alpha * p
        r -= alpha * ap
        if ad.dot_sorted(r, r) <= tol * tol * bb:
            return x
        z = r / precond[:, None]
        rz_new = ad.dot_sorted(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SingularSystem("least-squares refinement did not converge; is the graph connected?")


class _NormalSystem:
    """Weighted normal equations of sum_e w_e |d_u - M_e d_v - r_e|^2."""

    def __init__(self, M: np.ndarray, w: np.ndarray, src, dst, n: int, ends: Segments, root: int):
        self.M, self.w, self.src, self.dst, self.n, self.ends, self.root = M, w, src, dst, n, ends, root
        self.diag = ends.sum_values(np.concatenate([w, w]))
        self.diag[root] = 1.0

    def edge_residual(self, x):
        return x[self.src] - np.einsum("eij,ej->ei", self.M, x[self.dst])

    def scatter(self, y):
        """Per-node sum of w y at the source and -w M^T y at the target."""
        wy = self.w[:, None] * y
        return self.ends.sum_values(np.concatenate([wy, -np.einsum("eji,ej->ei", self.M, wy)]))

    def apply(self, x):
        return self.scatter(self.edge_residual(x))

    def solve(self, rhs):
        return _pcg(self.apply, rhs, self.diag, self.root)


def _refine_delta(M: Tensor, w: Tensor, r: Tensor, gt: GraphTensors) -> Tensor:
    """delta minimising sum_e w_e |delta_u - M_e delta_v - r_e|^2 with delta_root = 0."""
    M64, w64, r64 = (np.asarray(t.data, dtype=np.float64) for t in (M, w, r))
    sys = _NormalSystem(M64, w64, gt.src, gt.dst, gt.n, gt.by_end, gt.root)
    delta = sys.solve(sys.scatter(r64))

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        lam = sys.solve(g)
        lam_res = sys.edge_residual(lam)  # lam_u - M lam_v
        d_res = sys.edge_residual(delta)  # delta_u - M delta_v
        lam_v, d_v = lam[gt.dst], delta[gt.dst]
        g_r = w64[:, None] * lam_res
        g_w = np.einsum("ei,ei->e", r64, lam_res) - np.einsum("ei,ei->e", lam_res, d_res)
        g_M = (-w64[:, None, None] * np.einsum("ei,ej->eij", r64, lam_v)
               + w64[:, None, None] * (np.einsum("ei,ej->eij", d_res, lam_v) + np.einsum("ei,ej->eij", lam_res, d_v)))
        return g_M, g_w, g_r

    return ad._record(delta.astype(M.data.dtype), (M, w, r), backward)


def refine_translations_tensor(R: Tensor, t_coarse: Tensor, gt: GraphTensors, w: Tensor) -> Tensor:
    M = ad.einsum("eij,ekj->eik", ad.gather(R, gt.src), ad.gather(R, gt.dst))
    r = ad.add(ad.sub(gt.edge_t.astype(ad.get_dtype()), ad.gather(t_coarse, gt.src)),
               ad.einsum("eij,ej->ei", M, ad.gather(t_coarse, gt.dst)))
    return ad.add(t_coarse, _refine_delta(M, w, r, gt))


def refine_translations(rotations, coarse_t, edges: Sequence[tuple[int, int]], t_rel, weights, root: int = 0):
    """Closed-form weighted least-squares position refinement (float64).

    Minimises sum_(u,v) w_uv |t_u - R_u R_v^T t_v - t_uv|^2 over corrections
    to ``coarse_t`` with the root's correction held at zero.
    """
    R = np.asarray(rotations, dtype=np.float64)
    tc = np.asarray(coarse_t, dtype=np.float64)
    src = np.array([u for u, _ in edges], dtype=np.int64)
    dst = np.array([v for _, v in edges], dtype=np.int64)
    n = len(R)
    M = np.einsum("eij,ekj->eik", R[src], R[dst])
    r = np.asarray(t_rel, dtype=np.float64) - tc[src] + np.einsum("eij,ej->ei", M, tc[dst])
    sys = _NormalSystem(M, np.asarray(weights, dtype=np.float64), src, dst, n,
                        Segments(np.concatenate([src, dst]), n), root)
    return tc + sys.solve(sys.scatter(r))


# ------------------------------------------------------------------ network

class _Stream:
    """Parameters of one (rotation or translation) feature-update stream."""

    def __init__(self, p: ParamStore, name: str, d: int, extra_edge: int):
        self.mix = MLP(p, f"{name}.abs.mix", [2 * d + extra_edge, d, d])
        self.query = Dense(p, f"{name}.abs.query", 2 * d, d)
        self.key = Dense(p, f"{name}.abs.key", 2 * d, d)
        self.value = Dense(p, f"{name}.abs.value", d, d)
        self.conf_value = Dense(p, f"{name}.abs.conf_value", d, d)
        self.abs_gru = GRUCell(p, f"{name}.abs.gru", 2 * d, 2 * d)
        self.abs_ln_feat = LayerNorm(p, f"{name}.abs.ln_feat", d)
        self.abs_ln_conf = LayerNorm(p, f"{name}.abs.ln_conf", d)
        self.rel_feat = MLP(p, f"{name}.rel.feat", [2 * d, d, d])
        self.rel_conf = MLP(p, f"{name}.rel.conf", [2 * d, d, d])
        self.rel_gru = GRUCell(p, f"{name}.rel.gru", 2 * d, 2 * d)
        self.rel_ln_feat = LayerNorm(p, f"{name}.rel.ln_feat", d)
        self.rel_ln_conf = LayerNorm(p, f"{name}.rel.ln_conf", d)


@dataclass
class FeatureState:
    node: dict[str, Tensor]  # keys "R", "t", "C"
    edge: dict[str, Tensor]
    attention: list[np.ndarray] = field(default_factory=list)


@dataclass
class SyncOutput:
    R: Tensor  # (N, 3, 3)
    t_coarse: Tensor  # (N, 3)
    t: Tensor  # (N, 3) refined
    rel_R: Tensor  # (E, 3, 3)
    rel_t: Tensor  # (E, 3)
    w: Tensor  # (E,)


class SyncNet:
    def __init__(self, config: SyncConfig | None = None):
        self.config = cfg = config or SyncConfig()
        d = cfg.d
        self.params = p = ParamStore(cfg.seed)
        extra = 2 if cfg.init_relative_inputs else 1
        self.edge_in = {"R": MLP(p, "init.edge.R", [9 * extra, d, d]), "t": MLP(p, "init.edge.t", [3 * extra, d, d]),
                        "C": MLP(p, "init.edge.C", [3, d, d])}
        self.node_in = {"R": MLP(p, "init.node.R", [9, d, d]), "t": MLP(p, "init.node.t", [3, d, d]),
                        "C": MLP(p, "init.node.C", [2, d, d])}
        self.streams = {"R": _Stream(p, "rot", d, 0), "t": _Stream(p, "trans", d, d)}
        self.head_R = MLP(p, "head.R", [d, d, 6])
        self.head_t = MLP(p, "head.t", [d, d, 3])
        self.head_rel_R = MLP(p, "head.rel_R", [d, d, 6])
        self.head_rel_t = MLP(p, "head.rel_t", [d, d, 3])
        self.head_w = MLP(p, "head.w", [d, d, 1])
        if cfg.head_mode not in ("absolute", "residual"):
            raise ValueError(f"unknown head_mode {cfg.head_mode!r}")
        if cfg.head_mode == "residual":
            # corrections start at zero: the untrained net reproduces the initialisation
            for head in (self.head_R, self.head_t, self.head_rel_R, self.head_rel_t):
                head.layers[-1].W.data[:] = 0.0

    # -- stages -----------------------------------------------------------
    def init_features(self, gt: GraphTensors) -> FeatureState:
        dt = ad.get_dtype()
        s = 1.0 / self.config.trans_scale
        er, et = gt.edge_R.reshape(-1, 9), gt.edge_t * s
        if self.config.init_relative_inputs:
            dr, dtr = gt.init_discrepancy()
            # disagreements are small; centre and amplify them to unit scale
            dr = (dr - np.eye(3)).reshape(-1, 9) * DISCREPANCY_GAIN
            er, et = np.concatenate([er, dr], axis=1), np.concatenate([et, dtr], axis=1)
        edge = {"R": self.edge_in["R"](ad.Tensor(er.astype(dt))),
                "t": self.edge_in["t"](ad.Tensor(et.astype(dt))),
                "C": self.edge_in["C"](ad.Tensor(gt.edge_conf.astype(dt)))}
        node = {"R": self.node_in["R"](ad.Tensor(gt.init_R.reshape(-1, 9).astype(dt))),
                "t": self.node_in["t"](ad.Tensor((gt.init_t * s).astype(dt))),
                "C": self.node_in["C"](ad.Tensor(gt.node_conf.astype(dt)))}
        return FeatureState(node, edge)

    def absolute_update(self, stream: str, st: FeatureState, gt: GraphTensors) -> FeatureState:
        sp = self.streams[stream]
        d = self.config.d
        mix_in = [ad.gather(st.node[stream], gt.dst), st.edge[stream]]
        if stream == "t":
            mix_in.append(st.edge["R"])
        z = sp.mix(ad.concat(mix_in, axis=1))
        q = sp.query(ad.concat([st.node[stream], st.node["C"]], axis=1))
        k = sp.key(ad.concat([z, st.edge["C"]], axis=1))
        logits = ad.mul(ad.einsum("ed,ed->e", ad.gather(q, gt.src), k), 1.0 / math.sqrt(d))
        alpha = ad.segment_softmax(logits, gt.by_src)
        a = ad.reshape(alpha, (-1, 1))
        msg = ad.segment_sum(ad.mul(a, sp.value(z)), gt.by_src)
        cmsg = ad.segment_sum(ad.mul(a, sp.conf_value(st.edge["C"])), gt.by_src)
        hidden = ad.concat([sp.abs_ln_feat(st.node[stream]), sp.abs_ln_conf(st.node["C"])], axis=1)
        h = sp.abs_gru(hidden, ad.concat([msg, cmsg], axis=1))
        node = dict(st.node)
        node[stream], node["C"] = ad.cols(h, 0, d), ad.cols(h, d, 2 * d)
        return FeatureState(node, st.edge, st.attention + [alpha.data])

    def relative_update(self, stream: str, st: FeatureState, gt: GraphTensors) -> FeatureState:
        sp = self.streams[stream]
        d = self.config.d
        hn, hc = st.node[stream], st.node["C"]
        fuse = sp.rel_feat(ad.concat([ad.gather(hn, gt.src), ad.gather(hn, gt.dst)], axis=1))
        fuse_c = sp.rel_conf(ad.concat([ad.gather(hc, gt.src), ad.gather(hc, gt.dst)], axis=1))
        hidden = ad.concat([sp.rel_ln_feat(st.edge[stream]), sp.rel_ln_conf(st.edge["C"])], axis=1)
        h = sp.rel_gru(hidden, ad.concat([fuse, fuse_c], axis=1))
        edge = dict(st.edge)
        edge[stream], edge["C"] = ad.cols(h, 0, d), ad.cols(h, d, 2 * d)
        return FeatureState(st.node, edge, st.attention)

    def iterate(self, st: FeatureState, gt: GraphTensors) -> FeatureState:
        for stream in ("R", "t"):
            for _ in range(self.config.n_abs_updates):
                st = self.absolute_update(stream, st, gt)
            st = self.relative_update(stream, st, gt)
        return st

    def regress_poses(self, st: FeatureState, gt: GraphTensors) -> SyncOutput:
        cfg = self.config
        dt = ad.get_dtype()
        sixd = self.head_R(st.node["R"])
        rel_sixd = self.head_rel_R(st.edge["R"])
        t = ad.mul(self.head_t(st.node["t"]), cfg.trans_scale)
        rel_t = ad.mul(self.head_rel_t(st.edge["t"]), cfg.trans_scale)
        if cfg.head_mode == "residual":
            eye6 = np.array([1, 0, 0, 0, 1, 0], dtype=dt)
            R = ad.einsum("nij,njk->nik", sixd_rotations(ad.add(sixd, eye6)), gt.init_R.astype(dt))
            rel_R = ad.einsum("eij,ejk->eik", sixd_rotations(ad.add(rel_sixd, eye6)), gt.edge_R.astype(dt))
            t = ad.add(t, gt.init_t.astype(dt))
            rel_t = ad.add(rel_t, gt.edge_t.astype(dt))
        else:
            R = sixd_rotations(sixd)
            rel_R = sixd_rotations(rel_sixd)
        w = ad.add(ad.softplus(ad.reshape(self.head_w(st.edge["C"]), (-1,))), cfg.weight_floor)
        refined = refine_translations_tensor(R, t, gt, w)
        return SyncOutput(R, t, refined, rel_R, rel_t, w)

    def run(self, gt: GraphTensors, T: int | None = None, regress_all: bool = False):
        """Run T rounds; returns (states, outputs) with one output per regressed round."""
        T = self.config.T if T is None else T
        if T < 1:
            raise ValueError("T must be >= 1")
        st = self.init_features(gt)
        states, outs = [], []
        for it in range(T):
            st = self.iterate(st, gt)
            states.append(st)
            if regress_all or it == T - 1:
                outs.append(self.regress_poses(st, gt))
        return states, outs

    def predict(self, gt: GraphTensors):
        """Final-round rotations, coarse and refined translations (float64 arrays)."""
        _, outs = self.run(gt)
        o = outs[-1]
        return (o.R.data.astype(np.float64), o.t_coarse.data.astype(np.float64), o.t.data.astype(np.float64),
                o.w.data.astype(np.float64))


# --------------------------------------------------------------------- loss

@dataclass
class GroundTruth:
    R: np.ndarray  # (N, N, 3, 3) relative rotations R_uv for all ordered pairs
    t: np.ndarray  # (N, N, 3)


def motion_loss(outputs: Sequence[SyncOutput], gt: GraphTensors, truth: GroundTruth,
                gamma: float = 0.8, beta: float = 0.2) -> Tensor:
    """Discounted rotation + beta * translation loss over all regressed rounds.

    ``|.|`` is the mean absolute value over the elements of each residual.
    """
    dt = ad.get_dtype()
    gR = truth.R.astype(dt)
    gtt = truth.t.astype(dt)
    gR_e = gR[gt.src, gt.dst]
    gt_e = gtt[gt.src, gt.dst]
    T = len(outputs)
    l_rot = l_trans = None
    for i, o in enumerate(outputs):
        disc = gamma ** (T - 1 - i)
        RR = ad.einsum("uij,vkj->uvik", o.R, o.R)
        rot = ad.add(ad.mean(ad.abs(ad.sub(RR, gR))), ad.mean(ad.abs(ad.sub(o.rel_R, gR_e))))
        trans = ad.mean(ad.abs(ad.sub(o.rel_t, gt_e)))
        for tt in (o.t, o.t_coarse):
            pred = ad.sub(ad.reshape(tt, (-1, 1, 3)), ad.einsum("uvij,vj->uvi", RR, tt))
            trans = ad.add(trans, ad.mean(ad.abs(ad.sub(pred, gtt))))
        l_rot = ad.mul(rot, disc) if l_rot is None else ad.add(l_rot, ad.mul(rot, disc))
        l_trans = ad.mul(trans, disc) if l_trans is None else ad.add(l_trans, ad.mul(trans, disc))
    return ad.add(l_rot, ad.mul(l_trans, beta))


# ----------------------------------------------------------------- training

@dataclass
class TrainSample:
    tensors: GraphTensors
    truth: GroundTruth


def train_sync(samples: Sequence[TrainSample] | Callable[[int], TrainSample], n_samples: int | None = None,
               config: SyncConfig | None = None, checkpoint=None, log=None, resume_from=None,
               stop_after: int | None = None) -> SyncNet:
    """AdamW + cosine schedule, one graph per step, regression at every round.

    ``samples`` may be a sequence or a callable index -> sample (so scenes can
    be generated on the fly). Sample order per epoch is a seeded permutation.
    """
    from .nn import load_checkpoint

    cfg = config or SyncConfig()
    get = samples if callable(samples) else samples.__getitem__
    n = n_samples if callable(samples) else len(samples)
    if not n:
        raise EmptyDataset("sync training needs at least one graph")
    net = SyncNet(cfg)
    opt = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay, horizon=cfg.epochs * n)
    if resume_from is not None:
        load_checkpoint(resume_from, net.params, opt)
    total = cfg.epochs * n
    while opt.step < total:
        epoch, pos = divmod(opt.step, n)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sample = get(int(order[pos]))
        with ad.Tape() as tape:
            _, outs = net.run(sample.tensors, regress_all=True)
            loss = motion_loss(outs, sample.tensors, sample.truth, cfg.gamma, cfg.beta)
        net.params.zero_grad()
        tape.backward(loss)
        lr = optim_step(net.params, opt)
        if log is not None:
            log(opt.step, float(loss.data), lr)
        stopping = stop_after is not None and opt.step >= stop_after
        if checkpoint is not None and (opt.step % n == 0 or opt.step == total or stopping):
            save_checkpoint(checkpoint, net.params, opt)
        if stopping:
            break
    return net
