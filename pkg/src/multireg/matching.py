"""Descriptor matching, matching-distance statistics and the overlap network."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .nn import MLP, Dense, OptimState, ParamStore, optim_step, save_checkpoint

DESC_MAGIC = b"MDSC"
DESC_VERSION = 1
ECDF_THRESHOLDS = (0.25, 0.30, 0.35, 0.40)


class EmptyDataset(ValueError):
    pass


class DescriptorFileError(ValueError):
    pass


@dataclass
class DescriptorSet:
    keypoints: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        if desc.ndim != 2 or len(desc) != len(self.keypoints):
            raise ValueError(f"descriptor shape {desc.shape} vs {len(self.keypoints)} keypoints")
        if len(desc) < 1:
            raise ValueError("descriptor set must be non-empty")
        norms = np.linalg.norm(desc, axis=1, keepdims=True)
        self.descriptors = desc / np.maximum(norms, 1e-12)

    def __len__(self):
        return len(self.keypoints)


@dataclass
class CorrespondenceSet:
    pairs: np.ndarray  # (m, 2) int
    distances: np.ndarray  # (m,)

    def __len__(self):
        return len(self.pairs)

    def transposed(self) -> "CorrespondenceSet":
        p = self.pairs[:, ::-1]
        order = np.lexsort((p[:, 1], p[:, 0]))
        return CorrespondenceSet(p[order].copy(), self.distances[order].copy())


@dataclass
class MatchStats:
    count: int = 0
    mean: float = 0.0
    median: float = 0.0
    std: float = 0.0
    ecdf: tuple = field(default_factory=lambda: (0.0, 0.0, 0.0, 0.0))

    @property
    def is_sentinel(self) -> bool:
        return self.count == 0

    def vector(self, n_cap: int = 5000) -> np.ndarray:
        """The 8 network inputs; count is squashed as log(1+c)/log(1+n_cap)."""
        c = math.log1p(self.count) / math.log1p(n_cap)
        return np.array([c, self.mean, self.median, self.std, *self.ecdf], dtype=np.float64)


EMPTY_STATS = MatchStats()


def _nearest(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Index of the nearest row of b for every row of a (first index on ties)."""
    out = np.empty(len(a), dtype=np.int64)
    bn = (b * b).sum(1)
    for s in range(0, len(a), chunk):
        blk = a[s:s + chunk]
        d2 = (blk * blk).sum(1)[:, None] + bn[None, :] - 2.0 * blk @ b.T
        out[s:s + chunk] = np.argmin(d2, axis=1)
    return out


def mutual_match(a: DescriptorSet, b: DescriptorSet) -> CorrespondenceSet:
    """Mutual nearest neighbours in descriptor space, sorted by index in ``a``."""
    fa, fb = a.descriptors, b.descriptors
    nn_ab = _nearest(fa, fb)
    nn_ba = _nearest(fb, fa)
    i = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(fa)))
    j = nn_ab[i]
    dist = np.linalg.norm(fa[i] - fb[j], axis=1)
    return CorrespondenceSet(np.stack([i, j], axis=1).astype(np.int64), dist)


def compute_stats(c: CorrespondenceSet | Sequence[float], thresholds=ECDF_THRESHOLDS) -> MatchStats:
    """Population statistics of matching distances.

    An empty correspondence set yields the sentinel (all zeros). Statistics
    are computed on the sorted distances, so they do not depend on pair order.
    """
    d = np.asarray(c.distances if isinstance(c, CorrespondenceSet) else c, dtype=np.float64)
    n = len(d)
    if n == 0:
        return MatchStats()
    d = np.sort(d)
    mean = float(d.sum() / n)
    std = float(math.sqrt(((d - mean) ** 2).sum() / n))
    median = float(d[(n - 1) // 2])
    ecdf = tuple(float(np.searchsorted(d, eps, side="right") / n) for eps in thresholds)
    return MatchStats(n, mean, median, std, ecdf)


# ------------------------------------------------------------- overlap network

class OverlapNet:
    """projection -> 3 inverted residual blocks -> sigmoid regression head."""

    def __init__(self, width: int = 64, n_blocks: int = 3, n_cap: int = 5000, seed: int = 0):
        self.width, self.n_cap = width, n_cap
        self.params = ParamStore(seed)
        p = self.params
        self.proj = Dense(p, "overlap.proj", 8, width)
        self.blocks = [(Dense(p, f"overlap.block{i}.expand", width, 4 * width),
                        Dense(p, f"overlap.block{i}.compress", 4 * width, width)) for i in range(n_blocks)]
        self.head = MLP(p, "overlap.head", [width, width, 1])
        # residual branches and the logit start at zero so the sigmoid is not saturated at init
        for _, compress in self.blocks:
            compress.W.data[:] = 0.0
        self.head.layers[-1].W.data[:] = 0.0

    def forward(self, x) -> ad.Tensor:
        h = ad.relu(self.proj(ad.as_tensor(x)))
        for expand, compress in self.blocks:
            h = ad.add(h, compress(ad.relu(expand(h))))
        return ad.sigmoid(self.head(h))

    def inputs(self, stats: Sequence[MatchStats]) -> np.ndarray:
        return np.stack([s.vector(self.n_cap) for s in stats]).astype(ad.get_dtype())

    def predict(self, stats: Sequence[MatchStats]) -> np.ndarray:
        stats = list(stats)
        out = np.zeros(len(stats))
        live = [i for i, s in enumerate(stats) if not s.is_sentinel]
        if live:
            out[live] = self.forward(self.inputs([stats[i] for i in live])).data[:, 0]
        return np.clip(out, 0.0, 1.0)


def predict_overlap(s: MatchStats, net: OverlapNet) -> float:
    return float(net.predict([s])[0])


@dataclass
class OverlapTrainConfig:
    lr: float = 0.01
    weight_decay: float = 1e-4
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    width: int = 64
    n_cap: int = 5000


def train_overlap(dataset: Sequence[tuple[MatchStats, float]], config: OverlapTrainConfig | None = None,
                  checkpoint: str | Path | None = None,
                  log: Callable[[int, float, float], None] | None = None) -> OverlapNet:
    """Fit the overlap net with mean smooth-L1 loss under AdamW + cosine decay."""
    cfg = config or OverlapTrainConfig()
    dataset = [(s, o) for s, o in dataset if not s.is_sentinel]
    if not dataset:
        raise EmptyDataset("overlap training needs at least one non-empty sample")
    net = OverlapNet(cfg.width, n_cap=cfg.n_cap, seed=cfg.seed)
    x_all = net.inputs([s for s, _ in dataset])
    y_all = np.array([o for _, o in dataset], dtype=ad.get_dtype())[:, None]
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    opt = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay, horizon=cfg.epochs * steps_per_epoch)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            with ad.Tape() as tape:
                pred = net.forward(x_all[idx])
                loss = ad.mean(ad.smooth_l1(ad.sub(pred, y_all[idx])))
            net.params.zero_grad()
            tape.backward(loss)
            lr = optim_step(net.params, opt)
            if log is not None:
                log(opt.step, float(loss.data), lr)
    if checkpoint is not None:
        save_checkpoint(checkpoint, net.params)
    return net


# ------------------------------------------------------------ descriptor files

def write_descriptors(path, ds: DescriptorSet) -> None:
    kp = np.asarray(ds.keypoints, dtype="<f4")
    desc = np.asarray(ds.descriptors, dtype="<f4")
    header = DESC_MAGIC + struct.pack("<III", DESC_VERSION, len(kp), desc.shape[1])
    Path(path).write_bytes(header + kp.tobytes() + desc.tobytes())


def read_descriptors(path) -> DescriptorSet:
    buf = Path(path).read_bytes()
    if buf[:4] != DESC_MAGIC:
        raise DescriptorFileError(f"{path}: bad magic {buf[:4]!r}")
    version, n, d = struct.unpack_from("<III", buf, 4)
    if version != DESC_VERSION:
        raise DescriptorFileError(f"{path}: unsupported version {version}")
    need = 16 + 4 * n * (3 + d)
    if len(buf) != need:
        raise DescriptorFileError(f"{path}: expected {need} bytes, found {len(buf)}")
    kp = np.frombuffer(buf, "<f4", n * 3, 16).reshape(n, 3)
    desc = np.frombuffer(buf, "<f4", n * d, 16 + 12 * n).reshape(n, d)
    return DescriptorSet(kp, desc)
