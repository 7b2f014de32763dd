"""Reverse-mode vs central-difference gradient checks (float64)."""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from . import nn

STEP = 1e-6
TOLERANCE = 1e-4
# gradients smaller than this are compared in absolute terms
SCALE_FLOOR = 1e-4


def relative_error(fd: np.ndarray, an: np.ndarray) -> float:
    """max|fd - an| / max(max|fd|, max|an|, SCALE_FLOOR)."""
    fd, an = np.asarray(fd, dtype=np.float64), np.asarray(an, dtype=np.float64)
    scale = max(np.abs(fd).max(initial=0.0), np.abs(an).max(initial=0.0), SCALE_FLOOR)
    return float(np.abs(fd - an).max(initial=0.0) / scale)


def check(loss_fn: Callable[[], ad.Tensor], tensors: dict[str, ad.Tensor], rng: np.random.Generator,
          entries: int | None = None, step: float = STEP) -> dict[str, float]:
    """Per-tensor relative error of tape gradients against central differences.

    ``entries`` limits the number of randomly chosen elements probed per
    tensor (None probes every element).
    """
    with ad.Tape() as tape:
        loss = loss_fn()
    for t in tensors.values():
        t.grad = None
    tape.backward(loss)
    errors = {}
    for name, t in tensors.items():
        size = t.data.size
        flat_idx = np.arange(size) if entries is None or entries >= size else rng.choice(size, entries, replace=False)
        an = np.zeros(len(flat_idx)) if t.grad is None else t.grad.reshape(-1)[flat_idx]
        fd = np.empty(len(flat_idx))
        flat = t.data.reshape(-1)
        for k, i in enumerate(flat_idx):
            old = flat[i]
            flat[i] = old + step
            hi = float(loss_fn().data)
            flat[i] = old - step
            lo = float(loss_fn().data)
            flat[i] = old
            fd[k] = (hi - lo) / (2 * step)
        errors[name] = relative_error(fd, an)
    return errors


# -------------------------------------------------------------- the suite

def _layer_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, dict]]:
    P = ad.parameter
    x = P(rng.standard_normal((5, 4)))
    W = P(rng.standard_normal((4, 3)))
    b = P(rng.standard_normal(3))
    up = rng.standard_normal((5, 3))
    yield "dense", lambda: ad.sum(ad.mul(nn.dense(x, W, b), up)), {"x": x, "W": W, "b": b}

    xl = P(rng.standard_normal((4, 6)))
    g = P(rng.standard_normal(6))
    bl = P(rng.standard_normal(6))
    ul = rng.standard_normal((4, 6))
    yield "layernorm", lambda: ad.sum(ad.mul(ad.layernorm(xl, g, bl), ul)), {"x": xl, "gain": g, "bias": bl}

    d, din = 3, 2
    h = P(rng.standard_normal((4, d)))
    xi = P(rng.standard_normal((4, din)))
    Wx = P(0.5 * rng.standard_normal((din, 3 * d)))
    Wh = P(0.5 * rng.standard_normal((d, 3 * d)))
    bx = P(0.5 * rng.standard_normal(3 * d))
    bh = P(0.5 * rng.standard_normal(3 * d))
    ug = rng.standard_normal((4, d))
    yield "gru_cell", lambda: ad.sum(ad.mul(nn.gru_cell(h, xi, Wx, Wh, bx, bh), ug)), \
        {"h": h, "x": xi, "Wx": Wx, "Wh": Wh, "bx": bx, "bh": bh}

    q = P(rng.standard_normal((1, 4)))
    k = P(rng.standard_normal((5, 4)))
    v = P(rng.standard_normal((5, 3)))
    ua = rng.standard_normal((1, 3))
    yield "softmax_attention", lambda: ad.sum(ad.mul(ad.softmax_attention(q, k, v), ua)), {"q": q, "k": k, "v": v}

    # keep samples away from the |x| = 1 seam so the difference quotient stays one-sided-free
    xs = rng.uniform(0.05, 0.9, 8) * rng.choice([-1.0, 1.0], 8) * rng.choice([1.0, 3.0], 8)
    s = P(xs)
    yield "smooth_l1", lambda: ad.sum(ad.smooth_l1(s)), {"x": s}

    seg = ad.Segments(np.array([0, 0, 1, 2, 2, 2]), 3)
    lg = P(rng.standard_normal(6))
    us = rng.standard_normal(6)
    yield "segment_softmax", lambda: ad.sum(ad.mul(ad.segment_softmax(lg, seg), us)), {"logits": lg}

    from .syncnet import sixd_rotations

    six = P(rng.standard_normal((3, 6)))
    ur = rng.standard_normal((3, 3, 3))
    yield "sixd_rotations", lambda: ad.sum(ad.mul(sixd_rotations(six), ur)), {"sixd": six}

    store = nn.ParamStore(int(rng.integers(1 << 30)))
    mlp = nn.MLP(store, "mlp", [4, 6, 6, 2])
    for t in store:
        t.data = t.data + 0.1 * rng.standard_normal(t.data.shape)
    xm = P(rng.standard_normal((3, 4)))
    um = rng.standard_normal((3, 2))
    yield "mlp_stack", lambda: ad.sum(ad.mul(mlp(xm), um)), {"x": xm, **store.tensors}


def motion_loss_case(seed: int, d: int = 8, T: int = 2, head_mode: str = "residual"):
    """Full motion loss of a small sync-net on a 4-node synthetic graph."""
    from .synth import SceneSpec, gen_scene
    from .syncnet import SyncConfig, SyncNet, motion_loss

    scene = gen_scene(SceneSpec(n_frames=(4, 4), sigma_r=5.0, sigma_t=0.1, p_out=0.3, k=2, seed=[5, seed]))
    sample = scene.sample()
    net = SyncNet(SyncConfig(d=d, T=T, seed=seed, head_mode=head_mode))
    jitter = np.random.default_rng([9, seed])
    # move zero-initialised biases off the ReLU kink at exactly zero input
    for t in net.params:
        t.data = t.data + 0.05 * jitter.standard_normal(t.data.shape)

    def loss():
        _, outs = net.run(sample.tensors, regress_all=True)
        return motion_loss(outs, sample.tensors, sample.truth)

    return loss, net.params.tensors


def run_gradient_suite(seeds: int = 20, entries: int = 2) -> list[tuple[str, float, bool]]:
    """One (name, worst relative error, passed) row per layer type and the full loss."""
    results: dict[str, float] = {}
    with ad.precision(np.float64):
        for seed in range(seeds):
            rng = np.random.default_rng([3, seed])
            for name, fn, tensors in _layer_cases(rng):
                err = max(check(fn, tensors, rng).values())
                results[name] = max(results.get(name, 0.0), err)
            loss, tensors = motion_loss_case(seed)
            err = max(check(loss, tensors, rng, entries=entries).values())
            results["motion_loss"] = max(results.get("motion_loss", 0.0), err)
    return [(k, v, v < TOLERANCE) for k, v in results.items()]
