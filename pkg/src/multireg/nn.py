"""Neural building blocks, AdamW with cosine schedule, MDGD checkpoints."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"MDGD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered, named parameter tensors shared by a network's layers."""

    def __init__(self, seed: int = 0):
        self.tensors: dict[str, Tensor] = {}
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = ad.parameter(value, name=name)
        self.tensors[name] = t
        return t

    def kaiming(self, name: str, fan_in: int, shape) -> Tensor:
        bound = math.sqrt(6.0 / fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, shape))

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, t in self.tensors.items():
            if state[k].shape != t.data.shape:
                raise CheckpointError(f"{k}: shape {state[k].shape} != {t.data.shape}")
            t.data = np.asarray(state[k], dtype=t.data.dtype).copy()

    def cast(self, dtype) -> None:
        for t in self.tensors.values():
            t.data = t.data.astype(dtype)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


class Dense:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int):
        self.d_in, self.d_out = d_in, d_out
        self.W = store.kaiming(f"{name}.W", d_in, (d_in, d_out))
        self.b = store.add(f"{name}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ad.ShapeMismatch(f"dense expects {self.d_in} inputs, got {x.shape}")
        return ad.add(ad.matmul(x, self.W), self.b)


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[-1]:
        raise ad.ShapeMismatch(f"dense {x.shape} x {W.shape} + {b.shape}")
    return ad.add(ad.matmul(x, W), b)


class MLP:
    """dense -> ReLU -> ... -> dense; the last layer is linear."""

    def __init__(self, store: ParamStore, name: str, dims: list[int]):
        self.layers = [Dense(store, f"{name}.{i}", a, b) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        if d < 2:
            raise ValueError("layernorm needs d >= 2")
        self.gain = store.add(f"{name}.gain", np.ones(d))
        self.bias = store.add(f"{name}.bias", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gain, self.bias)


class GRUCell:
    """h' = (1 - z) * h + z * candidate, with z, r sigmoid gates."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int):
        self.d_in, self.d_hidden = d_in, d_hidden
        self.Wx = store.kaiming(f"{name}.Wx", d_in, (d_in, 3 * d_hidden))
        self.Wh = store.kaiming(f"{name}.Wh", d_hidden, (d_hidden, 3 * d_hidden))
        self.bx = store.add(f"{name}.bx", np.zeros(3 * d_hidden))
        self.bh = store.add(f"{name}.bh", np.zeros(3 * d_hidden))

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        return gru_cell(h, x, self.Wx, self.Wh, self.bx, self.bh)


def gru_cell(h: Tensor, x: Tensor, Wx: Tensor, Wh: Tensor, bx: Tensor, bh: Tensor) -> Tensor:
    d = h.shape[-1]
    if Wx.shape != (x.shape[-1], 3 * d) or Wh.shape != (d, 3 * d):
        raise ad.ShapeMismatch(f"gru weights {Wx.shape}, {Wh.shape} for h {h.shape}, x {x.shape}")
    gx = dense(x, Wx, bx)
    gh = dense(h, Wh, bh)
    z = ad.sigmoid(ad.add(ad.cols(gx, 0, d), ad.cols(gh, 0, d)))
    r = ad.sigmoid(ad.add(ad.cols(gx, d, 2 * d), ad.cols(gh, d, 2 * d)))
    cand = ad.tanh(ad.add(ad.cols(gx, 2 * d, 3 * d), ad.mul(r, ad.cols(gh, 2 * d, 3 * d))))
    return ad.add(h, ad.mul(z, ad.sub(cand, h)))


# ------------------------------------------------------------------ optimiser

@dataclass
class OptimState:
    lr: float
    weight_decay: float = 1e-4
    horizon: int = 1000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        frac = min(self.step, self.horizon) / max(self.horizon, 1)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * frac))


def optim_step(params: ParamStore, state: OptimState) -> float:
    """One AdamW update using the gradients stored on ``params``.

    Returns the learning rate that was applied.
    """
    lr = state.current_lr()
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.tensors.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ad.ShapeMismatch(f"moment shape for {name}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return lr


# ----------------------------------------------------------------- checkpoints

def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors in the MDGD format."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        off += 4 * size
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def save_checkpoint(path, params: ParamStore, opt: OptimState | None = None) -> None:
    tensors = {k: t.data for k, t in params.tensors.items()}
    if opt is not None:
        tensors["opt.step"] = np.array([opt.step], dtype=np.float32)
        for k in params.tensors:
            if k in opt.m:
                tensors[f"opt.m.{k}"] = opt.m[k]
                tensors[f"opt.v.{k}"] = opt.v[k]
    save_tensors(path, tensors)


def load_checkpoint(path, params: ParamStore, opt: OptimState | None = None) -> None:
    tensors = load_tensors(path)
    params.load_state({k: v for k, v in tensors.items() if not k.startswith("opt.")})
    if opt is not None and "opt.step" in tensors:
        opt.step = int(tensors["opt.step"][0])
        opt.m = {k[6:]: v.copy() for k, v in tensors.items() if k.startswith("opt.m.")}
        opt.v = {k[6:]: v.copy() for k, v in tensors.items() if k.startswith("opt.v.")}
