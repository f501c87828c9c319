"""Neural building blocks on top of :mod:`slotmix.autodiff`.

Parameters live in a flat :class:`ParameterStore` keyed by dotted names
(``"gru.W_ih"``, ``"mlp.fc1.W"``); layers are plain functions that look
their weights up by prefix. Linear weights are stored as (fan_in, fan_out)
so a layer is ``x @ W + b``.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, DatasetFormatError, ShapeError

LN_EPS = 1e-5


class ParameterStore:
    """Named trainable tensors plus Adam moment buffers keyed by the same names."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def set(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise ShapeError("ParameterStore.set", value.shape, self.params[name].shape)
        self.params[name].data = value.copy()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self):
        """Gradient per parameter, zeros for parameters the loss never reached."""
        return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in self.params.items()}

    def num_scalars(self):
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self):
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state_dict(self, state, strict=True):
        if strict and set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ContractViolation(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, v in state.items():
            if k in self.params:
                self.set(k, v)

    def subset(self, prefix):
        """Names under ``prefix.`` stripped of the prefix (views, not copies)."""
        out = ParameterStore()
        for k, p in self.params.items():
            if k.startswith(prefix + "."):
                out.params[k[len(prefix) + 1:]] = p
        return out


# ---------------------------------------------------------------- initializers
def uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


def init_linear(store, name, fan_in, fan_out, rng, bias=True):
    bound = 1.0 / math.sqrt(fan_in)
    store.add(f"{name}.W", uniform(rng, bound, (fan_in, fan_out)))
    if bias:
        store.add(f"{name}.b", uniform(rng, bound, (fan_out,)))


def init_layer_norm(store, name, dim):
    store.add(f"{name}.gain", np.ones(dim))
    store.add(f"{name}.bias", np.zeros(dim))


def init_mlp(store, name, d_in, hidden, d_out, rng):
    init_linear(store, f"{name}.fc1", d_in, hidden, rng)
    init_linear(store, f"{name}.fc2", hidden, d_out, rng)


def init_gru(store, name, d_in, d_hidden, rng):
    # gate order along the last axis: reset, update, candidate
    bound = 1.0 / math.sqrt(d_hidden)
    store.add(f"{name}.W_ih", uniform(rng, bound, (d_in, 3 * d_hidden)))
    store.add(f"{name}.W_hh", uniform(rng, bound, (d_hidden, 3 * d_hidden)))
    store.add(f"{name}.b_ih", uniform(rng, bound, (3 * d_hidden,)))
    store.add(f"{name}.b_hh", uniform(rng, bound, (3 * d_hidden,)))


# ---------------------------------------------------------------------- layers
def linear(x, store, name):
    y = ad.matmul(x, store[f"{name}.W"])
    b = f"{name}.b"
    return ad.add(y, store[b]) if b in store else y


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize over the last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = ad.as_tensor(x), ad.as_tensor(gain), ad.as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ContractViolation("layer_norm: last axis has size 0")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return ad.custom_op(out, (x, gain, bias), backward, "layer_norm")


def layer_norm_named(x, store, name):
    return layer_norm(x, store[f"{name}.gain"], store[f"{name}.bias"])


def mlp(x, store, name):
    """Two affine layers with a ReLU between; widths come from the weights."""
    h = ad.relu(linear(x, store, f"{name}.fc1"))
    return linear(h, store, f"{name}.fc2")


def gru_cell(inp, hidden, store, name):
    """Row-wise GRU update; returns the new hidden state (same shape as ``hidden``).

    r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
    z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
    n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
    h' = (1 - z) * n + z * h
    """
    inp, hidden = ad.as_tensor(inp), ad.as_tensor(hidden)
    if inp.shape[:-1] != hidden.shape[:-1]:
        raise ShapeError("gru_cell", inp.shape, hidden.shape)
    d = hidden.shape[-1]
    W_hh = store[f"{name}.W_hh"]
    if W_hh.shape != (d, 3 * d) or store[f"{name}.W_ih"].shape[0] != inp.shape[-1]:
        raise ShapeError("gru_cell", inp.shape, hidden.shape, W_hh.shape)
    gi = ad.add(ad.matmul(inp, store[f"{name}.W_ih"]), store[f"{name}.b_ih"])
    gh = ad.add(ad.matmul(hidden, W_hh), store[f"{name}.b_hh"])
    r = ad.sigmoid(ad.add(gi[..., :d], gh[..., :d]))
    z = ad.sigmoid(ad.add(gi[..., d:2 * d], gh[..., d:2 * d]))
    n = ad.tanh(ad.add(gi[..., 2 * d:], ad.mul(r, gh[..., 2 * d:])))
    return ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, hidden))


# ------------------------------------------------------------------- optimizer
def adam_step(store, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``store``."""
    missing = [k for k in store.params if k not in grads]
    if missing:
        raise ContractViolation(f"adam_step: no gradient for {missing}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError("adam_step", g.shape, p.shape, detail=name)
        m = store.m.get(name)
        v = store.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store.m[name] = m
        store.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


@dataclass(frozen=True)
class LrSchedule:
    max_lr: float
    total_steps: int
    warmup_frac: float = 0.1
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    @property
    def warmup_steps(self):
        return int(round(self.warmup_frac * self.total_steps))


def _cos_interp(start, end, frac):
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def onecycle_lr(t, sched):
    """Cosine warmup from max/div_factor to max, then cosine decay to max/final_div_factor."""
    if not 0 <= t < sched.total_steps:
        raise ContractViolation(f"onecycle_lr: step {t} outside [0, {sched.total_steps})")
    peak = sched.max_lr
    start = peak / sched.div_factor
    final = peak / sched.final_div_factor
    w = min(sched.warmup_steps, sched.total_steps - 1)
    if t <= w:
        return peak if w == 0 else _cos_interp(start, peak, t / w)
    return _cos_interp(peak, final, (t - w) / (sched.total_steps - 1 - w))


# ------------------------------------------------------------------ checkpoints
MAGIC = b"SLOTMIX1"
VERSION = 1


def save_checkpoint(path, state):
    """Write ``{name: ndarray}`` in the flat little-endian checkpoint format.

    Layout: magic, u32 version, u32 record count, then per record
    u32 name length, utf-8 name, u32 rank, u64 dims, raw f64 values.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(state)))
        for name, value in state.items():
            arr = np.array(value, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise DatasetFormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != MAGIC:
        raise DatasetFormatError("bad checkpoint magic", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise DatasetFormatError(f"unsupported checkpoint version {version}", 8)
    state = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4, "name length"))
        name = take(n, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * size, "values"), dtype="<f8").reshape(dims)
        state[name] = arr.astype(np.float64)
    if pos != len(buf):
        raise DatasetFormatError("trailing bytes after last record", pos)
    return state
