"""Trainable building blocks: shared MLPs, Adam, LR schedule, checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad


class Mlp:
    """Shared-weight MLP applied along the last axis of its input.

    widths = (fin, h1, ..., fout). Hidden layers are affine -> optional
    per-set standardization -> relu; the output layer is plain affine.
    Parameters register themselves into `store` under dotted names so the
    whole network is one flat name -> Tensor dict (which is also the
    checkpoint layout).
    """

    def __init__(self, widths, rng: np.random.Generator, store: dict, name: str,
                 normalize: bool = False):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"mlp widths must be >= 1 with >= 2 entries, got {widths}")
        self.widths = widths
        self.name = name
        self.normalize = normalize
        self.layers = []
        n_layers = len(widths) - 1
        for li, (fin, fout) in enumerate(zip(widths[:-1], widths[1:])):
            last = li == n_layers - 1
            # He for relu layers, smaller for the linear output.
            std = np.sqrt(2.0 / fin) if not last else np.sqrt(1.0 / fin)
            w = ad.parameter(rng.normal(0.0, std, size=(fin, fout)),
                             name=f"{name}.w{li}")
            b = ad.parameter(np.zeros(fout), name=f"{name}.b{li}")
            store[w.name] = w
            store[b.name] = b
            gamma = beta = None
            if normalize and not last:
                gamma = ad.parameter(np.ones(fout), name=f"{name}.gamma{li}")
                beta = ad.parameter(np.zeros(fout), name=f"{name}.beta{li}")
                store[gamma.name] = gamma
                store[beta.name] = beta
            self.layers.append((w, b, gamma, beta, last))

    def __call__(self, x, set_axes: Optional[tuple] = None):
        for w, b, gamma, beta, last in self.layers:
            x = ad.linear(x, w, b)
            if not last:
                if gamma is not None and set_axes:
                    x = ad.standardize(x, gamma, beta, set_axes)
                x = ad.relu(x)
        return x

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_init(params: dict) -> AdamState:
    state = AdamState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.values)
        state.v[name] = np.zeros_like(p.values)
    return state


def adam_step(params: dict, state: AdamState, lr: float):
    """One Adam update with bias correction; missing grads count as zero."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def lr_schedule(epoch: int, base_lr: float = 1e-3, decay: float = 0.2,
                boundaries: tuple = (100, 200)) -> float:
    """Step schedule: multiply by `decay` at each boundary epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    drops = sum(1 for b in boundaries if epoch >= b)
    return base_lr * decay ** drops


def zero_grads(params: dict):
    for p in params.values():
        p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"AECNN1"


class CheckpointError(ValueError):
    """Raised on malformed or truncated checkpoint files."""


def save_checkpoint(path, arrays: dict):
    """Write named float64 arrays; insertion order is preserved on disk.

    Layout: magic, then per array a uint32 name length, the utf-8 name, a
    uint32 rank, that many uint32 dims, and the little-endian float64 values.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in arrays.items():
            # ascontiguousarray would promote 0-d arrays to 1-d; keep rank.
            a = np.asarray(arr, dtype="<f8")
            if not a.flags.c_contiguous:
                a = np.ascontiguousarray(a)
            nb = str(name).encode("utf-8")
            if not nb:
                raise CheckpointError("array names must be non-empty")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            if a.ndim:
                f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back into {name: float64 array}, original order."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"bad magic {blob[:len(CHECKPOINT_MAGIC)]!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    off = len(CHECKPOINT_MAGIC)
    out: dict = {}

    def take(n: int, why: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint at byte {off}: {why}")
        piece = blob[off: off + n]
        off += n
        return piece

    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        if name_len == 0 or name_len > 4096:
            raise CheckpointError(f"implausible name length {name_len} at byte {off}")
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} at byte {off}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        count = 1
        for s in shape:
            count *= s
        data = take(8 * count, f"values of {name!r}")
        out[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    return out
