"""Counted dense arithmetic on float64 numpy arrays.

Every numeric carrier in the package is a C-contiguous ``np.ndarray`` of
dtype float64. ``OpCounters`` records multiply-adds (one multiply plus one add
counts as 2, so a forward ``s = aW`` costs ``2*B*T*p*d``) and the payload bytes
of tensors registered with it.
"""

from __future__ import annotations

import math
import os
import tempfile
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, ParameterError

DTYPE = np.float64
ITEMSIZE = 8

# Tracked allocations above this size go to an unlinked memory-mapped file.
DEFAULT_SPILL_BYTES = 512 * 1024**2


@dataclass
class OpCounters:
    """Multiply-add and live-memory accounting for one measurement context.

    Only tensors passed through :meth:`alloc` / :meth:`track` count towards
    ``current_live_bytes``; they stay referenced here until :meth:`free`.
    ``backward_passes`` counts reverse traversals of a graph.
    """

    mul_adds: int = 0
    current_live_bytes: int = 0
    peak_live_bytes: int = 0
    backward_passes: int = 0
    by_layer: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    spill_bytes: int = DEFAULT_SPILL_BYTES
    spill_dir: str | None = None
    _live: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _scope: list[str] = field(default_factory=list, repr=False)

    def add(self, n: int) -> None:
        if n < 0:
            raise ValueError("negative operation count")
        n = int(n)
        self.mul_adds += n
        if self._scope:
            self.by_layer[self._scope[-1]] += n

    @contextmanager
    def layer(self, name: str) -> Iterator[None]:
        """Attribute counts made inside the block to ``name``."""
        self._scope.append(name)
        try:
            yield
        finally:
            self._scope.pop()

    # memory -------------------------------------------------------------

    def alloc(self, shape: Sequence[int] | int, fill: float | None = 0.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(int(s) for s in shape)
        nbytes = math.prod(shape) * ITEMSIZE
        if nbytes > self.spill_bytes:
            arr = _spilled(shape, self.spill_dir)
            if fill:
                arr[...] = fill
        elif fill is None:
            arr = np.empty(shape, dtype=DTYPE)
        else:
            arr = np.full(shape, fill, dtype=DTYPE)
        return self.track(arr)

    def track(self, arr: np.ndarray) -> np.ndarray:
        key = id(arr)
        if key in self._live:
            return arr
        self._live[key] = arr
        self.current_live_bytes += arr.nbytes
        self.peak_live_bytes = max(self.peak_live_bytes, self.current_live_bytes)
        return arr

    def free(self, arr: np.ndarray | None) -> None:
        if arr is None:
            return
        held = self._live.pop(id(arr), None)
        if held is not None:
            self.current_live_bytes -= held.nbytes

    def is_tracked(self, arr: np.ndarray) -> bool:
        return id(arr) in self._live

    def free_all(self) -> None:
        self._live.clear()
        self.current_live_bytes = 0

    def reset(self) -> None:
        """Start a fresh measurement window; live tensors stay registered."""
        self.mul_adds = 0
        self.backward_passes = 0
        self.by_layer = defaultdict(int)
        self.peak_live_bytes = self.current_live_bytes

    def snapshot(self) -> dict:
        return {
            "mul_adds": self.mul_adds,
            "peak_live_bytes": self.peak_live_bytes,
            "current_live_bytes": self.current_live_bytes,
            "backward_passes": self.backward_passes,
            "by_layer": dict(self.by_layer),
        }


def _spilled(shape: tuple[int, ...], directory: str | None) -> np.ndarray:
    fd, path = tempfile.mkstemp(prefix="bkdp-", suffix=".bin", dir=directory)
    try:
        os.ftruncate(fd, max(1, math.prod(shape)) * ITEMSIZE)
        arr = np.memmap(path, dtype=DTYPE, mode="r+", shape=shape)
    finally:
        os.close(fd)
        os.unlink(path)
    return arr


class SeededRng:
    """Deterministic Gaussian source; same seed, same stream."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape: Sequence[int] | int) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=DTYPE)

    def integers(self, low: int, high: int, shape: Sequence[int] | int) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def spawn(self, offset: int) -> "SeededRng":
        return SeededRng((self.seed * 1_000_003 + offset) % 2**63)


def gaussian(shape: Sequence[int] | int, std: float, rng: SeededRng) -> np.ndarray:
    if std < 0 or not math.isfinite(std):
        raise ParameterError(f"std must be finite and non-negative, got {std}")
    if std == 0:
        return np.zeros(shape, dtype=DTYPE)
    return rng.normal(shape) * std


# ---------------------------------------------------------------------------
# contractions


def matmul(
    a: np.ndarray,
    b: np.ndarray,
    counters: OpCounters | None = None,
    *,
    trans_a: bool = False,
    trans_b: bool = False,
    track: bool = False,
) -> np.ndarray:
    """Dense 2-D product ``op(a) @ op(b)``; adds exactly ``2*m*k*n``.

    Transposes are expressed through the flags instead of materialised copies.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    m, k = (a.shape[1], a.shape[0]) if trans_a else a.shape
    k2, n = (b.shape[1], b.shape[0]) if trans_b else b.shape
    if k != k2:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} and {b.shape}"
                             f" (trans_a={trans_a}, trans_b={trans_b})")
    lhs = a.T if trans_a else a
    rhs = b.T if trans_b else b
    if counters is not None:
        counters.add(2 * m * k * n)
        if track:
            out = counters.alloc((m, n), fill=None)
            np.matmul(lhs, rhs, out=out)
            return out
    return np.ascontiguousarray(lhs @ rhs)


def bmm(
    a: np.ndarray,
    b: np.ndarray,
    counters: OpCounters | None = None,
    *,
    trans_a: bool = False,
    trans_b: bool = False,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Batched product over the leading axis; adds ``2*batch*m*k*n``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"bmm expects matching 3-D operands, got {a.shape} and {b.shape}")
    lhs = a.transpose(0, 2, 1) if trans_a else a
    rhs = b.transpose(0, 2, 1) if trans_b else b
    if lhs.shape[2] != rhs.shape[1]:
        raise DimensionError(f"bmm inner dimensions disagree: {a.shape} and {b.shape}")
    nb, m, k = lhs.shape
    n = rhs.shape[2]
    if counters is not None:
        counters.add(2 * nb * m * k * n)
    if out is None:
        return np.matmul(lhs, rhs)
    if out.shape != (nb, m, n):
        raise DimensionError(f"bmm output buffer {out.shape} != {(nb, m, n)}")
    # chunked so large (possibly disk-backed) outputs are written in pieces
    step = max(1, (64 * 1024**2) // max(1, m * n * ITEMSIZE))
    for lo in range(0, nb, step):
        np.matmul(lhs[lo:lo + step], rhs[lo:lo + step], out=out[lo:lo + step])
    return out


def transpose(x: np.ndarray, counters: OpCounters | None = None) -> np.ndarray:
    """Materialised 2-D transpose (tracked when a context is given)."""
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {x.shape}")
    if counters is None:
        return np.ascontiguousarray(x.T)
    out = counters.alloc((x.shape[1], x.shape[0]), fill=None)
    out[...] = x.T
    return out


# ---------------------------------------------------------------------------
# convolution lowering


def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    eff = dilation * (k - 1) + 1
    if eff > size + 2 * pad:
        raise DimensionError(
            f"kernel extent {eff} exceeds padded input {size + 2 * pad}")
    return (size + 2 * pad - eff) // stride + 1


def _im2col_index(c: int, h: int, w: int, kh: int, kw: int,
                  stride: int, pad: int, dilation: int):
    ho = conv_output_size(h, kh, stride, pad, dilation)
    wo = conv_output_size(w, kw, stride, pad, dilation)
    # column order: channel-major, then kernel row, then kernel column
    ci = np.repeat(np.arange(c), kh * kw)
    ki = np.tile(np.repeat(np.arange(kh), kw), c) * dilation
    kj = np.tile(np.arange(kw), c * kh) * dilation
    oi = np.repeat(np.arange(ho), wo) * stride
    oj = np.tile(np.arange(wo), ho) * stride
    rows = oi[:, None] + ki[None, :]
    cols = oj[:, None] + kj[None, :]
    return ho, wo, ci, rows, cols


def im2col(
    x: np.ndarray,
    kernel: tuple[int, int],
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> np.ndarray:
    """Lower ``B x C x H x W`` to ``B x (H_out*W_out) x (C*kh*kw)``.

    Multiplying the result by a ``(C*kh*kw) x p`` matrix whose rows follow
    ``weight.reshape(p, -1).T`` reproduces the cross-correlation.
    """
    if x.ndim != 4:
        raise DimensionError(f"im2col expects B x C x H x W, got {x.shape}")
    b, c, h, w = x.shape
    kh, kw = kernel
    _, _, ci, rows, cols = _im2col_index(c, h, w, kh, kw, stride, padding, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    return np.ascontiguousarray(xp[:, ci[None, :], rows, cols])


def col2im(
    cols: np.ndarray,
    input_shape: tuple[int, int, int, int],
    kernel: tuple[int, int],
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    counters: OpCounters | None = None,
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to image layout."""
    b, c, h, w = input_shape
    kh, kw = kernel
    _, _, ci, rows, cols_idx = _im2col_index(c, h, w, kh, kw, stride, padding, dilation)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    t, d = rows.shape
    bi = np.broadcast_to(np.arange(b)[:, None, None], (b, t, d))
    np.add.at(out, (bi, np.broadcast_to(ci[None, None, :], (b, t, d)),
                    np.broadcast_to(rows, (b, t, d)), np.broadcast_to(cols_idx, (b, t, d))),
              cols)
    if counters is not None:
        counters.add(cols.size)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)
