"""Per-sample norms, clip factors and clipped gradient sums."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError
from .layers import embedding_param_grad, param_grad
from .tensor import DTYPE, OpCounters, bmm

CLIP_FNS = ("abadi", "flat", "automatic")
MODES = ("ghost", "instantiate")


@dataclass(frozen=True)
class ClipFn:
    """``C(x)`` with radius ``R``: abadi ``min(R/x, 1)``, flat ``1{x <= R}``,
    automatic ``1/(x + gamma)``."""

    name: str = "abadi"
    radius: float = 1.0
    gamma: float = 0.01

    def __post_init__(self):
        if self.name not in CLIP_FNS:
            raise ParameterError(f"unknown clip function {self.name!r}; choose from {CLIP_FNS}")
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ParameterError(f"clip radius must be positive, got {self.radius}")
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ParameterError(f"stability constant must be non-negative, got {self.gamma}")


@dataclass
class ClipPlan:
    clip_fn: ClipFn = field(default_factory=ClipFn)
    # per-site override of the ghost/instantiate choice; missing sites use decide_mode
    modes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, mode in self.modes.items():
            if mode not in MODES:
                raise ParameterError(f"site {name}: mode must be one of {MODES}, got {mode!r}")


def clip_factors(norms: np.ndarray, fn: ClipFn) -> np.ndarray:
    x = np.asarray(norms, dtype=DTYPE)
    if np.any(~np.isfinite(x)) or np.any(x < 0):
        raise ParameterError("per-sample norms must be finite and non-negative")
    if fn.name == "abadi":
        with np.errstate(divide="ignore"):
            return np.where(x > 0, np.minimum(fn.radius / np.where(x > 0, x, 1.0), 1.0), 1.0)
    if fn.name == "flat":
        return (x <= fn.radius).astype(DTYPE)
    if fn.gamma == 0 and np.any(x == 0):
        raise ParameterError("automatic clipping with gamma=0 is undefined at a zero norm")
    return 1.0 / (x + fn.gamma)


def clip_factor(norm: float, fn: ClipFn) -> float:
    return float(clip_factors(np.array([norm]), fn)[0])


def decide_mode(T: int, p: int, d: int) -> str:
    """Ghost norm iff its ``2T^2`` workspace beats the ``pd`` of a per-sample gradient."""
    if min(T, p, d) < 1:
        raise DimensionError(f"T, p, d must be positive, got {(T, p, d)}")
    return "ghost" if 2 * T * T < p * d else "instantiate"


# ---------------------------------------------------------------------------
# norms


def gram_pair(a: np.ndarray, ds: np.ndarray, counters: OpCounters | None = None):
    """``(a_i a_i^T, ds_i ds_i^T)`` stacked over the batch, each ``B x T x T``."""
    if a.ndim != 3 or ds.ndim != 3 or a.shape[:2] != ds.shape[:2]:
        raise DimensionError(f"ghost norm: activation {a.shape} and output grad {ds.shape} disagree")
    aa = bmm(a, a, counters, trans_b=True)
    gg = bmm(ds, ds, counters, trans_b=True)
    if counters is not None:
        counters.track(aa)
        counters.track(gg)
    return aa, gg


def embedding_gram_pair(ids: np.ndarray, ds: np.ndarray, vocab: int,
                        counters: OpCounters | None = None):
    """Gram of one-hot rows is the token-equality matrix; counted as dense."""
    b, t, p = ds.shape
    if ids.shape != (b, t):
        raise DimensionError(f"embedding ids {ids.shape} vs output grad {ds.shape}")
    aa = (ids[:, :, None] == ids[:, None, :]).astype(DTYPE)
    gg = bmm(ds, ds, counters, trans_b=True)
    if counters is not None:
        counters.add(2 * b * t * t * vocab)
        counters.track(aa)
        counters.track(gg)
    return aa, gg


def frobenius_dot(aa: np.ndarray, gg: np.ndarray, counters: OpCounters | None = None) -> np.ndarray:
    if counters is not None:
        # at T=1 the Grams are scalars and the dot is one multiply per sample
        counters.add(aa.size if aa.shape[1] == 1 else 2 * aa.size)
    return np.einsum("bij,bij->b", aa, gg)


def ghost_norm_sq(a: np.ndarray, ds: np.ndarray, counters: OpCounters | None = None) -> np.ndarray:
    """Squared Frobenius norms of ``a_i^T ds_i`` without forming them."""
    aa, gg = gram_pair(a, ds, counters)
    out = frobenius_dot(aa, gg, counters)
    if counters is not None:
        counters.free(aa)
        counters.free(gg)
    return out


def instantiate_per_sample_grads(a: np.ndarray, ds: np.ndarray,
                                 counters: OpCounters | None = None) -> np.ndarray:
    """``B x d x p`` stack of ``a_i^T ds_i``."""
    if a.ndim != 3 or ds.ndim != 3 or a.shape[:2] != ds.shape[:2]:
        raise DimensionError(f"per-sample grads: activation {a.shape} and output grad {ds.shape} disagree")
    b, _, d = a.shape
    out = counters.alloc((b, d, ds.shape[2]), fill=None) if counters is not None else None
    return bmm(a, ds, counters, trans_a=True, out=out)


def instantiate_embedding_grads(ids: np.ndarray, ds: np.ndarray, vocab: int,
                                counters: OpCounters | None = None) -> np.ndarray:
    b, t, p = ds.shape
    out = counters.alloc((b, vocab, p)) if counters is not None else np.zeros((b, vocab, p))
    rows = np.repeat(np.arange(b), t)
    np.add.at(out, (rows, ids.reshape(-1)), ds.reshape(b * t, p))
    if counters is not None:
        counters.add(2 * b * t * vocab * p)
    return out


def per_sample_sq_norms(psg: np.ndarray, counters: OpCounters | None = None) -> np.ndarray:
    b = psg.shape[0]
    out = np.zeros(b)
    step = max(1, (64 * 1024**2) // max(1, psg[0].nbytes))
    for lo in range(0, b, step):
        blk = np.asarray(psg[lo:lo + step]).reshape(min(step, b - lo), -1)
        out[lo:lo + step] = np.einsum("ij,ij->i", blk, blk)
    if counters is not None:
        counters.add(2 * psg.size)
    return out


# ---------------------------------------------------------------------------
# clipped sums


def _check_factors(c: np.ndarray, b: int) -> np.ndarray:
    c = np.asarray(c, dtype=DTYPE)
    if c.shape != (b,):
        raise DimensionError(f"clip factors {c.shape} do not match batch {b}")
    return c


def clipped_grad_bk(a: np.ndarray, ds: np.ndarray, c: np.ndarray,
                    counters: OpCounters | None = None, *, vocab: int | None = None,
                    inplace: bool = False) -> np.ndarray:
    """``a^T diag(C) ds``: scale output gradients, then one contraction.

    ``inplace`` scales ``ds`` itself, for callers that discard it afterwards.
    """
    c = _check_factors(c, ds.shape[0])
    if inplace:
        ds *= c[:, None, None]
        scaled = ds
    else:
        scaled = ds * c[:, None, None]
        if counters is not None:
            counters.track(scaled)
    if counters is not None:
        counters.add(2 * scaled.size)
    if vocab is not None:
        out = embedding_param_grad(a, scaled, vocab, counters)
    else:
        out = param_grad(a, scaled, counters)
    if counters is not None and not inplace:
        counters.free(scaled)
    return out


def weighted_sum(psg: np.ndarray, c: np.ndarray, counters: OpCounters | None = None) -> np.ndarray:
    """``sum_i C_i g_i`` over a stack of instantiated per-sample gradients."""
    b = psg.shape[0]
    c = _check_factors(c, b)
    out = np.zeros(psg.shape[1:])
    step = max(1, (64 * 1024**2) // max(1, psg[0].nbytes))
    for lo in range(0, b, step):
        out += np.tensordot(c[lo:lo + step], np.asarray(psg[lo:lo + step]), axes=1)
    if counters is not None:
        counters.add(2 * psg.size)
    return out
