"""Private optimisation steps for every clipping implementation.

All DP kinds compute the same quantity, ``G = sum_i C_i g_i`` with ``C_i`` the
clip factor of sample ``i``'s full-model gradient norm; they differ in how many
backward passes they take, whether per-sample gradients are formed, and which
tensors they keep alive.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import GradBook, Graph, backward, forward
from .clipping import (
    ClipFn, ClipPlan, clip_factors, clipped_grad_bk, decide_mode, embedding_gram_pair,
    frobenius_dot, gram_pair, instantiate_embedding_grads, instantiate_per_sample_grads,
    per_sample_sq_norms, weighted_sum,
)
from .errors import ConfigurationError, DimensionError, ParameterError, StateError
from .layers import Site
from .tensor import OpCounters, SeededRng, gaussian


class ImplKind(str, enum.Enum):
    NON_DP = "non_dp"
    NAIVE = "naive"
    OPACUS = "opacus"
    OPACUS_IMPROVED = "opacus_improved"
    FAST_GRAD_CLIP = "fast_grad_clip"
    FAST_GRAD_CLIP_IMPROVED = "fast_grad_clip_improved"
    GHOST_CLIP = "ghost_clip"
    MIX_GHOST_CLIP = "mix_ghost_clip"
    BK = "bk"
    BK_MIX_GHOST_CLIP = "bk_mix_ghost_clip"
    BK_MIX_OPT = "bk_mix_opt"

    @classmethod
    def parse(cls, name: str) -> "ImplKind":
        try:
            return cls(name)
        except ValueError:
            raise ConfigurationError(f"unknown implementation {name!r}; choose from "
                                     + ", ".join(k.value for k in cls)) from None


DP_KINDS = tuple(k for k in ImplKind if k is not ImplKind.NON_DP)
BACKWARD_PASSES = {k: 1 for k in ImplKind} | {
    ImplKind.FAST_GRAD_CLIP: 2, ImplKind.GHOST_CLIP: 2, ImplKind.MIX_GHOST_CLIP: 2}

_GHOST_KINDS = {ImplKind.GHOST_CLIP, ImplKind.BK}
_MIX_KINDS = {ImplKind.MIX_GHOST_CLIP, ImplKind.BK_MIX_GHOST_CLIP, ImplKind.BK_MIX_OPT}


@dataclass(frozen=True)
class PrivacyParams:
    sigma: float = 0.0
    radius: float = 1.0
    microbatches: int = 1

    def __post_init__(self):
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ParameterError(f"noise multiplier must be non-negative, got {self.sigma}")
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ParameterError(f"clip radius must be positive, got {self.radius}")
        if self.microbatches < 1:
            raise ParameterError("need at least one microbatch")


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.kind!r}")

    def apply(self, graph: Graph, grad: dict[str, np.ndarray]) -> None:
        """In-place update from the private gradient only."""
        self.step += 1
        params = graph.parameters()
        for name, g in grad.items():
            w = params[name]
            if self.kind == "sgd":
                w -= self.lr * g
                continue
            m = self.m.setdefault(name, np.zeros_like(w))
            v = self.v.setdefault(name, np.zeros_like(w))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**self.step)
            vhat = v / (1 - self.beta2**self.step)
            w -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        graph.bump()


@dataclass
class StepReport:
    kind: ImplKind
    batch_size: int
    norms: np.ndarray | None
    factors: np.ndarray | None
    clipped_sum: dict[str, np.ndarray]
    private_grad: dict[str, np.ndarray] | None = None
    modes: dict[str, str] = field(default_factory=dict)
    mul_adds: int = 0
    peak_live_bytes: int = 0
    backward_passes: int = 0
    by_layer: dict[str, int] = field(default_factory=dict)
    weight_version: int = 0


# ---------------------------------------------------------------------------
# plan handling


def validate_plan(graph: Graph, plan: ClipPlan) -> None:
    sites = {s.name: s for s in graph.sites()}
    for name, mode in plan.modes.items():
        if name not in sites:
            raise ConfigurationError(f"plan names unknown parameter {name!r}")
        if mode == "ghost" and not sites[name].ghost_capable:
            raise ConfigurationError(f"ghost norm requested for {name}, which is not a generalized linear weight")


def _site_dims(site: Site, book: GradBook) -> tuple[int, int, int]:
    d, p = site.layer.params[site.param].shape
    return book.get(site.a_key).shape[1], p, d


def site_mode(site: Site, kind: ImplKind, plan: ClipPlan, book: GradBook) -> str:
    if not site.ghost_capable:
        return "instantiate"
    if kind in _GHOST_KINDS:
        return "ghost"
    if kind in _MIX_KINDS:
        if site.name in plan.modes:
            return plan.modes[site.name]
        return decide_mode(*_site_dims(site, book))
    return "instantiate"


# ---------------------------------------------------------------------------
# per-site primitives


def _vocab(site: Site) -> int | None:
    return site.layer.vocab if site.embedding else None


def _site_psg(site: Site, book: GradBook, counters: OpCounters) -> tuple[np.ndarray, bool]:
    """Per-sample gradients of one site; second item says whether they were
    freshly allocated (views into the book are not)."""
    ds = book.get(site.ds_key)
    if site.kind == "weight":
        a = book.get(site.a_key)
        if site.embedding:
            return instantiate_embedding_grads(a, ds, site.layer.vocab, counters), True
        return instantiate_per_sample_grads(a, ds, counters), True
    if site.kind == "bias":
        if ds.shape[1] == 1:
            return ds[:, 0, :], False
        counters.add(ds.size)
        return counters.track(ds.sum(axis=1)), True
    xhat = book.get(site.a_key)
    axes = tuple(i for i in site.layer._reduce_axes(ds) if i != 0)
    if site.param == "gamma":
        counters.add(2 * ds.size)
        return counters.track((ds * xhat).sum(axis=axes)), True
    counters.add(ds.size)
    return counters.track(ds.sum(axis=axes)), True


def _ghost_sq(site: Site, book: GradBook, counters: OpCounters, keep: bool) -> np.ndarray:
    a, ds = book.get(site.a_key), book.get(site.ds_key)
    if site.embedding:
        aa, gg = embedding_gram_pair(a, ds, site.layer.vocab, counters)
    else:
        aa, gg = gram_pair(a, ds, counters)
    out = frobenius_dot(aa, gg, counters)
    if keep:
        book.save(site.layer.key(f"{site.param}.gram_a"), aa)
        book.save(site.layer.key(f"{site.param}.gram_ds"), gg)
    else:
        counters.free(aa)
        counters.free(gg)
    return out


def _bk_sum(site: Site, book: GradBook, c: np.ndarray, counters: OpCounters) -> np.ndarray:
    ds = book.get(site.ds_key)
    if site.kind == "weight":
        return clipped_grad_bk(book.get(site.a_key), ds, c, counters, vocab=_vocab(site), inplace=True)
    if site.kind == "bias":
        counters.add(2 * ds.size)
        return np.einsum("btp,b->p", ds, c)
    psg, fresh = _site_psg(site, book, counters)
    out = weighted_sum(psg, c, counters)
    if fresh:
        counters.free(psg)
    return out


class _NormPass:
    """Backward hook that accumulates per-sample squared norms site by site."""

    def __init__(self, graph: Graph, kind: ImplKind, plan: ClipPlan, b: int, counters: OpCounters,
                 *, store_psg, keep_grams: bool, release_layers: bool):
        self.graph, self.kind, self.plan = graph, kind, plan
        self.sq = counters.alloc((b,))
        self.store_psg = store_psg          # callable(site, mode) -> bool
        self.keep_grams = keep_grams
        self.release_layers = release_layers
        self.psg: dict[str, np.ndarray] = {}
        self.modes: dict[str, str] = {}

    def __call__(self, site: Site, book: GradBook, counters: OpCounters) -> None:
        mode = site_mode(site, self.kind, self.plan, book)
        self.modes[site.name] = mode
        if mode == "ghost":
            self.sq += _ghost_sq(site, book, counters, self.keep_grams)
        else:
            psg, fresh = _site_psg(site, book, counters)
            self.sq += per_sample_sq_norms(psg, counters)
            if self.store_psg(site, mode):
                if not fresh:
                    psg = counters.track(psg.copy())
                self.psg[site.name] = psg
            elif fresh:
                counters.free(psg)
        counters.add(self.sq.size)
        if self.release_layers and site is site.layer.sites()[-1]:
            book.release_prefix(site.layer.key(""))


def _release_grams(book: GradBook, site: Site) -> None:
    book.release(site.layer.key(f"{site.param}.gram_a"), site.layer.key(f"{site.param}.gram_ds"))


# ---------------------------------------------------------------------------
# clipped sums


def _check_batch(x: np.ndarray, y: np.ndarray) -> int:
    b = len(x)
    if b < 1:
        raise DimensionError("batch size must be at least 1")
    if len(y) != b:
        raise DimensionError(f"inputs have batch {b} but targets have {len(y)}")
    return b


def naive_oracle_grad(graph: Graph, x: np.ndarray, y: np.ndarray, plan: ClipPlan,
                      counters: OpCounters | None = None):
    """Per-sample norms and ``sum_i C_i g_i`` from ``B`` single-sample passes."""
    counters = counters if counters is not None else OpCounters()
    b = _check_batch(x, y)
    norms = np.zeros(b)
    grads = []
    book = GradBook(counters)
    for i in range(b):
        forward(graph, x[i:i + 1], y[i:i + 1], book, counters)
        g = backward(graph, book, counters, grads="all")
        book.release_all()
        norms[i] = math.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
        counters.add(2 * sum(v.size for v in g.values()))
        grads.append(g)
    c = clip_factors(norms, plan.clip_fn)
    total = {name: sum(c[i] * grads[i][name] for i in range(b)) for name in graph.parameters()}
    counters.add(2 * b * sum(v.size for v in total.values()))
    return norms, total


def clipped_sum(graph: Graph, x: np.ndarray, y: np.ndarray, kind: ImplKind | str,
                plan: ClipPlan, counters: OpCounters | None = None) -> StepReport:
    """Run one implementation and return its (noise-free) clipped gradient sum."""
    kind = ImplKind.parse(kind) if isinstance(kind, str) else kind
    counters = counters if counters is not None else OpCounters()
    b = _check_batch(x, y)
    validate_plan(graph, plan)
    start = counters.mul_adds
    counters.backward_passes = 0
    counters.peak_live_bytes = counters.current_live_bytes
    book = GradBook(counters)
    norms = factors = None
    modes: dict[str, str] = {}

    if kind is ImplKind.NAIVE:
        norms, total = naive_oracle_grad(graph, x, y, plan, counters)
        factors = clip_factors(norms, plan.clip_fn)
    elif kind is ImplKind.NON_DP:
        forward(graph, x, y, book, counters)
        total = backward(graph, book, counters, grads="all")
    else:
        total, norms, factors, modes = _dp_sum(graph, x, y, kind, plan, book, counters, b)
    book.release_all()
    return StepReport(kind, b, norms, factors, total, modes=modes,
                      mul_adds=counters.mul_adds - start, peak_live_bytes=counters.peak_live_bytes,
                      backward_passes=counters.backward_passes, by_layer=dict(counters.by_layer),
                      weight_version=graph.version)


def _dp_sum(graph, x, y, kind, plan, book, counters, b):
    sites = graph.sites()
    two_pass = kind in (ImplKind.FAST_GRAD_CLIP, ImplKind.GHOST_CLIP, ImplKind.MIX_GHOST_CLIP)
    opacus = kind in (ImplKind.OPACUS, ImplKind.OPACUS_IMPROVED)

    if opacus:
        store = lambda site, mode: True
    elif kind is ImplKind.BK_MIX_OPT:
        store = lambda site, mode: site.kind == "weight"
    else:
        store = lambda site, mode: False
    hook = _NormPass(graph, kind, plan, b, counters, store_psg=store,
                     keep_grams=not two_pass, release_layers=opacus)

    forward(graph, x, y, book, counters)
    if kind is ImplKind.FAST_GRAD_CLIP:
        first_grads = "none"
    elif kind in (ImplKind.OPACUS, ImplKind.GHOST_CLIP, ImplKind.MIX_GHOST_CLIP):
        first_grads = "all"
    else:
        first_grads = "origin"
    backward(graph, book, counters, grads=first_grads, hook=hook)

    sq = hook.sq
    norms = np.sqrt(sq)
    counters.add(sq.size)
    c = clip_factors(norms, plan.clip_fn)
    total: dict[str, np.ndarray] = {}

    if two_pass:
        for site in sites:
            book.release(site.ds_key)
        total = backward(graph, book, counters, loss_weights=c, grads="all")
    elif opacus:
        for site in sites:
            with counters.layer(site.layer.name):
                total[site.name] = weighted_sum(hook.psg[site.name], c, counters)
                counters.free(hook.psg.pop(site.name))
    else:
        # book-keeping: reuse the saved a and ds, deleting each layer once summed
        for layer in reversed(graph.layers):
            layer_sites = layer.sites()
            if not layer_sites:
                continue
            with counters.layer(layer.name):
                # weights scale their ds in place, so the sites sharing it go first
                for site in sorted(layer_sites, key=lambda s: s.kind == "weight"):
                    if site.name in hook.psg:
                        total[site.name] = weighted_sum(hook.psg[site.name], c, counters)
                        counters.free(hook.psg.pop(site.name))
                    else:
                        total[site.name] = _bk_sum(site, book, c, counters)
                    _release_grams(book, site)
            book.release_prefix(layer.key(""))
    counters.free(sq)
    total = {s.name: total[s.name] for s in sites}
    return total, norms, c, hook.modes


# ---------------------------------------------------------------------------
# noise, steps, accumulation


def add_noise(grad: dict[str, np.ndarray], sigma: float, radius: float, rng: SeededRng,
              counters: OpCounters | None = None, noise: dict[str, np.ndarray] | None = None):
    """``G + sigma * R * N(0, I)``; ``noise`` injects a fixed standard-normal draw."""
    if sigma < 0 or radius < 0:
        raise ParameterError("sigma and radius must be non-negative")
    out = {}
    for name, g in grad.items():
        if sigma == 0:
            out[name] = g.copy()
            continue
        z = noise[name] * (sigma * radius) if noise is not None else gaussian(g.shape, sigma * radius, rng)
        out[name] = g + z
        if counters is not None:
            counters.add(g.size)
    return out


def _check_radius(plan: ClipPlan, params: PrivacyParams) -> None:
    if plan.clip_fn.name != "automatic" and not math.isclose(plan.clip_fn.radius, params.radius):
        raise ConfigurationError(f"clip radius {plan.clip_fn.radius} differs from noise sensitivity {params.radius}")


def private_step(graph: Graph, x: np.ndarray, y: np.ndarray, kind: ImplKind | str, plan: ClipPlan,
                 params: PrivacyParams, opt: OptimizerState, rng: SeededRng,
                 counters: OpCounters | None = None, noise: dict | None = None) -> StepReport:
    """Clip, add noise once and apply the optimizer; returns the step report."""
    kind = ImplKind.parse(kind) if isinstance(kind, str) else kind
    counters = counters if counters is not None else OpCounters()
    if kind is not ImplKind.NON_DP:
        _check_radius(plan, params)
    report = clipped_sum(graph, x, y, kind, plan, counters)
    if kind is ImplKind.NON_DP:
        report.private_grad = report.clipped_sum
    else:
        report.private_grad = add_noise(report.clipped_sum, params.sigma, params.radius, rng, counters, noise)
    opt.apply(graph, report.private_grad)
    return report


def accumulate(graph: Graph, reports: list[StepReport], params: PrivacyParams, rng: SeededRng,
               counters: OpCounters | None = None, noise: dict | None = None) -> dict[str, np.ndarray]:
    """Sum microbatch clipped sums and add noise once for the logical batch."""
    if not reports:
        raise StateError("no microbatch reports to accumulate")
    versions = {r.weight_version for r in reports}
    if len(versions) > 1 or versions.pop() != graph.version:
        raise StateError("microbatches were computed with different weights")
    total = {k: np.zeros_like(v) for k, v in reports[0].clipped_sum.items()}
    for r in reports:
        for k, v in r.clipped_sum.items():
            total[k] += v
    return add_noise(total, params.sigma, params.radius, rng, counters, noise)


class PrivacyEngine:
    """Owns a graph, its clipping plan, noise parameters and optimizer."""

    def __init__(self, graph: Graph, plan: ClipPlan | None = None, params: PrivacyParams | None = None,
                 optimizer: OptimizerState | None = None, kind: ImplKind | str = ImplKind.BK,
                 seed: int = 0):
        self.graph = graph
        self.params = params or PrivacyParams()
        self.plan = plan or ClipPlan(ClipFn("abadi", self.params.radius))
        self.opt = optimizer or OptimizerState()
        self.kind = ImplKind.parse(kind) if isinstance(kind, str) else kind
        self.seed = seed
        self.counters = OpCounters()
        validate_plan(graph, self.plan)
        if self.kind is not ImplKind.NON_DP:
            _check_radius(self.plan, self.params)

    def _rng(self) -> SeededRng:
        return SeededRng(self.seed).spawn(self.opt.step)

    def step(self, x: np.ndarray, y: np.ndarray) -> StepReport:
        m = self.params.microbatches
        if m == 1:
            return private_step(self.graph, x, y, self.kind, self.plan, self.params, self.opt,
                                self._rng(), self.counters)
        if len(x) < m:
            raise DimensionError(f"batch of {len(x)} cannot be split into {m} microbatches")
        reports = [clipped_sum(self.graph, xs, ys, self.kind, self.plan, self.counters)
                   for xs, ys in zip(np.array_split(x, m), np.array_split(y, m))]
        if self.kind is ImplKind.NON_DP:
            grad = {k: sum(r.clipped_sum[k] for r in reports) for k in reports[0].clipped_sum}
        else:
            grad = accumulate(self.graph, reports, self.params, self._rng(), self.counters)
        self.opt.apply(self.graph, grad)
        report = reports[0]
        report.private_grad = grad
        return report
