"""Chain-structured reverse-mode engine with a book of saved tensors.

The book keeps the forward activations ``a``, the output gradients ``ds`` and
any per-layer caches (activation derivatives, Gram matrices, ...) under string
keys, so clipping code can reuse them instead of recomputing.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigurationError, DimensionError, StateError
from .layers import Layer, Site
from .tensor import OpCounters

LOSSES = ("mse", "cross_entropy")

Hook = Callable[[Site, "GradBook", OpCounters], None]


class GradBook:
    def __init__(self, counters: OpCounters):
        self.counters = counters
        self.meta: dict = {}
        self.forward_done = False
        self._store: dict[str, np.ndarray] = {}

    def save(self, key: str, arr: np.ndarray) -> np.ndarray:
        old = self._store.get(key)
        if old is not None and old is not arr:
            self.release(key)
        self._store[key] = self.counters.track(arr)
        return arr

    def get(self, key: str) -> np.ndarray:
        try:
            return self._store[key]
        except KeyError:
            raise StateError(f"nothing saved under {key!r}; run the forward pass first") from None

    def has(self, key: str) -> bool:
        return key in self._store

    def holds(self, arr: np.ndarray) -> bool:
        return any(v is arr for v in self._store.values())

    def release(self, *keys: str) -> None:
        for key in keys:
            arr = self._store.pop(key, None)
            if arr is not None and not self.holds(arr):
                self.counters.free(arr)

    def release_prefix(self, prefix: str) -> None:
        self.release(*[k for k in self._store if k.startswith(prefix)])

    def release_all(self) -> None:
        self.release(*list(self._store))
        self.meta.clear()
        self.forward_done = False

    def keys(self) -> list[str]:
        return list(self._store)


class Graph:
    """A chain of layers followed by a per-sample loss."""

    def __init__(self, layers: Iterable[Layer], loss: str = "mse"):
        self.layers = list(layers)
        if not self.layers:
            raise ConfigurationError("a graph needs at least one layer")
        if loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {loss!r}; choose from {LOSSES}")
        self.loss = loss
        self.version = 0
        seen = set()
        for i, layer in enumerate(self.layers):
            if layer.name in seen:
                layer.name = f"{layer.name}{i}"
            seen.add(layer.name)

    @property
    def first_trainable(self) -> int:
        for i, layer in enumerate(self.layers):
            if layer.has_trainable:
                return i
        raise ConfigurationError("graph has no trainable parameters")

    def parameters(self, trainable_only: bool = True) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for key, val in layer.params.items():
                if layer.trainable.get(key) or not trainable_only:
                    out[f"{layer.name}.{key}"] = val
        return out

    def sites(self) -> list[Site]:
        return [s for layer in self.layers for s in layer.sites()]

    def layer_of(self, param_name: str) -> Layer:
        name = param_name.rsplit(".", 1)[0]
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(param_name)

    def bump(self) -> None:
        self.version += 1


def fingerprint(graph: Graph) -> str:
    h = hashlib.sha256()
    for name, val in sorted(graph.parameters(trainable_only=False).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(val).tobytes())
    return h.hexdigest()[:16]


# origin preference per layer kind: cheapest parameter whose gradient flow
# reaches every output of the layer
_ORIGIN_ORDER = {
    "linear": ("bias", "weight"),
    "conv2d": ("bias", "weight"),
    "embedding": ("weight",),
    "lora-linear": ("lora_L",),
    "adapter": ("adapter_D",),
    "layernorm": ("beta", "gamma"),
    "groupnorm": ("beta", "gamma"),
}


def select_origin_params(graph: Graph) -> set[str]:
    """Parameters whose gradient request forces output gradients for every site.

    Only the earliest trainable layer matters: everything after it lies on the
    path between that layer and the loss. Within the layer we pick a parameter
    upstream of all the layer's internal outputs (for LoRA that is ``L``, whose
    descendants include both ``u`` and ``s``).
    """
    layer = graph.layers[graph.first_trainable]
    for key in _ORIGIN_ORDER.get(layer.kind, ()):
        if layer.trainable.get(key):
            return {f"{layer.name}.{key}"}
    return {f"{layer.name}.{k}" for k, v in layer.trainable.items() if v}


# ---------------------------------------------------------------------------
# loss


def _loss_forward(graph: Graph, out: np.ndarray, y: np.ndarray, book: GradBook,
                  counters: OpCounters) -> np.ndarray:
    b = out.shape[0]
    if graph.loss == "mse":
        y = np.asarray(y, dtype=float)
        if y.shape != out.shape:
            raise DimensionError(f"target shape {y.shape} != output shape {out.shape}")
        diff = out - y
        book.save("loss:diff", diff)
        counters.add(3 * out.size)
        return (diff * diff).reshape(b, -1).sum(axis=1)
    y = np.asarray(y)
    if y.shape != out.shape[:-1]:
        raise DimensionError(f"class targets {y.shape} do not match logits {out.shape}")
    z = out - out.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    book.save("loss:probs", np.exp(logp))
    book.meta["loss:targets"] = y
    counters.add(4 * out.size)
    nll = -np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
    return nll.reshape(b, -1).sum(axis=1)


def _loss_backward(graph: Graph, book: GradBook, weights: np.ndarray | None,
                   counters: OpCounters) -> np.ndarray:
    if graph.loss == "mse":
        diff = book.get("loss:diff")
        g = 2.0 * diff
    else:
        g = book.get("loss:probs").copy()
        y = book.meta["loss:targets"]
        np.put_along_axis(g, y[..., None], np.take_along_axis(g, y[..., None], axis=-1) - 1.0, axis=-1)
    counters.add(g.size)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.shape != (g.shape[0],):
            raise DimensionError(f"loss weights {w.shape} do not match batch {g.shape[0]}")
        g *= w.reshape((-1,) + (1,) * (g.ndim - 1))
        counters.add(g.size)
    return counters.track(g)


# ---------------------------------------------------------------------------
# passes


def forward(graph: Graph, x: np.ndarray, y: np.ndarray, book: GradBook,
            counters: OpCounters) -> np.ndarray:
    """Run the chain, filling the book; returns per-sample losses ``L_i``."""
    if book.forward_done:
        book.release_all()
    h = counters.track(x)
    for layer in graph.layers:
        with counters.layer(layer.name):
            out = layer.forward(h, book, counters)
        if out is not h and not book.holds(h):
            counters.free(h)
        h = out
    with counters.layer("loss"):
        losses = _loss_forward(graph, h, y, book, counters)
    if not book.holds(h):
        counters.free(h)
    book.forward_done = True
    return losses


def _requested(layer: Layer, grads, origin: set[str]) -> set[str]:
    if grads == "all":
        return {k for k, v in layer.trainable.items() if v}
    if grads == "none":
        return set()
    if grads == "origin":
        return {k for k in layer.trainable if f"{layer.name}.{k}" in origin}
    return {k for k in layer.trainable if f"{layer.name}.{k}" in grads}


def backward(graph: Graph, book: GradBook, counters: OpCounters, *,
             loss_weights: np.ndarray | None = None, grads="all",
             hook: Hook | None = None) -> dict[str, np.ndarray]:
    """Reverse pass down to the earliest trainable layer.

    ``grads`` is ``"all"``, ``"origin"``, ``"none"`` or a set of parameter
    names; only those parameter gradients are formed. Output gradients of every
    site are saved in the book either way, and ``hook`` is called per site as
    soon as its layer is done.
    """
    if not book.forward_done:
        raise StateError("backward called before forward")
    counters.backward_passes += 1
    origin = select_origin_params(graph) if grads == "origin" else set()
    stop = graph.first_trainable
    with counters.layer("loss"):
        dy = _loss_backward(graph, book, loss_weights, counters)
    result: dict[str, np.ndarray] = {}
    for i in range(len(graph.layers) - 1, stop - 1, -1):
        layer = graph.layers[i]
        with counters.layer(layer.name):
            dx, g = layer.backward(dy, book, counters, need_input_grad=i > stop,
                                   grads=_requested(layer, grads, origin))
            if hook is not None:
                for site in layer.sites():
                    hook(site, book, counters)
        if dx is not dy and not book.holds(dy):
            counters.free(dy)
        for key, val in g.items():
            result[f"{layer.name}.{key}"] = val
        dy = dx
    return result


def backward_output_grads(graph: Graph, book: GradBook, counters: OpCounters, *,
                          loss_weights: np.ndarray | None = None, hook: Hook | None = None) -> None:
    """Populate every site's ``ds`` while forming only the origin gradient."""
    backward(graph, book, counters, loss_weights=loss_weights, grads="origin", hook=hook)
