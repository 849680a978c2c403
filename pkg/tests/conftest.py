import numpy as np
import pytest

from bkdp.autograd import GradBook, Graph, backward, forward
from bkdp.layers import Activation, Linear
from bkdp.tensor import OpCounters


def make_mlp(widths, bias=True, seed=0, act="relu"):
    rng = np.random.default_rng(seed)
    layers = []
    for i, (d, p) in enumerate(zip(widths[:-1], widths[1:]), 1):
        lin = Linear(d, p, bias=bias, name=f"fc{i}")
        lin.params["weight"][...] = rng.standard_normal((d, p)) / np.sqrt(d)
        if bias:
            lin.params["bias"][...] = 0.1 * rng.standard_normal(p)
        layers.append(lin)
        if i < len(widths) - 1:
            layers.append(Activation(act, name=f"act{i}"))
    return Graph(layers)


def straight_line_loss(graph, x, y):
    """Independent re-evaluation of an MLP built by make_mlp: per-sample squared error."""
    h = x
    for layer in graph.layers:
        if isinstance(layer, Linear):
            h = h @ layer.params["weight"] + layer.params.get("bias", 0.0)
        elif layer.fn == "relu":
            h = np.maximum(h, 0)
        elif layer.fn == "tanh":
            h = np.tanh(h)
    return ((h - y) ** 2).reshape(len(x), -1).sum(axis=1)


def full_grads(graph, x, y, weights=None):
    c = OpCounters()
    book = GradBook(c)
    forward(graph, x, y, book, c)
    return backward(graph, book, c, loss_weights=weights, grads="all")


def numeric_grad(f, w, eps=1e-5):
    g = np.zeros_like(w)
    it = np.nditer(w, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = w[i]
        w[i] = old + eps
        fp = f()
        w[i] = old - eps
        fm = f()
        w[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
