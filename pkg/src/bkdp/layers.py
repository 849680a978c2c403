"""Layer zoo for the chain engine.

Generalized linear layers keep their weight as a ``d x p`` matrix so that the
layer output is ``s = a @ W`` once the input is lowered to ``a`` of shape
``B x T x d``. Each trainable parameter is exposed as a :class:`Site`, the unit
at which per-sample gradient norms are computed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import CapabilityError, DimensionError
from .tensor import DTYPE, OpCounters, col2im, conv_output_size, im2col, matmul

if TYPE_CHECKING:
    from .autograd import GradBook

GL_KINDS = ("linear", "conv2d", "embedding", "lora-linear", "adapter")
NORM_KINDS = ("layernorm", "groupnorm")


@dataclass(frozen=True)
class LayerShape:
    """Shape of one layer as seen by the cost model: ``s = a W`` with
    ``a: B x T x d`` and ``W: d x p``. ``r`` is the rank of composite layers."""

    kind: str
    T: int
    d: int
    p: int
    r: int | None = None
    name: str = ""
    trainable: tuple[str, ...] = ("weight",)

    def __post_init__(self):
        if min(self.T, self.d, self.p) < 1:
            raise DimensionError(f"layer {self.name or self.kind}: T, d, p must be positive")


@dataclass
class Site:
    """One trainable parameter whose per-sample gradient must be clipped.

    ``kind`` is ``"weight"`` for generalized linear weights (ghost norm
    capable), ``"bias"`` or ``"norm"`` otherwise.
    """

    layer: "Layer"
    param: str
    kind: str
    a_key: str = ""
    ds_key: str = ""
    embedding: bool = False

    @property
    def name(self) -> str:
        return f"{self.layer.name}.{self.param}"

    @property
    def ghost_capable(self) -> bool:
        return self.kind == "weight"


def _as3(x: np.ndarray) -> np.ndarray:
    """View ``B x d`` as ``B x 1 x d``; leave ``B x T x d`` alone."""
    if x.ndim == 2:
        return x.reshape(x.shape[0], 1, x.shape[1])
    if x.ndim == 3:
        return x
    raise DimensionError(f"expected B x d or B x T x d, got {x.shape}")


def param_grad(a: np.ndarray, ds: np.ndarray, counters: OpCounters | None = None) -> np.ndarray:
    """Summed weight gradient ``a^T ds`` as one contraction over batch and T."""
    if a.ndim != 3 or ds.ndim != 3 or a.shape[:2] != ds.shape[:2]:
        raise DimensionError(f"param_grad: activation {a.shape} and output grad {ds.shape} disagree")
    b, t, d = a.shape
    return matmul(a.reshape(b * t, d), ds.reshape(b * t, ds.shape[2]), counters, trans_a=True)


def embedding_param_grad(ids: np.ndarray, ds: np.ndarray, vocab: int,
                         counters: OpCounters | None = None) -> np.ndarray:
    b, t, p = ds.shape
    if ids.shape != (b, t):
        raise DimensionError(f"embedding ids {ids.shape} vs output grad {ds.shape}")
    out = np.zeros((vocab, p), dtype=DTYPE)
    np.add.at(out, ids.reshape(-1), ds.reshape(b * t, p))
    if counters is not None:
        counters.add(2 * b * t * vocab * p)
    return out


class Layer:
    kind = "layer"

    def __init__(self, name: str = ""):
        self.name = name or self.kind
        self.params: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}

    def forward(self, x: np.ndarray, book: "GradBook", counters: OpCounters) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, book: "GradBook", counters: OpCounters, *,
                 need_input_grad: bool, grads: set[str]) -> tuple[np.ndarray | None, dict]:
        raise NotImplementedError

    def sites(self) -> list[Site]:
        return []

    def shapes(self, book: "GradBook") -> list[LayerShape]:
        return []

    def key(self, what: str) -> str:
        return f"{self.name}:{what}"

    @property
    def has_trainable(self) -> bool:
        return any(self.trainable.values())

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


# ---------------------------------------------------------------------------
# generalized linear layers


class Linear(Layer):
    kind = "linear"

    def __init__(self, d: int, p: int, bias: bool = True, frozen: bool = False, name: str = ""):
        super().__init__(name)
        self.d, self.p = d, p
        self.params["weight"] = np.zeros((d, p))
        self.trainable["weight"] = not frozen
        if bias:
            self.params["bias"] = np.zeros(p)
            self.trainable["bias"] = not frozen

    def sites(self):
        out = []
        if self.trainable["weight"]:
            out.append(Site(self, "weight", "weight", self.key("a"), self.key("ds")))
        if self.trainable.get("bias"):
            out.append(Site(self, "bias", "bias", "", self.key("ds")))
        return out

    def forward(self, x, book, counters):
        a = _as3(x)
        if a.shape[2] != self.d:
            raise DimensionError(f"layer {self.name}: expected input width {self.d}, got {x.shape}")
        b, t, _ = a.shape
        book.meta[self.key("in_shape")] = x.shape
        if self.has_trainable:
            book.save(self.key("a"), a)
        s = matmul(a.reshape(b * t, self.d), self.params["weight"], counters)
        if "bias" in self.params:
            s += self.params["bias"]
            counters.add(s.size)
        s = s.reshape(x.shape[:-1] + (self.p,))
        return counters.track(s)

    def backward(self, dy, book, counters, *, need_input_grad, grads):
        ds = _as3(dy)
        if self.has_trainable:
            book.save(self.key("ds"), ds)
        b, t, _ = ds.shape
        out = {}
        if "weight" in grads:
            out["weight"] = param_grad(book.get(self.key("a")), ds, counters)
        if "bias" in grads:
            out["bias"] = ds.sum(axis=(0, 1))
            counters.add(ds.size)
        dx = None
        if need_input_grad:
            dx = matmul(ds.reshape(b * t, self.p), self.params["weight"], counters, trans_b=True)
            dx = counters.track(dx.reshape(book.meta[self.key("in_shape")]))
        return dx, out

    def shapes(self, book):
        b, t, _ = book.get(self.key("a")).shape if book.has(self.key("a")) else (0, 1, 0)
        return [LayerShape("linear", t, self.d, self.p, name=self.name)]


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0,
                 dilation: int = 1, bias: bool = True, frozen: bool = False, name: str = ""):
        super().__init__(name)
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.pad, self.dilation = stride, pad, dilation
        self.d, self.p = cin * k * k, cout
        self.params["weight"] = np.zeros((self.d, cout))
        self.trainable["weight"] = not frozen
        if bias:
            self.params["bias"] = np.zeros(cout)
            self.trainable["bias"] = not frozen

    sites = Linear.sites

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (conv_output_size(h, self.k, self.stride, self.pad, self.dilation),
                conv_output_size(w, self.k, self.stride, self.pad, self.dilation))

    def forward(self, x, book, counters):
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise DimensionError(f"layer {self.name}: expected B x {self.cin} x H x W, got {x.shape}")
        b, _, h, w = x.shape
        ho, wo = self.out_hw(h, w)
        book.meta[self.key("in_shape")] = x.shape
        book.meta[self.key("out_hw")] = (ho, wo)
        a = counters.track(im2col(x, (self.k, self.k), self.stride, self.pad, self.dilation))
        t = ho * wo
        s = matmul(a.reshape(b * t, self.d), self.params["weight"], counters)
        if "bias" in self.params:
            s += self.params["bias"]
            counters.add(s.size)
        if self.has_trainable:
            book.save(self.key("a"), a)
        else:
            counters.free(a)
        y = np.ascontiguousarray(s.reshape(b, t, self.p).transpose(0, 2, 1)).reshape(b, self.p, ho, wo)
        return counters.track(y)

    def backward(self, dy, book, counters, *, need_input_grad, grads):
        b = dy.shape[0]
        t = dy.shape[2] * dy.shape[3]
        ds = counters.track(np.ascontiguousarray(dy.reshape(b, self.p, t).transpose(0, 2, 1)))
        out = {}
        if self.has_trainable:
            book.save(self.key("ds"), ds)
        if "weight" in grads:
            out["weight"] = param_grad(book.get(self.key("a")), ds, counters)
        if "bias" in grads:
            out["bias"] = ds.sum(axis=(0, 1))
            counters.add(ds.size)
        dx = None
        if need_input_grad:
            da = matmul(ds.reshape(b * t, self.p), self.params["weight"], counters, trans_b=True)
            counters.track(da)
            dx = col2im(da.reshape(b, t, self.d), book.meta[self.key("in_shape")], (self.k, self.k),
                        self.stride, self.pad, self.dilation, counters)
            counters.free(da)
            dx = counters.track(dx)
        if not self.has_trainable:
            counters.free(ds)
        return dx, out

    def shapes(self, book):
        ho, wo = book.meta[self.key("out_hw")]
        return [LayerShape("conv2d", ho * wo, self.d, self.p, name=self.name)]

    def weight_as_filters(self) -> np.ndarray:
        """``cout x cin x k x k`` view of the weight."""
        return self.params["weight"].T.reshape(self.cout, self.cin, self.k, self.k)


class Embedding(Layer):
    """Token lookup ``s = onehot(ids) W``; the one-hot is kept as the id array."""

    kind = "embedding"

    def __init__(self, vocab: int, p: int, frozen: bool = False, name: str = ""):
        super().__init__(name)
        self.vocab, self.p = vocab, p
        self.d = vocab
        self.params["weight"] = np.zeros((vocab, p))
        self.trainable["weight"] = not frozen

    def sites(self):
        if not self.trainable["weight"]:
            return []
        return [Site(self, "weight", "weight", self.key("a"), self.key("ds"), embedding=True)]

    def forward(self, x, book, counters):
        if x.ndim != 2 or not np.issubdtype(x.dtype, np.integer):
            raise DimensionError(f"layer {self.name}: expected integer ids B x T, got {x.shape} {x.dtype}")
        if x.size and (x.min() < 0 or x.max() >= self.vocab):
            raise DimensionError(f"layer {self.name}: token id outside [0, {self.vocab})")
        b, t = x.shape
        if self.has_trainable:
            book.save(self.key("a"), x)
        counters.add(2 * b * t * self.vocab * self.p)
        return counters.track(self.params["weight"][x])

    def backward(self, dy, book, counters, *, need_input_grad, grads):
        if self.has_trainable:
            book.save(self.key("ds"), dy)
        out = {}
        if "weight" in grads:
            out["weight"] = embedding_param_grad(book.get(self.key("a")), dy, self.vocab, counters)
        return None, out

    def shapes(self, book):
        t = book.get(self.key("a")).shape[1]
        return [LayerShape("embedding", t, self.vocab, self.p, name=self.name)]


class LoRALinear(Layer):
    """``x W + (x L) R`` with a frozen base ``W`` and trainable ``L: d x r``, ``R: r x p``."""

    kind = "lora-linear"

    def __init__(self, d: int, p: int, r: int, name: str = ""):
        super().__init__(name)
        self.d, self.p, self.r = d, p, r
        self.params["weight"] = np.zeros((d, p))
        self.params["lora_L"] = np.zeros((d, r))
        self.params["lora_R"] = np.zeros((r, p))
        self.trainable.update(weight=False, lora_L=True, lora_R=True)

    def sites(self):
        return [Site(self, "lora_L", "weight", self.key("x"), self.key("du")),
                Site(self, "lora_R", "weight", self.key("u"), self.key("ds"))]

    def forward(self, x, book, counters):
        a = _as3(x)
        if a.shape[2] != self.d:
            raise DimensionError(f"layer {self.name}: expected input width {self.d}, got {x.shape}")
        b, t, _ = a.shape
        book.meta[self.key("in_shape")] = x.shape
        book.save(self.key("x"), a)
        flat = a.reshape(b * t, self.d)
        s = matmul(flat, self.params["weight"], counters)
        u = matmul(flat, self.params["lora_L"], counters)
        book.save(self.key("u"), u.reshape(b, t, self.r))
        s += matmul(u, self.params["lora_R"], counters)
        counters.add(s.size)
        return counters.track(s.reshape(x.shape[:-1] + (self.p,)))

    def backward(self, dy, book, counters, *, need_input_grad, grads):
        ds = _as3(dy)
        b, t, _ = ds.shape
        book.save(self.key("ds"), ds)
        du = matmul(ds.reshape(b * t, self.p), self.params["lora_R"], counters, trans_b=True)
        du = book.save(self.key("du"), du.reshape(b, t, self.r))
        out = {}
        if "lora_R" in grads:
            out["lora_R"] = param_grad(book.get(self.key("u")), ds, counters)
        if "lora_L" in grads:
            out["lora_L"] = param_grad(book.get(self.key("x")), du, counters)
        dx = None
        if need_input_grad:
            dx = matmul(ds.reshape(b * t, self.p), self.params["weight"], counters, trans_b=True)
            dx += matmul(du.reshape(b * t, self.r), self.params["lora_L"], counters, trans_b=True)
            counters.add(dx.size)
            dx = counters.track(dx.reshape(book.meta[self.key("in_shape")]))
        return dx, out

    def shapes(self, book):
        t = book.get(self.key("x")).shape[1]
        return decompose_composite(LayerShape("lora-linear", t, self.d, self.p, self.r, name=self.name))


class Adapter(Layer):
    """Residual bottleneck ``tau(x D) U + x`` with ``D: p x r`` and ``U: r x p``."""

    kind = "adapter"

    def __init__(self, p: int, r: int, activation: str = "relu", name: str = ""):
        super().__init__(name)
        self.p, self.r = p, r
        self.act = activation
        self.params["adapter_D"] = np.zeros((p, r))
        self.params["adapter_U"] = np.zeros((r, p))
        self.trainable.update(adapter_D=True, adapter_U=True)

    def sites(self):
        return [Site(self, "adapter_D", "weight", self.key("x"), self.key("du")),
                Site(self, "adapter_U", "weight", self.key("h"), self.key("dv"))]

    def forward(self, x, book, counters):
        a = _as3(x)
        if a.shape[2] != self.p:
            raise DimensionError(f"layer {self.name}: expected input width {self.p}, got {x.shape}")
        b, t, _ = a.shape
        book.meta[self.key("in_shape")] = x.shape
        book.save(self.key("x"), a)
        u = matmul(a.reshape(b * t, self.p), self.params["adapter_D"], counters)
        h, dh = _activate(self.act, u, counters)
        book.save(self.key("h"), h.reshape(b, t, self.r))
        book.save(self.key("tau_prime"), dh)
        v = matmul(h, self.params["adapter_U"], counters)
        v += a.reshape(b * t, self.p)
        counters.add(v.size)
        return counters.track(v.reshape(x.shape))

    def backward(self, dy, book, counters, *, need_input_grad, grads):
        dv = _as3(dy)
        b, t, _ = dv.shape
        book.save(self.key("dv"), dv)
        dh = matmul(dv.reshape(b * t, self.p), self.params["adapter_U"], counters, trans_b=True)
        dh *= book.get(self.key("tau_prime"))
        counters.add(dh.size)
        du = book.save(self.key("du"), dh.reshape(b, t, self.r))
        out = {}
        if "adapter_U" in grads:
            out["adapter_U"] = param_grad(book.get(self.key("h")), dv, counters)
        if "adapter_D" in grads:
            out["adapter_D"] = param_grad(book.get(self.key("x")), du, counters)
        dx = None
        if need_input_grad:
            dx = matmul(du.reshape(b * t, self.r), self.params["adapter_D"], counters, trans_b=True)
            dx += dv.reshape(b * t, self.p)
            counters.add(dx.size)
            dx = counters.track(dx.reshape(book.meta[self.key("in_shape")]))
        return dx, out

    def shapes(self, book):
        t = book.get(self.key("x")).shape[1]
        return decompose_composite(LayerShape("adapter", t, self.p, self.p, self.r, name=self.name))


# ---------------------------------------------------------------------------
# normalisation


class _Norm(Layer):
    def sites(self):
        if not self.affine or not self.trainable["gamma"]:
            return []
        return [Site(self, "gamma", "norm", self.key("xhat"), self.key("ds")),
                Site(self, "beta", "norm", self.key("xhat"), self.key("ds"))]

    def _affine(self, xhat, book, counters, shape):
        if self.affine:
            book.save(self.key("xhat"), xhat)
            y = xhat * self._bcast(self.params["gamma"], xhat) + self._bcast(self.params["beta"], xhat)
            counters.add(2 * y.size)
        else:
            y = xhat.copy()
        return counters.track(y.reshape(shape))

    def backward(self, dy, book, counters, *, need_input_grad, grads):
        out = {}
        if self.affine:
            book.save(self.key("ds"), dy)
            xhat = book.get(self.key("xhat"))
            axes = self._reduce_axes(dy)
            if "gamma" in grads:
                out["gamma"] = (dy * xhat).sum(axis=axes)
                counters.add(2 * dy.size)
            if "beta" in grads:
                out["beta"] = dy.sum(axis=axes)
                counters.add(dy.size)
        dx = None
        if need_input_grad:
            dx = counters.track(self._input_grad(dy, book, counters))
        return dx, out


class LayerNorm(_Norm):
    """Normalise over the trailing axis; affine ``gamma``/``beta`` of width ``dim``."""

    kind = "layernorm"

    def __init__(self, dim: int, eps: float = 1e-5, affine: bool = True, name: str = ""):
        super().__init__(name)
        self.dim, self.eps, self.affine = dim, eps, affine
        if affine:
            self.params["gamma"] = np.ones(dim)
            self.params["beta"] = np.zeros(dim)
            self.trainable.update(gamma=True, beta=True)

    @staticmethod
    def _bcast(v, x):
        return v

    @staticmethod
    def _reduce_axes(dy):
        return tuple(range(dy.ndim - 1))

    def forward(self, x, book, counters):
        if x.shape[-1] != self.dim:
            raise DimensionError(f"layer {self.name}: expected trailing width {self.dim}, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * rstd
        counters.add(5 * x.size)
        book.save(self.key("rstd"), rstd)
        if not self.affine:
            book.save(self.key("xhat"), xhat)
        return self._affine(xhat, book, counters, x.shape)

    def _input_grad(self, dy, book, counters):
        xhat = book.get(self.key("xhat"))
        rstd = book.get(self.key("rstd"))
        g = dy * self.params["gamma"] if self.affine else dy
        dx = rstd * (g - g.mean(axis=-1, keepdims=True)
                     - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        counters.add(6 * dy.size)
        return dx


class GroupNorm(_Norm):
    """Group normalisation on ``B x C x H x W`` with per-channel affine."""

    kind = "groupnorm"

    def __init__(self, groups: int, channels: int, eps: float = 1e-5, affine: bool = True, name: str = ""):
        super().__init__(name)
        if channels % groups:
            raise DimensionError(f"groupnorm: {channels} channels not divisible by {groups} groups")
        self.groups, self.channels, self.eps, self.affine = groups, channels, eps, affine
        self.dim = channels
        if affine:
            self.params["gamma"] = np.ones(channels)
            self.params["beta"] = np.zeros(channels)
            self.trainable.update(gamma=True, beta=True)

    @staticmethod
    def _bcast(v, x):
        return v[:, None, None]

    @staticmethod
    def _reduce_axes(dy):
        return (0, 2, 3)

    def forward(self, x, book, counters):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"layer {self.name}: expected B x {self.channels} x H x W, got {x.shape}")
        b = x.shape[0]
        xg = x.reshape(b, self.groups, -1)
        mu = xg.mean(axis=-1, keepdims=True)
        xc = xg - mu
        rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xhat = (xc * rstd).reshape(x.shape)
        counters.add(5 * x.size)
        book.save(self.key("rstd"), rstd)
        if not self.affine:
            book.save(self.key("xhat"), xhat)
        return self._affine(xhat, book, counters, x.shape)

    def _input_grad(self, dy, book, counters):
        b = dy.shape[0]
        xhat = book.get(self.key("xhat")).reshape(b, self.groups, -1)
        rstd = book.get(self.key("rstd"))
        g = dy * self.params["gamma"][:, None, None] if self.affine else dy
        g = g.reshape(b, self.groups, -1)
        dx = rstd * (g - g.mean(axis=-1, keepdims=True)
                     - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        counters.add(6 * dy.size)
        return dx.reshape(dy.shape)


def norm_layer_per_sample_grads(layer: Layer, xhat: np.ndarray, ds: np.ndarray,
                                counters: OpCounters | None = None) -> np.ndarray:
    """Per-sample affine gradients ``[gamma | beta]`` of shape ``B x 2*dim``.

    Non-affine layers contribute an empty ``B x 0`` block.
    """
    if not isinstance(layer, _Norm):
        raise CapabilityError(f"{layer.kind} is not a normalisation layer")
    b = ds.shape[0]
    if not layer.affine:
        return np.zeros((b, 0))
    if xhat.shape != ds.shape:
        raise DimensionError(f"normalised input {xhat.shape} vs output grad {ds.shape}")
    axes = tuple(i for i in layer._reduce_axes(ds) if i != 0)
    gamma = (ds * xhat).sum(axis=axes)
    beta = ds.sum(axis=axes)
    if counters is not None:
        counters.add(3 * ds.size)
    return np.concatenate([gamma, beta], axis=1)


# ---------------------------------------------------------------------------
# parameter-free inter-layer operations


def _activate(kind: str, x: np.ndarray, counters: OpCounters):
    if kind == "relu":
        y = np.maximum(x, 0.0)
        dy = (x > 0).astype(DTYPE)
    elif kind == "tanh":
        y = np.tanh(x)
        dy = 1.0 - y * y
    elif kind == "gelu":
        # tanh approximation
        c = np.sqrt(2.0 / np.pi)
        inner = c * (x + 0.044715 * x**3)
        th = np.tanh(inner)
        y = 0.5 * x * (1.0 + th)
        dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3 * 0.044715 * x * x)
    elif kind == "identity":
        y = x.copy()
        dy = np.ones_like(x)
    else:
        raise CapabilityError(f"unknown activation {kind!r}")
    counters.add(2 * x.size)
    return y, dy


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn: str = "relu", name: str = ""):
        super().__init__(name or fn)
        self.fn = fn
        _activate(fn, np.zeros(1), OpCounters())

    def forward(self, x, book, counters):
        y, dy = _activate(self.fn, x, counters)
        book.save(self.key("phi_prime"), dy)
        return counters.track(y)

    def backward(self, dy, book, counters, *, need_input_grad, grads):
        if not need_input_grad:
            return None, {}
        dx = dy * book.get(self.key("phi_prime"))
        counters.add(dx.size)
        return counters.track(dx), {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, book, counters):
        book.meta[self.key("in_shape")] = x.shape
        return counters.track(x.reshape(x.shape[0], -1))

    def backward(self, dy, book, counters, *, need_input_grad, grads):
        if not need_input_grad:
            return None, {}
        return counters.track(dy.reshape(book.meta[self.key("in_shape")])), {}


class Tokens(Layer):
    """``B x C x H x W`` feature map to a ``B x (H*W) x C`` token sequence."""

    kind = "tokens"

    def forward(self, x, book, counters):
        b, c, h, w = x.shape
        book.meta[self.key("in_shape")] = x.shape
        return counters.track(np.ascontiguousarray(x.reshape(b, c, h * w).transpose(0, 2, 1)))

    def backward(self, dy, book, counters, *, need_input_grad, grads):
        if not need_input_grad:
            return None, {}
        b, c, h, w = book.meta[self.key("in_shape")]
        return counters.track(np.ascontiguousarray(dy.transpose(0, 2, 1)).reshape(b, c, h, w)), {}


class MeanTokens(Layer):
    kind = "meantokens"

    def forward(self, x, book, counters):
        book.meta[self.key("in_shape")] = x.shape
        counters.add(x.size)
        return counters.track(x.mean(axis=1))

    def backward(self, dy, book, counters, *, need_input_grad, grads):
        if not need_input_grad:
            return None, {}
        b, t, d = book.meta[self.key("in_shape")]
        counters.add(b * t * d)
        return counters.track(np.repeat(dy[:, None, :] / t, t, axis=1)), {}


class Pool2d(Layer):
    """Max or average pooling; ``k=None`` pools the whole map (global)."""

    kind = "pool"

    def __init__(self, mode: str = "max", k: int | None = None, stride: int | None = None,
                 pad: int = 0, name: str = ""):
        super().__init__(name or f"{mode}pool")
        if mode not in ("max", "avg"):
            raise CapabilityError(f"unknown pooling mode {mode!r}")
        self.mode, self.k, self.stride, self.pad = mode, k, stride, pad

    def _geom(self, h, w):
        if self.k is None:
            return (h, w), 1, 0
        return (self.k, self.k), self.stride or self.k, self.pad

    def out_hw(self, h, w):
        (kh, kw), s, p = self._geom(h, w)
        return conv_output_size(h, kh, s, p, 1), conv_output_size(w, kw, s, p, 1)

    def forward(self, x, book, counters):
        b, c, h, w = x.shape
        kern, s, p = self._geom(h, w)
        ho, wo = self.out_hw(h, w)
        book.meta[self.key("in_shape")] = x.shape
        xp = x.reshape(b * c, 1, h, w)
        if self.mode == "max" and p:
            xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
            cols = im2col(xp, kern, s, 0)
        else:
            cols = im2col(xp, kern, s, p)
        if self.mode == "max":
            idx = cols.argmax(axis=2)
            book.meta[self.key("argmax")] = idx
            y = np.take_along_axis(cols, idx[..., None], axis=2)[..., 0]
        else:
            y = cols.mean(axis=2)
        counters.add(cols.size)
        return counters.track(y.reshape(b, c, ho, wo))

    def backward(self, dy, book, counters, *, need_input_grad, grads):
        if not need_input_grad:
            return None, {}
        b, c, h, w = book.meta[self.key("in_shape")]
        kern, s, p = self._geom(h, w)
        t = dy.shape[2] * dy.shape[3]
        kk = kern[0] * kern[1]
        g = dy.reshape(b * c, t)
        cols = np.zeros((b * c, t, kk))
        if self.mode == "max":
            np.put_along_axis(cols, book.meta[self.key("argmax")][..., None], g[..., None], axis=2)
            if p:
                dx = col2im(cols, (b * c, 1, h + 2 * p, w + 2 * p), kern, s, 0, 1, counters)
                dx = dx[:, :, p:-p, p:-p]
            else:
                dx = col2im(cols, (b * c, 1, h, w), kern, s, 0, 1, counters)
        else:
            cols[...] = (g / kk)[..., None]
            dx = col2im(cols, (b * c, 1, h, w), kern, s, p, 1, counters)
        return counters.track(np.ascontiguousarray(dx).reshape(b, c, h, w)), {}


# ---------------------------------------------------------------------------
# lowering helpers


def lower_to_generalized_linear(layer: Layer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(a, W)`` with ``a: B x T x d`` such that the layer's linear part is ``a @ W``.

    Embedding activations come back as dense one-hot rows here; the engine
    itself keeps them as id arrays.
    """
    if isinstance(layer, (Linear, LoRALinear)):
        a = _as3(x)
        if a.shape[2] != layer.d:
            raise DimensionError(f"layer {layer.name}: input width {a.shape[2]} != {layer.d}")
        w = layer.params["weight"]
        if isinstance(layer, LoRALinear):
            w = w + layer.params["lora_L"] @ layer.params["lora_R"]
        return a, w
    if isinstance(layer, Conv2d):
        return im2col(x, (layer.k, layer.k), layer.stride, layer.pad, layer.dilation), layer.params["weight"]
    if isinstance(layer, Embedding):
        onehot = np.zeros(x.shape + (layer.vocab,))
        np.put_along_axis(onehot, x[..., None], 1.0, axis=-1)
        return onehot, layer.params["weight"]
    raise CapabilityError(f"{layer.kind} layers are not generalized linear; instantiate per-sample gradients")


def decompose_composite(shape: LayerShape) -> list[LayerShape]:
    """Split a LoRA or adapter layer into its two generalized linear sub-modules."""
    if shape.r is None and shape.kind in ("adapter", "lora-linear"):
        raise DimensionError(f"{shape.kind} layer {shape.name} needs a rank r")
    if shape.kind == "adapter":
        return [LayerShape("linear", shape.T, shape.p, shape.r, name=f"{shape.name}.adapter_D"),
                LayerShape("linear", shape.T, shape.r, shape.p, name=f"{shape.name}.adapter_U")]
    if shape.kind == "lora-linear":
        return [LayerShape("linear", shape.T, shape.d, shape.r, name=f"{shape.name}.lora_L"),
                LayerShape("linear", shape.T, shape.r, shape.p, name=f"{shape.name}.lora_R")]
    raise CapabilityError(f"{shape.kind} is not a composite layer")
