"""Built-in architectures and the graph builder.

The ResNet entries list exactly the convolutions of the residual stages plus
the stem and the classifier: shortcut/downsample 1x1 convolutions are left out
and the network is modelled as a plain chain. ResNet50 puts the stride on the
3x3 convolution in stages 3 and 4 and on the first 1x1 in stage 5. The
``vit-tiny-like`` entry is synthetic.
"""

from __future__ import annotations

import os
import re

import numpy as np

from . import layers as L
from .analyzer import ACTIVATIONS, ArchSpec, LayerSpec, output_state, parse_arch, walk
from .autograd import Graph
from .errors import ConfigurationError, SpecificationError
from .tensor import SeededRng

_MLP = re.compile(r"^mlp:(\d+)x(\d+)$")


def _mlp(depth: int, width: int) -> str:
    lines = [f"input flat {width}"]
    for i in range(1, depth + 1):
        lines.append(f"linear in={width} out={width} name=fc{i}")
        if i < depth:
            lines.append("relu")
    return "\n".join(lines)


def _resnet_basic(blocks: tuple[int, ...]) -> str:
    lines = ["input image 224 224 3",
             "conv2d in=3 out=64 k=7 stride=2 pad=3 name=conv1", "relu",
             "maxpool k=3 stride=2 pad=1"]
    cin = 64
    for stage, (n, width) in enumerate(zip(blocks, (64, 128, 256, 512)), 2):
        for j in range(2 * n):
            stride = 2 if stage > 2 and j == 0 else 1
            lines.append(f"conv2d in={cin} out={width} k=3 stride={stride} pad=1 name=conv{stage}_x_{j + 1}")
            lines.append("relu")
            cin = width
    lines += ["avgpool global", "flatten", "linear in=512 out=1000 name=linear"]
    return "\n".join(lines)


def _resnet50() -> str:
    lines = ["input image 224 224 3",
             "conv2d in=3 out=64 k=7 stride=2 pad=3 name=conv1", "relu",
             "maxpool k=3 stride=2 pad=1"]
    cin = 64
    idx = 0
    for stage, (n, width) in enumerate(zip((3, 4, 6, 3), (64, 128, 256, 512)), 2):
        for blk in range(n):
            first = stage > 2 and blk == 0
            s1 = 2 if first and stage == 5 else 1
            s3 = 2 if first and stage in (3, 4) else 1
            convs = [(cin, width, 1, s1, 0), (width, width, 3, s3, 1), (width, 4 * width, 1, 1, 0)]
            for j, (a, b, k, s, p) in enumerate(convs, 1):
                idx += 1
                lines.append(f"conv2d in={a} out={b} k={k} stride={s} pad={p} name=conv{stage}_x_{3 * blk + j}")
                lines.append("relu")
            cin = 4 * width
    lines += ["avgpool global", "flatten", "linear in=2048 out=1000 name=linear"]
    return "\n".join(lines)


def _vgg11() -> str:
    cfg = [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"]
    lines = ["input image 224 224 3"]
    cin, i = 3, 0
    for c in cfg:
        if c == "M":
            lines.append("maxpool k=2 stride=2")
            continue
        i += 1
        lines += [f"conv2d in={cin} out={c} k=3 pad=1 name=conv{i}", "relu"]
        cin = c
    lines += ["flatten", "linear in=25088 out=4096 name=fc1", "relu",
              "linear in=4096 out=4096 name=fc2", "relu", "linear in=4096 out=1000 name=fc3"]
    return "\n".join(lines)


_FIXED = {
    "cnn-small": """input image 8 8 3
conv2d in=3 out=4 k=3 pad=1 name=conv1
relu
conv2d in=4 out=4 k=3 stride=2 pad=1 name=conv2
relu
flatten
linear in=64 out=10 name=fc""",
    "embed-mlp": """input seq 12 vocab=20
embedding vocab=20 out=8 name=embed
linear in=8 out=8 name=fc1
relu
linear in=8 out=4 name=fc2""",
    "lora-mlp": """input flat 16
lora in=16 out=16 r=2 name=lora1
relu
lora in=16 out=4 r=2 name=lora2""",
    "adapter-mlp": """input flat 16
linear in=16 out=16 frozen=1 name=base1
relu
adapter dim=16 r=2 name=adapter
linear in=16 out=4 frozen=1 name=head""",
    "vit-tiny-like": """# synthetic patch-token model
input image 32 32 3
conv2d in=3 out=64 k=4 stride=4 name=patch
tokens
layernorm dim=64 name=ln1
linear in=64 out=192 name=attn_in
gelu
linear in=192 out=64 name=attn_out
layernorm dim=64 name=ln2
linear in=64 out=256 name=mlp_in
gelu
linear in=256 out=64 name=mlp_out
meantokens
linear in=64 out=10 name=head""",
}

CATALOG_NAMES = ("mlp:LxW", "cnn-small", "embed-mlp", "lora-mlp", "adapter-mlp",
                 "resnet18", "resnet34", "resnet50", "vgg11", "vit-tiny-like")


def catalog_text(name: str) -> str:
    m = _MLP.match(name)
    if m:
        depth, width = int(m.group(1)), int(m.group(2))
        if depth < 1 or width < 1:
            raise ConfigurationError(f"{name}: depth and width must be positive")
        return _mlp(depth, width)
    if name == "resnet18":
        return _resnet_basic((2, 2, 2, 2))
    if name == "resnet34":
        return _resnet_basic((3, 4, 6, 3))
    if name == "resnet50":
        return _resnet50()
    if name == "vgg11":
        return _vgg11()
    if name in _FIXED:
        return _FIXED[name]
    raise ConfigurationError(f"unknown architecture {name!r}; available: {', '.join(CATALOG_NAMES)}"
                             " or a path to an architecture file")


def resolve_arch(name_or_path: str) -> ArchSpec:
    """Catalog name, or a file in the architecture text format."""
    if os.path.isfile(name_or_path):
        with open(name_or_path) as fh:
            return parse_arch(fh.read(), os.path.splitext(os.path.basename(name_or_path))[0])
    return parse_arch(catalog_text(name_or_path), name_or_path)


# ---------------------------------------------------------------------------
# graphs


def _build_layer(spec: LayerSpec, name: str, st_in) -> L.Layer:
    k = spec.kind
    if k == "conv2d":
        return L.Conv2d(spec.int("in"), spec.int("out"), spec.int("k"), spec.int("stride", 1),
                        spec.int("pad", 0), spec.int("dilation", 1), spec.flag("bias", True),
                        spec.flag("frozen", False), name=name)
    if k == "linear":
        return L.Linear(spec.int("in"), spec.int("out"), spec.flag("bias", True), spec.flag("frozen", False), name=name)
    if k == "embedding":
        return L.Embedding(spec.int("vocab"), spec.int("out"), spec.flag("frozen", False), name=name)
    if k == "lora":
        return L.LoRALinear(spec.int("in"), spec.int("out"), spec.int("r"), name=name)
    if k == "adapter":
        return L.Adapter(spec.int("dim"), spec.int("r"), spec.args.get("act", "relu"), name=name)
    if k == "layernorm":
        return L.LayerNorm(spec.int("dim"), name=name)
    if k == "groupnorm":
        return L.GroupNorm(spec.int("groups"), st_in.c, name=name)
    if k in ACTIVATIONS:
        return L.Activation(k, name=name)
    if k in ("maxpool", "avgpool"):
        mode = k[:3]
        if "global" in spec.positional:
            return L.Pool2d(mode, None, name=name)
        ks = spec.int("k")
        return L.Pool2d(mode, ks, spec.int("stride", ks), spec.int("pad", 0), name=name)
    if k == "flatten":
        return L.Flatten(name=name)
    if k == "tokens":
        return L.Tokens(name=name)
    if k == "meantokens":
        return L.MeanTokens(name=name)
    raise SpecificationError(f"line {spec.line}: cannot build layer kind {k!r}")


def init_params(graph: Graph, seed: int = 0) -> Graph:
    """Deterministic random initialisation of every parameter, frozen ones included."""
    rng = SeededRng(seed)
    for layer in graph.layers:
        for key, val in layer.params.items():
            if key in ("bias", "beta"):
                val[...] = 0.1 * rng.normal(val.shape)
            elif key == "gamma":
                val[...] = 1.0 + 0.1 * rng.normal(val.shape)
            else:
                val[...] = rng.normal(val.shape) / np.sqrt(val.shape[0])
    return graph


def build_graph(arch: ArchSpec, input_size: int | None = None, seed: int = 0, loss: str = "mse") -> Graph:
    arch = arch.with_input(input_size)
    built = [_build_layer(spec, name, st_in) for spec, name, st_in, _, _ in walk(arch)]
    graph = Graph(built, loss)
    graph.arch = arch
    return init_params(graph, seed)


def synthetic_batch(arch: ArchSpec, B: int, seed: int = 0, input_size: int | None = None):
    """Random inputs and regression targets shaped for ``arch``."""
    arch = arch.with_input(input_size)
    rng = SeededRng(seed).spawn(1)
    if arch.input_kind == "image":
        h, w, c = arch.input_dims
        x = rng.normal((B, c, h, w))
    elif arch.input_kind == "seq":
        x = rng.integers(0, arch.vocab, (B, arch.input_dims[0]))
    else:
        x = rng.normal((B, arch.input_dims[0]))
    st = output_state(arch)
    if st.kind == "image":
        shape = (B, st.c, st.h, st.w)
    elif st.kind == "seq":
        shape = (B, st.t, st.c)
    else:
        shape = (B, st.c)
    return x, rng.normal(shape)
