"""Static time/space cost model over layer shapes.

Architectures are described in a line-oriented text format::

    input image 224 224 3
    conv2d in=3 out=64 k=7 stride=2 pad=3 name=conv1
    relu
    maxpool k=3 stride=2 pad=1
    ...
    linear in=512 out=1000

Header alternatives are ``input seq T vocab=V`` and ``input flat D``. Lines
starting with ``#`` are comments.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .clipping import decide_mode
from .engine import ImplKind
from .errors import ComparisonError, ConfigurationError, DimensionError, SpecificationError
from .layers import LayerShape, decompose_composite
from .tensor import ITEMSIZE, conv_output_size

ACTIVATIONS = ("relu", "gelu", "tanh", "identity")
SHAPE_ONLY = ACTIVATIONS + ("layernorm", "groupnorm")


@dataclass
class LayerSpec:
    kind: str
    args: dict[str, str]
    line: int
    positional: list[str] = field(default_factory=list)

    def int(self, key: str, default: int | None = None) -> int:
        if key not in self.args:
            if default is None:
                raise SpecificationError(f"line {self.line}: {self.kind} needs {key}=")
            return default
        try:
            return int(self.args[key])
        except ValueError:
            raise SpecificationError(f"line {self.line}: {key}={self.args[key]!r} is not an integer") from None

    def flag(self, key: str, default: bool) -> bool:
        val = self.args.get(key)
        if val is None:
            return default
        return val.lower() in ("1", "true", "yes")

    @property
    def name(self) -> str | None:
        return self.args.get("name")


@dataclass
class ArchSpec:
    name: str
    input_kind: str                 # image | seq | flat
    input_dims: tuple[int, ...]     # (H, W, C) | (T,) | (D,)
    vocab: int | None
    layers: list[LayerSpec]

    def with_input(self, size: int | None) -> "ArchSpec":
        """Same layers with the spatial size (image), length (seq) or width (flat) replaced."""
        if size is None:
            return self
        if size < 1:
            raise SpecificationError(f"input size must be positive, got {size}")
        if self.input_kind == "image":
            dims = (size, size, self.input_dims[2])
        else:
            dims = (size,)
        return ArchSpec(self.name, self.input_kind, dims, self.vocab, self.layers)


def parse_arch(text: str, name: str = "arch") -> ArchSpec:
    header = None
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        kv = {}
        pos = []
        for w in words[1:]:
            if "=" in w:
                k, v = w.split("=", 1)
                kv[k] = v
            else:
                pos.append(w)
        if words[0] == "input":
            if header is not None:
                raise SpecificationError(f"line {lineno}: duplicate input header")
            header = (lineno, pos, kv)
            continue
        if header is None:
            raise SpecificationError(f"line {lineno}: layers must follow an 'input' header")
        layers.append(LayerSpec(words[0].lower(), kv, lineno, pos))
    if header is None:
        raise SpecificationError("missing 'input' header")
    lineno, pos, kv = header
    try:
        kind = pos[0]
        if kind == "image":
            dims = (int(pos[1]), int(pos[2]), int(pos[3]))
            vocab = None
        elif kind == "seq":
            dims = (int(pos[1]),)
            vocab = int(kv["vocab"]) if "vocab" in kv else None
        elif kind == "flat":
            dims = (int(pos[1]),)
            vocab = None
        else:
            raise SpecificationError(f"line {lineno}: unknown input kind {kind!r}")
    except (IndexError, ValueError, KeyError):
        raise SpecificationError(f"line {lineno}: malformed input header") from None
    if min(dims) < 1:
        raise SpecificationError(f"line {lineno}: input dimensions must be positive")
    return ArchSpec(name, kind, dims, vocab, layers)


# ---------------------------------------------------------------------------
# shape derivation


@dataclass
class _State:
    kind: str          # image | seq | flat | ids
    c: int = 0         # channels / width
    h: int = 0
    w: int = 0
    t: int = 1

    @property
    def width(self) -> int:
        return self.c


def _layer_name(spec: LayerSpec, idx: int) -> str:
    return spec.name or f"{spec.kind}{idx}"


def walk(arch: ArchSpec):
    """Yield ``(spec, name, state_in, state_out, shapes)`` for every layer.

    ``shapes`` lists the trainable generalized linear sub-layers; norm and
    parameter-free layers yield an empty list.
    """
    if arch.input_kind == "image":
        h, w, c = arch.input_dims
        st = _State("image", c, h, w, h * w)
    elif arch.input_kind == "seq":
        if arch.vocab is None:
            raise SpecificationError("sequence input needs vocab=")
        st = _State("ids", arch.vocab, t=arch.input_dims[0])
    else:
        st = _State("flat", arch.input_dims[0])

    counts: dict[str, int] = {}
    for spec in arch.layers:
        counts[spec.kind] = counts.get(spec.kind, 0) + 1
        name = _layer_name(spec, counts[spec.kind])
        where = f"layer {name} (line {spec.line})"
        shapes: list[LayerShape] = []
        k = spec.kind
        try:
            if k == "conv2d":
                if st.kind != "image":
                    raise SpecificationError(f"{where}: conv2d needs an image input, got {st.kind}")
                cin, cout, ks = spec.int("in"), spec.int("out"), spec.int("k")
                if cin != st.c:
                    raise SpecificationError(f"{where}: expects {cin} channels, receives {st.c}")
                s, p, dil = spec.int("stride", 1), spec.int("pad", 0), spec.int("dilation", 1)
                ho = conv_output_size(st.h, ks, s, p, dil)
                wo = conv_output_size(st.w, ks, s, p, dil)
                new = _State("image", cout, ho, wo, ho * wo)
                if not spec.flag("frozen", False):
                    shapes = [LayerShape("conv2d", ho * wo, cin * ks * ks, cout, name=name)]
            elif k in ("linear", "lora"):
                if st.kind not in ("flat", "seq"):
                    raise SpecificationError(f"{where}: {k} needs a flat or sequence input, got {st.kind}")
                din, dout = spec.int("in"), spec.int("out")
                if din != st.c:
                    raise SpecificationError(f"{where}: expects width {din}, receives {st.c}")
                new = _State(st.kind, dout, t=st.t)
                if k == "lora":
                    shapes = decompose_composite(LayerShape("lora-linear", st.t, din, dout, spec.int("r"), name=name))
                elif not spec.flag("frozen", False):
                    shapes = [LayerShape("linear", st.t, din, dout, name=name)]
            elif k == "adapter":
                if st.kind not in ("flat", "seq"):
                    raise SpecificationError(f"{where}: adapter needs a flat or sequence input")
                dim = spec.int("dim")
                if dim != st.c:
                    raise SpecificationError(f"{where}: expects width {dim}, receives {st.c}")
                new = st
                shapes = decompose_composite(LayerShape("adapter", st.t, dim, dim, spec.int("r"), name=name))
            elif k == "embedding":
                if st.kind != "ids":
                    raise SpecificationError(f"{where}: embedding needs token ids")
                vocab, dout = spec.int("vocab"), spec.int("out")
                if vocab != st.c:
                    raise SpecificationError(f"{where}: vocab {vocab} != input vocab {st.c}")
                new = _State("seq", dout, t=st.t)
                if not spec.flag("frozen", False):
                    shapes = [LayerShape("embedding", st.t, vocab, dout, name=name)]
            elif k in ("maxpool", "avgpool"):
                if st.kind != "image":
                    raise SpecificationError(f"{where}: pooling needs an image input")
                if "global" in spec.positional:
                    new = _State("image", st.c, 1, 1, 1)
                else:
                    ks = spec.int("k")
                    s, p = spec.int("stride", ks), spec.int("pad", 0)
                    ho, wo = conv_output_size(st.h, ks, s, p, 1), conv_output_size(st.w, ks, s, p, 1)
                    new = _State("image", st.c, ho, wo, ho * wo)
            elif k == "flatten":
                if st.kind == "image":
                    new = _State("flat", st.c * st.h * st.w)
                elif st.kind == "seq":
                    new = _State("flat", st.c * st.t)
                else:
                    new = st
            elif k == "tokens":
                if st.kind != "image":
                    raise SpecificationError(f"{where}: tokens needs an image input")
                new = _State("seq", st.c, t=st.h * st.w)
            elif k == "meantokens":
                if st.kind != "seq":
                    raise SpecificationError(f"{where}: meantokens needs a sequence input")
                new = _State("flat", st.c)
            elif k == "layernorm":
                if spec.int("dim") != st.c:
                    raise SpecificationError(f"{where}: layernorm dim {spec.args['dim']} != width {st.c}")
                new = st
            elif k == "groupnorm":
                if st.kind != "image":
                    raise SpecificationError(f"{where}: groupnorm needs an image input")
                if st.c % spec.int("groups"):
                    raise SpecificationError(f"{where}: {st.c} channels not divisible into groups")
                new = st
            elif k in ACTIVATIONS:
                new = st
            else:
                raise SpecificationError(f"{where}: unknown layer kind {k!r}")
        except DimensionError as exc:
            raise SpecificationError(f"{where}: {exc}") from None
        yield spec, name, st, new, shapes
        st = new


def layer_shapes(arch: ArchSpec) -> list[LayerShape]:
    return [s for *_, shapes in walk(arch) for s in shapes]


def output_state(arch: ArchSpec):
    st = None
    for *_, st_out, _ in walk(arch):
        st = st_out
    return st


# ---------------------------------------------------------------------------
# cost formulas


MODULES = ("forward", "output_grad", "param_grad", "ghost_norm", "instantiation", "weighted_sum")


def module_costs(B: int, T: int, p: int, d: int) -> dict[str, tuple[int, int]]:
    """(time, space) of the six building blocks of DP training on one layer."""
    if min(B, T, p, d) < 1:
        raise DimensionError(f"B, T, p, d must be positive, got {(B, T, p, d)}")
    btpd = 2 * B * T * p * d
    return {
        "forward": (btpd, p * d + B * T * d),
        "output_grad": (btpd, B * T * (p + d)),
        "param_grad": (btpd, p * d),
        "ghost_norm": (2 * B * T * T * (p + d), 2 * B * T * T),
        "instantiation": (btpd, B * p * d),
        "weighted_sum": (2 * B * p * d, 0),
    }


def _table_row(kind: ImplKind, B: int, s: LayerShape) -> tuple[int, int]:
    """Per-layer (time, extra space) of one implementation."""
    T, p, d = s.T, s.p, s.d
    btpd = B * T * p * d
    ghost_t = 2 * B * T * T * (p + d)
    ghost_s = 2 * B * T * T
    inst_s = B * p * d
    ghost = decide_mode(T, p, d) == "ghost"
    mixed_s = min(ghost_s, inst_s)
    rows = {
        ImplKind.NON_DP: (6 * btpd, 0),
        ImplKind.NAIVE: (6 * btpd, inst_s),
        ImplKind.OPACUS: (8 * btpd, inst_s),
        ImplKind.OPACUS_IMPROVED: (6 * btpd, inst_s),
        ImplKind.FAST_GRAD_CLIP: (8 * btpd, inst_s),
        ImplKind.FAST_GRAD_CLIP_IMPROVED: (8 * btpd, inst_s),
        ImplKind.GHOST_CLIP: (10 * btpd + ghost_t, ghost_s),
        ImplKind.BK: (6 * btpd + ghost_t, ghost_s),
        ImplKind.MIX_GHOST_CLIP: (8 * btpd + (ghost_t if ghost else 2 * btpd), mixed_s),
        ImplKind.BK_MIX_GHOST_CLIP: (6 * btpd + (ghost_t if ghost else 2 * btpd), mixed_s),
        ImplKind.BK_MIX_OPT: (6 * btpd + (ghost_t if ghost else 0), mixed_s),
    }
    return rows[kind]


def _modules_row(kind: ImplKind, B: int, s: LayerShape, first: bool) -> tuple[int, int]:
    """Per-layer (time, extra space) summed from the module costs as the engine runs them."""
    m = module_costs(B, s.T, s.p, s.d)
    t = lambda *names: sum(m[n][0] for n in names)
    out_grad = 0 if first else m["output_grad"][0]   # no input gradient below the first layer
    fwd = m["forward"][0]
    ghost = decide_mode(s.T, s.p, s.d) == "ghost"
    psg_norm = 2 * B * s.p * s.d
    if kind is ImplKind.NON_DP:
        return fwd + out_grad + t("param_grad"), 0
    if kind is ImplKind.NAIVE:
        return fwd + out_grad + t("param_grad") + psg_norm + t("weighted_sum"), m["instantiation"][1]
    if kind is ImplKind.OPACUS:
        return fwd + out_grad + t("param_grad", "instantiation", "weighted_sum") + psg_norm, m["instantiation"][1]
    if kind is ImplKind.OPACUS_IMPROVED:
        return fwd + out_grad + t("instantiation", "weighted_sum") + psg_norm, m["instantiation"][1]
    if kind is ImplKind.FAST_GRAD_CLIP:
        return fwd + 2 * out_grad + t("instantiation", "param_grad") + psg_norm, m["instantiation"][1]
    if kind is ImplKind.FAST_GRAD_CLIP_IMPROVED:
        return fwd + out_grad + t("instantiation", "param_grad") + psg_norm, m["instantiation"][1]
    if kind is ImplKind.GHOST_CLIP:
        return fwd + 2 * out_grad + 2 * t("param_grad") + t("ghost_norm"), m["ghost_norm"][1]
    if kind is ImplKind.BK:
        return fwd + out_grad + t("param_grad", "ghost_norm"), m["ghost_norm"][1]
    norm_t = t("ghost_norm") if ghost else t("instantiation") + psg_norm
    space = min(m["ghost_norm"][1], m["instantiation"][1])
    if kind is ImplKind.MIX_GHOST_CLIP:
        return fwd + 2 * out_grad + (2 if ghost else 1) * t("param_grad") + norm_t, space
    if kind is ImplKind.BK_MIX_GHOST_CLIP:
        return fwd + out_grad + t("param_grad") + norm_t, space
    if kind is ImplKind.BK_MIX_OPT:
        return fwd + out_grad + (t("param_grad") if ghost else t("weighted_sum")) + norm_t, space
    raise ConfigurationError(f"no cost model for {kind}")


def _as_shapes(arch) -> list[LayerShape]:
    if isinstance(arch, ArchSpec):
        return layer_shapes(arch)
    return list(arch)


def impl_cost(arch, B: int, kind: ImplKind | str, model: str = "table") -> tuple[int, int]:
    """Total (time, space) over all layers.

    ``model="table"`` uses the closed-form per-implementation totals with the
    non-DP space ``pd + 3BTd + BTp`` as base. ``model="modules"`` adds up the
    module costs in the order the engine executes them, drops the input
    gradient of the first layer, and charges FastGradClip only the largest
    layer's per-sample gradients since they are discarded layer by layer.
    """
    if isinstance(kind, str):
        kind = ImplKind.parse(kind)
    if model not in ("table", "modules"):
        raise ConfigurationError(f"unknown cost model {model!r}")
    shapes = _as_shapes(arch)
    if not shapes:
        raise SpecificationError("architecture has no trainable generalized linear layers")
    time = space = extra_max = 0
    for i, s in enumerate(shapes):
        space += s.p * s.d + 3 * B * s.T * s.d + B * s.T * s.p
        if model == "table":
            t, x = _table_row(kind, B, s)
        else:
            t, x = _modules_row(kind, B, s, first=i == 0)
        time += t
        if model == "modules" and kind in (ImplKind.FAST_GRAD_CLIP, ImplKind.FAST_GRAD_CLIP_IMPROVED):
            extra_max = max(extra_max, x)
        else:
            space += x
    return time, space + extra_max


def workspace_bytes(arch, B: int, kind: ImplKind | str) -> int:
    """Predicted tracked bytes: the modules-model space less the parameters."""
    shapes = _as_shapes(arch)
    _, space = impl_cost(shapes, B, kind, model="modules")
    return ITEMSIZE * (space - sum(s.p * s.d for s in shapes))


# ---------------------------------------------------------------------------
# reports


@dataclass
class ComplexityReport:
    arch: str
    batch: int
    rows: list[dict]
    ghost_total: int
    inst_total: int
    mixed_total: int
    impl_totals: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def layer_names(self) -> list[str]:
        return [r["layer"] for r in self.rows]

    def flip_index(self) -> int | None:
        """1-based position of the first layer that chooses ghost, if any."""
        for i, r in enumerate(self.rows, 1):
            if r["decision"] == "ghost":
                return i
        return None

    def summary(self) -> str:
        return f"{si(self.mixed_total)} / {si(self.inst_total)} / {si(self.ghost_total)}"

    def to_csv(self) -> str:
        cols = ["layer", "T", "d", "p", "ghost_space", "inst_space", "decision", "min_space", "time", "space"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["layer"], r["T"], r["d"], r["p"], r["ghost_space"], r["inst_space"],
                        r["decision"], r["min_space"], "", ""])
        w.writerow(["total", "", "", "", self.ghost_total, self.inst_total, "mixed", self.mixed_total, "", ""])
        for kind, (t, s) in self.impl_totals.items():
            w.writerow([f"impl:{kind}", "", "", "", "", "", "", "", t, s])
        return buf.getvalue()


def layerwise_decision_table(arch: ArchSpec, input_size: int | None = None, B: int = 1) -> ComplexityReport:
    arch = arch.with_input(input_size)
    shapes = layer_shapes(arch)
    if not shapes:
        raise SpecificationError(f"{arch.name}: no trainable generalized linear layers")
    rows = []
    for s in shapes:
        g, i = 2 * s.T * s.T, s.p * s.d
        rows.append({"layer": s.name, "T": s.T, "d": s.d, "p": s.p, "ghost_space": g, "inst_space": i,
                     "decision": decide_mode(s.T, s.p, s.d), "min_space": min(g, i)})
    totals = {k.value: impl_cost(shapes, B, k) for k in ImplKind}
    return ComplexityReport(arch.name, B, rows,
                            sum(r["ghost_space"] for r in rows), sum(r["inst_space"] for r in rows),
                            sum(r["min_space"] for r in rows), totals)


def compare_predicted_measured(report: ComplexityReport, step, *, model: str = "table",
                               tolerance: float = 0.10) -> dict:
    """Relative deviation of measured counters from the predicted totals.

    Per-layer time deviations are against the modules model, which mirrors
    the engine's execution; layers beyond ``tolerance`` are flagged.
    """
    if report.batch != step.batch_size:
        raise ComparisonError(f"report is for B={report.batch}, step ran B={step.batch_size}")
    base = {name.split(".")[0] for name in report.layer_names}
    missing = base - set(step.by_layer)
    if missing:
        raise ComparisonError(f"measured run has no layers named {sorted(missing)[:3]}; different architecture")
    kind = step.kind
    shapes = [LayerShape("linear", r["T"], r["d"], r["p"], name=r["layer"]) for r in report.rows]
    t_pred, s_pred = impl_cost(shapes, report.batch, kind, model=model)
    per_layer = {}
    for i, s in enumerate(shapes):
        t_layer, _ = _modules_row(kind, report.batch, s, first=i == 0)
        key = s.name.split(".")[0]
        per_layer[key] = per_layer.get(key, 0) + t_layer
    layer_dev = {k: (step.by_layer.get(k, 0) - v) / v for k, v in per_layer.items()}
    ws = workspace_bytes(shapes, report.batch, kind)
    return {
        "time_predicted": t_pred,
        "time_measured": step.mul_adds,
        "time_deviation": (step.mul_adds - t_pred) / t_pred,
        "space_predicted_bytes": ws,
        "space_measured_bytes": step.peak_live_bytes,
        "space_deviation": (step.peak_live_bytes - ws) / ws if ws else math.inf,
        "layer_deviation": layer_dev,
        "flagged": sorted(k for k, v in layer_dev.items() if abs(v) > tolerance),
    }


def si(x: float) -> str:
    """Compact magnitude with a K/M/G suffix: one decimal below 100 (``1.0M``,
    ``11.5M``), none above (``399M``). Values that round to 1000 of a unit
    move up to the next one."""
    units = ((1e9, "G"), (1e6, "M"), (1e3, "K"))
    for i, (div, suf) in enumerate(units):
        if abs(x) >= div:
            v = x / div
            if v >= 950 and i > 0:
                return f"{v / 1000:.1f}{units[i - 1][1]}"
            return f"{v:.1f}{suf}" if v < 100 else f"{v:.0f}{suf}"
    if abs(x) >= 950:
        return f"{x / 1000:.1f}K"
    return f"{x:.0f}" if x == int(x) else f"{x:.2g}"


def sci2(x: float) -> str:
    """Two significant figures in scientific notation, e.g. ``3.1e8``."""
    if x == 0:
        return "0"
    e = int(math.floor(math.log10(abs(x))))
    m = round(x / 10**e, 1)
    if m >= 10:
        m, e = m / 10, e + 1
    return f"{m:.1f}e{e}"
