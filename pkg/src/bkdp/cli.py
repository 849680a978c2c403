"""``bkdp`` command line: verify, analyze, bench."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass

import numpy as np

from .analyzer import impl_cost, layer_shapes, layerwise_decision_table, workspace_bytes
from .catalog import build_graph, resolve_arch, synthetic_batch
from .clipping import ClipFn, ClipPlan
from .engine import DP_KINDS, ImplKind, OptimizerState, PrivacyParams, add_noise, clipped_sum, private_step
from .errors import BkdpError, ConfigurationError
from .tensor import OpCounters, SeededRng

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


@dataclass
class RunConfig:
    command: str
    arch: str = "mlp:3x64"
    input: int | None = None
    batch: int = 4
    impl: str = "all"
    clip_fn: str = "abadi"
    radius: float = 1.0
    sigma: float = 0.0
    seed: int = 0
    steps: int = 1
    tol: float = 1e-8
    out: str | None = None
    mem_budget_bytes: int = 4 * 1024**3

    def kinds(self, allow_non_dp: bool) -> list[ImplKind]:
        if self.impl == "all":
            return list(ImplKind) if allow_non_dp else list(DP_KINDS)
        kinds = [ImplKind.parse(k.strip()) for k in self.impl.split(",") if k.strip()]
        if not kinds:
            raise ConfigurationError("--impl is empty")
        return kinds

    def plan(self) -> ClipPlan:
        return ClipPlan(ClipFn(self.clip_fn, self.radius))

    def privacy(self) -> PrivacyParams:
        return PrivacyParams(self.sigma, self.radius)


def _write(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _rel_dev(got: dict, ref: dict) -> tuple[float, str]:
    worst, where = 0.0, ""
    for name, r in ref.items():
        scale = float(np.abs(r).max())
        dev = float(np.abs(got[name] - r).max()) / scale if scale > 0 else float(np.abs(got[name]).max())
        if dev > worst or not where:
            worst, where = dev, name
    return worst, where


def cmd_verify(cfg: RunConfig) -> int:
    kinds = cfg.kinds(allow_non_dp=False)
    if ImplKind.NON_DP in kinds:
        raise ConfigurationError("verify compares private gradients; non_dp has none")
    arch = resolve_arch(cfg.arch)
    graph = build_graph(arch, cfg.input, seed=cfg.seed)
    x, y = synthetic_batch(arch, cfg.batch, seed=cfg.seed, input_size=cfg.input)
    plan, params = cfg.plan(), cfg.privacy()

    def private(kind):
        rep = clipped_sum(graph, x, y, kind, plan, OpCounters())
        # one shared noise draw per run so kinds stay comparable
        rep.private_grad = add_noise(rep.clipped_sum, params.sigma, params.radius, SeededRng(cfg.seed))
        return rep

    ref = private(ImplKind.NAIVE)
    rows, failure = [], None
    for kind in kinds:
        rep = private(kind)
        gdev, where = _rel_dev(rep.private_grad, ref.private_grad)
        ndev = float(np.max(np.abs(rep.norms - ref.norms) / np.maximum(ref.norms, np.finfo(float).tiny)))
        rows.append([kind.value, f"{gdev:.3e}", f"{ndev:.3e}", rep.backward_passes])
        if failure is None and max(gdev, ndev) > cfg.tol:
            failure = (kind.value, where, max(gdev, ndev))
    _write(_csv(["kind", "max_rel_grad_dev", "max_rel_norm_dev", "backward_pass_count"], rows), cfg.out)
    if failure:
        print(f"verify failed: kind={failure[0]} layer={failure[1]} deviation={failure[2]:.3e} "
              f"> tol={cfg.tol:g}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    arch = resolve_arch(cfg.arch)
    report = layerwise_decision_table(arch, cfg.input, B=cfg.batch)
    _write(report.to_csv(), cfg.out)
    print(f"{arch.name}: mixed / instantiation / ghost = {report.summary()}", file=sys.stderr)
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    if cfg.steps < 1:
        raise ConfigurationError("--steps must be at least 1")
    arch = resolve_arch(cfg.arch).with_input(cfg.input)
    shapes = layer_shapes(arch)
    kinds = cfg.kinds(allow_non_dp=True)
    for kind in kinds:
        need = workspace_bytes(shapes, cfg.batch, kind)
        if need > cfg.mem_budget_bytes:
            raise ConfigurationError(f"{kind.value} needs about {need} bytes of workspace, over the budget of "
                                     f"{cfg.mem_budget_bytes}; raise --mem-budget-bytes to run it")
    plan, params = cfg.plan(), cfg.privacy()
    rows = []
    for kind in kinds:
        graph = build_graph(arch, seed=cfg.seed)
        opt = OptimizerState("sgd", lr=1e-3)
        counters = OpCounters()
        total, peak = 0, 0
        for step in range(cfg.steps):
            x, y = synthetic_batch(arch, cfg.batch, seed=cfg.seed + step)
            before = counters.mul_adds
            rep = private_step(graph, x, y, kind, plan, params, opt, SeededRng(cfg.seed).spawn(step), counters)
            total += counters.mul_adds - before
            peak = max(peak, rep.peak_live_bytes)
        t_pred, _ = impl_cost(shapes, cfg.batch, kind)
        t_pred *= cfg.steps
        rows.append([kind.value, cfg.steps, total, peak, t_pred, workspace_bytes(shapes, cfg.batch, kind),
                     f"{100.0 * (total - t_pred) / t_pred:.2f}"])
    header = ["kind", "steps", "mul_adds_total", "peak_live_bytes", "predicted_time", "predicted_space",
              "deviation_pct"]
    _write(_csv(header, rows), cfg.out)
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "analyze": cmd_analyze, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bkdp", description="Per-sample gradient clipping toolkit")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--arch", default="mlp:3x64", help="catalog name or architecture file")
    parser.add_argument("--input", type=int, default=None, help="image side, sequence length or flat width")
    parser.add_argument("--batch", type=int, default=None)
    parser.add_argument("--impl", default="all", help="comma-separated kinds or 'all'")
    parser.add_argument("--clip-fn", choices=["abadi", "flat", "automatic"], default="abadi")
    parser.add_argument("--radius", type=float, default=1.0)
    parser.add_argument("--sigma", type=float, default=0.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--steps", type=int, default=1)
    parser.add_argument("--tol", type=float, default=1e-8)
    parser.add_argument("--out", default=None, help="CSV path (default stdout)")
    parser.add_argument("--mem-budget-bytes", type=int, default=4 * 1024**3)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    batch = ns.batch if ns.batch is not None else (1 if ns.command == "analyze" else 4)
    cfg = RunConfig(ns.command, ns.arch, ns.input, batch, ns.impl, ns.clip_fn, ns.radius, ns.sigma,
                    ns.seed, ns.steps, ns.tol, ns.out, ns.mem_budget_bytes)
    try:
        if cfg.batch < 1:
            raise ConfigurationError("--batch must be at least 1")
        return COMMANDS[cfg.command](cfg)
    except BkdpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
