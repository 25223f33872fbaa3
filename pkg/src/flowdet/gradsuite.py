"""Registry of differentiable operators with small float64 fixtures for gradient checking."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .attention import SAA, GlobalContextBranch, LocalDetailBranch, SaaConfig, gate_fuse, \
    global_context_attention, local_detail_attention, saa_forward
from .detector.config import micro_config
from .detector.loss import LossWeights, Target, set_loss
from .detector.model import build_model
from .deform import ARB, GDU, PAFC, GduConfig, PafcConfig, arb_forward, gdu_forward, pafc_forward
from .gradcheck import GradcheckReport, gradcheck
from .nn import Module
from .tensor import Tensor, sabotage

F64 = np.float64


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable, list[Tensor], int | None]]
    tol: float = 1e-5
    fallback_eps: tuple[float, ...] = ()


REGISTRY: dict[str, GradCase] = {}


def register(name: str, tol: float = 1e-5, fallback_eps: tuple[float, ...] = ()):
    def deco(build):
        REGISTRY[name] = GradCase(name, build, tol, fallback_eps)
        return build
    return deco


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def randomize(module: Module, rng: np.random.Generator, scale: float = 0.5, only_zero: bool = False,
              gain: float = 1.0) -> Module:
    """Overwrite parameters with random values.

    ``only_zero`` keeps the regular initialisation (multiplied by ``gain``)
    and only fills the zero-initialised tensors (offset heads, gate,
    biases...). Deep stacks then neither saturate nor shrink their gradients
    below what finite differences can resolve.
    """
    for _, p in module.named_parameters():
        if only_zero and np.any(p.data != 0):
            p.data = p.data * gain
            continue
        p.data = rng.standard_normal(p.shape).astype(p.dtype) * scale
    return module


@register("conv2d")
def _conv2d(rng):
    x, w, b = _t(rng, 2, 3, 6, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    return (lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=1)), [x, w, b], None


@register("dwconv")
def _dwconv(rng):
    x, wd, wp, b = _t(rng, 1, 3, 5, 6), _t(rng, 3, 3, 3), _t(rng, 4, 3), _t(rng, 4)
    return ops.dwconv, [x, wd, wp, b], None


@register("bilinear_sample")
def _bilinear(rng):
    x = _t(rng, 1, 2, 5, 6)
    py = Tensor(rng.uniform(-1.5, 5.5, (1, 7)), requires_grad=True)
    px = Tensor(rng.uniform(-1.5, 6.5, (1, 7)), requires_grad=True)
    return ops.deform_sample, [x, py, px], None


def _module_case(module: Module, fn, x: Tensor, max_elems):
    params = module.parameters()

    def run(x, *ps):  # the parameters are perturbed in place, fn reads them from the module
        return fn(x)

    return run, [x, *params], max_elems


@register("gdu_forward")
def _gdu(rng):
    cfg = GduConfig()
    g = randomize(GDU(rng, 3, cfg, F64), rng, 0.4)
    return _module_case(g, lambda x: gdu_forward(x, cfg, g), _t(rng, 1, 3, 7, 7), 24)


@register("arb_forward")
def _arb(rng):
    a = randomize(ARB(rng, 4, GduConfig(), F64), rng, 0.4)
    return _module_case(a, lambda x: arb_forward(x, a), _t(rng, 1, 4, 6, 6), 12)


@register("pafc_forward")
def _pafc(rng):
    cfg = PafcConfig(8, arb_count=3)
    p = randomize(PAFC(rng, cfg, F64), rng, 0.4)
    return _module_case(p, lambda x: pafc_forward(x, cfg, p), _t(rng, 1, 8, 8, 8), 6)


_SAA_CFG = SaaConfig(embed_dim=16, heads=2, window_size=2, reduction_ratio=2, ffn_dim=16)


@register("local_attention")
def _ldb(rng):
    b = randomize(LocalDetailBranch(rng, _SAA_CFG, F64), rng, 0.4)
    return _module_case(b, lambda x: local_detail_attention(x, _SAA_CFG, b), _t(rng, 1, 16, 5, 4), 16)


@register("global_attention")
def _gcb(rng):
    b = randomize(GlobalContextBranch(rng, _SAA_CFG, F64), rng, 0.4)
    return _module_case(b, lambda x: global_context_attention(x, _SAA_CFG, b), _t(rng, 1, 16, 5, 4), 16)


@register("gate_fuse")
def _gate(rng):
    fl, fg, fc = _t(rng, 1, 3, 4, 4), _t(rng, 1, 3, 4, 4), _t(rng, 1, 3, 4, 4)
    g = Tensor(rng.uniform(0.1, 0.9, (1, 1, 4, 4)), requires_grad=True)
    return gate_fuse, [fl, fg, g, fc], None


@register("saa_forward")
def _saa(rng):
    s = randomize(SAA(rng, _SAA_CFG, F64), rng, 0.4)
    return _module_case(s, lambda x: saa_forward(x, _SAA_CFG, s), _t(rng, 1, 16, 8, 8), 8)


@register("set_loss")
def _set_loss(rng):
    targets = [Target([[0.3, 0.4, 0.2, 0.3], [0.7, 0.6, 0.25, 0.2]], [0, 1]),
               Target([[0.5, 0.5, 0.4, 0.4]], [1])]
    logits, raw = _t(rng, 2, 4, 3), _t(rng, 2, 4, 4)

    def fn(logits, raw):
        return set_loss(logits, ops.sigmoid(raw), targets, LossWeights()).total

    return fn, [logits, raw], None


@register("full_model", tol=1e-4, fallback_eps=(1e-4, 1e-3, 1e-6))
def _full(rng):
    model = build_model(micro_config())
    randomize(model, rng, 0.3, only_zero=True)
    images = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)), requires_grad=True)
    targets = [Target([[0.4, 0.5, 0.3, 0.4]], [1])]
    return _module_case(model, lambda x: set_loss(*model(x), targets).total, images, 3)


@dataclass
class SuiteRow:
    op: str
    max_rel_err: float
    tol: float
    passed: bool
    checked: int
    seconds: float
    message: str = ""


def run_suite(names=None, seed: int = 0, sabotage_op: str | None = None) -> list[SuiteRow]:
    """Gradient-check every registered case (or ``names``) at float64."""
    rows = []
    for name in names or list(REGISTRY):
        case = REGISTRY[name]
        rng = np.random.default_rng([seed, list(REGISTRY).index(name)])
        fn, inputs, max_elems = case.build(rng)
        t0 = time.perf_counter()
        if sabotage_op:
            with sabotage(sabotage_op):
                rep: GradcheckReport = gradcheck(fn, inputs, tol=case.tol, max_elems=max_elems, seed=seed,
                                                 fallback_eps=case.fallback_eps)
        else:
            rep = gradcheck(fn, inputs, tol=case.tol, max_elems=max_elems, seed=seed,
                            fallback_eps=case.fallback_eps)
        rows.append(SuiteRow(name, rep.max_rel_err, case.tol, rep.passed, rep.checked,
                             time.perf_counter() - t0, rep.message))
    return rows


def write_suite_csv(rows: list[SuiteRow], path, with_time: bool = False) -> None:
    """Per-op CSV; the timing column is optional so repeated runs stay byte-identical."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["op", "max_rel_err", "tol", "passed", "checked"]
        w.writerow(head + (["seconds"] if with_time else []))
        for r in rows:
            vals = [r.op, f"{r.max_rel_err:.6e}", f"{r.tol:g}", int(r.passed), r.checked]
            w.writerow(vals + ([f"{r.seconds:.3f}"] if with_time else []))
