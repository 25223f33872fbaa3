"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    worst: tuple[int, tuple[int, ...]] | None = None  # (input index, element index)
    checked: int = 0
    message: str = ""
    per_input: list[float] = field(default_factory=list)

    @property
    def pass_(self) -> bool:
        return self.passed


def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    return (out * Tensor(weights)).sum()


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-5,
    max_elems: int | None = None,
    seed: int = 0,
    fallback_eps: Sequence[float] = (),
) -> GradcheckReport:
    """Compare reverse-mode gradients of ``fn(*inputs)`` against central differences.

    Non-scalar outputs are reduced with fixed random weights so every output
    element contributes. ``max_elems`` caps the number of elements probed per
    input; the probed subset is drawn from ``seed`` so runs are repeatable.
    The relative error of one element is ``|a - n| / max(|a|, |n|, 1e-8)``.

    An element that misses ``tol`` at ``eps`` is re-probed at each step in
    ``fallback_eps`` and keeps its smallest error. Deep compositions need
    this: tiny true gradients drown in roundoff at small steps while kinks
    (bilinear cell boundaries, max/min) spoil large steps. A wrong backward
    rule disagrees at every step size, so it still fails.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires float64 inputs")
        t.requires_grad = True

    out = fn(*inputs)
    weights = None
    if out.size != 1:
        weights = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
    loss = _scalarize(out, weights)
    analytic = grad(loss, inputs)

    def f() -> float:
        try:
            val = _scalarize(fn(*inputs), weights).item()
        except FloatingPointError as exc:
            raise _NonFinite(str(exc)) from exc
        return val

    worst_err = 0.0
    worst = None
    checked = 0
    per_input = []
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idxs = np.sort(rng.choice(flat.size, size=max_elems, replace=False))
        input_err = 0.0
        for j in idxs:
            a = analytic[i].reshape(-1)[j]
            if not np.isfinite(a):
                loc = (i, np.unravel_index(j, t.shape))
                return GradcheckReport(np.inf, False, loc, checked, f"non-finite gradient at {loc}")
            err = np.inf
            for step in (eps, *fallback_eps):
                orig = flat[j]
                try:
                    flat[j] = orig + step
                    fp = f()
                    flat[j] = orig - step
                    fm = f()
                except _NonFinite as exc:
                    loc = (i, np.unravel_index(j, t.shape))
                    return GradcheckReport(np.inf, False, loc, checked, f"non-finite output at input {loc}: {exc}")
                finally:
                    flat[j] = orig
                num = (fp - fm) / (2 * step)
                err = min(err, abs(a - num) / max(abs(a), abs(num), 1e-8))
                if err < tol:
                    break
            checked += 1
            input_err = max(input_err, err)
            if err > worst_err:
                worst_err = err
                worst = (i, tuple(int(v) for v in np.unravel_index(j, t.shape)))
        per_input.append(float(input_err))
    return GradcheckReport(float(worst_err), bool(worst_err < tol), worst, checked, per_input=per_input)


class _NonFinite(Exception):
    pass
