"""Central finite-difference checks against reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .numerics import Tensor, backward, no_grad, record_kinks

STEP = 1e-5
MIN_STEP = 1e-8
REDRAWS = 5
# Relative errors are measured against max(|analytic|, |numeric|, floor) with
# floor = DENOM_FLOOR * max(1, |f|).  A central difference carries round-off of
# about eps * |f| / step (~1e-11 |f| here), so derivatives below the floor
# cannot be resolved to 1e-4 by differencing.
DENOM_FLOOR = 1e-6


@dataclass
class CheckResult:
    max_rel_error: float
    checks: int
    skipped_kinks: int
    reduced_steps: int = 0

    @property
    def worst(self) -> float:
        return self.max_rel_error


def rel_error(a: float, n: float, f_scale: float = 1.0) -> float:
    return abs(a - n) / max(abs(a), abs(n), DENOM_FLOOR * max(1.0, abs(f_scale)))


def _eval(fn: Callable[[], Tensor]):
    with no_grad(), record_kinks() as kinks:
        value = float(fn().data.sum())
    return value, kinks


def _same_kinks(k1, k2) -> bool:
    return len(k1) == len(k2) and all(np.array_equal(a, b) for a, b in zip(k1, k2))


def _central(fn, p: Tensor, direction: np.ndarray, h: float):
    base = p.data.copy()
    try:
        p.data = base + h * direction
        fp, kp = _eval(fn)
        p.data = base - h * direction
        fm, km = _eval(fn)
    finally:
        p.data = base
    return fp, fm, _same_kinks(kp, km)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    rng: np.random.Generator,
    coords_per_param: int = 3,
    directions_per_param: int = 1,
    step: float = STEP,
) -> CheckResult:
    """Compare analytic and central-difference derivatives of scalar ``fn()``.

    For each parameter, ``coords_per_param`` random coordinates and
    ``directions_per_param`` random unit directions are probed.  Probes whose
    +/- evaluations flip the sign of any ReLU input are redrawn (up to ``REDRAWS``
    times) because the difference quotient straddles a kink.  When the base
    point itself sits closer than ``step`` to a kink, every direction crosses
    it; the step for that probe is then shrunk tenfold until the sign pattern
    holds (down to ``MIN_STEP``) and the probe is counted in ``reduced_steps``.
    """
    for p in params:
        p.zero_grad()
    loss = fn()
    f0 = loss.item()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst, count, skipped, reduced = 0.0, 0, 0, 0
    for p, grad in zip(params, analytic):
        probes = []
        flat = p.data.size
        for i in rng.choice(flat, size=min(coords_per_param, flat), replace=False):
            d = np.zeros(flat)
            d[i] = 1.0
            probes.append(d)
        for _ in range(directions_per_param):
            d = rng.normal(size=flat)
            probes.append(d / np.linalg.norm(d))
        for d in probes:
            direction = d.reshape(p.shape)
            h = step
            for attempt in range(REDRAWS):
                if attempt:
                    skipped += 1
                    d = rng.normal(size=flat)
                    direction = (d / np.linalg.norm(d)).reshape(p.shape)
                fp, fm, ok = _central(fn, p, direction, h)
                if ok:
                    break
            while not ok and h > MIN_STEP:
                h /= 10.0
                fp, fm, ok = _central(fn, p, direction, h)
            if h != step:
                reduced += 1
            numeric = (fp - fm) / (2.0 * h)
            exact = float(np.sum(grad * direction))
            worst = max(worst, rel_error(exact, numeric, f0))
            count += 1
    return CheckResult(worst, count, skipped, reduced)


def check_op(op: Callable[..., Tensor], inputs: Sequence[np.ndarray],
             rng: np.random.Generator, step: float = STEP) -> CheckResult:
    """Gradient check of a single op under a random linear read-out."""
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    with no_grad():
        out_shape = op(*tensors).shape
    weights = Tensor(rng.normal(size=out_shape))

    def fn():
        return (op(*tensors) * weights).sum()

    return check_gradients(fn, tensors, rng, coords_per_param=4, directions_per_param=2, step=step)
