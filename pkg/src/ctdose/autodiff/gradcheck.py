"""Finite-difference verification of taped gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tol: float
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures

    def __str__(self):
        state = "ok" if self.passed else f"{len(self.failures)} failures"
        return f"grad_check: {self.checked} coords, max rel err {self.max_rel_error:.3e} (tol {self.tol:g}) {state}"


def _scalar(f, x):
    out = f(x)
    return float(np.sum(out.data, dtype=np.float64))


def grad_check(f, x: Tensor, tol=1e-4, step=1e-4, max_coords=64, seed=0, abs_floor=1e-8):
    """Compare the taped gradient of ``sum(f(x))`` with central differences.

    ``x.data`` is perturbed in place (and restored).  Relative error per
    coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)``.
    At most ``max_coords`` coordinates, chosen at random, are checked.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
    backward(tape, out, np.ones_like(out.data))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    size = flat.size
    if size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(size, max_coords, replace=False))
    else:
        coords = np.arange(size)

    failures = []
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        up = _scalar(f, x)
        flat[i] = orig - step
        down = _scalar(f, x)
        flat[i] = orig
        numeric = (up - down) / (2.0 * step)
        a = float(analytic.reshape(-1)[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
        worst = max(worst, rel)
        if rel > tol:
            failures.append((int(i), a, numeric, rel))
    return GradCheckReport(max_rel_error=worst, checked=len(coords), tol=tol, failures=failures)
