"""Comparison dose policies and the brute-force minimal-dose search.

* fixed dose: one photon count for every patient;
* tube-current modulation (TCM): the incident count is scaled so the
  most attenuated ray (or, optionally, the mean ray) receives a fixed
  expected detected count;
* end2end: the learned dose module.

:func:`brute_force_min_dose` finds, per case, the smallest ``n0`` at
which a reconstruction module reaches a target seed-averaged PSNR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff.ct_ops import noise_op
from .errors import ParameterError, UnreachableTargetError
from .models import DoseModule, ReconModule, predict_log_dose, psnr, reconstruct
from .physics import NoiseModelParams, noise_draw
from .projector import forward_project
from .training import case_seed


@dataclass
class DosePolicy:
    label: str
    n0_const: float | None = None
    reference_count: float | None = None
    tcm_mode: str = "max"
    model: DoseModule | None = field(default=None, repr=False)

    def log_dose(self, images, sinos):
        """Log-flux per case from the clean images and their sinograms."""
        if self.label == "fixed":
            return np.full(len(images), math.log(self.n0_const))
        if self.label == "tcm":
            return np.log([tcm_dose(s, self.reference_count, self.tcm_mode) for s in sinos])
        if self.label == "end2end":
            return predict_log_dose(self.model, images, sinos).data.astype(np.float64)
        raise ParameterError(f"unknown policy label {self.label!r}")

    def n0(self, image, geom):
        image = np.asarray(image, dtype=np.float32)
        n0 = math.exp(float(self.log_dose(image[None], forward_project(image, geom)[None])[0]))
        if not (np.isfinite(n0) and n0 > 0):
            raise ParameterError(f"policy {self.label} produced invalid n0 {n0}")
        return n0


def fixed_dose(n0_const) -> DosePolicy:
    if not (np.isfinite(n0_const) and n0_const > 0):
        raise ParameterError(f"fixed dose must be finite and > 0, got {n0_const}")
    return DosePolicy("fixed", n0_const=float(n0_const))


def tcm_policy(reference_count, mode="max") -> DosePolicy:
    if not (np.isfinite(reference_count) and reference_count > 0):
        raise ParameterError(f"reference_count must be finite and > 0, got {reference_count}")
    if mode not in ("max", "mean"):
        raise ParameterError(f"TCM mode must be 'max' or 'mean', got {mode!r}")
    return DosePolicy("tcm", reference_count=float(reference_count), tcm_mode=mode)


def end2end_policy(dose: DoseModule) -> DosePolicy:
    return DosePolicy("end2end", model=dose)


def tcm_dose(prior_sino, reference_count, mode="max"):
    """Incident count giving ``reference_count`` expected detected photons.

    ``mode="max"`` equalises the most attenuated ray:
    ``n0 = reference_count * exp(max p_bar)``; ``mode="mean"`` uses the
    mean of ``exp(p_bar)`` over rays instead.
    """
    if not reference_count > 0:
        raise ParameterError(f"reference_count must be > 0, got {reference_count}")
    p = np.asarray(prior_sino, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ParameterError("prior sinogram contains non-finite values")
    if mode == "max":
        return float(reference_count * np.exp(p.max()))
    if mode == "mean":
        return float(reference_count * np.mean(np.exp(p)))
    raise ParameterError(f"TCM mode must be 'max' or 'mean', got {mode!r}")


@dataclass(frozen=True)
class SearchConfig:
    lower: float = 1e2
    upper: float = 1e9
    grid_points: int = 15
    bisection_steps: int = 12
    n_seeds: int = 5
    tolerance: float = 0.05


def mean_psnr_at(image, p_bar, recon: ReconModule, n0, seeds, noise=NoiseModelParams()):
    """Seed-averaged PSNR of ``recon`` at one photon count."""
    etas = np.stack([noise_draw(recon.geom.sino_shape, s) for s in seeds])
    k = len(seeds)
    d = ad.Tensor(np.full(k, math.log(n0)))
    noisy = noise_op(d, np.broadcast_to(p_bar, etas.shape), etas, noise)
    q = psnr(reconstruct(recon, noisy), np.broadcast_to(image, (k,) + image.shape)).data
    return float(np.mean(q))


def brute_force_min_dose(case, recon: ReconModule, target_q, seeds, tolerance=0.05, search=SearchConfig(),
                         noise=NoiseModelParams(), return_trace=False):
    """Smallest ``n0`` whose seed-averaged PSNR reaches ``target_q - tolerance``.

    A geometric grid over ``[search.lower, search.upper]`` brackets the
    threshold; the first grid point above which every point passes is
    refined by bisection in ``log n0``.  Any non-monotone pass/fail
    pattern on the grid is thereby skipped over rather than trusted.
    """
    image = np.asarray(case, dtype=np.float32)
    p_bar = forward_project(image, recon.geom)
    seeds = list(seeds)
    if not seeds:
        raise ParameterError("brute_force_min_dose needs at least one noise seed")
    goal = target_q - tolerance
    trace = []

    def passes(n0):
        q = mean_psnr_at(image, p_bar, recon, n0, seeds, noise)
        trace.append((n0, q))
        return q >= goal

    top = passes(search.upper)
    if not top:
        raise UnreachableTargetError(
            f"target {target_q:.2f} dB unreachable at n0={search.upper:g} (achieved {trace[-1][1]:.2f} dB)",
            achieved=trace[-1][1])
    grid = np.geomspace(search.lower, search.upper, search.grid_points)
    ok = [passes(n) for n in grid[:-1]] + [True]
    first = len(grid) - 1
    while first > 0 and ok[first - 1]:
        first -= 1
    if first == 0:
        result = float(grid[0])
    else:
        lo, hi = math.log(grid[first - 1]), math.log(grid[first])
        for _ in range(search.bisection_steps):
            mid = 0.5 * (lo + hi)
            if passes(math.exp(mid)):
                hi = mid
            else:
                lo = mid
        result = math.exp(hi)
    return (result, trace) if return_trace else result


def oracle_seeds(case_id, n_seeds, base=0):
    return [case_seed(case_id, k, base) for k in range(n_seeds)]


def tune_to_mean_psnr(make_policy, cases, recon, target, lo, hi, seeds_per_case=2, steps=20,
                      noise=NoiseModelParams()):
    """Bisect a policy's scalar parameter (log scale) so cohort mean PSNR meets ``target``.

    ``make_policy(value)`` builds the policy.  Returns the parameter value.
    """
    from .training import evaluate_cases  # local import keeps module import order simple

    def mean_q(value):
        pol = make_policy(value)
        recs = evaluate_cases(cases, lambda _: "test", pol.label, pol.log_dose, recon, seeds_per_case, noise)
        return float(np.mean([r.psnr for r in recs]))

    a, b = math.log(lo), math.log(hi)
    for _ in range(steps):
        mid = 0.5 * (a + b)
        if mean_q(math.exp(mid)) >= target:
            b = mid
        else:
            a = mid
    return math.exp(0.5 * (a + b))
