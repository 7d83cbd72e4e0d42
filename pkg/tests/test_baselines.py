import math

import numpy as np
import pytest

from ctdose.baselines import (SearchConfig, brute_force_min_dose, end2end_policy, fixed_dose, mean_psnr_at,
                              oracle_seeds, tcm_dose, tcm_policy, tune_to_mean_psnr)
from ctdose.errors import ParameterError, UnreachableTargetError
from ctdose.models import DoseModule, DoseNetConfig, ReconModule
from ctdose.phantom import PhantomSpec, body_mask, generate_cohort, generate_phantom
from ctdose.projector import Geometry, forward_project
from ctdose.training import evaluate_cases

TINY = Geometry(n_views=12, n_bins=25, image_size=16, pixel_size=0.1)
FAST = SearchConfig(lower=1e1, upper=1e8, grid_points=8, bisection_steps=8, n_seeds=3)


@pytest.fixture(scope="module")
def case():
    return generate_phantom(PhantomSpec(grid_size=16, ellipse_count=2, seed=2, edge_sigma=1.0))


def test_tcm_zero_sinogram_gets_reference():
    assert tcm_dose(np.zeros((4, 5)), 1e4) == 1e4
    assert tcm_dose(np.zeros((4, 5)), 1e4, mode="mean") == 1e4


def test_tcm_scale_consistency():
    p = np.random.default_rng(0).random((6, 7))
    for c in (0.5, 2.0):
        assert tcm_dose(p + c, 100.0) == pytest.approx(math.exp(c) * tcm_dose(p, 100.0), rel=1e-12)


def test_tcm_larger_body_more_dose():
    g = Geometry()
    small = (body_mask(128, 0.4) * 0.2).astype(np.float32)
    large = (body_mask(128, 0.8) * 0.2).astype(np.float32)
    assert tcm_dose(forward_project(large, g), 1e3) > tcm_dose(forward_project(small, g), 1e3)


def test_tcm_min_detected_count_is_reference():
    p = np.random.default_rng(1).random((5, 9)) * 3
    n0 = tcm_dose(p, 500.0)
    assert n0 * math.exp(-p.max()) == pytest.approx(500.0, rel=1e-2)


def test_tcm_errors():
    with pytest.raises(ParameterError):
        tcm_dose(np.zeros(3), 0.0)
    with pytest.raises(ParameterError):
        tcm_dose(np.array([np.nan]), 1.0)
    with pytest.raises(ParameterError):
        tcm_policy(10.0, mode="median")


def test_fixed_dose_policy():
    with pytest.raises(ParameterError):
        fixed_dose(0)
    with pytest.raises(ParameterError):
        fixed_dose(np.inf)
    pol = fixed_dose(1e4)
    c = generate_cohort(3, grid_size=16, seed=1)
    assert [pol.n0(img, TINY) for _, img in c.cases] == pytest.approx([1e4] * 3)


def test_end2end_policy_wraps_module(case):
    dose = DoseModule(DoseNetConfig(channels=4, hidden=8, input_downsample=0, n0_init=4e3), TINY)
    assert end2end_policy(dose).n0(case, TINY) == pytest.approx(4e3, rel=1e-5)


def test_oracle_reaches_target_and_is_minimal(case):
    recon = ReconModule(TINY)
    seeds = oracle_seeds("c", 3)
    target = 30.0
    n0 = brute_force_min_dose(case, recon, target, seeds, search=FAST)
    p = forward_project(case, TINY)
    assert mean_psnr_at(case, p, recon, n0, seeds) >= target - 0.05
    assert mean_psnr_at(case, p, recon, n0 * 0.9, seeds) < target - 0.05


def test_oracle_monotone_in_target_and_tolerance(case):
    recon = ReconModule(TINY)
    seeds = oracle_seeds("c", 3)
    n_lo = brute_force_min_dose(case, recon, 28.0, seeds, search=FAST)
    n_hi = brute_force_min_dose(case, recon, 32.0, seeds, search=FAST)
    assert n_lo <= n_hi
    loose = brute_force_min_dose(case, recon, 32.0, seeds, tolerance=0.1, search=FAST)
    assert loose <= n_hi


def test_oracle_saturates_at_lower_bound(case):
    n0 = brute_force_min_dose(case, ReconModule(TINY), -100.0, [0], search=FAST)
    assert n0 == pytest.approx(FAST.lower)


def test_oracle_unreachable(case):
    with pytest.raises(UnreachableTargetError) as info:
        brute_force_min_dose(case, ReconModule(TINY), 500.0, [0], search=FAST)
    assert np.isfinite(info.value.achieved)
    with pytest.raises(ParameterError):
        brute_force_min_dose(case, ReconModule(TINY), 30.0, [])


def test_tune_fixed_dose_to_target():
    c = generate_cohort(6, grid_size=16, seed=4, ellipse_count=2)
    recon = ReconModule(TINY)
    value = tune_to_mean_psnr(fixed_dose, c.cases, recon, 30.0, 1e1, 1e8, seeds_per_case=2, steps=25)
    recs = evaluate_cases(c.cases, c.split.get, "fixed", fixed_dose(value).log_dose, recon, 2)
    assert np.mean([r.psnr for r in recs]) == pytest.approx(30.0, abs=0.05)
