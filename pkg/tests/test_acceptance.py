"""Acceptance checks, one reported line per criterion (see the terminal summary).

Criteria 5 and 6 evaluate the frozen reference run in ``tests/reference``
(produced by ``ctdose train`` + ``ctdose compare`` with
``tests/reference/config.json``).  Set ``CTDOSE_RETRAIN=1`` to rebuild it
from scratch into a temporary directory instead (about 15 minutes).
"""

import dataclasses
import math
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from ctdose import autodiff as ad
from ctdose import cli
from ctdose import config as C
from ctdose.autodiff.ct_ops import fbp_op, noise_op
from ctdose.baselines import (SearchConfig, brute_force_min_dose, fixed_dose, oracle_seeds, tcm_dose,
                              tcm_policy, tune_to_mean_psnr)
from ctdose.models import (DenoiserConfig, DoseModule, DoseNetConfig, ReconModule, load_modules,
                           predict_log_dose, psnr, psnr_value, reconstruct, save_modules)
from ctdose.phantom import PhantomSpec, body_mask, generate_cohort, generate_phantom, shepp_logan
from ctdose.physics import DoseSetting, NoiseModelParams, inject_noise, projection_variance
from ctdose.projector import Geometry, backproject, fbp, forward_project
from ctdose.training import TARGET_PSNR, evaluate_cases, hinge_loss, read_log, seed_averaged

REFERENCE = Path(__file__).parent / "reference"
SHEPP_LOGAN_FBP_PSNR_BOUND = 25.7  # frozen from the reference run (25.776 dB)
TRAIN_BUDGET_S = 30 * 60
TINY = Geometry(n_views=12, n_bins=25, image_size=16, pixel_size=0.1)


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# --- 1. gradient integrity ------------------------------------------------------

def _primitive_checks():
    w34 = rand(3, 4, seed=7)
    x34 = rand(3, 4, seed=11) + 0.05
    k, b = rand(4, 3, 3, 3, seed=2), rand(4, seed=3)
    wconv = rand(2, 4, 6, 4, seed=4)
    cases = {
        "add": (lambda t: ad.add(t, rand(4, seed=5)), x34),
        "mul": (lambda t: ad.mul(t, w34), x34),
        "scale": (lambda t: ad.scale(t, -1.7), x34),
        "relu": (lambda t: ad.mul(ad.relu(t), w34), x34),
        "leaky_relu": (lambda t: ad.mul(ad.leaky_relu(t, 0.1), w34), x34),
        "reduce_sum": (lambda t: ad.reduce_sum(ad.mul(t, t)), x34),
        "reduce_mean": (lambda t: ad.reduce_mean(ad.mul(t, t)), x34),
        "reshape": (lambda t: ad.mul(ad.reshape(t, (4, 3)), rand(4, 3, seed=8)), x34),
        "concat": (lambda t: ad.mul(ad.concat([t, t], axis=0), rand(6, 4, seed=9)), x34),
        "dense": (lambda t: ad.mul(ad.dense(t, rand(4, 2, seed=1), rand(2, seed=2)), rand(3, 2, seed=3)), x34),
        "conv2d": (lambda t: ad.mul(ad.conv2d(t, k, b), wconv), rand(2, 3, 6, 4, seed=1)),
        "global_mean_pool": (lambda t: ad.mul(ad.global_mean_pool(t), rand(2, 3, seed=5)), rand(2, 3, 4, 6)),
        "downsample2x": (lambda t: ad.mul(ad.downsample2x(t), rand(2, 3, 2, 3, seed=6)), rand(2, 3, 4, 6)),
    }
    p_bar = np.random.default_rng(0).uniform(0, 3, (3, 12, 25))
    eta = rand(3, 12, 25, seed=12)
    wn = rand(3, 12, 25, seed=13)
    cases["noise_injection"] = (lambda t: ad.mul(noise_op(t, p_bar, eta), wn), np.array([6.0, 8.0, 10.0]))
    cases["fbp"] = (lambda t: ad.mul(fbp_op(t, TINY), rand(1, 16, 16, seed=3)), rand(1, 12, 25, seed=4))
    ref = np.random.default_rng(1).random((2, 6, 6))
    cases["psnr"] = (lambda t: psnr(t, ref), ref + 0.1 * rand(2, 6, 6, seed=14))
    return cases


def test_criterion_1_gradient_integrity(record_criterion):
    from test_models import full_chain_report

    start = time.perf_counter()
    worst = {}
    for name, (f, x) in _primitive_checks().items():
        rep = ad.grad_check(f, ad.Tensor(np.array(x, dtype=np.float64)), tol=1e-4, step=1e-5)
        worst[name] = rep.max_rel_error
    chain = {name: full_chain_report(name).max_rel_error
             for name in ("conv1.w", "conv2.w", "conv3.w", "fc1.w", "fc1.b", "head.w", "head.b")}
    elapsed = time.perf_counter() - start
    prim_ok = max(worst.values()) < 1e-4
    chain_ok = max(chain.values()) < 1e-3
    ok = prim_ok and chain_ok and elapsed < 120
    record_criterion(1, ok, f"{len(worst)} primitives max rel err {max(worst.values()):.2e} (< 1e-4), "
                            f"full chain {max(chain.values()):.2e} (< 1e-3), {elapsed:.1f}s")
    assert prim_ok, worst
    assert chain_ok, chain
    assert elapsed < 120


# --- 2. physics oracle --------------------------------------------------------------

SETTINGS = [  # p_bar, n0, sigma_e^2
    (0.0, 1e4, 10.0),
    (2.0, 1e3, 10.0),
    (4.0, 5e4, 10.0),
    (1.0, 200.0, 0.5),
    (6.0, 2.0, 0.0),  # correction term negative: clamp active
]


def test_criterion_2_noise_variance_matches_model(record_criterion):
    start = time.perf_counter()
    n = 100_000
    results = []
    for i, (p, n0, se2) in enumerate(SETTINGS):
        params = NoiseModelParams(sigma_e_sq=se2)
        want = float(projection_variance(np.array([p]), n0, params)[0])
        noisy, _ = inject_noise(np.full(n, p), DoseSetting.from_n0(n0), params, seed=100 + i)
        got = float(np.var(noisy - p, ddof=1))
        se = want * math.sqrt(2.0 / (n - 1))
        results.append((p, n0, se2, want, got, abs(got - want) / se))
    clamp_active = results[-1][3] == NoiseModelParams().variance_floor
    elapsed = time.perf_counter() - start
    ok = all(r[5] < 3 for r in results) and clamp_active and elapsed < 60
    record_criterion(2, ok, "z-scores " + ", ".join(f"{r[5]:.2f}" for r in results)
                     + f" (< 3; last setting clamped), {elapsed:.1f}s")
    assert ok, results


# --- 3. projector ---------------------------------------------------------------------

def test_criterion_3_projector(record_criterion):
    start = time.perf_counter()
    g = Geometry()
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal(g.image_shape), rng.standard_normal(g.sino_shape)
    adj = abs(np.vdot(forward_project(x, g), y) - np.vdot(x, backproject(y, g))) / abs(np.vdot(y, forward_project(x, g)))

    radius_px, mu = 40.0, 0.5
    disk = (body_mask(g.image_size, 2 * radius_px / g.image_size) * mu).astype(np.float32)
    centre = forward_project(disk, g)[:, (g.n_bins - 1) // 2]
    chord_err = float(np.max(np.abs(centre - 2 * radius_px * mu * g.pixel_size)))
    chord_tol = mu * g.pixel_size

    sl = shepp_logan(128)
    sl_psnr = psnr_value(fbp(forward_project(sl, g), g), sl)
    elapsed = time.perf_counter() - start
    ok = adj < 1e-4 and chord_err <= chord_tol and sl_psnr >= SHEPP_LOGAN_FBP_PSNR_BOUND and elapsed < 60
    record_criterion(3, ok, f"adjoint rel err {adj:.1e}, chord err {chord_err:.4f} <= {chord_tol:.3f}, "
                            f"Shepp-Logan FBP {sl_psnr:.3f} dB >= {SHEPP_LOGAN_FBP_PSNR_BOUND}, {elapsed:.1f}s")
    assert ok


# --- 4. hinge gating ---------------------------------------------------------------------

def test_criterion_4_hinge_gating(record_criterion):
    g = Geometry()
    lam = 0.01
    cohort = generate_cohort(4, seed=9)
    imgs = np.stack([img for _, img in cohort.cases])
    sinos = forward_project(imgs, g)
    dose = DoseModule(DoseNetConfig(n0_init=1e6), g)
    dose.fit_feature_scaling(imgs, sinos)
    recon = ReconModule(g, DenoiserConfig())
    w = recon.params["out.w"].data  # zero at init; make the denoiser path live
    w[:] = 1e-3 * np.random.default_rng(1).standard_normal(w.shape)
    eta = np.random.default_rng(0).standard_normal(sinos.shape)
    with ad.Tape() as tape:
        d = predict_log_dose(dose, imgs, sinos)
        quality = psnr(reconstruct(recon, noise_op(d, sinos, eta)), imgs)
        loss = hinge_loss(TARGET_PSNR, quality, d, lam)
    ad.backward(tape, loss)
    all_above = bool(np.all(quality.data > TARGET_PSNR))
    zero = all(not np.any(gr) for gr in recon.params.grads().values())
    exact = bool(np.all(d.grad == np.asarray(lam, dtype=d.dtype)))
    ok = all_above and zero and exact
    record_criterion(4, ok, f"batch PSNR min {quality.data.min():.2f} > q, denoiser grads all zero: {zero}, "
                            f"dloss/dd == lambda exactly: {exact}")
    assert ok


# --- 5 and 6. reference run ------------------------------------------------------------------

def _reference_config(out):
    cfg = C.load(REFERENCE / "config.json")
    return dataclasses.replace(cfg, out=str(out))


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """Directory with the reference checkpoints, rebuilt on request."""
    if os.environ.get("CTDOSE_RETRAIN") == "1" or not (REFERENCE / cli.CHECKPOINT).is_file():
        out = tmp_path_factory.mktemp("reference")
        shutil.copy(REFERENCE / "config.json", out / "config.json")
        cfg = _reference_config(out)
        cli.cmd_train(cfg)
        cli.cmd_compare(dataclasses.replace(cfg, policy=dataclasses.replace(cfg.policy, oracle=False)))
        return out
    return REFERENCE


@pytest.fixture(scope="session")
def reference(reference_run):
    cfg = _reference_config(reference_run)
    cohort = cli.load_cohort(cfg)
    dose, e2e_recon, meta = load_modules(reference_run / cli.CHECKPOINT)
    methods = {"end2end": (lambda im, s: predict_log_dose(dose, im, s).data, e2e_recon)}
    values = {}
    for name in ("fixed", "tcm"):
        _, recon, bmeta = load_modules(reference_run / f"baseline-{name}.ckpt")
        values[name] = float(bmeta["policy.value"])
        pol = fixed_dose(values[name]) if name == "fixed" else tcm_policy(values[name], cfg.policy.tcm_mode)
        methods[name] = (pol.log_dose, recon)
    return cfg, cohort, methods, meta, values


def _psnrs(cfg, cohort, cases, name, fn, recon, seeds):
    recs = seed_averaged(evaluate_cases(cases, cohort.split.get, name, fn, recon, seeds, cfg.train.noise))
    return np.array([r.psnr for r in recs])


def test_criterion_5_iq_stability(reference, record_criterion):
    cfg, cohort, methods, meta, values = reference
    q = cfg.train.q
    cases = cohort.subset("test")
    (e2e_fn, e2e_recon), (fixed_fn, fixed_recon) = methods["end2end"], methods["fixed"]
    e2e = _psnrs(cfg, cohort, cases, "end2end", e2e_fn, e2e_recon, 5)
    fixed = _psnrs(cfg, cohort, cases, "fixed", fixed_fn, fixed_recon, 5)
    within = np.mean(np.abs(e2e - q) <= 0.5)
    ratio = fixed.std() / e2e.std()

    # the fixed count is tuned on the validation split, where the means must agree
    val = cohort.subset("validation")
    val_gap = (_psnrs(cfg, cohort, val, "fixed", fixed_fn, fixed_recon, 2).mean()
               - _psnrs(cfg, cohort, val, "end2end", e2e_fn, e2e_recon, 2).mean())
    # test cases differ in size mix, so also re-match the fixed count on them directly
    n0_test = tune_to_mean_psnr(fixed_dose, cases, fixed_recon, e2e.mean(), 1e1, 1e8, steps=14,
                                noise=cfg.train.noise)
    fixed_matched = _psnrs(cfg, cohort, cases, "fixed", fixed_dose(n0_test).log_dose, fixed_recon, 5)
    ratio_matched = fixed_matched.std() / e2e.std()

    train_s = float(meta["wall_seconds"])
    ok = (within >= 0.9 and min(ratio, ratio_matched) >= 2.0 and abs(val_gap) < 0.1
          and train_s <= TRAIN_BUDGET_S)
    record_criterion(5, ok, f"{len(cases)} test cases: end2end {within:.1%} within q+-0.5 dB "
                            f"(mean {e2e.mean():.3f}, std {e2e.std():.3f}); fixed n0 {values['fixed']:.0f} "
                            f"(validation gap {val_gap:+.3f} dB) test mean {fixed.mean():.3f}, "
                            f"std {fixed.std():.3f} = {ratio:.1f}x; re-matched on test n0 {n0_test:.0f}, "
                            f"mean {fixed_matched.mean():.3f}, std {fixed_matched.std():.3f} = "
                            f"{ratio_matched:.1f}x; training {train_s / 60:.1f} min")
    assert within >= 0.9
    assert abs(val_gap) < 0.1
    assert ratio >= 2.0 and ratio_matched >= 2.0
    assert train_s <= TRAIN_BUDGET_S


def _oracle_medians(cfg, cohort, methods, n_cases):
    pc = cfg.policy
    search = SearchConfig(lower=pc.search_lower, upper=pc.search_upper, n_seeds=pc.oracle_seeds,
                          tolerance=pc.oracle_tolerance)
    cases = cohort.subset("test")[:n_cases]
    medians = {}
    for name, (_, recon) in methods.items():
        n0 = [brute_force_min_dose(img, recon, cfg.train.q, oracle_seeds(cid, pc.oracle_seeds),
                                   pc.oracle_tolerance, search, cfg.train.noise) for cid, img in cases]
        medians[name] = float(np.median(n0))
    return medians


def test_criterion_6_dose_ordering(reference, reference_run, record_criterion):
    cfg, cohort, methods, _, _ = reference
    start = time.perf_counter()
    n_cases = max(20, cfg.policy.oracle_cases)
    medians = _oracle_medians(cfg, cohort, methods, n_cases)
    elapsed = time.perf_counter() - start
    frozen = cli.read_summary(reference_run / "compare_summary.csv") if reference_run == REFERENCE else {}
    drift = {m: abs(medians[m] / frozen[f"oracle-{m}"]["n0_median"] - 1)
             for m in medians if f"oracle-{m}" in frozen}
    order = medians["end2end"] <= medians["tcm"] and medians["end2end"] <= medians["fixed"]
    regress = all(v < 0.01 for v in drift.values())
    ok = order and regress and elapsed < 600
    record_criterion(6, ok, f"{n_cases} cases, median oracle n0: end2end {medians['end2end']:.0f}, "
                            f"tcm {medians['tcm']:.0f}, fixed {medians['fixed']:.0f}; "
                            f"max drift vs frozen {max(drift.values(), default=0):.2%}; {elapsed:.0f}s")
    assert order, medians
    assert regress, drift
    assert elapsed < 600


# --- 7. TCM audit ----------------------------------------------------------------------------

def test_criterion_7_tcm_audit(record_criterion):
    g = Geometry()
    ref = 1e3
    cohort = generate_cohort(40, seed=5)
    radius_order = sorted(cohort.ids(), key=cohort.radii.get)
    worst = 0.0
    n0 = {}
    for cid in radius_order:
        p = forward_project(cohort.image(cid), g)
        n0[cid] = tcm_dose(p, ref)
        worst = max(worst, abs(n0[cid] * math.exp(-p.max()) / ref - 1))
    disks = [tcm_dose(forward_project((body_mask(128, f) * 0.2).astype(np.float32), g), ref)
             for f in np.linspace(0.3, 0.95, 8)]
    disks_strict = all(b > a for a, b in zip(disks, disks[1:]))
    # same internal content scaled to growing body sizes
    scaled_strict = True
    for seed in range(10):
        doses = [tcm_dose(forward_project(generate_phantom(PhantomSpec(body_radius_fraction=f, seed=seed,
                                                                       edge_sigma=1.0)), g), ref)
                 for f in np.linspace(0.5, 0.95, 6)]
        scaled_strict &= all(b > a for a, b in zip(doses, doses[1:]))
    # independently drawn cases also differ in content, so only the rank trend is reported
    rho = spearmanr([cohort.radii[c] for c in radius_order], [n0[c] for c in radius_order])[0]
    ok = worst < 0.01 and disks_strict and scaled_strict
    record_criterion(7, ok, f"min-ray detected count within {worst:.1e} of reference over {len(n0)} cases; "
                            f"n0 strictly increasing with body size for uniform disks: {disks_strict}, "
                            f"for 10 phantoms scaled over 6 sizes: {scaled_strict}; "
                            f"cohort radius/n0 Spearman {rho:.2f}")
    assert ok


# --- 8. reproducibility ----------------------------------------------------------------------

def test_criterion_8_reproducibility(tmp_path, record_criterion):
    cfg = C.ExperimentConfig(
        cohort=C.CohortConfig(n_cases=24, grid_size=32, seed=1, ellipse_count=3),
        train=C.TrainConfig(epochs=2, lam=1.0, geometry=Geometry(n_views=30, n_bins=47, image_size=32),
                            dose_net=DoseNetConfig(channels=4, hidden=8, input_downsample=0, n0_init=5e3),
                            denoiser=DenoiserConfig(channels=8, layers=3)),
    )
    logs = []
    for run in ("a", "b"):
        cli.cmd_train(dataclasses.replace(cfg, out=str(tmp_path / run)))
        logs.append((tmp_path / run / cli.TRAIN_LOG).read_bytes())
    same_log = logs[0] == logs[1] and len(read_log(tmp_path / "a" / cli.TRAIN_LOG)) == 4

    dose, recon, meta = load_modules(tmp_path / "a" / cli.CHECKPOINT)
    again = save_modules(tmp_path / "again.ckpt", dose, recon, meta)
    d2, r2, _ = load_modules(again)
    first = ad.load_checkpoint(tmp_path / "a" / cli.CHECKPOINT)[0]
    second = ad.load_checkpoint(again)[0]
    bit_exact = first.keys() == second.keys() and all(first[k].tobytes() == second[k].tobytes() for k in first)
    ok = same_log and bit_exact
    record_criterion(8, ok, f"two cmd_train runs identical logs: {same_log}; checkpoint round trip bit-exact "
                            f"over {len(first)} tensors: {bit_exact}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
