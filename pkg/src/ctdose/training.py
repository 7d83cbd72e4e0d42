"""Joint hinge-loss training of the dose and reconstruction modules, and evaluation.

Per training step, for a batch of cases: predict ``d`` from the clean
image, inject noise at ``n0 = exp(d)`` into the cached clean sinogram,
reconstruct, score PSNR against the clean image and minimise::

    sum_i  max(0, q - psnr_i) + lambda * d_i

Both modules are updated from the same backward pass.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff.ct_ops import noise_op
from .errors import DivergenceError, IngestionError, ParameterError
from .models import (DenoiserConfig, DoseModule, DoseNetConfig, ReconModule, predict_log_dose, psnr,
                     reconstruct)
from .phantom import Cohort
from .physics import NoiseModelParams, noise_draw
from .projector import Geometry, forward_project

log = logging.getLogger(__name__)

TARGET_PSNR = 38.57
LOG_COLUMNS = ("epoch", "split", "mean_psnr", "std_psnr", "mean_d", "hinge_active_frac")
RECORD_COLUMNS = ("case_id", "method", "n0", "psnr", "split", "seed")


@dataclass
class TrainConfig:
    q: float = TARGET_PSNR
    lam: float = 0.01
    lr: float = 1e-3
    dose_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    val_seeds: int = 1
    patience: int = 0  # 0 disables early stopping
    lr_decay: float = 1.0  # learning-rate multiplier reached at the final epoch (geometric)
    geometry: Geometry = field(default_factory=Geometry)
    noise: NoiseModelParams = field(default_factory=NoiseModelParams)
    dose_net: DoseNetConfig = field(default_factory=DoseNetConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def validate(self):
        if not self.q > 0:
            raise ParameterError(f"q must be > 0, got {self.q}")
        if self.lam < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.lr_decay <= 1:
            raise ParameterError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    method: str
    n0: float
    psnr: float
    split: str
    seed: int

    def row(self):
        return [self.case_id, self.method, repr(float(self.n0)), repr(float(self.psnr)), self.split, str(self.seed)]


def hinge_loss(q, quality, d, lam):
    """``sum(max(0, q - quality) + lam * d)`` over batch elements (taped).

    The hinge contributes zero gradient at and above ``q``.
    """
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    quality = ad.as_tensor(quality)
    d = ad.as_tensor(d)
    shortfall = ad.relu(ad.add(ad.scale(quality, -1.0), float(q)))
    return ad.reduce_sum(ad.add(shortfall, ad.scale(d, lam)))


def case_seed(case_id, index, base=0):
    """Noise seed for evaluation draw ``index`` of ``case_id``; shared by every method."""
    h = hashlib.sha256(f"{base}:{case_id}:{index}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def step_seed(seed, epoch, step, slot):
    return int(np.random.SeedSequence([seed, epoch, step, slot]).generate_state(2, np.uint64)[0])


def clean_sinograms(cases, geom):
    """Stack of clean images and their projections, in case order."""
    if not cases:
        return np.zeros((0,) + geom.image_shape, np.float32), np.zeros((0,) + geom.sino_shape, np.float32)
    images = np.stack([img for _, img in cases]).astype(np.float32)
    return images, forward_project(images, geom)


def _lr_factor(config, epoch):
    if config.epochs <= 1:
        return 1.0
    return config.lr_decay ** (epoch / (config.epochs - 1))


def _batches(n, size):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def evaluate_cases(cases, split_of, method, log_dose_fn, recon, seeds_per_case=5, noise=NoiseModelParams(),
                   batch_size=8, seed_base=0):
    """Per-(case, seed) records for arbitrary per-case log-dose functions.

    ``log_dose_fn(images, sinograms)`` returns one log-flux per case.
    """
    records = []
    geom = recon.geom
    for sl in _batches(len(cases), batch_size):
        chunk = cases[sl]
        images, sinos = clean_sinograms(chunk, geom)
        d = np.asarray(log_dose_fn(images, sinos), dtype=np.float64).reshape(-1)
        for k in range(seeds_per_case):
            eta = np.stack([noise_draw(geom.sino_shape, case_seed(cid, k, seed_base)) for cid, _ in chunk])
            noisy = noise_op(ad.Tensor(d), sinos, eta, noise)
            q = psnr(reconstruct(recon, noisy), images).data
            for (cid, _), di, qi in zip(chunk, d, q):
                records.append(CaseRecord(cid, method, float(math.exp(di)), float(qi), split_of(cid), k))
    return records


def evaluate(dose, recon, cohort: Cohort, split, seeds_per_case=5, noise=NoiseModelParams(), method=None,
             seed_base=0):
    """Records for every case of ``split`` under a dose module or dose policy.

    ``dose`` is a :class:`DoseModule` or anything with a ``log_dose(images,
    sinograms)`` method (see :mod:`ctdose.baselines`).  No parameters are
    modified.
    """
    cases = cohort.subset(split)
    if isinstance(dose, DoseModule):
        fn = lambda images, sinos: predict_log_dose(dose, images, sinos).data  # noqa: E731
        label = method or "end2end"
    else:
        fn = dose.log_dose
        label = method or dose.label
    return evaluate_cases(cases, cohort.split.get, label, fn, recon, seeds_per_case, noise, seed_base=seed_base)


def seed_averaged(records):
    """Collapse per-seed records to one per (case, method) with mean PSNR; seed = -1."""
    groups = {}
    for r in records:
        groups.setdefault((r.case_id, r.method), []).append(r)
    out = []
    for (cid, method), rs in groups.items():
        out.append(CaseRecord(cid, method, float(np.mean([r.n0 for r in rs])),
                              float(np.mean([r.psnr for r in rs])), rs[0].split, -1))
    return out


def write_records(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_records(path):
    """Strictly typed reader for the evaluation CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != RECORD_COLUMNS:
        raise ParameterError(f"{path}: header must be {','.join(RECORD_COLUMNS)}")
    return [CaseRecord(r[0], r[1], float(r[2]), float(r[3]), r[4], int(r[5])) for r in rows[1:]]


@dataclass
class TrainResult:
    dose: DoseModule | None
    recon: ReconModule
    log: list = field(default_factory=list)
    best_epoch: int = -1


def _log_row(epoch, split, psnrs, ds, q):
    psnrs = np.asarray(psnrs, dtype=np.float64)
    ds = np.asarray(ds, dtype=np.float64)
    if psnrs.size == 0:
        return (epoch, split, float("nan"), float("nan"), float("nan"), float("nan"))
    return (epoch, split, float(psnrs.mean()), float(psnrs.std()), float(ds.mean()),
            float(np.mean(psnrs < q)))


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])


def read_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != LOG_COLUMNS:
        raise ParameterError(f"{path}: header must be {','.join(LOG_COLUMNS)}")
    return [(int(r[0]), r[1]) + tuple(float(v) for v in r[2:]) for r in rows[1:]]


def _snapshot(*modules):
    return [{k: t.data.copy() for k, t in m.params} if m is not None else None for m in modules]


def _restore(snap, *modules):
    for s, m in zip(snap, modules):
        if m is not None:
            for k, t in m.params:
                t.data = s[k].copy()


def train(cohort: Cohort, config: TrainConfig, dose=None, recon=None, start_epoch=0, log_rows=None,
          on_epoch=None) -> TrainResult:
    """Jointly train ``dose`` and ``recon`` (created from ``config`` when omitted).

    Training resumes at ``start_epoch`` when modules and the earlier log
    are passed in.  ``on_epoch(epoch, result)`` is called after every
    epoch, e.g. to checkpoint.  A non-finite loss raises
    :class:`DivergenceError` with ``.result`` holding the last good state.
    """
    config.validate()
    geom = config.geometry
    dose = dose or DoseModule(config.dose_net, geom)
    recon = recon or ReconModule(geom, config.denoiser)
    train_cases = cohort.subset("train")
    val_cases = cohort.subset("validation")
    if not train_cases or not val_cases:
        raise IngestionError("cohort needs non-empty train and validation splits")
    train_img, train_sino = clean_sinograms(train_cases, geom)
    if start_epoch == 0 and dose.config.fixed_features:
        dose.fit_feature_scaling(train_img, train_sino)
    result = TrainResult(dose, recon, list(log_rows or []))

    best_score, best_snap, stale = math.inf, None, 0
    for epoch in range(start_epoch, config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_cases))
        ep_q, ep_d = [], []
        good = _snapshot(dose, recon)
        f = _lr_factor(config, epoch)
        for step, sl in enumerate(_batches(len(order), config.batch_size)):
            idx = order[sl]
            eta = np.stack([noise_draw(geom.sino_shape, step_seed(config.seed, epoch, step, int(i)))
                            for i in idx])
            with ad.Tape() as tape:
                d = predict_log_dose(dose, train_img[idx], train_sino[idx])
                noisy = noise_op(d, train_sino[idx], eta, config.noise)
                quality = psnr(reconstruct(recon, noisy), train_img[idx])
                loss = hinge_loss(config.q, quality, d, config.lam)
            if not np.isfinite(loss.data):
                _restore(good, dose, recon)
                err = DivergenceError(f"non-finite loss at epoch {epoch} step {step}")
                err.result = result
                raise err
            ad.backward(tape, loss)
            ad.adam_step(dose.params, f * config.dose_lr, config.beta1, config.beta2, config.eps)
            ad.adam_step(recon.params, f * config.lr, config.beta1, config.beta2, config.eps)
            ep_q.extend(quality.data.tolist())
            ep_d.extend(d.data.tolist())

        result.log.append(_log_row(epoch, "train", ep_q, ep_d, config.q))
        val = seed_averaged(evaluate_cases(val_cases, cohort.split.get, "end2end",
                                           lambda im, s: predict_log_dose(dose, im, s).data, recon,
                                           config.val_seeds, config.noise))
        vq = [r.psnr for r in val]
        vd = [math.log(r.n0) for r in val]
        row = _log_row(epoch, "validation", vq, vd, config.q)
        result.log.append(row)
        log.info("epoch %d: val psnr %.3f +- %.3f, mean d %.3f, hinge-active %.2f", *((epoch,) + row[2:]))

        if config.patience:
            score = abs(row[2] - config.q) + config.lam * row[4]
            if score < best_score:
                best_score, best_snap, stale = score, _snapshot(dose, recon), 0
                result.best_epoch = epoch
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                    break
        if on_epoch is not None:
            on_epoch(epoch, result)

    if best_snap is not None:
        _restore(best_snap, dose, recon)
    return result


def train_denoiser(cohort: Cohort, config: TrainConfig, log_dose_fn, recon=None, epochs=None) -> TrainResult:
    """Quality-only training of a reconstruction module under a fixed dose policy.

    Used for the baseline methods: ``log_dose_fn(images, sinograms)`` sets
    the dose of each case and the denoiser maximises summed PSNR.
    """
    config.validate()
    geom = config.geometry
    recon = recon or ReconModule(geom, config.denoiser)
    train_cases = cohort.subset("train")
    if not train_cases:
        raise IngestionError("cohort needs a non-empty train split")
    train_img, train_sino = clean_sinograms(train_cases, geom)
    train_d = np.asarray(log_dose_fn(train_img, train_sino), dtype=np.float64)
    result = TrainResult(None, recon)
    for epoch in range(config.epochs if epochs is None else epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_cases))
        ep_q = []
        for step, sl in enumerate(_batches(len(order), config.batch_size)):
            idx = order[sl]
            eta = np.stack([noise_draw(geom.sino_shape, step_seed(config.seed, epoch, step, int(i)))
                            for i in idx])
            with ad.Tape() as tape:
                noisy = noise_op(ad.Tensor(train_d[idx]), train_sino[idx], eta, config.noise)
                quality = psnr(reconstruct(recon, noisy), train_img[idx])
                loss = ad.reduce_sum(ad.scale(quality, -1.0))
            if not np.isfinite(loss.data):
                err = DivergenceError(f"non-finite loss at epoch {epoch} step {step}")
                err.result = result
                raise err
            ad.backward(tape, loss)
            ad.adam_step(recon.params, _lr_factor(config, epoch) * config.lr, config.beta1, config.beta2,
                         config.eps)
            ep_q.extend(quality.data.tolist())
        result.log.append(_log_row(epoch, "train", ep_q, train_d, config.q))
        log.info("denoiser epoch %d: train psnr %.3f", epoch, float(np.mean(ep_q)))
    return result
