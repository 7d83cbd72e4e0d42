"""``ctdose`` command line: gen-data, train, eval, compare, search-dose.

Every command reads a JSON experiment config (``--config``), applies the
``--seed``/``--out`` overrides and writes the resolved config as
``config.json`` into the output directory.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
CHECKPOINT = "end2end.ckpt"
TRAIN_LOG = "train_log.csv"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("ctdose")


def _limit_threads(n):
    # only effective if the BLAS has not been loaded yet in this process
    for var in THREAD_VARS:
        os.environ[var] = str(n)


# --- helpers shared by the commands ----------------------------------------

def _out(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    from . import config as C
    C.save(cfg, out / "config.json")
    return out


def load_cohort(cfg):
    from .phantom import generate_cohort, load_images
    c = cfg.cohort
    if c.manifest:
        return load_images(c.manifest)
    return generate_cohort(c.n_cases, c.size_range, c.grid_size, c.seed, c.ellipse_count, c.intensity_range,
                           c.body_intensity, c.edge_sigma)


def _load_end2end(cfg):
    from .errors import IngestionError
    from .models import load_modules
    path = Path(cfg.out) / CHECKPOINT
    if not path.is_file():
        raise IngestionError(f"missing checkpoint {path}; run `ctdose train` first")
    dose, recon, _ = load_modules(path)
    if dose is None:
        raise IngestionError(f"{path} holds no dose module")
    return dose, recon


def _make_policy(method, value, mode):
    from .baselines import fixed_dose, tcm_policy
    return fixed_dose(value) if method == "fixed" else tcm_policy(value, mode)


def baseline(cfg, method, cohort, target):
    """Policy parameter and reconstruction module for a baseline method.

    The parameter is tuned on the validation split to ``target`` mean PSNR
    unless fixed in the config.  With ``baseline_epochs > 0`` a denoiser is
    trained under the policy and the parameter re-tuned with it.  Results
    are cached as ``baseline-<method>.ckpt`` in the output directory.
    """
    from .baselines import tune_to_mean_psnr
    from .models import ReconModule, load_modules, save_modules
    from .training import train_denoiser

    pc = cfg.policy
    path = Path(cfg.out) / f"baseline-{method}.ckpt"
    if path.is_file():
        _, recon, meta = load_modules(path)
        return float(meta["policy.value"]), recon
    given = pc.fixed_n0 if method == "fixed" else pc.tcm_reference
    lo, hi = (1e1, 1e8) if method == "fixed" else (1e-2, 1e5)
    val = cohort.subset("validation")
    recon = ReconModule(cfg.train.geometry, cfg.train.denoiser)

    def tune(r):
        if given is not None:
            return given
        return tune_to_mean_psnr(lambda v: _make_policy(method, v, pc.tcm_mode), val, r, target, lo, hi,
                                 noise=cfg.train.noise)

    value = tune(recon)
    if pc.baseline_epochs > 0:
        log.info("%s: training denoiser at parameter %.4g", method, value)
        pol = _make_policy(method, value, pc.tcm_mode)
        train_denoiser(cohort, cfg.train, pol.log_dose, recon, epochs=pc.baseline_epochs)
        value = tune(recon)
    log.info("%s: parameter %.4g", method, value)
    save_modules(path, None, recon, {"policy.method": method, "policy.value": repr(float(value))})
    return value, recon


def _policies(cfg, cohort):
    """``{method: (policy, recon)}`` for every configured method."""
    from .baselines import end2end_policy
    from .training import evaluate

    out = {}
    target = cfg.train.q
    pc = cfg.policy
    untuned = (("fixed" in pc.methods and pc.fixed_n0 is None)
               or ("tcm" in pc.methods and pc.tcm_reference is None))
    if "end2end" in pc.methods or untuned:
        dose, recon = _load_end2end(cfg)
        out["end2end"] = (end2end_policy(dose), recon)
        recs = evaluate(dose, recon, cohort, "validation", 2, cfg.train.noise)
        target = sum(r.psnr for r in recs) / len(recs)
        log.info("end2end validation mean PSNR %.3f dB (tuning target)", target)
    for method in ("fixed", "tcm"):
        if method in cfg.policy.methods:
            value, recon = baseline(cfg, method, cohort, target)
            out[method] = (_make_policy(method, value, cfg.policy.tcm_mode), recon)
    return {m: out[m] for m in cfg.policy.methods}


def oracle_records(cfg, cohort, policies):
    """Brute-force minimal dose per case under each method's reconstruction."""
    from .baselines import SearchConfig, brute_force_min_dose, mean_psnr_at, oracle_seeds
    from .errors import UnreachableTargetError
    from .projector import forward_project
    from .training import CaseRecord

    pc = cfg.policy
    search = SearchConfig(lower=pc.search_lower, upper=pc.search_upper, n_seeds=pc.oracle_seeds,
                          tolerance=pc.oracle_tolerance)
    cases = cohort.subset(pc.eval_split)[:pc.oracle_cases]
    records = []
    for method, (_, recon) in policies.items():
        for cid, img in cases:
            seeds = oracle_seeds(cid, pc.oracle_seeds)
            try:
                n0 = brute_force_min_dose(img, recon, cfg.train.q, seeds, pc.oracle_tolerance, search,
                                          cfg.train.noise)
                q = mean_psnr_at(img, forward_project(img, recon.geom), recon, n0, seeds, cfg.train.noise)
            except UnreachableTargetError as exc:
                log.warning("oracle-%s %s: %s", method, cid, exc)
                n0, q = float("inf"), exc.achieved
            records.append(CaseRecord(cid, f"oracle-{method}", n0, q, pc.eval_split, -1))
        log.info("oracle-%s done on %d cases", method, len(cases))
    return records


SUMMARY_COLUMNS = ("method", "n_cases", "psnr_mean", "psnr_std", "n0_median", "n0_q1", "n0_q3",
                   "within_half_db")


def summarize(records, q):
    """Per-method statistics over seed-averaged records."""
    import numpy as np

    from .training import seed_averaged

    rows = []
    per_case = seed_averaged(records)
    for method in dict.fromkeys(r.method for r in per_case):
        rs = [r for r in per_case if r.method == method]
        p = np.array([r.psnr for r in rs])
        n0 = np.array([r.n0 for r in rs])
        q1, med, q3 = np.percentile(n0, [25, 50, 75])
        rows.append((method, len(rs), float(p.mean()), float(p.std()), float(med), float(q1), float(q3),
                     float(np.mean(np.abs(p - q) <= 0.5))))
    return rows


def write_summary(path, rows):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])
    return path


def read_summary(path):
    import csv
    from .errors import ParameterError
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != SUMMARY_COLUMNS:
        raise ParameterError(f"{path}: header must be {','.join(SUMMARY_COLUMNS)}")
    return {r[0]: dict(zip(SUMMARY_COLUMNS[1:], [int(r[1])] + [float(v) for v in r[2:]])) for r in rows[1:]}


# --- commands -----------------------------------------------------------------

def cmd_gen_data(cfg):
    from .phantom import save_cohort
    out = _out(cfg)
    manifest = save_cohort(load_cohort(cfg), out / "data")
    log.info("wrote %s", manifest)
    return manifest


def cmd_train(cfg, resume=False):
    from .errors import DivergenceError
    from .models import load_modules, save_modules
    from .training import read_log, train, write_log

    out = _out(cfg)
    ckpt, log_path = out / CHECKPOINT, out / TRAIN_LOG
    cohort = load_cohort(cfg)
    dose = recon = None
    start, rows, elapsed = 0, [], 0.0
    if resume and ckpt.is_file():
        dose, recon, saved = load_modules(ckpt)
        start = int(saved.get("epoch", -1)) + 1
        elapsed = float(saved.get("wall_seconds", 0.0))
        rows = read_log(log_path) if log_path.is_file() else []
        log.info("resuming at epoch %d", start)

    started = time.perf_counter()

    def meta(epoch):
        return {"epoch": epoch, "wall_seconds": f"{elapsed + time.perf_counter() - started:.1f}"}

    def on_epoch(epoch, result):
        save_modules(ckpt, result.dose, result.recon, meta(epoch))
        write_log(log_path, result.log)

    try:
        result = train(cohort, cfg.train, dose, recon, start, rows, on_epoch)
    except DivergenceError as exc:
        if getattr(exc, "result", None) is not None:
            write_log(log_path, exc.result.log)
        raise
    last = result.log[-1][0] if result.log else start - 1
    save_modules(ckpt, result.dose, result.recon, meta(last))
    write_log(log_path, result.log)
    return result


def cmd_eval(cfg):
    from .training import evaluate, write_records
    out = _out(cfg)
    cohort = load_cohort(cfg)
    dose, recon = _load_end2end(cfg)
    records = evaluate(dose, recon, cohort, cfg.policy.eval_split, cfg.policy.eval_seeds, cfg.train.noise)
    write_records(out / "eval_records.csv", records)
    write_summary(out / "eval_summary.csv", summarize(records, cfg.train.q))
    return records


def cmd_compare(cfg):
    from .training import evaluate_cases, write_records
    out = _out(cfg)
    cohort = load_cohort(cfg)
    policies = _policies(cfg, cohort)
    cases = cohort.subset(cfg.policy.eval_split)
    records = []
    for method, (pol, recon) in policies.items():
        records += evaluate_cases(cases, cohort.split.get, method, pol.log_dose, recon, cfg.policy.eval_seeds,
                                  cfg.train.noise)
    if cfg.policy.oracle:
        records += oracle_records(cfg, cohort, policies)
    write_records(out / "compare_records.csv", records)
    rows = summarize(records, cfg.train.q)
    write_summary(out / "compare_summary.csv", rows)
    for row in rows:
        log.info("%-15s psnr %.3f +- %.3f  n0 median %.4g", row[0], row[2], row[3], row[4])
    return records


def cmd_search_dose(cfg):
    from .training import write_records
    out = _out(cfg)
    cohort = load_cohort(cfg)
    records = oracle_records(cfg, cohort, _policies(cfg, cohort))
    write_records(out / "oracle_records.csv", records)
    write_summary(out / "oracle_summary.csv", summarize(records, cfg.train.q))
    return records


# --- entry point --------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="ctdose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval", "compare", "search-dose"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override the cohort seed (gen-data) or training seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads; 1 is bit-reproducible")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    sub.add_parser("default-config", help="print the default config")
    return parser


def resolve_config(args):
    from . import config as C
    cfg = C.load(args.config) if getattr(args, "config", None) else C.ExperimentConfig()
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out=args.out)
    if getattr(args, "seed", None) is not None:
        if args.command == "gen-data":
            cfg = dataclasses.replace(cfg, cohort=dataclasses.replace(cfg.cohort, seed=args.seed))
        else:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    _limit_threads(getattr(args, "threads", 1))
    if getattr(args, "threads", 1) < 1:
        print("ctdose: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from . import config as C
    from .errors import DivergenceError, IngestionError, ParameterError

    try:
        if args.command == "default-config":
            sys.stdout.write(C.dumps(C.ExperimentConfig()))
            return EXIT_OK
        cfg = resolve_config(args)
        if args.command == "train":
            cmd_train(cfg, resume=args.resume)
        else:
            {"gen-data": cmd_gen_data, "eval": cmd_eval, "compare": cmd_compare,
             "search-dose": cmd_search_dose}[args.command](cfg)
    except DivergenceError as exc:
        print(f"ctdose: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (IngestionError, OSError) as exc:
        print(f"ctdose: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ParameterError as exc:
        print(f"ctdose: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
