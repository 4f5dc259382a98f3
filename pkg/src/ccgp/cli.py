"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
Report JSON files are deterministic given (config, seed); wall-clock times
go to a separate ``timing_<command>.json`` so reruns can be compared byte for byte.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checks import gibbs_vs_mean_field, run_selftest, tiny_suite
from .config import ConfigError, RunConfig, load_config
from .math_core import logistic_softmax, softmax_temp
from .meta import TrainingFailed, load_checkpoint, train
from .predict import calibration, evaluate, tune_temperature, write_reliability_csv

log = logging.getLogger("ccgp")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class InputError(Exception):
    """Bad input that is not a config validation failure (exit code 2)."""


def _setup_logging():
    level = os.environ.get("CCGP_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise InputError(f"CCGP_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _header(cfg, seed, **extra):
    h = {"tool": "ccgp", "version": __version__, "config_hash": cfg.model_hash(), "seed": seed}
    h.update(extra)
    return h


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_timing(out_dir, command, seconds, cfg, seed):
    doc = _header(cfg, seed, command=command, wall_time_seconds=seconds)
    _write_json(Path(out_dir) / f"timing_{command}.json", doc)


def _out_dir(args, cfg):
    d = Path(args.out) if args.out else Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _config(args):
    return load_config(args.config) if args.config else RunConfig()


def _load_model(args, cfg, out_dir):
    path = Path(args.checkpoint) if args.checkpoint else out_dir / "checkpoint.json"
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    try:
        ck = load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None
    if ck["config_hash"] != cfg.model_hash():
        raise InputError(f"checkpoint {path} was trained with config hash {ck['config_hash']}, "
                         f"this config hashes to {cfg.model_hash()}")
    hyper = ck["hyper"]
    if args.tau is not None:
        hyper = replace(hyper, tau=args.tau)
    return hyper


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    seed = cfg.train.seed if args.seed is None else args.seed
    hyper = cfg.initial_hyper()
    if args.tau is not None:
        hyper = replace(hyper, tau=args.tau)
    tcfg = replace(cfg.train.build(str(out / "checkpoint.json")), seed=seed)
    hyper, tlog = train(cfg.train_generator(), tcfg, hyper, workers=args.workers,
                        config_hash=cfg.model_hash())
    doc = _header(cfg, seed, command="train", tau=hyper.tau)
    doc.update(tlog.to_dict())
    _write_json(out / "train_log.json", doc)
    with open(out / "train_epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "grad_norm", "aborted"])
        for r in tlog.records:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.grad_norm), r.aborted])
    _write_timing(out, "train", time.perf_counter() - t0, cfg, seed)
    print(f"trained {len(tlog.records)} epochs; final loss {tlog.records[-1].mean_loss:.4f}")
    return 0


def cmd_eval(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    hyper = _load_model(args, cfg, out)
    ecfg = cfg.eval if args.seed is None else replace(cfg.eval, seed=args.seed)
    res = evaluate(hyper, cfg.generator, ecfg, workers=args.workers)
    doc = _header(cfg, ecfg.seed, command="eval", tau=hyper.tau,
                  prior_mean_test=hyper.prior_mean_test)
    doc.update({"mean_accuracy": res.mean, "std_accuracy": res.std, "batch_means": res.batch_means,
                "episodes": ecfg.episodes, "batches": ecfg.batches, "aborted": res.aborted})
    _write_json(out / "eval.json", doc)
    with open(out / "eval_episodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "accuracy", "sweeps"])
        for r in res.episodes:
            w.writerow([r.index, repr(r.accuracy), r.sweeps])
    _write_timing(out, "eval", time.perf_counter() - t0, cfg, ecfg.seed)
    print(f"accuracy {res.mean:.4f} +- {res.std:.4f} over {len(res.episodes)} episodes")
    return 0


def cmd_calibrate(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    hyper = _load_model(args, cfg, out)
    cal = cfg.calibrate
    bins = cal.bins if args.bins is None else args.bins
    if bins < 1:
        raise InputError("--bins must be at least 1")
    seed = cfg.eval.seed if args.seed is None else args.seed
    base = replace(cfg.eval, seed=seed, batches=1)
    scores = {}
    if args.tau is None:
        vcfg = replace(base, episodes=cal.validation_episodes)
        tau, scores = tune_temperature(hyper, cfg.generator, vcfg, cal.tau_grid, bins, args.workers)
        hyper = replace(hyper, tau=tau)
    res = evaluate(hyper, cfg.generator, replace(base, episodes=cal.test_episodes), workers=args.workers)
    report = calibration(res.confidences, res.correct, bins)
    doc = _header(cfg, seed, command="calibrate", tau=hyper.tau, bins=bins)
    doc.update({"validation_ece": {repr(k): v for k, v in scores.items()},
                "test_episodes": cal.test_episodes, "accuracy": res.mean, "aborted": res.aborted})
    doc.update(report.to_dict())
    _write_json(out / "calibration.json", doc)
    write_reliability_csv(out / "reliability.csv", report)
    _write_timing(out, "calibrate", time.perf_counter() - t0, cfg, seed)
    print(f"tau {hyper.tau:g}: ECE {report.ece:.4f}, MCE {report.mce:.4f}")
    return 0


def likelihood_surface(tau, shift, lo, hi, points, clamp=-100.0):
    """``p(y=1 | f)`` on an (f1, f2) grid with f3 fixed, for both likelihoods.

    ``shift`` is added to all three logits. Returns rows
    ``(f1, f2, logistic_softmax, softmax)``.
    """
    g = np.linspace(lo, hi, points)
    F1, F2 = np.meshgrid(g, g, indexing="ij")
    F = np.stack([F1, F2, np.full_like(F1, clamp)], axis=-1) + shift
    ls = logistic_softmax(F, tau)[..., 0]
    sm = softmax_temp(F, tau)[..., 0]
    return np.column_stack([F1.ravel(), F2.ravel(), ls.ravel(), sm.ravel()])


def cmd_surface(args):
    cfg = _config(args)
    tau = 1.0 if args.tau is None else args.tau
    if not tau > 0:
        raise InputError("--tau must be positive")
    s = cfg.surface
    rows = likelihood_surface(tau, args.shift, s.lo, s.hi, s.points)
    path = Path(args.out) if args.out else Path(cfg.output_dir) / "surface.csv"
    if path.suffix != ".csv":
        path.mkdir(parents=True, exist_ok=True)
        path = path / "surface.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["f1", "f2", "logistic_softmax", "softmax"])
        for r in rows:
            w.writerow([repr(float(x)) for x in r])
    print(f"wrote {len(rows)} grid points to {path}")
    return 0


def cmd_selftest(args):
    return 0 if run_selftest() else 1


def cmd_gibbs_vs_mf(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    g = cfg.gibbs
    seed = g.seed if args.seed is None else args.seed
    tau = g.tau if args.tau is None else args.tau
    suite = tiny_suite(g.episodes, g.max_points, g.max_classes, tau, seed=g.seed)
    rows = gibbs_vs_mean_field(suite, g.burn_in, g.samples, seed)
    diffs, centred = [], []
    with open(out / "gibbs_vs_mf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "point", "class", "gibbs_mean", "mean_field_mean", "abs_diff", "gibbs_stderr"])
        for e, r in enumerate(rows):
            d = np.abs(r["gibbs"] - r["mean_field"])
            diffs.append(d.ravel())
            c = (r["gibbs"] - r["gibbs"].mean(1, keepdims=True)) - (r["mean_field"] - r["mean_field"].mean(1, keepdims=True))
            centred.append(np.abs(c).ravel())
            for n, c_ in np.ndindex(d.shape):
                w.writerow([e, n, c_, repr(float(r["gibbs"][n, c_])), repr(float(r["mean_field"][n, c_])),
                            repr(float(d[n, c_])), repr(float(r["stderr"][n, c_]))])
    diffs = np.concatenate(diffs)
    centred = np.concatenate(centred)
    doc = _header(cfg, seed, command="gibbs-vs-mf", tau=tau)
    doc.update({"max_abs_diff": float(diffs.max()), "mean_abs_diff": float(diffs.mean()),
                "max_abs_diff_class_centred": float(centred.max()), "tolerance": g.tolerance,
                "episodes": g.episodes, "burn_in": g.burn_in, "samples": g.samples,
                "passed": bool(diffs.max() < g.tolerance)})
    _write_json(out / "gibbs_vs_mf.json", doc)
    _write_timing(out, "gibbs-vs-mf", time.perf_counter() - t0, cfg, seed)
    print(f"max |diff| {diffs.max():.4f} (mean {diffs.mean():.4f}, tolerance {g.tolerance})")
    return 0 if diffs.max() < g.tolerance else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "calibrate": cmd_calibrate,
    "surface": cmd_surface,
    "selftest": cmd_selftest,
    "gibbs-vs-mf": cmd_gibbs_vs_mf,
}


def build_parser():
    p = argparse.ArgumentParser(prog="ccgp", description="Tempered logistic-softmax GP few-shot classifier.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.json)")
        s.add_argument("--tau", type=float, help="override the temperature")
        s.add_argument("--shift", type=float, default=0.0, help="constant added to all logits (surface)")
        s.add_argument("--bins", type=int, help="calibration bins")
        s.add_argument("--workers", type=int, default=1, help="concurrent evaluations")
        s.add_argument("--seed", type=int, help="override the seed")
        s.add_argument("--out", help="output directory (or CSV path for surface)")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        _setup_logging()
        if args.workers < 1:
            raise InputError("--workers must be at least 1")
        return COMMANDS[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingFailed, np.linalg.LinAlgError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
