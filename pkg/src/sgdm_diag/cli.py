"""Command-line entry point: ``sgdm-diag run`` and ``sgdm-diag validate``.

Exit codes: 0 ok, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ENV_PREFIX, PRESETS, ConfigError, ExperimentConfig, load_config
from .core import DivergenceError, RngStream, SgdmError
from .problems import LossModel, find_mnist, load_csv, load_idx, train_test_split

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
log = logging.getLogger("sgdm_diag")


def _exp_id(cfg: ExperimentConfig):
    return (cfg.preset or cfg.kind).replace("/", "_")


def _error_rates(cfg, out, emit):
    if cfg.setting in harness.SETTINGS:
        base = harness.SETTINGS[cfg.setting]
    else:
        base = harness.Setting(cfg.setting or "custom", cfg.problem, cfg.hp, cfg.diag,
                               cfg.criteria or harness.ErrorCriteria(1.0, 0.5), None)
    setting = dataclasses.replace(base, problem=cfg.problem, hp=cfg.hp, diag=cfg.diag)
    if cfg.criteria is None:
        setting = dataclasses.replace(setting, criteria=harness.calibrate_criteria(setting, seed=cfg.seed))
    else:
        setting = dataclasses.replace(setting, criteria=cfg.criteria)
    report = harness.error_rate_experiment(setting, cfg.runs, cfg.seed, cfg.jobs)
    for d in report.details:
        emit(f"run seed={d.seed} stream={d.stream_id}: {d.label} activation={d.activation} K={d.K}")
    rows = [dataclasses.asdict(d) for d in report.details]
    harness.write_experiment(out, _exp_id(cfg), cfg.to_dict() | {"criteria": setting.criteria},
                             report.to_dict(), {"runs": (None, rows)})
    return report.summary()


def _sign_flip(cfg, out, emit):
    betas = cfg.betas or (0.2, 0.8)
    res = harness.sign_flip_experiment(cfg.runs, cfg.seed, betas, cfg.hp.gamma, cfg.hp.batch_size, cfg.hp.epochs,
                                    cfg.jobs)
    rows = []
    for beta, vals in res.items():
        for i, v in enumerate(vals):
            emit(f"run beta={beta} stream={i}: stationary mean inner product {v:.6g}")
            rows.append({"beta": beta, "stream_id": i, "mean_ip": v})
    means = {str(b): float(np.nanmean(v)) for b, v in res.items()}
    harness.write_experiment(out, _exp_id(cfg), cfg.to_dict(), {"mean_stationary_ip": means},
                             {"runs": (None, rows)})
    return "mean stationary inner product: " + ", ".join(f"beta={b}: {m:.4g}" for b, m in means.items())


def _distributions(cfg, out, emit):
    betas = cfg.betas or (0.2, 0.8)
    rows, hist_rows, scatter_rows = [], [], []
    for i in range(cfg.runs):
        _, _, recs = harness.paired_stationary_runs(cfg.seed, i, betas, cfg.hp.gamma, cfg.hp.batch_size,
                                                    cfg.hp.epochs)
        line = []
        shared = harness.common_stationary_window(recs)
        for beta, rec in recs.items():
            st = harness.ip_distribution(rec, "stationary")
            tr = harness.ip_distribution(rec, "transient", min_samples=10)
            b = harness.phase_boundary(rec)
            _, keys = harness.key_iterate_scatter(rec, shared)
            rows.append({"stream_id": i, "beta": beta, "stationary_mean": st.mean, "stationary_var": st.variance,
                         "stationary_skew": st.skewness, "tail_mass": st.tail_mass, "transient_mean": tr.mean,
                         "transient_skew": tr.skewness, "key_iterates": keys, "phase_boundary": b,
                         "shared_window_start": shared[0]})
            if i == 0:
                for lo, hi, c in zip(st.bin_edges[:-1], st.bin_edges[1:], st.counts):
                    hist_rows.append([beta, lo, hi, int(c)])
                scatter_rows += [[beta, g, c] for g, c in st.scatter]
            line.append(f"beta={beta} skew={st.skewness:.3f}")
        emit(f"run stream={i}: " + "  ".join(line))
    skews = {b: [r["stationary_skew"] for r in rows if r["beta"] == b] for b in betas}
    summary = {str(b): float(np.mean(v)) for b, v in skews.items()}
    harness.write_experiment(out, _exp_id(cfg), cfg.to_dict(), {"mean_stationary_skewness": summary},
                             {"runs": (None, rows),
                              "histogram": (["beta", "bin_lo", "bin_hi", "count"], hist_rows),
                              "scatter": (["beta", "grad_norm_sq", "cosine_prev"], scatter_rows)})
    return "mean stationary skewness: " + ", ".join(f"beta={b}: {v:.3f}" for b, v in summary.items())


def _logistic_data(cfg):
    """(train model, test set) for the configured dataset."""
    if cfg.dataset == "synthetic":
        return harness.logistic_task(cfg.seed, cfg.problem.p, cfg.problem.N, cfg.problem.N)
    path = Path(cfg.data)
    if not path.exists():
        raise ConfigError(f"data path {path} does not exist", "--data")
    if cfg.dataset == "mnist":
        files = find_mnist(path)
        if files is None:
            raise ConfigError(f"no MNIST IDX files under {path}", "--data")
        return LossModel("logistic", load_idx(*files["train"])), load_idx(*files["test"])
    csv_path = path if path.is_file() else path / "OnlineNewsPopularity.csv"
    ds = load_csv(csv_path, "shares", "median", drop_columns=("url", "timedelta"))
    train, test = train_test_split(ds, 0.2, RngStream(cfg.seed, 0, (9,)))
    return LossModel("logistic", train), test


def _autolr(cfg, out, emit):
    model, test = _logistic_data(cfg)
    sched = cfg.schedule
    rows = []
    spreads = {}
    for mode in ("auto", "decreasing"):
        cells = harness.robustness_sweep(model, sched["gamma0s"], mode, cfg.seed, test, cfg.hp, sched["rho"],
                                         sched["max_epochs"], sched["gamma_min_factor"], cfg.diag, cfg.hp.epochs,
                                         cfg.jobs)
        for c in cells:
            emit(f"run mode={mode} gamma0={c['gamma0']}: accuracy={c['accuracy']:.4f}"
                 + (" (diverged)" if c["diverged"] else ""))
            rows.append({k: v for k, v in c.items() if k != "stages"} | {"stages": len(c["stages"] or [])})
        spreads[mode] = harness.spread(cells)
    beta_rows = []
    for beta in cfg.betas:
        bf = cfg.hp.beta_final if cfg.hp.beta_final < beta else 0.0
        hp = dataclasses.replace(cfg.hp, beta=beta, beta_final=bf)
        cell = harness.robustness_sweep(model, sched["gamma0s"][:1], "auto", cfg.seed, test, hp, sched["rho"],
                                        sched["max_epochs"], sched["gamma_min_factor"], cfg.diag)[0]
        emit(f"run mode=auto beta={beta} gamma0={cell['gamma0']}: accuracy={cell['accuracy']:.4f}")
        beta_rows.append({"beta": beta, "accuracy": cell["accuracy"], "diverged": cell["diverged"]})
    harness.write_experiment(out, _exp_id(cfg), cfg.to_dict(), {"spread": spreads, "cells": rows,
                                                                "momentum_sweep": beta_rows},
                             {"accuracy": (None, rows), "momentum_sweep": (None, beta_rows)})
    return f"accuracy spread over gamma0: auto {spreads['auto']:.4f}, decreasing {spreads['decreasing']:.4f}"


def _ablation(cfg, out, emit):
    model, _ = _logistic_data(cfg)
    betas = cfg.betas or (0.2, 0.4, 0.6, 0.8)
    result = {}
    trace_rows = []
    for reduction in (False, True):
        traces, slopes = harness.statistic_trace_ablation(betas, reduction, model, cfg.seed, cfg.hp.gamma,
                                                          cfg.hp.batch_size, cfg.hp.epochs,
                                                          beta_final=cfg.diag.beta_final or 0.0,
                                                          tau=cfg.diag.threshold_T or 0.5)
        key = "reduction" if reduction else "no_reduction"
        result[key] = {str(b): s for b, s in slopes.items()}
        for b, tr in traces.items():
            trace_rows += [[key, b, i + 1, v] for i, v in enumerate(tr)]
        emit(f"{key}: slopes " + ", ".join(f"beta={b}: {s:.3g}" for b, s in slopes.items()))
    harness.write_experiment(out, _exp_id(cfg), cfg.to_dict(), {"slopes": result},
                             {"traces": (["mode", "beta", "iteration", "statistic"], trace_rows)})
    s = [result["no_reduction"][str(b)] for b in betas]
    mono = all(b >= a for a, b in zip(s, s[1:]))
    return f"late-phase slope nondecreasing in beta without reduction: {mono}"


def _theory(cfg, out, emit):
    checks = harness.theory_checks(cfg.seed, cfg.mc_samples, cfg.runs)
    for c in checks:
        emit(f"check {c['name']}: {'pass' if c['pass'] else 'FAIL'} empirical={c['empirical']:.6g} "
             f"reference={c['bound']:.6g}")
    harness.write_experiment(out, _exp_id(cfg), cfg.to_dict(), {"checks": checks},
                             {"checks": (None, [{k: v for k, v in c.items() if not isinstance(v, dict)}
                                                for c in checks])})
    passed = sum(c["pass"] for c in checks)
    return f"theory checks passed: {passed}/{len(checks)}"


RUNNERS = {"error_rates": _error_rates, "table1": _sign_flip, "distributions": _distributions, "autolr": _autolr,
           "ablation": _ablation, "theory": _theory}


def run_experiment(cfg: ExperimentConfig, out=None, emit=print):
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return RUNNERS[cfg.kind](cfg, out, emit)


def _parser():
    ap = argparse.ArgumentParser(prog="sgdm-diag", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run an experiment"), ("validate", "check a config and print it resolved")):
        p = sub.add_parser(name, help=helptext,
                           epilog=f"Environment overrides: {ENV_PREFIX}PRESET, {ENV_PREFIX}SEED, {ENV_PREFIX}RUNS, "
                                  f"{ENV_PREFIX}JOBS, {ENV_PREFIX}OUT, {ENV_PREFIX}DATA. Flags win over those.")
        p.add_argument("--preset", choices=PRESETS)
        p.add_argument("--config", type=Path, help="INI file with [experiment], [hyper], ... sections")
        p.add_argument("--seed", type=int)
        p.add_argument("--runs", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--out", type=str)
        p.add_argument("--data", type=str, help="dataset directory (MNIST IDX files) or CSV file")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _resolve(args):
    text = None
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config: {err}", "--config") from None
    if text is None and args.preset is None and not os.environ.get(ENV_PREFIX + "PRESET"):
        raise ConfigError("give --preset or --config", "--preset")
    overrides = {"preset": args.preset, "seed": args.seed, "runs": args.runs, "jobs": args.jobs,
                 "out": args.out, "data": args.data}
    preset = args.preset or os.environ.get(ENV_PREFIX + "PRESET")
    if args.data is not None and preset in ("fig4-6-autolr", "fig7-9-ablation"):
        overrides["dataset"] = "mnist"
    return load_config(config_text=text, overrides=overrides, source=str(args.config or "<preset>"))


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
    except ConfigError as err:
        print(f"config error [{err.field}]: {err}" if err.field else f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        sys.stdout.write(cfg.to_ini())
        return EXIT_OK
    try:
        summary = run_experiment(cfg)
    except ConfigError as err:
        print(f"config error [{err.field}]: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"runtime failure: divergence at iteration {err.iteration}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SgdmError, OSError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
