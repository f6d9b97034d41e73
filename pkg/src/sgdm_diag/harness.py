"""Experiments: error rates, inner-product distributions, statistic ablations, robustness sweeps."""
from __future__ import annotations

import csv
import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import skew

from .core import (DivergenceError, HyperParams, InsufficientData, InvalidArgument, RngStream,
                   UnsupportedError, write_json)
from .diagnostic import DiagnosticConfig, run_with_diagnostic
from .problems import (LossModel, accuracy, empirical_optimum, gen_logistic, gen_phase_retrieval,
                       gen_quadratic)
from .schedule import ScheduleConfig, auto_lr, decreasing_lr_baseline
from .theory import _ls_slope

# ---------------------------------------------------------------- setup types


@dataclass(frozen=True)
class ErrorCriteria:
    eta: float
    kappa: float
    reference_run_epochs: int = 20

    def __post_init__(self):
        if not self.eta > 0:
            raise InvalidArgument(f"ErrorCriteria: eta must be > 0, got {self.eta}")
        if not 0 < self.kappa < 1:
            raise InvalidArgument(f"ErrorCriteria: kappa must lie in (0, 1), got {self.kappa}")


@dataclass(frozen=True)
class ProblemSpec:
    kind: str = "quadratic"
    p: int = 20
    N: int = 1000
    noise_sd: float = 1.0

    def build(self, rng: RngStream):
        if self.kind == "quadratic":
            ds = gen_quadratic(self.p, self.N, self.noise_sd, rng)
        elif self.kind == "phase_retrieval":
            ds = gen_phase_retrieval(self.p, self.N, rng, noise_sd=self.noise_sd)
        elif self.kind == "logistic":
            ds = gen_logistic(self.p, self.N, rng)
        else:
            raise InvalidArgument(f"unknown problem kind {self.kind!r}")
        return LossModel(self.kind, ds)


@dataclass(frozen=True)
class Setting:
    name: str
    problem: ProblemSpec
    hp: HyperParams
    diag: DiagnosticConfig
    criteria: ErrorCriteria
    target_pct: tuple | None = None  # (type I, type II, good)


def _setting(name, kind, beta, beta_final, eta, kappa, tau, burnin, target, noise_sd=1.0):
    return Setting(
        name,
        ProblemSpec(kind, 20, 1000, noise_sd),
        HyperParams(gamma=1e-2, beta=beta, beta_final=beta_final, batch_size=20, epochs=20),
        DiagnosticConfig(threshold_T=tau, burnin=burnin, heuristic_kind="iterate_distance"),
        ErrorCriteria(eta, kappa, 20),
        target,
    )


# Problem sizes, criteria and target rates are the reference values. The switch threshold,
# burn-in and final momentum are local choices made from diagnostic traces.
SETTINGS = {
    "Q-Low": _setting("Q-Low", "quadratic", 0.2, 0.0, 1e-3, 0.65, 0.4, 200, (1, 22, 77)),
    "Q-High": _setting("Q-High", "quadratic", 0.8, 0.2, 2e-3, 0.30, 0.5, 50, (0, 17, 83)),
    "PR-Low": _setting("PR-Low", "phase_retrieval", 0.2, 0.0, 1e-2, 0.6, 0.5, 50, (1, 17, 82)),
    "PR-High": _setting("PR-High", "phase_retrieval", 0.8, 0.2, 1e-2, 0.65, 0.5, 50, (0, 16, 84)),
}

# ------------------------------------------------------------ classification


@dataclass
class RunClassification:
    label: str  # type1, type2, good, no_activation, gated, diverged
    activation: int | None = None
    dist_sq: float | None = None
    K: float | None = None
    seed: int | None = None
    stream_id: int | None = None


def classify_run(record, theta_star, crit: ErrorCriteria):
    """Label a finished run as type1, type2, good or no_activation.

    At activation n: type1 if ||theta_n - theta_star||^2 > eta. Otherwise k is the
    largest index <= n with ||theta_k - theta_n||^2 >= eta (0 if none) and
    K = (n - k) / n. The run is type2 if K > kappa and good otherwise.
    """
    if theta_star is None:
        raise UnsupportedError("classification needs a known optimum")
    n = record.diagnostic_activation_at
    if n is None:
        return RunClassification("no_activation")
    th = record.thetas
    ref = np.asarray(theta_star)
    d_star = float(np.sum((th[n] - ref) ** 2))
    if d_star > crit.eta:
        return RunClassification("type1", n, d_star, None)
    d_n = np.sum((th[: n + 1] - th[n]) ** 2, axis=1)
    hits = np.flatnonzero(d_n >= crit.eta)
    k = int(hits[-1]) if hits.size else 0
    K = (n - k) / n
    return RunClassification("type2" if K > crit.kappa else "good", n, d_star, K)


def good_minimum_gate(theta_end, theta_star, eta):
    """Phase retrieval: keep a run iff it ends within 10 eta of theta_star or -theta_star.

    Returns the sign-matched reference, or None if the run is rejected.
    """
    dp = float(np.sum((theta_end - theta_star) ** 2))
    dm = float(np.sum((theta_end + theta_star) ** 2))
    if min(dp, dm) > 10 * eta:
        return None
    return np.asarray(theta_star) if dp <= dm else -np.asarray(theta_star)


@dataclass
class ErrorRateReport:
    setting: str
    runs: int
    type1_pct: float
    type2_pct: float
    good_pct: float
    no_activation_count: int
    gated_count: int
    diverged_count: int
    details: list = field(default_factory=list)
    target_pct: tuple | None = None

    @property
    def activated(self):
        return sum(1 for d in self.details if d.label in ("type1", "type2", "good"))

    def summary(self):
        return (f"{self.setting}: type I {self.type1_pct:.0f}%  type II {self.type2_pct:.0f}%  "
                f"good {self.good_pct:.0f}%  (activated {self.activated}/{self.runs}, "
                f"no activation {self.no_activation_count}, gated {self.gated_count}, "
                f"diverged {self.diverged_count})")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["activated"] = self.activated
        return d


def _resolve_setting(setting):
    if isinstance(setting, Setting):
        return setting
    if setting in SETTINGS:
        return SETTINGS[setting]
    raise InvalidArgument(f"unknown setting {setting!r}; expected one of {sorted(SETTINGS)} or a Setting")


def _error_run(args):
    setting, seed, i = args
    rng = RngStream(seed, i)
    model = setting.problem.build(rng.child(0))
    ref = empirical_optimum(model)
    try:
        _, rec = run_with_diagnostic(model, setting.hp, setting.diag, rng, setting.hp.epochs, reference=ref)
    except DivergenceError:
        return RunClassification("diverged", seed=seed, stream_id=i)
    if setting.problem.kind == "phase_retrieval":
        ref = good_minimum_gate(rec.thetas[-1], ref, setting.criteria.eta)
        if ref is None:
            return RunClassification("gated", seed=seed, stream_id=i)
    out = classify_run(rec, ref, setting.criteria)
    out.seed, out.stream_id = seed, i
    return out


def parallel_map(fn, items, jobs=1):
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def aggregate(name, details, target_pct=None):
    counts = {k: sum(1 for d in details if d.label == k)
              for k in ("type1", "type2", "good", "no_activation", "gated", "diverged")}
    act = counts["type1"] + counts["type2"] + counts["good"]
    pct = (lambda c: 100.0 * c / act) if act else (lambda c: 0.0)
    return ErrorRateReport(name, len(details), pct(counts["type1"]), pct(counts["type2"]), pct(counts["good"]),
                           counts["no_activation"], counts["gated"], counts["diverged"], list(details), target_pct)


def error_rate_experiment(setting, runs=100, seed=0, jobs=1):
    """Seeded independent runs of the diagnostic, classified and aggregated.

    Run ``i`` uses stream (seed, i): child 0 builds the data, the stream samples
    minibatches. Classification is against the minimizer of each run's
    finite-sum objective.
    """
    if runs < 1:
        raise InvalidArgument("runs must be >= 1")
    s = _resolve_setting(setting)
    details = parallel_map(_error_run, [(s, seed, i) for i in range(runs)], jobs)
    return aggregate(s.name, details, s.target_pct)


def calibrate_criteria(setting: Setting, runs=10, seed=0, quantile=95):
    """eta and kappa for a custom setting: percentiles of stationary error and of lateness.

    The switch is disabled for the calibration runs, so they show the stationary
    error of the chosen momentum. kappa falls back to 0.65 if no run activates
    under the calibrated eta.
    """
    off = dataclasses.replace(setting.diag, threshold_T=0.0)
    errs = []
    for i in range(runs):
        rng = RngStream(seed, i)
        model = setting.problem.build(rng.child(0))
        ref = empirical_optimum(model) if model.kind != "logistic" else None
        _, rec = run_with_diagnostic(model, setting.hp, off, rng, setting.hp.epochs, reference=ref)
        d = rec.dist_to_optimum_sq
        errs.append(d[len(d) // 2:])
    eta = float(np.percentile(np.concatenate(errs), quantile))
    trial = dataclasses.replace(setting, criteria=ErrorCriteria(eta, 0.65, setting.hp.epochs))
    Ks = [d.K for d in error_rate_experiment(trial, runs, seed + 1).details if d.K is not None]
    kappa = float(np.clip(np.percentile(Ks, quantile), 1e-3, 1 - 1e-3)) if Ks else 0.65
    return ErrorCriteria(eta, kappa, setting.hp.epochs)

# ------------------------------------------------------- statistics of traces


def phase_boundary(record, rule="slope", eta=None, window=50):
    """Row index where the stationary phase starts.

    ``slope``: the first row whose trailing ``window`` rows of ||theta - theta*||^2
    have a least-squares slope within 2 standard errors of zero.
    ``eta``: the first row with ||theta - theta*||^2 <= eta.
    """
    d = record.dist_to_optimum_sq
    if not np.all(np.isfinite(d)):
        raise UnsupportedError("phase split needs distances to a known optimum")
    if rule == "eta":
        if eta is None:
            raise InvalidArgument("the eta rule needs eta")
        hits = np.flatnonzero(d <= eta)
        return int(hits[0]) if hits.size else len(d)
    if rule != "slope":
        raise InvalidArgument(f"unknown split rule {rule!r}")
    if len(d) < window:
        return len(d)
    win = np.lib.stride_tricks.sliding_window_view(d, window)
    x = np.arange(window, dtype=np.float64) - (window - 1) / 2
    sxx = float(x @ x)
    ym = win.mean(axis=1)
    slope = (win - ym[:, None]) @ x / sxx
    resid = win - ym[:, None] - slope[:, None] * x
    se = np.sqrt(np.einsum("ij,ij->i", resid, resid) / (window - 2) / sxx)
    ok = np.flatnonzero(np.abs(slope) <= 2 * se)
    return int(ok[0] + window - 1) if ok.size else len(d)


@dataclass
class DistributionStats:
    mean: float
    variance: float
    skewness: float
    bin_edges: np.ndarray
    counts: np.ndarray
    tail_mass: float
    scatter: np.ndarray  # columns grad_norm_sq, cosine_prev
    n_samples: int

    def to_dict(self):
        return {"mean": self.mean, "variance": self.variance, "skewness": self.skewness,
                "tail_mass": self.tail_mass, "n_samples": self.n_samples}


def ip_distribution(record, phase="stationary", split_rule="slope", eta=None, bins=50, window=50,
                    min_samples=100):
    b = phase_boundary(record, split_rule, eta, window)
    sl = slice(b, len(record)) if phase == "stationary" else slice(0, b)
    if phase not in ("stationary", "transient"):
        raise InvalidArgument(f"unknown phase {phase!r}")
    ip = record.inner_product[sl]
    cos = record.cosine_prev[sl]
    gsq = record.grad_norm_sq[sl]
    ok = np.isfinite(ip)
    ip, cos, gsq = ip[ok], cos[ok], gsq[ok]
    if ip.size < min_samples:
        raise InsufficientData(f"{phase} phase has {ip.size} inner products, need {min_samples}")
    counts, edges = np.histogram(ip, bins=bins)
    mean, sd = float(ip.mean()), float(ip.std(ddof=1))
    return DistributionStats(mean, sd * sd, float(skew(ip)), edges, counts,
                             float(np.mean(ip < mean - 3 * sd)), np.column_stack([gsq, cos]), int(ip.size))


def key_iterate_scatter(record, window):
    """(norm^2, cosine) pairs in rows [start, stop) and the count of large, negatively aligned pairs."""
    start, stop = window
    if stop - start < 100:
        raise InsufficientData("key-iterate scatter needs a window of at least 100 rows")
    gsq = record.grad_norm_sq[start:stop]
    cos = record.cosine_prev[start:stop]
    ok = np.isfinite(cos)
    gsq, cos = gsq[ok], cos[ok]
    cut = np.percentile(gsq, 95)
    count = int(np.sum((cos < 0) & (gsq > cut)))
    return np.column_stack([gsq, cos]), count


def common_stationary_window(records, rule="slope", eta=None, window=50):
    """Rows that every record in ``records`` labels stationary, for paired comparisons.

    Counts over a shared window are comparable; per-record windows differ in length.
    """
    recs = list(records.values()) if isinstance(records, dict) else list(records)
    start = max(phase_boundary(r, rule, eta, window) for r in recs)
    return start, min(len(r) for r in recs)


def sign_flip_experiment(runs=25, seed=0, betas=(0.2, 0.8), gamma=1e-2, batch_size=25, epochs=50, jobs=1):
    """Stationary mean inner product per run without momentum reduction."""
    out = {}
    for beta in betas:
        hp = HyperParams(gamma=gamma, beta=beta, beta_final=0.0, batch_size=batch_size, epochs=epochs)
        args = [(hp, seed, i) for i in range(runs)]
        out[beta] = parallel_map(_sign_flip_run, args, jobs)
    return out


NO_SWITCH = DiagnosticConfig(threshold_T=0.0)


def _sign_flip_run(args):
    hp, seed, i = args
    rng = RngStream(seed, i)
    model = ProblemSpec("quadratic", 20, 1000, 1.0).build(rng.child(0))
    ref = empirical_optimum(model)
    _, rec = run_with_diagnostic(model, hp, NO_SWITCH, rng, hp.epochs, reference=ref, keep_iterates=False)
    b = phase_boundary(rec, "slope")
    ip = rec.inner_product[b:]
    ip = ip[np.isfinite(ip)]
    return float(ip.mean()) if ip.size else math.nan


def paired_stationary_runs(seed, i, betas=(0.2, 0.8), gamma=1e-2, batch_size=20, epochs=50,
                           keep_iterates=False):
    """Runs with identical data and batch order for each beta, switch disabled."""
    rng = RngStream(seed, i)
    model = ProblemSpec("quadratic", 20, 1000, 1.0).build(rng.child(0))
    ref = empirical_optimum(model)
    recs = {}
    for beta in betas:
        hp = HyperParams(gamma=gamma, beta=beta, beta_final=0.0, batch_size=batch_size, epochs=epochs)
        _, recs[beta] = run_with_diagnostic(model, hp, NO_SWITCH, RngStream(seed, i), epochs,
                                            reference=ref, keep_iterates=keep_iterates)
    return model, ref, recs


def statistic_trace_ablation(betas, momentum_reduction, model, seed=0, gamma=1e-2, batch_size=20, epochs=20,
                             beta_final=0.0, tau=0.5, late_fraction=0.5):
    """Per-beta test-statistic traces on identical data and batch order, with late-phase slopes.

    Without reduction the switch never fires. The trace is then the running sum of
    inner products after one epoch of burn-in. With reduction the diagnostic's S
    is used and the run is not stopped at activation. Slopes are least-squares
    fits over the final ``late_fraction`` of the trace.
    """
    traces, slopes = {}, {}
    for beta in betas:
        if not 0 <= beta < 1:
            raise InvalidArgument(f"beta must lie in [0, 1), got {beta}")
        bf = beta_final if (momentum_reduction and beta > beta_final) else 0.0
        hp = HyperParams(gamma=gamma, beta=beta, beta_final=bf if beta > 0 else 0.0,
                         batch_size=batch_size, epochs=epochs)
        cfg = DiagnosticConfig(threshold_T=tau) if momentum_reduction else NO_SWITCH
        _, rec = run_with_diagnostic(model, hp, cfg, RngStream(seed, 0), epochs, stop_on_activation=False,
                                     keep_iterates=False)
        if momentum_reduction:
            trace = rec.statistic_S
        else:
            ip = np.nan_to_num(rec.inner_product, nan=0.0)
            burn = math.ceil(model.N / batch_size)
            ip[:burn] = 0.0
            trace = np.cumsum(ip)
        traces[beta] = trace
        start = int(len(trace) * (1 - late_fraction))
        y = trace[start:]
        slopes[beta] = _ls_slope(np.arange(y.size, dtype=np.float64), y)[0]
    return traces, slopes


def logistic_task(seed=0, p=20, n_train=5000, n_test=5000):
    """Synthetic stand-in for the image task: shared theta_star, disjoint train and test draws."""
    rng = RngStream(seed, 0)
    train = gen_logistic(p, n_train, rng.child(0))
    test = gen_logistic(p, n_test, rng.child(1), theta_star=train.optimum)
    return LossModel("logistic", train), test


def robustness_sweep(model, gamma0s, mode, seed, eval_set, hp: HyperParams, rho=0.1, stage_epochs=5,
                     gamma_min_factor=1e-3, diag=None, epochs=None, jobs=1):
    """Final test accuracy per gamma0 for the automatic schedule or the gamma0/n baseline."""
    if mode not in ("auto", "decreasing"):
        raise InvalidArgument(f"mode must be 'auto' or 'decreasing', got {mode!r}")
    args = [(model, g0, mode, seed, eval_set, hp, rho, stage_epochs, gamma_min_factor, diag, epochs)
            for g0 in gamma0s]
    return parallel_map(_robust_cell, args, jobs)


def _robust_cell(args):
    model, g0, mode, seed, eval_set, hp, rho, stage_epochs, gmf, diag, epochs = args
    rng = RngStream(seed, 0)
    cell = {"gamma0": g0, "mode": mode, "accuracy": math.nan, "diverged": False, "stages": None,
            "iterations": None}
    try:
        if mode == "auto":
            cfg = ScheduleConfig(gamma0=g0, gamma_min=g0 * gmf, rho=rho, max_epochs=stage_epochs,
                                 diag=diag or DiagnosticConfig(threshold_T=0.5),
                                 hp=dataclasses.replace(hp, gamma=g0))
            trace = auto_lr(model, cfg, rng, keep_iterates=False)
            theta = trace.theta
            cell["stages"] = [dataclasses.asdict(s) for s in trace.stages]
            cell["iterations"] = len(trace.record)
        else:
            n_ep = epochs if epochs is not None else hp.epochs
            rec, theta = decreasing_lr_baseline(model, g0, hp, n_ep, rng)
            cell["iterations"] = len(rec)
        cell["accuracy"] = accuracy(eval_set, theta)
    except DivergenceError:
        cell["diverged"] = True
    return cell


def spread(cells):
    acc = [c["accuracy"] for c in cells if not c["diverged"]]
    if len(acc) < len(cells):
        return math.inf
    return max(acc) - min(acc)

# --------------------------------------------------------------- persistence


def write_rows(path, rows, header=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    with path.open("w", newline="") as fh:
        if rows and isinstance(rows[0], dict):
            header = header or list(rows[0])
            w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
        else:
            w = csv.writer(fh)
            if header:
                w.writerow(header)
            w.writerows(rows)
    return path


def write_experiment(out_dir, exp_id, config, report, tables=None):
    """config echo, aggregate report and plot-ready CSVs, all prefixed by ``exp_id``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_json(out / f"{exp_id}_config.json", config),
             write_json(out / f"{exp_id}_report.json", report)]
    for name, (header, rows) in (tables or {}).items():
        paths.append(write_rows(out / f"{exp_id}_{name}.csv", rows, header))
    return paths

# ------------------------------------------------------------- theory checks

IP3_GRID = tuple((p, beta) for p in (2, 5, 20) for beta in (0.0, 0.2, 0.8))


def ip_quadratic_instances(count, seed, max_p=5):
    """Random small instances (p, theta_{n-1}, theta_{n-2}, theta_star, gamma, beta, noise_sd)."""
    g = RngStream(seed, 0, (5,)).generator
    out = []
    for _ in range(count):
        p = int(g.integers(1, max_p + 1))
        ts = g.normal(size=p)
        t1 = ts + 0.3 * g.normal(size=p)
        t2 = t1 + 0.1 * g.normal(size=p)
        out.append((p, t1, t2, ts, float(g.uniform(0.005, 0.1)), float(g.uniform(0.0, 0.9)),
                    float(g.uniform(0.5, 2.0))))
    return out


def theory_checks(seed=0, n_samples=1_000_000, instances=20, moment_p=20, k_se=4.0):
    """Closed forms against Monte-Carlo oracles plus the stationary-window bound checks."""
    from . import theory as th

    checks = []
    m = th.estimate_moments(th.standard_normal_sampler, 1.0, moment_p, n_samples, RngStream(seed, 1))
    eye = np.eye(moment_p)
    for name, est, exact, se in (("moments_A", m.A, eye, m.std_errors["A"]),
                                 ("moments_B", m.B, (moment_p + 2) * eye, m.std_errors["B"])):
        z = np.abs(est - exact) / se
        checks.append({"name": name, "empirical": float(z.max()), "bound": k_se, "band": "max |z| over entries",
                       "pass": bool(np.all(z <= k_se))})
    zd = abs(m.d2 - moment_p) / m.std_errors["d2"]
    checks.append({"name": "moments_d2", "empirical": m.d2, "bound": float(moment_p), "band": k_se * m.std_errors["d2"],
                   "pass": bool(zd <= k_se)})
    for j, (p, t1, t2, ts, gamma, beta, sd) in enumerate(ip_quadratic_instances(instances, seed)):
        exact = th.expected_ip_quadratic(t1, t2, ts, th.standard_normal_moments(p, sd * sd), gamma, beta)
        mc, se = th.mc_conditional_ip(t1, t2, ts, gamma, beta, sd, n_samples, RngStream(seed, 2, (j,)))
        checks.append({"name": f"ip_quadratic_instance_{j}", "empirical": mc, "bound": exact, "band": k_se * se,
                       "pass": th.within_band(mc, exact, se, k_se)})
    gamma, sigma2 = 0.05, 1.0
    for j, (p, beta) in enumerate(IP3_GRID):
        exact = th.expected_ip3_from_optimum(p, gamma, beta, sigma2)
        mc, se = th.mc_ip3_from_optimum(p, gamma, beta, sigma2, n_samples, RngStream(seed, 3, (j,)))
        checks.append({"name": f"ip3_p{p}_beta{beta}", "empirical": mc, "bound": exact, "band": k_se * se,
                       "pass": th.within_band(mc, exact, se, k_se)})
    model, ref, recs = paired_stationary_runs(seed, 0, betas=(0.2,), keep_iterates=True)
    rec = recs[0.2]
    window = (phase_boundary(rec), len(rec))
    k = th.estimate_constants(model, rec, window, ref)
    checks.append(th.check_lemma1(rec, k, k.gamma, k.beta, window))
    checks.append(th.check_variance_ratio(rec, k, k.gamma, window))
    return checks
