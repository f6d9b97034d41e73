"""Convergence diagnostic for SGDM with a one-time momentum switch.

Each optimizer step adds the inner product of successive stochastic gradients to
a running sum S. Accumulation starts only after the momentum switch and a
burn-in. The run is declared converged at the first check-period boundary where
S < 0.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import CompensatedSum, DivergenceError, HyperParams, InvalidArgument, RngStream, RunRecord
from .optimizer import OptimizerState, set_momentum, sgdm_step
from .problems import epoch_batches, loss_and_gradient

HEURISTICS = ("iterate_distance", "grad_norm")


@dataclass(frozen=True)
class DiagnosticConfig:
    """Diagnostic settings.

    With ``relative=True`` the switch threshold is ``threshold_T`` times the
    heuristic value over the first full check period. ``threshold_T = 0``
    disables the switch. ``check_period_c`` and ``burnin`` default to one epoch
    when left as None. ``beta_final`` defaults to the HyperParams value.
    """

    threshold_T: float = 0.1
    check_period_c: int | None = None
    burnin: int | None = None
    heuristic_kind: str = "iterate_distance"
    beta_final: float | None = None
    relative: bool = True

    def __post_init__(self):
        if not (self.threshold_T >= 0 and math.isfinite(self.threshold_T)):
            raise InvalidArgument(f"DiagnosticConfig: threshold_T must be a finite value >= 0, got {self.threshold_T}")
        if self.check_period_c is not None and (int(self.check_period_c) != self.check_period_c
                                                or self.check_period_c < 1):
            raise InvalidArgument(f"DiagnosticConfig: check_period_c must be >= 1, got {self.check_period_c}")
        if self.burnin is not None and (int(self.burnin) != self.burnin or self.burnin < 1):
            raise InvalidArgument(f"DiagnosticConfig: burnin must be >= 1, got {self.burnin}")
        if self.heuristic_kind not in HEURISTICS:
            raise InvalidArgument(f"DiagnosticConfig: heuristic_kind must be one of {HEURISTICS}")
        if self.beta_final is not None and not 0.0 <= self.beta_final < 1.0:
            raise InvalidArgument(f"DiagnosticConfig: beta_final must lie in [0, 1), got {self.beta_final}")

    def resolved(self, iters_per_epoch):
        """Copy with epoch-based defaults filled in."""
        return DiagnosticConfig(
            self.threshold_T,
            self.check_period_c or iters_per_epoch,
            self.burnin or iters_per_epoch,
            self.heuristic_kind,
            self.beta_final,
            self.relative,
        )


@dataclass
class DiagnosticState:
    S: CompensatedSum = field(default_factory=CompensatedSum)
    alpha: int = 0
    burnin: int = 1
    check_period: int = 1
    n_accumulated: int = 0
    step_sq: deque = field(default_factory=deque)
    grad_sq: deque = field(default_factory=deque)
    reference_h: float | None = None
    activated_at: int | None = None

    @classmethod
    def fresh(cls, cfg: DiagnosticConfig, alpha=0):
        c = cfg.check_period_c or 1
        return cls(alpha=alpha, burnin=cfg.burnin or 1, check_period=c,
                   step_sq=deque(maxlen=c), grad_sq=deque(maxlen=c))

    @property
    def statistic(self):
        return self.S.value

    def guard(self, n):
        return self.alpha > 0 and n > self.alpha + self.burnin

    def observe(self, step_sq, grad_sq):
        self.step_sq.append(step_sq)
        self.grad_sq.append(grad_sq)

    def new_stage(self):
        """Reset S and the activation marker; keep alpha, the heuristic windows and the reference."""
        self.S = CompensatedSum()
        self.n_accumulated = 0
        self.activated_at = None


def pflug_update(ds: DiagnosticState, grad_now, grad_prev, n):
    """Add grad_now . grad_prev to S if the post-switch guard holds. Mutates and returns ``ds``."""
    if grad_prev is not None and ds.guard(n):
        ds.S.add(float(np.dot(grad_now, grad_prev)))
        ds.n_accumulated += 1
    return ds


def heuristic_value(ds: DiagnosticState, kind, window=None):
    """Mean of the heuristic inputs over the last ``window`` steps, or None if not enough are stored."""
    buf = ds.step_sq if kind == "iterate_distance" else ds.grad_sq
    if kind not in HEURISTICS:
        raise InvalidArgument(f"unknown heuristic {kind!r}")
    window = window or ds.check_period
    if len(buf) < window:
        return None
    vals = list(buf)[-window:]
    return math.fsum(vals) / window


def switch_threshold(ds: DiagnosticState, cfg: DiagnosticConfig):
    if not cfg.relative:
        return cfg.threshold_T
    if ds.reference_h is None:
        return None
    return cfg.threshold_T * ds.reference_h


def momentum_switch(ds: DiagnosticState, cfg: DiagnosticConfig, heuristic, n):
    """Return (ds, fired). On the first call in relative mode the value becomes the reference."""
    if ds.alpha != 0 or heuristic is None or n % ds.check_period != 0:
        return ds, False
    if not (heuristic >= 0 and math.isfinite(heuristic)):
        raise InvalidArgument(f"heuristic value must be finite and >= 0, got {heuristic}")
    if cfg.relative and ds.reference_h is None:
        ds.reference_h = heuristic
        return ds, False
    if heuristic < switch_threshold(ds, cfg):
        ds.alpha = n
        return ds, True
    return ds, False


def check_activation(ds: DiagnosticState, n):
    if ds.S.value < 0 and n % ds.check_period == 0 and ds.n_accumulated > 0:
        if ds.activated_at is None:
            ds.activated_at = n
        return True
    return False


def default_start(model, rng: RngStream):
    """Zero for convex models. Phase retrieval has a stationary point at zero, so it starts at N(0, I/p)."""
    if model.kind == "phase_retrieval":
        return rng.generator.standard_normal(model.p) / math.sqrt(model.p)
    return np.zeros(model.p)


@dataclass
class StageResult:
    theta_at_activation: np.ndarray | None
    state: OptimizerState
    ds: DiagnosticState
    record: RunRecord
    prev_grad: np.ndarray | None
    epochs_run: int


def drive(model, state: OptimizerState, cfg: DiagnosticConfig, ds: DiagnosticState, rng: RngStream,
          max_epochs, record: RunRecord, reference=None, prev_grad=None, stop_on_activation=True,
          beta_final=None):
    """Run up to ``max_epochs`` shuffled epochs of the diagnostic loop from ``state``.

    ``cfg`` must already be resolved. ``prev_grad`` is the last gradient of an
    earlier stage so that the first inner product of a new stage is defined.
    """
    bs = state.hp.batch_size
    bfinal = state.hp.beta_final if beta_final is None else beta_final
    keep = record.keep_iterates
    if keep and not record._thetas:
        record.add_iterate(state.theta)
    n = state.n
    epoch = 0
    try:
        for epoch in range(1, max_epochs + 1):
            for batch in epoch_batches(model.N, bs, rng):
                theta_old = state.theta
                value, g = loss_and_gradient(model, theta_old, batch.indices)
                gamma, beta = state.hp.gamma, state.hp.beta
                state = sgdm_step(state, g)
                n = state.n
                step = state.theta - theta_old
                gsq = float(g @ g)
                if prev_grad is not None:
                    ip = float(g @ prev_grad)
                    denom = math.sqrt(gsq * float(prev_grad @ prev_grad))
                    cos = min(1.0, max(-1.0, ip / denom)) if denom > 0 else math.nan
                else:
                    ip = cos = math.nan
                pflug_update(ds, g, prev_grad, n)
                ds.observe(float(step @ step), gsq)
                dist = None
                if reference is not None:
                    d = state.theta - reference
                    dist = float(d @ d)
                record.append(n, ip, ds.S.value, value, dist, gsq, cos, gamma, beta)
                if keep:
                    record.add_iterate(state.theta)
                    record.add_gradient(g)
                prev_grad = g
                active = check_activation(ds, n)
                if active and record.diagnostic_activation_at is None:
                    record.diagnostic_activation_at = n
                if active and stop_on_activation:
                    return StageResult(state.theta.copy(), state, ds, record, prev_grad, epoch)
                if ds.alpha == 0 and n % ds.check_period == 0:
                    h = heuristic_value(ds, cfg.heuristic_kind)
                    ds, fired = momentum_switch(ds, cfg, h, n)
                    if fired:
                        state = set_momentum(state, bfinal)
                        record.momentum_switch_at = n
    except DivergenceError as err:
        err.iteration = n + 1
        err.record = record
        raise
    return StageResult(None, state, ds, record, prev_grad, epoch)


def run_with_diagnostic(model, hp: HyperParams, cfg: DiagnosticConfig, rng: RngStream, max_epochs=None,
                        theta0=None, reference=None, stop_on_activation=True, keep_iterates=True):
    """Diagnostic loop from a fresh start. Returns (theta at activation or None, record).

    ``rng`` drives minibatch sampling. ``reference`` (default: the dataset's
    optimum) is used only for the distance column of the record.
    """
    max_epochs = max_epochs or hp.epochs
    if max_epochs < 1:
        raise InvalidArgument("max_epochs must be >= 1")
    iters = math.ceil(model.N / hp.batch_size)
    rcfg = cfg.resolved(iters)
    bfinal = hp.beta_final if rcfg.beta_final is None else rcfg.beta_final
    if hp.beta > 0 and bfinal >= hp.beta:
        raise InvalidArgument(f"beta_final {bfinal} must be below beta {hp.beta}")
    if theta0 is None:
        theta0 = default_start(model, rng.child(1))
    if reference is None:
        reference = model.dataset.optimum
    record = RunRecord(keep_iterates=keep_iterates, config={
        "hp": hp, "diagnostic": rcfg, "max_epochs": max_epochs,
        "seed": rng.seed, "stream_id": rng.stream_id,
    })
    state = OptimizerState.initial(theta0, hp)
    ds = DiagnosticState.fresh(rcfg)
    res = drive(model, state, rcfg, ds, rng, max_epochs, record, reference=reference,
                stop_on_activation=stop_on_activation, beta_final=bfinal)
    return res.theta_at_activation, res.record
