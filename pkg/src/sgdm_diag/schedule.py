"""Step-decay learning rate driven by the convergence diagnostic, and the gamma0/n comparator."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import DivergenceError, HyperParams, InvalidArgument, RngStream, RunRecord
from .diagnostic import DiagnosticConfig, DiagnosticState, default_start, drive
from .optimizer import OptimizerState, set_gamma, sgdm_step
from .problems import epoch_batches, loss_and_gradient

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    gamma0: float
    gamma_min: float | None = None
    rho: float = 0.1
    max_epochs: int = 20
    diag: DiagnosticConfig = field(default_factory=DiagnosticConfig)
    hp: HyperParams | None = None

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise InvalidArgument(f"ScheduleConfig: gamma0 must be > 0, got {self.gamma0}")
        if self.gamma_min is None:
            object.__setattr__(self, "gamma_min", self.gamma0 * 1e-3)
        if not 0 < self.gamma_min:
            raise InvalidArgument(f"ScheduleConfig: gamma_min must be > 0, got {self.gamma_min}")
        if not 0 < self.rho < 1:
            raise InvalidArgument(f"ScheduleConfig: rho must lie in (0, 1), got {self.rho}")
        if int(self.max_epochs) != self.max_epochs or self.max_epochs < 1:
            raise InvalidArgument(f"ScheduleConfig: max_epochs must be a positive integer, got {self.max_epochs}")
        if self.hp is None:
            object.__setattr__(self, "hp", HyperParams(gamma=self.gamma0))

    def stage_gammas(self):
        """gamma0 * rho**k for every k with gamma0 * rho**k > gamma_min."""
        out = []
        k = 0
        while True:
            g = self.gamma0 * self.rho ** k
            if not g > self.gamma_min:
                return out
            out.append(g)
            k += 1


@dataclass
class Stage:
    gamma: float
    iterations: int
    activation: str  # "diagnostic" or "stage-timeout"


@dataclass
class ScheduleTrace:
    stages: list
    theta: np.ndarray
    record: RunRecord

    @property
    def gammas(self):
        return [s.gamma for s in self.stages]

    def to_dict(self):
        return {"stages": [dataclasses.asdict(s) for s in self.stages], "theta": self.theta.tolist(),
                "events": self.record.events()}


def auto_lr(model, cfg: ScheduleConfig, rng: RngStream, theta0=None, reference=None, keep_iterates=True):
    """Each stage reruns the diagnostic with S reset and gamma reduced by rho.

    Iterates and velocity carry across stages. The momentum switch fires at most
    once over the whole schedule.
    """
    hp = dataclasses.replace(cfg.hp, gamma=cfg.gamma0)
    iters = math.ceil(model.N / hp.batch_size)
    dcfg = cfg.diag.resolved(iters)
    bfinal = hp.beta_final if dcfg.beta_final is None else dcfg.beta_final
    if theta0 is None:
        theta0 = default_start(model, rng.child(1))
    if reference is None:
        reference = model.dataset.optimum
    record = RunRecord(keep_iterates=keep_iterates, config={"schedule": cfg, "seed": rng.seed})
    state = OptimizerState.initial(theta0, hp)
    ds = DiagnosticState.fresh(dcfg)
    prev_grad = None
    stages = []
    for k, gamma in enumerate(cfg.stage_gammas()):
        if k > 0:
            state = set_gamma(state, gamma)
            ds.new_stage()
            record.lr_reductions.append(state.n)
        start_n = state.n
        try:
            res = drive(model, state, dcfg, ds, rng, cfg.max_epochs, record, reference=reference,
                        prev_grad=prev_grad, beta_final=bfinal)
        except DivergenceError as err:
            err.record = record
            raise
        state, ds, prev_grad = res.state, res.ds, res.prev_grad
        kind = "diagnostic" if res.theta_at_activation is not None else "stage-timeout"
        if kind == "stage-timeout":
            log.warning("stage %d (gamma=%g) reached %d epochs without activation", k, gamma, cfg.max_epochs)
        stages.append(Stage(gamma, state.n - start_n, kind))
    return ScheduleTrace(stages, np.array(state.theta), record)


def decreasing_lr_baseline(model, gamma0, hp: HyperParams, epochs, rng: RngStream, theta0=None,
                           reference=None, keep_iterates=False):
    """SGDM with gamma_n = gamma0 / n (n counted from 1) and constant momentum."""
    if not gamma0 > 0:
        raise InvalidArgument("gamma0 must be > 0")
    if theta0 is None:
        theta0 = default_start(model, rng.child(1))
    if reference is None:
        reference = model.dataset.optimum
    record = RunRecord(keep_iterates=keep_iterates, config={"gamma0": gamma0, "hp": hp, "epochs": epochs})
    state = OptimizerState.initial(theta0, dataclasses.replace(hp, gamma=gamma0))
    record.add_iterate(state.theta)
    prev = None
    try:
        for _ in range(epochs):
            for batch in epoch_batches(model.N, hp.batch_size, rng):
                gamma = gamma0 / (state.n + 1)
                state = set_gamma(state, gamma)
                value, g = loss_and_gradient(model, state.theta, batch.indices)
                state = sgdm_step(state, g)
                gsq = float(g @ g)
                ip = float(g @ prev) if prev is not None else math.nan
                dist = None if reference is None else float(np.sum((state.theta - reference) ** 2))
                record.append(state.n, ip, math.nan, value, dist, gsq, math.nan, gamma, state.hp.beta)
                record.add_iterate(state.theta)
                prev = g
    except DivergenceError as err:
        err.iteration = state.n + 1
        err.record = record
        raise
    return record, np.array(state.theta)
