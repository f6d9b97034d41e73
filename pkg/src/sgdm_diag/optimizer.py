"""Constant-rate SGD with heavy-ball momentum in iterate-difference form."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .core import DivergenceError, HyperParams, InvalidArgument, as_param
from .problems import epoch_batches, loss_and_gradient


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class OptimizerState:
    theta: np.ndarray
    theta_prev: np.ndarray
    hp: HyperParams
    n: int = 0
    last_grad: np.ndarray | None = None

    def __post_init__(self):
        if self.theta.shape != self.theta_prev.shape:
            raise InvalidArgument("theta and theta_prev differ in dimension")
        if self.n == 0 and not np.array_equal(self.theta, self.theta_prev):
            raise InvalidArgument("a fresh state (n = 0) needs theta_prev equal to theta")

    @classmethod
    def initial(cls, theta0, hp: HyperParams):
        t = _frozen(as_param(theta0, "theta0"))
        return cls(t, t, hp, 0, None)

    @property
    def velocity(self):
        return self.theta - self.theta_prev


def sgdm_step(state: OptimizerState, grad):
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.theta.shape:
        raise InvalidArgument(f"gradient shape {grad.shape} differs from theta {state.theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient", iteration=state.n + 1)
    hp = state.hp
    with np.errstate(over="ignore", invalid="ignore"):
        new = state.theta - hp.gamma * grad + hp.beta * (state.theta - state.theta_prev)
    if not np.all(np.isfinite(new)):
        raise DivergenceError("iterate became non-finite", iteration=state.n + 1)
    return OptimizerState(_frozen(new), state.theta, hp, state.n + 1, _frozen(grad))


def sgd_step(theta, grad, gamma):
    """Plain SGD, kept separately as the reference for the beta = 0 reduction."""
    return np.asarray(theta) - gamma * np.asarray(grad)


def set_momentum(state: OptimizerState, beta_new):
    if not 0.0 <= beta_new < 1.0:
        raise InvalidArgument(f"momentum must lie in [0, 1), got {beta_new}")
    if beta_new == state.hp.beta:
        return state
    # After a switch there is no further reduction, so beta_final is reset to 0.
    hp = dataclasses.replace(state.hp, beta=beta_new, beta_final=0.0)
    return dataclasses.replace(state, hp=hp)


def set_gamma(state: OptimizerState, gamma_new):
    return dataclasses.replace(state, hp=dataclasses.replace(state.hp, gamma=gamma_new))


def run_epoch(model, state: OptimizerState, rng):
    """One shuffled pass over the data; returns the new state and the per-step gradients."""
    grads = []
    for batch in epoch_batches(model.N, state.hp.batch_size, rng):
        _, g = loss_and_gradient(model, state.theta, batch.indices)
        state = sgdm_step(state, g)
        grads.append(g)
    return state, grads
