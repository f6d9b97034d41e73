"""Shared types: errors, hyperparameters, seeded streams, compensated sums and run traces."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SgdmError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(SgdmError, ValueError):
    pass


class DegenerateInput(SgdmError, ValueError):
    pass


class UnsupportedError(SgdmError):
    pass


class InsufficientData(SgdmError):
    pass


class DivergenceError(SgdmError, FloatingPointError):
    """A non-finite value appeared. ``iteration`` and ``record`` are filled in by drivers."""

    def __init__(self, message, iteration=None, record=None):
        super().__init__(message)
        self.iteration = iteration
        self.record = record


def as_param(values, name="theta"):
    """Return a float64 copy of ``values`` after checking it is a finite 1-d vector."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidArgument(f"{name} must be a non-empty 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite entries")
    return arr


def dot(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = dot(a, b)
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInput("cosine similarity of a zero-norm vector")
    return min(1.0, max(-1.0, num / (na * nb)))


class CompensatedSum:
    """Neumaier's variant of Kahan summation.

    The rounding error of every addition is carried in a separate term, so a long
    sum of small mixed-sign values stays accurate to about one ulp of the result.
    """

    __slots__ = ("_sum", "_comp")

    def __init__(self, start=0.0):
        self._sum = float(start)
        self._comp = 0.0

    def add(self, x):
        x = float(x)
        t = self._sum + x
        if abs(self._sum) >= abs(x):
            self._comp += (self._sum - t) + x
        else:
            self._comp += (x - t) + self._sum
        self._sum = t

    @property
    def value(self):
        return self._sum + self._comp

    def reset(self):
        self._sum = 0.0
        self._comp = 0.0


@dataclass(frozen=True)
class HyperParams:
    gamma: float
    beta: float = 0.0
    beta_final: float = 0.0
    batch_size: int = 20
    epochs: int = 20

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise InvalidArgument(f"HyperParams: gamma must be > 0, got {self.gamma}")
        if not 0.0 <= self.beta < 1.0:
            raise InvalidArgument(f"HyperParams: beta must lie in [0, 1), got {self.beta}")
        if self.beta == 0.0:
            if self.beta_final != 0.0:
                raise InvalidArgument("HyperParams: beta_final must be 0 when beta is 0")
        elif not 0.0 <= self.beta_final < self.beta:
            raise InvalidArgument(
                f"HyperParams: beta_final must lie in [0, beta), got {self.beta_final} with beta={self.beta}"
            )
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise InvalidArgument(f"HyperParams: batch_size must be a positive integer, got {self.batch_size}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise InvalidArgument(f"HyperParams: epochs must be a positive integer, got {self.epochs}")


@dataclass
class RngStream:
    """A seeded random stream backed by numpy's counter-based Philox generator.

    The key is derived from ``SeedSequence(seed, spawn_key=(stream_id, *path))``.
    Philox output depends only on (key, counter), so a given stream reproduces
    across platforms and numpy builds. Child streams extend ``path``.
    """

    seed: int
    stream_id: int = 0
    path: tuple = ()
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidArgument(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if int(self.stream_id) < 0:
            raise InvalidArgument(f"stream_id must be non-negative, got {self.stream_id}")
        self.seed = int(self.seed)
        self.stream_id = int(self.stream_id)
        self.path = tuple(int(k) for k in self.path)

    @property
    def generator(self):
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *self.path))
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def child(self, k):
        return RngStream(self.seed, self.stream_id, self.path + (int(k),))


RECORD_FIELDS = (
    "iteration",
    "inner_product",
    "statistic_S",
    "loss_estimate",
    "dist_to_optimum_sq",
    "grad_norm_sq",
    "cosine_prev",
    "gamma_in_effect",
    "beta_in_effect",
)


class RunRecord:
    """Per-iteration trace of a run plus event markers.

    Row ``i`` describes iteration ``n = iteration[i]``: the gradient evaluated at
    theta_{n-1}, the step to theta_n, and the statistic after line-9 accumulation.
    ``inner_product`` and ``cosine_prev`` are NaN on the first step because no
    previous gradient exists. When ``keep_iterates`` is set the iterates are kept
    in memory together with the stochastic gradients (``thetas[k]`` is theta_k,
    with ``thetas[0]`` the start point). They are needed for the lateness measure
    and the theory checks and are not written to CSV.
    """

    def __init__(self, keep_iterates=True, config=None):
        self._cols = {name: [] for name in RECORD_FIELDS}
        self.momentum_switch_at = None
        self.diagnostic_activation_at = None
        self.lr_reductions = []
        self.config = dict(config or {})
        self.keep_iterates = keep_iterates
        self._thetas = []
        self._grads = []
        self._cache = None

    def append(self, iteration, inner_product, statistic_S, loss_estimate, dist_to_optimum_sq,
               grad_norm_sq, cosine_prev, gamma_in_effect, beta_in_effect):
        col = self._cols
        its = col["iteration"]
        if its and iteration <= its[-1]:
            raise InvalidArgument(f"record rows must increase: {iteration} after {its[-1]}")
        its.append(int(iteration))
        col["inner_product"].append(inner_product)
        col["statistic_S"].append(statistic_S)
        col["loss_estimate"].append(loss_estimate)
        col["dist_to_optimum_sq"].append(math.nan if dist_to_optimum_sq is None else dist_to_optimum_sq)
        col["grad_norm_sq"].append(grad_norm_sq)
        col["cosine_prev"].append(cosine_prev)
        col["gamma_in_effect"].append(gamma_in_effect)
        col["beta_in_effect"].append(beta_in_effect)
        self._cache = None

    def add_iterate(self, theta):
        if self.keep_iterates:
            self._thetas.append(np.array(theta, dtype=np.float64))

    def add_gradient(self, grad):
        if self.keep_iterates:
            self._grads.append(np.array(grad, dtype=np.float64))

    def __len__(self):
        return len(self._cols["iteration"])

    def column(self, name):
        if name not in self._cols:
            raise InvalidArgument(f"unknown record column {name!r}")
        if self._cache is None:
            self._cache = {}
        if name not in self._cache:
            dtype = np.int64 if name == "iteration" else np.float64
            self._cache[name] = np.asarray(self._cols[name], dtype=dtype)
        return self._cache[name]

    def __getattr__(self, name):
        if name in RECORD_FIELDS:
            return self.column(name)
        raise AttributeError(name)

    @property
    def thetas(self):
        if not self.keep_iterates:
            raise UnsupportedError("record was created without keep_iterates")
        return np.asarray(self._thetas)

    @property
    def gradients(self):
        """Stochastic gradients, ``gradients[i]`` belonging to row ``i``."""
        if not self.keep_iterates:
            raise UnsupportedError("record was created without keep_iterates")
        return np.asarray(self._grads)

    def extend(self, other):
        """Append the rows, iterates and events of a later record (used to join schedule stages)."""
        for i in range(len(other)):
            self.append(*(other._cols[name][i] for name in RECORD_FIELDS))
        if self.keep_iterates and other.keep_iterates:
            start = 1 if self._thetas else 0
            self._thetas.extend(other._thetas[start:])
            self._grads.extend(other._grads)
        if self.momentum_switch_at is None:
            self.momentum_switch_at = other.momentum_switch_at
        if other.diagnostic_activation_at is not None:
            self.diagnostic_activation_at = other.diagnostic_activation_at

    def events(self):
        return {
            "momentum_switch_at": self.momentum_switch_at,
            "diagnostic_activation_at": self.diagnostic_activation_at,
            "lr_reductions": list(self.lr_reductions),
        }

    def check_invariants(self):
        its = self._cols["iteration"]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise InvalidArgument("record rows are not strictly increasing")
        if (self.momentum_switch_at is not None and self.diagnostic_activation_at is not None
                and self.momentum_switch_at > self.diagnostic_activation_at):
            raise InvalidArgument("momentum switch recorded after diagnostic activation")

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RECORD_FIELDS)
            cols = [self._cols[name] for name in RECORD_FIELDS]
            for row in zip(*cols):
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return path

    def to_json(self, path):
        path = Path(path)
        payload = {"events": self.events(), "config": self.config}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default))
        return path

    def save(self, stem):
        """Write ``<stem>.csv`` and ``<stem>.json``; return both paths."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        return self.to_csv(stem.with_suffix(".csv")), self.to_json(stem.with_suffix(".json"))

    @classmethod
    def from_files(cls, stem):
        stem = Path(stem)
        rec = cls(keep_iterates=False)
        with stem.with_suffix(".csv").open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != RECORD_FIELDS:
                raise InvalidArgument(f"unexpected record header {header}")
            for row in reader:
                rec.append(int(row[0]), *(float(v) for v in row[1:]))
        meta = json.loads(stem.with_suffix(".json").read_text())
        ev = meta["events"]
        rec.momentum_switch_at = ev["momentum_switch_at"]
        rec.diagnostic_activation_at = ev["diagnostic_activation_at"]
        rec.lr_reductions = list(ev["lr_reductions"])
        rec.config = meta.get("config", {})
        return rec


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return {k: getattr(obj, k) for k in obj.__dataclass_fields__ if not k.startswith("_")}
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default, allow_nan=True))
    return path
