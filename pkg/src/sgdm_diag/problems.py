"""Loss models, synthetic generators and dataset loaders."""
from __future__ import annotations

import csv
import gzip
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .core import (DivergenceError, InvalidArgument, RngStream, SgdmError, UnsupportedError,
                   as_param)

KINDS = ("quadratic", "phase_retrieval", "logistic")
DEFAULT_POSITIVE_DIGITS = frozenset(range(5))


class LoadError(SgdmError):
    pass


class BadMagicError(LoadError):
    pass


class TruncatedFileError(LoadError):
    pass


class CountMismatchError(LoadError):
    pass


class CsvParseError(LoadError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


@dataclass(frozen=True, eq=False)
class Dataset:
    xs: np.ndarray
    ys: np.ndarray
    optimum: np.ndarray | None = None
    noise_variance: float | None = None

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.float64)
        ys = np.asarray(self.ys, dtype=np.float64)
        if xs.ndim != 2 or ys.ndim != 1 or xs.shape[0] != ys.shape[0] or xs.shape[0] == 0:
            raise InvalidArgument(f"Dataset: need xs (N, p) and ys (N,), got {xs.shape} and {ys.shape}")
        xs.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        if self.optimum is not None:
            opt = as_param(self.optimum, "optimum")
            if opt.shape[0] != xs.shape[1]:
                raise InvalidArgument("Dataset: optimum dimension differs from features")
            opt.setflags(write=False)
            object.__setattr__(self, "optimum", opt)

    @property
    def N(self):
        return self.xs.shape[0]

    @property
    def p(self):
        return self.xs.shape[1]


@dataclass(frozen=True, eq=False)
class LossModel:
    kind: str
    dataset: Dataset

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown loss model kind {self.kind!r}; expected one of {KINDS}")

    @property
    def p(self):
        return self.dataset.p

    @property
    def N(self):
        return self.dataset.N


@dataclass(frozen=True, eq=False)
class MiniBatch:
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 1 or idx.size == 0 or not np.issubdtype(idx.dtype, np.integer):
            raise InvalidArgument("MiniBatch: indices must be a non-empty 1-d integer array")
        object.__setattr__(self, "indices", idx)

    def validate(self, N):
        if self.indices.min() < 0 or self.indices.max() >= N:
            raise InvalidArgument(f"MiniBatch: indices outside [0, {N})")
        return self

    def __len__(self):
        return self.indices.size


def full_batch(model):
    return MiniBatch(np.arange(model.N))


def default_optimum(p):
    """theta_star with entries (-1)^i * 2 * exp(-0.7 i), i = 1..p."""
    i = np.arange(1, p + 1)
    return (-1.0) ** i * 2.0 * np.exp(-0.7 * i)


def _check_sizes(p, N):
    if int(p) != p or p < 1:
        raise InvalidArgument(f"p must be a positive integer, got {p}")
    if int(N) != N or N < 1:
        raise InvalidArgument(f"N must be a positive integer, got {N}")


def gen_quadratic(p, N, noise_sd, rng: RngStream):
    _check_sizes(p, N)
    if noise_sd < 0:
        raise InvalidArgument(f"noise_sd must be non-negative, got {noise_sd}")
    g = rng.generator
    xs = g.standard_normal((N, p))
    eps = g.standard_normal(N) * noise_sd
    theta_star = default_optimum(p)
    return Dataset(xs, xs @ theta_star + eps, theta_star, float(noise_sd) ** 2)


def gen_phase_retrieval(p, N, rng: RngStream, noise_sd=0.0):
    """Phase-retrieval data y = (x'theta_star)^2 + noise.

    The default is noiseless. Additive label noise is optional; without it the
    stochastic gradients vanish at theta_star and no stationary phase exists.
    """
    _check_sizes(p, N)
    if noise_sd < 0:
        raise InvalidArgument(f"noise_sd must be non-negative, got {noise_sd}")
    g = rng.generator
    xs = g.standard_normal((N, p))
    theta_star = default_optimum(p)
    ys = (xs @ theta_star) ** 2
    if noise_sd > 0:
        ys = ys + noise_sd * g.standard_normal(N)
    return Dataset(xs, ys, theta_star, float(noise_sd) ** 2)


def gen_logistic(p, N, rng: RngStream, theta_star=None):
    """Standard normal features with Bernoulli(sigmoid(x'theta_star)) labels in {0, 1}."""
    _check_sizes(p, N)
    g = rng.generator
    theta_star = default_optimum(p) if theta_star is None else as_param(theta_star, "theta_star")
    xs = g.standard_normal((N, p))
    ys = (g.random(N) < expit(xs @ theta_star)).astype(np.float64)
    return Dataset(xs, ys, theta_star, None)


def loss_and_gradient(model: LossModel, theta, idx):
    """Mean loss and mean gradient over the rows ``idx`` (an index array or slice)."""
    X = model.dataset.xs[idx]
    y = model.dataset.ys[idx]
    z = X @ theta
    m = X.shape[0]
    if model.kind == "quadratic":
        r = z - y
        value = 0.5 * float(r @ r) / m
        grad = (r @ X) / m
    elif model.kind == "phase_retrieval":
        r = z * z - y
        value = 0.25 * float(r @ r) / m
        grad = ((r * z) @ X) / m
    else:
        value = float(np.mean(np.logaddexp(0.0, z) - y * z))
        grad = ((expit(z) - y) @ X) / m
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        raise DivergenceError("non-finite loss or gradient")
    return value, grad


def per_example_gradients(model: LossModel, theta, idx=slice(None)):
    X = model.dataset.xs[idx]
    y = model.dataset.ys[idx]
    z = X @ theta
    if model.kind == "quadratic":
        w = z - y
    elif model.kind == "phase_retrieval":
        w = (z * z - y) * z
    else:
        w = expit(z) - y
    return w[:, None] * X


def _batch_index(model, batch):
    if isinstance(batch, MiniBatch):
        return batch.validate(model.N).indices
    return MiniBatch(np.asarray(batch)).validate(model.N).indices


def stochastic_gradient(model: LossModel, theta, batch):
    theta = np.asarray(theta, dtype=np.float64)
    return loss_and_gradient(model, theta, _batch_index(model, batch))[1]


def loss(model: LossModel, theta, batch):
    theta = np.asarray(theta, dtype=np.float64)
    return loss_and_gradient(model, theta, _batch_index(model, batch))[0]


def full_loss(model, theta):
    return loss_and_gradient(model, np.asarray(theta, dtype=np.float64), slice(None))[0]


def full_gradient(model, theta):
    return loss_and_gradient(model, np.asarray(theta, dtype=np.float64), slice(None))[1]


def epoch_batches(N, batch_size, rng: RngStream):
    if batch_size < 1 or batch_size > N:
        raise InvalidArgument(f"batch_size must lie in [1, N={N}], got {batch_size}")
    perm = rng.generator.permutation(N)
    return [MiniBatch(perm[i:i + batch_size]) for i in range(0, N, batch_size)]


def hessian(model):
    if model.kind != "quadratic":
        raise UnsupportedError("a constant Hessian exists only for the quadratic model")
    X = model.dataset.xs
    return X.T @ X / model.N


def empirical_optimum(model: LossModel):
    """Minimizer of the full finite-sum objective.

    For the quadratic model this is the least-squares solution. For phase retrieval
    BFGS is started at the generating optimum, which selects the branch with the
    same sign. Logistic models have no reference point.
    """
    ds = model.dataset
    if model.kind == "quadratic":
        return np.linalg.lstsq(ds.xs, ds.ys, rcond=None)[0]
    if model.kind == "phase_retrieval":
        if ds.optimum is None:
            raise UnsupportedError("phase retrieval needs a generating optimum to choose a branch")
        res = minimize(lambda th: full_loss(model, th), ds.optimum,
                       jac=lambda th: full_gradient(model, th), method="BFGS",
                       options={"gtol": 1e-12, "maxiter": 10_000})
        return res.x
    raise UnsupportedError("no reference optimum for the logistic model")


def _open_maybe_gz(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return path.open("rb")


def _read_idx(path, magic, ndim_header):
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    header_len = 4 + 4 * ndim_header
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: file shorter than its IDX header")
    got = int.from_bytes(raw[:4], "big")
    if got != magic:
        raise BadMagicError(f"{path}: magic number 0x{got:08x}, expected 0x{magic:08x}")
    dims = [int.from_bytes(raw[4 + 4 * k:8 + 4 * k], "big") for k in range(ndim_header)]
    size = int(np.prod(dims))
    if len(raw) - header_len < size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(raw) - header_len}")
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header_len)
    return data.reshape(dims)


def load_idx(images_path, labels_path, positive_digits=DEFAULT_POSITIVE_DIGITS):
    images = _read_idx(images_path, 0x00000803, 3)
    labels = _read_idx(labels_path, 0x00000801, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, rows, cols = images.shape
    xs = np.empty((n, rows * cols + 1))
    xs[:, :-1] = images.reshape(n, rows * cols) / 255.0
    xs[:, -1] = 1.0
    positive = np.array(sorted(int(d) for d in positive_digits), dtype=np.int64)
    ys = np.isin(labels, positive).astype(np.float64)
    return Dataset(xs, ys)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(directory):
    """Return {'train': (images, labels), 'test': (...)} paths under ``directory``, or None."""
    directory = Path(directory)
    found = {}
    for split, names in MNIST_FILES.items():
        pair = []
        for name in names:
            cands = [directory / name, directory / (name + ".gz"),
                     directory / name.replace("-idx", ".idx")]
            hit = next((c for c in cands if c.exists()), None)
            if hit is None:
                return None
            pair.append(hit)
        found[split] = tuple(pair)
    return found


def load_csv(path, label_column, binarize_threshold=None, drop_columns=()):
    """Numeric CSV with a header row.

    Features are standardized column-wise and a bias column is appended. Constant
    columns become zeros. ``binarize_threshold`` may be a number or ``"median"``.
    Columns named in ``drop_columns`` (for example a URL column) are skipped.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvParseError(f"{path}: empty file", row=0) from None
        if label_column not in header:
            raise CsvParseError(f"{path}: missing label column {label_column!r}", row=1)
        drop = {c.strip() for c in drop_columns}
        missing = drop.difference(header)
        if missing:
            raise CsvParseError(f"{path}: missing columns {sorted(missing)}", row=1)
        keep = [j for j, h in enumerate(header) if h not in drop]
        rows = []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvParseError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}", row=r)
            vals = []
            for j in keep:
                try:
                    vals.append(float(row[j]))
                except ValueError:
                    raise CsvParseError(f"{path}: non-numeric cell {row[j]!r} at row {r}, column "
                                        f"{header[j]!r}", row=r, column=header[j]) from None
            rows.append(vals)
    if not rows:
        raise CsvParseError(f"{path}: no data rows", row=2)
    table = np.asarray(rows)
    names = [header[j] for j in keep]
    lab = names.index(label_column)
    y = table[:, lab]
    feats = np.delete(table, lab, axis=1)
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    safe = np.where(sd > 0, sd, 1.0)
    z = np.where(sd > 0, (feats - mu) / safe, 0.0)
    xs = np.hstack([z, np.ones((z.shape[0], 1))])
    if binarize_threshold is not None:
        thr = float(np.median(y)) if binarize_threshold == "median" else float(binarize_threshold)
        y = (y >= thr).astype(np.float64)
    return Dataset(xs, y)


def train_test_split(ds: Dataset, test_fraction, rng: RngStream):
    if not 0 < test_fraction < 1:
        raise InvalidArgument("test_fraction must lie in (0, 1)")
    perm = rng.generator.permutation(ds.N)
    n_test = max(1, int(round(test_fraction * ds.N)))
    te, tr = perm[:n_test], perm[n_test:]
    return (Dataset(ds.xs[tr], ds.ys[tr], ds.optimum, ds.noise_variance),
            Dataset(ds.xs[te], ds.ys[te], ds.optimum, ds.noise_variance))


def accuracy(ds: Dataset, theta):
    """Fraction of correct {0,1} predictions of a logistic model."""
    pred = (ds.xs @ np.asarray(theta) >= 0).astype(np.float64)
    return float(np.mean(pred == ds.ys))
