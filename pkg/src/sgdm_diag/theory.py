"""Closed forms, Monte-Carlo oracles and bound checks for the inner-product statistic."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import InsufficientData, InvalidArgument, RngStream, UnsupportedError
from .problems import empirical_optimum, full_loss, hessian, per_example_gradients


@dataclass
class QuadMoments:
    A: np.ndarray
    B: np.ndarray
    d2: float
    sigma_quad2: float
    n_samples: int
    std_errors: dict


class _Moments:
    """Running mean and variance of array-valued samples, merged chunk by chunk (Chan et al.)."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def update(self, batch):
        k = batch.shape[0]
        bmean = batch.mean(axis=0)
        bm2 = ((batch - bmean) ** 2).sum(axis=0)
        if self.n == 0:
            self.n, self.mean, self.m2 = k, bmean, bm2
            return
        n = self.n + k
        delta = bmean - self.mean
        self.mean = self.mean + delta * (k / n)
        self.m2 = self.m2 + bm2 + delta ** 2 * (self.n * k / n)
        self.n = n

    @property
    def std_error(self):
        return np.sqrt(self.m2 / (self.n - 1) / self.n)


def standard_normal_sampler(rng_gen, size, p):
    return rng_gen.standard_normal((size, p))


def estimate_moments(x_sampler, eps_variance, p, n_samples, rng: RngStream, chunk=10_000):
    """Monte-Carlo A, B, d^2 over iid pairs (x, x').

    ``x_sampler(generator, size, p)`` returns an array of shape (size, p).
    """
    if n_samples < 10_000:
        raise InvalidArgument("estimate_moments needs at least 1e4 samples")
    g = rng.generator
    accA, accB, accd = _Moments(), _Moments(), _Moments()
    left = n_samples
    while left > 0:
        k = min(chunk, left)
        x = x_sampler(g, k, p)
        xp = x_sampler(g, k, p)
        s = np.einsum("ij,ij->i", x, xp)
        accA.update(x[:, :, None] * xp[:, None, :] * s[:, None, None])
        accB.update(x[:, :, None] * x[:, None, :] * (s * s)[:, None, None])
        accd.update(s * s)
        left -= k
    return QuadMoments(accA.mean, accB.mean, float(accd.mean), float(eps_variance), n_samples,
                       {"A": accA.std_error, "B": accB.std_error, "d2": float(accd.std_error)})


def standard_normal_moments(p, sigma_quad2):
    """Exact moments for x ~ N(0, I_p): A = I, B = (p + 2) I, d^2 = p (Isserlis)."""
    eye = np.eye(p)
    return QuadMoments(eye, (p + 2) * eye, float(p), float(sigma_quad2), 0,
                       {"A": np.zeros((p, p)), "B": np.zeros((p, p)), "d2": 0.0})


def expected_ip_quadratic(theta_nm1, theta_nm2, theta_star, m: QuadMoments, gamma, beta):
    e = np.asarray(theta_nm1, dtype=np.float64) - np.asarray(theta_star, dtype=np.float64)
    delta = np.asarray(theta_nm1, dtype=np.float64) - np.asarray(theta_nm2, dtype=np.float64)
    if e.shape != delta.shape or m.A.shape != (e.size, e.size):
        raise InvalidArgument("dimension mismatch between iterates and moment matrices")
    return float(e @ (m.A - gamma * m.B) @ e - gamma * m.sigma_quad2 * m.d2 + beta * (e @ m.A @ delta))


def mc_conditional_ip(theta_nm1, theta_nm2, theta_star, gamma, beta, noise_sd, n_samples, rng: RngStream,
                      chunk=200_000):
    """Brute-force E[grad(theta_n, xi_{n+1}) . grad(theta_{n-1}, xi_n) | theta_{n-1}, theta_{n-2}].

    Fresh standard-normal (x, eps) pairs drive one SGDM step between the two
    gradients. Returns (mean, standard error).
    """
    t1 = np.asarray(theta_nm1, dtype=np.float64)
    t2 = np.asarray(theta_nm2, dtype=np.float64)
    ts = np.asarray(theta_star, dtype=np.float64)
    p = t1.size
    g = rng.generator
    acc = _Moments()
    left = n_samples
    while left > 0:
        k = min(chunk, left)
        x1 = g.standard_normal((k, p))
        e1 = noise_sd * g.standard_normal(k)
        x2 = g.standard_normal((k, p))
        e2 = noise_sd * g.standard_normal(k)
        y1 = x1 @ ts + e1
        g1 = (x1 @ t1 - y1)[:, None] * x1
        theta_n = t1 - gamma * g1 + beta * (t1 - t2)
        y2 = x2 @ ts + e2
        g2 = np.einsum("ij,ij->i", x2, theta_n) - y2
        acc.update(g2 * np.einsum("ij,ij->i", x2, g1))
        left -= k
    return float(acc.mean), float(acc.std_error)


def expected_ip3_from_optimum(p, gamma, beta, sigma2):
    """Three-step expectation from theta_0 = theta_star for standard normal x."""
    return -gamma * sigma2 * p - gamma ** 3 * sigma2 * p * (p + 2) + gamma ** 2 * (1 + beta) * sigma2 * p


def ip3_sign_root(p, gamma):
    """The beta at which the three-step expectation changes sign (independent of sigma^2)."""
    return 1.0 / gamma + gamma * (p + 2) - 1.0


def mc_ip3_from_optimum(p, gamma, beta, sigma2, n_samples, rng: RngStream, chunk=200_000):
    """Simulate three SGDM steps from theta_0 = theta_star; return mean and SE of grad_3 . grad_2.

    The problem is translation invariant, so theta_star = 0 is used.
    """
    g = rng.generator
    sd = math.sqrt(sigma2)
    acc = _Moments()
    left = n_samples
    while left > 0:
        k = min(chunk, left)
        xs = [g.standard_normal((k, p)) for _ in range(3)]
        eps = [sd * g.standard_normal(k) for _ in range(3)]
        th_prev = np.zeros((k, p))
        th = np.zeros((k, p))
        grads = []
        for x, e in zip(xs, eps):
            r = np.einsum("ij,ij->i", x, th) - e
            gr = r[:, None] * x
            new = th - gamma * gr + beta * (th - th_prev)
            th_prev, th = th, new
            grads.append(gr)
        acc.update(np.einsum("ij,ij->i", grads[2], grads[1]))
        left -= k
    return float(acc.mean), float(acc.std_error)


def alt_statistic(grad_now, grad_prev, delta_n, delta_nm1, beta):
    a = np.asarray(grad_now) + beta * np.asarray(delta_n)
    b = np.asarray(grad_prev) + beta * np.asarray(delta_nm1)
    return float(a @ b)


def alt_statistic_series(record, beta):
    """Both statistics along a stored trajectory.

    Row ``i`` (iteration n = i + 1) pairs grad_{n+1} with grad_n, where
    delta_n = theta_n - theta_{n-1}. Returns (standard, alternative) arrays.
    """
    th = record.thetas
    gr = record.gradients
    # delta[0] is Delta_0 = 0 (fresh start), delta[m] = theta_m - theta_{m-1}
    delta = np.vstack([np.zeros((1, th.shape[1])), np.diff(th, axis=0)])
    std = np.einsum("ij,ij->i", gr[1:], gr[:-1])
    m = gr.shape[0]
    a = gr[1:] + beta * delta[1:m]
    b = gr[:-1] + beta * delta[:m - 1]
    return std, np.einsum("ij,ij->i", a, b)


def A_beta(beta, K):
    return 1.0 / (1.0 + 2.0 * beta * K + beta * beta)


@dataclass
class TheoryConstants:
    c_strong: float
    L_smooth: float
    M_bound: float
    sigma0_sq: float
    K_scaling: float
    A_beta: float
    Q_beta: float
    R_beta: float
    S_beta: float
    G_bound: float
    delta_sq: float
    beta: float
    gamma: float

    def to_dict(self):
        return asdict(self)


def _window_slice(record, window):
    n = len(record)
    if window is None:
        start, stop = stationary_window(record)[:2]
    else:
        start, stop = window
    start, stop = max(0, start), min(n, stop)
    if stop - start < 2:
        raise InvalidArgument("stationary window is empty")
    return start, stop


def stationary_window(record, frac=0.25, column="loss_estimate"):
    """Last ``frac`` of rows, plus whether the least-squares slope of ``column`` is within 2 SE of zero."""
    n = len(record)
    start = int(n * (1 - frac))
    y = record.column(column)[start:]
    if y.size < 3:
        return start, n, False
    x = np.arange(y.size, dtype=np.float64)
    slope, se = _ls_slope(x, y)
    return start, n, bool(abs(slope) <= 2 * se)


def _ls_slope(x, y):
    x = x - x.mean()
    sxx = float(x @ x)
    slope = float(x @ (y - y.mean())) / sxx
    resid = y - y.mean() - slope * x
    dof = max(1, y.size - 2)
    se = math.sqrt(float(resid @ resid) / dof / sxx)
    return slope, se


def estimate_constants(model, traj, stationary_window=None, reference=None, batch_size=None):
    """Empirical stand-ins for the assumption constants on a quadratic instance.

    ``stationary_window`` is a (start, stop) pair of record rows. The default is
    the last quarter of the run. ``reference`` defaults to the least-squares
    minimizer, which is where the finite-sum objective attains its minimum.

    sigma0^2 refers to the gradient the optimizer actually uses, a mean over
    ``batch_size`` rows drawn without replacement. At the minimizer it equals
    the per-example second moment times (N - B) / (B (N - 1)). The batch size
    defaults to the one in the record's config.
    """
    if model.kind != "quadratic":
        raise UnsupportedError("constants can only be estimated exactly for the quadratic model")
    start, stop = _window_slice(traj, stationary_window)
    ref = empirical_optimum(model) if reference is None else np.asarray(reference)
    eig = np.linalg.eigvalsh(hessian(model))
    c, L = float(eig[0]), float(eig[-1])
    gamma = float(traj.gamma_in_effect[start])
    beta = float(traj.beta_in_effect[start])
    th = traj.thetas
    rows = np.arange(start, stop)
    f_star = full_loss(model, ref)
    gaps = np.array([full_loss(model, th[i + 1]) - f_star for i in rows])
    M = float(gaps.mean() / gamma)
    g0 = per_example_gradients(model, ref)
    if batch_size is None:
        hp = traj.config.get("hp")
        batch_size = getattr(hp, "batch_size", 1)
    N = model.N
    per_example = float(np.mean(np.einsum("ij,ij->i", g0, g0)))
    sigma0_sq = per_example * (N - batch_size) / (batch_size * (N - 1)) if N > 1 else per_example
    delta = np.diff(th, axis=0)[rows]
    prod = np.einsum("ij,ij->i", delta[1:], delta[:-1])
    sq = np.einsum("ij,ij->i", delta, delta)
    K = max(1.0, float(-prod.mean() / sq.mean())) if sq.mean() > 0 else 1.0
    X = model.dataset.xs
    H = hessian(model)
    b = X.T @ model.dataset.ys / model.N
    full_grads = th[rows] @ H - b  # gradient evaluated where the row's stochastic gradient was taken
    G = float(np.sqrt(np.max(np.einsum("ij,ij->i", full_grads, full_grads))))
    dev = traj.gradients[rows] - full_grads
    delta_sq = float(np.mean(np.einsum("ij,ij->i", dev, dev)))
    Ab = A_beta(beta, K)
    return TheoryConstants(c, L, M, sigma0_sq, K, Ab, beta / (1 - beta), (1 - beta) / 2,
                           (G * G + delta_sq) / (2 * (1 - beta)), G, delta_sq, beta, gamma)


def distance_bound(n, constants: TheoryConstants, f0_gap, dist0_sq, gamma):
    """Advisory: Q/(n+1) (f0 - f*) + R/(gamma (n+1)) ||theta0 - theta*||^2 + gamma S."""
    k = constants
    return k.Q_beta / (n + 1) * f0_gap + k.R_beta / (gamma * (n + 1)) * dist0_sq + gamma * k.S_beta


def stationary_gap_bound(constants: TheoryConstants, gamma=None, beta=None):
    """Upper bound (1 + beta) [M - (c/2) gamma sigma0^2 A_beta] on the stationary mean inner product."""
    k = constants
    gamma = k.gamma if gamma is None else gamma
    beta = k.beta if beta is None else beta
    return (1 + beta) * (k.M_bound - 0.5 * k.c_strong * gamma * k.sigma0_sq * k.A_beta)


def gap_optimal_gamma(constants: TheoryConstants):
    """Rates above 2M / (c sigma0^2 A_beta) make the stationary bound negative."""
    k = constants
    return 2 * k.M_bound / (k.c_strong * k.sigma0_sq * k.A_beta)


def check_lemma1(traj, constants: TheoryConstants, gamma, beta, window=None):
    start, stop = _window_slice(traj, window)
    delta = np.diff(traj.thetas, axis=0)[start:stop]
    empirical = float(np.mean(np.einsum("ij,ij->i", delta, delta)))
    bound = gamma * gamma * constants.sigma0_sq * A_beta(beta, constants.K_scaling)
    return {"name": "lemma1_step_lower_bound", "empirical": empirical, "bound": bound,
            "band": None, "pass": bool(empirical >= bound)}


def variance_ratio_bound(constants: TheoryConstants, gamma, factor=8.0):
    k = constants
    num = (k.M_bound - k.L_smooth * gamma * k.sigma0_sq * k.A_beta) ** 2
    return num / (k.M_bound ** 2 * (1 + factor * k.L_smooth / k.c_strong) ** 2) - 1.0


def ratio_gamma(constants: TheoryConstants, lam, factor=8.0):
    """(t, gamma) with t = 1 + sqrt(lam)(1 + factor L / c) and gamma = 2 t M / (L sigma0^2 A_beta)."""
    if not lam > 2:
        raise InvalidArgument("the scaling factor lambda must exceed 2")
    k = constants
    t = 1 + math.sqrt(lam) * (1 + factor * k.L_smooth / k.c_strong)
    return t, 2 * t * k.M_bound / (k.L_smooth * k.sigma0_sq * k.A_beta)


def check_variance_ratio(traj, constants: TheoryConstants, gamma, window=None, lam=4.0, min_samples=1000):
    start, stop = _window_slice(traj, window)
    ip = traj.inner_product[start:stop]
    ip = ip[np.isfinite(ip)]
    if ip.size < min_samples:
        raise InsufficientData(f"variance ratio needs >= {min_samples} inner products, got {ip.size}")
    mean = float(ip.mean())
    var = float(ip.var(ddof=1))
    degenerate = mean * mean <= 1e-300 or var / (mean * mean) > 1e300
    ratio = math.inf if degenerate else var / (mean * mean)
    bound = variance_ratio_bound(constants, gamma)
    t8, g8 = ratio_gamma(constants, lam, 8.0)
    t4, g4 = ratio_gamma(constants, lam, 4.0)
    return {"name": "variance_ratio", "empirical": ratio, "bound": bound, "band": None,
            "pass": bool(ratio >= bound), "degenerate_mean": degenerate, "mean": mean, "variance": var,
            "gamma_for_lambda": {"lambda": lam, "t": t8, "gamma": g8},
            "gamma_for_lambda_4Lc": {"lambda": lam, "t": t4, "gamma": g4}}


def within_band(value, target, se, k=4.0):
    return abs(value - target) <= k * se
