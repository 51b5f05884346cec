"""Exact Gaussian-process machinery used as ground truth and reference.

Kernels, prior sampling, posterior prediction, Gaussian KL, exact
conditioning, and the grid-based sparse posterior mean with its Jacobi
iteration.  Everything here is plain numpy; functions are pure and safe to
call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Kernel", "EQ", "Matern52", "WeaklyPeriodic",
    "GaussianJoint", "MeanFieldPrediction",
    "kernel_eval", "sample_prior", "posterior", "diagonal_of",
    "gaussian_kl", "diagonal_kl", "gaussian_conditional", "joint_logpdf",
    "sparse_mean_direct", "sparse_mean_jacobi", "JacobiResult",
    "chol_with_jitter", "diagonal_map",
]

_JITTERS = (1e-8, 1e-7, 1e-6)


class Kernel:
    """Stationary covariance function with unit variance (k(x, x) = 1)."""

    def __call__(self, x, y) -> np.ndarray:
        raise NotImplementedError


def _check_scale(name: str, value: float) -> float:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return float(value)


@dataclass(frozen=True)
class EQ(Kernel):
    """Exponentiated quadratic: exp(-(x - y)^2 / (2 l^2))."""

    lengthscale: float = 0.25

    def __post_init__(self):
        _check_scale("lengthscale", self.lengthscale)

    def __call__(self, x, y):
        d = np.subtract.outer(np.asarray(x, float), np.asarray(y, float))
        return np.exp(-0.5 * (d / self.lengthscale) ** 2)


@dataclass(frozen=True)
class Matern52(Kernel):
    """Matern-5/2: (1 + s5 r + 5 r^2 / 3) exp(-s5 r) with r = |x - y| / l, s5 = sqrt(5)."""

    lengthscale: float = 0.25

    def __post_init__(self):
        _check_scale("lengthscale", self.lengthscale)

    def __call__(self, x, y):
        r = np.abs(np.subtract.outer(np.asarray(x, float), np.asarray(y, float))) / self.lengthscale
        s5r = np.sqrt(5.0) * r
        return (1.0 + s5r + (5.0 / 3.0) * r * r) * np.exp(-s5r)


@dataclass(frozen=True)
class WeaklyPeriodic(Kernel):
    """Periodic pattern that decays over a longer length scale.

    exp(-(x-y)^2 / (2 ld^2) - (2 / lp^2) sin^2(pi (x - y) / p))
    """

    decay_lengthscale: float = 0.5
    periodic_lengthscale: float = 1.0
    period: float = 0.25

    def __post_init__(self):
        _check_scale("decay_lengthscale", self.decay_lengthscale)
        _check_scale("periodic_lengthscale", self.periodic_lengthscale)
        _check_scale("period", self.period)

    def __call__(self, x, y):
        d = np.subtract.outer(np.asarray(x, float), np.asarray(y, float))
        decay = -0.5 * (d / self.decay_lengthscale) ** 2
        per = -(2.0 / self.periodic_lengthscale**2) * np.sin(np.pi * d / self.period) ** 2
        return np.exp(decay + per)


def kernel_eval(kernel: Kernel, x, y) -> np.ndarray:
    """Gram matrix G[i, j] = k(x_i, y_j)."""
    return kernel(x, y)


@dataclass
class GaussianJoint:
    """Joint Gaussian over a fixed set of points, plus observation noise."""

    mean: np.ndarray
    cov: np.ndarray
    noise_var: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, float)
        self.cov = np.asarray(self.cov, float)
        self.noise_var = float(self.noise_var)
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ValueError(f"cov shape {self.cov.shape} does not match mean length {n}")
        if self.noise_var < 0:
            raise ValueError("noise_var must be non-negative")

    def __len__(self):
        return self.mean.shape[0]

    @property
    def noisy_cov(self) -> np.ndarray:
        return self.cov + self.noise_var * np.eye(len(self))


@dataclass
class MeanFieldPrediction:
    """Per-point mean and variance with a shared observation-noise variance."""

    mean: np.ndarray
    var: np.ndarray
    noise_var: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, float)
        self.var = np.asarray(self.var, float)
        self.noise_var = float(self.noise_var)
        if self.mean.shape != self.var.shape:
            raise ValueError(f"mean shape {self.mean.shape} != var shape {self.var.shape}")
        if np.any(self.var < 0) or self.noise_var < 0:
            raise ValueError("variances must be non-negative")

    def __len__(self):
        return self.mean.shape[0]

    def as_joint(self) -> GaussianJoint:
        return GaussianJoint(self.mean, np.diag(self.var), self.noise_var)


def chol_with_jitter(mat: np.ndarray, jitters=_JITTERS) -> np.ndarray:
    """Cholesky factor after adding the smallest workable jitter to the diagonal."""
    if mat.shape[0] == 0:
        return np.zeros((0, 0))
    eye = np.eye(mat.shape[0])
    for jitter in jitters:
        try:
            return np.linalg.cholesky(mat + jitter * eye)
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError(
        f"Cholesky failed for {mat.shape[0]}x{mat.shape[0]} matrix even with jitter {jitters[-1]}"
    )


def sample_prior(kernel: Kernel, x, noise_var: float, rng) -> np.ndarray:
    """Draw y = L z + eps with L the (jittered) Cholesky factor of the Gram matrix."""
    x = np.asarray(x, float)
    chol = chol_with_jitter(kernel(x, x))
    y = chol @ rng.standard_normal(x.shape[0])
    if noise_var > 0:
        y = y + np.sqrt(noise_var) * rng.standard_normal(x.shape[0])
    return y


def posterior(kernel: Kernel, x_c, y_c, x_t, noise_var: float) -> GaussianJoint:
    """Exact GP regression posterior at `x_t` given noisy observations (x_c, y_c).

    An empty context returns the prior.  `noise_var` is both the assumed
    observation noise on the context and the noise carried by the returned
    joint.
    """
    x_c, y_c, x_t = np.asarray(x_c, float), np.asarray(y_c, float), np.asarray(x_t, float)
    k_tt = kernel(x_t, x_t)
    if x_c.shape[0] == 0:
        return GaussianJoint(np.zeros(x_t.shape[0]), k_tt, noise_var)
    k_cc = kernel(x_c, x_c) + noise_var * np.eye(x_c.shape[0])
    k_tc = kernel(x_t, x_c)
    chol = chol_with_jitter(k_cc, jitters=(0.0,) + _JITTERS if noise_var > 0 else _JITTERS)
    alpha = _cho_solve(chol, y_c)
    v = _cho_solve(chol, k_tc.T)
    mean = k_tc @ alpha
    cov = k_tt - k_tc @ v
    cov = 0.5 * (cov + cov.T)
    return GaussianJoint(mean, cov, noise_var)


def _cho_solve(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.solve(chol.T, np.linalg.solve(chol, b))


def diagonal_of(joint: GaussianJoint) -> MeanFieldPrediction:
    """Drop correlations: keep the mean, the diagonal of cov, and the noise."""
    return MeanFieldPrediction(joint.mean.copy(), np.diag(joint.cov).copy(), joint.noise_var)


def gaussian_kl(p: GaussianJoint, q: GaussianJoint) -> float:
    """KL(p || q) in nats with each side's observation noise folded into its covariance."""
    if len(p) != len(q):
        raise ValueError(f"dimension mismatch: {len(p)} vs {len(q)}")
    n = len(p)
    if n == 0:
        return 0.0
    sp = p.noisy_cov
    sq = q.noisy_cov
    lq = np.linalg.cholesky(sq)
    lp = chol_with_jitter(sp, jitters=(0.0,) + _JITTERS)
    # trace(Sq^-1 Sp) via the Cholesky factors
    a = np.linalg.solve(lq, lp)
    trace = np.sum(a * a)
    r = np.linalg.solve(lq, q.mean - p.mean)
    quad = float(r @ r)
    logdet_q = 2.0 * np.sum(np.log(np.diag(lq)))
    logdet_p = 2.0 * np.sum(np.log(np.diag(lp)))
    return 0.5 * (trace + quad - n + logdet_q - logdet_p)


def diagonal_kl(p: MeanFieldPrediction, q: MeanFieldPrediction) -> float:
    """KL(p || q) between independent-Gaussian predictions (noise folded in).

    Computed coordinatewise, so KL of a prediction from itself is exactly 0.
    """
    if len(p) != len(q):
        raise ValueError(f"dimension mismatch: {len(p)} vs {len(q)}")
    sp = p.var + p.noise_var
    sq = q.var + q.noise_var
    ratio = sp / sq
    return float(0.5 * np.sum(np.log(sq / sp) + ratio - 1.0 + (p.mean - q.mean) ** 2 / sq))


def gaussian_conditional(joint: GaussianJoint, observed_idx, observed_values,
                         observed_noise_var: float = 0.0) -> GaussianJoint:
    """Condition a joint Gaussian on noisy observations of selected coordinates.

    Returns the conditional of the remaining coordinates, in their original
    relative order.  The joint's own `noise_var` is passed through unchanged.
    """
    observed_idx = np.asarray(observed_idx, int)
    observed_values = np.asarray(observed_values, float)
    if observed_idx.size == 0:
        return GaussianJoint(joint.mean.copy(), joint.cov.copy(), joint.noise_var)
    if len(set(observed_idx.tolist())) != observed_idx.size:
        raise ValueError("observed indices must be distinct")
    if observed_idx.size and (observed_idx.min() < 0 or observed_idx.max() >= len(joint)):
        raise ValueError("observed index out of range")
    rest = np.setdiff1d(np.arange(len(joint)), observed_idx)
    s_oo = joint.cov[np.ix_(observed_idx, observed_idx)] + observed_noise_var * np.eye(observed_idx.size)
    s_ro = joint.cov[np.ix_(rest, observed_idx)]
    s_rr = joint.cov[np.ix_(rest, rest)]
    chol = np.linalg.cholesky(s_oo)
    resid = observed_values - joint.mean[observed_idx]
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, resid))
    gain = np.linalg.solve(chol.T, np.linalg.solve(chol, s_ro.T)).T
    mean = joint.mean[rest] + s_ro @ alpha
    cov = s_rr - gain @ s_ro.T
    cov = 0.5 * (cov + cov.T)
    return GaussianJoint(mean, cov, joint.noise_var)


def joint_logpdf(joint: GaussianJoint, y) -> float:
    """Log density of y under N(mean, cov + noise_var I)."""
    y = np.asarray(y, float)
    n = len(joint)
    chol = chol_with_jitter(joint.noisy_cov, jitters=(0.0,) + _JITTERS)
    r = np.linalg.solve(chol, y - joint.mean)
    return float(-0.5 * (n * np.log(2.0 * np.pi) + 2.0 * np.sum(np.log(np.diag(chol))) + r @ r))


# -- grid-based sparse posterior mean ----------------------------------------


@dataclass
class JacobiResult:
    """Iterate-based sparse mean plus the linear-system residual per iteration."""

    mean: np.ndarray
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _sparse_system(kernel: Kernel, grid, x_c, y_c, x_t):
    grid = np.asarray(grid, float)
    x_c, y_c, x_t = np.asarray(x_c, float), np.asarray(y_c, float), np.asarray(x_t, float)
    k_z = kernel(grid, grid)
    k_zx = kernel(grid, x_c)
    k_tz = kernel(x_t, grid)
    a = k_z + k_zx @ k_zx.T
    u = k_zx @ y_c
    return k_z, k_tz, a, u


def sparse_mean_direct(kernel: Kernel, grid, x_c, y_c, x_t) -> np.ndarray:
    """Dense solve of the inducing-point mean: K_tz (K_z + K_zx K_xz)^-1 K_zx y."""
    _, k_tz, a, u = _sparse_system(kernel, grid, x_c, y_c, x_t)
    return k_tz @ np.linalg.solve(a, u)


def sparse_mean_jacobi(kernel: Kernel, grid, x_c, y_c, x_t, iters: int) -> JacobiResult:
    """Jacobi iteration for the inducing-point mean on a uniform grid.

    Splits K_z = D + O into its diagonal and off-diagonal parts and iterates
    v <- D^-1 (u - O v - K_zx K_xz v) with u = K_zx y, returning
    K_tz v after `iters` steps.  Divergence (spectral radius >= 1) is not
    masked: the per-iteration residual ||u - A v|| is reported alongside.
    """
    k_z, k_tz, a, u = _sparse_system(kernel, grid, x_c, y_c, x_t)
    d = np.diag(k_z).copy()
    if np.any(d == 0):
        raise ZeroDivisionError("zero diagonal in the grid Gram matrix")
    off = a - np.diag(d)  # O + K_zx K_xz
    v = np.zeros_like(u)
    residuals = np.zeros(iters)
    for r in range(iters):
        v = (u - off @ v) / d
        residuals[r] = np.linalg.norm(u - a @ v)
    return JacobiResult(k_tz @ v, residuals)


def diagonal_map(kernel: Kernel, noise_var: float):
    """Prediction-map callable producing the exact marginal means and variances.

    The returned function maps (x_c, y_c, x_t) to a MeanFieldPrediction whose
    mean/variance are the exact GP posterior marginals; correlations are
    dropped and the observation noise is carried separately.
    """

    def predict(x_c, y_c, x_t) -> MeanFieldPrediction:
        return diagonal_of(posterior(kernel, x_c, y_c, x_t, noise_var))

    return predict
