"""Generative models, randomization laws, priors, and Gaussian log-MGF calculus.

The data law is Gaussian with a parametrized mean; randomization is a mean-zero
Gaussian draw.  Log moment generating functions and their convex conjugates are
the building blocks of every normalizer objective downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "CovarianceError",
    "SPDMatrix",
    "gaussian_log_mgf",
    "gaussian_conjugate",
    "GenerativeModel",
    "Randomizer",
    "Prior",
    "sample_model_II",
    "estimate_noise_scale",
]


class CovarianceError(np.linalg.LinAlgError):
    """Raised when a covariance matrix is asymmetric, singular, or not SPD."""


def _check_symmetric(mat, tol=1e-10):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"covariance must be square, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, atol=tol):
        raise CovarianceError("covariance is not symmetric within 1e-10")
    return 0.5 * (mat + mat.T)


class SPDMatrix:
    """Covariance wrapper with a cached Cholesky factor.

    Solves use triangular substitution; the matrix is never inverted
    explicitly.
    """

    def __init__(self, mat):
        self.mat = _check_symmetric(mat)
        try:
            self._cho = cho_factor(self.mat, lower=True)
        except np.linalg.LinAlgError as exc:
            cond = float(np.linalg.cond(self.mat))
            raise CovarianceError(
                f"Cholesky factorization failed; condition estimate {cond:.3e}"
            ) from exc
        self._lower = np.tril(self._cho[0])

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    def solve(self, b):
        return cho_solve(self._cho, np.asarray(b, dtype=float))

    def quad_inv(self, x) -> float:
        """x' Sigma^{-1} x."""
        x = np.asarray(x, dtype=float)
        return float(x @ self.solve(x))

    def matvec(self, x):
        return self.mat @ np.asarray(x, dtype=float)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._lower))))

    def sample(self, rng, size=None):
        """Mean-zero draws with this covariance."""
        if size is None:
            return self._lower @ rng.standard_normal(self.dim)
        return rng.standard_normal((size, self.dim)) @ self._lower.T


def gaussian_log_mgf(lam, mean, cov) -> float:
    """log E exp(lam' Z) for Z ~ N(mean, cov): mean'lam + lam' cov lam / 2."""
    lam = np.asarray(lam, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = _check_symmetric(cov)
    if lam.shape != mean.shape or cov.shape[0] != lam.size:
        raise ValueError("dimension mismatch between lam, mean, cov")
    return float(mean @ lam + 0.5 * lam @ cov @ lam)


def gaussian_conjugate(x, mean, cov) -> float:
    """Convex conjugate of the Gaussian log-MGF: (x-mean)' cov^{-1} (x-mean)/2.

    Always nonnegative; zero exactly at x = mean.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if x.shape != mean.shape:
        raise ValueError("dimension mismatch between x and mean")
    spd = cov if isinstance(cov, SPDMatrix) else SPDMatrix(cov)
    if spd.dim != x.size:
        raise ValueError("dimension mismatch between x and cov")
    return 0.5 * spd.quad_inv(x - mean)


@dataclass(frozen=True, eq=False)
class GenerativeModel:
    """Gaussian data law S ~ N(mu(beta), Sigma_f).

    mean_map and mean_jacobian are callables of the parameter vector; for the
    common linear case use :meth:`linear`.
    """

    mean_map: Callable[[np.ndarray], np.ndarray]
    mean_jacobian: Callable[[np.ndarray], np.ndarray]
    covariance: np.ndarray
    noise_scale: float = 1.0
    # set for linear models; lets problems round-trip through JSON
    design: np.ndarray | None = None
    _spd: SPDMatrix = field(init=False, repr=False)

    def __post_init__(self):
        spd = SPDMatrix(self.covariance)
        object.__setattr__(self, "covariance", spd.mat)
        object.__setattr__(self, "_spd", spd)

    @classmethod
    def linear(cls, design, noise_scale: float = 1.0) -> "GenerativeModel":
        """mu(beta) = design @ beta with isotropic noise."""
        design = np.asarray(design, dtype=float)
        cov = noise_scale**2 * np.eye(design.shape[0])
        return cls(
            mean_map=lambda b: design @ np.asarray(b, dtype=float),
            mean_jacobian=lambda b: design,
            covariance=cov,
            noise_scale=float(noise_scale),
            design=design,
        )

    @property
    def dim(self) -> int:
        return self._spd.dim

    def cov_solve(self, b):
        return self._spd.solve(b)

    def cov_matvec(self, x):
        return self._spd.matvec(x)

    def sample(self, rng, beta, size=None):
        mu = np.asarray(self.mean_map(beta), dtype=float)
        return mu + self._spd.sample(rng, size=size)

    def conjugate(self, s, beta) -> float:
        """(s - mu(beta))' Sigma_f^{-1} (s - mu(beta)) / 2."""
        mu = np.asarray(self.mean_map(beta), dtype=float)
        diff = np.asarray(s, dtype=float) - mu
        return 0.5 * float(diff @ self._spd.solve(diff))

    def log_density(self, s, beta) -> float:
        mu = np.asarray(self.mean_map(beta), dtype=float)
        diff = np.asarray(s, dtype=float) - mu
        quad = float(diff @ self._spd.solve(diff))
        return -0.5 * quad - 0.5 * self._spd.logdet() - 0.5 * self.dim * np.log(2 * np.pi)


@dataclass(frozen=True, eq=False)
class Randomizer:
    """Mean-zero Gaussian randomization law with covariance Sigma_g."""

    covariance: np.ndarray
    scale: float | None = None
    _spd: SPDMatrix = field(init=False, repr=False)
    _diag_sd: np.ndarray | None = field(init=False, repr=False)

    def __post_init__(self):
        spd = SPDMatrix(self.covariance)
        object.__setattr__(self, "covariance", spd.mat)
        object.__setattr__(self, "_spd", spd)
        diag = np.diag(spd.mat)
        off = spd.mat - np.diag(diag)
        if np.max(np.abs(off), initial=0.0) <= 1e-12 * max(np.max(diag), 1e-300):
            object.__setattr__(self, "_diag_sd", np.sqrt(diag))
            if self.scale is None and diag.size and np.allclose(diag, diag[0], rtol=1e-12):
                object.__setattr__(self, "scale", float(np.sqrt(diag[0])))
        else:
            object.__setattr__(self, "_diag_sd", None)

    @classmethod
    def isotropic(cls, scale: float, dim: int) -> "Randomizer":
        if scale <= 0:
            raise ValueError("randomization scale must be positive")
        return cls(covariance=scale**2 * np.eye(dim), scale=float(scale))

    @property
    def dim(self) -> int:
        return self._spd.dim

    @property
    def is_diagonal(self) -> bool:
        return self._diag_sd is not None

    @property
    def diagonal_sd(self) -> np.ndarray:
        if self._diag_sd is None:
            raise ValueError("randomizer covariance is not diagonal")
        return self._diag_sd

    def sample(self, rng, size=None):
        return self._spd.sample(rng, size=size)

    def log_mgf(self, lam) -> float:
        lam = np.asarray(lam, dtype=float)
        return 0.5 * float(lam @ self._spd.matvec(lam))

    def conjugate(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return 0.5 * float(w @ self._spd.solve(w))

    def cov_solve(self, b):
        return self._spd.solve(b)

    def cov_matvec(self, x):
        return self._spd.matvec(x)


def _laplace_mixture_logpdf_terms(beta, w, b1, b2):
    beta = np.asarray(beta, dtype=float)
    l1 = np.log(w) - np.log(2 * b1) - np.abs(beta) / b1
    l2 = np.log(1 - w) - np.log(2 * b2) - np.abs(beta) / b2
    return l1, l2


@dataclass(frozen=True, eq=False)
class Prior:
    """Prior over the inference parameter, exposed through its log density."""

    kind: str
    log_density: Callable[[np.ndarray], float]
    log_density_gradient: Callable[[np.ndarray], np.ndarray]
    # upper bound on the log density's curvature, used for step sizing;
    # zero for flat and for priors whose gradient is bounded
    curvature_bound: float = 0.0

    @classmethod
    def flat(cls) -> "Prior":
        return cls(
            kind="flat",
            log_density=lambda b: 0.0,
            log_density_gradient=lambda b: np.zeros_like(np.asarray(b, dtype=float)),
        )

    @classmethod
    def gaussian(cls, mean: float = 0.0, scale: float = 1.0) -> "Prior":
        if scale <= 0:
            raise ValueError("prior scale must be positive")

        def logpdf(b):
            b = np.asarray(b, dtype=float)
            z = (b - mean) / scale
            return float(-0.5 * np.sum(z**2) - b.size * np.log(scale * np.sqrt(2 * np.pi)))

        def grad(b):
            b = np.asarray(b, dtype=float)
            return -(b - mean) / scale**2

        return cls(
            kind="gaussian",
            log_density=logpdf,
            log_density_gradient=grad,
            curvature_bound=1.0 / scale**2,
        )

    @classmethod
    def laplace_mixture(cls, w: float = 0.90, b1: float = 0.1, b2: float = 1.0) -> "Prior":
        """Two-component Laplace scale mixture, component weights (w, 1-w)."""
        if not 0 < w < 1:
            raise ValueError("mixture weight must lie in (0, 1)")
        if b1 <= 0 or b2 <= 0:
            raise ValueError("mixture scales must be positive")

        def logpdf(b):
            l1, l2 = _laplace_mixture_logpdf_terms(b, w, b1, b2)
            return float(np.sum(np.logaddexp(l1, l2)))

        def grad(b):
            b = np.asarray(b, dtype=float)
            l1, l2 = _laplace_mixture_logpdf_terms(b, w, b1, b2)
            m = np.maximum(l1, l2)
            e1, e2 = np.exp(l1 - m), np.exp(l2 - m)
            # d/db of each component brings down -sign(b)/scale
            num = e1 / b1 + e2 / b2
            return -np.sign(b) * num / (e1 + e2)

        return cls(kind="laplace_mixture", log_density=logpdf, log_density_gradient=grad)


def sample_model_II(X, w: float = 0.90, b1: float = 0.1, b2: float = 1.0, seed: int = 0):
    """Draw (beta, y): coefficients from the Laplace scale mixture, y = X beta + N(0, I).

    Deterministic given the seed.
    """
    X = np.asarray(X, dtype=float)
    if not 0 < w < 1:
        raise ValueError("mixture weight must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n, p = X.shape
    scales = np.where(rng.random(p) < w, b1, b2)
    beta = rng.laplace(loc=0.0, scale=scales)
    y = X @ beta + rng.standard_normal(n)
    return beta, y


def estimate_noise_scale(y, X_selected) -> float:
    """Residual-based noise scale from least squares on the selected columns.

    Falls back to 1.0 when there are too few residual degrees of freedom.
    """
    y = np.asarray(y, dtype=float)
    X_selected = np.atleast_2d(np.asarray(X_selected, dtype=float))
    if X_selected.shape[0] != y.size:
        X_selected = X_selected.T
    n, k = X_selected.shape
    if n <= k + 1:
        return 1.0
    coef, *_ = np.linalg.lstsq(X_selected, y, rcond=None)
    rss = float(np.sum((y - X_selected @ coef) ** 2))
    return float(np.sqrt(rss / (n - k)))
