"""Sampling from the approximate selective posterior.

The selective posterior reweights the prior-times-likelihood by the inverse
probability of the observed selection.  With the normalizer replaced by its
smooth optimization approximation, the log density gradient needs only the
optimal data vector of that inner solve, so unadjusted (or
Metropolis-adjusted) Langevin dynamics apply directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import Prior
from .normalizer import NormalizerProblem, SolveResult, multistage_solve, solve_normalizer
from .optimize import SolverError, minimize_bfgs

__all__ = [
    "PseudoPosterior",
    "SamplerResult",
    "run_sampler",
    "langevin_step",
    "selective_map",
    "effective_sample_size",
    "chain_summaries",
]


def _as_stages(problems) -> list[NormalizerProblem]:
    if isinstance(problems, NormalizerProblem):
        return [problems]
    stages = list(problems)
    if not stages:
        raise ValueError("need at least one selection stage")
    return stages


@dataclass(eq=False)
class PseudoPosterior:
    """Unnormalized approximate selective posterior for a fixed observation.

    Holds the observed data vector, the prior, and one normalizer problem per
    selection stage.  Consecutive density evaluations warm-start the inner
    optimization from the previous solution.
    """

    prior: Prior
    problems: object
    s_obs: np.ndarray
    grad_tol: float = 1e-8
    max_iter: int = 500
    _stages: list = field(init=False, repr=False)
    _warm_x: np.ndarray | None = field(default=None, init=False, repr=False)
    _warm_h: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self._stages = _as_stages(self.problems)
        self.s_obs = np.asarray(self.s_obs, dtype=float)
        model = self._stages[0].model
        for pb in self._stages[1:]:
            if pb.model is not model:
                raise ValueError("stages must share the data model")
        if self.s_obs.size != model.dim:
            raise ValueError("observed data vector has the wrong dimension")

    @property
    def model(self):
        return self._stages[0].model

    def _solve(self, beta) -> SolveResult:
        multi = len(self._stages) > 1
        try:
            if multi:
                res = multistage_solve(
                    self._stages, beta, x0=self._warm_x, inv_hessian0=self._warm_h,
                    grad_tol=self.grad_tol, max_iter=self.max_iter,
                )
            else:
                res = solve_normalizer(
                    self._stages[0], beta, x0=self._warm_x, inv_hessian0=self._warm_h,
                    grad_tol=self.grad_tol, max_iter=self.max_iter,
                )
        except SolverError:
            if self._warm_x is None:
                raise
            self._warm_x = None
            self._warm_h = None
            return self._solve(beta)
        self._warm_x = _raw_solution(self._stages, res, multi)
        self._warm_h = res.inv_hessian
        return res

    def reset_warm_start(self):
        self._warm_x = None
        self._warm_h = None

    def log_density_grad(self, beta):
        """Unnormalized log density, its gradient, and the inner solve."""
        beta = np.asarray(beta, dtype=float)
        res = self._solve(beta)
        model = self.model
        mu = np.asarray(model.mean_map(beta), dtype=float)
        J = np.asarray(model.mean_jacobian(beta), dtype=float)
        ds = self.s_obs - mu
        fs = model.cov_solve(ds)
        val = self.prior.log_density(beta) - 0.5 * float(ds @ fs) - res.value
        grad = self.prior.log_density_gradient(beta) + J.T @ model.cov_solve(self.s_obs - res.optimal_s)
        return float(val), grad, res

    def log_density(self, beta) -> float:
        return self.log_density_grad(beta)[0]

    def default_step_size(self, beta_ref) -> float:
        """Conservative Langevin step from the likelihood curvature at a
        reference point: 1 / (8 L), L the largest eigenvalue of J' Sigma^-1 J
        plus any Gaussian prior curvature."""
        beta_ref = np.asarray(beta_ref, dtype=float)
        J = np.asarray(self.model.mean_jacobian(beta_ref), dtype=float)
        M = J.T @ np.linalg.solve(self.model.covariance, J)
        curv = float(np.max(np.linalg.eigvalsh(0.5 * (M + M.T)))) if M.size else 1.0
        curv += self.prior.curvature_bound
        return 1.0 / (8.0 * max(curv, 1e-12))


def _raw_solution(stages, res: SolveResult, multi: bool):
    """Concatenated optimizer vector for warm-starting the next solve."""
    form = stages[0].formulation
    if form in ("primal_full", "primal_reduced", "multistage"):
        if multi:
            return np.concatenate([res.optimal_s] + list(res.optimal_o))
        return np.concatenate([res.optimal_s, res.optimal_o])
    if form == "dual":
        if multi:
            return np.concatenate(list(res.optimal_u))
        return res.optimal_u
    return None


def langevin_step(beta, grad, step_size: float, rng) -> np.ndarray:
    """One unadjusted Langevin move: drift up the gradient plus isotropic
    noise with variance 2 * step."""
    beta = np.asarray(beta, dtype=float)
    return beta + step_size * grad + np.sqrt(2.0 * step_size) * rng.standard_normal(beta.size)


@dataclass
class SamplerResult:
    samples: np.ndarray
    log_densities: np.ndarray
    step_size: float
    n_burn: int
    divergent_steps: int
    accept_rate: float | None
    method: str
    seed: object = None


def run_sampler(
    posterior: PseudoPosterior,
    beta_init,
    n_burn: int = 5000,
    n_keep: int = 20000,
    step_size: float | None = None,
    seed=0,
    method: str = "ula",
    max_halvings: int = 5,
    max_divergent_fraction: float = 0.20,
) -> SamplerResult:
    """Langevin chain on the approximate selective posterior.

    method "ula" runs unadjusted Langevin; "mala" adds a Metropolis
    correction.  A proposal with non-finite density or a failed inner solve
    is retried with the step halved, for that step only; more than 20% of
    steps needing this treatment aborts the run with advice to shrink the
    step size.
    """
    if method not in ("ula", "mala"):
        raise ValueError(f"unknown sampler method {method!r}")
    if n_keep < 1:
        raise ValueError("need at least one kept draw")
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta_init, dtype=float).copy()
    if step_size is None:
        step_size = posterior.default_step_size(beta)
    step = float(step_size)

    val, grad, _ = posterior.log_density_grad(beta)
    if not (np.isfinite(val) and np.all(np.isfinite(grad))):
        raise SolverError("initial point has non-finite log density")

    total = n_burn + n_keep
    samples = np.empty((n_keep, beta.size))
    logdens = np.empty(n_keep)
    divergent = 0
    accepted = 0
    proposed = 0
    for it in range(total):
        local = step
        for attempt in range(max_halvings + 1):
            prop = langevin_step(beta, grad, local, rng)
            try:
                pval, pgrad, _ = posterior.log_density_grad(prop)
                finite = np.isfinite(pval) and np.all(np.isfinite(pgrad))
            except SolverError:
                finite = False
            if finite:
                break
            posterior.reset_warm_start()
            if attempt == 0:
                divergent += 1
            local *= 0.5
        else:
            raise SolverError(
                f"step {it} still divergent after {max_halvings} halvings; reduce the step size"
            )
        if method == "mala":
            proposed += 1
            fwd = prop - beta - local * grad
            bwd = beta - prop - local * pgrad
            log_alpha = pval - val + (float(fwd @ fwd) - float(bwd @ bwd)) / (4.0 * local)
            if np.log(rng.random()) < log_alpha:
                beta, val, grad = prop, pval, pgrad
                accepted += 1
        else:
            beta, val, grad = prop, pval, pgrad
        if it >= n_burn:
            samples[it - n_burn] = beta
            logdens[it - n_burn] = val
    if divergent > max_divergent_fraction * total:
        raise SolverError(
            f"{divergent} of {total} steps diverged (> {max_divergent_fraction:.0%}); "
            "reduce the step size"
        )

    return SamplerResult(
        samples=samples,
        log_densities=logdens,
        step_size=step,
        n_burn=n_burn,
        divergent_steps=divergent,
        accept_rate=(accepted / proposed) if method == "mala" and proposed else None,
        method=method,
        seed=seed,
    )


def selective_map(posterior: PseudoPosterior, beta_init, grad_tol: float = 1e-6, max_iter: int = 200):
    """Mode of the approximate selective posterior by BFGS."""

    def fun_grad(beta):
        try:
            val, grad, _ = posterior.log_density_grad(beta)
        except SolverError:
            return np.inf, None
        if not np.isfinite(val):
            return np.inf, None
        return -val, -grad

    res = minimize_bfgs(fun_grad, np.asarray(beta_init, dtype=float), grad_tol=grad_tol, max_iter=max_iter)
    return res.x


def effective_sample_size(chain) -> float:
    """Initial-positive-sequence estimator from the chain autocovariance."""
    x = np.asarray(chain, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = float(x @ x) / n
    if var <= 0:
        return float(n)
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real / n
    rho = acov / acov[0]
    # sum consecutive pairs while they stay positive
    tau = 1.0
    k = 1
    while k + 1 < n:
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
        k += 2
    return float(min(n, n / tau))


def chain_summaries(samples, level: float = 0.90) -> dict:
    """Per-coordinate posterior mean, sd, equal-tailed interval, and ESS."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("empty chain")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    lo_q = 0.5 * (1.0 - level)
    lower, upper = np.quantile(samples, [lo_q, 1.0 - lo_q], axis=0)
    return {
        "mean": samples.mean(axis=0),
        "sd": samples.std(axis=0, ddof=1),
        "lower": lower,
        "upper": upper,
        "level": level,
        "ess": np.array([effective_sample_size(samples[:, j]) for j in range(samples.shape[1])]),
    }
