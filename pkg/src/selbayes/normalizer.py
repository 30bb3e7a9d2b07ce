"""Approximate log selection probabilities by smooth convex optimization.

The intractable normalizer of a selective posterior is the probability that
the data and randomization land in the selection region.  Here that
probability is approximated by minimizing a sum of Gaussian conjugates plus a
barrier over the region, in one of several equivalent-up-to-smoothing forms:

* primal_full:    over the data vector and all optimization variables;
* primal_reduced: over the data vector and active variables only, with the
                  inactive block integrated out exactly (interval masses);
* dual:           over one multiplier per optimization variable, using the
                  barrier conjugates;
* chernoff_dual:  the hard-constraint version whose value is a certified
                  upper bound on the exact log selection probability.

Multi-stage selection chains the per-stage terms with a shared data vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve, null_space
from scipy.special import log_ndtr, ndtr

from .barriers import (
    region_barrier_value_grad,
    region_conjugate_value_grad,
    sign_barrier,
    sign_barrier_grad,
)
from .models import GenerativeModel, Randomizer, SPDMatrix
from .optimize import MinimizeResult, SolverError, minimize_bfgs, minimize_proximal
from .queries import InversionMap, SelectionRegion

__all__ = [
    "FORMULATIONS",
    "NormalizerProblem",
    "SolveResult",
    "MCEstimate",
    "log_inactive_volume",
    "primal_full_solve",
    "primal_reduced_solve",
    "dual_solve",
    "chernoff_dual_solve",
    "multistage_solve",
    "solve_normalizer",
    "mc_selection_probability",
]

FORMULATIONS = ("primal_full", "primal_reduced", "dual", "chernoff_dual", "multistage")

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(eq=False)
class NormalizerProblem:
    """One selection stage plus the data law, ready to be solved.

    Treated as immutable after construction; derived matrices are cached on
    first use.
    """

    model: GenerativeModel
    randomizer: Randomizer
    map: InversionMap
    region: SelectionRegion
    formulation: str = "primal_reduced"
    inactive_barrier: str = "cube"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"unknown formulation {self.formulation!r}")
        if self.inactive_barrier not in ("cube", "log_cube"):
            raise ValueError(f"unknown inactive barrier {self.inactive_barrier!r}")
        if self.model.dim != self.map.dim_data:
            raise ValueError("model dimension disagrees with the map's data dimension")
        if self.randomizer.dim != self.map.dim_opt:
            raise ValueError("randomizer dimension disagrees with the map")
        if self.region.n_active != self.map.n_active:
            raise ValueError("region and map disagree on the active count")
        if not self.region.bound_from_active:
            if self.region.n_active + self.region.n_inactive != self.map.dim_opt:
                raise ValueError("region dimension disagrees with the map")
        if self.formulation in ("primal_reduced", "multistage") and not self.randomizer.is_diagonal:
            raise ValueError("reduced formulations require a diagonal randomizer covariance")

    def cached(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    def rand_cov_perm(self) -> SPDMatrix:
        """Randomizer covariance in the map's active-first coordinate order."""

        def build():
            perm = self.map.perm
            return SPDMatrix(self.randomizer.covariance[np.ix_(perm, perm)])

        return self.cached("rand_cov_perm", build)

    def rand_sd_perm(self) -> np.ndarray:
        return self.cached("rand_sd_perm", lambda: self.randomizer.diagonal_sd[self.map.perm])

    def quad_mat(self) -> np.ndarray:
        """D Sigma_f D' + Sigma_g in permuted order (dual quadratic)."""

        def build():
            D = self.map.D
            return D @ (self.model.covariance @ D.T) + self.rand_cov_perm().mat

        return self.cached("quad_mat", build)

    def p_lu(self):
        return self.cached("p_lu", lambda: lu_factor(self.map.P))


@dataclass
class SolveResult:
    """Outcome of one normalizer solve; value approximates the log selection
    probability at the supplied parameter."""

    value: float
    optimal_s: np.ndarray
    optimal_o: object
    optimal_u: object
    iterations: int
    converged: bool
    gradient_norm: float
    inv_hessian: np.ndarray | None = None


@dataclass
class MCEstimate:
    estimate: float
    std_error: float
    log_estimate: float
    log_std_error: float
    draws: int
    hits: int
    zero_hits: bool


# ---------------------------------------------------------------------------
# stable Gaussian interval masses


def _log_gauss_interval(t_lo, t_hi):
    """log(Phi(t_hi) - Phi(t_lo)) with pdf/mass ratios, stable in both tails.

    Returns (logmass, r_lo, r_hi) where r = phi(t)/mass; derivatives of
    logmass are +r_hi in t_hi and -r_lo in t_lo.
    """
    t_lo = np.asarray(t_lo, dtype=float)
    t_hi = np.asarray(t_hi, dtype=float)
    t_lo, t_hi = np.broadcast_arrays(t_lo, t_hi)
    logmass = np.empty_like(t_lo)

    left = t_hi <= 0
    right = (~left) & (t_lo >= 0)
    mid = ~(left | right)
    if np.any(left):
        a, b = t_lo[left], t_hi[left]
        lb = log_ndtr(b)
        la = log_ndtr(a)
        logmass[left] = lb + np.log1p(-np.exp(np.minimum(la - lb, -1e-300)))
    if np.any(right):
        a, b = t_lo[right], t_hi[right]
        la = log_ndtr(-a)
        lb = log_ndtr(-b)
        logmass[right] = la + np.log1p(-np.exp(np.minimum(lb - la, -1e-300)))
    if np.any(mid):
        logmass[mid] = np.log(ndtr(t_hi[mid]) - ndtr(t_lo[mid]))

    with np.errstate(invalid="ignore"):
        logpdf_lo = np.where(np.isinf(t_lo), -np.inf, -0.5 * t_lo**2 - _LOG_SQRT_2PI)
        logpdf_hi = np.where(np.isinf(t_hi), -np.inf, -0.5 * t_hi**2 - _LOG_SQRT_2PI)
    r_lo = np.exp(logpdf_lo - logmass)
    r_hi = np.exp(logpdf_hi - logmass)
    return logmass, r_lo, r_hi


def _interval_terms(alpha, bounds, sd):
    """Summed log interval masses and derivatives in alpha and in the bound."""
    bounds = np.broadcast_to(np.asarray(bounds, dtype=float), alpha.shape)
    sd = np.broadcast_to(np.asarray(sd, dtype=float), alpha.shape)
    with np.errstate(invalid="ignore"):
        t_hi = (bounds + alpha) / sd
        t_lo = (alpha - bounds) / sd
    logmass, r_lo, r_hi = _log_gauss_interval(t_lo, t_hi)
    d_alpha = (r_hi - r_lo) / sd
    d_bound = (r_hi + r_lo) / sd
    return float(np.sum(logmass)), d_alpha, d_bound


def log_inactive_volume(o_active, s, mapping: InversionMap, region: SelectionRegion, tau) -> float:
    """Exact log probability mass of the inactive block of the selection region
    under the Gaussian randomization, at fixed data and active variables."""
    o_active = np.asarray(o_active, dtype=float)
    s = np.asarray(s, dtype=float)
    m = mapping.n_active
    if o_active.size != m:
        raise ValueError("active variable vector has wrong length")
    n_inact = mapping.dim_opt - m
    if n_inact == 0:
        return 0.0
    alpha = mapping.D_inactive @ s + mapping.P_inactive_active @ o_active + mapping.q_inactive
    if region.bound_from_active:
        bounds = np.full(n_inact, region.signs[0] * o_active[0])
        if bounds[0] <= 0:
            return -np.inf
    else:
        bounds = region.inactive_bounds
    logmass, _, _ = _log_gauss_interval(
        (alpha - bounds) / np.broadcast_to(tau, alpha.shape),
        (alpha + bounds) / np.broadcast_to(tau, alpha.shape),
    )
    return float(np.sum(logmass))


# ---------------------------------------------------------------------------
# primal solves


def _default_primal_o(problem: NormalizerProblem) -> np.ndarray:
    m = problem.map.n_active
    o = np.zeros(problem.map.dim_opt)
    o[:m] = problem.region.signs
    return o


def _interior_opt(problem: NormalizerProblem, o, shrink: float = 0.99) -> np.ndarray:
    """Pull a point strictly inside the region (used for warm starts)."""
    o = np.asarray(o, dtype=float).copy()
    m = problem.map.n_active
    signs = problem.region.signs
    o[:m] = signs * np.maximum(signs * o[:m], 1e-6)
    if problem.map.dim_opt > m:
        if problem.region.bound_from_active:
            bound = signs[0] * o[0]
        else:
            bound = problem.region.inactive_bounds
        o[m:] = np.clip(o[m:], -shrink * bound, shrink * bound)
    return o


def primal_full_solve(
    problem: NormalizerProblem,
    beta_star,
    x0=None,
    inv_hessian0=None,
    grad_tol: float = 1e-8,
    max_iter: int = 500,
) -> SolveResult:
    """Minimize over (data, all optimization variables) with region barriers."""
    model, mapping, region = problem.model, problem.map, problem.region
    mu = np.asarray(model.mean_map(beta_star), dtype=float)
    D, P, q = mapping.D, mapping.P, mapping.q
    d = mapping.dim_data
    rand = problem.rand_cov_perm()

    def fun_grad(x):
        s, o = x[:d], x[d:]
        bval, bgrad = region_barrier_value_grad(o, region, inactive=problem.inactive_barrier)
        if not np.isfinite(bval):
            return np.inf, None
        w = D @ s + P @ o + q
        gw = rand.solve(w)
        ds = s - mu
        fs = model.cov_solve(ds)
        f = 0.5 * float(ds @ fs) + 0.5 * float(w @ gw) + bval
        grad = np.concatenate([fs + D.T @ gw, P.T @ gw + bgrad])
        return f, grad

    if x0 is None:
        x0 = np.concatenate([mu, _default_primal_o(problem)])
    res = minimize_bfgs(fun_grad, x0, grad_tol=grad_tol, max_iter=max_iter, inv_hessian0=inv_hessian0)
    return SolveResult(
        value=-res.fun,
        optimal_s=res.x[:d],
        optimal_o=res.x[d:],
        optimal_u=None,
        iterations=res.iterations,
        converged=res.converged,
        gradient_norm=res.grad_norm,
        inv_hessian=res.inv_hessian,
    )


def primal_reduced_solve(
    problem: NormalizerProblem,
    beta_star,
    x0=None,
    inv_hessian0=None,
    grad_tol: float = 1e-8,
    max_iter: int = 500,
) -> SolveResult:
    """Minimize over (data, active variables) with the inactive block
    integrated out exactly; requires a diagonal randomizer."""
    model, mapping, region = problem.model, problem.map, problem.region
    mu = np.asarray(model.mean_map(beta_star), dtype=float)
    m = mapping.n_active
    d = mapping.dim_data
    sd = problem.rand_sd_perm()
    var_act = sd[:m] ** 2
    sd_inact = sd[m:]
    DE, PE, qE = mapping.D_active, mapping.P_active, mapping.q_active
    DI, PIE, qI = mapping.D_inactive, mapping.P_inactive_active, mapping.q_inactive
    signs = region.signs
    cone = region.bound_from_active
    n_inact = mapping.dim_opt - m

    def fun_grad(x):
        s, oE = x[:d], x[d:]
        if m and np.any(signs * oE <= 0):
            return np.inf, None
        ds = s - mu
        fs = model.cov_solve(ds)
        f = 0.5 * float(ds @ fs)
        grad_s = fs.copy()
        grad_o = np.zeros(m)
        if m:
            wE = DE @ s + PE @ oE + qE
            gwE = wE / var_act
            f += 0.5 * float(wE @ gwE)
            grad_s += DE.T @ gwE
            grad_o += PE.T @ gwE
            f += float(np.sum(sign_barrier(oE, signs)))
            grad_o += sign_barrier_grad(oE, signs)
        if n_inact:
            alpha = DI @ s + PIE @ oE + qI
            bounds = signs[0] * oE[0] if cone else region.inactive_bounds
            logB, d_alpha, d_bound = _interval_terms(alpha, bounds, sd_inact)
            f -= logB
            grad_s -= DI.T @ d_alpha
            grad_o -= PIE.T @ d_alpha
            if cone:
                grad_o[0] -= signs[0] * float(np.sum(d_bound))
        return f, np.concatenate([grad_s, grad_o])

    if x0 is None:
        x0 = np.concatenate([mu, signs.astype(float)])
    res = minimize_bfgs(fun_grad, x0, grad_tol=grad_tol, max_iter=max_iter, inv_hessian0=inv_hessian0)
    return SolveResult(
        value=-res.fun,
        optimal_s=res.x[:d],
        optimal_o=res.x[d:],
        optimal_u=None,
        iterations=res.iterations,
        converged=res.converged,
        gradient_norm=res.grad_norm,
        inv_hessian=res.inv_hessian,
    )


# ---------------------------------------------------------------------------
# dual solves


def _feasible_dual_start(problem: NormalizerProblem, pull: float = 0.5):
    """A multiplier with strictly feasible conjugate arguments: the active
    components of P'u sit at -pull * sign, the inactive ones at zero."""
    mapping = problem.map
    m = mapping.n_active
    v0 = np.zeros(mapping.dim_opt)
    if m:
        v0[:m] = -pull * problem.region.signs
    return np.linalg.solve(mapping.P.T, v0)


def dual_solve(
    problem: NormalizerProblem,
    beta_star,
    x0=None,
    inv_hessian0=None,
    grad_tol: float = 1e-8,
    max_iter: int = 500,
) -> SolveResult:
    """Minimize the conjugate-form objective over one multiplier per
    optimization variable.  The minimum itself approximates the log selection
    probability; the optimal data vector is recovered from stationarity."""
    mapping, region = problem.map, problem.region
    if region.bound_from_active:
        raise ValueError("dual form unavailable for a data-dependent inactive bound")
    model = problem.model
    mu = np.asarray(model.mean_map(beta_star), dtype=float)
    D, P, q = mapping.D, mapping.P, mapping.q
    m = mapping.n_active
    M = problem.quad_mat()
    Dmu = D @ mu
    lin = Dmu + q

    bounds = region.inactive_bounds if region.n_inactive else np.zeros(0)
    infinite = np.flatnonzero(np.isinf(bounds)) + m

    def fun_grad(u):
        v = P.T @ u
        cval, roots = region_conjugate_value_grad(v, region, inactive=problem.inactive_barrier)
        if not np.isfinite(cval):
            return np.inf, None
        Mu = M @ u
        f = float(lin @ u) + 0.5 * float(u @ Mu) + cval
        grad = lin + Mu + P @ roots
        return f, grad

    if infinite.size:
        # coordinates with no constraint force the matching components of P'u
        # to vanish; solve on that subspace
        C = P[:, infinite].T
        N = null_space(C)
        if N.shape[1] == 0:
            # only reachable when every coordinate is unconstrained: the
            # selection event has probability one and u = 0 is optimal
            u = np.zeros(mapping.dim_opt)
            return SolveResult(
                value=0.0,
                optimal_s=mu + model.cov_matvec(D.T @ u),
                optimal_o=None,
                optimal_u=u,
                iterations=0,
                converged=True,
                gradient_norm=0.0,
                inv_hessian=None,
            )

        def fun_grad_t(t):
            f, g = fun_grad(N @ t)
            return (f, None) if g is None else (f, N.T @ g)

        t0 = np.linalg.lstsq(P.T @ N, _project_v0(problem), rcond=None)[0] if m else np.zeros(N.shape[1])
        f0, _ = fun_grad_t(t0)
        if not np.isfinite(f0):
            raise SolverError("no feasible dual starting point on the constrained subspace")
        res = minimize_bfgs(fun_grad_t, t0, grad_tol=grad_tol, max_iter=max_iter)
        u = N @ res.x
        H = None
    else:
        if x0 is None:
            x0 = _feasible_dual_start(problem) if m else np.zeros(mapping.dim_opt)
        f0, _ = fun_grad(np.asarray(x0, dtype=float))
        if not np.isfinite(f0):
            x0 = _feasible_dual_start(problem) if m else np.zeros(mapping.dim_opt)
            inv_hessian0 = None
        res = minimize_bfgs(fun_grad, x0, grad_tol=grad_tol, max_iter=max_iter, inv_hessian0=inv_hessian0)
        u = res.x
        H = res.inv_hessian
    v = P.T @ u
    _, roots = region_conjugate_value_grad(v, region, inactive=problem.inactive_barrier)
    return SolveResult(
        value=res.fun,
        optimal_s=mu + model.cov_matvec(D.T @ u),
        optimal_o=roots,
        optimal_u=u,
        iterations=res.iterations,
        converged=res.converged,
        gradient_norm=res.grad_norm,
        inv_hessian=H,
    )


def _project_v0(problem: NormalizerProblem, pull: float = 0.5):
    v0 = np.zeros(problem.map.dim_opt)
    m = problem.map.n_active
    if m:
        v0[:m] = -pull * problem.region.signs
    return v0


def chernoff_dual_solve(
    problem: NormalizerProblem,
    beta_star,
    tol: float = 1e-6,
    max_iter: int = 5000,
) -> SolveResult:
    """Hard-constraint dual: support functions replace barrier conjugates.

    Every feasible iterate's objective upper-bounds the exact log selection
    probability, so the returned value is a certificate regardless of how
    tight the solve is.
    """
    mapping, region = problem.map, problem.region
    if region.bound_from_active:
        raise ValueError("hard-constraint dual unavailable for a data-dependent bound")
    model = problem.model
    mu = np.asarray(model.mean_map(beta_star), dtype=float)
    P = mapping.P
    m = mapping.n_active
    signs = region.signs
    bounds = region.inactive_bounds if region.n_inactive else np.zeros(0)
    finite = ~np.isinf(bounds)
    plu = problem.p_lu()
    a = lu_solve(plu, mapping.D @ mu + mapping.q)
    T1 = lu_solve(plu, problem.quad_mat())
    Q = lu_solve(plu, T1.T).T
    Q = 0.5 * (Q + Q.T)
    L = float(np.max(np.linalg.eigvalsh(Q)))

    def grad_smooth(v):
        return a + Q @ v

    def prox(x, t):
        out = x.copy()
        if m:
            out[:m] = np.where(signs * out[:m] > 0, 0.0, out[:m])
        if bounds.size:
            tail = out[m:]
            shrunk = np.sign(tail) * np.maximum(np.abs(tail) - t * bounds, 0.0)
            out[m:] = np.where(finite, shrunk, 0.0)
        return out

    def fun_total(v):
        pen = float(np.sum(bounds[finite] * np.abs(v[m:][finite]))) if bounds.size else 0.0
        return float(a @ v) + 0.5 * float(v @ (Q @ v)) + pen

    v0 = np.zeros(mapping.dim_opt)
    v, f_best, iters, converged = minimize_proximal(
        grad_smooth, prox, v0, L, fun_total=fun_total, tol=tol, max_iter=max_iter
    )
    u = lu_solve(plu, v, trans=1)
    return SolveResult(
        value=f_best,
        optimal_s=mu + model.cov_matvec(mapping.D.T @ u),
        optimal_o=None,
        optimal_u=u,
        iterations=iters,
        converged=converged,
        gradient_norm=np.nan,
    )


# ---------------------------------------------------------------------------
# multi-stage solves


def _check_stages(problems: Sequence[NormalizerProblem]):
    if not problems:
        raise ValueError("need at least one stage")
    model = problems[0].model
    for pb in problems[1:]:
        if pb.model is not model:
            raise ValueError("stages must share the data model")
    return model


def multistage_solve(
    problems: Sequence[NormalizerProblem],
    beta_star,
    formulation: str | None = None,
    x0=None,
    inv_hessian0=None,
    grad_tol: float = 1e-8,
    max_iter: int = 500,
) -> SolveResult:
    """Joint normalizer over several selection stages sharing the data vector.

    The primal form optimizes (data, per-stage active variables) with each
    stage's inactive block integrated out; the dual form optimizes one
    multiplier block per stage.  With a single stage both reduce to the
    corresponding single-stage solves.
    """
    model = _check_stages(problems)
    if formulation is None:
        formulation = problems[0].formulation
    if formulation in ("multistage", "primal_reduced", "primal_full", "primal"):
        return _multistage_primal(problems, beta_star, x0, inv_hessian0, grad_tol, max_iter)
    if formulation == "dual":
        return _multistage_dual(problems, beta_star, x0, inv_hessian0, grad_tol, max_iter)
    raise ValueError(f"unsupported multistage formulation {formulation!r}")


def _multistage_primal(problems, beta_star, x0, inv_hessian0, grad_tol, max_iter):
    model = problems[0].model
    mu = np.asarray(model.mean_map(beta_star), dtype=float)
    d = model.dim
    pieces = []
    for pb in problems:
        mp, rg = pb.map, pb.region
        m = mp.n_active
        sd = pb.rand_sd_perm()
        pieces.append(
            dict(
                m=m,
                n_inact=mp.dim_opt - m,
                DE=mp.D_active,
                PE=mp.P_active,
                qE=mp.q_active,
                DI=mp.D_inactive,
                PIE=mp.P_inactive_active,
                qI=mp.q_inactive,
                var_act=sd[:m] ** 2,
                sd_inact=sd[m:],
                signs=rg.signs,
                cone=rg.bound_from_active,
                bounds=None if rg.bound_from_active else (rg.inactive_bounds if mp.dim_opt > m else None),
            )
        )
    sizes = [pc["m"] for pc in pieces]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    def fun_grad(x):
        s = x[:d]
        ds = s - mu
        fs = model.cov_solve(ds)
        f = 0.5 * float(ds @ fs)
        grad_s = fs.copy()
        grad_o = np.zeros(offsets[-1])
        for k, pc in enumerate(pieces):
            oE = x[d + offsets[k] : d + offsets[k + 1]]
            m = pc["m"]
            if m and np.any(pc["signs"] * oE <= 0):
                return np.inf, None
            go = grad_o[offsets[k] : offsets[k + 1]]
            if m:
                wE = pc["DE"] @ s + pc["PE"] @ oE + pc["qE"]
                gwE = wE / pc["var_act"]
                f += 0.5 * float(wE @ gwE)
                grad_s += pc["DE"].T @ gwE
                go += pc["PE"].T @ gwE
                f += float(np.sum(sign_barrier(oE, pc["signs"])))
                go += sign_barrier_grad(oE, pc["signs"])
            if pc["n_inact"]:
                alpha = pc["DI"] @ s + pc["PIE"] @ oE + pc["qI"]
                bounds = pc["signs"][0] * oE[0] if pc["cone"] else pc["bounds"]
                logB, d_alpha, d_bound = _interval_terms(alpha, bounds, pc["sd_inact"])
                f -= logB
                grad_s -= pc["DI"].T @ d_alpha
                go -= pc["PIE"].T @ d_alpha
                if pc["cone"]:
                    go[0] -= pc["signs"][0] * float(np.sum(d_bound))
        return f, np.concatenate([grad_s, grad_o])

    if x0 is None:
        x0 = np.concatenate([mu] + [pc["signs"].astype(float) for pc in pieces])
    res = minimize_bfgs(fun_grad, x0, grad_tol=grad_tol, max_iter=max_iter, inv_hessian0=inv_hessian0)
    opt_o = [res.x[d + offsets[k] : d + offsets[k + 1]] for k in range(len(pieces))]
    return SolveResult(
        value=-res.fun,
        optimal_s=res.x[:d],
        optimal_o=opt_o,
        optimal_u=None,
        iterations=res.iterations,
        converged=res.converged,
        gradient_norm=res.grad_norm,
        inv_hessian=res.inv_hessian,
    )


def _multistage_dual(problems, beta_star, x0, inv_hessian0, grad_tol, max_iter):
    model = problems[0].model
    mu = np.asarray(model.mean_map(beta_star), dtype=float)
    for pb in problems:
        if pb.region.bound_from_active:
            raise ValueError("dual form unavailable for a data-dependent inactive bound")
        if pb.region.n_inactive and np.any(np.isinf(pb.region.inactive_bounds)):
            raise ValueError("multistage dual requires finite inactive bounds")
    sizes = [pb.map.dim_opt for pb in problems]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    Dmu = [pb.map.D @ mu for pb in problems]

    def fun_grad(x):
        us = [x[offsets[k] : offsets[k + 1]] for k in range(len(problems))]
        t = np.zeros(model.dim)
        for pb, u in zip(problems, us):
            t += pb.map.D.T @ u
        St = model.cov_matvec(t)
        f = float(mu @ t) + 0.5 * float(t @ St)
        grads = []
        for k, (pb, u) in enumerate(zip(problems, us)):
            v = pb.map.P.T @ u
            cval, roots = region_conjugate_value_grad(v, pb.region, inactive=pb.inactive_barrier)
            if not np.isfinite(cval):
                return np.inf, None
            Sg = pb.rand_cov_perm().matvec(u)
            f += 0.5 * float(u @ Sg) + cval + float(u @ pb.map.q)
            grads.append(Dmu[k] + pb.map.D @ St + Sg + pb.map.P @ roots + pb.map.q)
        return f, np.concatenate(grads)

    if x0 is None:
        x0 = np.concatenate([_feasible_dual_start(pb) if pb.map.n_active else np.zeros(pb.map.dim_opt) for pb in problems])
    else:
        f0, _ = fun_grad(np.asarray(x0, dtype=float))
        if not np.isfinite(f0):
            x0 = np.concatenate([_feasible_dual_start(pb) if pb.map.n_active else np.zeros(pb.map.dim_opt) for pb in problems])
            inv_hessian0 = None
    res = minimize_bfgs(fun_grad, x0, grad_tol=grad_tol, max_iter=max_iter, inv_hessian0=inv_hessian0)
    us = [res.x[offsets[k] : offsets[k + 1]] for k in range(len(problems))]
    t = np.zeros(model.dim)
    for pb, u in zip(problems, us):
        t += pb.map.D.T @ u
    return SolveResult(
        value=res.fun,
        optimal_s=mu + model.cov_matvec(t),
        optimal_o=None,
        optimal_u=us,
        iterations=res.iterations,
        converged=res.converged,
        gradient_norm=res.grad_norm,
        inv_hessian=res.inv_hessian,
    )


# ---------------------------------------------------------------------------
# dispatch and Monte Carlo reference


def solve_normalizer(problem, beta_star, x0=None, inv_hessian0=None, grad_tol=1e-8, max_iter=500) -> SolveResult:
    """Solve whichever formulation the problem (or stage list) requests."""
    if isinstance(problem, (list, tuple)):
        return multistage_solve(problem, beta_star, x0=x0, inv_hessian0=inv_hessian0, grad_tol=grad_tol, max_iter=max_iter)
    if problem.formulation == "primal_full":
        return primal_full_solve(problem, beta_star, x0, inv_hessian0, grad_tol, max_iter)
    if problem.formulation in ("primal_reduced", "multistage"):
        return primal_reduced_solve(problem, beta_star, x0, inv_hessian0, grad_tol, max_iter)
    if problem.formulation == "dual":
        return dual_solve(problem, beta_star, x0, inv_hessian0, grad_tol, max_iter)
    if problem.formulation == "chernoff_dual":
        return chernoff_dual_solve(problem, beta_star)
    raise ValueError(f"unknown formulation {problem.formulation!r}")


def mc_selection_probability(
    problem,
    beta_star,
    draws: int = 100000,
    seed: int = 0,
    batch: int = 1000000,
) -> MCEstimate:
    """Monte Carlo reference: fraction of joint (data, randomization) draws
    that land in the selection region (equivalently, reproduce the observed
    selection through the reconstruction map).

    Guarded to small problems; use it to validate optimization output, not to
    do inference.
    """
    stages = list(problem) if isinstance(problem, (list, tuple)) else [problem]
    model = _check_stages(stages)
    total_dim = model.dim + sum(pb.map.dim_opt for pb in stages)
    if total_dim > 30:
        raise ValueError(f"joint dimension {total_dim} exceeds the Monte Carlo guard (30)")
    if draws < 1:
        raise ValueError("need at least one draw")
    rng = np.random.default_rng(seed)
    plus = [pb.p_lu() for pb in stages]
    hits = 0
    left = draws
    while left > 0:
        b = min(batch, left)
        S = model.sample(rng, beta_star, size=b)
        ok = np.ones(b, dtype=bool)
        for pb, plu in zip(stages, plus):
            W = pb.randomizer.sample(rng, size=b)
            Wp = W[:, pb.map.perm]
            R = Wp - S @ pb.map.D.T - pb.map.q
            O = lu_solve(plu, R.T).T
            m = pb.map.n_active
            if m:
                ok &= np.all(pb.region.signs * O[:, :m] > 0, axis=1)
            if pb.map.dim_opt > m:
                if pb.region.bound_from_active:
                    bound = (pb.region.signs[0] * O[:, 0])[:, None]
                    ok &= np.all(np.abs(O[:, m:]) <= bound, axis=1)
                else:
                    ok &= np.all(np.abs(O[:, m:]) <= pb.region.inactive_bounds, axis=1)
        hits += int(ok.sum())
        left -= b
    p_hat = hits / draws
    se = float(np.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / draws))
    if hits == 0:
        # report a small-count upper bound instead of -inf
        return MCEstimate(0.0, se, float(np.log(3.0 / draws)), np.inf, draws, 0, True)
    return MCEstimate(
        estimate=p_hat,
        std_error=se,
        log_estimate=float(np.log(p_hat)),
        log_std_error=float(np.sqrt((1.0 - p_hat) / (draws * p_hat))),
        draws=draws,
        hits=hits,
        zero_hits=False,
    )
