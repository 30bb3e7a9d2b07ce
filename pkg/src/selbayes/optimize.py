"""Smooth minimization with infeasibility-aware line search, and a proximal solver.

The quasi-Newton driver is the workhorse behind every normalizer solve.  The
objectives it sees contain barrier terms that return +inf outside their
domain, so the backtracking loop simply rejects any step with a non-finite
value.  The proximal solver handles the nonsmooth hard-constraint dual, whose
objective splits into a quadratic plus separable absolute-value and
half-line-indicator terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SolverError", "MinimizeResult", "minimize_bfgs", "minimize_proximal"]


class SolverError(RuntimeError):
    """Optimization failure carrying the last iterate for diagnosis."""

    def __init__(self, message, x=None, grad_norm=None, iterations=None):
        super().__init__(message)
        self.x = x
        self.grad_norm = grad_norm
        self.iterations = iterations


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool
    grad_norm: float
    inv_hessian: np.ndarray


def minimize_bfgs(
    fun_grad,
    x0,
    grad_tol: float = 1e-8,
    max_iter: int = 500,
    inv_hessian0=None,
    c1: float = 1e-4,
    max_backtracks: int = 60,
) -> MinimizeResult:
    """Damped BFGS minimization of a smooth convex function with +inf barriers.

    fun_grad(x) returns (value, gradient); the value may be +inf off the
    feasible interior, in which case the gradient is ignored.  Convergence is
    declared when the gradient max-norm drops below grad_tol.  A reusable
    inverse Hessian approximation may be passed in to warm-start and is
    returned for the next call.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun_grad(x)
    if not np.isfinite(f):
        raise SolverError("infeasible starting point", x=x, iterations=0)
    n = x.size
    H = np.eye(n) if inv_hessian0 is None else np.array(inv_hessian0, dtype=float)
    first_update = inv_hessian0 is None
    it = 0
    while it < max_iter:
        gnorm = float(np.max(np.abs(g), initial=0.0))
        if gnorm <= grad_tol:
            return MinimizeResult(x, f, g, it, True, gnorm, H)
        d = -H @ g
        gd = float(g @ d)
        if not np.isfinite(gd) or gd >= 0:
            H = np.eye(n)
            first_update = True
            d = -g
            gd = -float(g @ g)
        t = 1.0
        accepted = False
        dmax = float(np.max(np.abs(d), initial=0.0))
        xmax = float(np.max(np.abs(x), initial=0.0))
        for _ in range(max_backtracks):
            # step indistinguishable from x at machine precision: give up early
            if t * dmax <= 1e-16 * (1.0 + xmax):
                break
            x_new = x + t * d
            f_new, g_new = fun_grad(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * t * gd:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            gnorm = float(np.max(np.abs(g), initial=0.0))
            if gnorm <= 100.0 * grad_tol:
                # flat to machine precision near the optimum; accept as converged
                return MinimizeResult(x, f, g, it, True, gnorm, H)
            raise SolverError(
                f"line search failed at iteration {it} (grad max-norm {gnorm:.3e})",
                x=x,
                grad_norm=gnorm,
                iterations=it,
            )
        s = t * d
        yk = g_new - g
        sy = float(s @ yk)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yk)):
            if first_update:
                H *= sy / float(yk @ yk)
                first_update = False
            Hy = H @ yk
            rho = 1.0 / sy
            # BFGS inverse update in outer-product form
            H -= rho * (np.outer(s, Hy) + np.outer(Hy, s))
            H += rho * (1.0 + rho * float(yk @ Hy)) * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
        it += 1
    gnorm = float(np.max(np.abs(g), initial=0.0))
    return MinimizeResult(x, f, g, it, gnorm <= grad_tol, gnorm, H)


def minimize_proximal(
    grad_smooth,
    prox,
    x0,
    lipschitz: float,
    fun_total=None,
    tol: float = 1e-6,
    max_iter: int = 5000,
):
    """Accelerated proximal gradient descent (monotone FISTA).

    grad_smooth(x) is the gradient of the smooth part, prox(x, t) the proximal
    map of the nonsmooth part at step t, and fun_total(x) the full objective
    used to keep the best iterate.  Stops when the prox-gradient residual
    max-norm drops below tol.
    """
    step = 1.0 / max(lipschitz, 1e-300)
    x = np.asarray(x0, dtype=float).copy()
    z = x.copy()
    t_mom = 1.0
    best_x = x.copy()
    best_f = np.inf if fun_total is None else fun_total(x)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        x_new = prox(z - step * grad_smooth(z), step)
        resid = float(np.max(np.abs(x - prox(x - step * grad_smooth(x), step)), initial=0.0)) / step
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom**2))
        z = x_new + ((t_mom - 1.0) / t_new) * (x_new - x)
        x, t_mom = x_new, t_new
        if fun_total is not None:
            f = fun_total(x)
            if f < best_f:
                best_f = f
                best_x = x.copy()
        if resid <= tol:
            converged = True
            break
    if fun_total is None:
        best_x = x
        best_f = np.nan
    return best_x, best_f, it, converged
