"""Randomized selection queries and their affine reconstruction maps.

Each query solves a randomized convex program, reports which coordinates were
selected with which signs, and returns the affine map that reconstructs the
randomization vector from the data and the program's optimization variables:

    omega = D s + P o + q,   o = (active variables, inactive subgradient).

The selection event is then a product region in o: sign orthants on the active
block, centered intervals on the inactive block.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .optimize import SolverError

__all__ = [
    "SelectionOutcome",
    "InversionMap",
    "SelectionRegion",
    "solve_randomized_lasso",
    "lasso_inversion_map",
    "marginal_screening_query",
    "forward_stepwise_query",
    "CarvedLassoResult",
    "carved_lasso_query",
    "theoretical_lambda",
    "load_design_csv",
    "outcome_to_json",
    "outcome_from_json",
]


@dataclass(frozen=True, eq=False)
class SelectionOutcome:
    """Selected set, signs, active optimization variables, inactive subgradient.

    For the lasso the active variables are the nonzero coefficients; for
    screening-type queries they are the positive slacks past the threshold.
    The inactive subgradient is always reported on the penalty scale, so its
    entries lie inside the inactive constraint interval.
    """

    active_set: np.ndarray
    active_signs: np.ndarray
    active_solution: np.ndarray
    inactive_subgradient: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "active_set", np.asarray(self.active_set, dtype=int))
        object.__setattr__(self, "active_signs", np.asarray(self.active_signs, dtype=float))
        object.__setattr__(self, "active_solution", np.asarray(self.active_solution, dtype=float))
        object.__setattr__(
            self, "inactive_subgradient", np.asarray(self.inactive_subgradient, dtype=float)
        )
        E = self.active_set
        if E.size and (np.any(np.diff(E) <= 0) or E.min() < 0):
            raise ValueError("active set must be sorted ascending without duplicates")
        if not (E.size == self.active_signs.size == self.active_solution.size):
            raise ValueError("active set, signs, and solution sizes disagree")

    @property
    def n_active(self) -> int:
        return self.active_set.size

    def opt_variables(self) -> np.ndarray:
        """Concatenated (active variables, inactive subgradient)."""
        return np.concatenate([self.active_solution, self.inactive_subgradient])


@dataclass(frozen=True, eq=False)
class InversionMap:
    """Affine reconstruction omega = D s + P o + q in active-first row order.

    perm[i] gives the original coordinate of permuted row i, so omega() returns
    the randomization vector in original coordinate order.
    """

    D: np.ndarray
    P: np.ndarray
    q: np.ndarray
    n_active: int
    perm: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "D", np.asarray(self.D, dtype=float))
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "perm", np.asarray(self.perm, dtype=int))
        p = self.D.shape[0]
        if self.P.shape != (p, p) or self.q.shape != (p,) or self.perm.shape != (p,):
            raise ValueError("inconsistent map dimensions")
        if not 0 <= self.n_active <= p:
            raise ValueError("n_active out of range")

    @property
    def dim_data(self) -> int:
        return self.D.shape[1]

    @property
    def dim_opt(self) -> int:
        return self.D.shape[0]

    @property
    def D_active(self) -> np.ndarray:
        return self.D[: self.n_active]

    @property
    def D_inactive(self) -> np.ndarray:
        return self.D[self.n_active :]

    @property
    def P_active(self) -> np.ndarray:
        return self.P[: self.n_active, : self.n_active]

    @property
    def P_inactive_active(self) -> np.ndarray:
        return self.P[self.n_active :, : self.n_active]

    @property
    def q_active(self) -> np.ndarray:
        return self.q[: self.n_active]

    @property
    def q_inactive(self) -> np.ndarray:
        return self.q[self.n_active :]

    def log_jacobian(self) -> float:
        """log |det P|; constant over the region."""
        return float(np.linalg.slogdet(self.P)[1])

    def omega(self, s, o) -> np.ndarray:
        """Reconstruct the randomization vector in original coordinate order."""
        w = self.D @ np.asarray(s, dtype=float) + self.P @ np.asarray(o, dtype=float) + self.q
        out = np.empty_like(w)
        out[self.perm] = w
        return out

    def opt_from(self, s, omega) -> np.ndarray:
        """Invert for the optimization variables at a given (s, omega)."""
        w = np.asarray(omega, dtype=float)[self.perm]
        rhs = w - self.D @ np.asarray(s, dtype=float) - self.q
        return np.linalg.solve(self.P, rhs)


@dataclass(frozen=True, eq=False)
class SelectionRegion:
    """Product selection region: sign orthants times centered intervals.

    bound_from_active marks cone regions where the inactive bound equals the
    magnitude of the (single) active variable rather than a fixed constant.
    """

    signs: np.ndarray
    inactive_bounds: np.ndarray | None = None
    bound_from_active: bool = False

    def __post_init__(self):
        object.__setattr__(self, "signs", np.asarray(self.signs, dtype=float))
        if self.inactive_bounds is not None:
            object.__setattr__(
                self, "inactive_bounds", np.asarray(self.inactive_bounds, dtype=float)
            )
        if np.any(np.abs(self.signs) != 1.0):
            raise ValueError("signs must be +-1")
        if self.bound_from_active:
            if self.signs.size != 1:
                raise ValueError("data-dependent bound requires exactly one active variable")
            if self.inactive_bounds is not None:
                raise ValueError("data-dependent bound excludes fixed bounds")
        elif self.inactive_bounds is not None and np.any(self.inactive_bounds <= 0):
            raise ValueError("inactive bounds must be positive")

    @property
    def n_active(self) -> int:
        return self.signs.size

    @property
    def n_inactive(self) -> int:
        if self.bound_from_active:
            raise ValueError("cone region's inactive count comes from the ambient map")
        return 0 if self.inactive_bounds is None else self.inactive_bounds.size

    def contains(self, o, slack: float = 1e-8) -> bool:
        o = np.asarray(o, dtype=float)
        m = self.n_active
        if np.any(self.signs * o[:m] <= 0):
            return False
        if self.bound_from_active:
            bound = self.signs[0] * o[0]
            return bool(np.all(np.abs(o[m:]) <= bound + slack))
        if self.inactive_bounds is None:
            return o.size == m
        return bool(np.all(np.abs(o[m:]) <= self.inactive_bounds + slack))


def _soft_threshold(x, thresh):
    return np.sign(x) * np.maximum(np.abs(x) - thresh, 0.0)


def solve_randomized_lasso(
    y,
    X,
    lam: float,
    eps: float,
    omega,
    tol: float = 1e-10,
    max_sweeps: int = 50000,
    active_tol: float = 1e-9,
    kkt_tol: float = 1e-6,
) -> SelectionOutcome:
    """Cyclic coordinate descent for the randomized, ridge-stabilized lasso

        min_b  ||y - X b||^2 / 2 - omega' b + lam ||b||_1 + eps ||b||^2 / 2.

    Columns of X are assumed pre-scaled by the caller.  The returned inactive
    subgradient comes from the stationarity condition, not from thresholding.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    omega = np.asarray(omega, dtype=float)
    n, p = X.shape
    if lam <= 0:
        raise ValueError("lasso penalty must be positive")
    if eps < 0:
        raise ValueError("ridge term must be nonnegative")
    if omega.shape != (p,):
        raise ValueError("randomization vector has wrong length")
    col_sq = np.einsum("ij,ij->j", X, X)
    if np.any(col_sq + eps <= 0):
        raise ValueError("zero column with no ridge term")
    beta = np.zeros(p)
    resid = y.copy()
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(p):
            bj = beta[j]
            rho = X[:, j] @ resid + col_sq[j] * bj + omega[j]
            bj_new = _soft_threshold(rho, lam) / (col_sq[j] + eps)
            if bj_new != bj:
                resid -= X[:, j] * (bj_new - bj)
                beta[j] = bj_new
                delta = max(delta, abs(bj_new - bj))
        if delta <= tol:
            break
    else:
        raise SolverError(
            f"coordinate descent did not converge in {max_sweeps} sweeps "
            f"(last coefficient change {delta:.3e})"
        )
    # stationarity: lam * u = omega + X'(y - X beta) - eps * beta
    lam_u = omega + X.T @ resid - eps * beta
    active = np.abs(beta) > active_tol
    E = np.flatnonzero(active)
    kkt = 0.0
    if E.size:
        kkt = float(np.max(np.abs(lam_u[E] - lam * np.sign(beta[E]))))
    if (~active).any():
        kkt = max(kkt, float(np.max(np.maximum(np.abs(lam_u[~active]) - lam, 0.0))))
    if kkt > kkt_tol:
        raise SolverError(f"stationarity residual {kkt:.3e} exceeds {kkt_tol:.1e}")
    return SelectionOutcome(
        active_set=E,
        active_signs=np.sign(beta[E]),
        active_solution=beta[E],
        inactive_subgradient=lam_u[~active],
    )


def lasso_inversion_map(outcome: SelectionOutcome, X, lam: float, eps: float):
    """Reconstruction map and selection region for the randomized lasso."""
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    E = outcome.active_set
    rest = np.setdiff1d(np.arange(p), E)
    perm = np.concatenate([E, rest])
    m = E.size
    XE = X[:, E]
    Xr = X[:, rest]
    D = -np.concatenate([XE.T, Xr.T], axis=0)
    P = np.zeros((p, p))
    P[:m, :m] = XE.T @ XE + eps * np.eye(m)
    P[m:, :m] = Xr.T @ XE
    P[m:, m:] = np.eye(p - m)
    q = np.concatenate([lam * outcome.active_signs, np.zeros(p - m)])
    mapping = InversionMap(D=D, P=P, q=q, n_active=m, perm=perm)
    region = SelectionRegion(
        signs=outcome.active_signs, inactive_bounds=np.full(p - m, float(lam))
    )
    return mapping, region


def marginal_screening_query(y, X, alpha, sigma_hat: float, omega):
    """Threshold the randomized standardized scores X'y / sigma_hat + omega.

    Coordinates whose score magnitude exceeds the (possibly per-coordinate)
    threshold alpha are selected with the score's sign.  Active variables are
    the positive slacks past the threshold; inactive ones the scores
    themselves, which lie inside the threshold interval.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (p,)).astype(float)
    omega = np.asarray(omega, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("screening thresholds must be positive")
    if sigma_hat <= 0:
        raise ValueError("noise scale must be positive")
    scores = X.T @ y / sigma_hat + omega
    active = np.abs(scores) > alpha
    E = np.flatnonzero(active)
    rest = np.flatnonzero(~active)
    signs = np.sign(scores[E])
    outcome = SelectionOutcome(
        active_set=E,
        active_signs=signs,
        active_solution=signs * (np.abs(scores[E]) - alpha[E]),
        inactive_subgradient=scores[rest],
    )
    perm = np.concatenate([E, rest])
    D = -X.T[perm] / sigma_hat
    P = np.eye(p)
    q = np.concatenate([alpha[E] * signs, np.zeros(rest.size)])
    mapping = InversionMap(D=D, P=P, q=q, n_active=E.size, perm=perm)
    region = SelectionRegion(signs=signs, inactive_bounds=alpha[rest])
    return outcome, mapping, region


def forward_stepwise_query(y, X, omegas):
    """Greedy forward selection with a fresh randomization vector per step.

    Step k picks the column of the remaining design, residualized against the
    span of previously selected columns, with the largest randomized
    correlation.  Returns one (outcome, map, region) triple per step; the
    region is a cone whose inactive bound is the active variable's magnitude.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    steps = []
    selected: list[int] = []
    remaining = list(range(p))
    for k, omega in enumerate(omegas):
        omega = np.asarray(omega, dtype=float)
        if omega.shape != (len(remaining),):
            raise ValueError(f"step {k} randomization has wrong length")
        if selected:
            Q, _ = np.linalg.qr(X[:, selected])
            Xt = X[:, remaining] - Q @ (Q.T @ X[:, remaining])
        else:
            Xt = X[:, remaining]
        scores = Xt.T @ y + omega
        pick = int(np.argmax(np.abs(scores)))
        z = float(np.sign(scores[pick]))
        order = [pick] + [i for i in range(len(remaining)) if i != pick]
        outcome = SelectionOutcome(
            active_set=np.array([remaining[pick]]),
            active_signs=np.array([z]),
            active_solution=np.array([scores[pick]]),
            inactive_subgradient=scores[np.array(order[1:], dtype=int)]
            if len(order) > 1
            else np.zeros(0),
        )
        mapping = InversionMap(
            D=-Xt.T[np.array(order, dtype=int)],
            P=np.eye(len(remaining)),
            q=np.zeros(len(remaining)),
            n_active=1,
            perm=np.array(order, dtype=int),
        )
        region = SelectionRegion(signs=np.array([z]), bound_from_active=True)
        steps.append((outcome, mapping, region))
        selected.append(remaining[pick])
        remaining.pop(pick)
    return steps


@dataclass(frozen=True, eq=False)
class CarvedLassoResult:
    outcome: SelectionOutcome
    map: InversionMap
    region: SelectionRegion
    sigma_g: np.ndarray | None
    sigma_g_regularized: bool
    subsample: np.ndarray


def carved_lasso_query(
    y,
    X,
    lam: float,
    eps: float,
    fraction: float,
    seed: int = 0,
    n_boot: int = 2000,
    boot_seed=None,
) -> CarvedLassoResult:
    """Lasso on a random subsample, with the implied randomization reconstructed
    as the gradient gap between full-data and reweighted-subsample losses.

    The randomization covariance is estimated by a pairs bootstrap of that
    gradient gap, holding the solution fixed.  fraction = 1 uses all the data
    and yields an identically zero randomization (no covariance estimate).
    boot_seed varies the bootstrap resamples while keeping the subsample.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if not 0 < fraction <= 1:
        raise ValueError("subsample fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    n_sub = int(np.floor(fraction * n))
    if n_sub < 1:
        raise ValueError("subsample is empty")
    subsample = np.sort(rng.permutation(n)[:n_sub])
    scale = 1.0 / np.sqrt(fraction)
    outcome = solve_randomized_lasso(
        y[subsample] * scale, X[subsample] * scale, lam, eps, np.zeros(p)
    )
    if n_sub < outcome.n_active + 1:
        raise ValueError("subsample too small for the selected set")
    beta = np.zeros(p)
    beta[outcome.active_set] = outcome.active_solution
    resid = X @ beta - y
    grad_full = X.T @ resid
    grad_sub = X[subsample].T @ resid[subsample] / fraction
    omega = grad_full - grad_sub
    mapping, region = lasso_inversion_map(outcome, X, lam, eps)
    if fraction == 1.0 or n_boot <= 0:
        return CarvedLassoResult(outcome, mapping, region, None, False, subsample)
    if boot_seed is not None:
        rng = np.random.default_rng(boot_seed)
    weights = np.ones(n)
    weights[subsample] -= 1.0 / fraction
    terms = X * (resid * weights)[:, None]
    sums = np.empty((n_boot, p))
    chunk = max(1, int(2e6 // max(n * p, 1)))
    for start in range(0, n_boot, chunk):
        stop = min(start + chunk, n_boot)
        idx = rng.integers(0, n, size=(stop - start, n))
        sums[start:stop] = terms[idx].sum(axis=1)
    centered = sums - sums.mean(axis=0)
    sigma_g = centered.T @ centered / (n_boot - 1)
    sigma_g = 0.5 * (sigma_g + sigma_g.T)
    regularized = False
    try:
        np.linalg.cholesky(sigma_g)
    except np.linalg.LinAlgError:
        sigma_g = sigma_g + 1e-6 * np.trace(sigma_g) / p * np.eye(p)
        regularized = True
    return CarvedLassoResult(outcome, mapping, region, sigma_g, regularized, subsample)


def theoretical_lambda(X, sigma_hat: float = 1.0, draws: int = 20000, seed: int = 0) -> float:
    """Monte Carlo estimate of E max_j |X_j' psi| for white noise psi, times sigma_hat."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if draws < 1:
        raise ValueError("need at least one draw")
    rng = np.random.default_rng(seed)
    total = 0.0
    chunk = max(1, int(4e6 // max(n, 1)))
    left = draws
    while left > 0:
        b = min(chunk, left)
        psi = rng.standard_normal((b, n))
        total += float(np.sum(np.max(np.abs(psi @ X), axis=1)))
        left -= b
    return sigma_hat * total / draws


# ---------------------------------------------------------------------------
# interchange formats


def load_design_csv(path, response_column: str = "y"):
    """Read (X, y, names) from a CSV with a header row; rows are observations.

    The response column is removed from the design; remaining columns keep
    their header order.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.asarray(rows, dtype=float)
    if response_column not in header:
        raise ValueError(f"response column {response_column!r} not in header")
    ycol = header.index(response_column)
    keep = [i for i in range(len(header)) if i != ycol]
    names = [header[i] for i in keep]
    return data[:, keep], data[:, ycol], names


def outcome_to_json(outcome: SelectionOutcome, lam=None, eps=None, tau=None) -> str:
    payload = {
        "E": outcome.active_set.tolist(),
        "z_E": outcome.active_signs.tolist(),
        "beta_hat_E": outcome.active_solution.tolist(),
        "lambda": lam,
        "epsilon": eps,
        "tau": tau,
    }
    return json.dumps(payload, sort_keys=True)


def outcome_from_json(text: str):
    payload = json.loads(text)
    outcome = SelectionOutcome(
        active_set=np.asarray(payload["E"], dtype=int),
        active_signs=np.asarray(payload["z_E"], dtype=float),
        active_solution=np.asarray(payload["beta_hat_E"], dtype=float),
        inactive_subgradient=np.zeros(0),
    )
    return outcome, payload.get("lambda"), payload.get("epsilon"), payload.get("tau")
