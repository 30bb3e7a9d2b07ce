"""Barrier penalties for sign and cube constraints, and their convex conjugates.

Each barrier is a smooth convex function that is finite on the interior of its
constraint set and +inf outside, so a line search can reject infeasible steps
by checking for a non-finite value.  Conjugates are needed by the dual form of
the normalizer objective; sign and log-cube conjugates have closed-form argmax
roots, the cube conjugate root is found by a safeguarded Newton search on the
monotone stationarity condition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "sign_barrier",
    "sign_barrier_grad",
    "sign_barrier_conjugate",
    "sign_conjugate_root",
    "cube_barrier",
    "cube_barrier_grad",
    "cube_barrier_conjugate",
    "cube_conjugate_root",
    "log_cube_barrier",
    "log_cube_barrier_grad",
    "log_cube_barrier_conjugate",
    "log_cube_conjugate_root",
    "BarrierSpec",
    "region_barrier_value",
    "region_barrier_value_grad",
    "region_conjugate_value",
    "region_conjugate_value_grad",
]


def _maybe_scalar(x, scalar_in):
    return float(np.asarray(x).reshape(-1)[0]) if scalar_in else x


# ---------------------------------------------------------------------------
# sign (orthant) barrier: b(o) = log(1 + 1/(z o)) on {z o > 0}


def sign_barrier(o, z):
    """log(1 + 1/(z o)) for z o > 0, +inf otherwise."""
    scalar = np.isscalar(o) and np.isscalar(z)
    o = np.asarray(o, dtype=float)
    z = np.asarray(z, dtype=float)
    zo = z * o
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(zo > 0, np.log1p(1.0 / np.where(zo > 0, zo, 1.0)), np.inf)
    return _maybe_scalar(val, scalar)


def sign_barrier_grad(o, z):
    """Derivative -1/(o (z o + 1)) on the feasible side."""
    scalar = np.isscalar(o) and np.isscalar(z)
    o = np.asarray(o, dtype=float)
    z = np.asarray(z, dtype=float)
    g = -1.0 / (o * (z * o + 1.0))
    return _maybe_scalar(g, scalar)


def sign_conjugate_root(v, z):
    """Argmax of v o - b(o) over {z o > 0}; requires z v < 0."""
    scalar = np.isscalar(v) and np.isscalar(z)
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    zv = z * v
    with np.errstate(divide="ignore", invalid="ignore"):
        # for z = +1, v < 0 the root is -1/2 + sqrt(1/4 - 1/v); mirror for z = -1
        mag = -0.5 + np.sqrt(0.25 - 1.0 / np.where(zv < 0, zv, -1.0))
    root = np.where(zv < 0, z * mag, np.nan)
    return _maybe_scalar(root, scalar)


def sign_barrier_conjugate(v, z):
    """sup_o { v o - sign_barrier(o, z) }; +inf unless z v < 0."""
    scalar = np.isscalar(v) and np.isscalar(z)
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    zv = z * v
    feasible = zv < 0
    root = np.where(feasible, sign_conjugate_root(np.where(feasible, v, -z), z), 1.0)
    val = np.where(feasible, v * root - sign_barrier(root, z), np.inf)
    return _maybe_scalar(val, scalar)


# ---------------------------------------------------------------------------
# cube (interval) barrier: b(o) = log(1 + 1/(lam - o)) + log(1 + 1/(lam + o))


def cube_barrier(o, lam):
    """Barrier for |o| < lam; +inf outside.  lam = +inf gives 0 (no constraint)."""
    scalar = np.isscalar(o) and np.isscalar(lam)
    o = np.asarray(o, dtype=float)
    lam = np.asarray(lam, dtype=float)
    o, lam = np.broadcast_arrays(o, lam)
    inside = np.abs(o) < lam
    unbounded = np.isinf(lam)
    safe_lo = np.where(inside & ~unbounded, lam - o, 1.0)
    safe_hi = np.where(inside & ~unbounded, lam + o, 1.0)
    val = np.log1p(1.0 / safe_lo) + np.log1p(1.0 / safe_hi)
    val = np.where(unbounded, 0.0, np.where(inside, val, np.inf))
    return _maybe_scalar(val, scalar)


def cube_barrier_grad(o, lam):
    """Derivative 1/((lam-o)(lam-o+1)) - 1/((lam+o)(lam+o+1)) on the interior."""
    scalar = np.isscalar(o) and np.isscalar(lam)
    o = np.asarray(o, dtype=float)
    lam = np.asarray(lam, dtype=float)
    o, lam = np.broadcast_arrays(o, lam)
    unbounded = np.isinf(lam)
    lo = np.where(unbounded, 1.0, lam - o)
    hi = np.where(unbounded, 1.0, lam + o)
    g = 1.0 / (lo * (lo + 1.0)) - 1.0 / (hi * (hi + 1.0))
    g = np.where(unbounded, 0.0, g)
    return _maybe_scalar(g, scalar)


def _cube_barrier_dlam(o, lam):
    """Derivative of cube_barrier in the bound lam (used by cone regions)."""
    lo = lam - o
    hi = lam + o
    return -1.0 / (lo * (lo + 1.0)) - 1.0 / (hi * (hi + 1.0))


def _cube_stationarity(x, lam, v):
    """b'(x) - v for the cube barrier; increasing in x on (-lam, lam)."""
    lo = lam - x
    hi = lam + x
    return 1.0 / (lo * (lo + 1.0)) - 1.0 / (hi * (hi + 1.0)) - v


def _cube_stationarity_deriv(x, lam):
    lo = lam - x
    hi = lam + x
    return (2.0 * lo + 1.0) / (lo * (lo + 1.0)) ** 2 + (2.0 * hi + 1.0) / (hi * (hi + 1.0)) ** 2


def cube_conjugate_root(v, lam, tol=1e-10, max_iter=120):
    """Root of b'(o) = v on (-lam, lam), by bracketed Newton iteration.

    The stationarity condition is strictly increasing and spans all of R, so
    the root exists and is unique for every real v.
    """
    scalar = np.isscalar(v)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    lam = np.broadcast_to(np.asarray(lam, dtype=float), v.shape).astype(float)
    if np.any(lam <= 0):
        raise ValueError("cube bound must be positive")
    eps = 1e-14
    lo = -lam * (1.0 - eps)
    hi = lam * (1.0 - eps)
    x = np.zeros_like(v)
    for _ in range(max_iter):
        f = _cube_stationarity(x, lam, v)
        hi = np.where(f > 0, x, hi)
        lo = np.where(f < 0, x, lo)
        done = ((hi - lo) < tol * lam) | (np.abs(f) <= 1e-13 * (1.0 + np.abs(v)))
        if np.all(done):
            break
        x_new = x - f / _cube_stationarity_deriv(x, lam)
        bad = ~np.isfinite(x_new) | (x_new < lo) | (x_new > hi)
        x_new = np.where(bad, 0.5 * (lo + hi), x_new)
        x = np.where(done, x, x_new)
    return _maybe_scalar(x, scalar)


def cube_barrier_conjugate(v, lam):
    """sup_{|o| < lam} { v o - cube_barrier(o, lam) }; finite for all v.

    lam = +inf degenerates to the support function of a point: 0 at v = 0,
    +inf otherwise.
    """
    scalar = np.isscalar(v) and np.isscalar(lam)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    lam_b = np.broadcast_to(np.asarray(lam, dtype=float), v.shape).astype(float)
    out = np.empty_like(v)
    unbounded = np.isinf(lam_b)
    if np.any(unbounded):
        out[unbounded] = np.where(v[unbounded] == 0.0, 0.0, np.inf)
    rest = ~unbounded
    if np.any(rest):
        root = cube_conjugate_root(v[rest], lam_b[rest])
        out[rest] = v[rest] * root - cube_barrier(root, lam_b[rest])
    return _maybe_scalar(out, scalar)


# ---------------------------------------------------------------------------
# log-cube barrier: b(o) = -log(lam - o) - log(lam + o), closed-form conjugate


def log_cube_barrier(o, lam):
    scalar = np.isscalar(o) and np.isscalar(lam)
    o = np.asarray(o, dtype=float)
    lam = np.asarray(lam, dtype=float)
    o, lam = np.broadcast_arrays(o, lam)
    inside = np.abs(o) < lam
    safe_lo = np.where(inside, lam - o, 1.0)
    safe_hi = np.where(inside, lam + o, 1.0)
    val = np.where(inside, -np.log(safe_lo) - np.log(safe_hi), np.inf)
    return _maybe_scalar(val, scalar)


def log_cube_barrier_grad(o, lam):
    scalar = np.isscalar(o) and np.isscalar(lam)
    o = np.asarray(o, dtype=float)
    lam = np.asarray(lam, dtype=float)
    g = 1.0 / (lam - o) - 1.0 / (lam + o)
    return _maybe_scalar(g, scalar)


def log_cube_conjugate_root(v, lam):
    """Argmax -1/v + sign(v) sqrt(1/v^2 + lam^2); 0 at v = 0."""
    scalar = np.isscalar(v) and np.isscalar(lam)
    v = np.asarray(v, dtype=float)
    lam = np.asarray(lam, dtype=float)
    v, lam = np.broadcast_arrays(v, lam)
    small = np.abs(v) < 1e-300
    vs = np.where(small, 1.0, v)
    root = -1.0 / vs + np.sign(vs) * np.sqrt(1.0 / vs**2 + lam**2)
    root = np.where(small, 0.0, root)
    return _maybe_scalar(root, scalar)


def log_cube_barrier_conjugate(v, lam):
    """sup_{|o| < lam} { v o - log_cube_barrier(o, lam) }; finite for all v."""
    scalar = np.isscalar(v) and np.isscalar(lam)
    v = np.asarray(v, dtype=float)
    lam = np.asarray(lam, dtype=float)
    root = log_cube_conjugate_root(v, lam)
    val = v * root + np.log(lam - root) + np.log(lam + root)
    return _maybe_scalar(val, scalar)


# ---------------------------------------------------------------------------
# named barrier spec


@dataclass(frozen=True)
class BarrierSpec:
    """One scalar barrier: kind 'sign' (param = sign) or 'cube'/'log_cube' (param = bound)."""

    kind: str
    param: float

    def __post_init__(self):
        if self.kind not in ("sign", "cube", "log_cube"):
            raise ValueError(f"unknown barrier kind {self.kind!r}")
        if self.kind == "sign" and self.param not in (-1.0, 1.0):
            raise ValueError("sign barrier parameter must be +-1")
        if self.kind in ("cube", "log_cube") and not self.param > 0:
            raise ValueError("cube bound must be positive")

    def value(self, o):
        if self.kind == "sign":
            return sign_barrier(o, self.param)
        if self.kind == "cube":
            return cube_barrier(o, self.param)
        return log_cube_barrier(o, self.param)

    def grad(self, o):
        if self.kind == "sign":
            return sign_barrier_grad(o, self.param)
        if self.kind == "cube":
            return cube_barrier_grad(o, self.param)
        return log_cube_barrier_grad(o, self.param)

    def conjugate(self, v):
        if self.kind == "sign":
            return sign_barrier_conjugate(v, self.param)
        if self.kind == "cube":
            return cube_barrier_conjugate(v, self.param)
        return log_cube_barrier_conjugate(v, self.param)

    def conjugate_root(self, v):
        if self.kind == "sign":
            return sign_conjugate_root(v, self.param)
        if self.kind == "cube":
            return cube_conjugate_root(v, self.param)
        return log_cube_conjugate_root(v, self.param)


# ---------------------------------------------------------------------------
# region-level assembly: coordinate sums over (signs, inactive bounds)


def _region_bounds(o, region):
    m = region.n_active
    if region.bound_from_active:
        z = region.signs[0]
        return np.full(o.size - m, z * o[0])
    return region.inactive_bounds


def region_barrier_value(o, region, inactive="cube"):
    """Sum of sign barriers on active coordinates and cube-type barriers on
    inactive coordinates; +inf off the interior.

    For cone regions whose inactive bound is the active magnitude, the bound is
    treated as a function of the active coordinate.
    """
    o = np.asarray(o, dtype=float)
    m = region.n_active
    val = float(np.sum(sign_barrier(o[:m], region.signs)))
    if not np.isfinite(val):
        return np.inf
    if o.size > m:
        bounds = _region_bounds(o, region)
        fn = cube_barrier if inactive == "cube" else log_cube_barrier
        if np.any(bounds <= 0):
            return np.inf
        val += float(np.sum(fn(o[m:], bounds)))
    return val


def region_barrier_value_grad(o, region, inactive="cube"):
    """Value and gradient of region_barrier_value on the interior."""
    o = np.asarray(o, dtype=float)
    val = region_barrier_value(o, region, inactive=inactive)
    if not np.isfinite(val):
        return np.inf, None
    m = region.n_active
    grad = np.empty_like(o)
    grad[:m] = sign_barrier_grad(o[:m], region.signs)
    if o.size > m:
        bounds = _region_bounds(o, region)
        if inactive == "cube":
            grad[m:] = cube_barrier_grad(o[m:], bounds)
            if region.bound_from_active:
                z = region.signs[0]
                grad[0] += z * float(np.sum(_cube_barrier_dlam(o[m:], bounds)))
        else:
            grad[m:] = log_cube_barrier_grad(o[m:], bounds)
            if region.bound_from_active:
                z = region.signs[0]
                dlam = -1.0 / (bounds - o[m:]) - 1.0 / (bounds + o[m:])
                grad[0] += z * float(np.sum(dlam))
    return val, grad


def region_conjugate_value(v, region, inactive="cube"):
    """Coordinate-sum conjugate of the region barrier; +inf when any sign
    component has the wrong sign.  Unavailable for data-dependent bounds."""
    val, _ = region_conjugate_value_grad(v, region, inactive=inactive)
    return val


def region_conjugate_value_grad(v, region, inactive="cube"):
    """Conjugate value and its gradient (the per-coordinate argmax roots)."""
    if region.bound_from_active:
        raise ValueError("conjugate unavailable for a data-dependent inactive bound")
    v = np.asarray(v, dtype=float)
    m = region.n_active
    if np.any(region.signs * v[:m] >= 0):
        return np.inf, None
    grad = np.empty_like(v)
    val = 0.0
    if m:
        val += float(np.sum(sign_barrier_conjugate(v[:m], region.signs)))
        grad[:m] = sign_conjugate_root(v[:m], region.signs)
    if region.n_inactive:
        bounds = region.inactive_bounds
        unbounded = np.isinf(bounds)
        if np.any(unbounded) and np.any(v[m:][unbounded] != 0.0):
            return np.inf, None
        if inactive == "cube":
            conj = cube_barrier_conjugate(v[m:], bounds)
            roots = np.where(unbounded, 0.0, cube_conjugate_root(v[m:], np.where(unbounded, 1.0, bounds)))
        else:
            conj = np.where(unbounded, np.where(v[m:] == 0.0, 0.0, np.inf),
                            log_cube_barrier_conjugate(v[m:], np.where(unbounded, 1.0, bounds)))
            roots = np.where(unbounded, 0.0, log_cube_conjugate_root(v[m:], np.where(unbounded, 1.0, bounds)))
        val += float(np.sum(conj))
        grad[m:] = roots
    if not np.isfinite(val):
        return np.inf, None
    return val, grad
