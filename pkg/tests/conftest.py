"""Shared instance builders for the test suite."""

import numpy as np
import pytest

from selbayes import (
    GenerativeModel,
    InversionMap,
    NormalizerProblem,
    Randomizer,
    SelectionRegion,
    lasso_inversion_map,
    solve_randomized_lasso,
)


def random_design(rng, n, p):
    X = rng.standard_normal((n, p))
    return X / np.linalg.norm(X, axis=0)


def random_spd(rng, d, jitter=0.5):
    A = rng.standard_normal((d, d))
    return A @ A.T + jitter * d * np.eye(d)


def lasso_instance(seed, n=6, p=3, beta=None, lam=1.2, tau=1.0, require_active=True):
    """Draw data, run the randomized lasso, and package a NormalizerProblem.

    Retries nearby seeds until the active set is nonempty (or empty when
    require_active is False).
    """
    for shift in range(40):
        rng = np.random.default_rng(seed + 1000 * shift)
        X = random_design(rng, n, p)
        if beta is None:
            beta_true = np.zeros(p)
            beta_true[0] = 2.0
        else:
            beta_true = np.asarray(beta, dtype=float)
        y = X @ beta_true + rng.standard_normal(n)
        eps = 1.0 / np.sqrt(n)
        omega = tau * rng.standard_normal(p)
        outcome = solve_randomized_lasso(y, X, lam, eps, omega)
        if require_active == (outcome.active_set.size > 0):
            mapping, region = lasso_inversion_map(outcome, X, lam, eps)
            model = GenerativeModel.linear(X[:, outcome.active_set])
            problem = NormalizerProblem(model, Randomizer.isotropic(tau, p), mapping, region)
            return {
                "X": X,
                "y": y,
                "beta_true": beta_true,
                "lam": lam,
                "eps": eps,
                "tau": tau,
                "omega": omega,
                "outcome": outcome,
                "map": mapping,
                "region": region,
                "model": model,
                "problem": problem,
                "beta_star": beta_true[outcome.active_set],
            }
    raise RuntimeError("could not draw a suitable lasso instance")


def no_truncation_problem(model, p, tau=1.0):
    """Selection region covering everything: the normalizer is constant."""
    mapping = InversionMap(
        D=np.zeros((p, model.dim)), P=np.eye(p), q=np.zeros(p), n_active=0, perm=np.arange(p)
    )
    region = SelectionRegion(signs=np.zeros(0), inactive_bounds=np.full(p, np.inf))
    return NormalizerProblem(model, Randomizer.isotropic(tau, p), mapping, region)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
