"""Tests for the approximate selective posterior: density and gradient,
Langevin sampling, the posterior mode, and chain diagnostics."""

import numpy as np
import pytest

from selbayes import (
    GenerativeModel,
    Prior,
    PseudoPosterior,
    SolverError,
    chain_summaries,
    effective_sample_size,
    run_sampler,
    selective_map,
)
from selbayes.posterior import langevin_step

from conftest import lasso_instance, no_truncation_problem
from corpus import two_stage_tiny


def flat_no_truncation_posterior(seed=0, n=6, p=2):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    X /= np.linalg.norm(X, axis=0)
    beta_true = np.array([1.0, -0.5])
    s_obs = X @ beta_true + rng.standard_normal(n)
    model = GenerativeModel.linear(X)
    pb = no_truncation_problem(model, p=3)
    post = PseudoPosterior(Prior.flat(), pb, s_obs)
    mean = np.linalg.lstsq(X, s_obs, rcond=None)[0]
    cov = np.linalg.inv(X.T @ X)
    return post, mean, cov


# ---------------------------------------------------------------------------
# density and gradient


@pytest.mark.parametrize(
    "prior",
    [Prior.flat(), Prior.gaussian(0.0, 2.0), Prior.laplace_mixture(0.9, 0.1, 1.0)],
    ids=["flat", "gaussian", "mixture"],
)
@pytest.mark.parametrize("formulation", ["primal_reduced", "primal_full", "dual"])
def test_log_density_gradient_matches_finite_differences(prior, formulation):
    inst = lasso_instance(11, beta=[4.0, 0.0, 0.0])
    pb = inst["problem"]
    pb = type(pb)(pb.model, pb.randomizer, pb.map, pb.region, formulation=formulation)
    post = PseudoPosterior(prior, pb, inst["y"])
    rng = np.random.default_rng(1)
    for _ in range(2):
        beta = inst["beta_star"] + rng.standard_normal(inst["beta_star"].size)
        _, grad, _ = post.log_density_grad(beta)
        h = 1e-5
        for j in range(beta.size):
            e = np.zeros(beta.size)
            e[j] = h
            fd = (post.log_density(beta + e) - post.log_density(beta - e)) / (2 * h)
            assert abs(fd - grad[j]) < 1e-4 * max(1.0, abs(grad[j]))


def test_log_density_gradient_two_stage_pipeline():
    problems, bstar = two_stage_tiny()
    rng = np.random.default_rng(4)
    s_obs = problems[0].model.mean_map(bstar) + 0.3 * rng.standard_normal(problems[0].model.dim)
    post = PseudoPosterior(Prior.flat(), problems, s_obs)
    beta = bstar + 0.5 * rng.standard_normal(bstar.size)
    _, grad, _ = post.log_density_grad(beta)
    h = 1e-5
    for j in range(beta.size):
        e = np.zeros(beta.size)
        e[j] = h
        fd = (post.log_density(beta + e) - post.log_density(beta - e)) / (2 * h)
        assert abs(fd - grad[j]) < 1e-4 * max(1.0, abs(grad[j]))


def test_no_truncation_gradient_is_exact():
    # with the selection correction constant, the gradient reduces to the
    # Gaussian data-fit term
    post, _, _ = flat_no_truncation_posterior()
    beta = np.array([0.3, -0.8])
    _, grad, _ = post.log_density_grad(beta)
    model = post.model
    want = np.asarray(model.design).T @ (post.s_obs - model.mean_map(beta))
    assert np.allclose(grad, want, atol=1e-7)


def test_default_step_size_uses_likelihood_curvature():
    post, _, _ = flat_no_truncation_posterior()
    X = np.asarray(post.model.design)
    L = float(np.max(np.linalg.eigvalsh(X.T @ X)))
    assert post.default_step_size(np.zeros(2)) == pytest.approx(1.0 / (8 * L))
    post2 = PseudoPosterior(Prior.gaussian(0.0, 2.0), post.problems[0] if isinstance(post.problems, list) else post.problems, post.s_obs)
    assert post2.default_step_size(np.zeros(2)) == pytest.approx(1.0 / (8 * (L + 0.25)))


# ---------------------------------------------------------------------------
# the Langevin kernel


def test_langevin_step_arithmetic():
    rng = np.random.default_rng(7)
    z = np.random.default_rng(7).standard_normal(1)
    got = langevin_step(np.array([0.1]), np.array([2.0]), 0.01, rng)
    want = 0.1 + 0.01 * 2.0 + np.sqrt(0.02) * z[0]
    assert got[0] == pytest.approx(want, abs=1e-15)


def test_sampler_chains_are_reproducible():
    inst = lasso_instance(21, beta=[4.0, 0.0, 0.0])
    post = PseudoPosterior(Prior.flat(), inst["problem"], inst["y"], grad_tol=1e-6)
    kw = dict(n_burn=50, n_keep=100, seed=123)
    a = run_sampler(post, inst["beta_star"], **kw)
    post.reset_warm_start()
    b = run_sampler(post, inst["beta_star"], **kw)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.log_densities, b.log_densities)


def test_sampler_recovers_exact_posterior_without_truncation():
    post, mean, cov = flat_no_truncation_posterior()
    res = run_sampler(post, mean, n_burn=500, n_keep=6000, seed=3)
    for j in range(2):
        chain = res.samples[:, j]
        ess = effective_sample_size(chain)
        se = np.sqrt(cov[j, j] / ess)
        assert abs(chain.mean() - mean[j]) < 3 * se
        assert abs(chain.var() - cov[j, j]) < 0.15 * cov[j, j]


def test_metropolis_adjusted_variant_matches_too():
    post, mean, cov = flat_no_truncation_posterior()
    res = run_sampler(post, mean, n_burn=500, n_keep=6000, seed=9, method="mala")
    assert res.accept_rate is not None and 0.3 < res.accept_rate <= 1.0
    for j in range(2):
        chain = res.samples[:, j]
        se = np.sqrt(cov[j, j] / effective_sample_size(chain))
        assert abs(chain.mean() - mean[j]) < 3 * se


def test_sampler_validates_arguments():
    post, mean, _ = flat_no_truncation_posterior()
    with pytest.raises(ValueError):
        run_sampler(post, mean, method="hmc")
    with pytest.raises(ValueError):
        run_sampler(post, mean, n_keep=0)


class _BoxDensity:
    """Standard normal restricted to |x| <= 2 with hard walls; big steps
    leave the box and come back only after halving."""

    def log_density_grad(self, beta):
        b = float(np.asarray(beta, dtype=float).reshape(-1)[0])
        if abs(b) > 2.0:
            return -np.inf, np.array([np.nan]), None
        return -0.5 * b * b, np.array([-b]), None

    def log_density(self, beta):
        return self.log_density_grad(beta)[0]

    def default_step_size(self, beta):
        return 4.0

    def reset_warm_start(self):
        pass


def test_sampler_aborts_when_too_many_steps_diverge():
    with pytest.raises(SolverError, match="diverge"):
        run_sampler(_BoxDensity(), np.array([0.0]), n_burn=50, n_keep=150, step_size=4.0, seed=0)


def test_sampler_recovers_rare_divergences_by_halving():
    res = run_sampler(
        _BoxDensity(), np.array([0.0]), n_burn=20, n_keep=50, step_size=0.05, seed=0
    )
    # the occasional wall hit is retried with a halved step and counted,
    # without aborting the run
    assert res.divergent_steps <= 3
    assert res.samples.shape == (50, 1)
    assert np.all(np.abs(res.samples) <= 2.0)


# ---------------------------------------------------------------------------
# posterior mode


def test_mode_without_truncation_is_least_squares():
    post, mean, _ = flat_no_truncation_posterior()
    got = selective_map(post, np.zeros(2), grad_tol=1e-10)
    assert np.allclose(got, mean, atol=1e-8)


def test_mode_is_stationary_on_selected_instances():
    for seed in (2, 5, 9):
        inst = lasso_instance(seed, beta=[4.0, 0.0, 0.0])
        post = PseudoPosterior(Prior.flat(), inst["problem"], inst["y"])
        mode = selective_map(post, inst["beta_star"], grad_tol=1e-8)
        _, grad, _ = post.log_density_grad(mode)
        assert np.max(np.abs(grad)) < 1e-6


def test_tighter_prior_pulls_mode_toward_its_mean():
    inst = lasso_instance(13, beta=[4.0, 0.0, 0.0])
    norms = []
    for scale in (10.0, 3.0, 1.0, 0.3, 0.1):
        post = PseudoPosterior(Prior.gaussian(0.0, scale), inst["problem"], inst["y"])
        mode = selective_map(post, inst["beta_star"])
        norms.append(np.linalg.norm(mode))
    assert all(a >= b - 1e-9 for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 0.2


def test_adjustment_shrinks_null_effects_relative_to_least_squares():
    # with no real signal, selected coefficients are winner's-curse inflated;
    # conditioning on selection should pull the mode back toward zero
    shrunk = total = 0
    for seed in range(30):
        inst = lasso_instance(100 + seed, beta=[0.0, 0.0, 0.0], lam=1.0)
        X_E = inst["X"][:, inst["outcome"].active_set]
        ols = np.linalg.lstsq(X_E, inst["y"], rcond=None)[0]
        post = PseudoPosterior(Prior.flat(), inst["problem"], inst["y"], grad_tol=1e-6)
        mode = selective_map(post, inst["beta_star"])
        d = np.sign(ols[0])
        total += 1
        if d * mode[0] < d * ols[0]:
            shrunk += 1
    assert shrunk / total >= 0.9


# ---------------------------------------------------------------------------
# chain diagnostics


def test_effective_sample_size_on_independent_draws():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(5000)
    ess = effective_sample_size(x)
    assert 2500 < ess < 7500


def test_effective_sample_size_on_sticky_chain():
    rng = np.random.default_rng(1)
    n = 5000
    x = np.empty(n)
    x[0] = 0.0
    for t in range(1, n):
        x[t] = 0.99 * x[t - 1] + np.sqrt(1 - 0.99**2) * rng.standard_normal()
    assert effective_sample_size(x) < n / 20


def test_effective_sample_size_degenerate_inputs():
    assert effective_sample_size(np.ones(100)) == 100.0
    assert effective_sample_size(np.array([1.0, 2.0])) == 2.0


def test_chain_summaries_on_normal_draws():
    rng = np.random.default_rng(5)
    samples = rng.standard_normal((40_000, 2)) * np.array([1.0, 0.5])
    out = chain_summaries(samples, level=0.90)
    assert out["level"] == 0.90
    for j, sd in enumerate([1.0, 0.5]):
        assert out["mean"][j] == pytest.approx(samples[:, j].mean())
        assert out["sd"][j] == pytest.approx(sd, abs=0.05)
        assert out["lower"][j] == pytest.approx(-1.6449 * sd, abs=0.05)
        assert out["upper"][j] == pytest.approx(1.6449 * sd, abs=0.05)
        assert out["ess"][j] > 10_000


def test_chain_summaries_constant_chain():
    samples = np.full((50, 1), 2.5)
    out = chain_summaries(samples)
    assert out["mean"][0] == 2.5
    assert out["sd"][0] == 0.0
    assert out["lower"][0] == out["upper"][0] == 2.5
