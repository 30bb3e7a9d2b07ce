"""Tests for the normalizer solvers: interval masses, the four formulations,
multi-stage composition, Monte Carlo reference estimates, and the value
function's analytic gradient."""

import numpy as np
import pytest
from scipy.optimize import minimize as scipy_minimize
from scipy.special import ndtr

from selbayes import (
    GenerativeModel,
    InversionMap,
    NormalizerProblem,
    Randomizer,
    SelectionRegion,
    forward_stepwise_query,
    lasso_inversion_map,
    marginal_screening_query,
    solve_randomized_lasso,
)
from selbayes.barriers import region_barrier_value_grad
from selbayes.normalizer import (
    chernoff_dual_solve,
    dual_solve,
    log_inactive_volume,
    mc_selection_probability,
    multistage_solve,
    primal_full_solve,
    primal_reduced_solve,
    solve_normalizer,
)

from conftest import lasso_instance, no_truncation_problem
from corpus import corpus_problems, shrinking_noise_problem, two_stage_tiny


def synthetic_map(n_active, n_inactive, dim_data, D=None, P=None, q=None):
    dim = n_active + n_inactive
    if D is None:
        D = np.zeros((dim, dim_data))
    if P is None:
        P = np.eye(dim)
    if q is None:
        q = np.zeros(dim)
    return InversionMap(D=D, P=P, q=q, n_active=n_active, perm=np.arange(dim))


# ---------------------------------------------------------------------------
# exact inactive interval masses


def test_inactive_mass_unit_interval():
    # one inactive coordinate, centered at zero with bound 1 and unit noise:
    # the mass is the standard normal probability of [-1, 1]
    mapping = synthetic_map(1, 1, 1)
    region = SelectionRegion(signs=np.array([1.0]), inactive_bounds=np.array([1.0]))
    got = log_inactive_volume(np.array([2.0]), np.array([0.5]), mapping, region, 1.0)
    assert got == pytest.approx(np.log(ndtr(1.0) - ndtr(-1.0)), abs=1e-12)
    assert got == pytest.approx(-0.38171514630212616, abs=1e-12)


def test_inactive_mass_shifted_intervals():
    for shift, bound, tau in [(0.7, 1.3, 1.0), (-2.0, 0.4, 0.5), (3.5, 2.0, 2.0)]:
        mapping = synthetic_map(1, 1, 1, q=np.array([0.0, shift]))
        region = SelectionRegion(signs=np.array([1.0]), inactive_bounds=np.array([bound]))
        got = log_inactive_volume(np.array([1.0]), np.zeros(1), mapping, region, tau)
        want = np.log(ndtr((shift + bound) / tau) - ndtr((shift - bound) / tau))
        assert got == pytest.approx(want, rel=1e-10)


def test_inactive_mass_infinite_bound_is_full_mass():
    mapping = synthetic_map(1, 2, 1)
    region = SelectionRegion(signs=np.array([1.0]), inactive_bounds=np.array([np.inf, np.inf]))
    got = log_inactive_volume(np.array([1.0]), np.zeros(1), mapping, region, 1.0)
    assert got == pytest.approx(0.0, abs=1e-12)


def test_inactive_mass_no_inactive_block():
    mapping = synthetic_map(2, 0, 3)
    region = SelectionRegion(signs=np.array([1.0, -1.0]))
    assert log_inactive_volume(np.array([1.0, -1.0]), np.zeros(3), mapping, region, 1.0) == 0.0


def test_inactive_mass_matches_monte_carlo(rng):
    d, m, n_in = 3, 2, 3
    dim = m + n_in
    D = rng.standard_normal((dim, d))
    P = np.eye(dim)
    P[m:, :m] = rng.standard_normal((n_in, m))
    q = rng.standard_normal(dim)
    mapping = InversionMap(D=D, P=P, q=q, n_active=m, perm=np.arange(dim))
    bounds = np.array([0.8, 1.5, 0.6])
    region = SelectionRegion(signs=np.array([1.0, -1.0]), inactive_bounds=bounds)
    s = rng.standard_normal(d)
    o_act = np.array([0.9, -1.4])
    tau = 0.8
    got = log_inactive_volume(o_act, s, mapping, region, tau)

    alpha = mapping.D_inactive @ s + mapping.P_inactive_active @ o_act + mapping.q_inactive
    draws = 500_000
    w = tau * rng.standard_normal((draws, n_in))
    inside = np.all(np.abs(w - alpha) <= bounds, axis=1)
    phat = inside.mean()
    se = np.sqrt(phat * (1 - phat) / draws)
    assert abs(np.exp(got) - phat) < 3 * se + 1e-12


def test_inactive_mass_data_dependent_bound():
    # cone regions bound every inactive coordinate by the active magnitude
    mapping = synthetic_map(1, 2, 1)
    region = SelectionRegion(signs=np.array([1.0]), bound_from_active=True)
    got = log_inactive_volume(np.array([1.3]), np.zeros(1), mapping, region, 1.0)
    want = 2 * np.log(ndtr(1.3) - ndtr(-1.3))
    assert got == pytest.approx(want, rel=1e-12)
    # active variable on the wrong side of its sign leaves an empty region
    assert log_inactive_volume(np.array([-0.5]), np.zeros(1), mapping, region, 1.0) == -np.inf


def test_inactive_mass_wrong_active_length():
    mapping = synthetic_map(2, 1, 1)
    region = SelectionRegion(signs=np.array([1.0, 1.0]), inactive_bounds=np.array([1.0]))
    with pytest.raises(ValueError):
        log_inactive_volume(np.array([1.0]), np.zeros(1), mapping, region, 1.0)


# ---------------------------------------------------------------------------
# degenerate problem: no constraint at all


def test_unconstrained_problem_has_zero_value(rng):
    model = GenerativeModel.linear(rng.standard_normal((4, 2)))
    pb = no_truncation_problem(model, p=3)
    beta = np.array([0.4, -1.1])
    for solver in (primal_reduced_solve, primal_full_solve, dual_solve):
        res = solver(pb, beta)
        assert res.converged
        assert res.value == pytest.approx(0.0, abs=1e-8)
        assert np.allclose(res.optimal_s, pb.model.mean_map(beta), atol=1e-6)
    res = dual_solve(pb, beta)
    assert np.allclose(res.optimal_u, 0.0, atol=1e-8)
    ch = chernoff_dual_solve(pb, beta)
    assert ch.value == pytest.approx(0.0, abs=1e-10)


# ---------------------------------------------------------------------------
# smooth primal against smooth dual


def test_primal_dual_gap_and_data_recovery():
    for seed in range(10):
        inst = lasso_instance(seed, beta=[4.0, 0.0, 0.0])
        pb, bstar = inst["problem"], inst["beta_star"]
        rp = primal_full_solve(pb, bstar)
        rd = dual_solve(pb, bstar)
        assert rp.converged and rd.converged
        gap = abs(rp.value - rd.value) / max(1.0, abs(rp.value))
        assert gap < 1e-6
        # the dual recovers the optimal data vector from its multiplier
        s_from_u = pb.model.mean_map(bstar) + pb.model.cov_matvec(pb.map.D.T @ rd.optimal_u)
        assert np.allclose(s_from_u, rd.optimal_s, atol=1e-12)
        assert np.allclose(rd.optimal_s, rp.optimal_s, atol=1e-5)


def test_primal_optimum_is_minimal_among_feasible_points(rng):
    inst = lasso_instance(3, beta=[4.0, 0.0, 0.0])
    pb, bstar = inst["problem"], inst["beta_star"]
    res = primal_full_solve(pb, bstar)

    def objective(s, o):
        bval, _ = region_barrier_value_grad(o, pb.region, inactive=pb.inactive_barrier)
        if not np.isfinite(bval):
            return np.inf
        w = pb.map.omega(s, o)
        return pb.model.conjugate(s, bstar) + pb.randomizer.conjugate(w) + bval

    f_star = objective(res.optimal_s, res.optimal_o)
    assert f_star == pytest.approx(-res.value, abs=1e-9)
    m = pb.map.n_active
    mu = np.asarray(pb.model.mean_map(bstar), dtype=float)
    for _ in range(100):
        s = mu + rng.standard_normal(mu.size)
        o = np.empty(pb.map.dim_opt)
        o[:m] = pb.region.signs * (0.05 + 3.0 * rng.random(m))
        if pb.map.dim_opt > m:
            b = pb.region.inactive_bounds
            o[m:] = (2 * rng.random(pb.map.dim_opt - m) - 1) * 0.999 * b
        assert objective(s, o) >= f_star - 1e-9


def test_saturated_selection_reduced_equals_full():
    # tiny penalty keeps every column active, so there is no inactive block
    # to integrate and both primal forms solve the same problem
    rng = np.random.default_rng(8)
    X = rng.standard_normal((6, 2))
    X /= np.linalg.norm(X, axis=0)
    y = X @ np.array([5.0, -4.0]) + rng.standard_normal(6)
    out = solve_randomized_lasso(y, X, 0.05, 1 / np.sqrt(6), 0.3 * rng.standard_normal(2))
    assert out.active_set.size == 2
    mapping, region = lasso_inversion_map(out, X, 0.05, 1 / np.sqrt(6))
    model = GenerativeModel.linear(X)
    pb = NormalizerProblem(model, Randomizer.isotropic(1.0, 2), mapping, region)
    bstar = np.array([5.0, -4.0])
    rr = primal_reduced_solve(pb, bstar)
    rf = primal_full_solve(pb, bstar)
    assert rr.value == pytest.approx(rf.value, abs=1e-7)


# ---------------------------------------------------------------------------
# corpus-wide solver behavior


def test_reduced_solver_converges_across_corpus():
    for pb, bstar in corpus_problems():
        res = primal_reduced_solve(pb, bstar)
        assert res.converged
        assert res.value < 0.0
        assert np.isfinite(res.value)


def test_certificate_bounds_and_orderings():
    # the hard-constraint dual never exceeds zero, upper-bounds the smooth
    # dual, and stays above the Monte Carlo log probability
    for (pb, bstar), _ in zip(corpus_problems(), range(8)):
        ch = chernoff_dual_solve(pb, bstar)
        assert ch.value <= 1e-12
        rd = dual_solve(pb, bstar)
        assert rd.value <= ch.value + 1e-8
        mc = mc_selection_probability(pb, bstar, draws=300_000, seed=77)
        assert ch.value >= mc.log_estimate - 3 * mc.log_std_error


def test_value_midpoint_concavity(rng):
    # the log normalizer approximation is concave in the parameter: midpoint
    # values dominate chord midpoints
    pb, bstar = corpus_problems()[0]
    dim = bstar.size
    for _ in range(20):
        a = bstar + 3.0 * rng.standard_normal(dim)
        b = bstar + 3.0 * rng.standard_normal(dim)
        va = primal_reduced_solve(pb, a).value
        vb = primal_reduced_solve(pb, b).value
        vm = primal_reduced_solve(pb, 0.5 * (a + b)).value
        assert vm >= 0.5 * (va + vb) - 1e-6


# ---------------------------------------------------------------------------
# multi-stage solves


def test_single_stage_list_matches_direct_solve():
    pb, bstar = corpus_problems()[0]
    r1 = multistage_solve([pb], bstar, formulation="primal_reduced")
    r2 = primal_reduced_solve(pb, bstar)
    assert r1.value == pytest.approx(r2.value, abs=1e-10)


def test_two_stage_dual_matches_derivative_free_minimizer():
    problems, bstar = two_stage_tiny()
    rd = multistage_solve(problems, bstar, formulation="dual")
    assert rd.converged

    model = problems[0].model
    d = model.dim
    splits = np.cumsum([d] + [pb.map.dim_opt for pb in problems])

    def staged_objective(x):
        s = x[: splits[0]]
        total = model.conjugate(s, bstar)
        for pb, lo, hi in zip(problems, splits[:-1], splits[1:]):
            o = x[lo:hi]
            bval, _ = region_barrier_value_grad(o, pb.region, inactive=pb.inactive_barrier)
            if not np.isfinite(bval):
                return 1e10
            total += pb.randomizer.conjugate(pb.map.omega(s, o)) + bval
        return total

    x0 = np.concatenate(
        [np.asarray(model.mean_map(bstar), dtype=float)]
        + [_neutral_opt(pb) for pb in problems]
    )
    nm = scipy_minimize(
        staged_objective,
        x0,
        method="Nelder-Mead",
        options={"xatol": 1e-9, "fatol": 1e-12, "maxfev": 80_000, "maxiter": 80_000},
    )
    assert -nm.fun == pytest.approx(rd.value, abs=1e-6)
    assert np.allclose(nm.x[:d], rd.optimal_s, atol=1e-4)


def _neutral_opt(pb):
    o = np.zeros(pb.map.dim_opt)
    o[: pb.map.n_active] = pb.region.signs
    return o


def test_two_stage_value_near_monte_carlo():
    problems, bstar = two_stage_tiny()
    res = multistage_solve(problems, bstar, formulation="primal_reduced")
    mc = mc_selection_probability(problems, bstar, draws=2_000_000, seed=955)
    assert not mc.zero_hits
    assert abs(res.value - mc.log_estimate) < 0.2


def test_stages_must_share_model():
    problems, bstar = two_stage_tiny()
    clone = NormalizerProblem(
        GenerativeModel.linear(problems[0].model.design.copy()),
        problems[1].randomizer,
        problems[1].map,
        problems[1].region,
    )
    with pytest.raises(ValueError):
        multistage_solve([problems[0], clone], bstar)


# ---------------------------------------------------------------------------
# dispatch and restrictions


def test_dispatch_honors_requested_formulation():
    pb, bstar = corpus_problems()[1]
    for form, direct in [
        ("primal_reduced", primal_reduced_solve),
        ("primal_full", primal_full_solve),
        ("dual", dual_solve),
    ]:
        pb2 = NormalizerProblem(pb.model, pb.randomizer, pb.map, pb.region, formulation=form)
        assert solve_normalizer(pb2, bstar).value == pytest.approx(direct(pb, bstar).value, abs=1e-12)


def test_dispatch_accepts_stage_lists():
    problems, bstar = two_stage_tiny()
    got = solve_normalizer(problems, bstar)
    want = multistage_solve(problems, bstar)
    assert got.value == pytest.approx(want.value, abs=1e-12)


def test_dual_forms_reject_data_dependent_bounds():
    mapping = synthetic_map(1, 2, 2)
    region = SelectionRegion(signs=np.array([1.0]), bound_from_active=True)
    model = GenerativeModel.linear(np.eye(2))
    pb = NormalizerProblem(model, Randomizer.isotropic(1.0, 3), mapping, region)
    with pytest.raises(ValueError):
        dual_solve(pb, np.zeros(2))
    with pytest.raises(ValueError):
        chernoff_dual_solve(pb, np.zeros(2))


# ---------------------------------------------------------------------------
# analytic gradient of the value function


def envelope_gradient(pb, bstar, res):
    # differentiating the optimal value in the parameter only involves the
    # data-fit term, evaluated at the optimal data vector
    J = np.asarray(pb.model.mean_jacobian(bstar), dtype=float)
    mu = np.asarray(pb.model.mean_map(bstar), dtype=float)
    return J.T @ pb.model.cov_solve(res.optimal_s - mu)


@pytest.mark.parametrize("solver", [primal_reduced_solve, primal_full_solve, dual_solve])
def test_value_gradient_matches_finite_differences(solver, rng):
    for idx in (0, 15):
        pb, b0 = corpus_problems()[idx]
        for _ in range(3):
            bstar = b0 + rng.standard_normal(b0.size)
            res = solver(pb, bstar)
            grad = envelope_gradient(pb, bstar, res)
            h = 1e-5
            for j in range(bstar.size):
                e = np.zeros(bstar.size)
                e[j] = h
                fd = (solver(pb, bstar + e).value - solver(pb, bstar - e).value) / (2 * h)
                assert abs(fd - grad[j]) < 1e-4 * max(1.0, abs(grad[j]))


def test_value_gradient_screening_and_stepwise(rng):
    # same check for the other two query types, including the cone region
    # whose inactive bound rides on the active variable
    X = rng.standard_normal((6, 3))
    X /= np.linalg.norm(X, axis=0)
    y = X @ np.array([5.0, 0.0, 0.0]) + rng.standard_normal(6)

    out, mapping, region = marginal_screening_query(y, X, 1.0, 1.0, 0.7 * rng.standard_normal(3))
    assert out.active_set.size
    ms_pb = NormalizerProblem(
        GenerativeModel.linear(X[:, out.active_set]),
        Randomizer.isotropic(0.7, 3),
        mapping,
        region,
    )
    steps = forward_stepwise_query(y, X, [0.5 * rng.standard_normal(3)])
    out_fs, map_fs, reg_fs = steps[0]
    fs_pb = NormalizerProblem(
        GenerativeModel.linear(X[:, out_fs.active_set]),
        Randomizer.isotropic(0.5, 3),
        map_fs,
        reg_fs,
    )
    for pb in (ms_pb, fs_pb):
        dim = pb.model.design.shape[1]
        bstar = 2.0 + rng.standard_normal(dim)
        res = primal_reduced_solve(pb, bstar)
        assert res.converged
        grad = envelope_gradient(pb, bstar, res)
        h = 1e-5
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = h
            fd = (
                primal_reduced_solve(pb, bstar + e).value
                - primal_reduced_solve(pb, bstar - e).value
            ) / (2 * h)
            assert abs(fd - grad[j]) < 1e-4 * max(1.0, abs(grad[j]))


# ---------------------------------------------------------------------------
# Monte Carlo reference estimates


def test_mc_full_region_gives_probability_one(rng):
    model = GenerativeModel.linear(rng.standard_normal((4, 2)))
    pb = no_truncation_problem(model, p=3)
    mc = mc_selection_probability(pb, np.zeros(2), draws=10_000, seed=0)
    assert mc.hits == mc.draws
    assert mc.estimate == pytest.approx(1.0)
    assert mc.log_estimate == pytest.approx(0.0, abs=1e-12)


def test_mc_error_shrinks_with_draws():
    pb, bstar = corpus_problems()[2]
    small = mc_selection_probability(pb, bstar, draws=100_000, seed=5)
    large = mc_selection_probability(pb, bstar, draws=400_000, seed=5)
    ratio = small.log_std_error / large.log_std_error
    assert 1.5 < ratio < 2.5


def single_column_problem(lam=1.0, tau=1.0):
    # one unit column: selecting it with positive sign is exactly the event
    # that the randomized score clears the penalty level
    X = np.array([[1.0]])
    y = np.array([3.0])
    out = solve_randomized_lasso(y, X, lam, 1.0, np.array([0.4]))
    assert out.active_set.size == 1 and out.active_signs[0] == 1.0
    mapping, region = lasso_inversion_map(out, X, lam, 1.0)
    model = GenerativeModel.linear(X)
    return NormalizerProblem(model, Randomizer.isotropic(tau, 1), mapping, region)


def test_mc_matches_single_column_closed_form():
    lam, tau = 1.0, 1.0
    pb = single_column_problem(lam, tau)
    for bstar in (0.0, 1.5):
        exact = float(ndtr((bstar - lam) / np.sqrt(1 + tau**2)))
        mc = mc_selection_probability(pb, np.array([bstar]), draws=1_000_000, seed=31)
        assert abs(mc.estimate - exact) < 3 * mc.std_error + 1e-9


def test_certificate_dominates_single_column_probability():
    lam, tau = 1.0, 1.0
    pb = single_column_problem(lam, tau)
    for bstar in (0.0, 1.0, 2.5):
        exact_log = np.log(ndtr((bstar - lam) / np.sqrt(1 + tau**2)))
        ch = chernoff_dual_solve(pb, np.array([bstar]))
        assert ch.value >= exact_log - 1e-9


def test_mc_refuses_high_dimensional_problems(rng):
    X = rng.standard_normal((40, 2))
    X /= np.linalg.norm(X, axis=0)
    y = X @ np.array([6.0, 0.0]) + rng.standard_normal(40)
    out = solve_randomized_lasso(y, X, 1.2, 1 / np.sqrt(40), rng.standard_normal(2))
    assert out.active_set.size
    mapping, region = lasso_inversion_map(out, X, 1.2, 1 / np.sqrt(40))
    pb = NormalizerProblem(
        GenerativeModel.linear(X[:, out.active_set]),
        Randomizer.isotropic(1.0, 2),
        mapping,
        region,
    )
    with pytest.raises(ValueError):
        mc_selection_probability(pb, np.ones(out.active_set.size), draws=1000, seed=0)


def test_mc_reports_zero_hits_on_rare_events():
    pb = single_column_problem()
    mc = mc_selection_probability(pb, np.array([-20.0]), draws=10_000, seed=2)
    assert mc.zero_hits
    assert mc.hits == 0
    assert mc.estimate == 0.0
    assert mc.log_estimate == pytest.approx(np.log(3 / 10_000))
    assert np.isinf(mc.log_std_error)


# ---------------------------------------------------------------------------
# rate-scaled accuracy as noise shrinks


def test_rate_normalized_error_shrinks_with_sample_size():
    devs = []
    for n in (100, 400):
        pb, bstar = shrinking_noise_problem(n)
        res = primal_reduced_solve(pb, bstar)
        mc = mc_selection_probability(pb, bstar, draws=500_000, seed=n)
        assert not mc.zero_hits
        devs.append(abs(res.value - mc.log_estimate) / n)
    assert devs[1] <= devs[0]
