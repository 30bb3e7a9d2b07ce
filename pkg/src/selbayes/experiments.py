"""Simulation harness: coverage, risk, and interval-length comparisons.

Runs repeated trials of (generate data, run a randomized selection query,
sample the adjusted selective posterior, compare with the closed-form
unadjusted posterior) and aggregates the usual metrics.  Defaults are desk
scale (n=100, p=50, 50 trials); larger dimensions are plain config options.
"""

from __future__ import annotations

import hashlib
import io
import json
import pathlib
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .models import GenerativeModel, Prior, Randomizer
from .normalizer import NormalizerProblem
from .optimize import SolverError
from .posterior import PseudoPosterior, chain_summaries, run_sampler
from .queries import (
    carved_lasso_query,
    forward_stepwise_query,
    lasso_inversion_map,
    marginal_screening_query,
    solve_randomized_lasso,
    theoretical_lambda,
)

__all__ = [
    "ExperimentConfig",
    "MetricsRow",
    "MetricsTable",
    "TrialRecord",
    "parse_config_text",
    "config_to_text",
    "target_ols",
    "fcr",
    "run_experiment",
    "run_two_stage_experiment",
    "run_configured_experiment",
    "write_outputs",
]

MODELS = ("I", "II", "sparse")
QUERIES = ("lasso_fixed", "lasso_random", "carved_lasso", "fs", "ms_lasso")


@dataclass
class ExperimentConfig:
    """Knobs for one simulation experiment; mirrors the key=value config files."""

    model: str = "I"
    query: str = "lasso_fixed"
    n: int = 100
    p: int = 50
    trials: int = 50
    tau: float = 1.0
    level: float = 0.90
    seed: int = 0
    formulation: str = "primal"
    # generative-model details
    sparsity: int = 5
    amplitude: float = 7.0
    mixture_w: float = 0.90
    mixture_b1: float = 0.1
    mixture_b2: float = 1.0
    # query details
    carve_fraction: float = 0.67
    fs_steps: int = 1
    ms_alpha: float = 1.5
    lam: Optional[float] = None
    lam_draws: int = 2000
    # metric and chain details
    risk: str = "sum"
    sampler: str = "ula"
    burn_in: int = 1000
    keep: int = 4000
    step_size: Optional[float] = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.query not in QUERIES:
            raise ValueError(f"unknown query {self.query!r}")
        if self.n < 1 or self.p < 1:
            raise ValueError("dimensions must be positive")
        if self.trials < 0:
            raise ValueError("trial count must be nonnegative")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if self.formulation not in ("primal", "dual"):
            raise ValueError("formulation must be 'primal' or 'dual'")
        if self.risk not in ("sum", "mean"):
            raise ValueError("risk must be 'sum' or 'mean'")
        if self.query == "carved_lasso" and not 0.0 < self.carve_fraction < 1.0:
            raise ValueError("carve_fraction must lie strictly between 0 and 1")
        if self.query == "fs" and self.formulation == "dual":
            raise ValueError("dual formulation unavailable for forward stepwise (cone region)")

    @property
    def name(self) -> str:
        return f"{self.query}-model-{self.model}"


_OPTIONAL_FLOATS = ("lam", "step_size")


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse 'key = value' lines (# comments allowed) into a config."""
    defaults = ExperimentConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in _OPTIONAL_FLOATS:
            values[key] = None if val.lower() in ("none", "") else float(val)
        elif isinstance(known[key], bool):
            values[key] = val.lower() in ("1", "true", "yes")
        elif isinstance(known[key], int):
            values[key] = int(val)
        elif isinstance(known[key], float):
            values[key] = float(val)
        else:
            values[key] = val
    return ExperimentConfig(**values)


def config_to_text(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        val = getattr(config, f.name)
        lines.append(f"{f.name} = {'none' if val is None else val}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# metric primitives


def target_ols(X_E, X_star, beta_star) -> np.ndarray:
    """Population least-squares coefficient of the selected model:
    (X_E' X_E)^-1 X_E' X* beta*."""
    X_E = np.asarray(X_E, dtype=float)
    X_star = np.asarray(X_star, dtype=float)
    beta_star = np.asarray(beta_star, dtype=float)
    gram = X_E.T @ X_E
    rank = np.linalg.matrix_rank(gram)
    if rank < X_E.shape[1]:
        sv = np.linalg.svd(gram, compute_uv=False)
        bad = np.flatnonzero(sv < max(sv) * 1e-10) if sv.size else np.arange(X_E.shape[1])
        raise ValueError(f"selected design is rank deficient (columns {bad.tolist()})")
    return np.linalg.solve(gram, X_E.T @ (X_star @ beta_star))


def fcr(cover_flags) -> float:
    """False coverage rate: average over trials of V / max(R, 1), where each
    trial supplies one flag per constructed interval."""
    total = 0.0
    count = 0
    for flags in cover_flags:
        flags = np.asarray(flags, dtype=bool)
        miss = int(flags.size - flags.sum())
        total += miss / max(flags.size, 1)
        count += 1
    return total / count if count else 0.0


@dataclass
class TrialRecord:
    trial: int
    method: str
    n_selected: int
    n_covered: int
    risk: float
    mean_length: float


@dataclass
class MetricsRow:
    experiment: str
    method: str
    coverage: float
    risk: float
    mean_length: float
    n_trials_used: int
    n_skipped_empty: int
    n_failed: int


@dataclass
class MetricsTable:
    rows: list
    trials: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def row(self, method: str) -> MetricsRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def metrics_csv(self) -> str:
        out = io.StringIO()
        out.write("experiment,method,metric,value\n")
        for r in self.rows:
            for metric in ("coverage", "risk", "mean_length", "n_trials_used", "n_skipped_empty", "n_failed"):
                out.write(f"{r.experiment},{r.method},{metric},{_fmt(getattr(r, metric))}\n")
        return out.getvalue()

    def trials_csv(self) -> str:
        out = io.StringIO()
        out.write("trial,method,n_selected,n_covered,risk,mean_length\n")
        for t in self.trials:
            out.write(
                f"{t.trial},{t.method},{t.n_selected},{t.n_covered},{_fmt(t.risk)},{_fmt(t.mean_length)}\n"
            )
        return out.getvalue()

    def render(self) -> str:
        if not self.rows:
            return "(no completed trials)\n"
        header = f"{'experiment':<24}{'method':<12}{'coverage':>10}{'risk':>10}{'length':>10}{'used':>6}{'skip':>6}{'fail':>6}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.experiment:<24}{r.method:<12}{r.coverage:>10.4f}{r.risk:>10.4f}"
                f"{r.mean_length:>10.4f}{r.n_trials_used:>6d}{r.n_skipped_empty:>6d}{r.n_failed:>6d}"
            )
        return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# ---------------------------------------------------------------------------
# data generation


def make_design(rng, n: int, p: int) -> np.ndarray:
    """Gaussian design with unit-norm columns."""
    X = rng.standard_normal((n, p))
    return X / np.linalg.norm(X, axis=0)


def _draw_beta(config: ExperimentConfig, rng) -> np.ndarray:
    p = config.p
    if config.model == "I":
        return np.zeros(p)
    if config.model == "II":
        scales = np.where(
            rng.random(p) < config.mixture_w, config.mixture_b1, config.mixture_b2
        )
        return rng.laplace(0.0, scales)
    beta = np.zeros(p)
    support = rng.choice(p, size=min(config.sparsity, p), replace=False)
    beta[support] = config.amplitude
    return beta


def _lambda_for(config: ExperimentConfig, X, rng) -> float:
    if config.lam is not None:
        return float(config.lam)
    return theoretical_lambda(X, sigma_hat=1.0, draws=config.lam_draws, seed=rng)


# ---------------------------------------------------------------------------
# single-trial execution


def _stage_formulation(config: ExperimentConfig, diagonal: bool, cone: bool) -> str:
    if config.formulation == "dual":
        if cone:
            raise ValueError("dual formulation unavailable for forward stepwise (cone region)")
        return "dual"
    if not diagonal:
        return "primal_full"
    return "primal_reduced"


def _run_query(config: ExperimentConfig, X, y, rng):
    """Execute the configured selection query.

    Returns (active_set, stage list of (map, region, randomizer)) with the
    active set in original column indexes, or None if nothing was selected.
    """
    n, p = X.shape
    tau = config.tau
    eps = 1.0 / np.sqrt(n)
    if config.query in ("lasso_fixed", "lasso_random"):
        lam = _lambda_for(config, X, rng)
        omega = tau * rng.standard_normal(p)
        outcome = solve_randomized_lasso(y, X, lam, eps, omega)
        if outcome.active_set.size == 0:
            return None
        mapping, region = lasso_inversion_map(outcome, X, lam, eps)
        return outcome.active_set, [(mapping, region, Randomizer.isotropic(tau, p))]
    if config.query == "carved_lasso":
        lam = _lambda_for(config, X, rng)
        res = carved_lasso_query(
            y, X, lam, eps, config.carve_fraction, seed=int(rng.integers(2**31)),
        )
        if res.outcome.active_set.size == 0:
            return None
        return res.outcome.active_set, [(res.map, res.region, Randomizer(res.sigma_g))]
    if config.query == "fs":
        omegas = [tau * rng.standard_normal(p - k) for k in range(config.fs_steps)]
        steps = forward_stepwise_query(y, X, omegas)
        active = np.sort(np.concatenate([out.active_set for out, _, _ in steps]))
        stages = [(mp, rg, Randomizer.isotropic(tau, mp.dim_opt)) for _, mp, rg in steps]
        return active, stages
    raise ValueError(f"query {config.query!r} is not single stage")


def _run_two_stage_query(config: ExperimentConfig, X, y, rng):
    """Marginal screening then lasso on the screened columns."""
    n, p = X.shape
    tau = config.tau
    eps = 1.0 / np.sqrt(n)
    stages = []
    if config.ms_alpha > 0:
        omega1 = tau * rng.standard_normal(p)
        out1, map1, region1 = marginal_screening_query(y, X, config.ms_alpha, 1.0, omega1)
        if out1.active_set.size == 0:
            return None
        stages.append((map1, region1, Randomizer.isotropic(tau, p)))
        cols = out1.active_set
    else:
        # stage 1 disabled: degenerate to the single-stage lasso
        cols = np.arange(p)
    X1 = X[:, cols]
    lam = _lambda_for(config, X1, rng)
    omega2 = tau * rng.standard_normal(cols.size)
    out2 = solve_randomized_lasso(y, X1, lam, eps, omega2)
    if out2.active_set.size == 0:
        return None
    map2, region2 = lasso_inversion_map(out2, X1, lam, eps)
    stages.append((map2, region2, Randomizer.isotropic(tau, cols.size)))
    return cols[out2.active_set], stages


def _infer_one_trial(config: ExperimentConfig, X, active, stages, y, beta_true, trial: int):
    """Adjusted (sampled) and unadjusted (closed-form) inference records."""
    X_E = X[:, active]
    target = target_ols(X_E, X, beta_true)
    gram = X_E.T @ X_E
    ols = np.linalg.solve(gram, X_E.T @ y)

    model = GenerativeModel.linear(X_E, noise_scale=1.0)
    problems = []
    for mapping, region, rand in stages:
        form = _stage_formulation(config, rand.is_diagonal, region.bound_from_active)
        if len(stages) > 1 and form.startswith("primal"):
            form = "multistage"
        problems.append(NormalizerProblem(model, rand, mapping, region, formulation=form))
    # model II is the Bayes setting: the sampler gets the generative mixture
    # prior, the unadjusted comparator below stays flat-prior OLS
    if config.model == "II":
        prior = Prior.laplace_mixture(config.mixture_w, config.mixture_b1, config.mixture_b2)
    else:
        prior = Prior.flat()
    # 1e-6 inner tolerance: solver noise is orders below the Langevin noise
    # scale, and the tight default wastes line-search evaluations per step
    posterior = PseudoPosterior(
        prior, problems if len(problems) > 1 else problems[0], y, grad_tol=1e-6
    )
    chain = run_sampler(
        posterior,
        ols,
        n_burn=config.burn_in,
        n_keep=config.keep,
        step_size=config.step_size,
        seed=[config.seed, 3, trial],
        method=config.sampler,
    )
    summ = chain_summaries(chain.samples, config.level)
    adj = _record(trial, "adjusted", summ["mean"], summ["lower"], summ["upper"], target, config)

    z = ndtri(0.5 + config.level / 2.0)
    sd = np.sqrt(np.diag(np.linalg.inv(gram)))
    unadj = _record(trial, "unadjusted", ols, ols - z * sd, ols + z * sd, target, config)
    return adj, unadj


def _record(trial, method, center, lower, upper, target, config) -> TrialRecord:
    covered = int(np.sum((lower <= target) & (target <= upper)))
    err2 = float(np.sum((center - target) ** 2))
    if config.risk == "mean":
        err2 /= target.size
    return TrialRecord(
        trial=trial,
        method=method,
        n_selected=target.size,
        n_covered=covered,
        risk=err2,
        mean_length=float(np.mean(upper - lower)),
    )


# ---------------------------------------------------------------------------
# experiment drivers


def _run_trials(config: ExperimentConfig, query_fn) -> MetricsTable:
    # lasso_fixed, fs, and ms_lasso hold the design fixed across trials;
    # lasso_random and carved_lasso redraw it each trial
    rng_design = np.random.default_rng([config.seed, 0])
    X_fixed = None
    if config.query not in ("lasso_random", "carved_lasso"):
        X_fixed = make_design(rng_design, config.n, config.p)
    records = []
    skipped = 0
    failed = 0
    for trial in range(config.trials):
        rng = np.random.default_rng([config.seed, 1, trial])
        X = make_design(rng, config.n, config.p) if X_fixed is None else X_fixed
        beta_true = _draw_beta(config, rng)
        y = X @ beta_true + rng.standard_normal(config.n)
        try:
            selected = query_fn(config, X, y, rng)
        except SolverError:
            failed += 1
            continue
        if selected is None:
            skipped += 1
            continue
        active, stages = selected
        try:
            adj, unadj = _infer_one_trial(config, X, active, stages, y, beta_true, trial)
        except (SolverError, np.linalg.LinAlgError, ValueError):
            failed += 1
            continue
        records.extend([adj, unadj])
    return _aggregate(config, records, skipped, failed)


def _aggregate(config: ExperimentConfig, records, skipped: int, failed: int) -> MetricsTable:
    table = MetricsTable(rows=[], trials=records)
    used = len({r.trial for r in records})
    if config.trials and (skipped + failed) > 0.5 * config.trials:
        table.warnings.append(
            f"{skipped + failed} of {config.trials} trials unusable "
            f"({skipped} empty selections, {failed} failures)"
        )
    if used == 0:
        return table
    for method in ("adjusted", "unadjusted"):
        rows = [r for r in records if r.method == method]
        coverage = float(np.mean([r.n_covered / max(r.n_selected, 1) for r in rows]))
        table.rows.append(
            MetricsRow(
                experiment=config.name,
                method=method,
                coverage=coverage,
                risk=float(np.mean([r.risk for r in rows])),
                mean_length=float(np.mean([r.mean_length for r in rows])),
                n_trials_used=len(rows),
                n_skipped_empty=skipped,
                n_failed=failed,
            )
        )
    return table


def run_experiment(config: ExperimentConfig) -> MetricsTable:
    """Single-stage experiment: adjusted vs unadjusted rows."""
    if config.query == "ms_lasso":
        raise ValueError("use run_two_stage_experiment for the ms_lasso query")
    return _run_trials(config, _run_query)


def run_two_stage_experiment(config: ExperimentConfig) -> MetricsTable:
    """Marginal screening then lasso; inference on the final active set."""
    return _run_trials(config, _run_two_stage_query)


def run_configured_experiment(config: ExperimentConfig) -> MetricsTable:
    if config.query == "ms_lasso":
        return run_two_stage_experiment(config)
    return run_experiment(config)


def write_outputs(config: ExperimentConfig, table: MetricsTable, out_dir) -> dict:
    """metrics.csv, trials.csv, and a manifest with a content hash; returns
    the manifest dict."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = table.metrics_csv()
    trials = table.trials_csv()
    (out / "metrics.csv").write_text(metrics)
    (out / "trials.csv").write_text(trials)
    digest = hashlib.sha256()
    for chunk in (metrics, trials):
        digest.update(chunk.encode())
    manifest = {
        "config": asdict(config),
        "content_hash": digest.hexdigest(),
        "seed": config.seed,
        "trial_seeds": [[config.seed, 1, t] for t in range(config.trials)],
        "warnings": table.warnings,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
