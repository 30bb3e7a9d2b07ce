"""Command-line entry points.

Subcommands:
  selectprob  approximate log selection probability of a serialized problem
  sample      Langevin chain for the approximate selective posterior
  simulate    run a configured coverage/risk experiment
  oracle      small-problem Monte Carlo check of the selection probability
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .experiments import parse_config_text, run_configured_experiment, write_outputs
from .models import Prior
from .normalizer import mc_selection_probability, solve_normalizer
from .optimize import SolverError
from .posterior import PseudoPosterior, chain_summaries, run_sampler
from .serialize import load_problem


def _parse_beta(text: str) -> np.ndarray:
    parts = [t for t in text.replace(",", " ").split() if t]
    if not parts:
        raise ValueError("empty parameter vector")
    return np.array([float(t) for t in parts])


def _parse_prior(spec: str) -> Prior:
    name, _, args = spec.partition(":")
    if name == "flat":
        return Prior.flat()
    if name == "gaussian":
        vals = [float(a) for a in args.split(",")] if args else []
        if len(vals) == 0:
            return Prior.gaussian()
        if len(vals) == 1:
            return Prior.gaussian(scale=vals[0])
        return Prior.gaussian(mean=vals[0], scale=vals[1])
    if name == "mixture":
        vals = [float(a) for a in args.split(",")] if args else []
        if len(vals) == 0:
            return Prior.laplace_mixture()
        if len(vals) != 3:
            raise ValueError("mixture prior takes w,b1,b2")
        return Prior.laplace_mixture(*vals)
    raise ValueError(f"unknown prior spec {spec!r}")


def _with_formulation(problem, formulation):
    if formulation is None:
        return problem
    from .normalizer import NormalizerProblem

    def rebuild(pb):
        return NormalizerProblem(
            model=pb.model,
            randomizer=pb.randomizer,
            map=pb.map,
            region=pb.region,
            formulation=formulation,
            inactive_barrier=pb.inactive_barrier,
        )

    if isinstance(problem, list):
        return [rebuild(pb) for pb in problem]
    return rebuild(problem)


def _cmd_selectprob(args) -> int:
    problem, _ = load_problem(args.problem)
    problem = _with_formulation(problem, args.formulation)
    beta = _parse_beta(args.beta)
    res = solve_normalizer(problem, beta)
    out = {
        "value": res.value,
        "s_star": np.asarray(res.optimal_s).tolist(),
        "iterations": res.iterations,
        "converged": bool(res.converged),
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _cmd_sample(args) -> int:
    problem, s_obs = load_problem(args.problem)
    problem = _with_formulation(problem, args.formulation)
    if s_obs is None:
        raise ValueError("problem file must carry s_obs to sample from")
    if args.iterations <= args.burn_in:
        raise ValueError("iterations must exceed burn_in")
    prior = _parse_prior(args.prior)
    posterior = PseudoPosterior(prior, problem, s_obs)
    model = posterior.model
    if model.design is None:
        raise ValueError("sampling needs a linear model")
    beta0 = np.linalg.lstsq(model.design, s_obs, rcond=None)[0]
    chain = run_sampler(
        posterior,
        beta0,
        n_burn=args.burn_in,
        n_keep=args.iterations - args.burn_in,
        step_size=args.step_size,
        seed=args.seed,
        method=args.method,
    )
    k = chain.samples.shape[1]
    header = ",".join(f"beta_{j}" for j in range(k))
    lines = [header]
    for row in chain.samples:
        lines.append(",".join(repr(float(v)) for v in row))
    chain_text = "\n".join(lines) + "\n"
    if args.chain_out:
        with open(args.chain_out, "w") as fh:
            fh.write(chain_text)
    else:
        sys.stdout.write(chain_text)
    summ = chain_summaries(chain.samples, level=args.level)
    summary = {
        "mean": summ["mean"].tolist(),
        "ci_lower": summ["lower"].tolist(),
        "ci_upper": summ["upper"].tolist(),
        "ess_estimate": summ["ess"].tolist(),
        "level": args.level,
        "step_size": chain.step_size,
        "divergent_steps": chain.divergent_steps,
    }
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    if args.summary_out:
        with open(args.summary_out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_simulate(args) -> int:
    with open(args.config) as fh:
        config = parse_config_text(fh.read())
    table = run_configured_experiment(config)
    write_outputs(config, table, args.out)
    for warning in table.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    sys.stdout.write(table.render())
    return 0


def _cmd_oracle(args) -> int:
    problem, _ = load_problem(args.problem)
    beta = _parse_beta(args.beta)
    est = mc_selection_probability(problem, beta, draws=args.draws, seed=args.seed)
    out = {
        "estimate": est.estimate,
        "std_error": est.std_error,
        "log_estimate": est.log_estimate,
        "log_std_error": est.log_std_error,
        "draws": est.draws,
        "hits": est.hits,
        "zero_hits": est.zero_hits,
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selbayes",
        description="Approximate Bayesian inference after randomized selection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("selectprob", help="approximate log selection probability")
    p.add_argument("--problem", required=True, help="problem JSON file")
    p.add_argument("--beta", required=True, help="comma-separated parameter vector")
    p.add_argument("--formulation", default=None, help="override the problem's formulation")
    p.set_defaults(func=_cmd_selectprob)

    p = sub.add_parser("sample", help="sample the approximate selective posterior")
    p.add_argument("--problem", required=True, help="problem JSON file (with s_obs)")
    p.add_argument("--prior", default="flat", help="flat | gaussian[:mean,scale] | mixture[:w,b1,b2]")
    p.add_argument("--iterations", type=int, default=25000, help="total Langevin steps")
    p.add_argument("--burn-in", type=int, default=5000, dest="burn_in")
    p.add_argument("--step-size", type=float, default=None, dest="step_size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=("ula", "mala"), default="ula")
    p.add_argument("--level", type=float, default=0.90)
    p.add_argument("--formulation", default=None)
    p.add_argument("--chain-out", default=None, help="CSV path for kept draws (default stdout)")
    p.add_argument("--summary-out", default=None, help="JSON path for the summary (default stdout)")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("simulate", help="run a coverage/risk experiment")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("oracle", help="Monte Carlo selection probability (small problems)")
    p.add_argument("--problem", required=True)
    p.add_argument("--beta", required=True)
    p.add_argument("--draws", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SolverError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
