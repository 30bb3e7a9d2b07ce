"""JSON round-tripping for normalizer problems.

The on-disk schema carries the linear data model (design matrix and noise
scale), the randomizer covariance, the affine reconstruction map, the
selection region, and the requested formulation; a multi-stage problem is a
"stages" list sharing one model.  An optional "s_obs" vector lets the sample
command carry the observed data alongside the problem.
"""

from __future__ import annotations

import json

import numpy as np

from .models import GenerativeModel, Randomizer
from .normalizer import NormalizerProblem
from .queries import InversionMap, SelectionRegion

__all__ = [
    "problem_to_dict",
    "problem_from_dict",
    "dump_problem",
    "load_problem",
]


def _map_to_dict(mapping: InversionMap) -> dict:
    return {
        "D": mapping.D.tolist(),
        "P": mapping.P.tolist(),
        "q": mapping.q.tolist(),
        "n_active": int(mapping.n_active),
        "perm": mapping.perm.tolist(),
    }


def _map_from_dict(d: dict) -> InversionMap:
    return InversionMap(
        D=np.asarray(d["D"], dtype=float),
        P=np.asarray(d["P"], dtype=float),
        q=np.asarray(d["q"], dtype=float),
        n_active=int(d["n_active"]),
        perm=np.asarray(d["perm"], dtype=int),
    )


def _region_to_dict(region: SelectionRegion) -> dict:
    return {
        "signs": region.signs.tolist(),
        "inactive_bounds": None if region.inactive_bounds is None else region.inactive_bounds.tolist(),
        "bound_from_active": bool(region.bound_from_active),
    }


def _region_from_dict(d: dict) -> SelectionRegion:
    bounds = d.get("inactive_bounds")
    return SelectionRegion(
        signs=np.asarray(d["signs"], dtype=float),
        inactive_bounds=None if bounds is None else np.asarray(bounds, dtype=float),
        bound_from_active=bool(d.get("bound_from_active", False)),
    )


def _randomizer_to_dict(rand: Randomizer) -> dict:
    if rand.scale is not None:
        return {"scale": float(rand.scale), "dim": int(rand.dim)}
    return {"covariance": rand.covariance.tolist()}


def _randomizer_from_dict(d: dict) -> Randomizer:
    if "covariance" in d:
        return Randomizer(np.asarray(d["covariance"], dtype=float))
    return Randomizer.isotropic(float(d["scale"]), int(d["dim"]))


def _model_to_dict(model: GenerativeModel) -> dict:
    if model.design is None:
        raise ValueError("only linear models (with a stored design) serialize to JSON")
    return {
        "kind": "linear",
        "design": model.design.tolist(),
        "noise_scale": float(model.noise_scale),
    }


def _model_from_dict(d: dict) -> GenerativeModel:
    if d.get("kind", "linear") != "linear":
        raise ValueError(f"unknown model kind {d.get('kind')!r}")
    return GenerativeModel.linear(np.asarray(d["design"], dtype=float), float(d["noise_scale"]))


def _stage_to_dict(problem: NormalizerProblem) -> dict:
    return {
        "randomizer": _randomizer_to_dict(problem.randomizer),
        "map": _map_to_dict(problem.map),
        "region": _region_to_dict(problem.region),
        "inactive_barrier": problem.inactive_barrier,
    }


def problem_to_dict(problem, s_obs=None) -> dict:
    """Serialize one problem or a multi-stage list to a JSON-ready dict."""
    stages = list(problem) if isinstance(problem, (list, tuple)) else [problem]
    out = {
        "model": _model_to_dict(stages[0].model),
        "formulation": stages[0].formulation,
    }
    if len(stages) == 1:
        out.update(_stage_to_dict(stages[0]))
    else:
        out["stages"] = [_stage_to_dict(pb) for pb in stages]
    if s_obs is not None:
        out["s_obs"] = np.asarray(s_obs, dtype=float).tolist()
    return out


def problem_from_dict(d: dict):
    """Inverse of problem_to_dict; returns (problem_or_stage_list, s_obs_or_None)."""
    model = _model_from_dict(d["model"])
    formulation = d.get("formulation", "primal_reduced")
    s_obs = None if d.get("s_obs") is None else np.asarray(d["s_obs"], dtype=float)

    def build(stage: dict) -> NormalizerProblem:
        return NormalizerProblem(
            model=model,
            randomizer=_randomizer_from_dict(stage["randomizer"]),
            map=_map_from_dict(stage["map"]),
            region=_region_from_dict(stage["region"]),
            formulation=formulation,
            inactive_barrier=stage.get("inactive_barrier", "cube"),
        )

    if "stages" in d:
        return [build(s) for s in d["stages"]], s_obs
    return build(d), s_obs


def dump_problem(problem, path, s_obs=None):
    with open(path, "w") as fh:
        json.dump(problem_to_dict(problem, s_obs=s_obs), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_problem(path):
    with open(path) as fh:
        return problem_from_dict(json.load(fh))
