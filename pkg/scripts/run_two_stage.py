#!/usr/bin/env python3
"""Two-stage pipeline: marginal screening, then lasso on the screened columns.

Inference targets the final selected set and conditions on both stages via the
staged normalizer. Setting --ms-alpha 0 disables screening, which should
reproduce the single-stage lasso experiment. Writes metrics.csv / trials.csv /
manifest.json to --out.
"""

import argparse
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from selbayes.experiments import parse_config_text, run_configured_experiment, write_outputs

CONFIG = pathlib.Path(__file__).resolve().parents[1] / "configs" / "two_stage_ms_lasso.cfg"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=pathlib.Path, default=CONFIG)
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("results/two_stage"))
    ap.add_argument("--trials", type=int, default=None, help="override trial count")
    ap.add_argument("--seed", type=int, default=None, help="override seed")
    ap.add_argument("--ms-alpha", type=float, default=None, help="override screening threshold")
    args = ap.parse_args(argv)

    config = parse_config_text(args.config.read_text())
    if args.trials is not None:
        config.trials = args.trials
    if args.seed is not None:
        config.seed = args.seed
    if args.ms_alpha is not None:
        config.ms_alpha = args.ms_alpha

    t0 = time.time()
    table = run_configured_experiment(config)
    elapsed = time.time() - t0

    for w in table.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(table.render())
    print(f"[{config.name}] {config.trials} trials in {elapsed:.1f}s")
    manifest = write_outputs(config, table, args.out)
    print(f"wrote {args.out} (content hash {manifest['content_hash'][:12]})")


if __name__ == "__main__":
    main()
