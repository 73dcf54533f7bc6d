"""Command-line entry point: ``dcm-select run|fit|indices|simulate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from dcmselect.indices import fit_indices, fit_loglik, index_report, point_loglik
from dcmselect.model import ModelVariant, QMatrix, dump_item_params
from dcmselect.sampler import ChainConfig, PriorSpec, run_chains
from dcmselect.simulate import (
    PriorLevel,
    Quality,
    SimCondition,
    build_study_qmatrix,
    generate_condition,
    load_responses_csv,
)
from dcmselect.study import PRESETS, emit_reports, json_safe, load_config, run_study, with_overrides

log = logging.getLogger("dcmselect")


def read_matrix_csv(path: str | Path) -> np.ndarray:
    """Numeric CSV matrix; a non-numeric first row is taken as a header."""
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.strip().split(",")]
        skip = 0
    except ValueError:
        skip = 1
    return np.loadtxt(path, delimiter=",", skiprows=skip, dtype=float, ndmin=2)


def write_matrix_csv(path: str | Path, matrix: np.ndarray, prefix: str) -> None:
    matrix = np.atleast_2d(matrix)
    header = ",".join(f"{prefix}{j + 1}" for j in range(matrix.shape[1]))
    np.savetxt(path, matrix, delimiter=",", header=header, comments="", fmt="%.17g")


def _add_chain_args(p: argparse.ArgumentParser) -> None:
    defaults = ChainConfig()
    p.add_argument("--chains", type=int, default=defaults.n_chains, help="number of chains")
    p.add_argument("--burn-in", type=int, default=defaults.burn_in)
    p.add_argument("--sampling", type=int, default=defaults.sampling, help="retained iterations per chain")
    p.add_argument(
        "--max-extensions",
        type=int,
        default=defaults.max_auto_extensions,
        help="restarts with doubled length while max R-hat > 1.1",
    )


def _chain_config(args) -> ChainConfig:
    return ChainConfig(
        n_chains=args.chains,
        burn_in=args.burn_in,
        sampling=args.sampling,
        max_auto_extensions=args.max_extensions,
    )


def cmd_run(args) -> int:
    config = load_config(args.config, preset=args.preset)
    config = with_overrides(config, seed=args.seed, out=args.out)
    n_tasks = len(config.conditions) * config.replications
    log.info("running %d replications into %s", n_tasks, config.output_dir)
    result = run_study(config, jobs=args.jobs)
    emit_reports(result.artifacts, config.output_dir, config, result.failures)
    for failure in result.failures:
        print(f"failed: {failure}", file=sys.stderr)
    print(f"wrote {len(result.artifacts)} replications to {config.output_dir}")
    return 1 if result.failures else 0


def cmd_fit(args) -> int:
    data = load_responses_csv(args.data)
    qmatrix = QMatrix.from_csv(args.qmatrix)
    prior = PriorSpec.from_level(args.prior)
    fit = run_chains(data, qmatrix, args.model, prior, _chain_config(args), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = fit_indices(fit, data)
    (out / "item_params.json").write_text(dump_item_params(fit.item_params()) + "\n")
    fit.write_draws_csv(out / "draws.csv")
    write_matrix_csv(out / "loglik.csv", fit_loglik(fit, data), "draw")
    write_matrix_csv(out / "point_loglik.csv", point_loglik(fit, data)[:, None], "point")
    write_matrix_csv(out / "membership.csv", fit.membership_probs(), "class")
    report.write_pointwise_csv(out / "pointwise.csv")
    summary = {
        "model": fit.variant.value,
        "prior": PriorLevel.parse(args.prior).value,
        "seed": args.seed,
        "converged": fit.converged,
        "attempts": fit.attempts,
        "burn_in": fit.config.burn_in,
        "sampling": fit.config.sampling,
        "acceptance_rate": fit.acceptance_rate(),
        "class_probs": fit.posterior_mean_class_probs().tolist(),
        "convergence": fit.convergence.to_json(),
        "indices": report.to_json(),
    }
    (out / "fit.json").write_text(json.dumps(json_safe(summary), indent=2) + "\n")
    print(json.dumps(json_safe(report.to_json()), indent=2))
    if not fit.converged:
        print(f"warning: max R-hat {fit.convergence.max_rhat:.3f} > 1.1", file=sys.stderr)
    return 0


def cmd_indices(args) -> int:
    ll = read_matrix_csv(args.loglik)
    point = read_matrix_csv(args.point_loglik).ravel() if args.point_loglik else None
    report = index_report(ll, point)
    if args.pointwise_out:
        report.write_pointwise_csv(args.pointwise_out)
    print(json.dumps(json_safe(report.to_json()), indent=2))
    return 0


def cmd_simulate(args) -> int:
    condition = SimCondition(args.generator, args.n, args.quality, args.prior)
    data = generate_condition(condition, args.seed)
    csv_path, truth_path = data.save(args.out)
    qpath = Path(args.out).with_suffix(".qmatrix.csv")
    build_study_qmatrix().to_csv(qpath)
    print(f"wrote {csv_path}, {truth_path}, {qpath}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcm-select", description="Bayesian diagnostic classification models and fit indices."
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a simulation study from a YAML config")
    p.add_argument("--config", help="YAML study config (optional when --preset is given)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, help="override study_seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fit", help="fit one model to a response matrix")
    p.add_argument("--data", required=True, help="N x I 0/1 response CSV")
    p.add_argument("--qmatrix", required=True, help="I x A Q-matrix CSV")
    p.add_argument("--model", required=True, type=str.upper, choices=[v.value for v in ModelVariant])
    p.add_argument("--prior", required=True, choices=[v.value for v in PriorLevel])
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default="fit_out")
    _add_chain_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("indices", help="DIC, WAIC and PSIS-LOO from a log-likelihood matrix")
    p.add_argument("--loglik", required=True, help="N x S pointwise log-likelihood CSV")
    p.add_argument("--point-loglik", help="N-vector of log-likelihoods at the point estimate (enables DIC)")
    p.add_argument("--pointwise-out", help="write per-examinee contributions here")
    p.set_defaults(func=cmd_indices)

    p = sub.add_parser("simulate", help="generate one simulated data set")
    p.add_argument("--generator", required=True, type=str.upper, choices=[v.value for v in ModelVariant])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--quality", required=True, choices=[v.value for v in Quality])
    p.add_argument("--prior", default=PriorLevel.INFORMATIVE.value, choices=[v.value for v in PriorLevel])
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="output stem; writes STEM.csv and STEM.truth.json")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "run" and not (args.config or args.preset):
        parser.error("run needs --config or --preset")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
