"""Command-line front end.

Commands: ``fit`` (monotone / dearbegg / random-effects), ``ci`` (profile
interval for theta), ``selection-test`` (Monte-Carlo test of constant
weights), and ``plotdata`` (step-function coordinates for external
plotting).  Input is a CSV with header exactly ``label,y,u`` (UTF-8, dot
decimals); the token ``education`` selects the bundled 10-study example
dataset.

Machine-readable output (a JSON document, floats at 12 significant digits)
goes to standard output; a short human summary goes to standard error.
Exit codes: 0 success, 2 input/validation error, 3 non-convergence (the
document is still emitted).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .inference import profile_ci_theta, selection_test
from .model import MetaDataset, build_groups
from .optimizer import DEConfig, FitResult, fit_monotone, fit_random_effects, fit_unconstrained

__all__ = ["main", "parse_csv", "education_csv_path", "load_education", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1
_HEADER = "label,y,u"


class CliError(Exception):
    """Input or validation problem; maps to exit code 2."""


def education_csv_path() -> Path:
    """Filesystem path of the bundled education dataset."""
    return Path(str(resources.files("stepselect").joinpath("data/education.csv")))


def parse_csv(path) -> MetaDataset:
    """Read a study CSV (header exactly ``label,y,u``) into a dataset."""
    path = Path(path)
    if not path.is_file():
        raise CliError(f"input file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        header = fh.readline()
        if header == "":
            raise CliError("missing header: empty file")
        if header.rstrip("\r\n") != _HEADER:
            raise CliError(f"malformed header: expected exactly {_HEADER!r}")
        rows = []
        for lineno, row in enumerate(csv.reader(fh), start=2):
            if not row:
                continue
            if len(row) != 3:
                raise CliError(f"row {lineno}: expected 3 fields, got {len(row)}")
            label, y_text, u_text = row
            try:
                y = float(y_text)
                u = float(u_text)
            except ValueError:
                raise CliError(f"row {lineno}: non-numeric y or u") from None
            if not math.isfinite(y):
                raise CliError(f"row {lineno}: y must be finite")
            if not (math.isfinite(u) and u > 0.0):
                raise CliError(f"row {lineno}: u must be finite and > 0")
            rows.append((label, y, u))
    if len(rows) < 3:
        raise CliError(f"n >= 3 required (got {len(rows)} studies)")
    return MetaDataset.from_arrays(*zip(*rows))


def load_education() -> MetaDataset:
    return parse_csv(education_csv_path())


def _resolve_input(token: str) -> MetaDataset:
    if token == "education":
        return load_education()
    return parse_csv(token)


def _quantize(obj):
    """Recursively round floats to 12 significant digits; non-finite -> None."""
    if isinstance(obj, dict):
        return {key: _quantize(val) for key, val in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_quantize(val) for val in obj]
    if isinstance(obj, (bool, int, str)) or obj is None:
        return obj
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        return float(f"{val:.12g}") if math.isfinite(val) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_quantize(val) for val in obj.tolist()]
    raise TypeError(f"cannot serialize {type(obj)!r}")


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(_quantize(doc), indent=2, sort_keys=True) + "\n")


def _say(text: str) -> None:
    sys.stderr.write(text + "\n")


def _config_from_args(args) -> DEConfig:
    kwargs = {"seed": args.seed}
    if getattr(args, "population_size", None) is not None:
        kwargs["population_size"] = args.population_size
    if getattr(args, "max_generations", None) is not None:
        kwargs["max_generations"] = args.max_generations
    if getattr(args, "de_weight", None) is not None:
        kwargs["differential_weight"] = args.de_weight
    if getattr(args, "de_crossover", None) is not None:
        kwargs["crossover_rate"] = args.de_crossover
    if getattr(args, "value_tolerance", None) is not None:
        kwargs["value_tolerance"] = args.value_tolerance
    if getattr(args, "stagnation", None) is not None:
        kwargs["stagnation_generations"] = args.stagnation
    try:
        return DEConfig(**kwargs)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _config_block(config: DEConfig) -> dict:
    return {
        "population_size": config.population_size,
        "differential_weight": config.differential_weight,
        "crossover_rate": config.crossover_rate,
        "max_generations": config.max_generations,
        "value_tolerance": config.value_tolerance,
        "stagnation_generations": config.stagnation_generations,
    }


def _group_intervals(groups) -> list:
    # group j covers the half-open p-interval (pcuts[j], pcuts[j-1]]
    return [[groups.pcuts[j], groups.pcuts[j - 1]] for j in range(1, groups.k + 1)]


def _fit_block(result: FitResult, groups) -> dict:
    return {
        "method": result.method,
        "theta": result.theta,
        "sigma2": result.sigma2,
        "loglik": result.loglik,
        "converged": result.converged,
        "generations_used": result.generations_used,
        "weights": list(result.weights.w),
        "normalization": result.weights.normalization,
        "group_intervals_p": _group_intervals(groups),
    }


def _input_block(token: str, data: MetaDataset, groups) -> dict:
    return {
        "path": token,
        "n": data.n,
        "k": groups.k,
        "lambda1": groups.lambda1,
        "lambda": list(groups.lam),
    }


def _run_method(data: MetaDataset, method: str, lambda1: float, config: DEConfig) -> FitResult:
    if method == "monotone":
        return fit_monotone(data, lambda1, config)
    if method == "dearbegg":
        return fit_unconstrained(data, lambda1)
    if method == "random-effects":
        return fit_random_effects(data)
    raise CliError(f"unknown method {method!r}")


def _cmd_fit(args) -> int:
    data = _resolve_input(args.input)
    config = _config_from_args(args)
    groups = build_groups(data, args.lambda1)
    result = _run_method(data, args.method, args.lambda1, config)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": "fit",
        "input": _input_block(args.input, data, groups),
        "seed": args.seed,
        "config": _config_block(config),
        "fit": _fit_block(result, groups),
        "profile_ci": None,
        "selection_test": None,
    }
    _emit(doc)
    state = "converged" if result.converged else "DID NOT CONVERGE"
    _say(f"fit [{args.method}] on n={data.n} studies (k={groups.k} groups): "
         f"theta={result.theta:.4f} sigma2={result.sigma2:.4f} "
         f"loglik={result.loglik:.4f} ({state})")
    _say("weights: " + ", ".join(f"{w:.4f}" for w in result.weights.w))
    return 0 if result.converged else 3


def _cmd_ci(args) -> int:
    data = _resolve_input(args.input)
    if not (0.0 < args.level < 1.0):
        raise CliError("--level must lie strictly inside (0, 1)")
    config = _config_from_args(args)
    groups = build_groups(data, args.lambda1)
    fit = fit_monotone(data, args.lambda1, config)
    ci = profile_ci_theta(data, level=args.level, config=config,
                          lambda1=args.lambda1, fit=fit)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": "ci",
        "input": _input_block(args.input, data, groups),
        "seed": args.seed,
        "config": _config_block(config),
        "fit": _fit_block(fit, groups),
        "profile_ci": {
            "level": ci.level,
            "lower": ci.lower,
            "upper": ci.upper,
            "lower_open": ci.lower_open,
            "upper_open": ci.upper_open,
            "theta_hat": ci.theta_hat,
            "cutoff": ci.cutoff,
            "profile_curve": [[t, v] for t, v in ci.profile_curve],
        },
        "selection_test": None,
    }
    _emit(doc)
    lo = "-inf" if ci.lower_open else f"{ci.lower:.4f}"
    hi = "+inf" if ci.upper_open else f"{ci.upper:.4f}"
    _say(f"profile CI level={args.level}: theta in [{lo}, {hi}] "
         f"(theta_hat={ci.theta_hat:.4f})")
    return 0 if fit.converged else 3


def _cmd_selection_test(args) -> int:
    data = _resolve_input(args.input)
    if args.M < 1:
        raise CliError("--M must be >= 1")
    config = _config_from_args(args)
    groups = build_groups(data, args.lambda1)
    result = selection_test(data, M=args.M, lambda1=args.lambda1, config=config,
                            seed=args.seed, n_jobs=args.jobs,
                            keep_curves=args.keep_curves)
    block = {
        "M": result.M,
        "T0": result.T0,
        "p_value": result.p_value,
        "null_theta": result.null_fit.theta,
        "null_sigma2": result.null_fit.sigma2,
        "replicate_stats": list(result.replicate_stats),
        "nonconverged_replicates": list(result.nonconverged_replicates),
    }
    if args.keep_curves:
        block["replicate_weight_curves"] = [
            {"pcuts": list(pc), "weights": list(wv)}
            for pc, wv in result.replicate_weight_curves
        ]
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": "selection_test",
        "input": _input_block(args.input, data, groups),
        "seed": args.seed,
        "config": _config_block(config),
        "fit": _fit_block(result.observed_fit, groups),
        "profile_ci": None,
        "selection_test": block,
    }
    _emit(doc)
    _say(f"selection test: T0={result.T0:.4f} M={result.M} "
         f"p={result.p_value:.4f} (null theta={result.null_fit.theta:.4f}, "
         f"sigma2={result.null_fit.sigma2:.4f})")
    if result.nonconverged_replicates:
        _say(f"warning: {len(result.nonconverged_replicates)} replicate fits "
             "did not converge (flagged in document)")
    bad = (not result.observed_fit.converged) or bool(result.nonconverged_replicates)
    return 3 if bad else 0


def _cmd_plotdata(args) -> int:
    data = _resolve_input(args.input)
    config = _config_from_args(args)
    groups = build_groups(data, args.lambda1)
    result = _run_method(data, args.method, args.lambda1, config)
    k = groups.k
    w = result.weights.w
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["x_left", "x_right", "w"])
    # rows ascend in x; on the p scale group k sits on (0, pcuts[k-1]] and
    # group 1 ends at 1
    for j in range(k, 0, -1):
        if args.axis == "pscale":
            left, right = groups.pcuts[j], groups.pcuts[j - 1]
        else:
            i = k - j + 1
            left, right = (i - 1) / k, i / k
        writer.writerow([f"{left:.12g}", f"{right:.12g}", f"{w[j - 1]:.12g}"])
    _say(f"plotdata [{args.method}, {args.axis}]: {k} groups")
    return 0 if result.converged else 3


def _add_common(p: argparse.ArgumentParser, de_flags: bool = True) -> None:
    p.add_argument("input", help="CSV path with header 'label,y,u', or 'education' "
                                 "for the bundled example dataset")
    p.add_argument("--lambda1", type=float, default=2.0,
                   help="multiplicity of the largest-p group (default 2)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    if de_flags:
        p.add_argument("--population-size", type=int, default=None, dest="population_size")
        p.add_argument("--max-generations", type=int, default=None, dest="max_generations")
        p.add_argument("--de-weight", type=float, default=None, dest="de_weight",
                       help="differential weight F in (0, 2]")
        p.add_argument("--de-crossover", type=float, default=None, dest="de_crossover",
                       help="crossover rate in [0, 1]")
        p.add_argument("--value-tolerance", type=float, default=None, dest="value_tolerance")
        p.add_argument("--stagnation", type=int, default=None, dest="stagnation",
                       help="stop after this many generations without improvement")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stepselect",
        description="Meta-analysis selection models with monotone step weights "
                    "of the study p-value.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a selection or random-effects model")
    _add_common(p_fit)
    p_fit.add_argument("--method", choices=["monotone", "dearbegg", "random-effects"],
                       default="monotone")
    p_fit.set_defaults(func=_cmd_fit)

    p_ci = sub.add_parser("ci", help="profile-likelihood confidence interval for theta")
    _add_common(p_ci)
    p_ci.add_argument("--level", type=float, default=0.95)
    p_ci.set_defaults(func=_cmd_ci)

    p_st = sub.add_parser("selection-test",
                          help="Monte-Carlo test of a constant weight function")
    _add_common(p_st)
    p_st.add_argument("--M", type=int, default=1000, dest="M",
                      help="number of null replicates (default 1000)")
    p_st.add_argument("--keep-curves", action="store_true", dest="keep_curves",
                      help="retain every replicate's fitted step function")
    p_st.add_argument("--jobs", type=int, default=1,
                      help="worker processes for the replicate fits")
    p_st.set_defaults(func=_cmd_selection_test)

    p_pd = sub.add_parser("plotdata", help="emit step-function coordinates as CSV")
    _add_common(p_pd)
    p_pd.add_argument("--method", choices=["monotone", "dearbegg", "random-effects"],
                      default="monotone")
    p_pd.add_argument("--axis", choices=["pscale", "groupscale"], default="pscale")
    p_pd.set_defaults(func=_cmd_plotdata)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        _say(f"error: {exc}")
        return 2
    except ValueError as exc:
        _say(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
