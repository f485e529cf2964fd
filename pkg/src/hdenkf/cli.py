"""Command-line entry point.

Subcommands::

    hdenkf estimate --input ens.csv --estimator banding
    hdenkf run-l96 --config l96-table1 --f-assim 8 --replicates 2
    hdenkf run-swe --config swe-desk
    hdenkf run-linear --config linear-ci
    hdenkf selfcheck

Experiment settings come from three layers: built-in defaults for the
testbed, then the ``--config`` file (a shipped reference name or a path),
then command-line flags.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields
from importlib import resources

import numpy as np

from . import covariance as cov
from .ensemble import Ensemble
from .errors import CflViolation, DegenerateLikelihood, HdEnkfError, NotPositiveDefinite
from .experiments import (
    ExperimentConfig,
    aggregate,
    config_field_types,
    export,
    run_experiment,
    step_series,
)
from .numerics import RngStream

EXIT_OK, EXIT_SELFCHECK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3
REFERENCE_CONFIGS = ("l96-table1", "l96-fig2", "swe-table2", "swe-desk", "linear-ci")
SWEEP_KEYS = {"l96": "F_assim", "swe": "k_diff_assim", "linear_gaussian": None}

PRESETS = {
    "l96": {},
    "swe": {
        "testbed": "swe", "nx": 50, "ny": 31, "dx": 10e3, "dy": 10e3, "swe_dt": 30.0,
        "total_steps": 5760, "cadence": 360, "burn_in": 2880, "pre_steps": 60, "n": 100,
        "obs_columns": 10, "init_var": 1.0, "mode": "linear", "max_bandwidth": 100,
        "replicates": 1,
    },
    "linear_gaussian": {
        "testbed": "linear_gaussian", "p": 10, "q": 5, "n": 100, "total_steps": 50,
        "burn_in": 0, "cadence": 1, "init_var": 1.0, "mode": "linear",
        "variants": "standard", "replicates": 10,
    },
}


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    names = {f.name.lower(): f.name for f in fields(ExperimentConfig)}
    if key.lower() not in names:
        raise ConfigError(f"unknown configuration key {key!r}")
    return names[key.lower()]


def parse_value(key: str, text: str):
    """Convert ``text`` to the type of config field ``key``."""
    kind = config_field_types()[key]
    text = text.strip()
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(v.strip() for v in text.split(",") if v.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Returns raw string values keyed by canonical field names.
    """
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[_canonical_key(key)] = value.strip()
    return out


def load_config_file(name_or_path: str) -> dict:
    if os.path.exists(name_or_path):
        with open(name_or_path) as fh:
            return parse_config_text(fh.read())
    if name_or_path in REFERENCE_CONFIGS:
        text = resources.files("hdenkf.configs").joinpath(f"{name_or_path}.cfg").read_text()
        return parse_config_text(text)
    raise ConfigError(f"no such config file or reference config: {name_or_path!r}")


def resolve_configs(testbed: str, file_values: dict, flag_values: dict) -> list:
    """Merge preset < file < flags and expand the sweep key.

    Returns ``[(param_override, ExperimentConfig), ...]``.
    """
    raw = {k: str(v) for k, v in PRESETS[testbed].items()}
    raw["testbed"] = testbed
    raw.update(file_values)
    raw.update({k: v for k, v in flag_values.items() if v is not None})
    if raw.get("testbed", testbed) != testbed:
        raise ConfigError(f"config is for testbed {raw['testbed']!r}, not {testbed!r}")
    if flag_values.get("total_steps") is not None and flag_values.get("burn_in") is None:
        total = int(raw["total_steps"])
        if int(raw.get("burn_in", ExperimentConfig.burn_in)) >= total:
            raw["burn_in"] = str(total // 2)
    sweep_key = SWEEP_KEYS[testbed]
    sweep = [None]
    if sweep_key and sweep_key in raw:
        sweep = [v for v in raw.pop(sweep_key).split(",") if v.strip()]
    base = {k: parse_value(k, v) for k, v in raw.items()}
    out = []
    for value in sweep:
        kw = dict(base)
        label = ""
        if value is not None:
            kw[sweep_key] = parse_value(sweep_key, value)
            label = f"{sweep_key}={kw[sweep_key]:g}"
        try:
            out.append((label, ExperimentConfig(**kw)))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return out


# ---------------------------------------------------------------------------
# matrix files


def read_matrix_csv(path: str) -> np.ndarray:
    """Read a CSV matrix whose first line is ``rows,cols``."""
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise ConfigError(str(exc)) from exc
    if not lines:
        raise ConfigError("empty matrix file")
    try:
        rows, cols = (int(v) for v in lines[0].split(","))
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    except ValueError as exc:
        raise ConfigError(f"malformed matrix file: {exc}") from exc
    if data.shape != (rows, cols):
        raise ConfigError(f"header says {rows}x{cols} but found {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ConfigError("matrix file contains non-finite values")
    return data


def write_matrix_csv(path: str, m) -> None:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    with open(path, "w") as fh:
        fh.write(f"{m.shape[0]},{m.shape[1]}\n")
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def parse_grid(spec: str, kind: str) -> list:
    """``0,1,2``, ``0:10`` or ``0:10:2`` for bandwidths; ``k1/k2`` pairs for mid-banding."""
    out = []
    try:
        for part in (p.strip() for p in spec.split(",")):
            if not part:
                continue
            if kind == "mid_banding":
                k1, k2 = part.split("/")
                out.append((int(k1), int(k2)))
            elif kind == "thresholding":
                out.append(float(part))
            elif ":" in part:
                bits = [int(b) for b in part.split(":")]
                step = bits[2] if len(bits) == 3 else 1
                out.extend(range(bits[0], bits[1] + 1, step))
            else:
                out.append(int(part))
    except ValueError as exc:
        raise ConfigError(f"bad grid specification {spec!r}") from exc
    if not out:
        raise ConfigError("empty grid")
    return out


def format_tuning(kind: str, value) -> str:
    if kind == "mid_banding":
        return f"k1={value[0]} k2={value[1]}"
    if kind == "thresholding":
        return f"s={float(value)!r}"
    return f"k={value}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_estimate(args) -> int:
    members = read_matrix_csv(args.input)
    if members.shape[0] < 4:
        raise ConfigError("the ensemble file needs at least 4 rows (members)")
    e = Ensemble(members)
    grid = parse_grid(args.grid, args.estimator) if args.grid else None
    value = cov.select_tuning(e, args.estimator, args.mode, grid, args.splits, RngStream(args.seed, (0,)))
    est = cov.regularize(cov.sample_covariance(e), args.estimator, value, args.mode)
    os.makedirs(args.out, exist_ok=True)
    write_matrix_csv(os.path.join(args.out, "covariance.csv"), est.matrix)
    print(format_tuning(args.estimator, value))
    return EXIT_OK


def _flag_values(args) -> dict:
    vals = {
        "seed": args.seed,
        "replicates": args.replicates,
        "variants": args.variants,
        "total_steps": args.total_steps,
        "burn_in": args.burn_in,
        "n": args.n,
    }
    if getattr(args, "f_assim", None) is not None:
        vals["F_assim"] = args.f_assim
    if getattr(args, "k_diff_assim", None) is not None:
        vals["k_diff_assim"] = args.k_diff_assim
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        vals[_canonical_key(k)] = v
    return {k: (None if v is None else str(v)) for k, v in vals.items()}


def _plot_name(label: str, multiple: bool) -> str:
    if not multiple:
        return "steps.plotdata"
    return "steps_" + label.replace("=", "_") + ".plotdata"


def cmd_run(args, testbed: str) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    configs = resolve_configs(testbed, file_values, _flag_values(args))
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for label, cfg in configs:
        result = run_experiment(cfg, workers=args.threads)
        reps = result["replicates"]
        rows.extend(aggregate(reps, cfg, label))
        export(step_series(reps, cfg), os.path.join(args.out, _plot_name(label, len(configs) > 1)), "plotdata")
        if not args.quiet:
            print(f"finished {testbed} {label or ''} ({cfg.replicates} replicates)".replace("  ", " "))
    export(rows, os.path.join(args.out, "summary.csv"), "csv")
    if not args.quiet:
        for r in rows:
            mean = "NA" if r.mean_rmse is None else f"{r.mean_rmse:.3f}"
            print(f"{r.param_override:>18} {r.target:>6} {r.variant:>22} {mean:>8} ({r.div_rate:.2f})")
    return EXIT_OK


def cmd_selfcheck(args, gain_fn=None) -> int:
    from .selfcheck import format_report, run_checks

    results = run_checks() if gain_fn is None else run_checks(gain_fn)
    print(format_report(results))
    return EXIT_OK if all(r[1] for r in results) else EXIT_SELFCHECK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="reference config name or path to a key=value file")
    common.add_argument("--seed", type=int, help="base random seed (64-bit)")
    common.add_argument("--out", default="results", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes for replicates")
    common.add_argument("--replicates", type=int)
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="hdenkf", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", parents=[common], help="regularize an ensemble covariance")
    est.add_argument("--input", required=True, help="ensemble CSV (members as rows)")
    est.add_argument("--estimator", required=True, choices=["banding", "mid_banding", "tapering", "thresholding"])
    est.add_argument("--mode", default="linear", choices=list(cov.MODES))
    est.add_argument("--grid", help="candidate tuning values, e.g. 0:10 or 2,4,6")
    est.add_argument("--splits", type=int, default=cov.DEFAULT_SPLITS)

    for name, helptext in (
        ("run-l96", "Lorenz-96 twin experiment"),
        ("run-swe", "shallow water twin experiment"),
        ("run-linear", "linear Gaussian twin experiment with an exact KF oracle"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--variants", help="comma-separated variant names")
        p.add_argument("--total-steps", "--steps", dest="total_steps", type=int, help="model integration steps")
        p.add_argument("--burn-in", type=int)
        p.add_argument("--n", type=int, help="ensemble size")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        if name == "run-l96":
            p.add_argument("--f-assim", help="forcing used by the filters (comma list to sweep)")
        if name == "run-swe":
            p.add_argument("--k-diff-assim", help="diffusion used by the filters (comma list to sweep)")

    sub.add_parser("selfcheck", parents=[common], help="run the fast invariant checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        parser.error("--seed must be an unsigned 64-bit integer")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        if args.command == "estimate":
            if args.seed is None:
                args.seed = 0
            return cmd_estimate(args)
        if args.command == "selfcheck":
            return cmd_selfcheck(args)
        testbed = {"run-l96": "l96", "run-swe": "swe", "run-linear": "linear_gaussian"}[args.command]
        return cmd_run(args, testbed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CflViolation as exc:
        print(f"numerical error: {exc} (at model step {exc.step})", file=sys.stderr)
        return EXIT_NUMERICAL
    except (NotPositiveDefinite, DegenerateLikelihood, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HdEnkfError as exc:
        # remaining package errors are invalid inputs (dimensions, bandwidths, indices)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
