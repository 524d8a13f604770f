"""
Command-line entry point.

Usage:
    python -m app run --experiment multivariate --d 4 --trials 1 --methods tic,nll --seed 1
    python -m app run --config experiment.json --trials 10
    python -m app eval-tac --y y.csv --y-hat y_hat.csv --cov cov.csv
    python -m app gen-data --experiment univariate --variant abs_x --count 1000 --out data/abs_x
    python -m app fetch-uci --names red_wine,white_wine
    python -m app selftest

Exit codes: 0 success, 1 validation error (nothing written), 2 runtime failure.
Errors go to standard error as `error_code=<code> message=<text>`.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.logging import configure_logging
from app.schemas.experiment import ExperimentConfig, ExperimentKind, UnivariateVariant
from app.services.data_service import UciSchema, gen_multivariate, gen_univariate, load_uci, random_feature_split, save_dataset
from app.services.metrics_service import tac_per_sample
from app.services.results_service import write_results
from app.services.selftest_service import run_selftest
from app.services.trial_service import run_trials
from app.services.uci_service import fetch_uci
from app.settings import get_settings
from app.util.matrix_io import read_cov_file

logger = logging.getLogger(__name__)

# `run` flags whose argparse dest is an ExperimentConfig field.
_RUN_FIELDS = (
    "experiment",
    "methods",
    "trials",
    "seed",
    "output_dir",
    "variant",
    "count",
    "dims",
    "samples_per_dim",
    "csv_path",
    "dataset_name",
    "drop_columns",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta",
    "hidden_dims",
    "activation",
    "workers",
    "jobs",
    "backend",
    "record_wall_time",
)


class ConfigError(Exception):
    """Invalid command line or config file; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(message)


def _str_list(value: str) -> list[str]:
    return [p.strip() for p in value.split(",") if p.strip()]


def _int_list(value: str) -> list[int]:
    try:
        return [int(p) for p in _str_list(value)]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from e


def _error_code(exc: BaseException) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", type(exc).__name__).lower()


def _report(code: str, exc: BaseException) -> None:
    message = " ".join(str(exc).split())
    print(f"error_code={code} message={message}", file=sys.stderr)


# ---------------------------------------------------------------------- run


def load_experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    data: dict[str, Any] = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config file {args.config}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {args.config} must hold a flat JSON object")
    for name in _RUN_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if "experiment" not in data:
        raise ConfigError("--experiment is required (flag or config file)")
    config = ExperimentConfig.model_validate(data)
    if config.experiment == ExperimentKind.UCI and not Path(config.csv_path).is_file():
        raise ConfigError(f"UCI csv not found: {config.csv_path}")
    return config


def _cmd_run(args: argparse.Namespace) -> int:
    config = load_experiment_config(args)
    settings = get_settings()
    out_dir = Path(config.output_dir or Path(settings.OUTPUT_DIR) / f"{config.experiment.value}_seed{config.seed}")

    outcomes = run_trials(config, artifacts_dir=out_dir / "trials")
    paths = write_results(out_dir, config, outcomes)
    rows = sum(len(o.results) for o in outcomes)
    failures = sum(len(o.failures) for o in outcomes)
    print(f"results={paths.results_csv} rows={rows} failures={failures}")
    if rows == 0:
        _report("all_trials_failed", RuntimeError(f"{failures} method runs failed, see {paths.results_json}"))
        return 2
    return 0


# ----------------------------------------------------------------- eval-tac


def _read_matrix_csv(path: str) -> np.ndarray:
    try:
        return pd.read_csv(path).to_numpy(dtype=np.float64)
    except (OSError, ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"Cannot read {path}: {e}") from e


def _cmd_eval_tac(args: argparse.Namespace) -> int:
    y = _read_matrix_csv(args.y)
    y_hat = _read_matrix_csv(args.y_hat)
    try:
        covs = read_cov_file(args.cov)
    except (OSError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if y.shape != y_hat.shape:
        raise ConfigError(f"y is {y.shape} but y_hat is {y_hat.shape}")
    if covs.shape != (y.shape[0], y.shape[1], y.shape[1]):
        raise ConfigError(f"covariance file holds {covs.shape}, expected {(y.shape[0], y.shape[1], y.shape[1])}")

    per_sample = tac_per_sample(y, y_hat, covs)
    print(f"tac={float(np.mean(per_sample)):.10g} n_samples={y.shape[0]} dim={y.shape[1]}")
    return 0


# ----------------------------------------------------------------- gen-data


def _cmd_gen_data(args: argparse.Namespace) -> int:
    kind = ExperimentKind(args.experiment)
    if kind == ExperimentKind.UNIVARIATE:
        dataset = gen_univariate(UnivariateVariant(args.variant), args.count or 10_000, args.seed, noise=not args.no_noise)
        spec_payload = None
    elif kind == ExperimentKind.MULTIVARIATE:
        if args.d is None or args.d % 2 != 0 or not 4 <= args.d <= 20:
            raise ConfigError(f"--d must be an even integer in [4, 20], got {args.d}")
        dataset, spec = gen_multivariate(args.d, args.seed, samples=args.count, include_z=not args.no_noise)
        spec_payload = {"dim": spec.dim, "joint_mean": spec.joint_mean.tolist(), "joint_cov": spec.joint_cov.tolist()}
    else:
        if not args.csv_path or not Path(args.csv_path).is_file():
            raise ConfigError(f"UCI csv not found: {args.csv_path}")
        table = load_uci(UciSchema(path=args.csv_path, name=args.dataset_name or ""))
        dataset = random_feature_split(table, args.seed)
        spec_payload = None

    out = save_dataset(dataset, args.out)
    if spec_payload is not None:
        (out / "distribution.json").write_text(json.dumps(spec_payload, indent=2) + "\n", encoding="utf-8")
    print(f"dataset={out} rows={dataset.n_samples} inputs={dataset.input_dim} targets={dataset.target_dim}")
    return 0


# ---------------------------------------------------------------- fetch-uci


def _cmd_fetch_uci(args: argparse.Namespace) -> int:
    for path in fetch_uci(names=args.names, dest=args.dest):
        print(f"wrote={path}")
    return 0


# ----------------------------------------------------------------- selftest


def _cmd_selftest(args: argparse.Namespace) -> int:
    results = run_selftest()
    for r in results:
        print(f"check={r.name} status={'pass' if r.passed else 'fail'} detail={r.detail}")
    return 0 if all(r.passed for r in results) else 2


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="python -m app", description="Heteroscedastic covariance estimation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run trials and write results.csv / results.json")
    run.add_argument("--config", help="Flat JSON file mirroring these flags; flags win")
    run.add_argument("--experiment", choices=[k.value for k in ExperimentKind])
    run.add_argument("--methods", type=_str_list, help="Comma-separated: tic,nll,diagonal,beta_nll,faithful,mse")
    run.add_argument("--trials", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--output-dir", dest="output_dir")
    run.add_argument("--variant", choices=[v.value for v in UnivariateVariant])
    run.add_argument("--count", type=int, help="Univariate sample count")
    run.add_argument("--d", "--dims", dest="dims", type=_int_list, help="Comma-separated even dims in [4, 20]")
    run.add_argument("--samples-per-dim", dest="samples_per_dim", type=int)
    run.add_argument("--csv", dest="csv_path")
    run.add_argument("--dataset-name", dest="dataset_name")
    run.add_argument("--drop-columns", dest="drop_columns", type=_str_list)
    run.add_argument("--epochs", type=int)
    run.add_argument("--batch-size", dest="batch_size", type=int)
    run.add_argument("--lr", dest="learning_rate", type=float)
    run.add_argument("--beta", type=float)
    run.add_argument("--hidden-dims", dest="hidden_dims", type=_int_list)
    run.add_argument("--activation", choices=["tanh", "softplus"])
    run.add_argument("--workers", type=int, help="Threads per batch; relinquishes bitwise determinism")
    run.add_argument("--jobs", type=int, help="Trial units run in parallel")
    run.add_argument("--backend", choices=["local", "rq"])
    run.add_argument("--wall-time", dest="record_wall_time", action="store_const", const=True, default=None)
    run.add_argument("--no-wall-time", dest="record_wall_time", action="store_const", const=False, default=None)
    run.set_defaults(handler=_cmd_run)

    ev = sub.add_parser("eval-tac", help="TAC of given targets, predictions and covariances")
    ev.add_argument("--y", required=True)
    ev.add_argument("--y-hat", dest="y_hat", required=True)
    ev.add_argument("--cov", required=True, help="n x n CSV blocks per sample, separated by blank lines")
    ev.set_defaults(handler=_cmd_eval_tac)

    gen = sub.add_parser("gen-data", help="Materialize a dataset as inputs.csv, targets.csv, meta.json")
    gen.add_argument("--experiment", required=True, choices=[k.value for k in ExperimentKind])
    gen.add_argument("--variant", default=UnivariateVariant.CONST_5.value, choices=[v.value for v in UnivariateVariant])
    gen.add_argument("--count", type=int, default=None)
    gen.add_argument("--d", type=int, default=None)
    gen.add_argument("--csv", dest="csv_path")
    gen.add_argument("--dataset-name", dest="dataset_name")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--no-noise", action="store_true", help="Drop η (univariate) or Z (multivariate)")
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=_cmd_gen_data)

    fetch = sub.add_parser("fetch-uci", help="Download UCI files as canonical CSVs")
    fetch.add_argument("--names", type=_str_list, default=None)
    fetch.add_argument("--dest", default=None)
    fetch.set_defaults(handler=_cmd_fetch_uci)

    st = sub.add_parser("selftest", help="Run the oracle and invariant checks")
    st.set_defaults(handler=_cmd_selftest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = get_settings()
    configure_logging(settings.LOG_LEVEL)

    # Validate configuration and fail fast if critical errors found
    settings.validate_and_fail_fast()

    try:
        args = build_parser().parse_args(argv)
        handler: Callable[[argparse.Namespace], int] = args.handler
        return handler(args)
    except ValidationError as e:
        _report("validation_error", e)
        return 1
    except ConfigError as e:
        _report("config_error", e)
        return 1
    except Exception as e:  # noqa: BLE001
        logger.exception("Command failed. error_type=%s", type(e).__name__)
        _report(_error_code(e), e)
        return 2
