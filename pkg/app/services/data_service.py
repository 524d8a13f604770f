"""
Datasets: heteroscedastic sinusoids, the multivariate Q|X construction, and UCI
CSV preparation (z-scoring plus a random 25/75 input/target column split).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd

from app.schemas.experiment import UnivariateVariant
from app.services.linalg_service import cholesky, solve

logger = logging.getLogger(__name__)

UNIVARIATE_X_RANGE = (-5.0, 5.0)
JOINT_COV_RIDGE = 0.1
MIN_UCI_COLUMNS = 4
CONSTANT_STD_RTOL = 1e-12


class DataError(Exception):
    pass


class MalformedCsv(DataError):
    pass


class TooFewColumns(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    name: str
    seed: int
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        x = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        y = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if x.shape[0] != y.shape[0]:
            raise DataError(f"inputs have {x.shape[0]} rows but targets have {y.shape[0]}")
        if x.shape[1] < 1 or y.shape[1] < 1 or x.shape[0] < 1:
            raise DataError("datasets need at least one row, one input and one target column")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError("datasets must be finite")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def n_samples(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def target_dim(self) -> int:
        return int(self.targets.shape[1])


@dataclass(frozen=True)
class MultivariateSpec:
    dim: int
    joint_mean: np.ndarray
    joint_cov: np.ndarray
    samples: int


@dataclass(frozen=True)
class UciSchema:
    path: str
    drop_columns: tuple[str, ...] = ()
    name: str = ""


@dataclass(frozen=True)
class UciTable:
    name: str
    columns: tuple[str, ...]
    values: np.ndarray
    means: np.ndarray
    stds: np.ndarray


# ---------------------------------------------------------------- univariate


def amplitude(variant: UnivariateVariant, x: np.ndarray) -> np.ndarray:
    if variant == UnivariateVariant.CONST_5:
        return np.full_like(x, 5.0)
    if variant == UnivariateVariant.ABS_X:
        return np.abs(x)
    return 5.0 - np.abs(x)


def noiseless_sinusoid(variant: UnivariateVariant, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return amplitude(variant, x) * np.sin(2.0 * np.pi * x)


def univariate_noise_std(x: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(x, dtype=np.float64))


def gen_univariate(variant: UnivariateVariant, count: int, seed: int, noise: bool = True) -> Dataset:
    """x ~ U(-5, 5), y = A(x)·sin(2πx) + |x|·η with η ~ N(0, 1)."""
    if count < 1:
        raise DataError("count must be >= 1")
    variant = UnivariateVariant(variant)
    rng = np.random.default_rng(seed)
    x = rng.uniform(*UNIVARIATE_X_RANGE, size=count)
    eta = rng.normal(size=count) if noise else np.zeros(count)
    y = noiseless_sinusoid(variant, x) + univariate_noise_std(x) * eta
    return Dataset(
        inputs=x[:, None],
        targets=y[:, None],
        name=f"univariate_{variant.value}",
        seed=seed,
        params={"variant": variant.value, "count": count, "noise": noise},
    )


# -------------------------------------------------------------- multivariate


def random_joint_distribution(d: int, rng: np.random.Generator, samples: Optional[int] = None) -> MultivariateSpec:
    a = rng.normal(size=(2 * d, 2 * d))
    joint_cov = a @ a.T + JOINT_COV_RIDGE * np.eye(2 * d)
    joint_mean = rng.uniform(-1.0, 1.0, size=2 * d)
    return MultivariateSpec(dim=d, joint_mean=joint_mean, joint_cov=joint_cov, samples=samples or 1000 * d)


def conditional_y_given_x(spec: MultivariateSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Y|X=x ~ N(μ_Y + Σ_YX Σ_XX⁻¹ (x − μ_X), Σ_YY − Σ_YX Σ_XX⁻¹ Σ_XY); x may be (B, d)."""
    d = spec.dim
    mu_x, mu_y = spec.joint_mean[:d], spec.joint_mean[d:]
    s_xx = spec.joint_cov[:d, :d]
    s_yx = spec.joint_cov[d:, :d]
    s_yy = spec.joint_cov[d:, d:]
    f_xx = cholesky(s_xx)
    gain = solve(f_xx, s_yx.T).T
    xb = np.atleast_2d(x)
    mean = mu_y + (xb - mu_x) @ gain.T
    cov = s_yy - gain @ s_yx.T
    return mean, 0.5 * (cov + cov.T)


def _sample_q(spec: MultivariateSpec, x: np.ndarray, rng: np.random.Generator, include_z: bool) -> np.ndarray:
    mean, cov = conditional_y_given_x(spec, x)
    low = cholesky(cov).lower
    y = mean + rng.normal(size=mean.shape) @ low.T
    if not include_z:
        return y
    # Z | x ~ N(0, diag(sqrt|x|)): per-coordinate std |x|^(1/4)
    z = rng.normal(size=mean.shape) * np.abs(x) ** 0.25
    return y + z


def sample_q_given_x(spec: MultivariateSpec, x: np.ndarray, count: int, seed: int, include_z: bool = True) -> np.ndarray:
    rng = np.random.default_rng(seed)
    xs = np.broadcast_to(np.asarray(x, dtype=np.float64), (count, spec.dim))
    return _sample_q(spec, xs, rng, include_z)


def gen_multivariate(
    d: int,
    seed: int,
    samples: Optional[int] = None,
    include_z: bool = True,
    spec: Optional[MultivariateSpec] = None,
) -> tuple[Dataset, MultivariateSpec]:
    if d % 2 != 0 or not 4 <= d <= 20:
        raise DataError(f"d must be even and within [4, 20], got {d}")
    rng = np.random.default_rng(seed)
    if spec is None:
        spec = random_joint_distribution(d, rng, samples)
    count = samples or spec.samples

    d_x = spec.dim
    low_x = cholesky(spec.joint_cov[:d_x, :d_x]).lower
    x = spec.joint_mean[:d_x] + rng.normal(size=(count, d_x)) @ low_x.T
    q = _sample_q(spec, x, rng, include_z)
    dataset = Dataset(
        inputs=x,
        targets=q,
        name=f"multivariate_d{d}",
        seed=seed,
        params={"d": d, "samples": count, "include_z": include_z},
    )
    return dataset, spec


# ----------------------------------------------------------------------- UCI


def load_uci(schema: UciSchema) -> UciTable:
    path = Path(schema.path)
    try:
        frame = pd.read_csv(path, sep=",", header=0, encoding="utf-8", decimal=".")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise MalformedCsv(f"Cannot read {path}: {e}") from e
    if frame.shape[1] == 0:
        raise MalformedCsv(f"{path} has no columns")

    frame = frame.drop(columns=[c for c in schema.drop_columns if c in frame.columns])
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    non_numeric = [c for c in frame.columns if numeric[c].isna().all() and frame[c].notna().any()]
    if non_numeric:
        logger.info("Dropping non-numeric columns. path=%s columns=%s", path, ",".join(map(str, non_numeric)))
        numeric = numeric.drop(columns=non_numeric)

    before = len(numeric)
    numeric = numeric.dropna(axis=0, how="any")
    if len(numeric) < before:
        logger.info("Dropped rows with missing values. path=%s dropped=%d", path, before - len(numeric))

    stds = numeric.std(axis=0, ddof=0)
    means_abs = numeric.mean(axis=0).abs()
    # Non-representable constants (0.3, 1/3) leave a rounding-level std behind.
    constant = [
        c
        for c in numeric.columns
        if numeric[c].nunique() <= 1 or not stds[c] > CONSTANT_STD_RTOL * max(1.0, float(means_abs[c]))
    ]
    for c in constant:
        logger.warning("Dropping constant column. path=%s column=%s", path, c)
    numeric = numeric.drop(columns=constant)

    if numeric.shape[1] < MIN_UCI_COLUMNS:
        raise TooFewColumns(f"{path} keeps {numeric.shape[1]} continuous columns, need >= {MIN_UCI_COLUMNS}")
    if numeric.shape[0] < 1:
        raise MalformedCsv(f"{path} has no complete rows")

    values = numeric.to_numpy(dtype=np.float64)
    means = values.mean(axis=0)
    centered = values - means
    sd = np.sqrt(np.mean(centered * centered, axis=0))
    return UciTable(
        name=schema.name or path.stem,
        columns=tuple(str(c) for c in numeric.columns),
        values=centered / sd,
        means=means,
        stds=sd,
    )


def input_column_count(n_columns: int) -> int:
    return max(1, math.ceil(0.25 * n_columns))


def random_feature_split(table: UciTable, seed: int) -> Dataset:
    """A fresh random 25%/75% input/target column split per seed."""
    n_cols = table.values.shape[1]
    if n_cols < MIN_UCI_COLUMNS:
        raise TooFewColumns(f"need >= {MIN_UCI_COLUMNS} columns, got {n_cols}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_cols)
    k = input_column_count(n_cols)
    in_cols, out_cols = order[:k], order[k:]
    return Dataset(
        inputs=table.values[:, in_cols],
        targets=table.values[:, out_cols],
        name=table.name,
        seed=seed,
        params={
            "input_columns": [table.columns[i] for i in in_cols],
            "target_columns": [table.columns[i] for i in out_cols],
        },
    )


# --------------------------------------------------------------------- cache


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    in_cols = [f"x{i}" for i in range(dataset.input_dim)]
    out_cols = [f"y{i}" for i in range(dataset.target_dim)]
    pd.DataFrame(dataset.inputs, columns=in_cols).to_csv(out / "inputs.csv", index=False, float_format="%.17g")
    pd.DataFrame(dataset.targets, columns=out_cols).to_csv(out / "targets.csv", index=False, float_format="%.17g")
    meta = {"name": dataset.name, "seed": dataset.seed, "params": dataset.params}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_dataset(directory: str | Path) -> Dataset:
    src = Path(directory)
    meta = json.loads((src / "meta.json").read_text(encoding="utf-8"))
    inputs = pd.read_csv(src / "inputs.csv").to_numpy(dtype=np.float64)
    targets = pd.read_csv(src / "targets.csv").to_numpy(dtype=np.float64)
    return Dataset(inputs=inputs, targets=targets, name=meta["name"], seed=int(meta["seed"]), params=meta.get("params", {}))


def select_columns(table: UciTable, names: Sequence[str]) -> UciTable:
    idx = [table.columns.index(n) for n in names]
    return UciTable(
        name=table.name,
        columns=tuple(names),
        values=table.values[:, idx],
        means=table.means[idx],
        stds=table.stds[idx],
    )
