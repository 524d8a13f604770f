from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import pandas as pd

from app.schemas.experiment import ExperimentConfig, ExperimentKind
from app.schemas.results import RESULT_COLUMNS, TrialOutcome
from app.services.metrics_service import UCI_REFERENCE_TAC
from app.services.trial_service import aggregate

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"


@dataclass(frozen=True)
class ResultPaths:
    results_csv: Path
    results_json: Path
    tac_vs_dim_csv: Optional[Path] = None
    calibration_csv: Optional[Path] = None


def _reference_tac(config: ExperimentConfig) -> Optional[dict[str, float]]:
    if config.experiment != ExperimentKind.UCI:
        return None
    key = (config.dataset_name or Path(config.csv_path).stem).lower()
    return UCI_REFERENCE_TAC.get(key)


def write_results(out_dir: str | Path, config: ExperimentConfig, outcomes: list[TrialOutcome]) -> ResultPaths:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    results = [r for o in outcomes for r in o.results]
    failures = [f for o in outcomes for f in o.failures]
    calibrations = [c for o in outcomes for c in o.calibrations]
    aggregates = aggregate(results)

    frame = pd.DataFrame([r.model_dump() for r in results], columns=RESULT_COLUMNS)
    results_csv = out / "results.csv"
    frame.to_csv(results_csv, index=False, float_format=FLOAT_FORMAT, encoding="utf-8")

    tac_csv = None
    if config.experiment == ExperimentKind.MULTIVARIATE:
        series = pd.DataFrame(
            [{"dim": a.dim, "method": a.method, "tac": a.tac} for a in aggregates],
            columns=["dim", "method", "tac"],
        )
        series = series.sort_values(["dim"], kind="stable")
        tac_csv = out / "tac_vs_dim.csv"
        series.to_csv(tac_csv, index=False, float_format=FLOAT_FORMAT, encoding="utf-8")

    calibration_csv = None
    if calibrations:
        cal = pd.DataFrame([c.model_dump() for c in calibrations])
        calibration_csv = out / "calibration.csv"
        cal.to_csv(calibration_csv, index=False, float_format=FLOAT_FORMAT, encoding="utf-8")

    summary = {
        "config": config.model_dump(mode="json"),
        "aggregates": [a.model_dump() for a in aggregates],
        "trials": [r.model_dump() for r in results],
        "failures": [f.model_dump() for f in failures],
        "calibration": [c.model_dump() for c in calibrations],
        "reference_tac": _reference_tac(config),
        "deterministic": all(o.deterministic for o in outcomes),
    }
    results_json = out / "results.json"
    results_json.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")

    logger.info(
        "Wrote results. out_dir=%s rows=%d failures=%d aggregates=%d",
        out,
        len(results),
        len(failures),
        len(aggregates),
    )
    return ResultPaths(
        results_csv=results_csv,
        results_json=results_json,
        tac_vs_dim_csv=tac_csv,
        calibration_csv=calibration_csv,
    )
