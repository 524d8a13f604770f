from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import httpx
import pandas as pd

from app.settings import get_settings

logger = logging.getLogger(__name__)

_UCI_BASE = "https://archive.ics.uci.edu/ml/machine-learning-databases"


class UciFetchError(Exception):
    """Download or parsing of a UCI file failed."""


@dataclass(frozen=True)
class UciSource:
    name: str
    url: str
    sep: str = ","
    header: bool = True
    columns: Optional[tuple[str, ...]] = None


_DEFAULT_SOURCES: dict[str, UciSource] = {
    "red_wine": UciSource("red_wine", f"{_UCI_BASE}/wine-quality/winequality-red.csv", sep=";"),
    "white_wine": UciSource("white_wine", f"{_UCI_BASE}/wine-quality/winequality-white.csv", sep=";"),
    "abalone": UciSource(
        "abalone",
        f"{_UCI_BASE}/abalone/abalone.data",
        header=False,
        columns=(
            "sex",
            "length",
            "diameter",
            "height",
            "whole_weight",
            "shucked_weight",
            "viscera_weight",
            "shell_weight",
            "rings",
        ),
    ),
    "parkinson": UciSource("parkinson", f"{_UCI_BASE}/parkinsons/telemonitoring/parkinsons_updrs.data"),
    "appliances": UciSource("appliances", f"{_UCI_BASE}/00374/energydata_complete.csv"),
    "electrical": UciSource("electrical", f"{_UCI_BASE}/00471/Data_for_UCI_named.csv"),
}


def uci_sources() -> dict[str, UciSource]:
    """Built-in registry merged with the UCI_SOURCES_JSON override."""
    sources = dict(_DEFAULT_SOURCES)
    raw = get_settings().UCI_SOURCES_JSON.strip()
    if not raw:
        return sources
    try:
        override = json.loads(raw)
    except json.JSONDecodeError as e:
        raise UciFetchError(f"UCI_SOURCES_JSON is not valid JSON: {e}") from e
    if not isinstance(override, dict):
        raise UciFetchError("UCI_SOURCES_JSON must be a JSON object keyed by dataset name")
    for name, entry in override.items():
        if not isinstance(entry, dict) or "url" not in entry:
            raise UciFetchError(f"UCI_SOURCES_JSON entry {name!r} needs at least a url")
        cols = entry.get("columns")
        sources[name] = UciSource(
            name=name,
            url=str(entry["url"]),
            sep=str(entry.get("sep", ",")),
            header=bool(entry.get("header", True)),
            columns=tuple(cols) if cols else None,
        )
    return sources


def _to_frame(source: UciSource, text: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(
            io.StringIO(text),
            sep=source.sep,
            header=0 if source.header else None,
            names=list(source.columns) if source.columns else None,
        )
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise UciFetchError(f"Cannot parse {source.name} from {source.url}: {e}") from e
    if frame.empty:
        raise UciFetchError(f"{source.name} from {source.url} has no rows")
    frame.columns = [str(c).strip().strip('"') for c in frame.columns]
    return frame


def fetch_uci(
    names: Optional[Iterable[str]] = None,
    dest: Optional[str | Path] = None,
    client: Optional[httpx.Client] = None,
) -> list[Path]:
    """
    Download UCI files and rewrite each as `<dest>/<name>.csv`: comma separated,
    UTF-8, one header row.
    """
    settings = get_settings()
    sources = uci_sources()
    wanted = list(names) if names else sorted(sources)
    unknown = [n for n in wanted if n not in sources]
    if unknown:
        raise UciFetchError(f"Unknown UCI dataset(s): {', '.join(unknown)} (known: {', '.join(sorted(sources))})")

    out_dir = Path(dest or settings.DATA_DIR)
    out_dir.mkdir(parents=True, exist_ok=True)

    own_client = client is None
    http = client or httpx.Client(timeout=settings.HTTP_TIMEOUT_SECONDS, follow_redirects=True)
    written: list[Path] = []
    try:
        for name in wanted:
            source = sources[name]
            logger.info("Fetching UCI dataset. name=%s url=%s", name, source.url)
            try:
                resp = http.get(source.url)
                resp.raise_for_status()
            except httpx.HTTPError as e:
                raise UciFetchError(f"Download of {name} failed: {e}") from e

            frame = _to_frame(source, resp.text)
            path = out_dir / f"{name}.csv"
            frame.to_csv(path, index=False, encoding="utf-8")
            logger.info("Wrote UCI dataset. name=%s rows=%d columns=%d path=%s", name, len(frame), frame.shape[1], path)
            written.append(path)
    finally:
        if own_client:
            http.close()
    return written
