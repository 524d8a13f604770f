"""
Covariance interchange file: one n×n block of comma-separated rows per sample,
blocks separated by a blank line.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class MatrixFileError(ValueError):
    pass


def read_cov_file(path: str | Path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8")
    blocks: list[list[list[float]]] = []
    current: list[list[float]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            if current:
                blocks.append(current)
                current = []
            continue
        try:
            current.append([float(v) for v in line.split(",")])
        except ValueError as e:
            raise MatrixFileError(f"{path}:{lineno}: not a row of numbers") from e
    if current:
        blocks.append(current)
    if not blocks:
        raise MatrixFileError(f"{path} holds no matrices")

    n = len(blocks[0])
    for i, block in enumerate(blocks):
        if len(block) != n or any(len(row) != n for row in block):
            raise MatrixFileError(f"{path}: block {i} is not {n}x{n}")
    return np.asarray(blocks, dtype=np.float64)


def write_cov_file(path: str | Path, covs: np.ndarray) -> Path:
    stack = np.asarray(covs, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    chunks = []
    for cov in stack:
        chunks.append("\n".join(",".join(repr(float(v)) for v in row) for row in cov))
    out.write_text("\n\n".join(chunks) + "\n", encoding="utf-8")
    return out
