"""Shared CSV helpers: provenance comment lines and header checks."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import pandas as pd

PROVENANCE_PREFIX = "# provenance: "


def provenance_line(provenance: dict[str, Any] | None) -> str:
    if provenance is None:
        return ""
    return PROVENANCE_PREFIX + json.dumps(provenance, sort_keys=True, default=str) + "\n"


def write_frame(path: str | Path, frame: pd.DataFrame, provenance: dict | None = None,
                float_format: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(provenance_line(provenance))
        frame.to_csv(fh, index=False, float_format=float_format, lineterminator="\n")
    return path


def leading_comment_lines(path: str | Path) -> int:
    """Number of ``#`` lines before the header."""
    n = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                n += 1
            else:
                break
    return n


def read_provenance(path: str | Path) -> dict | None:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith(PROVENANCE_PREFIX):
                return json.loads(line[len(PROVENANCE_PREFIX):])
            if not line.startswith("#"):
                break
    return None


def read_frame(path: str | Path, columns: list[str], dtypes: dict | None = None) -> pd.DataFrame:
    """Read a CSV written by :func:`write_frame`, checking the header exactly."""
    skip = leading_comment_lines(path)
    with open(path, "r", encoding="utf-8") as fh:
        for _ in range(skip):
            fh.readline()
        header = fh.readline().strip()
    if header == "":
        return pd.DataFrame({c: pd.Series(dtype=(dtypes or {}).get(c, "float64")) for c in columns})
    if header.split(",") != columns:
        raise ValueError(f"{path}: expected header {','.join(columns)!r}, got {header!r}")
    return pd.read_csv(path, skiprows=skip, dtype=dtypes, float_precision="round_trip")
