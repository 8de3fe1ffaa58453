"""Delimited-text tables with deterministic float formatting."""

from __future__ import annotations

import os

import numpy as np


def format_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))  # shortest round-trip representation
    return str(value)


def write_table(path: str | os.PathLike, header: list[str], rows) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(format_cell(cell) for cell in row))
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, os.fspath(path))


def read_table(path: str | os.PathLike) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    header = lines[0].split("\t")
    return header, [line.split("\t") for line in lines[1:]]


def matrix_table(path: str | os.PathLike, matrix: np.ndarray,
                 row_ids: list[str], col_ids: list[str], corner: str = "id") -> None:
    header = [corner] + list(col_ids)
    rows = [[rid] + list(row) for rid, row in zip(row_ids, np.asarray(matrix))]
    write_table(path, header, rows)
