"""Small deterministic CSV helpers shared by the analysis modules."""

from __future__ import annotations

import csv
import math
from typing import Iterable, Mapping


def fmt(value) -> str:
    """Stable text form: 17 significant digits for floats."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.17g}"
    try:
        return f"{float(value):.17g}"
    except (TypeError, ValueError):
        return str(value)


def write_table(path, header: list[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def write_key_values(path, items: Mapping) -> None:
    write_table(path, ["key", "value"], items.items())


def read_key_values(path) -> dict[str, str]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["key", "value"]:
            raise ValueError(f"unexpected header {header}")
        return {k: v for k, v in reader}
