"""Dataset ingestion: schema-validated CSV loading and canonical re-emission.

A dataset is a comma-separated text file with a header row, UTF-8, '.'
decimal. Validation is row-addressed: messages cite the file line (header
is line 1) so a bad cell can be found with a text editor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .exceptions import DataError
from .structures import GroupIndex

__all__ = ["DataSchema", "Dataset", "load_dataset", "emit_dataset"]


@dataclass(frozen=True)
class DataSchema:
    """Which columns play which role.

    ``group`` partitions rows into independent units; ``time`` (optional)
    is the longitudinal position within a group; ``offset`` (optional) is a
    strictly positive exposure, entering the linear predictor as log(offset);
    ``responses`` are nonnegative integer counts; ``categorical`` columns are
    coded by first-appearance levels and ``numeric`` columns are used as-is.
    """

    group: str
    responses: tuple
    time: str = None
    offset: str = None
    categorical: tuple = ()
    numeric: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "responses", tuple(self.responses))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        object.__setattr__(self, "numeric", tuple(self.numeric))
        if not self.responses:
            raise DataError("schema needs at least one response column")
        overlap = set(self.categorical) & set(self.numeric)
        if overlap:
            raise DataError(f"columns {sorted(overlap)} are both categorical and numeric")

    def used_columns(self):
        cols = [self.group]
        if self.time:
            cols.append(self.time)
        if self.offset:
            cols.append(self.offset)
        cols.extend(self.responses)
        cols.extend(c for c in self.categorical if c not in cols)
        cols.extend(c for c in self.numeric if c not in cols)
        return cols


@dataclass
class Dataset:
    """Validated data frame plus frozen categorical level order."""

    frame: pd.DataFrame
    schema: DataSchema
    levels: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.frame.shape[0]

    @property
    def n_groups(self) -> int:
        return self.frame[self.schema.group].nunique()

    def group_index(self) -> GroupIndex:
        s = self.schema
        time = self.frame[s.time].to_numpy() if s.time else None
        return GroupIndex.from_labels(self.frame[s.group].to_numpy(), time=time)

    def log_offset(self) -> np.ndarray:
        if self.schema.offset is None:
            return np.zeros(self.n)
        return np.log(self.frame[self.schema.offset].to_numpy(dtype=float))


def _line(i: int) -> str:
    # data row i (0-based) sits on file line i + 2: line 1 is the header
    return f"line {i + 2}"


def _fail_rows(mask: np.ndarray, what: str, col: str):
    bad = np.flatnonzero(mask)
    if bad.size:
        spots = ", ".join(_line(int(i)) for i in bad[:5])
        more = "" if bad.size <= 5 else f" (and {bad.size - 5} more)"
        raise DataError(f"column {col!r}: {what} at {spots}{more}")


def _numeric(series: pd.Series, col: str) -> np.ndarray:
    values = pd.to_numeric(series, errors="coerce")
    _fail_rows(values.isna().to_numpy() & series.notna().to_numpy(),
               "value is not numeric", col)
    return values.to_numpy(dtype=float)


def load_dataset(path, schema: DataSchema) -> Dataset:
    """Load and validate a CSV dataset against ``schema``.

    Missing cells in any used column, non-positive offsets and non-integer
    or negative counts are load errors addressed by file line. Categorical
    levels are discovered and frozen in first-appearance order.
    """
    try:
        raw = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: no rows") from None
    if raw.shape[0] == 0:
        raise DataError(f"{path}: no rows")

    missing = [c for c in schema.used_columns() if c not in raw.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}; "
                        f"file has {list(raw.columns)}")

    used = schema.used_columns()
    frame = pd.DataFrame(index=raw.index)
    for col in used:
        series = raw[col].str.strip() if raw[col].dtype == object else raw[col]
        empty = series.isna().to_numpy()
        if series.dtype == object:
            empty |= (series == "").to_numpy()
        _fail_rows(empty, "missing value", col)

        if col in schema.responses:
            values = _numeric(series, col)
            _fail_rows(values != np.floor(values), "count is not an integer", col)
            _fail_rows(values < 0, "count is negative", col)
            frame[col] = values.astype(int)
        elif col == schema.offset:
            values = _numeric(series, col)
            _fail_rows(values <= 0, "offset is not strictly positive", col)
            frame[col] = values
        elif col == schema.time or col in schema.numeric:
            frame[col] = _numeric(series, col)
        else:
            frame[col] = series.astype(str)

    levels = {}
    for col in schema.categorical:
        seen = frame[col].to_numpy()
        _, first = np.unique(seen, return_index=True)
        levels[col] = tuple(seen[i] for i in np.sort(first))
    grp = frame[schema.group].to_numpy()
    _, first = np.unique(grp, return_index=True)
    levels.setdefault(schema.group, tuple(grp[i] for i in np.sort(first)))
    return Dataset(frame=frame, schema=schema, levels=levels)


def _canonical_text(value) -> str:
    if isinstance(value, (np.floating, float)):
        f = float(value)
        text = str(int(f)) if f.is_integer() else repr(f)
    elif isinstance(value, (np.integer, int)):
        text = str(int(value))
    else:
        text = str(value)
    if any(ch in text for ch in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


def emit_dataset(dataset: Dataset, path) -> None:
    """Write the dataset back as CSV in canonical form.

    Formatting is a fixed point: loading the emitted file and emitting
    again produces byte-identical output (integers without a decimal
    point, floats via shortest round-trip repr, LF line endings).
    """
    frame = dataset.frame
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(_canonical_text(c) for c in frame.columns) + "\n")
        for row in frame.itertuples(index=False):
            fh.write(",".join(_canonical_text(v) for v in row) + "\n")
