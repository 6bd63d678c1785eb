"""The observed sample ``(Y, T, M, X)`` plus CSV round-tripping."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .basis import TreatmentKind


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    y: np.ndarray
    t: np.ndarray
    m: np.ndarray
    x: np.ndarray
    kind: TreatmentKind = TreatmentKind.CONTINUOUS
    levels: tuple[float, ...] | None = None
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        t = np.asarray(self.t, dtype=float).ravel()
        m = np.asarray(self.m, dtype=float)
        x = np.asarray(self.x, dtype=float)
        m = m.reshape(-1, 1) if m.ndim == 1 else m
        x = x.reshape(-1, 1) if x.ndim == 1 else x
        n = y.size
        if not (t.size == m.shape[0] == x.shape[0] == n):
            raise DataError("columns of the dataset differ in length")
        kind = TreatmentKind(self.kind)
        levels = self.levels
        if kind is TreatmentKind.DISCRETE and levels is None:
            levels = tuple(float(v) for v in np.unique(t))
        for name, val in (("y", y), ("t", t), ("m", m), ("x", x), ("kind", kind), ("levels", levels)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def r(self) -> int:
        return self.x.shape[1]

    @property
    def s(self) -> int:
        return self.m.shape[1]

    @property
    def mx(self) -> np.ndarray:
        return np.column_stack([self.m, self.x])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.t[idx], self.m[idx], self.x[idx], self.kind, self.levels, self.names)

    def with_outcome(self, y) -> "Dataset":
        return Dataset(y, self.t, self.m, self.x, self.kind, self.levels, self.names)


def ingest_csv(
    path,
    y: str = "y",
    t: str = "t",
    m: Sequence[str] = ("m",),
    x: Sequence[str] = ("x",),
    kind: TreatmentKind | str = TreatmentKind.CONTINUOUS,
) -> Dataset:
    """Read a headed CSV into a :class:`Dataset`.

    Rows are numbered from 1 for the first data row (the header is row 0).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        wanted = [y, t, *m, *x]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        pos = [header.index(c) for c in wanted]
        rows = []
        for rowno, row in enumerate(reader, start=1):
            if not any(cell.strip() for cell in row):
                continue
            vals = []
            for c, p in zip(wanted, pos):
                cell = row[p].strip() if p < len(row) else ""
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {rowno}, column {c!r}: non-numeric value {cell!r}") from None
                if math.isnan(v) or math.isinf(v):
                    raise DataError(f"{path}: row {rowno}, column {c!r}: missing or infinite value {cell!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(rows)
    ns = len(m)
    return Dataset(
        y=arr[:, 0],
        t=arr[:, 1],
        m=arr[:, 2 : 2 + ns],
        x=arr[:, 2 + ns :],
        kind=kind,
        names={"y": y, "t": t, "m": list(m), "x": list(x)},
    )


def write_csv(data: Dataset, path) -> None:
    m_names = data.names.get("m") or [f"m{j + 1}" if data.s > 1 else "m" for j in range(data.s)]
    x_names = data.names.get("x") or [f"x{j + 1}" if data.r > 1 else "x" for j in range(data.r)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([data.names.get("y", "y"), data.names.get("t", "t"), *m_names, *x_names])
        for i in range(data.n):
            w.writerow([repr(float(v)) for v in (data.y[i], data.t[i], *data.m[i], *data.x[i])])
