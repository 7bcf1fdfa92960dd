"""Fused two-source datasets.

Source A (``R = 1``) observes ``(V, Y)``; source B (``R = 0``) observes
``(V, L)``. Absent values are never stored: ``y`` holds the source-A outcomes
only and ``l`` the source-B covariates only.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    EmptySource,
    InputError,
    LayoutMismatch,
    MalformedCell,
    MissingColumn,
    PatternViolation,
)

DEFAULT_DELTA = 0.01


@dataclass(frozen=True)
class ColumnSchema:
    v_names: tuple[str, ...]
    l_names: tuple[str, ...]
    y_name: str
    r_name: str = "R"
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "v_names", tuple(self.v_names))
        object.__setattr__(self, "l_names", tuple(self.l_names))
        names = [*self.v_names, *self.l_names, self.y_name, self.r_name]
        if len(set(names)) != len(names):
            raise InputError(f"column names must be disjoint, got {names}")
        if not self.l_names:
            raise InputError("schema needs at least one L column")
        if "1" in names:
            raise InputError("'1' is reserved for the intercept term")

    @property
    def q(self) -> int:
        return len(self.v_names) + int(self.intercept)

    @property
    def p(self) -> int:
        return len(self.l_names)

    @property
    def all_names(self) -> tuple[str, ...]:
        return (self.r_name, self.y_name, *self.l_names, *self.v_names)

    def v_terms(self) -> list[str]:
        """Main-effect terms for V, with the intercept when enabled."""
        return (["1"] if self.intercept else []) + list(self.v_names)

    def to_dict(self) -> dict:
        return {
            "v_names": list(self.v_names),
            "l_names": list(self.l_names),
            "y_name": self.y_name,
            "r_name": self.r_name,
            "intercept": self.intercept,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSchema":
        try:
            return cls(
                v_names=tuple(d["v_names"]),
                l_names=tuple(d["l_names"]),
                y_name=d["y_name"],
                r_name=d.get("r_name", "R"),
                intercept=bool(d.get("intercept", True)),
            )
        except KeyError as exc:
            raise InputError(f"schema is missing field {exc.args[0]!r}") from None


class Record(NamedTuple):
    r: int
    y: float | None
    l: tuple[float, ...] | None
    v: dict[str, float]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


class FusedDataset:
    """Immutable fused dataset.

    Parameters
    ----------
    schema : ColumnSchema
    r : array of {0, 1}, shape (n,)
    v : array, shape (n, len(schema.v_names))
    y : array, shape (n_A,)
        Outcomes of the ``R = 1`` rows, in row order.
    l : array, shape (n_B, p)
        Covariates of the ``R = 0`` rows, in row order.
    """

    def __init__(self, schema: ColumnSchema, r, v, y, l):
        r = np.asarray(r)
        if r.ndim != 1 or r.size == 0:
            raise InputError("R must be a non-empty vector")
        if not np.all((r == 0) | (r == 1)):
            raise PatternViolation("R must be 0 or 1 in every row")
        n = r.size
        v = np.asarray(v, dtype=float).reshape(n, len(schema.v_names))
        y = np.asarray(y, dtype=float).reshape(-1)
        l = np.asarray(l, dtype=float).reshape(-1, schema.p)
        mask = r.astype(bool)
        n_a = int(mask.sum())
        if y.size != n_a or l.shape[0] != n - n_a:
            raise PatternViolation(
                f"expected {n_a} outcomes and {n - n_a} covariate rows, got {y.size} and {l.shape[0]}"
            )
        if n_a == 0 or n_a == n:
            raise EmptySource(f"both sources must be non-empty (n_A={n_a}, n_B={n - n_a})")
        for name, arr in (("V", v), ("Y", y), ("L", l)):
            if not np.all(np.isfinite(arr)):
                raise MalformedCell(f"non-finite value among present {name} fields")
        self.schema = schema
        self._mask = mask
        self._mask.setflags(write=False)
        self.r = _readonly(mask.astype(float))
        self.v = _readonly(v)
        self.y = _readonly(y)
        self.l = _readonly(l)

    @classmethod
    def from_full(cls, schema: ColumnSchema, r, v, y_full, l_full) -> "FusedDataset":
        """Build from full-length arrays, dropping the structurally absent parts."""
        mask = np.asarray(r).astype(bool)
        y_full = np.asarray(y_full, dtype=float).reshape(-1)
        l_full = np.asarray(l_full, dtype=float).reshape(mask.size, -1)
        return cls(schema, mask.astype(int), v, y_full[mask], l_full[~mask])

    # sizes
    @property
    def n(self) -> int:
        return self.r.size

    @property
    def n_a(self) -> int:
        return int(self._mask.sum())

    @property
    def n_b(self) -> int:
        return self.n - self.n_a

    @property
    def in_a(self) -> np.ndarray:
        return self._mask

    def columns(self) -> dict[str, np.ndarray]:
        """V columns by name (full length)."""
        return {name: self.v[:, j] for j, name in enumerate(self.schema.v_names)}

    def y_full(self, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.n, fill)
        out[self._mask] = self.y
        return out

    def l_full(self, fill: float = 0.0) -> np.ndarray:
        out = np.full((self.n, self.schema.p), fill)
        out[~self._mask] = self.l
        return out

    def row(self, i: int) -> Record:
        v = {name: float(self.v[i, j]) for j, name in enumerate(self.schema.v_names)}
        if self._mask[i]:
            k = int(self._mask[:i].sum())
            return Record(1, float(self.y[k]), None, v)
        k = int((~self._mask[:i]).sum())
        return Record(0, None, tuple(float(x) for x in self.l[k]), v)

    def rows(self) -> Iterator[Record]:
        ia = ib = 0
        for i in range(self.n):
            v = {name: float(self.v[i, j]) for j, name in enumerate(self.schema.v_names)}
            if self._mask[i]:
                yield Record(1, float(self.y[ia]), None, v)
                ia += 1
            else:
                yield Record(0, None, tuple(float(x) for x in self.l[ib]), v)
                ib += 1

    @classmethod
    def from_records(cls, schema: ColumnSchema, records: Sequence[Record]) -> "FusedDataset":
        r = [rec.r for rec in records]
        v = [[rec.v[name] for name in schema.v_names] for rec in records]
        y, l = [], []
        for rec in records:
            if rec.r == 1:
                if rec.l is not None or rec.y is None:
                    raise PatternViolation("R=1 record must carry Y and no L")
                y.append(rec.y)
            else:
                if rec.y is not None or rec.l is None:
                    raise PatternViolation("R=0 record must carry L and no Y")
                l.append(rec.l)
        return cls(schema, r, np.reshape(v, (len(records), -1)), y, np.reshape(l, (-1, schema.p)))

    def take(self, idx) -> "FusedDataset":
        """Rows at ``idx`` (repeats allowed), in that order."""
        idx = np.asarray(idx, dtype=int)
        return FusedDataset.from_full(
            self.schema, self._mask[idx].astype(int), self.v[idx], self.y_full()[idx], self.l_full()[idx]
        )

    def __eq__(self, other):
        if not isinstance(other, FusedDataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.v, other.v)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.l, other.l)
        )

    __hash__ = None

    def __repr__(self):
        return f"FusedDataset(n={self.n}, n_A={self.n_a}, n_B={self.n_b}, p={self.schema.p})"


@dataclass(frozen=True)
class ReplicateSet:
    replicates: tuple[FusedDataset, ...]

    def __post_init__(self):
        reps = tuple(self.replicates)
        object.__setattr__(self, "replicates", reps)
        if not reps:
            raise InputError("a replicate set needs at least one dataset")
        first = reps[0]
        for ds in reps[1:]:
            if ds.schema != first.schema or ds.n != first.n:
                raise LayoutMismatch("replicates must share schema and row count")

    @property
    def m(self) -> int:
        return len(self.replicates)

    @property
    def schema(self) -> ColumnSchema:
        return self.replicates[0].schema

    def __iter__(self):
        return iter(self.replicates)

    def __len__(self):
        return len(self.replicates)


# -- CSV ---------------------------------------------------------------------

def _cell(text: str, col: str, line: int) -> float | None:
    text = text.strip()
    if text == "":
        return None
    try:
        x = float(text)
    except ValueError:
        raise MalformedCell(f"line {line}, column {col!r}: not a number: {text!r}") from None
    if not math.isfinite(x):
        raise MalformedCell(f"line {line}, column {col!r}: non-finite value {text!r}")
    return x


def load_fused_csv(path, schema: ColumnSchema) -> FusedDataset:
    """Read a fused CSV file; empty cells mark structurally absent values."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        pos = {}
        for name in schema.all_names:
            if name not in header:
                raise MissingColumn(f"{path}: column {name!r} not found in header")
            pos[name] = header.index(name)
        r, v, y, l = [], [], [], []
        for lineno, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) < len(header):
                cells = cells + [""] * (len(header) - len(cells))
            rv = _cell(cells[pos[schema.r_name]], schema.r_name, lineno)
            if rv not in (0.0, 1.0):
                raise PatternViolation(f"line {lineno}: R must be 0 or 1, got {cells[pos[schema.r_name]]!r}")
            vv = []
            for name in schema.v_names:
                x = _cell(cells[pos[name]], name, lineno)
                if x is None:
                    raise PatternViolation(f"line {lineno}: V column {name!r} is empty")
                vv.append(x)
            yv = _cell(cells[pos[schema.y_name]], schema.y_name, lineno)
            lv = [_cell(cells[pos[name]], name, lineno) for name in schema.l_names]
            if rv == 1.0:
                if yv is None:
                    raise PatternViolation(f"line {lineno}: R=1 row without {schema.y_name!r}")
                if any(x is not None for x in lv):
                    raise PatternViolation(f"line {lineno}: R=1 row carries an L value")
                y.append(yv)
            else:
                if yv is not None:
                    raise PatternViolation(f"line {lineno}: R=0 row carries {schema.y_name!r}")
                if any(x is None for x in lv):
                    raise PatternViolation(f"line {lineno}: R=0 row with an empty L value")
                l.append(lv)
            r.append(int(rv))
            v.append(vv)
    if not r:
        raise EmptySource(f"{path}: no data rows")
    return FusedDataset(schema, r, np.reshape(v, (len(r), len(schema.v_names))), y, np.reshape(l, (-1, schema.p)))


def write_fused_csv(ds: FusedDataset, path) -> None:
    """Write ``ds`` so that :func:`load_fused_csv` reproduces it bit for bit."""
    s = ds.schema
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(s.all_names)
        for rec in ds.rows():
            y = "" if rec.y is None else repr(rec.y)
            l = [""] * s.p if rec.l is None else [repr(x) for x in rec.l]
            w.writerow([rec.r, y, *l, *(repr(rec.v[name]) for name in s.v_names)])


# -- validation ---------------------------------------------------------------

@dataclass
class ValidationReport:
    n: int
    n_a: int
    n_b: int
    delta: float
    summaries: dict[str, dict[str, float]]
    positivity_share: float | None = None
    warnings: list[str] = field(default_factory=list)


def _summary(x: np.ndarray) -> dict[str, float]:
    return {
        "count": int(x.size),
        "mean": float(np.mean(x)),
        "sd": float(np.std(x, ddof=1)) if x.size > 1 else 0.0,
        "min": float(np.min(x)),
        "max": float(np.max(x)),
    }


def validate(ds: FusedDataset, delta: float = DEFAULT_DELTA, propensity=None) -> ValidationReport:
    """Summaries plus a positivity diagnostic; warns, never raises on the diagnostic.

    When a fitted propensity model is supplied, the share of units whose
    fitted probability lies outside ``[delta, 1 - delta]`` is reported.
    """
    if not 0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 0.5)")
    s = ds.schema
    summaries = {name: _summary(ds.v[:, j]) for j, name in enumerate(s.v_names)}
    summaries[s.y_name] = _summary(ds.y)
    for j, name in enumerate(s.l_names):
        summaries[name] = _summary(ds.l[:, j])
    report = ValidationReport(ds.n, ds.n_a, ds.n_b, delta, summaries)
    if propensity is not None:
        from .nuisance import predict_pi

        pi = predict_pi(propensity, ds)
        share = float(np.mean((pi < delta) | (pi > 1 - delta)))
        report.positivity_share = share
        if share > 0:
            msg = f"{share:.2%} of units have fitted source probability outside [{delta}, {1 - delta}]"
            report.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)
    return report
