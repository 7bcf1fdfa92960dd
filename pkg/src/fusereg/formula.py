"""Design-matrix terms.

A term list is a sequence of strings, each one of

* ``"1"``      the constant column,
* ``"A"``      a named column,
* ``"A^2"``    the square of a named column,
* ``"A:C"``    the product of two named columns.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .errors import InputError, MissingColumn


def parse_term(term: str) -> tuple[str, ...]:
    """Return the column factors of a term; ``()`` for the intercept."""
    t = term.replace(" ", "")
    if not t:
        raise InputError("empty formula term")
    if t == "1":
        return ()
    if t.endswith("^2"):
        base = t[:-2]
        if not base or ":" in base or "^" in base:
            raise InputError(f"cannot parse formula term {term!r}")
        return (base, base)
    parts = tuple(t.split(":"))
    if len(parts) > 2 or any(not p or "^" in p for p in parts):
        raise InputError(f"cannot parse formula term {term!r}")
    return parts


def term_columns(terms: Sequence[str]) -> set[str]:
    cols: set[str] = set()
    for t in terms:
        cols.update(parse_term(t))
    return cols


def design_matrix(terms: Sequence[str], columns: Mapping[str, np.ndarray], n: int | None = None) -> np.ndarray:
    """Evaluate ``terms`` on column arrays, returning an ``(n, len(terms))`` matrix."""
    if n is None:
        n = len(next(iter(columns.values())))
    out = np.empty((n, len(terms)))
    for j, term in enumerate(terms):
        factors = parse_term(term)
        col = np.ones(n)
        for f in factors:
            if f not in columns:
                raise MissingColumn(f"formula term {term!r} references unknown column {f!r}")
            col = col * np.asarray(columns[f], dtype=float)
        out[:, j] = col
    return out


def check_full_rank(x: np.ndarray, what: str) -> None:
    from .errors import RankDeficient

    if x.shape[0] < x.shape[1]:
        raise RankDeficient(f"{what}: {x.shape[0]} rows for {x.shape[1]} terms")
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise RankDeficient(f"{what}: design matrix is not of full column rank")
