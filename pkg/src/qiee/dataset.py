"""Role-annotated column tables, CSV I/O and cross-fitting folds."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ArgumentError, IntegrityError, ParseError, SchemaError

MISSING_TOKENS = ("", "NA")

_PLAIN_ROLES = ("outcome", "treatment", "mediator", "survival", "covariate")
_INDEXED_ROLE = re.compile(r"^(time-varying-treatment|time-varying-covariate)\[(\d+)\]$")
_BINARY_ROLES = ("treatment", "survival", "time-varying-treatment")


def _check_role_name(name: str) -> None:
    if name in _PLAIN_ROLES:
        return
    m = _INDEXED_ROLE.match(name)
    if m is None or int(m.group(2)) < 1:
        raise SchemaError(f"unknown role {name!r}")


def _normalize_roles(roles: Mapping[str, str | Sequence[str]]) -> dict[str, tuple[str, ...]]:
    out = {}
    for name, cols in roles.items():
        _check_role_name(name)
        if isinstance(cols, str):
            cols = (cols,)
        cols = tuple(cols)
        if not cols:
            raise SchemaError(f"role {name!r} maps to no column")
        out[name] = cols
    return out


@dataclass(frozen=True)
class Dataset:
    """Immutable table of float columns with semantic roles.

    Parameters
    ----------
    columns : mapping of column name to 1-D array
        All columns share the same length and are stored as float64.
    roles : mapping of role name to column name(s)
        Role names are ``outcome``, ``treatment``, ``mediator``, ``survival``,
        ``covariate`` and the indexed ``time-varying-treatment[t]`` /
        ``time-varying-covariate[t]`` (t starting at 1).

    Notes
    -----
    A missing outcome is stored as NaN. It is only legal for units whose
    survival flag is 0; everywhere else the outcome must be finite.
    """

    columns: Mapping[str, np.ndarray]
    roles: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        cols = {}
        n = None
        for name, values in self.columns.items():
            arr = np.array(values, dtype=float, copy=True).reshape(-1)
            arr.setflags(write=False)
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise IntegrityError(f"column {name!r} has length {arr.shape[0]}, expected {n}")
            cols[name] = arr
        roles = _normalize_roles(self.roles)
        for role, names in roles.items():
            for c in names:
                if c not in cols:
                    raise SchemaError(f"role {role!r} refers to missing column {c!r}")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "roles", roles)
        self._validate()

    def _validate(self):
        for role, names in self.roles.items():
            base = role.split("[")[0]
            for c in names:
                v = self.columns[c]
                if role == "outcome":
                    continue
                if np.isnan(v).any():
                    raise IntegrityError(f"column {c!r} (role {role}) has missing values")
                if base in _BINARY_ROLES and not np.isin(v, (0.0, 1.0)).all():
                    raise IntegrityError(f"column {c!r} (role {role}) must be 0/1")
        if "outcome" in self.roles:
            y = self.column(self.roles["outcome"][0])
            need = np.ones(self.n, dtype=bool)
            if "survival" in self.roles:
                need = self.column(self.roles["survival"][0]) == 1
            bad = np.flatnonzero(need & ~np.isfinite(y))
            if bad.size:
                raise IntegrityError(
                    f"outcome missing or non-finite for surviving unit(s) at row(s) {bad[:5].tolist()}"
                )

    # -- basic access -----------------------------------------------------
    @property
    def n(self) -> int:
        if not self.columns:
            return 0
        return next(iter(self.columns.values())).shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise SchemaError(f"no column {name!r}") from None

    def has_role(self, role: str) -> bool:
        return role in self.roles

    def role_columns(self, role: str) -> tuple[str, ...]:
        try:
            return self.roles[role]
        except KeyError:
            raise SchemaError(f"dataset has no {role!r} role") from None

    def matrix(self, names: Iterable[str]) -> np.ndarray:
        names = list(names)
        if not names:
            return np.empty((self.n, 0))
        return np.column_stack([self.column(c) for c in names])

    def role_vector(self, role: str) -> np.ndarray:
        return self.column(self.role_columns(role)[0])

    @property
    def outcome(self) -> np.ndarray:
        return self.role_vector("outcome")

    @property
    def treatment(self) -> np.ndarray:
        return self.role_vector("treatment")

    @property
    def survival(self) -> np.ndarray:
        return self.role_vector("survival")

    @property
    def covariates(self) -> np.ndarray:
        return self.matrix(self.role_columns("covariate"))

    @property
    def missing_outcome(self) -> np.ndarray:
        """Units whose outcome is undefined (survival = 0)."""
        if "survival" in self.roles:
            return self.survival == 0
        return np.zeros(self.n, dtype=bool)

    @property
    def horizon(self) -> int:
        """Number of time points with a time-varying treatment role."""
        t = 0
        while f"time-varying-treatment[{t + 1}]" in self.roles:
            t += 1
        return t

    def defined_outcomes(self) -> np.ndarray:
        y = self.outcome
        return y[np.isfinite(y)]

    # -- derived datasets ---------------------------------------------------
    def take(self, index) -> "Dataset":
        """Rows selected by an integer index or boolean mask (duplicates allowed)."""
        index = np.asarray(index)
        return Dataset({k: v[index] for k, v in self.columns.items()}, self.roles)

    def with_columns(self, **new: np.ndarray) -> "Dataset":
        cols = dict(self.columns)
        cols.update(new)
        return Dataset(cols, self.roles)

    def with_roles(self, **roles) -> "Dataset":
        merged = dict(self.roles)
        for k, v in roles.items():
            merged[k.replace("_", "-")] = v
        return Dataset(self.columns, merged)

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact equality of columns (NaN equals NaN) and roles."""
        if self.roles != other.roles or list(self.columns) != list(other.columns):
            return False
        return all(
            np.array_equal(self.columns[k].view(np.uint64), other.columns[k].view(np.uint64))
            or np.array_equal(self.columns[k], other.columns[k], equal_nan=True)
            for k in self.columns
        )


def load_csv(path: str | Path, schema: Mapping[str, str | Sequence[str]]) -> Dataset:
    """Read a headed CSV file into a :class:`Dataset`.

    Only the columns named in ``schema`` are parsed. Empty cells and the
    literal ``NA`` mean missing, which is accepted for the outcome of
    non-survivors only.
    """
    roles = _normalize_roles(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        wanted = [c for cols in roles.values() for c in cols]
        for role, cols in roles.items():
            for c in cols:
                if c not in header:
                    raise SchemaError(f"{path}: role {role!r} refers to missing column {c!r}")
        pos = {c: header.index(c) for c in dict.fromkeys(wanted)}
        values: dict[str, list[float]] = {c: [] for c in pos}
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}", row=row_no)
            for c, j in pos.items():
                cell = row[j].strip()
                if cell in MISSING_TOKENS:
                    values[c].append(np.nan)
                    continue
                try:
                    values[c].append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: row {row_no}, column {c!r}: cannot parse {cell!r} as a number",
                        row=row_no,
                        column=c,
                    ) from None
    return Dataset({c: np.asarray(v, dtype=float) for c, v in values.items()}, roles)


def _format(x: float) -> str:
    if np.isnan(x):
        return "NA"
    return repr(float(x))


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Write all columns; ``repr`` of a float round-trips exactly."""
    names = list(dataset.columns)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        cols = [dataset.columns[c] for c in names]
        for i in range(dataset.n):
            w.writerow([_format(col[i]) for col in cols])


@dataclass(frozen=True)
class FoldAssignment:
    """Partition of ``range(n)`` into ``k`` folds whose sizes differ by at most one."""

    n: int
    k: int
    fold_of: np.ndarray
    seed: int

    def members(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def training(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k)


def make_folds(n: int, k: int, seed: int) -> FoldAssignment:
    """Shuffle unit indices with a seeded Fisher-Yates permutation, then stripe."""
    if not (2 <= k <= n):
        raise ArgumentError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % k
    fold_of.setflags(write=False)
    return FoldAssignment(n=n, k=k, fold_of=fold_of, seed=seed)
