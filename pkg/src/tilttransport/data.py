"""Columnar categorical data for source/target transport problems.

A table holds ``n = n_s + n_t`` rows tagged by a role column: source rows
(role 1) carry the full covariate vector, a binary treatment and an
outcome; target rows (role 0) carry only the shared covariates. All
covariates are categorical codes against a frozen schema; continuous
covariates are rejected at schema time.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import SchemaError
from .rng import STREAM_FOLDS, STREAM_RESAMPLE, substream

MISSING = -1

OUTCOME_KINDS = ("binary", "continuous")


@dataclass(frozen=True)
class CovariateSchema:
    """Declares the categorical columns of a source/target table.

    ``source_covariates`` is the ordered list of covariate columns observed
    on source rows; ``shared_covariates`` is the ordered sublist of them
    observed on every row. Each column declares a finite level set; tokens
    outside it are load-time errors.
    """

    source_covariates: tuple[str, ...]
    levels: Mapping[str, tuple[str, ...]]
    shared_covariates: tuple[str, ...]
    treatment_column: str = "a"
    outcome_column: str = "y"
    role_column: str = "s"
    outcome_kind: str = "binary"

    def __post_init__(self):
        object.__setattr__(self, "source_covariates", tuple(self.source_covariates))
        object.__setattr__(self, "shared_covariates", tuple(self.shared_covariates))
        object.__setattr__(
            self, "levels", {c: tuple(v) for c, v in dict(self.levels).items()}
        )
        if not self.source_covariates:
            raise SchemaError("schema declares no covariates")
        if len(set(self.source_covariates)) != len(self.source_covariates):
            raise SchemaError("duplicate covariate names")
        # shared must be a sublist of source, preserving order
        it = iter(self.source_covariates)
        if not all(name in it for name in self.shared_covariates):
            raise SchemaError(
                "shared_covariates must be an ordered sublist of source_covariates"
            )
        if not self.shared_covariates:
            raise SchemaError("at least one shared covariate is required")
        for name in self.source_covariates:
            lv = self.levels.get(name)
            if not lv:
                raise SchemaError(f"column {name!r} declares no levels")
            if len(set(lv)) != len(lv):
                raise SchemaError(f"column {name!r} has duplicate levels")
        reserved = {self.treatment_column, self.outcome_column, self.role_column}
        if len(reserved) != 3 or reserved & set(self.source_covariates):
            raise SchemaError("treatment/outcome/role column names must be distinct "
                              "from each other and from covariates")
        if self.outcome_kind not in OUTCOME_KINDS:
            raise SchemaError(f"outcome_kind must be one of {OUTCOME_KINDS}")

    # -- convenience lookups -------------------------------------------------

    def column_position(self, name: str) -> int:
        try:
            return self.source_covariates.index(name)
        except ValueError:
            raise SchemaError(f"unknown covariate {name!r}") from None

    def shared_positions(self) -> np.ndarray:
        return np.asarray([self.column_position(c) for c in self.shared_covariates])

    def level_code(self, column: str, token: str) -> int:
        try:
            return self.levels[column].index(token)
        except ValueError:
            raise SchemaError(
                f"unseen level {token!r} for column {column!r}"
            ) from None

    def to_json_dict(self) -> dict:
        return {
            "source_covariates": [
                {"name": c, "levels": list(self.levels[c])}
                for c in self.source_covariates
            ],
            "shared_covariates": list(self.shared_covariates),
            "treatment_column": self.treatment_column,
            "outcome_column": self.outcome_column,
            "role_column": self.role_column,
            "outcome_kind": self.outcome_kind,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "CovariateSchema":
        cols = d.get("source_covariates")
        if not isinstance(cols, list):
            raise SchemaError("schema JSON must list source_covariates")
        names, levels = [], {}
        for entry in cols:
            names.append(entry["name"])
            levels[entry["name"]] = tuple(entry["levels"])
        return cls(
            source_covariates=tuple(names),
            levels=levels,
            shared_covariates=tuple(d.get("shared_covariates", names)),
            treatment_column=d.get("treatment_column", "a"),
            outcome_column=d.get("outcome_column", "y"),
            role_column=d.get("role_column", "s"),
            outcome_kind=d.get("outcome_kind", "binary"),
        )


class ObservationTable:
    """Immutable table of source and target rows against a schema.

    Covariates are stored as integer codes (``-1`` = missing); treatment is
    ``{0, 1}`` on source rows and ``-1`` on target rows; the outcome is a
    float with NaN on target rows. Arrays are read-only, so tables can be
    shared freely across workers; every mutation constructs a new table.
    """

    def __init__(self, schema: CovariateSchema, role: np.ndarray,
                 codes: np.ndarray, treatment: np.ndarray, outcome: np.ndarray,
                 _checked: bool = False):
        self.schema = schema
        self.role = np.asarray(role, dtype=np.int8)
        self.codes = np.asarray(codes, dtype=np.int32)
        self.treatment = np.asarray(treatment, dtype=np.int8)
        self.outcome = np.asarray(outcome, dtype=np.float64)
        if not _checked:
            self._validate()
        for arr in (self.role, self.codes, self.treatment, self.outcome):
            arr.setflags(write=False)
        self.source_rows = np.flatnonzero(self.role == 1)
        self.target_rows = np.flatnonzero(self.role == 0)
        if _checked and (self.source_rows.shape[0] == 0
                         or self.target_rows.shape[0] == 0):
            raise SchemaError("need at least one source and one target row")
        self.source_rows.setflags(write=False)
        self.target_rows.setflags(write=False)
        # memos for derived encodings; valid because the table is immutable
        self._stratum_ids: dict[tuple[str, ...], np.ndarray] = {}

    # -- construction checks --------------------------------------------------

    def _validate(self):
        n = self.role.shape[0]
        ncov = len(self.schema.source_covariates)
        if self.codes.shape != (n, ncov):
            raise SchemaError("codes array shape does not match schema")
        if self.treatment.shape != (n,) or self.outcome.shape != (n,):
            raise SchemaError("column arrays must share one length")
        if not np.isin(self.role, (0, 1)).all():
            raise SchemaError("role column must be 0 (target) or 1 (source)")
        src = self.role == 1
        tgt = ~src
        if not src.any() or not tgt.any():
            raise SchemaError("need at least one source and one target row")
        for j, name in enumerate(self.schema.source_covariates):
            col = self.codes[:, j]
            if col.max(initial=-1) >= len(self.schema.levels[name]):
                raise SchemaError(f"code out of range for column {name!r}")
            if (col[src] < 0).any():
                raise SchemaError(f"source rows missing covariate {name!r}")
            if name in self.schema.shared_covariates and (col[tgt] < 0).any():
                raise SchemaError(f"target rows missing shared covariate {name!r}")
        if not np.isin(self.treatment[src], (0, 1)).all():
            raise SchemaError("treatment must be 0/1 on source rows")
        if (self.treatment[tgt] != MISSING).any():
            raise SchemaError("target rows must not carry a treatment value")
        if np.isnan(self.outcome[src]).any():
            raise SchemaError("source rows missing the outcome")
        if not np.isnan(self.outcome[tgt]).all():
            raise SchemaError("target rows must not carry an outcome value")
        if self.schema.outcome_kind == "binary":
            y = self.outcome[src]
            if not np.isin(y, (0.0, 1.0)).all():
                raise SchemaError("binary outcome must be 0/1 on source rows")

    # -- basic properties ------------------------------------------------------

    def __len__(self) -> int:
        return self.role.shape[0]

    @property
    def n_s(self) -> int:
        return self.source_rows.shape[0]

    @property
    def n_t(self) -> int:
        return self.target_rows.shape[0]

    def column_codes(self, name: str) -> np.ndarray:
        return self.codes[:, self.schema.column_position(name)]

    def level_tuple(self, row: int, columns: Iterable[str]) -> tuple[str, ...]:
        """Human-readable level tuple of one row over ``columns``."""
        out = []
        for c in columns:
            code = self.codes[row, self.schema.column_position(c)]
            out.append(self.schema.levels[c][code] if code >= 0 else "")
        return tuple(out)

    # -- derived tables ----------------------------------------------------------

    def take(self, rows: np.ndarray) -> "ObservationTable":
        """Row subset as a new table. Row-level invariants carry over from
        this table, so only the one-of-each-role requirement is rechecked."""
        rows = np.asarray(rows)
        return ObservationTable(self.schema, self.role[rows], self.codes[rows],
                                self.treatment[rows], self.outcome[rows],
                                _checked=True)

    def to_csv(self) -> str:
        """Serialize back to the CSV wire format (role, covariates, a, y)."""
        sch = self.schema
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([sch.role_column, *sch.source_covariates,
                         sch.treatment_column, sch.outcome_column])
        for i in range(len(self)):
            cells = [str(int(self.role[i]))]
            for j, name in enumerate(sch.source_covariates):
                code = self.codes[i, j]
                cells.append(sch.levels[name][code] if code >= 0 else "")
            a = self.treatment[i]
            cells.append(str(int(a)) if a != MISSING else "")
            y = self.outcome[i]
            if np.isnan(y):
                cells.append("")
            elif sch.outcome_kind == "binary":
                cells.append(str(int(y)))
            else:
                cells.append(repr(float(y)))
            writer.writerow(cells)
        return buf.getvalue()


def load_table(csv_bytes: bytes | str, schema: CovariateSchema) -> ObservationTable:
    """Parse and validate a CSV payload against ``schema``.

    The header must name the role column, every schema covariate, and the
    treatment/outcome columns. Empty cells are missing values; they are
    legal only where the data model allows them (treatment/outcome and
    non-shared covariates on target rows).
    """
    text = csv_bytes.decode("utf-8") if isinstance(csv_bytes, bytes) else csv_bytes
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty CSV") from None
    header = [h.strip() for h in header]
    required = [schema.role_column, *schema.source_covariates,
                schema.treatment_column, schema.outcome_column]
    pos = {}
    for name in required:
        if name not in header:
            raise SchemaError(f"missing column {name!r} in CSV header")
        pos[name] = header.index(name)

    roles, treatments, outcomes, code_rows = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        cell = lambda name: row[pos[name]].strip()
        s = cell(schema.role_column)
        if s not in ("0", "1"):
            raise SchemaError(f"line {lineno}: role must be 0 or 1, got {s!r}")
        is_source = s == "1"
        roles.append(1 if is_source else 0)

        codes = []
        for name in schema.source_covariates:
            token = cell(name)
            if token == "":
                codes.append(MISSING)
            else:
                codes.append(schema.level_code(name, token))
        code_rows.append(codes)

        a = cell(schema.treatment_column)
        if is_source:
            if a not in ("0", "1"):
                raise SchemaError(f"line {lineno}: treatment must be 0/1 on a "
                                  f"source row, got {a!r}")
            treatments.append(int(a))
        else:
            if a != "":
                raise SchemaError(f"line {lineno}: target row carries a treatment")
            treatments.append(MISSING)

        y = cell(schema.outcome_column)
        if is_source:
            if y == "":
                raise SchemaError(f"line {lineno}: source row missing the outcome")
            try:
                yval = float(y)
            except ValueError:
                raise SchemaError(f"line {lineno}: non-numeric outcome {y!r}") from None
            if schema.outcome_kind == "binary" and yval not in (0.0, 1.0):
                raise SchemaError(f"line {lineno}: binary outcome must be 0/1")
            outcomes.append(yval)
        else:
            if y != "":
                raise SchemaError(f"line {lineno}: target row carries an outcome")
            outcomes.append(np.nan)

    if not roles:
        raise SchemaError("CSV contains no data rows")
    return ObservationTable(
        schema,
        np.asarray(roles, dtype=np.int8),
        np.asarray(code_rows, dtype=np.int32),
        np.asarray(treatments, dtype=np.int8),
        np.asarray(outcomes, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# stratum encoding and indexing
# ---------------------------------------------------------------------------


def encode_strata(table: ObservationTable, columns: Iterable[str]) -> np.ndarray:
    """Mixed-radix encode each row's level tuple over ``columns`` to one id.

    Rows with a missing value in any of the columns encode to ``-1``.
    Results are memoized on the (immutable) table.
    """
    columns = tuple(columns)
    cached = table._stratum_ids.get(columns)
    if cached is not None:
        return cached
    ids = np.zeros(len(table), dtype=np.int64)
    valid = np.ones(len(table), dtype=bool)
    for name in columns:
        col = table.column_codes(name)
        ids = ids * len(table.schema.levels[name]) + np.maximum(col, 0)
        valid &= col >= 0
    ids[~valid] = -1
    ids.setflags(write=False)
    table._stratum_ids[columns] = ids
    return ids


def target_support_violations(table: ObservationTable,
                              columns: Iterable[str]) -> np.ndarray:
    """Encoded level ids present among target rows but absent from source
    rows (the empirical positivity violations), cheaper than the full
    per-level report."""
    columns = tuple(columns)
    ids = encode_strata(table, columns)
    src_u = np.unique(ids[table.source_rows])
    tgt_u = np.unique(ids[table.target_rows])
    return tgt_u[~np.isin(tgt_u, src_u, assume_unique=True)]


def decode_stratum(schema: CovariateSchema, columns: tuple[str, ...],
                   stratum_id: int) -> tuple[str, ...]:
    """Invert :func:`encode_strata` for error messages."""
    out = []
    for name in reversed(columns):
        base = len(schema.levels[name])
        stratum_id, code = divmod(stratum_id, base)
        out.append(schema.levels[name][code])
    return tuple(reversed(out))


@dataclass(frozen=True)
class StratumRows:
    source: np.ndarray
    target: np.ndarray
    source_by_arm: tuple[np.ndarray, np.ndarray]


class StratumIndex:
    """Row-index lists per level tuple over a chosen column subset.

    Within each stratum the rows are partitioned by role, and source rows
    further by treatment arm; the lists partition the indexed rows exactly.
    """

    def __init__(self, table: ObservationTable, columns: Iterable[str]):
        self.columns = tuple(columns)
        self.table = table
        ids = encode_strata(table, self.columns)
        order = np.argsort(ids, kind="stable")
        ids_sorted = ids[order]
        uniq, starts = np.unique(ids_sorted, return_index=True)
        bounds = np.append(starts, len(ids_sorted))
        self._entries: dict[tuple[str, ...], StratumRows] = {}
        for k, sid in enumerate(uniq):
            if sid < 0:
                continue
            rows = order[bounds[k]:bounds[k + 1]]
            src = rows[table.role[rows] == 1]
            tgt = rows[table.role[rows] == 0]
            arm0 = src[table.treatment[src] == 0]
            arm1 = src[table.treatment[src] == 1]
            key = decode_stratum(table.schema, self.columns, int(sid))
            self._entries[key] = StratumRows(src, tgt, (arm0, arm1))

    def keys(self) -> list[tuple[str, ...]]:
        return list(self._entries)

    def rows(self, key: tuple[str, ...]) -> StratumRows:
        return self._entries[key]

    def __contains__(self, key) -> bool:
        return tuple(key) in self._entries

    def __len__(self) -> int:
        return len(self._entries)


# ---------------------------------------------------------------------------
# positivity, resampling, folds, subgroups
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PositivityReport:
    """Empirical support check of the source sample over target levels."""

    columns: tuple[str, ...]
    violations: tuple[tuple[str, ...], ...]
    source_counts: dict = field(default_factory=dict)
    target_counts: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_positivity(table: ObservationTable,
                     on: Iterable[str] | None = None) -> PositivityReport:
    """List shared-covariate levels present in the target but absent from the
    source, together with per-level counts. An empty list means positivity
    holds empirically."""
    columns = tuple(on) if on is not None else table.schema.shared_covariates
    index = StratumIndex(table, columns)
    violations = []
    source_counts, target_counts = {}, {}
    for key in index.keys():
        rows = index.rows(key)
        source_counts[key] = int(rows.source.shape[0])
        target_counts[key] = int(rows.target.shape[0])
        if rows.target.shape[0] > 0 and rows.source.shape[0] == 0:
            violations.append(key)
    return PositivityReport(columns, tuple(sorted(violations)),
                            source_counts, target_counts)


def resample(table: ObservationTable, seed: int) -> ObservationTable:
    """Nonparametric resample: n_s source rows and n_t target rows drawn
    independently with replacement; roles preserved."""
    gen = substream(seed, STREAM_RESAMPLE)
    src = table.source_rows[gen.integers(0, table.n_s, table.n_s)]
    tgt = table.target_rows[gen.integers(0, table.n_t, table.n_t)]
    return table.take(np.concatenate([src, tgt]))


@dataclass(frozen=True)
class FoldAssignment:
    """Per-row fold labels, assigned independently within source and target
    so that each fold's share of either role deviates from the even split by
    at most one row."""

    n_folds: int
    labels: np.ndarray

    def rows_in_fold(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


def kfold(table: ObservationTable, n_folds: int, seed: int) -> FoldAssignment:
    if n_folds < 2 or n_folds > min(table.n_s, table.n_t):
        raise SchemaError(
            f"fold count must satisfy 2 <= K <= min(n_s, n_t) = "
            f"{min(table.n_s, table.n_t)}, got {n_folds}")
    gen = substream(seed, STREAM_FOLDS)
    labels = np.empty(len(table), dtype=np.int32)
    for rows in (table.source_rows, table.target_rows):
        perm = gen.permutation(rows)
        block = np.arange(rows.shape[0]) % n_folds
        labels[perm] = block
    labels.setflags(write=False)
    return FoldAssignment(n_folds, labels)


Predicate = Callable[[dict], bool]


def subgroup(table: ObservationTable,
             predicate: Mapping[str, object] | Predicate) -> ObservationTable:
    """Filter the target rows by a predicate over shared covariates; the
    source sample is retained unchanged (the same experiment is re-weighted
    to the target subgroup).

    ``predicate`` is either a mapping ``{column: level or set of levels}``
    or a callable receiving ``{column: level}`` per distinct level tuple.
    """
    shared = table.schema.shared_covariates
    mask = np.ones(len(table), dtype=bool)
    if callable(predicate):
        ids = encode_strata(table, shared)
        keep = {}
        for sid in np.unique(ids[table.target_rows]):
            key = decode_stratum(table.schema, shared, int(sid))
            keep[sid] = bool(predicate(dict(zip(shared, key))))
        mask = np.asarray([keep.get(i, True) for i in ids])
    else:
        for name, wanted in predicate.items():
            if name not in shared:
                raise SchemaError(
                    f"subgroup predicates may only reference shared "
                    f"covariates, got {name!r}")
            tokens = {wanted} if isinstance(wanted, str) else set(wanted)
            codes = {table.schema.level_code(name, t) for t in tokens}
            mask &= np.isin(table.column_codes(name), list(codes))
    rows = np.concatenate([table.source_rows,
                           table.target_rows[mask[table.target_rows]]])
    if rows.shape[0] == table.n_s:
        raise SchemaError("subgroup predicate removed every target row")
    return table.take(np.sort(rows))
