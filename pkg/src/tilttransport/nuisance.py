"""Nuisance-function fitting for transported-effect estimation.

Four objects are fit from a table: the treatment propensity within the
source, arm-specific outcome regressions on the full covariates, the
projection of the outcome regression onto the shared covariates, and the
target/source density ratio of the shared covariates. All covariates are
discrete, so the default fits are saturated per-stratum frequencies; a
weighted-least-squares outcome fit and an offset logistic density-ratio
fit are available as parametric alternatives.

Every fitted object is an immutable evaluation map from level tuples to
values, is a deterministic function of its inputs, and serializes to JSON
(method tag, stratum-value map with stable key order, clip bounds,
coefficients where applicable).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import (CovariateSchema, ObservationTable, decode_stratum,
                   encode_strata, target_support_violations)
from .errors import (ConvergenceError, EstimationError, OverlapError,
                     PositivityError)

_SEPARATION_BOUND = 30.0  # |beta|_inf beyond this flags separation
_SINGULAR_RTOL = 1e-12


def _encode_key(schema: CovariateSchema, columns: tuple[str, ...],
                key: tuple[str, ...]) -> int:
    sid = 0
    for name, token in zip(columns, key):
        sid = sid * len(schema.levels[name]) + schema.level_code(name, token)
    return sid


@dataclass(frozen=True)
class StratumFunction:
    """Evaluation map over level tuples of a fixed column subset.

    ``ids`` are mixed-radix stratum codes (sorted ascending) and ``values``
    the fitted values; lookups outside the fitted support raise, they never
    extrapolate.
    """

    schema: CovariateSchema
    columns: tuple[str, ...]
    ids: np.ndarray
    values: np.ndarray
    clip: tuple[float, float] | None = None

    def __post_init__(self):
        self.ids.setflags(write=False)
        self.values.setflags(write=False)

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        pos = np.searchsorted(self.ids, ids)
        bad = (pos >= self.ids.shape[0]) | (self.ids[np.minimum(pos, self.ids.shape[0] - 1)] != ids)
        if bad.any():
            missing = int(np.asarray(ids)[bad].flat[0])
            key = decode_stratum(self.schema, self.columns, missing)
            raise EstimationError(
                f"unevaluable stratum {key} over columns {self.columns}")
        out = self.values[pos]
        if self.clip is not None:
            out = np.clip(out, self.clip[0], self.clip[1])
        return out

    def evaluate(self, table: ObservationTable,
                 rows: np.ndarray | None = None) -> np.ndarray:
        ids = encode_strata(table, self.columns)
        if rows is not None:
            ids = ids[rows]
        return self.lookup(ids)

    def value_at(self, key: tuple[str, ...]) -> float:
        return float(self.lookup(np.asarray([_encode_key(self.schema, self.columns, key)]))[0])

    def items(self) -> list[tuple[tuple[str, ...], float]]:
        return [(decode_stratum(self.schema, self.columns, int(i)), float(v))
                for i, v in zip(self.ids, self.values)]

    def values_json(self) -> dict:
        return {"|".join(k): v for k, v in self.items()}


# ---------------------------------------------------------------------------
# model types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PropensityModel:
    """P(A=1 | X=x, source); either fitted from data or design-supplied."""

    fn: StratumFunction
    source_of_truth: str = "fitted"  # "fitted" | "known"

    @property
    def known(self) -> bool:
        return self.source_of_truth == "known"

    def evaluate(self, table, rows=None) -> np.ndarray:
        return self.fn.evaluate(table, rows)

    def arm_probability(self, table, rows, arm: int) -> np.ndarray:
        p = self.evaluate(table, rows)
        return p if arm == 1 else 1.0 - p

    def to_json_dict(self) -> dict:
        return {"model": "propensity", "source_of_truth": self.source_of_truth,
                "columns": list(self.fn.columns), "clip": self.fn.clip,
                "values": self.fn.values_json()}

    @classmethod
    def known_from_mapping(cls, schema: CovariateSchema,
                           columns: Iterable[str],
                           mapping: dict) -> "PropensityModel":
        """Design-supplied per-stratum randomization probabilities."""
        columns = tuple(columns)
        items = sorted(
            (_encode_key(schema, columns, tuple(k)), float(v))
            for k, v in mapping.items())
        ids = np.asarray([i for i, _ in items], dtype=np.int64)
        vals = np.asarray([v for _, v in items], dtype=np.float64)
        if ((vals <= 0) | (vals >= 1)).any():
            raise OverlapError("known propensities must lie strictly in (0, 1)")
        return cls(StratumFunction(schema, columns, ids, vals), "known")


@dataclass(frozen=True)
class OutcomeModel:
    """Arm-specific outcome regression on the full covariates."""

    arm: int
    method: str  # "frequency" | "wls-ipw"
    fn: StratumFunction
    coefficients: tuple[float, ...] | None = None

    def evaluate(self, table, rows=None) -> np.ndarray:
        return self.fn.evaluate(table, rows)

    def to_json_dict(self) -> dict:
        d = {"model": "outcome", "arm": self.arm, "method": self.method,
             "columns": list(self.fn.columns), "values": self.fn.values_json()}
        if self.coefficients is not None:
            d["coefficients"] = list(self.coefficients)
        return d


@dataclass(frozen=True)
class SharedOutcomeModel:
    """Outcome regression projected onto the shared covariates."""

    arm: int
    fn: StratumFunction

    def evaluate(self, table, rows=None) -> np.ndarray:
        return self.fn.evaluate(table, rows)

    def to_json_dict(self) -> dict:
        return {"model": "shared_outcome", "arm": self.arm,
                "columns": list(self.fn.columns), "values": self.fn.values_json()}


@dataclass(frozen=True)
class DensityRatioModel:
    """Target/source density ratio of the shared covariates."""

    fn: StratumFunction
    method: str  # "discrete-ratio" | "offset-logistic"
    coefficients: tuple[float, ...] | None = None
    offset: float | None = None

    def evaluate(self, table, rows=None) -> np.ndarray:
        return self.fn.evaluate(table, rows)

    def to_json_dict(self) -> dict:
        d = {"model": "density_ratio", "method": self.method,
             "columns": list(self.fn.columns), "clip": self.fn.clip,
             "values": self.fn.values_json()}
        if self.coefficients is not None:
            d["coefficients"] = list(self.coefficients)
            d["offset"] = self.offset
        return d


@dataclass(frozen=True)
class TiltedMomentModel:
    """Conditional moments of exp(g*Y)*Y and exp(g*Y) for one arm.

    ``x_num``/``x_den`` condition on the full covariates within the arm;
    ``v_num``/``v_den`` are their projections onto the shared covariates.
    Denominators are strictly positive because exp(g*y) > 0.
    """

    arm: int
    gamma: float
    x_num: StratumFunction
    x_den: StratumFunction
    v_num: StratumFunction
    v_den: StratumFunction

    def to_json_dict(self) -> dict:
        return {"model": "tilted_moments", "arm": self.arm, "gamma": self.gamma,
                "x_columns": list(self.x_num.columns),
                "v_columns": list(self.v_num.columns),
                "x_num": self.x_num.values_json(), "x_den": self.x_den.values_json(),
                "v_num": self.v_num.values_json(), "v_den": self.v_den.values_json()}


# ---------------------------------------------------------------------------
# grouped source statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _SourceGroups:
    ids: np.ndarray        # distinct stratum ids among source rows, sorted
    inverse: np.ndarray    # per source row, index into ids
    n_arm: np.ndarray      # (m, 2) counts per arm
    ysum_arm: np.ndarray   # (m, 2) outcome sums per arm


def _source_groups(table: ObservationTable,
                   columns: tuple[str, ...]) -> _SourceGroups:
    cache = getattr(table, "_source_groups_cache", None)
    if cache is None:
        cache = {}
        table._source_groups_cache = cache
    if columns in cache:
        return cache[columns]
    src = table.source_rows
    ids = encode_strata(table, columns)[src]
    uniq, inverse = np.unique(ids, return_inverse=True)
    m = uniq.shape[0]
    a = table.treatment[src].astype(np.int64)
    y = table.outcome[src]
    flat = inverse * 2 + a
    n = np.bincount(flat, minlength=2 * m).reshape(m, 2)
    ysum = np.bincount(flat, weights=y, minlength=2 * m).reshape(m, 2)
    cache[columns] = _SourceGroups(uniq, inverse, n, ysum)
    return cache[columns]


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _require_target_support(table: ObservationTable,
                            columns: tuple[str, ...]) -> None:
    missing = target_support_violations(table, columns)
    if missing.shape[0]:
        keys = [decode_stratum(table.schema, columns, int(i))
                for i in missing[:5]]
        raise PositivityError(f"target levels without source support: {keys}")


def fit_propensity_frequency(table: ObservationTable) -> PropensityModel:
    """Per-stratum treated fraction among source rows.

    Every stratum that carries source rows must hold at least one row in
    each arm (overlap); a single-arm stratum is an error naming the stratum.
    """
    columns = table.schema.source_covariates
    g = _source_groups(table, columns)
    empty = (g.n_arm == 0).any(axis=1)
    if empty.any():
        key = decode_stratum(table.schema, columns, int(g.ids[empty][0]))
        raise OverlapError(f"stratum {key} has source rows in only one arm")
    values = g.n_arm[:, 1] / g.n_arm.sum(axis=1)
    return PropensityModel(StratumFunction(table.schema, columns, g.ids, values))


def fit_outcome_frequency(table: ObservationTable, arm: int) -> OutcomeModel:
    """Per-stratum mean outcome among arm-``arm`` source rows.

    Strata with source rows but none in the requested arm are hard errors;
    pooling across strata would silently bias downstream residual terms.
    """
    columns = table.schema.source_covariates
    g = _source_groups(table, columns)
    empty = g.n_arm[:, arm] == 0
    if empty.any():
        key = decode_stratum(table.schema, columns, int(g.ids[empty][0]))
        raise OverlapError(f"stratum {key} has no source rows in arm {arm}")
    values = g.ysum_arm[:, arm] / g.n_arm[:, arm]
    return OutcomeModel(arm, "frequency",
                        StratumFunction(table.schema, columns, g.ids, values))


def _dummy_design(schema: CovariateSchema, columns: tuple[str, ...],
                  ids: np.ndarray, saturated: bool) -> np.ndarray:
    """Design rows for the distinct strata ``ids``: an intercept plus
    first-level-dropped dummies per column (main effects), or one indicator
    per stratum when saturated."""
    m = ids.shape[0]
    if saturated:
        return np.eye(m)
    cols = [np.ones((m, 1))]
    rest = ids.copy()
    per_column_codes = []
    for name in reversed(columns):
        base = len(schema.levels[name])
        rest, codes = np.divmod(rest, base)
        per_column_codes.append((name, codes))
    for name, codes in reversed(per_column_codes):
        n_levels = len(schema.levels[name])
        for lv in range(1, n_levels):
            cols.append((codes == lv).astype(float)[:, None])
    return np.hstack(cols)


def fit_outcome_wls(table: ObservationTable, arm: int,
                    propensity: PropensityModel,
                    saturated: bool = False) -> OutcomeModel:
    """Outcome regression by weighted least squares with inverse-propensity
    weights, on a full dummy expansion of the covariates (main effects, or
    saturated on request).

    Identical rows share a design row and weight, so the normal equations
    are assembled from per-stratum counts. An exactly singular system is an
    error (use the frequency fit), not a pseudo-inverse.
    """
    columns = table.schema.source_covariates
    g = _source_groups(table, columns)
    design = _dummy_design(table.schema, columns, g.ids, saturated)
    pi = propensity.fn.lookup(g.ids)
    w = 1.0 / (pi if arm == 1 else 1.0 - pi)
    row_weight = g.n_arm[:, arm] * w
    gram = design.T @ (design * row_weight[:, None])
    rhs = design.T @ (w * g.ysum_arm[:, arm])
    sv = np.linalg.svd(gram, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] / sv[0] < _SINGULAR_RTOL:
        raise EstimationError(
            "singular normal equations in the weighted least-squares outcome "
            "fit; the per-stratum frequency method handles this design")
    beta = np.linalg.solve(gram, rhs)
    pred = design @ beta
    if table.schema.outcome_kind == "binary":
        pred = np.clip(pred, 0.0, 1.0)
    return OutcomeModel(arm, "wls-ipw",
                        StratumFunction(table.schema, columns, g.ids, pred),
                        coefficients=tuple(float(b) for b in beta))


def fit_shared_outcome(table: ObservationTable,
                       outcome_model: OutcomeModel) -> SharedOutcomeModel:
    """Average the fitted outcome regression over source rows within each
    shared-covariate level.

    Shared levels that carry target rows but no source rows are positivity
    errors: the projection is undefined exactly where the estimator would
    need it.
    """
    shared = table.schema.shared_covariates
    _require_target_support(table, shared)
    src = table.source_rows
    vids = encode_strata(table, shared)[src]
    uniq, inverse = np.unique(vids, return_inverse=True)
    mu = outcome_model.evaluate(table, src)
    sums = np.bincount(inverse, weights=mu, minlength=uniq.shape[0])
    counts = np.bincount(inverse, minlength=uniq.shape[0])
    values = sums / counts
    return SharedOutcomeModel(outcome_model.arm,
                              StratumFunction(table.schema, shared, uniq, values))


def fit_density_ratio_discrete(table: ObservationTable) -> DensityRatioModel:
    """Saturated density-ratio estimate (n_s/n_t) * (target count / source
    count) per shared level; levels absent from the target get ratio 0.

    The source-weighted mean of the fitted ratio is exactly 1 before any
    clipping. Requires empirical positivity.
    """
    shared = table.schema.shared_covariates
    _require_target_support(table, shared)
    ids = encode_strata(table, shared)
    uniq = np.unique(ids)
    s_cnt = np.zeros(uniq.shape[0])
    t_cnt = np.zeros(uniq.shape[0])
    src_pos = np.searchsorted(uniq, ids[table.source_rows])
    tgt_pos = np.searchsorted(uniq, ids[table.target_rows])
    np.add.at(s_cnt, src_pos, 1.0)
    np.add.at(t_cnt, tgt_pos, 1.0)
    values = np.zeros(uniq.shape[0])
    nz = s_cnt > 0
    values[nz] = (table.n_s / table.n_t) * t_cnt[nz] / s_cnt[nz]
    return DensityRatioModel(StratumFunction(table.schema, shared, uniq, values),
                             "discrete-ratio")


def _expit(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fit_density_ratio_offset_logistic(table: ObservationTable,
                                      max_iter: int = 100,
                                      tol: float = 1e-10) -> DensityRatioModel:
    """Logistic regression of the source indicator on the shared covariates
    with a fixed offset log(n_s/n_t); the fitted ratio is exp(-beta'v).

    Solved by Newton iterations on the grouped likelihood. Divergence of the
    coefficient norm is reported as separation; failure to converge within
    ``max_iter`` is an error.
    """
    shared = table.schema.shared_covariates
    ids = encode_strata(table, shared)
    uniq = np.unique(ids)
    s_cnt = np.zeros(uniq.shape[0])
    t_cnt = np.zeros(uniq.shape[0])
    np.add.at(s_cnt, np.searchsorted(uniq, ids[table.source_rows]), 1.0)
    np.add.at(t_cnt, np.searchsorted(uniq, ids[table.target_rows]), 1.0)
    design = _dummy_design(table.schema, shared, uniq, saturated=False)
    offset = math.log(table.n_s / table.n_t)
    total = s_cnt + t_cnt

    beta = np.zeros(design.shape[1])
    last_ll = -np.inf
    for _ in range(max_iter):
        eta = design @ beta + offset
        p = _expit(eta)
        ll = float(np.sum(s_cnt * np.log(np.maximum(p, 1e-300))
                          + t_cnt * np.log(np.maximum(1.0 - p, 1e-300))))
        if abs(ll - last_ll) < tol * (abs(ll) + 1.0):
            break
        last_ll = ll
        grad = design.T @ (s_cnt - total * p)
        hess = design.T @ (design * (total * p * (1.0 - p))[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular Hessian in the offset logistic "
                                   "density-ratio fit") from None
        beta = beta + step
        if np.abs(beta).max() > _SEPARATION_BOUND:
            raise ConvergenceError(
                "separation detected in the offset logistic density-ratio fit "
                f"(|beta|_inf > {_SEPARATION_BOUND})")
    else:
        raise ConvergenceError(
            f"offset logistic density-ratio fit did not converge in "
            f"{max_iter} iterations")
    values = np.exp(-(design @ beta))
    return DensityRatioModel(StratumFunction(table.schema, shared, uniq, values),
                             "offset-logistic",
                             coefficients=tuple(float(b) for b in beta),
                             offset=offset)


def fit_tilted_moments(table: ObservationTable, arm: int,
                       gamma: float) -> TiltedMomentModel:
    """Per-stratum means of exp(g*Y)*Y and exp(g*Y) within the arm, plus
    their projections onto the shared covariates.

    At g=0 the numerator map reduces to the plain outcome regression and
    the denominator map is identically 1.
    """
    columns = table.schema.source_covariates
    shared = table.schema.shared_covariates
    src = table.source_rows
    g = _source_groups(table, columns)
    empty = g.n_arm[:, arm] == 0
    if empty.any():
        key = decode_stratum(table.schema, columns, int(g.ids[empty][0]))
        raise OverlapError(f"stratum {key} has no source rows in arm {arm}")

    a = table.treatment[src]
    y = table.outcome[src]
    in_arm = a == arm
    ey = np.exp(gamma * y[in_arm])
    idx = g.inverse[in_arm]
    m = g.ids.shape[0]
    num = np.bincount(idx, weights=ey * y[in_arm], minlength=m)
    den = np.bincount(idx, weights=ey, minlength=m)
    x_num_vals = num / g.n_arm[:, arm]
    x_den_vals = den / g.n_arm[:, arm]
    x_num = StratumFunction(table.schema, columns, g.ids, x_num_vals)
    x_den = StratumFunction(table.schema, columns, g.ids, x_den_vals)

    _require_target_support(table, shared)
    vids = encode_strata(table, shared)[src]
    uniq, inverse = np.unique(vids, return_inverse=True)
    counts = np.bincount(inverse, minlength=uniq.shape[0])
    v_num_vals = np.bincount(inverse, weights=x_num.lookup(encode_strata(table, columns)[src]),
                             minlength=uniq.shape[0]) / counts
    v_den_vals = np.bincount(inverse, weights=x_den.lookup(encode_strata(table, columns)[src]),
                             minlength=uniq.shape[0]) / counts
    return TiltedMomentModel(
        arm, gamma, x_num, x_den,
        StratumFunction(table.schema, shared, uniq, v_num_vals),
        StratumFunction(table.schema, shared, uniq, v_den_vals))


def clip(model, lo: float, hi: float):
    """Compose a propensity or density-ratio model with a clamp to [lo, hi]."""
    if not (0 < lo <= hi):
        raise EstimationError(f"clip bounds must satisfy 0 < lo <= hi, got "
                              f"({lo}, {hi})")
    fn = dataclasses.replace(model.fn, clip=(float(lo), float(hi)))
    return dataclasses.replace(model, fn=fn)
