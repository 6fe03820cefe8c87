"""Data-driven calibration of the sensitivity parameters.

The source sample is split into two parts chosen to differ in ways the
shared covariates do not capture. Each part in turn plays the target: the
transported interval (which depends on the sensitivity parameters) is
compared with a direct randomization-based interval (which does not), and
the parameter values where the two intervals overlap are kept. The
intersection of the two directions' regions is the set of plausible
sensitivity parameters; scanning the real-target estimates over that set
classifies the effect as sensitive in neither, one, or both directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import MISSING, ObservationTable, encode_strata
from .errors import ConfigError, EstimationError
from .nuisance import _dummy_design
from .or_estimator import NuisanceOptions, grid_estimates
from .eif_estimator import CrossfitOptions, crossfit_grid
from .reports import EstimateReport
from .rng import STREAM_CALIBRATION, substream
from .tilt import GammaGrid

NEITHER = "Neither Direction"
POSITIVE_ONLY = "Positive Only"
NEGATIVE_ONLY = "Negative Only"
BOTH_DIRECTIONS = "Both Directions"


@dataclass(frozen=True)
class PartitionSpec:
    """Split of the source rows by the levels of one declared column.

    Part one holds the rows whose ``column`` level is in ``s1_levels``;
    part two holds the rest. The column must not be a shared covariate
    (the proxy target is viewed through the shared covariates, so a shared
    partition column would break positivity by construction).
    """

    column: str
    s1_levels: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "s1_levels", frozenset(self.s1_levels))

    def split(self, table: ObservationTable) -> tuple[np.ndarray, np.ndarray]:
        if self.column not in table.schema.source_covariates:
            raise ConfigError(f"partition column {self.column!r} is not a "
                              f"declared covariate")
        if self.column in table.schema.shared_covariates:
            raise ConfigError(f"partition column {self.column!r} is shared; "
                              f"partitioning on it would violate positivity "
                              f"between the proxy populations")
        codes = {table.schema.level_code(self.column, t) for t in self.s1_levels}
        col = table.column_codes(self.column)[table.source_rows]
        mask = np.isin(col, list(codes))
        s1 = table.source_rows[mask]
        s2 = table.source_rows[~mask]
        if s1.shape[0] == 0 or s2.shape[0] == 0:
            raise ConfigError("both partition parts must be nonempty")
        return s1, s2


@dataclass(frozen=True)
class Interval:
    point: float
    lo: float
    hi: float


@dataclass(frozen=True)
class CalibrationRegion:
    """Boolean masks over the grid: overlap in each transport direction and
    their intersection (row-major over (gamma0, gamma1))."""

    grid: GammaGrid
    in_c1: np.ndarray
    in_c2: np.ndarray

    @property
    def in_c(self) -> np.ndarray:
        return self.in_c1 & self.in_c2


@dataclass(frozen=True)
class SensitivityVerdict:
    """Direction(s) in which the effect is sensitive over the calibrated
    region, and the smallest tilt magnitude exp(|g1 - g0|) achieving
    significance (absent when no calibrated point is significant)."""

    direction: str
    min_tilt: float | None
    empty_region: bool = False

    def to_json_dict(self) -> dict:
        return {"direction": self.direction, "min_tilt": self.min_tilt}


# ---------------------------------------------------------------------------
# direct interval on a randomized sample
# ---------------------------------------------------------------------------


def standard_ci(table: ObservationTable, rows: np.ndarray, alpha: float = 0.05,
                method: str = "diff-in-means") -> Interval:
    """Randomization-based Wald interval for the ATE among ``rows``.

    ``rows`` must be source rows (they carry treatment and outcome).
    "diff-in-means" uses the unpooled two-sample variance;
    "wls-covariates" regresses the outcome on the treatment and all
    pre-treatment covariates with inverse-propensity weights and reads the
    treatment coefficient with its classical (model-based) standard error.
    """
    rows = np.asarray(rows)
    if (table.role[rows] != 1).any():
        raise ConfigError("standard_ci expects source rows (with A and Y)")
    a = table.treatment[rows].astype(float)
    y = table.outcome[rows]
    z = float(norm.ppf(1 - alpha / 2))
    if not (a == 1).any() or not (a == 0).any():
        raise EstimationError("single-arm sample: ATE is not identified")
    if method == "diff-in-means":
        y1, y0 = y[a == 1], y[a == 0]
        point = float(y1.mean() - y0.mean())
        var = 0.0
        for ys in (y1, y0):
            var += (ys.var(ddof=1) / ys.shape[0]) if ys.shape[0] > 1 else 0.0
        se = math.sqrt(var)
        return Interval(point, point - z * se, point + z * se)
    if method == "wls-covariates":
        ids = encode_strata(table, table.schema.source_covariates)[rows]
        uniq, inv = np.unique(ids, return_inverse=True)
        n1 = np.bincount(inv[a == 1], minlength=uniq.shape[0])
        ntot = np.bincount(inv, minlength=uniq.shape[0])
        if ((n1 == 0) | (n1 == ntot)).any():
            raise EstimationError("cannot weight by inverse propensity: a "
                                  "stratum holds only one arm")
        pi = (n1 / ntot)[inv]
        w = np.where(a == 1, 1.0 / pi, 1.0 / (1.0 - pi))
        dummies = _dummy_design(table.schema, table.schema.source_covariates,
                                uniq, saturated=False)[inv]
        design = np.column_stack([dummies[:, :1], a, dummies[:, 1:]])
        gram = design.T @ (design * w[:, None])
        sv = np.linalg.svd(gram, compute_uv=False)
        if sv[0] == 0.0 or sv[-1] / sv[0] < 1e-12:
            raise EstimationError("singular design in the covariate-adjusted "
                                  "interval")
        beta = np.linalg.solve(gram, design.T @ (w * y))
        resid = y - design @ beta
        dof = max(design.shape[0] - design.shape[1], 1)
        sigma2 = float(np.sum(w * resid ** 2) / dof)
        cov = sigma2 * np.linalg.inv(gram)
        point = float(beta[1])
        se = math.sqrt(cov[1, 1])
        return Interval(point, point - z * se, point + z * se)
    raise ConfigError(f"unknown standard CI method {method!r}")


# ---------------------------------------------------------------------------
# transported intervals between the partitions
# ---------------------------------------------------------------------------


def _proxy_table(table: ObservationTable, source_rows: np.ndarray,
                 target_rows: np.ndarray) -> ObservationTable:
    """Re-label one source part as the target: treatment and outcome are
    dropped and only shared covariates retained on the proxy target rows."""
    rows = np.concatenate([source_rows, target_rows])
    role = table.role[rows].copy()
    codes = table.codes[rows].copy()
    treatment = table.treatment[rows].copy()
    outcome = table.outcome[rows].copy()
    t = np.arange(source_rows.shape[0], rows.shape[0])
    role[t] = 0
    treatment[t] = MISSING
    outcome[t] = np.nan
    shared = set(table.schema.shared_covariates)
    for j, name in enumerate(table.schema.source_covariates):
        if name not in shared:
            codes[t, j] = MISSING
    return ObservationTable(table.schema, role, codes, treatment, outcome)


def transported_ci_grid(proxy: ObservationTable, grid: GammaGrid,
                        estimator: str, alpha: float, *, seed: int,
                        n_t_original: int, n_boot: int = 1000, n_folds: int = 2,
                        or_options: NuisanceOptions = NuisanceOptions(),
                        eif_options: CrossfitOptions = CrossfitOptions()
                        ) -> list[Interval]:
    """Transported TATE intervals on the proxy table, one per grid point
    (row-major), with interval half-widths rescaled by
    sqrt(proxy target size / original target size) so their lengths mimic an
    interval computed on the original target sample."""
    factor = math.sqrt(proxy.n_t / n_t_original)
    out: list[Interval] = []
    if estimator == "or":
        reports = grid_estimates(proxy, grid, n_boot, alpha, seed=seed,
                                 options=or_options)
        for r in reports:
            out.append(Interval(r.point,
                                r.point - factor * (r.point - r.lo),
                                r.point + factor * (r.hi - r.point)))
        return out
    if estimator == "eif":
        z = float(norm.ppf(1 - alpha / 2))
        results = crossfit_grid(proxy, list(grid.points()), n_folds,
                                seed=seed, options=eif_options)
        for res in results:
            half = z * math.sqrt(res.tate.sigma2 / res.tate.n) * factor
            out.append(Interval(res.tate.estimate, res.tate.estimate - half,
                                res.tate.estimate + half))
        return out
    raise ConfigError(f"unknown estimator {estimator!r}")


def overlap_region(transported: list[Interval],
                   standard: Interval) -> np.ndarray:
    """True where the transported and direct intervals intersect; closed
    intervals, so touching endpoints count as overlap."""
    return np.asarray([t.lo <= standard.hi and standard.lo <= t.hi
                       for t in transported])


def _ratio_match(ps: np.ndarray, pt: np.ndarray, ratio: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Downsample the larger proxy part (uniformly, without replacement) so
    the proxy source-to-target size ratio equals ``ratio``."""
    if ps.shape[0] / pt.shape[0] > ratio:
        keep = int(round(pt.shape[0] * ratio))
        if keep < 1:
            raise EstimationError("partition too small to ratio-match")
        ps = np.sort(rng.choice(ps, size=keep, replace=False))
    else:
        keep = int(round(ps.shape[0] / ratio))
        if keep < 1:
            raise EstimationError("partition too small to ratio-match")
        pt = np.sort(rng.choice(pt, size=keep, replace=False))
    return ps, pt


def calibrate(table: ObservationTable, spec: PartitionSpec, grid: GammaGrid,
              estimator: str = "or", alpha: float = 0.05, *, seed: int,
              n_boot: int = 1000, n_folds: int = 2,
              or_options: NuisanceOptions = NuisanceOptions(),
              eif_options: CrossfitOptions = CrossfitOptions(),
              standard_method: str = "diff-in-means",
              standard_on_full_partition: bool = False) -> CalibrationRegion:
    """Plausible sensitivity-parameter region from a source partition.

    For each direction the proxy populations are first size-matched to the
    original source/target ratio by downsampling the larger part; the
    transported interval (rescaled) is compared against the direct interval
    on the proxy target at every grid point, and the two directions'
    overlap masks are intersected. By default the direct interval uses the
    ratio-matched proxy target so the two intervals see the same sample;
    ``standard_on_full_partition`` computes it on the whole part instead.
    """
    s1, s2 = spec.split(table)
    ratio = table.n_s / table.n_t
    masks = []
    for ps, pt in ((s1, s2), (s2, s1)):
        # keyed by the proxy source's first row, not the direction index, so
        # swapping the partition labels exchanges the two masks exactly
        rng = substream(seed, STREAM_CALIBRATION, int(ps[0]))
        ps_m, pt_m = _ratio_match(ps, pt, ratio, rng)
        std_rows = pt if standard_on_full_partition else pt_m
        standard = standard_ci(table, std_rows, alpha, standard_method)
        proxy = _proxy_table(table, ps_m, pt_m)
        transported = transported_ci_grid(
            proxy, grid, estimator, alpha, seed=seed,
            n_t_original=table.n_t, n_boot=n_boot, n_folds=n_folds,
            or_options=or_options, eif_options=eif_options)
        masks.append(overlap_region(transported, standard).reshape(grid.shape()))
    return CalibrationRegion(grid, masks[0], masks[1])


def classify(reports: list[EstimateReport],
             region: CalibrationRegion) -> SensitivityVerdict:
    """Scan the real-target grid estimates over the calibrated region.

    A point is significant-positive when its interval lies strictly above
    zero and significant-negative when strictly below. The verdict reports
    which directions occur within the region and the smallest
    exp(|g1 - g0|) among significant points.
    """
    shape = region.grid.shape()
    if len(reports) != shape[0] * shape[1]:
        raise ConfigError("reports do not match the calibration grid")
    in_c = region.in_c.reshape(-1)
    if not in_c.any():
        return SensitivityVerdict(NEITHER, None, empty_region=True)
    pos = neg = False
    min_tilt = None
    for flag, report in zip(in_c, reports):
        if not flag:
            continue
        significant = report.excludes_zero_above or report.excludes_zero_below
        if report.excludes_zero_above:
            pos = True
        if report.excludes_zero_below:
            neg = True
        if significant:
            tilt = math.exp(abs(report.gamma1 - report.gamma0))
            min_tilt = tilt if min_tilt is None else min(min_tilt, tilt)
    direction = {(False, False): NEITHER, (True, False): POSITIVE_ONLY,
                 (False, True): NEGATIVE_ONLY,
                 (True, True): BOTH_DIRECTIONS}[(pos, neg)]
    return SensitivityVerdict(direction, min_tilt)
