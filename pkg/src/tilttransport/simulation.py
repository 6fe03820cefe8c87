"""Synthetic data generation and the replication-study harness.

The built-in generating process draws source covariates from an
18-stratum categorical distribution (gender x race x age group), assigns
treatment within stratum at fixed probabilities, draws a binary outcome
from arm-specific stratum means, and draws target rows carrying only the
shared covariate (gender) from a shifted stratum distribution. Two outcome
scenarios are provided: small homogeneous-magnitude effects with opposite
signs by gender (A) and larger, more heterogeneous effects (B).

Ground truth is computed by brute force over the 18 strata, and
``run_study`` reports bias, RMSE, empirical SD, mean estimated SE, and
coverage over independent replications.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import MISSING, CovariateSchema, ObservationTable
from .eif_estimator import (CrossfitOptions, crossfit_estimate,
                            variance_and_ci)
from .errors import ConfigError, EstimationError, TiltTransportError
from .grouped import GroupedBinary, or_bootstrap_grouped, or_point_grouped
from .nuisance import PropensityModel
from .or_estimator import MAX_FAILED_FRACTION
from .rng import STREAM_SIMULATION, substream
from .tilt import SensitivityPair, tilt_probability

GENDERS = ("female", "other")
RACES = ("black", "latinx", "other")
AGES = ("18-24", "25-34", "other")


@dataclass(frozen=True)
class DgpStratum:
    gender: str
    race: str
    age: str
    p_source_raw: float   # printed source-stratum probability
    p_target_raw: float   # printed target-stratum probability
    propensity: float
    mu0: float
    mu1: float


@dataclass(frozen=True)
class DgpSpec:
    """An 18-stratum generating process with gender as the shared covariate."""

    scenario: str
    strata: tuple[DgpStratum, ...]
    corrections: tuple[str, ...] = ()

    def __post_init__(self):
        for name, p in zip(("source", "target"),
                           (self.p_source(), self.p_target())):
            if abs(p.sum() - 1.0) > 1e-9:
                raise ConfigError(f"{name} probabilities do not normalize")
        for s in self.strata:
            if not 0 < s.propensity < 1:
                raise ConfigError("stratum propensities must lie in (0, 1)")
            if not (0 <= s.mu0 <= 1 and 0 <= s.mu1 <= 1):
                raise ConfigError("stratum outcome means must lie in [0, 1]")

    # -- probability columns ---------------------------------------------------

    @property
    def normalization_residuals(self) -> tuple[float, float]:
        """How far the raw probability columns are from summing to one."""
        return (sum(s.p_source_raw for s in self.strata) - 1.0,
                sum(s.p_target_raw for s in self.strata) - 1.0)

    def p_source(self) -> np.ndarray:
        raw = np.asarray([s.p_source_raw for s in self.strata])
        return raw / raw.sum()

    def p_target(self) -> np.ndarray:
        raw = np.asarray([s.p_target_raw for s in self.strata])
        return raw / raw.sum()

    def density_ratio_raw(self) -> np.ndarray:
        """Target/source ratio of the raw (printed) probability columns."""
        return np.asarray([s.p_target_raw / s.p_source_raw for s in self.strata])

    # -- schema and model views ------------------------------------------------

    def schema(self) -> CovariateSchema:
        return CovariateSchema(
            source_covariates=("gender", "race", "age"),
            levels={"gender": GENDERS, "race": RACES, "age": AGES},
            shared_covariates=("gender",),
            outcome_kind="binary",
        )

    def stratum_codes(self) -> np.ndarray:
        """(18, 3) level codes per stratum, aligned with the schema."""
        return np.asarray([[GENDERS.index(s.gender), RACES.index(s.race),
                            AGES.index(s.age)] for s in self.strata])

    def propensities(self) -> np.ndarray:
        return np.asarray([s.propensity for s in self.strata])

    def outcome_means(self) -> np.ndarray:
        """(2, 18): row 0 the control means, row 1 the treated means."""
        return np.asarray([[s.mu0 for s in self.strata],
                           [s.mu1 for s in self.strata]])

    def known_propensity_model(self) -> PropensityModel:
        mapping = {(s.gender, s.race, s.age): s.propensity for s in self.strata}
        return PropensityModel.known_from_mapping(
            self.schema(), ("gender", "race", "age"), mapping)


_TABLE_ROWS = (
    # gender, race, age, p(x|source), p(x|target), propensity,
    #   scenario-A mu0, mu1, scenario-B mu0, mu1
    ("female", "black", "18-24", 0.0061, 0.0055, 0.6, 0.4, 0.35, 0.2, 0.6),
    ("female", "black", "25-34", 0.0077, 0.0071, 0.7, 0.4, 0.35, 0.2, 0.6),
    ("female", "black", "other", 0.0157, 0.0150, 0.8, 0.5, 0.45, 0.7, 0.2),
    ("female", "latinx", "18-24", 0.0073, 0.0066, 0.6, 0.5, 0.45, 0.7, 0.2),
    ("female", "latinx", "25-34", 0.0089, 0.0083, 0.8, 0.4, 0.35, 0.3, 0.3),
    ("female", "latinx", "other", 0.0147, 0.0139, 0.9, 0.5, 0.45, 0.7, 0.2),
    ("female", "other", "18-24", 0.1001, 0.1042, 0.6, 0.6, 0.55, 0.3, 0.5),
    ("female", "other", "25-34", 0.1271, 0.1353, 0.8, 0.5, 0.45, 0.6, 0.2),
    ("female", "other", "other", 0.2016, 0.2218, 0.9, 0.6, 0.55, 0.3, 0.5),
    ("other", "black", "18-24", 0.0197, 0.0193, 0.6, 0.3, 0.35, 0.2, 0.6),
    ("other", "black", "25-34", 0.0280, 0.0285, 0.8, 0.2, 0.25, 0.2, 0.6),
    ("other", "black", "other", 0.0397, 0.0409, 0.8, 0.3, 0.35, 0.2, 0.6),
    ("other", "latinx", "18-24", 0.0174, 0.0169, 0.6, 0.3, 0.35, 0.25, 0.55),
    ("other", "latinx", "25-34", 0.0201, 0.0200, 0.8, 0.3, 0.35, 0.25, 0.55),
    ("other", "latinx", "other", 0.0211, 0.0212, 0.9, 0.4, 0.45, 0.25, 0.55),
    # control-arm mean printed as an impossible 7; corrected to 0.7, the value
    # the analogous high-weight strata carry
    ("other", "other", "18-24", 0.1061, 0.1118, 0.7, 0.5, 0.55, 0.7, 0.2),
    ("other", "other", "25-34", 0.1277, 0.1375, 0.8, 0.4, 0.45, 0.25, 0.55),
    ("other", "other", "other", 0.1310, 0.1425, 0.9, 0.5, 0.55, 0.7, 0.2),
)


def builtin_dgp(scenario: str) -> DgpSpec:
    """The built-in 18-stratum generating process, scenario "A" or "B"."""
    if scenario not in ("A", "B"):
        raise ConfigError("scenario must be 'A' or 'B'")
    i0, i1 = (6, 7) if scenario == "A" else (8, 9)
    strata = tuple(
        DgpStratum(r[0], r[1], r[2], r[3], r[4], r[5], r[i0], r[i1])
        for r in _TABLE_ROWS)
    corrections = (("scenario-B (other, other, 18-24) control mean read as 0.7",)
                   if scenario == "B" else ())
    return DgpSpec(scenario, strata, corrections)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _generate_arrays(dgp: DgpSpec, n_s: int, n_t: int, rng: np.random.Generator):
    stratum = rng.choice(len(dgp.strata), size=n_s, p=dgp.p_source())
    pi = dgp.propensities()[stratum]
    a = (rng.random(n_s) < pi).astype(np.int8)
    mu = dgp.outcome_means()
    y = (rng.random(n_s) < mu[a, stratum]).astype(np.float64)
    # target rows carry only the shared covariate
    codes18 = dgp.stratum_codes()
    p_gender = np.asarray([dgp.p_target()[codes18[:, 0] == g].sum()
                           for g in range(len(GENDERS))])
    gender_t = rng.choice(len(GENDERS), size=n_t, p=p_gender)
    return stratum, a, y, gender_t


def generate(dgp: DgpSpec, n_s: int, n_t: int, seed: int) -> ObservationTable:
    """Draw a table of n_s source rows and n_t target rows from the process."""
    if n_s < 1 or n_t < 1:
        raise ConfigError("need n_s >= 1 and n_t >= 1")
    rng = substream(seed, STREAM_SIMULATION)
    stratum, a, y, gender_t = _generate_arrays(dgp, n_s, n_t, rng)
    codes18 = dgp.stratum_codes()
    n = n_s + n_t
    codes = np.full((n, 3), MISSING, dtype=np.int32)
    codes[:n_s] = codes18[stratum]
    codes[n_s:, 0] = gender_t
    role = np.concatenate([np.ones(n_s, dtype=np.int8),
                           np.zeros(n_t, dtype=np.int8)])
    treatment = np.concatenate([a, np.full(n_t, MISSING, dtype=np.int8)])
    outcome = np.concatenate([y, np.full(n_t, np.nan)])
    return ObservationTable(dgp.schema(), role, codes, treatment, outcome)


def generate_grouped(dgp: DgpSpec, n_s: int, n_t: int,
                     rng: np.random.Generator,
                     with_design: bool = False) -> GroupedBinary:
    """Draw the sufficient statistics of a table directly (identical in
    distribution to grouping :func:`generate` output; used by the
    replication harness where only counts matter)."""
    schema = dgp.schema()
    codes18 = dgp.stratum_codes()
    x_ids = (codes18[:, 0] * len(RACES) + codes18[:, 1]) * len(AGES) + codes18[:, 2]
    order = np.argsort(x_ids)
    counts = rng.multinomial(n_s, dgp.p_source()).astype(np.int64)
    n1 = rng.binomial(counts, dgp.propensities())
    n0 = counts - n1
    mu = dgp.outcome_means()
    y1 = rng.binomial(n1, mu[1])
    y0 = rng.binomial(n0, mu[0])
    p_gender = np.asarray([dgp.p_target()[codes18[:, 0] == g].sum()
                           for g in range(len(GENDERS))])
    m_v = rng.multinomial(n_t, p_gender).astype(float)
    design = None
    if with_design:
        from .nuisance import _dummy_design
        design = _dummy_design(schema, schema.source_covariates,
                               x_ids[order], saturated=False)
    return GroupedBinary(
        x_ids=x_ids[order],
        v_of_x=codes18[order, 0],
        n_arm=np.stack([n0[order], n1[order]], axis=1).astype(float),
        ysum_arm=np.stack([y0[order], y1[order]], axis=1).astype(float),
        v_ids=np.arange(len(GENDERS), dtype=np.int64),
        m_v=m_v, n_s=n_s, n_t=n_t, design=design)


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrueEffects:
    theta1: float
    theta0: float
    tate: float


def true_effects(dgp: DgpSpec, pair: SensitivityPair) -> TrueEffects:
    """Brute-force truth over the 18 strata: project the arm means onto the
    shared covariate under the source law, tilt, and average under the
    target law."""
    p_s = dgp.p_source()
    p_t = dgp.p_target()
    gender = dgp.stratum_codes()[:, 0]
    mu = dgp.outcome_means()
    theta = [0.0, 0.0]
    for arm, g in ((0, pair.gamma0), (1, pair.gamma1)):
        for v in range(len(GENDERS)):
            in_v = gender == v
            rho = float(np.sum(mu[arm, in_v] * p_s[in_v]) / p_s[in_v].sum())
            theta[arm] += float(p_t[in_v].sum()) * tilt_probability(rho, g)
    return TrueEffects(theta[1], theta[0], theta[1] - theta[0])


# ---------------------------------------------------------------------------
# replication studies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReplicationReport:
    """Summary of a replication study; ``x1000`` views match the reporting
    convention of scaling estimation-error columns by 1000."""

    estimator: str
    scenario: str
    n: int
    gamma1: float
    replicates: int
    alpha: float
    seed: int
    bias: float
    rmse: float
    emp_sd: float
    est_se: float
    coverage: float
    n_failed: int = 0

    def row_x1000(self) -> dict:
        return {
            "estimator": self.estimator, "scenario": self.scenario,
            "n": self.n, "gamma1": self.gamma1,
            "bias_x1000": 1000 * self.bias, "rmse_x1000": 1000 * self.rmse,
            "emp_sd_x1000": 1000 * self.emp_sd,
            "est_se_x1000": 1000 * self.est_se, "rate": self.coverage,
            "replicates": self.replicates, "seed": self.seed,
        }


def _percentile(values: np.ndarray, tau: float) -> float:
    k = math.ceil(values.shape[0] * tau)
    return float(np.sort(values)[max(k, 1) - 1])


def _or_replicate(dgp: DgpSpec, n: int, pair: SensitivityPair, n_boot: int,
                  alpha: float, seed: int, rep: int) -> tuple[float, float, float, float]:
    rng = substream(seed, STREAM_SIMULATION, rep)
    grouped = generate_grouped(dgp, n, n, rng)
    gammas = [(pair.gamma0, pair.gamma1)]
    th1, th0 = or_point_grouped(grouped, gammas)
    point = float(th1[0] - th0[0])
    reps = or_bootstrap_grouped(grouped, gammas, n_boot, rng)
    n_failed = int(reps.failed.sum())
    if n_failed > MAX_FAILED_FRACTION * n_boot:
        raise EstimationError(f"{n_failed} bootstrap replicates failed")
    vals = reps.tate[~reps.failed, 0]
    lo, hi = _percentile(vals, alpha / 2), _percentile(vals, 1 - alpha / 2)
    return point, lo, hi, (hi - lo) / 2.0 / float(norm.ppf(1 - alpha / 2))


def _eif_replicate(dgp: DgpSpec, n: int, pair: SensitivityPair, n_folds: int,
                   alpha: float, seed: int, rep: int,
                   options: CrossfitOptions) -> tuple[float, float, float, float]:
    rng = substream(seed, STREAM_SIMULATION, rep)
    data_seed = int(rng.integers(0, 2 ** 62))
    fold_seed = int(rng.integers(0, 2 ** 62))
    table = generate(dgp, n, n, data_seed)
    result = crossfit_estimate(table, n_folds, seed=fold_seed, pair=pair,
                               options=options)
    report = variance_and_ci(result.tate, alpha)
    se = math.sqrt(result.tate.sigma2 / result.tate.n)
    return report.point, report.lo, report.hi, se


def _run_replicate(args) -> tuple[int, tuple | None, str | None]:
    (rep, estimator, dgp, n, pair, n_boot, n_folds, alpha, seed, options) = args
    try:
        if estimator == "or":
            return rep, _or_replicate(dgp, n, pair, n_boot, alpha, seed, rep), None
        return rep, _eif_replicate(dgp, n, pair, n_folds, alpha, seed, rep,
                                   options), None
    except TiltTransportError as exc:
        return rep, None, str(exc)


def run_study(dgp: DgpSpec, estimator: str, n: int, gamma1: float,
              replicates: int, alpha: float = 0.05, *, seed: int,
              n_boot: int = 1000, n_folds: int = 2, n_workers: int = 1,
              eif_options: CrossfitOptions = CrossfitOptions()
              ) -> ReplicationReport:
    """Replication study of one estimator at one treated-arm tilt.

    The control-arm tilt is fixed at zero and the source and target samples
    share the size ``n``. Replicates run on independent derived substreams,
    so any worker count reproduces the same report; failed replicates are
    excluded from the summaries and counted.
    """
    if estimator not in ("or", "eif"):
        raise ConfigError("estimator must be 'or' or 'eif'")
    if replicates < 2:
        raise ConfigError("need at least 2 replicates")
    pair = SensitivityPair(0.0, gamma1)
    truth = true_effects(dgp, pair).tate
    jobs = [(rep, estimator, dgp, n, pair, n_boot, n_folds, alpha, seed,
             eif_options) for rep in range(replicates)]
    results: list[tuple | None] = [None] * replicates
    failures = 0
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for rep, value, _err in pool.map(_run_replicate, jobs,
                                             chunksize=max(1, replicates // (8 * n_workers))):
                results[rep] = value
    else:
        for job in jobs:
            rep, value, _err = _run_replicate(job)
            results[rep] = value
    points, ses, covered = [], [], []
    for value in results:
        if value is None:
            failures += 1
            continue
        point, lo, hi, se = value
        points.append(point)
        ses.append(se)
        covered.append(lo <= truth <= hi)
    if len(points) < 2:
        raise EstimationError("too few successful replicates to summarize")
    points = np.asarray(points)
    bias = float(points.mean() - truth)
    return ReplicationReport(
        estimator=estimator, scenario=dgp.scenario, n=n, gamma1=gamma1,
        replicates=replicates, alpha=alpha, seed=seed,
        bias=bias,
        rmse=float(np.sqrt(np.mean((points - truth) ** 2))),
        emp_sd=float(points.std(ddof=1)),
        est_se=float(np.mean(ses)),
        coverage=float(np.mean(covered)),
        n_failed=failures)
