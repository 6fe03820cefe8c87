"""Outcome-regression plug-in estimation with percentile-bootstrap intervals.

The point estimator averages the tilted shared-covariate regression over
the target sample. Inference resamples the source and target samples
independently, with replacement and at their original sizes, re-fits every
nuisance inside each replicate, and reads percentile quantiles off the
replicate distribution. When a grid of sensitivity parameters is requested
the same resamples are evaluated at every grid point so the estimated
surface is smooth in the Monte-Carlo noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ObservationTable
from .errors import ConfigError, EstimationError
from .grouped import (GroupedBinary, GroupedContinuous, OrReplicates,
                      or_bootstrap_continuous, or_bootstrap_grouped)
from .nuisance import fit_outcome_frequency, fit_outcome_wls, \
    fit_propensity_frequency, fit_shared_outcome, fit_tilted_moments
from .reports import EstimateReport
from .rng import STREAM_BOOTSTRAP, substream
from .tilt import (GammaGrid, SensitivityPair, transported_mean,
                   transported_mean_continuous)

MAX_FAILED_FRACTION = 0.01  # abort when more replicates than this fail


@dataclass(frozen=True)
class NuisanceOptions:
    """How the outcome regression is fit for the plug-in estimator."""

    mu_method: str = "frequency"   # "frequency" | "wls-ipw"
    saturated_wls: bool = False


@dataclass(frozen=True)
class PointEstimates:
    theta1: float
    theta0: float
    tate: float


@dataclass(frozen=True)
class BootstrapDistribution:
    """Replicate estimates (kept for diagnostics) and their left-continuous
    empirical quantile function Q(t) = inf{x : F(x) >= t}, which equals the
    ceil(B*t)-th order statistic."""

    replicates: np.ndarray

    def quantile(self, tau: float) -> float:
        if not 0 < tau < 1:
            raise ConfigError("quantile level must lie in (0, 1)")
        b = self.replicates.shape[0]
        k = math.ceil(b * tau)
        return float(np.sort(self.replicates)[max(k, 1) - 1])


def _fit_shared_models(table: ObservationTable, options: NuisanceOptions):
    if options.mu_method == "frequency":
        mu = [fit_outcome_frequency(table, arm) for arm in (0, 1)]
    elif options.mu_method == "wls-ipw":
        pi = fit_propensity_frequency(table)
        mu = [fit_outcome_wls(table, arm, pi, options.saturated_wls)
              for arm in (0, 1)]
    else:
        raise ConfigError(f"unknown outcome-fit method {options.mu_method!r}")
    return [fit_shared_outcome(table, m) for m in mu]


def estimate_point(table: ObservationTable, pair: SensitivityPair,
                   options: NuisanceOptions = NuisanceOptions()) -> PointEstimates:
    """Plug-in estimates of both counterfactual means and their difference."""
    if table.schema.outcome_kind == "continuous":
        th = []
        for arm, g in ((0, pair.gamma0), (1, pair.gamma1)):
            moments = fit_tilted_moments(table, arm, g)
            th.append(transported_mean_continuous(moments, table))
        theta0, theta1 = th
    else:
        rho0, rho1 = _fit_shared_models(table, options)
        theta1 = transported_mean(rho1, table, pair.gamma1)
        theta0 = transported_mean(rho0, table, pair.gamma0)
    return PointEstimates(theta1, theta0, theta1 - theta0)


def _bootstrap_replicates(table: ObservationTable,
                          pairs: Sequence[SensitivityPair], n_boot: int,
                          seed: int, options: NuisanceOptions) -> OrReplicates:
    gammas = [(p.gamma0, p.gamma1) for p in pairs]
    rng = substream(seed, STREAM_BOOTSTRAP)
    if table.schema.outcome_kind == "continuous":
        grouped = GroupedContinuous.from_table(table)
        return or_bootstrap_continuous(grouped, gammas, n_boot, rng)
    grouped = GroupedBinary.from_table(
        table, with_design=options.mu_method == "wls-ipw")
    return or_bootstrap_grouped(grouped, gammas, n_boot, rng,
                                options.mu_method, options.saturated_wls)


def _percentile_report(point: float, reps: np.ndarray, pair: SensitivityPair,
                       alpha: float, estimand: str, n_boot: int, seed: int,
                       n_failed: int) -> tuple[EstimateReport, BootstrapDistribution]:
    dist = BootstrapDistribution(reps)
    return (EstimateReport(estimand, pair.gamma0, pair.gamma1, point,
                           dist.quantile(alpha / 2), dist.quantile(1 - alpha / 2),
                           1 - alpha, "or-bootstrap", seed, B=n_boot,
                           n_failed=n_failed),
            dist)


def bootstrap_ci(table: ObservationTable, pair: SensitivityPair,
                 n_boot: int = 1000, alpha: float = 0.05, *, seed: int,
                 options: NuisanceOptions = NuisanceOptions(),
                 estimand: str = "tate"
                 ) -> tuple[EstimateReport, BootstrapDistribution]:
    """Percentile-bootstrap confidence interval for one sensitivity pair.

    Both arms of a replicate are computed from the same resampled data.
    Replicates whose nuisance fits fail (resampling can empty an arm cell or
    a shared level) are dropped and counted; the run aborts when more than
    1% fail.
    """
    if n_boot < 2:
        raise ConfigError("need at least 2 bootstrap replicates")
    if not 0 < alpha < 0.5:
        raise ConfigError("alpha must lie in (0, 0.5)")
    point = estimate_point(table, pair, options)
    reps = _bootstrap_replicates(table, [pair], n_boot, seed, options)
    n_failed = int(reps.failed.sum())
    if n_failed > MAX_FAILED_FRACTION * n_boot:
        raise EstimationError(
            f"{n_failed} of {n_boot} bootstrap replicates failed "
            f"(> {MAX_FAILED_FRACTION:.0%}); the table is too sparse for "
            f"resampled nuisance fits")
    ok = ~reps.failed
    per_estimand = {"tate": (reps.tate, point.tate),
                    "theta1": (reps.theta1, point.theta1),
                    "theta0": (reps.theta0, point.theta0)}
    if estimand not in per_estimand:
        raise ConfigError(f"unknown estimand {estimand!r}")
    values, pt = per_estimand[estimand]
    return _percentile_report(pt, values[ok, 0], pair, alpha, estimand,
                              n_boot, seed, n_failed)


def grid_estimates(table: ObservationTable, grid: GammaGrid,
                   n_boot: int = 1000, alpha: float = 0.05, *, seed: int,
                   options: NuisanceOptions = NuisanceOptions(),
                   estimand: str = "tate") -> list[EstimateReport]:
    """One report per grid point, row-major, with bootstrap resamples shared
    across all points."""
    if n_boot < 2:
        raise ConfigError("need at least 2 bootstrap replicates")
    if not 0 < alpha < 0.5:
        raise ConfigError("alpha must lie in (0, 0.5)")
    pairs = list(grid.points())
    reps = _bootstrap_replicates(table, pairs, n_boot, seed, options)
    n_failed = int(reps.failed.sum())
    if n_failed > MAX_FAILED_FRACTION * n_boot:
        raise EstimationError(
            f"{n_failed} of {n_boot} bootstrap replicates failed "
            f"(> {MAX_FAILED_FRACTION:.0%})")
    ok = ~reps.failed
    values = {"tate": reps.tate, "theta1": reps.theta1,
              "theta0": reps.theta0}[estimand]
    out = []
    for j, (pair, point) in enumerate(zip(pairs,
                                          _points_for_pairs(table, pairs,
                                                            options))):
        pt = {"tate": point.tate, "theta1": point.theta1,
              "theta0": point.theta0}[estimand]
        report, _ = _percentile_report(pt, values[ok, j], pair, alpha,
                                       estimand, n_boot, seed, n_failed)
        out.append(report)
    return out


def _points_for_pairs(table: ObservationTable, pairs: Sequence[SensitivityPair],
                      options: NuisanceOptions) -> list[PointEstimates]:
    """Point estimates for many pairs without re-fitting gamma-independent
    nuisances (the tilted-moment fits of the continuous path do depend on
    gamma and are cached per distinct value)."""
    if table.schema.outcome_kind == "continuous":
        cache: dict[tuple[int, float], float] = {}

        def theta(arm: int, g: float) -> float:
            if (arm, g) not in cache:
                cache[(arm, g)] = transported_mean_continuous(
                    fit_tilted_moments(table, arm, g), table)
            return cache[(arm, g)]

        return [PointEstimates(theta(1, p.gamma1), theta(0, p.gamma0),
                               theta(1, p.gamma1) - theta(0, p.gamma0))
                for p in pairs]
    rho0, rho1 = _fit_shared_models(table, options)
    out = []
    for p in pairs:
        t1 = transported_mean(rho1, table, p.gamma1)
        t0 = transported_mean(rho0, table, p.gamma0)
        out.append(PointEstimates(t1, t0, t1 - t0))
    return out
