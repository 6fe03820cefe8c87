"""Cross-fitting estimation from the efficient influence function.

Nuisances are fit on each fold's complement and evaluated on the fold; the
per-fold averages of the uncentered influence function are pooled into the
estimate, and the plug-in variance of the centered influence function gives
Wald intervals.

Residual weighting is arm-specific: the arm-``a`` score carries
``1{A=a} / P(A=a | X)`` rather than a both-arm inverse-probability weight,
which keeps the conditional mean of the residual block exactly zero within
each arm (the both-arm variant is available for comparison via
``main_text_weighting``). With arm-specific weighting the general-outcome
influence function reduces exactly to the binary one on {0,1} data.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import FoldAssignment, ObservationTable, encode_strata, kfold
from .errors import ConfigError
from .nuisance import (DensityRatioModel, OutcomeModel, PropensityModel,
                       SharedOutcomeModel, StratumFunction, TiltedMomentModel,
                       clip, fit_density_ratio_discrete,
                       fit_density_ratio_offset_logistic,
                       fit_outcome_frequency, fit_outcome_wls,
                       fit_propensity_frequency, fit_shared_outcome,
                       fit_tilted_moments)
from .reports import EstimateReport
from .tilt import SensitivityPair, tilt_probability


@dataclass(frozen=True)
class CrossfitOptions:
    """Nuisance choices for the cross-fitting estimator.

    The ``*_shift`` fields additively corrupt a fitted map after fitting
    (clamped back to its range); they exist for robustness studies that
    probe which nuisance errors the estimator absorbs and are zero in
    ordinary use. ``known_propensity`` supplies design randomization
    probabilities verbatim; the influence function is unchanged when the
    propensity is known.
    """

    mu_method: str = "frequency"          # "frequency" | "wls-ipw"
    saturated_wls: bool = False
    w_method: str = "discrete-ratio"      # "discrete-ratio" | "offset-logistic"
    clip_pi: tuple[float, float] = (0.01, 0.99)
    clip_w: tuple[float, float] = (0.01, 100.0)
    known_propensity: PropensityModel | None = None
    main_text_weighting: bool = False
    mu_shift: float = 0.0
    rho_shift: float = 0.0
    pi_shift: float = 0.0


@dataclass(frozen=True)
class FoldNuisances:
    """Nuisances for one fold, fit strictly without that fold's rows."""

    fold: int
    propensity: PropensityModel
    outcome: tuple[OutcomeModel, OutcomeModel]        # by arm
    shared: tuple[SharedOutcomeModel, SharedOutcomeModel]
    density_ratio: DensityRatioModel


@dataclass(frozen=True)
class EifEstimate:
    """Pooled cross-fitting estimate with its plug-in variance.

    The pooled estimate is the exact arithmetic mean of the fold estimates;
    ``sigma2`` scales a Wald interval as estimate +/- z * sqrt(sigma2 / n)
    with n the combined sample size.
    """

    estimand: str
    gamma0: float
    gamma1: float
    fold_estimates: np.ndarray
    estimate: float
    sigma2: float
    n: int
    n_s: int
    n_t: int
    n_folds: int
    seed: int


@dataclass(frozen=True)
class CrossfitResult:
    theta1: EifEstimate
    theta0: EifEstimate
    tate: EifEstimate
    folds: FoldAssignment
    nuisances: tuple


def _shift_values(fn: StratumFunction, shift: float, lo: float,
                  hi: float) -> StratumFunction:
    return dataclasses.replace(
        fn, values=np.clip(fn.values + shift, lo, hi))


def _with_fold_context(fold: int):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, Exception):
                raise exc_type(f"fold {fold}: {exc}") from exc
            return False
    return _Ctx()


def _fit_fold_binary(table: ObservationTable, fit_rows: np.ndarray, fold: int,
                     options: CrossfitOptions) -> FoldNuisances:
    with _with_fold_context(fold):
        sub = table.take(fit_rows)
        if options.known_propensity is not None:
            pi = options.known_propensity
        else:
            pi = fit_propensity_frequency(sub)
        if options.mu_method == "wls-ipw":
            mu = tuple(fit_outcome_wls(sub, arm, pi, options.saturated_wls)
                       for arm in (0, 1))
        elif options.mu_method == "frequency":
            mu = tuple(fit_outcome_frequency(sub, arm) for arm in (0, 1))
        else:
            raise ConfigError(f"unknown outcome-fit method {options.mu_method!r}")
        # the shared projection is fit from the *uncorrupted* outcome fit
        rho = tuple(fit_shared_outcome(sub, m) for m in mu)
        if options.mu_shift:
            mu = tuple(dataclasses.replace(
                m, fn=_shift_values(m.fn, options.mu_shift, 0.0, 1.0))
                for m in mu)
        if options.rho_shift:
            rho = tuple(dataclasses.replace(
                r, fn=_shift_values(r.fn, options.rho_shift, 0.0, 1.0))
                for r in rho)
        if options.pi_shift:
            pi = dataclasses.replace(
                pi, fn=_shift_values(pi.fn, options.pi_shift, 0.0, 1.0))
        pi = clip(pi, *options.clip_pi)
        if options.w_method == "discrete-ratio":
            w = fit_density_ratio_discrete(sub)
        elif options.w_method == "offset-logistic":
            w = fit_density_ratio_offset_logistic(sub)
        else:
            raise ConfigError(f"unknown density-ratio method {options.w_method!r}")
        w = clip(w, *options.clip_w)
        return FoldNuisances(fold, pi, mu, rho, w)


def _binary_source_terms(y, a, x_ids, v_ids, nuis: FoldNuisances, arm: int,
                         gamma: float, main_text: bool) -> np.ndarray:
    w = nuis.density_ratio.fn.lookup(v_ids)
    pi = nuis.propensity.fn.lookup(x_ids)
    mu = nuis.outcome[arm].fn.lookup(x_ids)
    rho = nuis.shared[arm].fn.lookup(v_ids)
    eg = math.exp(gamma)
    denom = eg * rho + 1.0 - rho
    lead = w * eg / denom ** 2
    if main_text:
        weight = a / pi + (1.0 - a) / (1.0 - pi)
    else:
        arm_prob = pi if arm == 1 else 1.0 - pi
        weight = (a == arm) / arm_prob
    return lead * (weight * (y - mu) + mu - rho)


def _binary_target_terms(v_ids, nuis: FoldNuisances, arm: int,
                         gamma: float) -> np.ndarray:
    rho = nuis.shared[arm].fn.lookup(v_ids)
    return tilt_probability(rho, gamma)


def influence_terms(table: ObservationTable, row: int, nuis: FoldNuisances,
                    arm: int, gamma: float, *,
                    main_text_weighting: bool = False) -> tuple[float, float]:
    """Uncentered influence-function contribution of one row.

    Returns ``(source_term, target_term)``; the component for the role the
    row does not have is zero. At gamma = 0 the leading factor reduces to
    the density ratio alone.
    """
    x_ids = encode_strata(table, table.schema.source_covariates)[[row]]
    v_ids = encode_strata(table, table.schema.shared_covariates)[[row]]
    if table.role[row] == 1:
        val = _binary_source_terms(table.outcome[[row]],
                                   table.treatment[[row]].astype(float),
                                   x_ids, v_ids, nuis, arm, gamma,
                                   main_text_weighting)
        return float(val[0]), 0.0
    return 0.0, float(_binary_target_terms(v_ids, nuis, arm, gamma)[0])


# ---------------------------------------------------------------------------
# general outcomes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContinuousFoldNuisances:
    fold: int
    propensity: PropensityModel
    moments: tuple[TiltedMomentModel, TiltedMomentModel]  # by arm, at (g0, g1)
    density_ratio: DensityRatioModel


def _fit_fold_continuous(table: ObservationTable, fit_rows: np.ndarray,
                         fold: int, pair: SensitivityPair,
                         options: CrossfitOptions) -> ContinuousFoldNuisances:
    if options.mu_shift or options.rho_shift or options.pi_shift:
        raise ConfigError("nuisance corruption hooks support binary outcomes only")
    with _with_fold_context(fold):
        sub = table.take(fit_rows)
        pi = options.known_propensity or fit_propensity_frequency(sub)
        pi = clip(pi, *options.clip_pi)
        moments = (fit_tilted_moments(sub, 0, pair.gamma0),
                   fit_tilted_moments(sub, 1, pair.gamma1))
        if options.w_method == "discrete-ratio":
            w = fit_density_ratio_discrete(sub)
        else:
            w = fit_density_ratio_offset_logistic(sub)
        w = clip(w, *options.clip_w)
        return ContinuousFoldNuisances(fold, pi, moments, w)


def _continuous_source_terms(y, a, x_ids, v_ids, pi_model, w_model,
                             moments: TiltedMomentModel, arm: int) -> np.ndarray:
    w = w_model.fn.lookup(v_ids)
    pi = pi_model.fn.lookup(x_ids)
    num_x = moments.x_num.lookup(x_ids)
    den_x = moments.x_den.lookup(x_ids)
    num_v = moments.v_num.lookup(v_ids)
    den_v = moments.v_den.lookup(v_ids)
    ey = np.exp(moments.gamma * y)
    arm_prob = pi if arm == 1 else 1.0 - pi
    weight = (a == arm) / arm_prob
    residual = (ey * y / den_v - num_x / den_v
                - ey * num_v / den_v ** 2 + den_x * num_v / den_v ** 2)
    projection = num_x / den_v - num_v * den_x / den_v ** 2
    return w * (weight * residual + projection)


def influence_terms_continuous(table: ObservationTable, row: int,
                               moments: TiltedMomentModel,
                               density_ratio: DensityRatioModel,
                               propensity: PropensityModel
                               ) -> tuple[float, float]:
    """Uncentered general-outcome influence contribution of one row.

    On {0,1} outcomes this equals :func:`influence_terms` row by row; for a
    point-mass outcome the residual blocks vanish and the target term is the
    constant itself.
    """
    x_ids = encode_strata(table, table.schema.source_covariates)[[row]]
    v_ids = encode_strata(table, table.schema.shared_covariates)[[row]]
    if table.role[row] == 1:
        val = _continuous_source_terms(
            table.outcome[[row]], table.treatment[[row]].astype(float),
            x_ids, v_ids, propensity, density_ratio, moments, moments.arm)
        return float(val[0]), 0.0
    num_v = moments.v_num.lookup(v_ids)
    den_v = moments.v_den.lookup(v_ids)
    return 0.0, float((num_v / den_v)[0])


# ---------------------------------------------------------------------------
# cross-fitting
# ---------------------------------------------------------------------------


def crossfit_grid(table: ObservationTable, pairs: list[SensitivityPair],
                  n_folds: int = 2, *, seed: int,
                  options: CrossfitOptions = CrossfitOptions(),
                  folds: FoldAssignment | None = None
                  ) -> list[CrossfitResult]:
    """Cross-fitting estimates for several sensitivity pairs at once.

    Folds and (for binary outcomes) the fitted nuisances are shared across
    pairs; only the influence-function evaluation depends on the pair. For
    general outcomes the tilted moments depend on the pair and are re-fit.
    A precomputed fold assignment can be injected; otherwise folds derive
    from the seed.
    """
    if folds is None:
        folds = kfold(table, n_folds, seed)
    else:
        n_folds = folds.n_folds
    x_all = encode_strata(table, table.schema.source_covariates)
    v_all = encode_strata(table, table.schema.shared_covariates)
    continuous = table.schema.outcome_kind == "continuous"

    n = len(table)
    fold_rows = [folds.rows_in_fold(k) for k in range(n_folds)]
    fit_rows = [np.flatnonzero(folds.labels != k) for k in range(n_folds)]
    binary_nuis = None
    if not continuous:
        binary_nuis = [_fit_fold_binary(table, fit_rows[k], k, options)
                       for k in range(n_folds)]

    n_s, n_t = table.n_s, table.n_t
    s_scale, t_scale = n / n_s, n / n_t
    is_src = table.role == 1
    results = []
    for pair in pairs:
        src_terms = np.zeros((2, n))
        tgt_terms = np.zeros((2, n))
        fold_est = np.zeros((2, n_folds))
        nuisances = []
        for k in range(n_folds):
            rows_k = fold_rows[k]
            rows_src = rows_k[table.role[rows_k] == 1]
            rows_tgt = rows_k[table.role[rows_k] == 0]
            y = table.outcome[rows_src]
            a = table.treatment[rows_src].astype(float)
            if continuous:
                nuis = _fit_fold_continuous(table, fit_rows[k], k, pair, options)
                with _with_fold_context(k):
                    for arm in (0, 1):
                        m = nuis.moments[arm]
                        src_terms[arm, rows_src] = _continuous_source_terms(
                            y, a, x_all[rows_src], v_all[rows_src],
                            nuis.propensity, nuis.density_ratio, m, arm)
                        tgt_terms[arm, rows_tgt] = (
                            m.v_num.lookup(v_all[rows_tgt])
                            / m.v_den.lookup(v_all[rows_tgt]))
            else:
                nuis = binary_nuis[k]
                gammas = (pair.gamma0, pair.gamma1)
                with _with_fold_context(k):
                    for arm in (0, 1):
                        src_terms[arm, rows_src] = _binary_source_terms(
                            y, a, x_all[rows_src], v_all[rows_src], nuis, arm,
                            gammas[arm], options.main_text_weighting)
                        tgt_terms[arm, rows_tgt] = _binary_target_terms(
                            v_all[rows_tgt], nuis, arm, gammas[arm])
            nuisances.append(nuis)
            for arm in (0, 1):
                fold_est[arm, k] = (src_terms[arm, rows_src].mean()
                                    + tgt_terms[arm, rows_tgt].mean())

        pooled = fold_est.mean(axis=1)

        def sigma2(values_src, values_tgt, center):
            eif = np.where(is_src, s_scale * values_src,
                           t_scale * (values_tgt - center))
            return float(np.mean([np.mean(eif[rows] ** 2)
                                  for rows in fold_rows]))

        def make(tag, est, folds_est, s2):
            return EifEstimate(tag, pair.gamma0, pair.gamma1, folds_est, est,
                               s2, n, n_s, n_t, n_folds, seed)

        s2 = [sigma2(src_terms[arm], tgt_terms[arm], pooled[arm])
              for arm in (0, 1)]
        s2_tate = sigma2(src_terms[1] - src_terms[0],
                         tgt_terms[1] - tgt_terms[0], pooled[1] - pooled[0])
        results.append(CrossfitResult(
            theta1=make("theta1", float(pooled[1]), fold_est[1].copy(), s2[1]),
            theta0=make("theta0", float(pooled[0]), fold_est[0].copy(), s2[0]),
            tate=make("tate", float(pooled[1] - pooled[0]),
                      fold_est[1] - fold_est[0], s2_tate),
            folds=folds, nuisances=tuple(nuisances)))
    return results


def crossfit_estimate(table: ObservationTable, n_folds: int = 2, *, seed: int,
                      pair: SensitivityPair,
                      options: CrossfitOptions = CrossfitOptions()
                      ) -> CrossfitResult:
    """Cross-fitting estimates of both counterfactual means and the TATE.

    Each fold's estimate normalizes the source sum by the fold's source
    count and the target sum by its target count; the pooled estimate is
    the mean over folds. The variance uses the centered influence function
    with the source and target prevalence estimated by n_s/n and n_t/n,
    and the TATE variance uses the per-row difference of the two arms'
    influence functions over the same folds.
    """
    return crossfit_grid(table, [pair], n_folds, seed=seed, options=options)[0]


def variance_and_ci(estimate: EifEstimate, alpha: float = 0.05) -> EstimateReport:
    """Wald interval: estimate +/- z_{1-alpha/2} * sqrt(sigma2 / n)."""
    if not 0 < alpha < 0.5:
        raise ConfigError("alpha must lie in (0, 0.5)")
    z = float(norm.ppf(1 - alpha / 2))
    half = z * math.sqrt(estimate.sigma2 / estimate.n)
    return EstimateReport(estimate.estimand, estimate.gamma0, estimate.gamma1,
                          estimate.estimate, estimate.estimate - half,
                          estimate.estimate + half, 1 - alpha, "eif-wald",
                          estimate.seed, K=estimate.n_folds,
                          sigma2=estimate.sigma2)
