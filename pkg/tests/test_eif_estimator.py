import math

import numpy as np
import pytest

from tilttransport import (CovariateSchema, CrossfitOptions, OverlapError,
                           SensitivityPair, builtin_dgp, crossfit_estimate,
                           estimate_point, generate, influence_terms,
                           influence_terms_continuous, variance_and_ci)
from tilttransport.data import FoldAssignment
from tilttransport.eif_estimator import FoldNuisances, crossfit_grid
from tilttransport.nuisance import (DensityRatioModel, OutcomeModel,
                                    PropensityModel, SharedOutcomeModel,
                                    StratumFunction, fit_density_ratio_discrete,
                                    fit_outcome_frequency,
                                    fit_propensity_frequency,
                                    fit_shared_outcome, fit_tilted_moments)

from conftest import build_table


def _manual_nuisances(schema, w=1.0, pi=0.5, rho=0.4, mu=0.4):
    """Single-stratum nuisances with prescribed values."""
    ids = np.asarray([0], dtype=np.int64)
    cols = schema.source_covariates
    vcols = schema.shared_covariates

    def fn(value, columns):
        return StratumFunction(schema, columns, ids, np.asarray([value]))

    pi_m = PropensityModel(fn(pi, cols))
    mu_m = tuple(OutcomeModel(arm, "frequency", fn(mu, cols)) for arm in (0, 1))
    rho_m = tuple(SharedOutcomeModel(arm, fn(rho, vcols)) for arm in (0, 1))
    w_m = DensityRatioModel(fn(w, vcols), "discrete-ratio")
    return FoldNuisances(0, pi_m, mu_m, rho_m, w_m)


@pytest.fixture
def single_stratum_schema():
    return CovariateSchema(("g",), {"g": ("only",)}, ("g",))


def test_hand_evaluated_source_term(single_stratum_schema):
    table = build_table(single_stratum_schema, [(("only",), 1, 1.0)],
                        [("only",)])
    nuis = _manual_nuisances(single_stratum_schema)
    gamma = 0.05
    src, tgt = influence_terms(table, 0, nuis, arm=1, gamma=gamma)
    denom = math.exp(gamma) * 0.4 + 0.6
    expected = 1.0 * math.exp(gamma) / denom ** 2 * ((1.0 / 0.5) * (1.0 - 0.4)
                                                     + 0.4 - 0.4)
    assert src == pytest.approx(expected, abs=1e-15)
    assert tgt == 0.0


def test_target_term_is_tilted_projection(single_stratum_schema):
    table = build_table(single_stratum_schema, [(("only",), 1, 1.0)],
                        [("only",)])
    nuis = _manual_nuisances(single_stratum_schema, rho=0.3)
    src, tgt = influence_terms(table, 1, nuis, arm=1, gamma=0.2)
    assert src == 0.0
    assert tgt == pytest.approx(math.exp(0.2) * 0.3
                                / (math.exp(0.2) * 0.3 + 0.7), abs=1e-15)


def test_gamma_zero_reduces_to_density_ratio_factor(single_stratum_schema):
    table = build_table(single_stratum_schema, [(("only",), 1, 1.0)],
                        [("only",)])
    nuis = _manual_nuisances(single_stratum_schema, w=1.7, pi=0.25, rho=0.9,
                             mu=0.35)
    src, _ = influence_terms(table, 0, nuis, arm=1, gamma=0.0)
    expected = 1.7 * ((1.0 / 0.25) * (1.0 - 0.35) + 0.35 - 0.9)
    assert src == pytest.approx(expected, abs=1e-14)


def test_vanishing_residuals(single_stratum_schema):
    # Y = mu(X) and mu(X) = rho(V) zero the source contribution at any tilt
    schema = CovariateSchema(("g",), {"g": ("only",)}, ("g",),
                             outcome_kind="continuous")
    table = build_table(schema, [(("only",), 1, 0.4)], [("only",)])
    nuis = _manual_nuisances(schema, w=2.0, pi=0.5, rho=0.4, mu=0.4)
    src, _ = influence_terms(table, 0, nuis, arm=1, gamma=0.0)
    assert src == pytest.approx(0.0, abs=1e-15)


def test_main_text_weighting_differs_off_arm(single_stratum_schema):
    # a control row contributes no residual to the treated-arm score under
    # arm-specific weighting, but does under the both-arm weight
    table = build_table(single_stratum_schema, [(("only",), 0, 1.0)],
                        [("only",)])
    nuis = _manual_nuisances(single_stratum_schema, mu=0.3)
    arm_specific, _ = influence_terms(table, 0, nuis, arm=1, gamma=0.1)
    both_arm, _ = influence_terms(table, 0, nuis, arm=1, gamma=0.1,
                                  main_text_weighting=True)
    denom = math.exp(0.1) * 0.4 + 0.6
    lead = math.exp(0.1) / denom ** 2
    assert arm_specific == pytest.approx(lead * (0.3 - 0.4), abs=1e-15)
    assert both_arm == pytest.approx(
        lead * ((1 / 0.5) * (1.0 - 0.3) + 0.3 - 0.4), abs=1e-15)
    assert arm_specific != both_arm


# -- cross-fitting -------------------------------------------------------------------


def _dgp_table(n, seed):
    return generate(builtin_dgp("A"), n, n, seed=seed)


def test_pooled_estimate_is_exact_fold_mean():
    table = _dgp_table(4000, seed=5)
    result = crossfit_estimate(table, 4, seed=9, pair=SensitivityPair(0.0, 0.05))
    for est in (result.theta0, result.theta1, result.tate):
        assert est.estimate == pytest.approx(est.fold_estimates.mean(),
                                             abs=1e-15)
    assert result.tate.estimate == pytest.approx(
        result.theta1.estimate - result.theta0.estimate, abs=1e-15)


def test_fold_counts_two_vs_four_agree():
    table = _dgp_table(50_000, seed=2)
    pair = SensitivityPair(0.0, 0.0)
    r2 = crossfit_estimate(table, 2, seed=3, pair=pair)
    r4 = crossfit_estimate(table, 4, seed=3, pair=pair)
    scale = math.sqrt(r2.tate.sigma2 / r2.tate.n)
    assert abs(r2.tate.estimate - r4.tate.estimate) < 4 * scale


def test_eif_close_to_or_estimate():
    table = _dgp_table(50_000, seed=8)
    pair = SensitivityPair(0.0, 0.0)
    eif = crossfit_estimate(table, 2, seed=1, pair=pair)
    orp = estimate_point(table, pair)
    scale = math.sqrt(eif.tate.sigma2 / eif.tate.n)
    assert abs(eif.tate.estimate - orp.tate) < 3 * scale


def test_sigma2_invariant_to_row_permutation_given_folds():
    table = _dgp_table(20_000, seed=4)
    from tilttransport.data import kfold
    folds = kfold(table, 2, seed=6)
    pair = SensitivityPair(0.0, 0.03)
    [res] = crossfit_grid(table, [pair], seed=0, folds=folds)

    rng = np.random.default_rng(1)
    perm = rng.permutation(len(table))
    shuffled = table.take(perm)
    labels = np.empty(len(table), dtype=np.int32)
    labels[np.arange(len(table))] = folds.labels[perm]
    [res_p] = crossfit_grid(shuffled, [pair], seed=0,
                            folds=FoldAssignment(2, labels))
    for a, b in ((res.tate, res_p.tate), (res.theta1, res_p.theta1)):
        assert a.sigma2 == pytest.approx(b.sigma2, rel=1e-12)
        assert a.estimate == pytest.approx(b.estimate, abs=1e-14)


def test_tate_variance_is_mean_square_of_difference():
    # a small two-stratum table with folds arranged so every fold complement
    # keeps both arms in both strata; sigma2 recomputed by explicit row loops
    schema = CovariateSchema(("g",), {"g": ("u", "v")}, ("g",))
    rows = []
    outcomes = iter([1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0,
                     1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0])
    for g in ("u", "v"):
        for arm in (0, 1):
            for _ in range(4):
                rows.append(((g,), arm, next(outcomes)))
    table = build_table(schema, rows, [("u",), ("v",), ("u",), ("v",),
                                       ("u",), ("v",)])
    labels = np.asarray([0, 1, 0, 1] * 4 + [0, 1, 0, 1, 0, 1], dtype=np.int32)
    pair = SensitivityPair(0.01, 0.05)
    [result] = crossfit_grid(table, [pair], seed=3,
                             folds=FoldAssignment(2, labels))
    n, n_s, n_t = result.tate.n, result.tate.n_s, result.tate.n_t
    th = {"theta0": result.theta0.estimate, "theta1": result.theta1.estimate}
    expected = {"theta0": 0.0, "theta1": 0.0, "tate": 0.0}
    for k in range(2):
        rows_k = result.folds.rows_in_fold(k)
        nuis = result.nuisances[k]
        sq = {"theta0": 0.0, "theta1": 0.0, "tate": 0.0}
        for i in rows_k:
            per_arm = {}
            for arm, tag in ((0, "theta0"), (1, "theta1")):
                gamma = pair.gamma1 if arm == 1 else pair.gamma0
                src, tgt = influence_terms(table, int(i), nuis, arm, gamma)
                if table.role[i] == 1:
                    val = (n / n_s) * src
                else:
                    val = (n / n_t) * (tgt - th[tag])
                per_arm[tag] = val
                sq[tag] += val ** 2
            sq["tate"] += (per_arm["theta1"] - per_arm["theta0"]) ** 2
        for tag in sq:
            expected[tag] += sq[tag] / rows_k.shape[0] / 2.0
    assert result.tate.sigma2 == pytest.approx(expected["tate"], rel=1e-12)
    assert result.theta1.sigma2 == pytest.approx(expected["theta1"], rel=1e-12)
    assert result.theta0.sigma2 == pytest.approx(expected["theta0"], rel=1e-12)


def test_degenerate_constants_zero_width_ci(single_stratum_schema):
    rows = [(("only",), a, 1.0) for a in (0, 1)] * 4
    table = build_table(single_stratum_schema, rows, [("only",)] * 4)
    result = crossfit_estimate(table, 2, seed=5, pair=SensitivityPair(0.0, 0.0))
    report = variance_and_ci(result.tate, 0.05)
    assert report.lo == report.hi == report.point == 0.0
    assert result.tate.sigma2 == 0.0


def test_known_propensity_mode():
    dgp = builtin_dgp("A")
    table = generate(dgp, 5000, 5000, seed=7)
    options = CrossfitOptions(known_propensity=dgp.known_propensity_model())
    result = crossfit_estimate(table, 2, seed=2, pair=SensitivityPair(0.0, 0.0),
                               options=options)
    assert math.isfinite(result.tate.estimate)
    assert result.tate.sigma2 > 0


def test_fold_failure_names_fold_and_stratum():
    schema = CovariateSchema(("g",), {"g": ("u", "v")}, ("g",))
    # the single treated row of stratum v sits in fold 0, so the fold-0
    # complement cannot fit the treated-arm regression there
    rows = [(("u",), 1, 1.0), (("u",), 0, 0.0), (("u",), 1, 0.0),
            (("u",), 0, 1.0), (("v",), 1, 1.0), (("v",), 0, 0.0)]
    table = build_table(schema, rows, [("u",), ("v",), ("u",), ("v",)])
    labels = np.asarray([0, 1, 1, 0, 0, 1, 0, 1, 0, 1], dtype=np.int32)
    folds = FoldAssignment(2, labels)
    with pytest.raises(OverlapError, match=r"fold 0.*'v'"):
        crossfit_grid(table, [SensitivityPair(0.0, 0.0)], seed=0, folds=folds)


def test_wald_report_fields():
    table = _dgp_table(4000, seed=9)
    result = crossfit_estimate(table, 2, seed=4, pair=SensitivityPair(0.0, 0.02))
    report = variance_and_ci(result.tate, 0.05)
    d = report.to_json_dict()
    assert d["method"] == "eif-wald" and d["K"] == 2 and "sigma2" in d
    half = report.hi - report.point
    assert half == pytest.approx(
        1.959963984540054 * math.sqrt(result.tate.sigma2 / result.tate.n),
        rel=1e-9)


# -- general-outcome influence function -----------------------------------------------


def test_continuous_matches_binary_row_by_row():
    dgp = builtin_dgp("A")
    table = generate(dgp, 800, 200, seed=3)
    pair = SensitivityPair(-0.04, 0.07)
    rows_all = np.arange(len(table))
    from tilttransport.eif_estimator import _fit_fold_binary
    nuis = _fit_fold_binary(table, rows_all, 0, CrossfitOptions())
    for arm, gamma in ((0, pair.gamma0), (1, pair.gamma1)):
        moments = fit_tilted_moments(table, arm, gamma)
        for i in list(range(10)) + list(range(len(table) - 5, len(table))):
            b = influence_terms(table, i, nuis, arm, gamma)
            c = influence_terms_continuous(table, i, moments,
                                           nuis.density_ratio, nuis.propensity)
            assert c[0] == pytest.approx(b[0], abs=1e-12)
            assert c[1] == pytest.approx(b[1], abs=1e-12)


def test_continuous_gamma_zero_target_term():
    schema = CovariateSchema(("g",), {"g": ("u", "v")}, ("g",),
                             outcome_kind="continuous")
    rows = [(("u",), 1, 2.5), (("u",), 0, 1.0), (("v",), 1, 0.5),
            (("v",), 0, 3.0)]
    table = build_table(schema, rows, [("u",), ("v",)])
    moments = fit_tilted_moments(table, 1, 0.0)
    w = fit_density_ratio_discrete(table)
    pi = fit_propensity_frequency(table)
    mu = fit_outcome_frequency(table, 1)
    rho = fit_shared_outcome(table, mu)
    for i in map(int, table.target_rows):
        _, tgt = influence_terms_continuous(table, i, moments, w, pi)
        assert tgt == pytest.approx(
            rho.evaluate(table, np.asarray([i]))[0], abs=1e-14)


def test_continuous_point_mass_terms():
    schema = CovariateSchema(("g",), {"g": ("u",)}, ("g",),
                             outcome_kind="continuous")
    c = 1.75
    rows = [(("u",), 1, c), (("u",), 0, c), (("u",), 1, c)]
    table = build_table(schema, rows, [("u",)])
    moments = fit_tilted_moments(table, 1, 0.8)
    w = fit_density_ratio_discrete(table)
    pi = fit_propensity_frequency(table)
    for i in map(int, table.source_rows):
        src, _ = influence_terms_continuous(table, i, moments, w, pi)
        assert src == pytest.approx(0.0, abs=1e-12)
    _, tgt = influence_terms_continuous(table, int(table.target_rows[0]),
                                        moments, w, pi)
    assert tgt == pytest.approx(c, abs=1e-12)


def test_continuous_crossfit_runs():
    schema = CovariateSchema(("g",), {"g": ("u", "v")}, ("g",),
                             outcome_kind="continuous")
    rng = np.random.default_rng(12)
    rows = [((("u", "v")[int(rng.integers(0, 2))],), int(rng.integers(0, 2)),
             float(rng.normal(0.5))) for _ in range(400)]
    table = build_table(schema, rows, [("u",)] * 60 + [("v",)] * 40)
    result = crossfit_estimate(table, 2, seed=1, pair=SensitivityPair(0.0, 0.1))
    report = variance_and_ci(result.tate, 0.05)
    assert report.lo < report.hi
