import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilttransport import (ConfigError, CovariateSchema, GammaGrid,
                           SensitivityPair, default_grid, effect_measures,
                           fit_outcome_frequency, fit_shared_outcome,
                           fit_tilted_moments, tilt_probability,
                           transported_mean, transported_mean_continuous)

from conftest import build_table

probabilities = st.floats(0.0, 1.0, allow_nan=False)
tilts = st.floats(-20.0, 20.0, allow_nan=False)


# -- tilt map -------------------------------------------------------------------


@given(probabilities)
def test_identity_at_zero(rho):
    assert tilt_probability(rho, 0.0) == pytest.approx(rho, abs=1e-15)


@given(tilts)
def test_fixed_points(gamma):
    assert tilt_probability(0.0, gamma) == 0.0
    assert tilt_probability(1.0, gamma) == 1.0


def test_half_by_log_two_is_two_thirds():
    assert tilt_probability(0.5, math.log(2.0)) == pytest.approx(2 / 3,
                                                                 abs=1e-15)


def test_odds_multiply_by_exp_gamma():
    # the tilt moves the odds by exactly exp(gamma)
    for rho in (0.1, 0.45, 0.9):
        t = tilt_probability(rho, 0.05)
        odds_ratio = (t / (1 - t)) / (rho / (1 - rho))
        assert odds_ratio == pytest.approx(math.exp(0.05), abs=1e-12)


@given(st.floats(0.001, 0.999), st.floats(-8.0, 8.0))
@settings(max_examples=200)
def test_composition_inverse(rho, gamma):
    # 1e-12 holds through |gamma| <= 8; beyond that the 1 - t cancellation
    # dominates (odds ratios past e^8 are far outside any analysis grid)
    assert tilt_probability(tilt_probability(rho, gamma), -gamma) == \
        pytest.approx(rho, abs=1e-12)


def test_strictly_monotone_in_both_arguments():
    rhos = np.linspace(0.005, 0.995, 100)
    gammas = np.linspace(-3.0, 3.0, 100)
    surface = np.empty((100, 100))
    for j, g in enumerate(gammas):
        surface[:, j] = tilt_probability(rhos, float(g))
    assert (np.diff(surface, axis=0) > 0).all()   # increasing in rho
    assert (np.diff(surface, axis=1) > 0).all()   # increasing in gamma


def test_no_overflow_at_extreme_tilts():
    assert tilt_probability(0.5, 900.0) == pytest.approx(1.0)
    assert tilt_probability(0.5, -900.0) == pytest.approx(0.0)


# -- sensitivity pairs and grids ------------------------------------------------


def test_pair_validation():
    assert SensitivityPair(0.0, 0.0).transportable
    assert not SensitivityPair(0.0, 0.1).transportable
    with pytest.raises(ConfigError):
        SensitivityPair(float("nan"), 0.0)
    with pytest.raises(ConfigError):
        SensitivityPair(0.0, float("inf"))


def test_default_grid_shape_and_values():
    grid = default_grid()
    g0 = grid.gamma0_values()
    assert g0.shape[0] == 51
    assert g0[0] == pytest.approx(-0.05)
    assert g0[-1] == pytest.approx(0.05)
    assert np.any(np.isclose(g0, 0.0, atol=1e-12))
    assert np.allclose(np.diff(g0), 0.002)


def test_grid_must_contain_zero():
    with pytest.raises(ConfigError):
        GammaGrid((0.01, 0.05, 0.002), (-0.05, 0.05, 0.002))
    with pytest.raises(ConfigError):
        GammaGrid((-0.05, 0.05, 0.0), (-0.05, 0.05, 0.002))
    with pytest.raises(ConfigError):
        GammaGrid((-0.05, 0.05, 0.003), (-0.05, 0.05, 0.002))


def test_grid_row_major_iteration_and_json():
    grid = GammaGrid((-0.002, 0.002, 0.002), (0.0, 0.002, 0.002))
    pts = list(grid.points())
    assert len(pts) == 3 * 2 == grid.shape()[0] * grid.shape()[1]
    assert pts[0].gamma0 == pytest.approx(-0.002)
    assert pts[1].gamma0 == pytest.approx(-0.002)   # row-major: gamma1 varies
    assert pts[1].gamma1 == pytest.approx(0.002)
    assert GammaGrid.from_json_dict(
        json.loads(json.dumps(grid.to_json_dict()))).shape() == grid.shape()


def test_singleton_grid_is_legal():
    grid = GammaGrid((0.0, 0.0, 0.002), (0.0, 0.0, 0.002))
    assert list(grid.points()) == [SensitivityPair(0.0, 0.0)]


# -- transported means ------------------------------------------------------------


def _rho_table(gender_schema):
    rows = [(("female",), 1, 1.0), (("female",), 1, 0.0), (("female",), 0, 0.0),
            (("other",), 1, 1.0), (("other",), 1, 1.0), (("other",), 0, 1.0)]
    return build_table(gender_schema, rows,
                       [("female",), ("female",), ("other",)])


def test_transported_mean_at_zero_is_plain_mean(gender_schema):
    table = _rho_table(gender_schema)
    rho = fit_shared_outcome(table, fit_outcome_frequency(table, 1))
    expected = np.mean([rho.fn.value_at(("female",))] * 2
                       + [rho.fn.value_at(("other",))])
    assert transported_mean(rho, table, 0.0) == pytest.approx(expected,
                                                              abs=1e-15)


def test_transported_mean_constant_half(gender_schema):
    rows = [(("female",), 1, 1.0), (("female",), 1, 0.0), (("female",), 0, 0.0),
            (("other",), 1, 0.0), (("other",), 1, 1.0), (("other",), 0, 1.0)]
    table = build_table(gender_schema, rows, [("female",), ("other",)])
    rho = fit_shared_outcome(table, fit_outcome_frequency(table, 1))
    assert np.allclose(rho.fn.values, 0.5)
    assert transported_mean(rho, table, math.log(2.0)) == pytest.approx(
        2 / 3, abs=1e-14)


def test_monotone_in_tilt(gender_schema):
    table = _rho_table(gender_schema)
    rho = fit_shared_outcome(table, fit_outcome_frequency(table, 1))
    values = [transported_mean(rho, table, g)
              for g in np.linspace(-1, 1, 21)]
    assert (np.diff(values) > 0).all()


def test_continuous_equals_binary_on_binary_data(gender_schema):
    table = _rho_table(gender_schema)
    rho = fit_shared_outcome(table, fit_outcome_frequency(table, 1))
    for g in (-0.4, -0.05, 0.0, 0.07, 1.1):
        moments = fit_tilted_moments(table, 1, g)
        assert transported_mean_continuous(moments, table) == pytest.approx(
            transported_mean(rho, table, g), abs=1e-12)


def test_continuous_point_mass_returns_constant():
    schema = CovariateSchema(("b",), {"b": ("only",)}, ("b",),
                             outcome_kind="continuous")
    rows = [(("only",), 1, 3.25), (("only",), 1, 3.25), (("only",), 0, 3.25)]
    table = build_table(schema, rows, [("only",)])
    for g in (-2.0, 0.0, 0.5):
        moments = fit_tilted_moments(table, 1, g)
        assert transported_mean_continuous(moments, table) == pytest.approx(
            3.25, abs=1e-12)


# -- effect measures -----------------------------------------------------------------


def test_effect_measures_null():
    m = effect_measures(0.5, 0.5)
    assert (m.difference, m.risk_ratio, m.odds_ratio) == (0.0, 1.0, 1.0)


def test_effect_measures_hand_values():
    m = effect_measures(0.6, 0.3)
    assert m.difference == pytest.approx(0.3)
    assert m.risk_ratio == pytest.approx(2.0)
    assert m.odds_ratio == pytest.approx(3.5)


def test_effect_measures_undefined_flags():
    m = effect_measures(0.2, 0.0)
    assert m.difference == pytest.approx(0.2)
    assert not m.risk_ratio_defined
    assert not m.odds_ratio_defined
    m = effect_measures(1.0, 0.3)
    assert m.risk_ratio_defined and not m.odds_ratio_defined
