"""Exponential-tilting maps, sensitivity grids, and effect measures.

The sensitivity parameter is the log odds ratio of counterfactual
outcomes between the target and source populations given the shared
covariates; at 0 the two conditional laws coincide and plain
transportation applies. For a binary outcome the tilt shifts a
conditional success probability r to exp(g)r / (exp(g)r + 1 - r).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .data import ObservationTable
from .errors import ConfigError, EstimationError, PositivityError
from .nuisance import SharedOutcomeModel, TiltedMomentModel


@dataclass(frozen=True)
class SensitivityPair:
    """Log-odds shifts for the control and treated counterfactuals."""

    gamma0: float
    gamma1: float

    def __post_init__(self):
        if not (math.isfinite(self.gamma0) and math.isfinite(self.gamma1)):
            raise ConfigError("sensitivity parameters must be finite")

    @property
    def transportable(self) -> bool:
        return self.gamma0 == 0.0 and self.gamma1 == 0.0


@dataclass(frozen=True)
class GammaGrid:
    """Inclusive arithmetic progressions over both sensitivity parameters.

    Each axis is (lo, hi, step); the grid must contain the transportability
    point (lo <= 0 <= hi). Iteration is row-major: the control-arm value is
    the row index, the treated-arm value the column index.
    """

    gamma0: tuple[float, float, float]
    gamma1: tuple[float, float, float]

    def __post_init__(self):
        for lo, hi, step in (self.gamma0, self.gamma1):
            if step <= 0:
                raise ConfigError("grid step must be positive")
            if not lo <= 0 <= hi:
                raise ConfigError("grid must contain gamma = 0")
            if hi < lo:
                raise ConfigError("grid upper bound below lower bound")
            n = (hi - lo) / step
            if abs(n - round(n)) > 1e-9:
                raise ConfigError("grid bounds must be an integer number of "
                                  "steps apart")

    @staticmethod
    def _axis(lo: float, hi: float, step: float) -> np.ndarray:
        count = int(round((hi - lo) / step)) + 1
        return lo + step * np.arange(count)

    def gamma0_values(self) -> np.ndarray:
        return self._axis(*self.gamma0)

    def gamma1_values(self) -> np.ndarray:
        return self._axis(*self.gamma1)

    def points(self) -> Iterator[SensitivityPair]:
        for g0 in self.gamma0_values():
            for g1 in self.gamma1_values():
                yield SensitivityPair(float(g0), float(g1))

    def shape(self) -> tuple[int, int]:
        return self.gamma0_values().shape[0], self.gamma1_values().shape[0]

    def to_json_dict(self) -> dict:
        return {"gamma0": list(self.gamma0), "gamma1": list(self.gamma1)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "GammaGrid":
        return cls(tuple(d["gamma0"]), tuple(d["gamma1"]))


def default_grid() -> GammaGrid:
    """Both axes from -0.05 to 0.05 in steps of 0.002."""
    return GammaGrid((-0.05, 0.05, 0.002), (-0.05, 0.05, 0.002))


def tilt_probability(rho, gamma: float):
    """Success probability after an exponential tilt by log-odds ``gamma``.

    0 and 1 are fixed points for every gamma; gamma = 0 is the identity.
    Evaluated as rho / (rho + exp(-gamma)(1-rho)) for positive gamma so
    large tilts cannot overflow.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if gamma >= 0:
        out = rho / (rho + math.exp(-gamma) * (1.0 - rho))
    else:
        e = math.exp(gamma)
        out = e * rho / (e * rho + (1.0 - rho))
    return out if out.ndim else float(out)


def transported_mean(shared_model: SharedOutcomeModel, table: ObservationTable,
                     gamma: float) -> float:
    """Plug-in mean of the tilted shared-covariate regression over target rows."""
    try:
        rho = shared_model.evaluate(table, table.target_rows)
    except EstimationError as exc:
        raise PositivityError(str(exc)) from None
    return float(np.mean(tilt_probability(rho, gamma)))


def transported_mean_continuous(moments: TiltedMomentModel,
                                table: ObservationTable) -> float:
    """Target mean of the tilted-moment ratio for a general outcome."""
    try:
        num = moments.v_num.evaluate(table, table.target_rows)
        den = moments.v_den.evaluate(table, table.target_rows)
    except EstimationError as exc:
        raise PositivityError(str(exc)) from None
    if (den <= 0).any():
        raise EstimationError("non-positive tilted-moment denominator")
    return float(np.mean(num / den))


@dataclass(frozen=True)
class EffectMeasures:
    """Difference, risk ratio, and odds ratio of two counterfactual means.

    Ratios are ``None`` (with the matching flag set) when their denominators
    vanish; they are never silent NaNs.
    """

    difference: float
    risk_ratio: float | None
    odds_ratio: float | None

    @property
    def risk_ratio_defined(self) -> bool:
        return self.risk_ratio is not None

    @property
    def odds_ratio_defined(self) -> bool:
        return self.odds_ratio is not None


def effect_measures(theta1: float, theta0: float) -> EffectMeasures:
    rr = theta1 / theta0 if theta0 != 0 else None
    if theta0 in (0.0, 1.0) or theta1 == 1.0:
        orat = None
    else:
        orat = (theta1 / (1.0 - theta1)) / (theta0 / (1.0 - theta0))
    return EffectMeasures(theta1 - theta0, rr, orat)
