"""Report records shared by the two inference pipelines."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class EstimateReport:
    """One estimate with its confidence interval and provenance.

    ``method`` is "or-bootstrap" or "eif-wald"; ``B`` is the bootstrap
    replicate count and ``K`` the fold count, whichever applies. Values are
    raw proportions; display scaling is a front-end concern.
    """

    estimand: str            # "theta0" | "theta1" | "tate"
    gamma0: float
    gamma1: float
    point: float
    lo: float
    hi: float
    level: float             # confidence level 1 - alpha
    method: str
    seed: int
    B: int | None = None
    K: int | None = None
    sigma2: float | None = None
    n_failed: int = 0

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ConfigError("confidence bounds out of order")
        if not 0.5 < self.level < 1:
            raise ConfigError("confidence level must lie in (0.5, 1)")

    def to_json_dict(self) -> dict:
        d = {
            "estimand": self.estimand,
            "gamma0": self.gamma0,
            "gamma1": self.gamma1,
            "point": self.point,
            "lo": self.lo,
            "hi": self.hi,
            "level": self.level,
            "method": self.method,
            "seed": self.seed,
        }
        if self.method == "or-bootstrap":
            d["B"] = self.B
            if self.n_failed:
                d["n_failed"] = self.n_failed
        else:
            d["K"] = self.K
            d["sigma2"] = self.sigma2
        return d

    @property
    def excludes_zero_above(self) -> bool:
        return self.lo > 0

    @property
    def excludes_zero_below(self) -> bool:
        return self.hi < 0
