"""Sufficient-statistic views of a table and the vectorized bootstrap core.

With purely categorical covariates every estimator in this package depends
on the data only through contingency counts: per-stratum arm counts and
outcome sums on the source side, per-level counts on the target side.
Resampling rows with replacement therefore reduces to a multinomial draw
over the distinct observed rows, which lets one bootstrap call evaluate
all B replicates as array operations instead of materializing B tables.
The draw is distributionally identical to row-level resampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ObservationTable, encode_strata
from .errors import PositivityError
from .nuisance import _dummy_design
from .tilt import tilt_probability


@dataclass(frozen=True)
class GroupedBinary:
    """Contingency view of a binary-outcome table.

    Source strata are indexed over the full covariates; ``v_of_x`` maps each
    source stratum to its shared-covariate level in ``v_ids`` (which also
    carries target-only levels).
    """

    x_ids: np.ndarray      # (S,) distinct source strata, sorted
    v_of_x: np.ndarray     # (S,) index into v_ids
    n_arm: np.ndarray      # (S, 2) source counts by arm
    ysum_arm: np.ndarray   # (S, 2) outcome sums by arm
    v_ids: np.ndarray      # (V,) distinct shared levels, sorted
    m_v: np.ndarray        # (V,) target counts
    n_s: int
    n_t: int
    design: np.ndarray | None = None   # (S, p) dummy design for the WLS path

    @property
    def n_strata(self) -> int:
        return self.x_ids.shape[0]

    @property
    def n_levels(self) -> int:
        return self.v_ids.shape[0]

    @classmethod
    def from_table(cls, table: ObservationTable,
                   with_design: bool = False) -> "GroupedBinary":
        xcols = table.schema.source_covariates
        vcols = table.schema.shared_covariates
        src = table.source_rows
        x_all = encode_strata(table, xcols)
        v_all = encode_strata(table, vcols)
        x_ids, inv = np.unique(x_all[src], return_inverse=True)
        m = x_ids.shape[0]
        a = table.treatment[src].astype(np.int64)
        y = table.outcome[src]
        flat = inv * 2 + a
        n_arm = np.bincount(flat, minlength=2 * m).reshape(m, 2).astype(float)
        ysum = np.bincount(flat, weights=y, minlength=2 * m).reshape(m, 2)
        # shared level of each source stratum: first source row observed in it
        first_row = src[np.unique(inv, return_index=True)[1]]
        v_of_stratum = v_all[first_row]
        v_ids = np.unique(np.concatenate([v_of_stratum, v_all[table.target_rows]]))
        v_of_x = np.searchsorted(v_ids, v_of_stratum)
        m_v = np.bincount(np.searchsorted(v_ids, v_all[table.target_rows]),
                          minlength=v_ids.shape[0]).astype(float)
        design = (_dummy_design(table.schema, xcols, x_ids, saturated=False)
                  if with_design else None)
        return cls(x_ids, v_of_x, n_arm, ysum, v_ids, m_v,
                   int(table.n_s), int(table.n_t), design)


@dataclass(frozen=True)
class OrReplicates:
    """Replicate estimates from the grouped bootstrap, one column per
    sensitivity pair (replicates are shared across pairs)."""

    theta1: np.ndarray   # (B, G)
    theta0: np.ndarray   # (B, G)
    tate: np.ndarray     # (B, G)
    failed: np.ndarray   # (B,) replicate-level nuisance failures


def _theta_from_counts(g: GroupedBinary, n_arm, ysum_arm, m_v, gammas,
                       mu_method: str, saturated: bool):
    """Outcome-regression estimates from (batches of) contingency counts.

    ``n_arm``/``ysum_arm`` have shape (..., S, 2) and ``m_v`` (..., V); the
    returned arrays have shape (..., G) for G sensitivity pairs, plus a
    (...,) boolean failure mask (overlap or positivity broken, or a singular
    WLS system, inside a replicate).
    """
    tot = n_arm.sum(axis=-1)
    present = tot > 0
    fail = (present & (n_arm == 0).any(axis=-1)).any(axis=-1)

    if mu_method == "frequency":
        with np.errstate(invalid="ignore", divide="ignore"):
            mu = np.where(n_arm > 0, ysum_arm / np.where(n_arm > 0, n_arm, 1.0), 0.0)
    elif mu_method == "wls-ipw":
        mu = _wls_mu_batch(g, n_arm, ysum_arm, saturated, fail)
    else:
        raise ValueError(f"unknown outcome-fit method {mu_method!r}")

    # project onto shared levels: sums of tot * mu within each level
    V = g.n_levels
    onehot = np.zeros((g.n_strata, V))
    onehot[np.arange(g.n_strata), g.v_of_x] = 1.0
    sv = tot @ onehot
    with np.errstate(invalid="ignore", divide="ignore"):
        rho1 = ((tot * mu[..., 1]) @ onehot) / np.where(sv > 0, sv, 1.0)
        rho0 = ((tot * mu[..., 0]) @ onehot) / np.where(sv > 0, sv, 1.0)
    fail = fail | ((m_v > 0) & (sv == 0)).any(axis=-1)

    n_t = m_v.sum(axis=-1)
    th1 = np.stack([(m_v * tilt_probability(rho1, g1)).sum(axis=-1) / n_t
                    for _, g1 in gammas], axis=-1)
    th0 = np.stack([(m_v * tilt_probability(rho0, g0)).sum(axis=-1) / n_t
                    for g0, _ in gammas], axis=-1)
    return th1, th0, fail


def _wls_mu_batch(g: GroupedBinary, n_arm, ysum_arm, saturated, fail):
    """Per-replicate inverse-propensity WLS outcome fits on the dummy design."""
    design = g.design if not saturated else np.eye(g.n_strata)
    if design is None:
        raise ValueError("grouped table was built without a design matrix")
    batch_shape = n_arm.shape[:-2]
    mu = np.zeros(n_arm.shape[:-1])
    flat_n = n_arm.reshape(-1, g.n_strata, 2)
    flat_y = ysum_arm.reshape(-1, g.n_strata, 2)
    flat_mu = mu.reshape(-1, g.n_strata, 2)
    flat_fail = fail.reshape(-1)
    for b in range(flat_n.shape[0]):
        if flat_fail[b]:
            continue
        tot = flat_n[b].sum(axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            pi = np.where(tot > 0, flat_n[b, :, 1] / np.where(tot > 0, tot, 1.0), 0.5)
        for arm in (0, 1):
            w = 1.0 / np.clip(pi if arm == 1 else 1.0 - pi, 1e-12, None)
            rw = flat_n[b, :, arm] * w
            gram = design.T @ (design * rw[:, None])
            rhs = design.T @ (w * flat_y[b, :, arm])
            sv = np.linalg.svd(gram, compute_uv=False)
            if sv[0] == 0.0 or sv[-1] / sv[0] < 1e-12:
                flat_fail[b] = True
                break
            pred = design @ np.linalg.solve(gram, rhs)
            flat_mu[b, :, arm] = np.clip(pred, 0.0, 1.0)
    return mu.reshape(*batch_shape, g.n_strata, 2)


def or_point_grouped(g: GroupedBinary, gammas, mu_method="frequency",
                     saturated=False):
    """(theta1, theta0) per sensitivity pair on the observed counts."""
    th1, th0, fail = _theta_from_counts(
        g, g.n_arm[None], g.ysum_arm[None], g.m_v[None], gammas,
        mu_method, saturated)
    if bool(fail[0]):
        raise PositivityError("observed counts cannot support the estimator "
                              "(empty arm cell or uncovered target level)")
    return th1[0], th0[0]


def or_bootstrap_grouped(g: GroupedBinary, gammas, n_boot: int,
                         rng: np.random.Generator, mu_method="frequency",
                         saturated=False) -> OrReplicates:
    """B multinomial resamples of source and target counts, evaluated at
    every sensitivity pair. Source and target are resampled independently;
    all nuisances are re-fit from the resampled counts inside each
    replicate."""
    cells = np.stack([g.ysum_arm, g.n_arm - g.ysum_arm], axis=-1)  # (S,2,2): y=1, y=0
    p_src = cells.reshape(-1) / g.n_s
    boot_src = rng.multinomial(g.n_s, p_src, size=n_boot).reshape(
        n_boot, g.n_strata, 2, 2)
    p_tgt = g.m_v / g.n_t
    boot_tgt = rng.multinomial(g.n_t, p_tgt, size=n_boot).astype(float)

    ysum = boot_src[..., 0].astype(float)
    n_arm = ysum + boot_src[..., 1]
    th1, th0, fail = _theta_from_counts(g, n_arm, ysum, boot_tgt, gammas,
                                        mu_method, saturated)
    return OrReplicates(th1, th0, th1 - th0, fail)


# ---------------------------------------------------------------------------
# general (possibly continuous) outcomes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupedContinuous:
    """Distinct (stratum, arm, outcome value) cells of the source sample."""

    cell_stratum: np.ndarray  # (C,) index into x_ids
    cell_arm: np.ndarray      # (C,)
    cell_y: np.ndarray        # (C,)
    cell_count: np.ndarray    # (C,)
    x_ids: np.ndarray
    v_of_x: np.ndarray
    v_ids: np.ndarray
    m_v: np.ndarray
    n_s: int
    n_t: int

    @classmethod
    def from_table(cls, table: ObservationTable) -> "GroupedContinuous":
        xcols = table.schema.source_covariates
        vcols = table.schema.shared_covariates
        src = table.source_rows
        x_all = encode_strata(table, xcols)
        v_all = encode_strata(table, vcols)
        x_ids, inv = np.unique(x_all[src], return_inverse=True)
        trip = np.stack([inv, table.treatment[src].astype(np.int64)], axis=1)
        y = table.outcome[src]
        order = np.lexsort((y, trip[:, 1], trip[:, 0]))
        ts, ta, ty = trip[order, 0], trip[order, 1], y[order]
        new = np.empty(ts.shape[0], dtype=bool)
        new[0] = True
        new[1:] = (np.diff(ts) != 0) | (np.diff(ta) != 0) | (np.diff(ty) != 0)
        starts = np.flatnonzero(new)
        counts = np.diff(np.append(starts, ts.shape[0])).astype(float)
        first_row = src[np.unique(inv, return_index=True)[1]]
        v_of_stratum = v_all[first_row]
        v_ids = np.unique(np.concatenate([v_of_stratum, v_all[table.target_rows]]))
        v_of_x = np.searchsorted(v_ids, v_of_stratum)
        m_v = np.bincount(np.searchsorted(v_ids, v_all[table.target_rows]),
                          minlength=v_ids.shape[0]).astype(float)
        return cls(ts[starts], ta[starts], ty[starts], counts,
                   x_ids, v_of_x, v_ids, m_v, int(table.n_s), int(table.n_t))

    def theta_for_counts(self, cell_count, m_v, gamma: float, arm: int):
        """Outcome-regression estimate via tilted moments for one arm."""
        S = self.x_ids.shape[0]
        in_arm = self.cell_arm == arm
        ey = np.exp(gamma * self.cell_y[in_arm])
        idx = self.cell_stratum[in_arm]
        cnt = cell_count[in_arm]
        n_xa = np.bincount(idx, weights=cnt, minlength=S)
        num = np.bincount(idx, weights=cnt * ey * self.cell_y[in_arm], minlength=S)
        den = np.bincount(idx, weights=cnt * ey, minlength=S)
        tot = np.bincount(self.cell_stratum, weights=cell_count, minlength=S)
        present = tot > 0
        if (present & (n_xa == 0)).any():
            return None  # empty arm cell in a present stratum
        with np.errstate(invalid="ignore", divide="ignore"):
            x_num = np.where(n_xa > 0, num / np.where(n_xa > 0, n_xa, 1.0), 0.0)
            x_den = np.where(n_xa > 0, den / np.where(n_xa > 0, n_xa, 1.0), 1.0)
        V = self.v_ids.shape[0]
        sv = np.bincount(self.v_of_x, weights=tot, minlength=V)
        if ((m_v > 0) & (sv == 0)).any():
            return None
        with np.errstate(invalid="ignore", divide="ignore"):
            v_num = np.bincount(self.v_of_x, weights=tot * x_num, minlength=V) \
                / np.where(sv > 0, sv, 1.0)
            v_den = np.bincount(self.v_of_x, weights=tot * x_den, minlength=V) \
                / np.where(sv > 0, sv, 1.0)
        keep = m_v > 0
        return float(np.sum(m_v[keep] * (v_num[keep] / v_den[keep])) / m_v.sum())


def or_bootstrap_continuous(g: GroupedContinuous, gammas, n_boot: int,
                            rng: np.random.Generator) -> OrReplicates:
    """Per-replicate multinomial resampling over the distinct source cells;
    slower than the binary path but exact for arbitrary outcome support."""
    p_src = g.cell_count / g.n_s
    p_tgt = g.m_v / g.n_t
    G = len(gammas)
    th1 = np.zeros((n_boot, G))
    th0 = np.zeros((n_boot, G))
    failed = np.zeros(n_boot, dtype=bool)
    for b in range(n_boot):
        c_src = rng.multinomial(g.n_s, p_src).astype(float)
        c_tgt = rng.multinomial(g.n_t, p_tgt).astype(float)
        for j, (g0, g1) in enumerate(gammas):
            t1 = g.theta_for_counts(c_src, c_tgt, g1, 1)
            t0 = g.theta_for_counts(c_src, c_tgt, g0, 0)
            if t1 is None or t0 is None:
                failed[b] = True
                break
            th1[b, j], th0[b, j] = t1, t0
    return OrReplicates(th1, th0, th1 - th0, failed)
