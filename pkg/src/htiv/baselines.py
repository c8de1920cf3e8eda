"""Comparison estimators and the causal decomposition of the period-2 Wald estimand."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    WEAK_FS_THRESHOLD,
    DegenerateEstimateError,
    EffectEstimate,
    PanelDataset,
    ValidationError,
    as_pattern,
    check_span,
)
from .factorial import normal_quantile
from .potential import PotentialTable


def _wald(y, d, z, alpha: float) -> EffectEstimate:
    crit = normal_quantile(alpha)
    y = np.asarray(y, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    treated = np.asarray(z) == 1
    n1, n0 = int(treated.sum()), int((~treated).sum())
    if n1 == 0 or n0 == 0:
        raise DegenerateEstimateError("one assignment group is empty")
    num = y[treated].mean() - y[~treated].mean()
    den = d[treated].mean() - d[~treated].mean()
    if den == 0.0:
        raise DegenerateEstimateError("2SLS first stage is exactly zero")
    point = num / den
    # delta method: Var(a - tau b) from group-level (ddof=0) variances
    resid = y - point * d
    var = (resid[treated].var() / n1 + resid[~treated].var() / n0) / den**2
    half = crit * math.sqrt(var)
    return EffectEstimate(
        point=point,
        fs_point=den,
        var_bound=var,
        ci_lo=point - half,
        ci_hi=point + half,
        alpha=alpha,
        n_units=int(y.shape[0]),
        weak_fs_flag=abs(den) < WEAK_FS_THRESHOLD,
        diagnostics={"reduced_form": num, "n_treated": n1, "n_control": n0},
    )


def tsls_period(panel: PanelDataset, t: int, alpha: float = 0.05) -> EffectEstimate:
    """Period-specific Wald/2SLS estimate using only period-t data."""
    check_span((t, t), panel.n_periods, "period")
    col = t - 1
    return _wald(panel.y[:, col], panel.d[:, col], panel.z[:, col], alpha)


def tsls_stacked(panel: PanelDataset, alpha: float = 0.05) -> EffectEstimate:
    """Wald/2SLS on all unit-periods pooled, ignoring the time structure."""
    return _wald(panel.y.ravel(), panel.d.ravel(), panel.z.ravel(), alpha)


def tsls_multivariate(panel: PanelDataset, d, dtilde, alpha: float = 0.05) -> EffectEstimate:
    """Final-period outcome on (1, D_1, D_2) instrumented by (1, Z_1, Z_2).

    Returns c'beta for c = d - dtilde with an HC0 sandwich variance.
    """
    if panel.n_periods != 2:
        raise ValidationError("multivariate 2SLS is defined for two-period panels")
    d, dtilde = as_pattern(d), as_pattern(dtilde)
    if len(d) != 2 or len(dtilde) != 2:
        raise ValidationError("patterns must cover both periods")
    crit = normal_quantile(alpha)
    n = panel.n_units
    ones = np.ones((n, 1))
    x = np.hstack([ones, panel.d.astype(np.float64)])
    w = np.hstack([ones, panel.z.astype(np.float64)])
    y = panel.y[:, -1]
    wx = w.T @ x
    if np.linalg.matrix_rank(wx) < wx.shape[0]:
        raise DegenerateEstimateError("instrument cross-product matrix is rank deficient")
    beta = np.linalg.solve(wx, w.T @ y)
    resid = y - x @ beta
    meat = (w * resid[:, None] ** 2).T @ w
    bread = np.linalg.inv(wx)
    cov = bread @ meat @ bread.T
    c = np.array([0.0, d[0] - dtilde[0], d[1] - dtilde[1]])
    point = float(c @ beta)
    var = float(c @ cov @ c)
    half = crit * math.sqrt(var)
    fs = min(
        (
            panel.d[panel.z[:, j] == 1, j].mean() - panel.d[panel.z[:, j] == 0, j].mean()
            for j in range(2)
        ),
        key=abs,
    )
    return EffectEstimate(
        point=point,
        fs_point=float(fs),
        var_bound=var,
        ci_lo=point - half,
        ci_hi=point + half,
        alpha=alpha,
        n_units=n,
        weak_fs_flag=abs(fs) < WEAK_FS_THRESHOLD,
        diagnostics={"beta": beta.tolist()},
    )


@dataclass(frozen=True)
class WaldDecomposition:
    """Terms of the period-2 Wald estimand in a two-period panel.

    ``beta_rf == complier_term + carryover_terms[0] - carryover_terms[1]
    + covariance_term`` holds by construction. The first-stage analogue
    splits ``beta_fs`` into ``fs_complier_term + fs_covariance_term``.
    """

    beta_rf: float
    beta_fs: float
    complier_term: float
    carryover_terms: tuple[float, float]
    covariance_term: float
    fs_complier_term: float
    fs_covariance_term: float
    ratio: float
    n_treated: float
    n_control: float


def _fsum(x) -> float:
    return math.fsum(np.asarray(x, dtype=np.float64).tolist())


def _joint_probs(truth: PotentialTable, panel: PanelDataset | None):
    if truth.assign_path_probs is not None:
        return {ab: truth.path_prob(ab) for ab in ((1, 1), (1, 0), (0, 1), (0, 0))}
    if panel is None:
        raise ValidationError("need assignment path probabilities or a panel with propensities")
    probs = panel.prob_matrix()
    p1, p2 = probs[:, 0], probs[:, 1]
    return {
        (1, 1): p1 * p2,
        (1, 0): p1 * (1 - p2),
        (0, 1): (1 - p1) * p2,
        (0, 0): (1 - p1) * (1 - p2),
    }


def wald_decomposition(truth: PotentialTable, panel: PanelDataset | None = None) -> WaldDecomposition:
    """Exact decomposition of the period-2 Wald estimand from potential quantities.

    Group sizes are the expected counts N1 = sum(omega), N0 = N - N1 with
    omega_i = P(Z_{i,2} = 1). Assignment path probabilities come from the
    table when recorded, otherwise from independent per-period propensities.
    """
    if truth.design != "panel" or truth.n_cols < 2:
        raise ValidationError("decomposition needs a panel table with at least two periods")
    if panel is not None and panel.n_units != truth.n_units:
        raise ValidationError("panel and potential table disagree on N")
    n = truth.n_units
    pi = _joint_probs(truth, panel)
    omega = pi[(1, 1)] + pi[(0, 1)]
    n1 = _fsum(omega)
    n0 = n - n1
    if n1 <= 0 or n0 <= 0:
        raise DegenerateEstimateError("expected assignment group size is zero")

    tr = truth.treatments
    d1, d2 = tr[:, 0, :], tr[:, 1, :]
    # a[(a, b)] = Y_2(D_1(a), D_2(b))
    a = {
        (za, zb): truth.outcome_at(np.column_stack([d1[:, za], d2[:, zb]]))
        for za in (0, 1)
        for zb in (0, 1)
    }
    beta_rf = _fsum(pi[(1, 1)] * a[(1, 1)] + pi[(0, 1)] * a[(0, 1)]) / n1 - _fsum(
        pi[(1, 0)] * a[(1, 0)] + pi[(0, 0)] * a[(0, 0)]
    ) / n0
    beta_fs = _fsum(omega * d2[:, 1]) / n1 - _fsum((1 - omega) * d2[:, 0]) / n0

    c2 = truth.compliers((2, 2))
    c1 = truth.compliers((1, 1))
    lag0 = pi[(1, 1)] * (a[(1, 1)] - a[(1, 0)]) + pi[(0, 1)] * (a[(0, 1)] - a[(0, 0)])
    complier_term = _fsum(lag0[c2]) / n1
    carry = a[(1, 0)] - a[(0, 0)]
    carry_treated = _fsum((pi[(1, 1)] * carry)[c1]) / n1
    carry_control = _fsum((pi[(1, 0)] * carry)[c1]) / n0
    scale = n * n / (n1 * n0)
    centred = omega - n1 / n
    covariance_term = scale * _fsum(centred * a[(0, 0)]) / n
    fs_complier = _fsum(omega[c2]) / n1
    fs_cov = scale * _fsum(centred * d2[:, 0]) / n
    if beta_fs == 0.0:
        raise DegenerateEstimateError("Wald first stage is exactly zero")
    return WaldDecomposition(
        beta_rf=beta_rf,
        beta_fs=beta_fs,
        complier_term=complier_term,
        carryover_terms=(carry_treated, carry_control),
        covariance_term=covariance_term,
        fs_complier_term=fs_complier,
        fs_covariance_term=fs_cov,
        ratio=beta_rf / beta_fs,
        n_treated=n1,
        n_control=n0,
    )
