"""Dynamic local effects in panel experiments with imperfect compliance.

The arithmetic is shared with the factorial estimators: a period plays the
role of a factor and the outcome is the one recorded at the target period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    WEAK_FS_THRESHOLD,
    DegenerateEstimateError,
    EffectEstimate,
    PanelDataset,
    SequenceSpec,
    ValidationError,
    check_span,
)
from .factorial import (
    ResponseEstimate,
    check_bound,
    block_response,
    effect_from_responses,
    normal_quantile,
    wald_ratio_estimate,
)
from .multidiff import signed_terms


@dataclass(frozen=True)
class DynamicEffectEstimate(EffectEstimate):
    t: int = 0
    lag: int = 0
    pattern_d: tuple[int, ...] = (1,)
    pattern_dtilde: tuple[int, ...] = (0,)


def _promote(est: EffectEstimate, t: int, lag: int, d, dtilde) -> DynamicEffectEstimate:
    fields = {k: getattr(est, k) for k in EffectEstimate.__dataclass_fields__}
    return DynamicEffectEstimate(**fields, t=t, lag=lag, pattern_d=tuple(d), pattern_dtilde=tuple(dtilde))


def _check_period(panel: PanelDataset, t: int) -> int:
    check_span((t, t), panel.n_periods, "period")
    return t - 1


def estimate_lag0_effect(
    panel: PanelDataset, t: int, alpha: float = 0.05, bound: str = "centered"
) -> DynamicEffectEstimate:
    """Contemporaneous effect at period ``t`` for period-t compliers."""
    col = _check_period(panel, t)
    est = wald_ratio_estimate(
        panel.y[:, col],
        panel.z[:, col],
        panel.d[:, col],
        panel.prob_matrix()[:, col],
        alpha,
        label=f" at period {t}",
        bound=bound,
    )
    return _promote(est, t, 0, (1,), (0,))


def estimate_lagp_response(
    panel: PanelDataset, t: int, p: int, pattern, bound: str = "centered"
) -> ResponseEstimate:
    """Response of the period-``t`` outcome to treatment path ``pattern`` over t-p..t."""
    lo, hi = check_span((t - p, t), panel.n_periods, "period")
    cols = slice(lo - 1, hi)
    return block_response(
        panel.y[:, t - 1],
        panel.z[:, cols],
        panel.d[:, cols],
        panel.prob_matrix()[:, cols],
        pattern,
        bound,
    )


def estimate_lagp_effect(
    panel: PanelDataset, spec: SequenceSpec, alpha: float = 0.05, bound: str = "centered"
) -> DynamicEffectEstimate:
    if spec.pattern_dtilde is None:
        raise ValidationError("lag-p effects need both pattern_d and pattern_dtilde")
    resp_d = estimate_lagp_response(panel, spec.hi_index, spec.lag, spec.pattern_d, bound)
    resp_dt = estimate_lagp_response(panel, spec.hi_index, spec.lag, spec.pattern_dtilde, bound)
    est = effect_from_responses(resp_d, resp_dt, alpha)
    return _promote(est, spec.hi_index, spec.lag, spec.pattern_d, spec.pattern_dtilde)


def stack_lag0_effects(
    panel: PanelDataset, alpha: float = 0.05, weighting: str = "pooled", bound: str = "centered"
) -> EffectEstimate:
    """Lag-0 effects combined over all periods.

    ``weighting="pooled"`` forms a single ratio over all N*T unit-periods, which
    weights periods by their estimated complier shares. ``weighting="mean"``
    averages the per-period point estimates with equal weights. Unit-level
    errors form a martingale difference sequence over time, so per-period
    variance bounds add without cross terms.
    """
    crit = normal_quantile(alpha)
    check_bound(bound)
    n, n_t = panel.z.shape
    if weighting == "mean":
        per_period = [estimate_lag0_effect(panel, t, alpha, bound) for t in range(1, n_t + 1)]
        point = math.fsum(e.point for e in per_period) / n_t
        var_bound = math.fsum(e.var_bound for e in per_period) / n_t**2
        fs = min((e.fs_point for e in per_period), key=abs)
    elif weighting == "pooled":
        probs = panel.prob_matrix()
        pi = np.where(panel.z == 1, probs, 1.0 - probs).ravel()
        z = panel.z.ravel()
        y = panel.y.ravel()
        rf = math.fsum(signed_terms(y, z, pi).tolist()) / (n * n_t)
        fs = math.fsum(signed_terms(panel.d.ravel().astype(np.float64), z, pi).tolist()) / (n * n_t)
        if fs == 0.0:
            raise DegenerateEstimateError("pooled first stage is exactly zero")
        point = rf / fs
        g = (y - point * panel.d.ravel()) / pi if bound == "centered" else y / pi
        var_bound = math.fsum((g * g).tolist()) / (n * n_t) ** 2 / (fs * fs)
    else:
        raise ValidationError(f"unknown weighting {weighting!r}")
    half = crit * math.sqrt(var_bound)
    return EffectEstimate(
        point=point,
        fs_point=fs,
        var_bound=var_bound,
        ci_lo=point - half,
        ci_hi=point + half,
        alpha=alpha,
        n_units=n,
        weak_fs_flag=abs(fs) < WEAK_FS_THRESHOLD,
        diagnostics={"weighting": weighting, "n_periods": n_t},
    )
