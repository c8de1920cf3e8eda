"""Two-stage Horvitz-Thompson estimators for factorial designs.

Single-factor effects use the Wald-type ratio of HT differences in means.
Joint effects over a block of factors are differences of local response
functions, each a ratio of two multiple differences. Inference uses Bloom
intervals: an estimable upper bound on the reduced-form variance divided by
the squared first stage.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import (
    WEAK_FS_THRESHOLD,
    DegenerateEstimateError,
    EffectEstimate,
    FactorialDataset,
    SequenceSpec,
    ValidationError,
    as_pattern,
    check_span,
    pattern_propensity,
)
from .multidiff import delta_ht


@dataclass(frozen=True)
class ResponseEstimate:
    """Estimated local response function m(d) for one treatment pattern.

    ``fs_point`` keeps the mechanical sign of the multiple difference; its
    absolute value estimates the share of joint compliers.
    """

    pattern: tuple[int, ...]
    rf_point: float
    fs_point: float
    point: float
    rf_var_bound: float
    fs_var_bound: float
    n_units: int

    @property
    def degenerate(self) -> bool:
        return self.fs_point == 0.0

    def as_dict(self) -> dict:
        return {
            "pattern": "".join(map(str, self.pattern)),
            "rf": self.rf_point,
            "fs": self.fs_point,
            "point": self.point,
            "rf_var_bound": self.rf_var_bound,
            "fs_var_bound": self.fs_var_bound,
        }


@dataclass(frozen=True)
class ComplianceRow:
    pattern: tuple[int, ...]
    fs_point: float
    var_bound: float
    ci_lo: float
    ci_hi: float


def normal_quantile(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    return float(stats.norm.ppf(1.0 - alpha / 2.0))


BOUNDS = ("centered", "uncentered")


def check_bound(bound: str) -> str:
    if bound not in BOUNDS:
        raise ValidationError(f"bound must be one of {BOUNDS}, got {bound!r}")
    return bound


def _mean_sq(terms: np.ndarray) -> float:
    """sum(terms**2) / N**2, the scaled plug-in variance bound."""
    n = terms.shape[0]
    return math.fsum((terms * terms).tolist()) / (n * n)


def wald_ratio_estimate(
    y, z, d, probs, alpha: float, label: str = "", bound: str = "centered"
) -> EffectEstimate:
    """HT Wald ratio for a single binary instrument column.

    ``y``, ``z``, ``d`` and ``probs`` (P(Z=1)) are length-N vectors. With
    ``bound="centered"`` the squared-outcome bound is applied to the
    linearised ratio error Y - tau_hat * D; ``"uncentered"`` uses Y itself.
    """
    crit = normal_quantile(alpha)
    check_bound(bound)
    z = np.asarray(z)
    pi = np.where(z == 1, probs, 1.0 - probs)
    rf = delta_ht(y, z, pi)
    fs = delta_ht(np.asarray(d, dtype=np.float64), z, pi)
    if fs == 0.0:
        raise DegenerateEstimateError(f"first stage is exactly zero{label}")
    point = rf / fs
    y = np.asarray(y, dtype=np.float64)
    if bound == "centered":
        rf_var = _mean_sq((y - point * np.asarray(d, dtype=np.float64)) / pi)
    else:
        rf_var = _mean_sq(y / pi)
    var_bound = rf_var / (fs * fs)
    half = crit * math.sqrt(var_bound)
    return EffectEstimate(
        point=point,
        fs_point=fs,
        var_bound=var_bound,
        ci_lo=point - half,
        ci_hi=point + half,
        alpha=alpha,
        n_units=int(z.shape[0]),
        weak_fs_flag=abs(fs) < WEAK_FS_THRESHOLD,
        diagnostics={"rf": rf, "rf_var_bound": rf_var},
    )


def block_response(
    y, z_block, d_block, p_block, pattern, bound: str = "centered"
) -> ResponseEstimate:
    """Local response function for ``pattern`` on one block of columns.

    All array arguments are aligned on units; the block arrays are (N, L) with
    L = len(pattern) and ``p_block`` holding P(Z = 1) for each column.
    ``rf_var_bound`` squares (Y - m_hat) * 1{D = pattern} / pi when centered,
    Y * 1{D = pattern} / pi otherwise.
    """
    pattern = as_pattern(pattern)
    check_bound(bound)
    z_block = np.asarray(z_block)
    d_block = np.asarray(d_block)
    if z_block.ndim != 2 or z_block.shape[1] != len(pattern):
        raise ValidationError(
            f"pattern length {len(pattern)} does not match block width {z_block.shape}"
        )
    y = np.asarray(y, dtype=np.float64)
    hit = (d_block == np.asarray(pattern)).all(axis=1).astype(np.float64)
    pi = pattern_propensity(p_block, z_block)
    rf_vals = y * hit
    rf = delta_ht(rf_vals, z_block, pi)
    fs = delta_ht(hit, z_block, pi)
    point = rf / fs if fs != 0.0 else math.nan
    if bound == "centered" and fs != 0.0:
        rf_var = _mean_sq((y - point) * hit / pi)
    else:
        rf_var = _mean_sq(rf_vals / pi)
    return ResponseEstimate(
        pattern=pattern,
        rf_point=rf,
        fs_point=fs,
        point=point,
        rf_var_bound=rf_var,
        fs_var_bound=_mean_sq(hit / pi),
        n_units=int(y.shape[0]),
    )


def effect_from_responses(
    resp_d: ResponseEstimate, resp_dtilde: ResponseEstimate, alpha: float
) -> EffectEstimate:
    """Difference of two response functions with summed Bloom variance bounds."""
    crit = normal_quantile(alpha)
    for resp in (resp_d, resp_dtilde):
        if resp.degenerate:
            bits = "".join(map(str, resp.pattern))
            raise DegenerateEstimateError(
                f"no joint compliers detected for pattern {bits} (first stage is zero)",
                pattern=resp.pattern,
            )
    point = resp_d.point - resp_dtilde.point
    var_bound = resp_d.rf_var_bound / resp_d.fs_point**2 + (
        resp_dtilde.rf_var_bound / resp_dtilde.fs_point**2
    )
    half = crit * math.sqrt(var_bound)
    # the smaller first stage is the one that governs reliability
    fs = min(resp_d.fs_point, resp_dtilde.fs_point, key=abs)
    return EffectEstimate(
        point=point,
        fs_point=fs,
        var_bound=var_bound,
        ci_lo=point - half,
        ci_hi=point + half,
        alpha=alpha,
        n_units=resp_d.n_units,
        weak_fs_flag=abs(fs) < WEAK_FS_THRESHOLD,
        diagnostics={"response_d": resp_d.as_dict(), "response_dtilde": resp_dtilde.as_dict()},
    )


def _block(dataset: FactorialDataset, span):
    lo, hi = check_span(span, dataset.n_factors, "factor")
    cols = slice(lo - 1, hi)
    return dataset.z[:, cols], dataset.d[:, cols], dataset.prob_matrix()[:, cols]


def estimate_factor_effect(
    dataset: FactorialDataset, k: int, alpha: float = 0.05, bound: str = "centered"
) -> EffectEstimate:
    """Local effect of factor ``k`` (1-based) for its compliers."""
    lo, _ = check_span((k, k), dataset.n_factors, "factor")
    col = lo - 1
    return wald_ratio_estimate(
        dataset.y,
        dataset.z[:, col],
        dataset.d[:, col],
        dataset.prob_matrix()[:, col],
        alpha,
        label=f" for factor {k}",
        bound=bound,
    )


def estimate_response_function(
    dataset: FactorialDataset, span, pattern, bound: str = "centered"
) -> ResponseEstimate:
    z_b, d_b, p_b = _block(dataset, span)
    return block_response(dataset.y, z_b, d_b, p_b, pattern, bound)


def estimate_joint_effect(
    dataset: FactorialDataset, spec: SequenceSpec, alpha: float = 0.05, bound: str = "centered"
) -> EffectEstimate:
    """Local joint effect of ``spec.pattern_d`` versus ``spec.pattern_dtilde``."""
    if spec.pattern_dtilde is None:
        raise ValidationError("joint effects need both pattern_d and pattern_dtilde")
    z_b, d_b, p_b = _block(dataset, spec.span)
    resp_d = block_response(dataset.y, z_b, d_b, p_b, spec.pattern_d, bound)
    resp_dt = block_response(dataset.y, z_b, d_b, p_b, spec.pattern_dtilde, bound)
    return effect_from_responses(resp_d, resp_dt, alpha)


def all_patterns(length: int) -> list[tuple[int, ...]]:
    """Every binary pattern of ``length``, ones first: (1,1), (1,0), (0,1), (0,0)."""
    return [tuple(p) for p in itertools.product((1, 0), repeat=length)]


def compliance_table_from_block(y, z_b, d_b, p_b, alpha: float) -> list[ComplianceRow]:
    crit = normal_quantile(alpha)
    rows = []
    for pattern in all_patterns(z_b.shape[1]):
        resp = block_response(y, z_b, d_b, p_b, pattern)
        half = crit * math.sqrt(resp.fs_var_bound)
        rows.append(
            ComplianceRow(
                pattern=pattern,
                fs_point=resp.fs_point,
                var_bound=resp.fs_var_bound,
                ci_lo=resp.fs_point - half,
                ci_hi=resp.fs_point + half,
            )
        )
    return rows


def estimate_compliance_table(
    dataset: FactorialDataset, span, alpha: float = 0.05
) -> list[ComplianceRow]:
    """Signed first stages for every pattern on the block.

    Compliance rates are the absolute values; the signs alternate with the
    number of zeros in the pattern.
    """
    z_b, d_b, p_b = _block(dataset, span)
    return compliance_table_from_block(dataset.y, z_b, d_b, p_b, alpha)
