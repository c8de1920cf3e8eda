"""Horvitz-Thompson multiple differences over a block of binary assignments.

Expanding the recursive (p+1)-th difference gives one term per assignment
pattern with coefficient (-1)^(number of zeros). Each unit is observed under
exactly one pattern, so the estimator is a single signed, inverse-propensity
weighted pass over units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ValidationError, as_pattern


def sign_factor(pattern) -> int:
    """(-1) raised to the number of zeros in ``pattern``."""
    pattern = as_pattern(pattern)
    if not pattern:
        raise ValidationError("pattern must be non-empty")
    return -1 if pattern.count(0) % 2 else 1


def pattern_signs(patterns: np.ndarray) -> np.ndarray:
    """Vectorised :func:`sign_factor` over the rows of an (N, L) array."""
    patterns = np.asarray(patterns)
    if patterns.ndim != 2 or patterns.shape[1] == 0:
        raise ValidationError("observed patterns must be an (N, L) array with L >= 1")
    zeros = (patterns == 0).sum(axis=1)
    return np.where(zeros % 2 == 1, -1.0, 1.0)


@dataclass(frozen=True)
class HtContribution:
    unit: int
    observed_pattern: tuple[int, ...]
    weight: float
    signed_value: float


def _check_inputs(values, observed_patterns, propensities):
    values = np.asarray(values, dtype=np.float64)
    patterns = np.asarray(observed_patterns)
    props = np.asarray(propensities, dtype=np.float64)
    if patterns.ndim == 1:
        patterns = patterns[:, None]
    n = values.shape[0]
    if values.ndim != 1 or patterns.shape[0] != n or props.shape != (n,):
        raise ValidationError(
            f"length mismatch: values {values.shape}, patterns {patterns.shape}, "
            f"propensities {props.shape}"
        )
    if n == 0:
        raise ValidationError("no units")
    if not ((props > 0.0) & (props < 1.0)).all():
        raise ValidationError("propensities must lie strictly inside (0, 1)")
    return values, patterns, props


def signed_terms(values, observed_patterns, propensities) -> np.ndarray:
    """Per-unit terms s(Z_i) * value_i / pi_i(Z_i), before averaging."""
    values, patterns, props = _check_inputs(values, observed_patterns, propensities)
    return pattern_signs(patterns) * values / props


def delta_ht(values, observed_patterns, propensities) -> float:
    """(1/N) sum_i s(Z_i) value_i / pi_i(Z_i).

    ``values`` already carries any indicator on the treatment block. The sum is
    computed with ``math.fsum`` (exactly rounded) because the alternating signs
    cancel heavily for large N.
    """
    terms = signed_terms(values, observed_patterns, propensities)
    return math.fsum(terms.tolist()) / terms.shape[0]


def ht_contributions(values, observed_patterns, propensities) -> list[HtContribution]:
    values, patterns, props = _check_inputs(values, observed_patterns, propensities)
    signs = pattern_signs(patterns)
    return [
        HtContribution(
            unit=i,
            observed_pattern=tuple(int(b) for b in patterns[i]),
            weight=1.0 / props[i],
            signed_value=float(signs[i] * values[i] / props[i]),
        )
        for i in range(values.shape[0])
    ]
