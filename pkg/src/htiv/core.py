"""Domain types and adapted propensity scores.

Factor and period indices are 1-based throughout the public API, so that
``span=(1, 2)`` means factors one and two.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

PROB_FLOOR = 1e-6
PROB_CEIL = 1.0 - 1e-6

WEAK_FS_THRESHOLD = 0.10


class ValidationError(ValueError):
    """Invalid input data, indices or patterns."""


class DegenerateEstimateError(ArithmeticError):
    """The estimate cannot be formed, typically a zero first stage."""

    def __init__(self, message: str, pattern: tuple[int, ...] | None = None):
        super().__init__(message)
        self.pattern = pattern


def _binary_matrix(name: str, values: Any, ndim: int = 2) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size and not np.isin(arr, (0, 1)).all():
        bad = np.argwhere(~np.isin(arr, (0, 1)))[0]
        raise ValidationError(f"{name} has a non-binary entry at {tuple(int(b) for b in bad)}")
    out = arr.astype(np.int8)
    out.flags.writeable = False
    return out


def _prob_array(name: str, values: Any, n_rows: int, n_cols: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape not in ((n_cols,), (n_rows, n_cols)):
        raise ValidationError(
            f"{name} must have shape ({n_cols},) or ({n_rows}, {n_cols}), got {arr.shape}"
        )
    if not np.isfinite(arr).all() or (arr < PROB_FLOOR).any() or (arr > PROB_CEIL).any():
        raise ValidationError(
            f"{name} entries must lie in [{PROB_FLOOR}, {PROB_CEIL}] (common support)"
        )
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FactorialDataset:
    """N units crossed with K binary factors, one scalar outcome per unit.

    ``assign_probs`` is either a length-K vector of P(Z_k = 1) shared by all
    units or an N x K matrix of unit-specific probabilities.
    """

    z: np.ndarray
    d: np.ndarray
    y: np.ndarray
    assign_probs: np.ndarray

    def __post_init__(self) -> None:
        z = _binary_matrix("z", self.z)
        d = _binary_matrix("d", self.d)
        if z.shape != d.shape:
            raise ValidationError(f"z has shape {z.shape} but d has shape {d.shape}")
        n, k = z.shape
        if n == 0 or k == 0:
            raise ValidationError("dataset must have at least one unit and one factor")
        y = np.asarray(self.y, dtype=np.float64)
        if y.shape != (n,):
            raise ValidationError(f"y must have shape ({n},), got {y.shape}")
        if not np.isfinite(y).all():
            raise ValidationError("y must be finite")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "y", _frozen(y.copy()))
        object.__setattr__(self, "assign_probs", _prob_array("assign_probs", self.assign_probs, n, k))

    @property
    def n_units(self) -> int:
        return self.z.shape[0]

    @property
    def n_factors(self) -> int:
        return self.z.shape[1]

    def prob_matrix(self) -> np.ndarray:
        """P(Z_{i,k} = 1) as an N x K matrix."""
        return np.broadcast_to(self.assign_probs, self.z.shape)


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced panel of N units over T periods.

    ``propensity`` holds P(Z_{i,t} = 1 | own history). A length-T vector means
    the same probability for every unit in a period.
    """

    z: np.ndarray
    d: np.ndarray
    y: np.ndarray
    propensity: np.ndarray

    def __post_init__(self) -> None:
        z = _binary_matrix("z", self.z)
        d = _binary_matrix("d", self.d)
        if z.shape != d.shape:
            raise ValidationError(f"z has shape {z.shape} but d has shape {d.shape}")
        n, t = z.shape
        if n == 0 or t == 0:
            raise ValidationError("panel must have at least one unit and one period")
        y = np.asarray(self.y, dtype=np.float64)
        if y.shape != (n, t):
            raise ValidationError(f"y must have shape ({n}, {t}), got {y.shape}")
        if not np.isfinite(y).all():
            raise ValidationError("y must be finite")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "y", _frozen(y.copy()))
        object.__setattr__(self, "propensity", _prob_array("propensity", self.propensity, n, t))

    @property
    def n_units(self) -> int:
        return self.z.shape[0]

    @property
    def n_periods(self) -> int:
        return self.z.shape[1]

    def prob_matrix(self) -> np.ndarray:
        return np.broadcast_to(self.propensity, self.z.shape)


def as_pattern(bits: Sequence[int] | str) -> tuple[int, ...]:
    """Normalise ``"10"``, ``[1, 0]`` or ``(1, 0)`` to a tuple of ints."""
    if isinstance(bits, str):
        bits = [int(c) for c in bits.strip()]
    pattern = tuple(int(b) for b in bits)
    if any(b not in (0, 1) for b in pattern):
        raise ValidationError(f"pattern {bits!r} is not binary")
    return pattern


@dataclass(frozen=True)
class SequenceSpec:
    """Target block ``hi_index - lag .. hi_index`` and the patterns compared there."""

    hi_index: int
    lag: int
    pattern_d: tuple[int, ...]
    pattern_dtilde: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.lag < 0:
            raise ValidationError("lag must be non-negative")
        if self.hi_index - self.lag < 1:
            raise ValidationError(
                f"block {self.hi_index - self.lag}..{self.hi_index} starts before index 1"
            )
        object.__setattr__(self, "pattern_d", as_pattern(self.pattern_d))
        if len(self.pattern_d) != self.lag + 1:
            raise ValidationError(f"pattern_d must have length {self.lag + 1}")
        if self.pattern_dtilde is not None:
            object.__setattr__(self, "pattern_dtilde", as_pattern(self.pattern_dtilde))
            if len(self.pattern_dtilde) != self.lag + 1:
                raise ValidationError(f"pattern_dtilde must have length {self.lag + 1}")
            if self.pattern_d == self.pattern_dtilde:
                raise ValidationError("pattern_d and pattern_dtilde must differ")

    @property
    def lo_index(self) -> int:
        return self.hi_index - self.lag

    @property
    def span(self) -> tuple[int, int]:
        return (self.lo_index, self.hi_index)

    @classmethod
    def from_span(cls, span: tuple[int, int], d, dtilde=None) -> "SequenceSpec":
        lo, hi = span
        return cls(hi_index=hi, lag=hi - lo, pattern_d=d, pattern_dtilde=dtilde)


@dataclass(frozen=True)
class EffectEstimate:
    point: float
    fs_point: float
    var_bound: float
    ci_lo: float
    ci_hi: float
    alpha: float
    n_units: int
    weak_fs_flag: bool
    diagnostics: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @property
    def ci_length(self) -> float:
        return self.ci_hi - self.ci_lo

    def covers(self, value: float) -> bool:
        return self.ci_lo <= value <= self.ci_hi


def check_span(span: tuple[int, int], n_cols: int, what: str = "factor") -> tuple[int, int]:
    lo, hi = (int(s) for s in span)
    if not 1 <= lo <= hi <= n_cols:
        raise ValidationError(f"{what} range {lo}:{hi} is outside 1..{n_cols}")
    return lo, hi


def pattern_propensity(probs: np.ndarray, patterns: np.ndarray) -> np.ndarray:
    """Row-wise product of P(Z_j = pattern_j) over the columns of a block.

    ``probs`` and ``patterns`` are both (N, L); independent Bernoulli draws
    within the block are assumed, conditional on the supplied probabilities.
    """
    probs = np.asarray(probs, dtype=np.float64)
    patterns = np.asarray(patterns)
    return np.prod(np.where(patterns == 1, probs, 1.0 - probs), axis=1)


def _single_unit_propensity(prob_row: np.ndarray, span, pattern, n_cols: int, what: str) -> float:
    lo, hi = check_span(span, n_cols, what)
    pattern = as_pattern(pattern)
    if len(pattern) != hi - lo + 1:
        raise ValidationError(f"pattern length {len(pattern)} does not match range {lo}:{hi}")
    probs = prob_row[lo - 1 : hi]
    return float(pattern_propensity(probs[None, :], np.array(pattern)[None, :])[0])


def adapted_propensity_factorial(
    dataset: FactorialDataset, unit: int, span: tuple[int, int], pattern
) -> float:
    """P(Z_{unit, lo:hi} = pattern) under independent factor assignments.

    ``unit`` is a 0-based row index.
    """
    if not 0 <= unit < dataset.n_units:
        raise ValidationError(f"unit {unit} is outside 0..{dataset.n_units - 1}")
    return _single_unit_propensity(
        dataset.prob_matrix()[unit], span, pattern, dataset.n_factors, "factor"
    )


def adapted_propensity_panel(
    dataset: PanelDataset, unit: int, span: tuple[int, int], pattern
) -> float:
    """P(Z_{unit, lo:hi} = pattern | history), multiplied along the observed history."""
    if not 0 <= unit < dataset.n_units:
        raise ValidationError(f"unit {unit} is outside 0..{dataset.n_units - 1}")
    return _single_unit_propensity(
        dataset.prob_matrix()[unit], span, pattern, dataset.n_periods, "period"
    )
