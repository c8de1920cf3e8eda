"""Full potential-outcome and potential-treatment tables for simulated populations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import DegenerateEstimateError, SequenceSpec, ValidationError, check_span

COMPLIER, ALWAYS_TAKER, NEVER_TAKER = "C", "AT", "NT"


def path_code(paths: np.ndarray) -> np.ndarray:
    """Read each row of a binary (N, L) array as a big-endian integer."""
    paths = np.asarray(paths, dtype=np.int64)
    weights = 1 << np.arange(paths.shape[1] - 1, -1, -1, dtype=np.int64)
    return paths @ weights


@dataclass(frozen=True, eq=False)
class PotentialTable:
    """Every potential quantity of a finite population.

    ``outcomes`` maps a treatment path to a length-N vector. For a factorial
    design the keys have length K and give Y(d_1..d_K). For a panel a key of
    length t gives the period-t outcome Y_t(d_1..d_t).

    ``treatments[i, j, z]`` is D_{i,j}(z) for factor or period j (0-based).
    ``assign_path_probs`` optionally maps a full assignment path to each
    unit's probability of receiving it.
    """

    design: str
    outcomes: Mapping[tuple[int, ...], np.ndarray]
    treatments: np.ndarray
    assign_path_probs: Mapping[tuple[int, ...], np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.design not in ("factorial", "panel"):
            raise ValidationError(f"unknown design {self.design!r}")
        tr = np.asarray(self.treatments, dtype=np.int8)
        if tr.ndim != 3 or tr.shape[2] != 2:
            raise ValidationError("treatments must have shape (N, K, 2)")
        if (tr[:, :, 1] < tr[:, :, 0]).any():
            raise ValidationError("potential treatments violate monotonicity D(1) >= D(0)")
        tr.flags.writeable = False
        object.__setattr__(self, "treatments", tr)

    @property
    def n_units(self) -> int:
        return self.treatments.shape[0]

    @property
    def n_cols(self) -> int:
        return self.treatments.shape[1]

    def compliance_type(self, j: int) -> np.ndarray:
        """Compliance type labels for 1-based factor or period ``j``."""
        d0 = self.treatments[:, j - 1, 0]
        d1 = self.treatments[:, j - 1, 1]
        return np.where(d1 > d0, COMPLIER, np.where(d0 == 1, ALWAYS_TAKER, NEVER_TAKER))

    def compliers(self, span: tuple[int, int]) -> np.ndarray:
        """Units that comply with every assignment in the block."""
        lo, hi = check_span(span, self.n_cols)
        block = self.treatments[:, lo - 1 : hi, :]
        return ((block[:, :, 1] == 1) & (block[:, :, 0] == 0)).all(axis=1)

    def treatment_under(self, z: np.ndarray) -> np.ndarray:
        """Realised treatments D_{i,j}(z_{i,j}) for an (N, K) assignment matrix."""
        z = np.asarray(z, dtype=np.int64)
        rows = np.arange(self.n_units)[:, None]
        cols = np.arange(self.n_cols)[None, :]
        return self.treatments[rows, cols, z]

    def outcome_stack(self, length: int) -> np.ndarray:
        """(2**length, N) array with row ``path_code(path)`` holding Y(path)."""
        n_paths = 1 << length
        stack = np.empty((n_paths, self.n_units))
        for code in range(n_paths):
            path = tuple((code >> (length - 1 - b)) & 1 for b in range(length))
            try:
                stack[code] = self.outcomes[path]
            except KeyError as exc:
                raise ValidationError(f"potential outcome for path {path} is missing") from exc
        return stack

    def outcome_at(self, paths: np.ndarray) -> np.ndarray:
        """Y_i(paths[i]) for an (N, L) matrix of per-unit treatment paths."""
        paths = np.asarray(paths)
        stack = self.outcome_stack(paths.shape[1])
        return stack[path_code(paths), np.arange(self.n_units)]

    def path_prob(self, prefix: tuple[int, ...]) -> np.ndarray:
        """P(Z_{1:len(prefix)} = prefix) per unit, marginalising later columns."""
        if self.assign_path_probs is None:
            raise ValidationError("assignment path probabilities are not recorded")
        total = np.zeros(self.n_units)
        for path, prob in self.assign_path_probs.items():
            if path[: len(prefix)] == tuple(prefix):
                total = total + prob
        return total


def local_response_truth(
    table: PotentialTable, spec: SequenceSpec, d_obs: np.ndarray, pattern=None
) -> tuple[float, np.ndarray]:
    """Complier-average potential outcome and the complier mask for one pattern."""
    pattern = spec.pattern_d if pattern is None else pattern
    lo, hi = check_span(spec.span, table.n_cols)
    mask = table.compliers((lo, hi))
    if not mask.any():
        raise DegenerateEstimateError(f"empty complier set for block {lo}:{hi}")
    length = table.n_cols if table.design == "factorial" else hi
    paths = np.array(d_obs, dtype=np.int8)[:, :length].copy()
    paths[:, lo - 1 : hi] = np.asarray(pattern, dtype=np.int8)
    values = table.outcome_at(paths)
    return float(values[mask].mean()), mask


def oracle_truth(table: PotentialTable, spec: SequenceSpec, d_obs: np.ndarray) -> float:
    """Finite-population local effect (or response, if no ``pattern_dtilde``).

    Treatments outside the block are held at their observed values ``d_obs``.
    For panels the outcome is the one at period ``spec.hi_index``.
    """
    m_d, _ = local_response_truth(table, spec, d_obs, spec.pattern_d)
    if spec.pattern_dtilde is None:
        return m_d
    m_dt, _ = local_response_truth(table, spec, d_obs, spec.pattern_dtilde)
    return m_d - m_dt


def stacked_lag0_truth(table: PotentialTable, d_obs: np.ndarray) -> float:
    """Lag-0 effects pooled over periods, weighted by complier counts."""
    total, count = 0.0, 0
    for t in range(1, table.n_cols + 1):
        spec = SequenceSpec(t, 0, (1,), (0,))
        mask = table.compliers((t, t))
        if not mask.any():
            continue
        effect = oracle_truth(table, spec, d_obs)
        total += effect * mask.sum()
        count += int(mask.sum())
    if count == 0:
        raise DegenerateEstimateError("no compliers in any period")
    return total / count
