"""CSV ingestion and export, plus the serialisable run report."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from .core import EffectEstimate, FactorialDataset, PanelDataset, ValidationError

PANEL_COLUMNS = ("unit", "t", "z", "d", "y")


def file_digest(path) -> str:
    """sha256 of the raw file bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _read(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, float_precision="round_trip", skipinitialspace=True)
    except FileNotFoundError as exc:
        raise ValidationError(f"{path}: no such file") from exc
    except pd.errors.EmptyDataError as exc:
        raise ValidationError(f"{path}: file is empty") from exc
    if frame.empty:
        raise ValidationError(f"{path}: file has a header but no data rows")
    frame.columns = [str(c).strip() for c in frame.columns]
    return frame


def _require(frame: pd.DataFrame, cols: Sequence[str], path) -> None:
    missing = [c for c in cols if c not in frame.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")


def _binary_column(frame: pd.DataFrame, col: str, path) -> np.ndarray:
    raw = pd.to_numeric(frame[col], errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isin(raw, (0.0, 1.0))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        # header is line 1
        raise ValidationError(
            f"{path}: line {row + 2}: column {col} must be 0 or 1, got {frame[col].iloc[row]!r}"
        )
    return raw.astype(np.int8)


def _real_column(frame: pd.DataFrame, col: str, path) -> np.ndarray:
    raw = pd.to_numeric(frame[col], errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(raw)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ValidationError(
            f"{path}: line {row + 2}: column {col} must be a finite number, got {frame[col].iloc[row]!r}"
        )
    return raw


def parse_probs(text: str) -> tuple[float, ...]:
    """Parse ``"0.5,0.5"`` into floats."""
    try:
        return tuple(float(p) for p in text.split(","))
    except ValueError as exc:
        raise ValidationError(f"invalid probability list {text!r}") from exc


def _n_factors(frame: pd.DataFrame) -> int:
    k = 0
    while f"z{k + 1}" in frame.columns:
        k += 1
    return k


def load_factorial_csv(path, probs: Sequence[float] | None = None) -> FactorialDataset:
    """Wide-format factorial data: columns z1..zK, d1..dK, y and optional pz1..pzK.

    ``probs`` gives a common P(Z_k = 1) per factor and takes precedence over
    any pz columns.
    """
    frame = _read(path)
    k = _n_factors(frame)
    if k == 0:
        raise ValidationError(f"{path}: missing columns ['z1']")
    z_cols = [f"z{j}" for j in range(1, k + 1)]
    d_cols = [f"d{j}" for j in range(1, k + 1)]
    _require(frame, z_cols + d_cols + ["y"], path)
    z = np.column_stack([_binary_column(frame, c, path) for c in z_cols])
    d = np.column_stack([_binary_column(frame, c, path) for c in d_cols])
    y = _real_column(frame, "y", path)
    if probs is not None:
        assign = np.asarray(probs, dtype=np.float64)
        if assign.shape != (k,):
            raise ValidationError(f"expected {k} assignment probabilities, got {assign.shape[0]}")
    else:
        p_cols = [f"pz{j}" for j in range(1, k + 1)]
        if not all(c in frame.columns for c in p_cols):
            raise ValidationError(f"{path}: supply --probs or columns {p_cols}")
        assign = np.column_stack([_real_column(frame, c, path) for c in p_cols])
    return FactorialDataset(z=z, d=d, y=y, assign_probs=assign)


def load_panel_csv(path, probs: Sequence[float] | None = None) -> PanelDataset:
    """Long-format panel data: one row per (unit, t) with z, d, y and optional pz.

    Periods are numbered from 1. Units may carry any label; rows of the
    resulting arrays follow the sorted unit labels.
    """
    frame = _read(path)
    _require(frame, PANEL_COLUMNS, path)
    t_raw = pd.to_numeric(frame["t"], errors="coerce")
    if t_raw.isna().any() or (t_raw != t_raw.round()).any() or (t_raw < 1).any():
        row = int(np.flatnonzero((t_raw.isna() | (t_raw < 1) | (t_raw != t_raw.round())).to_numpy())[0])
        raise ValidationError(f"{path}: line {row + 2}: t must be a positive integer")
    # validate before reshaping so line numbers refer to the file
    z = _binary_column(frame, "z", path)
    d = _binary_column(frame, "d", path)
    y = _real_column(frame, "y", path)
    long = pd.DataFrame({"unit": frame["unit"], "t": t_raw.astype(np.int64), "z": z, "d": d, "y": y})
    if "pz" in frame.columns and probs is None:
        long["pz"] = _real_column(frame, "pz", path)
    dup = long.duplicated(["unit", "t"])
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        raise ValidationError(f"{path}: line {row + 2}: duplicate (unit, t) row")
    periods = sorted(long["t"].unique())
    n_t = len(periods)
    if periods != list(range(1, n_t + 1)):
        raise ValidationError(f"{path}: periods must be 1..T without gaps, got {periods}")
    counts = long.groupby("unit", sort=False)["t"].count()
    short = counts[counts != n_t]
    if len(short):
        raise ValidationError(
            f"{path}: unbalanced panel, units missing periods: {list(short.index)}"
        )
    long = long.sort_values(["unit", "t"], kind="stable")
    n = long["unit"].nunique()

    def wide(col):
        return long[col].to_numpy().reshape(n, n_t)

    if probs is not None:
        prop = np.asarray(probs, dtype=np.float64)
        if prop.shape == (1,):
            prop = np.repeat(prop, n_t)
        if prop.shape != (n_t,):
            raise ValidationError(f"expected {n_t} period probabilities, got {prop.shape[0]}")
    elif "pz" in long.columns:
        prop = wide("pz")
    else:
        raise ValidationError(f"{path}: supply --probs or a pz column")
    return PanelDataset(z=wide("z"), d=wide("d"), y=wide("y"), propensity=prop)


def write_factorial_csv(dataset: FactorialDataset, path) -> None:
    """Write z1..zK, d1..dK, y, pz1..pzK with round-trip float formatting."""
    k = dataset.n_factors
    cols: dict[str, Any] = {}
    for j in range(k):
        cols[f"z{j + 1}"] = dataset.z[:, j]
    for j in range(k):
        cols[f"d{j + 1}"] = dataset.d[:, j]
    cols["y"] = dataset.y
    probs = dataset.prob_matrix()
    for j in range(k):
        cols[f"pz{j + 1}"] = probs[:, j]
    pd.DataFrame(cols).to_csv(path, index=False)


def write_panel_csv(dataset: PanelDataset, path) -> None:
    n, n_t = dataset.z.shape
    frame = pd.DataFrame(
        {
            "unit": np.repeat(np.arange(1, n + 1), n_t),
            "t": np.tile(np.arange(1, n_t + 1), n),
            "z": dataset.z.ravel(),
            "d": dataset.d.ravel(),
            "y": dataset.y.ravel(),
            "pz": dataset.prob_matrix().ravel(),
        }
    )
    frame.to_csv(path, index=False)


# -- reports ------------------------------------------------------------------

REPORT_FIELDS = ("point", "fs", "var_bound", "ci_lo", "ci_hi", "alpha", "weak_fs")


def estimate_row(label: str, est: EffectEstimate) -> dict:
    row = {
        "label": label,
        "point": est.point,
        "fs": est.fs_point,
        "var_bound": est.var_bound,
        "ci_lo": est.ci_lo,
        "ci_hi": est.ci_hi,
        "alpha": est.alpha,
        "weak_fs": bool(est.weak_fs_flag),
    }
    return row


@dataclass
class RunReport:
    command: list[str]
    input_digest: str | None
    estimates: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    def __post_init__(self) -> None:
        for row in self.estimates:
            lo, hi = row.get("ci_lo"), row.get("ci_hi")
            if lo is not None and hi is not None and not (lo <= hi or math.isnan(lo) or math.isnan(hi)):
                raise ValidationError(f"row {row.get('label')!r} has ci_lo > ci_hi")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(
            command=list(data["command"]),
            input_digest=data.get("input_digest"),
            estimates=[dict(r) for r in data.get("estimates", [])],
            warnings=list(data.get("warnings", [])),
            wall_time=float(data.get("wall_time", 0.0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        if not self.estimates:
            return ""
        cols = ["label", *REPORT_FIELDS]
        extra = sorted({k for r in self.estimates for k in r} - set(cols))
        return pd.DataFrame(self.estimates, columns=cols + extra).to_csv(index=False)

    def format_table(self, digits: int = 3) -> str:
        lines = []
        width = max([len(r["label"]) for r in self.estimates] + [8])
        head = f"{'target':<{width}}  {'point':>9}  {'fs':>8}  {'ci_lo':>9}  {'ci_hi':>9}  weak_fs"
        lines.append(head)
        for r in self.estimates:
            lines.append(
                f"{r['label']:<{width}}  {r['point']:>9.{digits}f}  {r['fs']:>8.{digits}f}"
                f"  {r['ci_lo']:>9.{digits}f}  {r['ci_hi']:>9.{digits}f}  {'yes' if r['weak_fs'] else 'no'}"
            )
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")
