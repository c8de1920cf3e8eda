"""Data-generating processes, oracle truths and the Monte Carlo harness.

Every replicate draws from its own generator keyed by ``(seed, replicate)``,
so results do not depend on how replicates are split across workers.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from typing import Callable, Sequence

import numpy as np

from . import baselines, factorial, panel as panel_est
from .core import (
    DegenerateEstimateError,
    EffectEstimate,
    FactorialDataset,
    PanelDataset,
    SequenceSpec,
    ValidationError,
)
from .factorial import all_patterns, check_bound
from .potential import PotentialTable, oracle_truth, stacked_lag0_truth

WORKERS_ENV = "HTIV_WORKERS"

FACTORIAL_BETAS = (0.0, 0.5, 1.0, 0.25)  # intercept, d1, d2, d1*d2
FACTORIAL_UPTAKE = ((0.2, 0.9), (0.2, 0.8))  # (P(D_k=1 | z=0), P(D_k=1 | z=1))
PANEL_UPTAKE = (0.25, 0.75)
PANEL_PROB = 0.6


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _monotone_treatments(u: np.ndarray, uptake) -> np.ndarray:
    """D(z) = 1{u < delta(z)} from one uniform per unit and column, so D(1) >= D(0)."""
    n, k = u.shape
    out = np.empty((n, k, 2), dtype=np.int8)
    for j in range(k):
        lo, hi = uptake[j]
        out[:, j, 0] = u[:, j] < lo
        out[:, j, 1] = u[:, j] < hi
    return out


# -- factorial design ---------------------------------------------------------


def draw_factorial_population(
    seed, n_units: int, betas=FACTORIAL_BETAS, uptake=FACTORIAL_UPTAKE, probs=(0.5, 0.5)
) -> PotentialTable:
    """Two-factor population with a linear outcome model and normal noise."""
    if n_units < 1:
        raise ValidationError("n_units must be at least 1")
    rng = _rng(seed)
    b0, b1, b2, b12 = betas
    eps = rng.standard_normal(n_units)
    u = rng.random((n_units, 2))
    outcomes = {
        (d1, d2): b0 + b1 * d1 + b2 * d2 + b12 * d1 * d2 + eps
        for d1 in (0, 1)
        for d2 in (0, 1)
    }
    p = np.asarray(probs, dtype=np.float64)
    path_probs = {
        path: np.full(n_units, float(np.prod(np.where(np.array(path) == 1, p, 1 - p))))
        for path in all_patterns(2)
    }
    return PotentialTable("factorial", outcomes, _monotone_treatments(u, uptake), path_probs)


def assign_factorial(table: PotentialTable, seed, probs=(0.5, 0.5)) -> FactorialDataset:
    rng = _rng(seed)
    p = np.asarray(probs, dtype=np.float64)
    z = (rng.random((table.n_units, table.n_cols)) < p).astype(np.int8)
    d = table.treatment_under(z)
    y = table.outcome_at(d)
    return FactorialDataset(z=z, d=d, y=y, assign_probs=p)


def gen_factorial_dgp(seed, n_units: int, **knobs) -> tuple[FactorialDataset, PotentialTable]:
    """Population plus one Bernoulli(0.5) x Bernoulli(0.5) assignment."""
    rng = _rng(seed)
    probs = knobs.pop("probs", (0.5, 0.5))
    table = draw_factorial_population(rng, n_units, probs=probs, **knobs)
    return assign_factorial(table, rng, probs), table


# -- panel design -------------------------------------------------------------


def _panel_betas(t: int) -> np.ndarray:
    """Coefficients on D_1..D_t for the period-t outcome: (..., 0, 0.5, 1)."""
    beta = np.zeros(t)
    beta[t - 1] = 1.0
    if t >= 2:
        beta[t - 2] = 0.5
    return beta


def _conditional_prob(p: float, adaptive: float, prev_d: np.ndarray | None) -> np.ndarray | float:
    if prev_d is None or adaptive == 0.0:
        return p
    return np.where(prev_d == 1, p + adaptive, p - adaptive)


def draw_panel_population(
    seed,
    n_units: int,
    n_periods: int = 2,
    delta_feedback: float = 0.0,
    prob: float = PANEL_PROB,
    adaptive: float = 0.0,
    path_noise: bool = False,
) -> PotentialTable:
    """Panel population with lag-one carryover and optional outcome feedback.

    Y_t(d_1..d_t) = delta_feedback * Y_{t-1}(d_1..d_{t-1}) + beta_t'd + U_t, with
    one U_t per unit-period; ``path_noise`` draws it afresh for every treatment
    path, which makes effects heterogeneous across units.
    ``adaptive`` shifts P(Z_t = 1) up (down) after a treated (untreated)
    previous period; zero gives the sequential Bernoulli(``prob``) design.
    """
    if n_units < 1 or n_periods < 1:
        raise ValidationError("n_units and n_periods must be at least 1")
    if not (0.0 < prob - abs(adaptive) and prob + abs(adaptive) < 1.0):
        raise ValidationError("assignment probabilities must stay inside (0, 1)")
    rng = _rng(seed)
    u = rng.random((n_units, n_periods))
    treatments = _monotone_treatments(u, [PANEL_UPTAKE] * n_periods)
    outcomes: dict[tuple[int, ...], np.ndarray] = {}
    for t in range(1, n_periods + 1):
        beta = _panel_betas(t)
        shared = None if path_noise else rng.standard_normal(n_units)
        for path in all_patterns(t)[::-1]:
            noise = rng.standard_normal(n_units) if path_noise else shared
            value = float(np.dot(beta, path)) + noise
            if t > 1 and delta_feedback != 0.0:
                value = value + delta_feedback * outcomes[path[:-1]]
            outcomes[path] = value
    path_probs = {}
    for path in all_patterns(n_periods):
        prob_path = np.ones(n_units)
        for t, zt in enumerate(path):
            prev_d = None if t == 0 else treatments[:, t - 1, path[t - 1]]
            pt = _conditional_prob(prob, adaptive, prev_d)
            prob_path = prob_path * (pt if zt == 1 else 1.0 - pt)
        path_probs[path] = prob_path
    return PotentialTable("panel", outcomes, treatments, path_probs)


def assign_panel(
    table: PotentialTable, seed, prob: float = PANEL_PROB, adaptive: float = 0.0
) -> PanelDataset:
    """Sequentially randomised assignment; records each unit's conditional propensity."""
    rng = _rng(seed)
    n, n_t = table.n_units, table.n_cols
    z = np.zeros((n, n_t), dtype=np.int8)
    props = np.empty((n, n_t))
    for t in range(n_t):
        prev_d = None if t == 0 else table.treatments[np.arange(n), t - 1, z[:, t - 1]]
        props[:, t] = _conditional_prob(prob, adaptive, prev_d)
        z[:, t] = rng.random(n) < props[:, t]
    d = table.treatment_under(z)
    y = np.column_stack([table.outcome_at(d[:, : t + 1]) for t in range(n_t)])
    propensity = props if adaptive != 0.0 else np.full(n_t, prob)
    return PanelDataset(z=z, d=d, y=y, propensity=propensity)


def gen_panel_dgp(
    seed,
    n_units: int,
    n_periods: int = 2,
    delta_feedback: float = 0.0,
    prob: float = PANEL_PROB,
    adaptive: float = 0.0,
    path_noise: bool = False,
) -> tuple[PanelDataset, PotentialTable]:
    rng = _rng(seed)
    table = draw_panel_population(
        rng, n_units, n_periods, delta_feedback, prob, adaptive, path_noise
    )
    return assign_panel(table, rng, prob, adaptive), table


# -- targets ------------------------------------------------------------------


@dataclass(frozen=True)
class Target:
    name: str
    estimate: Callable[[object, float, str], EffectEstimate]
    truth: Callable[[PotentialTable, object], float]


def _spec_truth(spec: SequenceSpec, table: PotentialTable, data) -> float:
    return oracle_truth(table, spec, data.d)


def _stack_truth(table: PotentialTable, data) -> float:
    return stacked_lag0_truth(table, data.d)


def _joint(spec, data, alpha, bound):
    return factorial.estimate_joint_effect(data, spec, alpha, bound)


def _factor(k, data, alpha, bound):
    return factorial.estimate_factor_effect(data, k, alpha, bound)


def _lag0(t, data, alpha, bound):
    return panel_est.estimate_lag0_effect(data, t, alpha, bound)


def _lagp(spec, data, alpha, bound):
    return panel_est.estimate_lagp_effect(data, spec, alpha, bound)


def _tsls(t, data, alpha, bound):
    return baselines.tsls_period(data, t, alpha)


def _mv2sls(spec, data, alpha, bound):
    return baselines.tsls_multivariate(data, spec.pattern_d, spec.pattern_dtilde, alpha)


def _ht_stack(data, alpha, bound):
    return panel_est.stack_lag0_effects(data, alpha, bound=bound)


def _tsls_stack(data, alpha, bound):
    return baselines.tsls_stacked(data, alpha)


def _factorial_targets() -> list[Target]:
    out = []
    for d in ((1, 1), (1, 0), (0, 1)):
        spec = SequenceSpec(2, 1, d, (0, 0))
        name = f"joint_{d[0]}{d[1]}_00"
        out.append(Target(name, partial(_joint, spec), partial(_spec_truth, spec)))
    for k in (1, 2):
        spec = SequenceSpec(k, 0, (1,), (0,))
        out.append(Target(f"factor_{k}", partial(_factor, k), partial(_spec_truth, spec)))
    return out


def _panel_targets(n_periods: int) -> list[Target]:
    out = []
    for t in range(1, n_periods + 1):
        spec = SequenceSpec(t, 0, (1,), (0,))
        out.append(Target(f"ht_lag0_t{t}", partial(_lag0, t), partial(_spec_truth, spec)))
        out.append(Target(f"tsls_t{t}", partial(_tsls, t), partial(_spec_truth, spec)))
    out.append(Target("ht_stack", _ht_stack, _stack_truth))
    out.append(Target("tsls_stack", _tsls_stack, _stack_truth))
    if n_periods == 2:
        for d in ((1, 1), (0, 1), (1, 0)):
            spec = SequenceSpec(2, 1, d, (0, 0))
            tag = f"{d[0]}{d[1]}_00"
            out.append(Target(f"ht_lag1_{tag}", partial(_lagp, spec), partial(_spec_truth, spec)))
            out.append(Target(f"mv2sls_{tag}", partial(_mv2sls, spec), partial(_spec_truth, spec)))
    return out


def available_targets(profile: str, n_periods: int = 2) -> list[Target]:
    if profile == "factorial":
        return _factorial_targets()
    if profile == "panel":
        return _panel_targets(n_periods)
    raise ValidationError(f"unknown profile {profile!r}")


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class SimulationConfig:
    profile: str = "factorial"
    n_units: int = 1000
    n_periods: int = 2
    n_reps: int = 1000
    seed: int = 20240101
    alpha: float = 0.05
    estimators: tuple[str, ...] = ("all",)
    delta_feedback: float = 0.0
    adaptive_assignment: float = 0.0
    bound: str = "centered"
    path_noise: bool = False

    def __post_init__(self) -> None:
        if self.profile not in ("factorial", "panel"):
            raise ValidationError(f"unknown profile {self.profile!r}")
        if self.n_reps < 1 or self.n_units < 1:
            raise ValidationError("n_reps and n_units must be at least 1")
        object.__setattr__(self, "estimators", tuple(self.estimators))
        check_bound(self.bound)
        self.targets()  # validates estimator names

    def targets(self) -> list[Target]:
        pool = available_targets(self.profile, self.n_periods)
        if self.estimators == ("all",):
            return pool
        by_name = {t.name: t for t in pool}
        unknown = [e for e in self.estimators if e not in by_name]
        if unknown:
            raise ValidationError(f"unknown estimators {unknown}; choose from {sorted(by_name)}")
        return [by_name[e] for e in self.estimators]

    @classmethod
    def from_file(cls, path) -> "SimulationConfig":
        """Read the ``[simulate]`` section of an INI-style config file."""
        parser = configparser.ConfigParser()
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        if not parser.has_section("simulate"):
            raise ValidationError(f"{path}: missing [simulate] section")
        sec = parser["simulate"]
        known = {f.name for f in fields(cls)}
        extra = set(sec) - known
        if extra:
            raise ValidationError(f"{path}: unknown keys {sorted(extra)}")
        kwargs: dict = {}
        try:
            for f in fields(cls):
                if f.name not in sec:
                    continue
                raw = sec[f.name]
                if f.name == "estimators":
                    kwargs[f.name] = tuple(s.strip() for s in raw.split(",") if s.strip())
                elif f.name in ("profile", "bound"):
                    kwargs[f.name] = raw.strip()
                elif f.name == "path_noise":
                    kwargs[f.name] = sec.getboolean(f.name)
                elif f.name in ("alpha", "delta_feedback", "adaptive_assignment"):
                    kwargs[f.name] = sec.getfloat(f.name)
                else:
                    kwargs[f.name] = sec.getint(f.name)
        except ValueError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        return cls(**kwargs)


# -- harness ------------------------------------------------------------------


@dataclass(frozen=True)
class McMetrics:
    av_bias: float
    med_bias: float
    rmse: float
    cover: float
    cil: float
    n_reps: int
    n_failed: int = 0
    mean_var_bound: float = math.nan
    error_var: float = math.nan

    @property
    def failure_rate(self) -> float:
        total = self.n_reps + self.n_failed
        return self.n_failed / total if total else 0.0


N_COLS = 5  # point, ci_lo, ci_hi, var_bound, truth


def draw_replicate(config: SimulationConfig, rep: int):
    """Population and assignment for replicate ``rep``, keyed by (seed, rep)."""
    rng = np.random.default_rng([config.seed, rep])
    if config.profile == "factorial":
        return gen_factorial_dgp(rng, config.n_units)
    return gen_panel_dgp(
        rng,
        config.n_units,
        config.n_periods,
        delta_feedback=config.delta_feedback,
        adaptive=config.adaptive_assignment,
        path_noise=config.path_noise,
    )


def run_replicate(config: SimulationConfig, rep: int) -> np.ndarray:
    """One population draw and assignment; NaN rows mark failed estimators."""
    data, table = draw_replicate(config, rep)
    targets = config.targets()
    out = np.full((len(targets), N_COLS), np.nan)
    for j, target in enumerate(targets):
        try:
            est = target.estimate(data, config.alpha, config.bound)
            truth = target.truth(table, data)
        except (DegenerateEstimateError, np.linalg.LinAlgError):
            continue
        out[j] = (est.point, est.ci_lo, est.ci_hi, est.var_bound, truth)
    return out


def _run_chunk(config: SimulationConfig, reps: Sequence[int]) -> np.ndarray:
    return np.stack([run_replicate(config, r) for r in reps])


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def simulate_raw(config: SimulationConfig, workers: int | None = None) -> np.ndarray:
    """(n_reps, n_targets, 5) array of per-replicate results in replicate order."""
    workers = resolve_workers(workers)
    reps = list(range(config.n_reps))
    if workers == 1:
        return _run_chunk(config, reps)
    n_chunks = min(len(reps), workers * 4)
    chunks = [reps[i::n_chunks] for i in range(n_chunks)]
    out = np.empty((config.n_reps, len(config.targets()), N_COLS))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for chunk, res in zip(chunks, pool.map(partial(_run_chunk, config), chunks)):
            out[chunk] = res
    return out


def summarize(raw: np.ndarray) -> McMetrics:
    """Metrics for one target from its (n_reps, 5) block."""
    ok = ~np.isnan(raw).any(axis=1)
    good = raw[ok]
    n_ok, n_failed = int(ok.sum()), int((~ok).sum())
    if n_ok == 0:
        nan = math.nan
        return McMetrics(nan, nan, nan, nan, nan, 0, n_failed)
    point, lo, hi, var, truth = good.T
    err = point - truth
    return McMetrics(
        av_bias=float(np.mean(err)),
        med_bias=float(np.median(err)),
        rmse=float(np.sqrt(np.mean(err * err))),
        cover=float(np.mean((lo <= truth) & (truth <= hi))),
        cil=float(np.mean(hi - lo)),
        n_reps=n_ok,
        n_failed=n_failed,
        mean_var_bound=float(np.mean(var)),
        error_var=float(np.var(err, ddof=1)) if n_ok > 1 else 0.0,
    )


def monte_carlo(config: SimulationConfig, workers: int | None = None) -> dict[str, McMetrics]:
    """Run the configured study and summarise each target, in target order."""
    raw = simulate_raw(config, workers)
    return {t.name: summarize(raw[:, j, :]) for j, t in enumerate(config.targets())}


# -- output -------------------------------------------------------------------

TABLE_ROWS = (
    ("Av. Bias", "av_bias"),
    ("Med. Bias", "med_bias"),
    ("RMSE", "rmse"),
    ("Cover", "cover"),
    ("CIL", "cil"),
)


def format_table(metrics: dict[str, McMetrics], digits: int = 3) -> str:
    """Metrics as rows and targets as columns."""
    names = list(metrics)
    width = max([12] + [len(n) + 2 for n in names])
    lines = ["".ljust(11) + "".join(n.rjust(width) for n in names)]
    for label, attr in TABLE_ROWS:
        cells = "".join(f"{getattr(metrics[n], attr):.{digits}f}".rjust(width) for n in names)
        lines.append(label.ljust(11) + cells)
    reps = "".join(str(metrics[n].n_reps).rjust(width) for n in names)
    lines.append("Reps".ljust(11) + reps)
    return "\n".join(lines)


def metrics_to_json(metrics: dict[str, McMetrics], config: SimulationConfig) -> str:
    payload = {
        "config": {**asdict(config), "estimators": list(config.estimators)},
        "targets": {name: asdict(m) for name, m in metrics.items()},
    }
    return json.dumps(payload, indent=2, sort_keys=False)


def metrics_to_csv(metrics: dict[str, McMetrics]) -> str:
    buf = io.StringIO()
    cols = [f.name for f in fields(McMetrics)]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["target", *cols])
    for name, m in metrics.items():
        writer.writerow([name, *(repr(getattr(m, c)) for c in cols)])
    return buf.getvalue()
