import numpy as np
import pytest

from htiv.baselines import tsls_multivariate, tsls_period, tsls_stacked, wald_decomposition
from htiv.core import DegenerateEstimateError, PanelDataset, ValidationError
from htiv.potential import PotentialTable
from htiv.simulation import assign_panel, draw_panel_population

from oracles import assignments, observe, prob_of, random_table


def _no_period1_compliers(table):
    tr = table.treatments.copy()
    tr[:, 0, 1] = tr[:, 0, 0]
    return PotentialTable("panel", table.outcomes, tr)


def test_tsls_perfect_compliance_equal_groups():
    rng = np.random.default_rng(0)
    z = np.repeat([[1, 1], [0, 0]], 50, axis=0)
    y = rng.normal(size=(100, 2))
    panel = PanelDataset(z=z, d=z, y=y, propensity=[0.5, 0.5])
    est = tsls_period(panel, 2)
    assert est.point == pytest.approx(y[:50, 1].mean() - y[50:, 1].mean(), abs=1e-14)
    assert est.fs_point == 1.0
    assert est.ci_lo <= est.point <= est.ci_hi


def test_tsls_needs_both_groups():
    z = np.ones((4, 2), dtype=int)
    panel = PanelDataset(z=z, d=z, y=np.ones((4, 2)), propensity=[0.5, 0.5])
    with pytest.raises(DegenerateEstimateError):
        tsls_period(panel, 1)


def test_tsls_stacked_runs(toy_panel):
    est = tsls_stacked(toy_panel)
    assert np.isfinite(est.point)


def test_mv2sls_recovers_linear_model_exactly():
    rng = np.random.default_rng(1)
    n = 200
    z = rng.integers(0, 2, size=(n, 2))
    y2 = 0.3 + 0.5 * z[:, 0] + 1.0 * z[:, 1]
    panel = PanelDataset(z=z, d=z, y=np.column_stack([np.zeros(n), y2]), propensity=[0.5, 0.5])
    for d, dt, truth in (("11", "00", 1.5), ("10", "00", 0.5), ("01", "00", 1.0)):
        assert tsls_multivariate(panel, d, dt).point == pytest.approx(truth, abs=1e-10)


def test_mv2sls_validation(toy_panel):
    with pytest.raises(ValidationError):
        tsls_multivariate(toy_panel, "1", "0")
    z = np.ones((6, 2), dtype=int)
    flat = PanelDataset(z=z, d=z, y=np.ones((6, 2)), propensity=[0.5, 0.5])
    with pytest.raises(DegenerateEstimateError):
        tsls_multivariate(flat, "11", "00")
    three = PanelDataset(
        z=np.zeros((3, 3), dtype=int), d=np.zeros((3, 3), dtype=int), y=np.zeros((3, 3)), propensity=[0.5] * 3
    )
    with pytest.raises(ValidationError):
        tsls_multivariate(three, "11", "00")


@pytest.mark.parametrize("seed", range(10))
def test_decomposition_identity(seed):
    rng = np.random.default_rng(seed)
    table = draw_panel_population(rng, 200, adaptive=0.2, delta_feedback=0.4)
    dec = wald_decomposition(table)
    rebuilt = dec.complier_term + dec.carryover_terms[0] - dec.carryover_terms[1] + dec.covariance_term
    assert rebuilt == pytest.approx(dec.beta_rf, abs=1e-12)
    assert dec.fs_complier_term + dec.fs_covariance_term == pytest.approx(dec.beta_fs, abs=1e-12)


def test_decomposition_reduces_without_period1_compliers():
    table = _no_period1_compliers(random_table(np.random.default_rng(3), 40, 2, "panel"))
    panel = observe(table, np.zeros((40, 2), dtype=np.int8), np.array([0.6, 0.6]))
    dec = wald_decomposition(table, panel)
    assert dec.carryover_terms == (0.0, 0.0)
    assert dec.covariance_term == pytest.approx(0.0, abs=1e-12)
    c2 = table.compliers((2, 2))
    d1 = table.treatments[:, 0, 0]
    lag0 = (
        table.outcome_at(np.column_stack([d1, np.ones(40, dtype=int)]))
        - table.outcome_at(np.column_stack([d1, np.zeros(40, dtype=int)]))
    )
    assert dec.ratio == pytest.approx(lag0[c2].mean(), abs=1e-12)


def test_constant_omega_zero_covariance():
    table = random_table(np.random.default_rng(8), 30, 2, "panel")
    panel = observe(table, np.zeros((30, 2), dtype=np.int8), np.array([0.3, 0.7]))
    assert wald_decomposition(table, panel).covariance_term == pytest.approx(0.0, abs=1e-12)


def test_decomposition_matches_enumeration():
    # beta is the exact expectation of the fixed-denominator Wald numerator/denominator
    rng = np.random.default_rng(11)
    n = 5
    table = random_table(rng, n, 2, "panel")
    p = np.array([0.35, 0.6])
    panel = observe(table, np.zeros((n, 2), dtype=np.int8), p)
    dec = wald_decomposition(table, panel)
    pm = np.broadcast_to(p, (n, 2))
    rf = fs = 0.0
    for z in assignments(n, 2):
        w = prob_of(z, pm)
        data = observe(table, z, p)
        z2 = data.z[:, 1]
        rf += w * (np.sum(z2 * data.y[:, 1]) / dec.n_treated - np.sum((1 - z2) * data.y[:, 1]) / dec.n_control)
        fs += w * (np.sum(z2 * data.d[:, 1]) / dec.n_treated - np.sum((1 - z2) * data.d[:, 1]) / dec.n_control)
    assert dec.beta_rf == pytest.approx(rf, abs=1e-12)
    assert dec.beta_fs == pytest.approx(fs, abs=1e-12)


def test_decomposition_ratio_tracks_tsls_mean():
    # history-dependent assignment makes the contamination terms non-zero
    table = draw_panel_population(21, 1000, adaptive=0.3)
    dec = wald_decomposition(table)
    rng = np.random.default_rng(22)
    points = np.array([tsls_period(assign_panel(table, rng, adaptive=0.3), 2).point for _ in range(400)])
    se = points.std(ddof=1) / np.sqrt(points.size)
    assert abs(points.mean() - dec.ratio) < 3 * se
    assert dec.ratio > 1.2  # complier lag-0 effect is 1


def test_decomposition_needs_probabilities():
    table = random_table(np.random.default_rng(0), 4, 2, "panel")
    with pytest.raises(ValidationError):
        wald_decomposition(table)
