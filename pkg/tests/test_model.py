import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from zscmsnb.model import (IMPOSSIBLE, InitialStateDist, MeanModelSpec, ModelSpec, NeighborGraph, PanelData,
                           ValidationError, area_transition_matrix, emission_logprob, log_nb_pmf, log_rising, logistic)
from zscmsnb.simulation import DEFAULT_TRUTH, TRUTH_NAMES

from conftest import make_model, path_graph


def test_nb_zero_closed_form():
    # (r / (r + lam)) ** r = (1.5 / 3.5) ** 1.5 = 0.280566
    assert log_nb_pmf(0, 2.0, 1.5) == pytest.approx(1.5 * np.log(1.5 / 3.5), abs=1e-14)
    assert np.exp(log_nb_pmf(0, 2.0, 1.5)) == pytest.approx(0.280566, abs=1e-6)


def test_nb_degenerate_mean():
    assert log_nb_pmf(0, 1e-300, 1.5) == pytest.approx(0.0, abs=1e-12)
    assert log_nb_pmf(0, 0.0, 2.0) == 0.0


@pytest.mark.parametrize("lam,r", [(0.3, 0.5), (2.0, 1.5), (17.0, 3.0), (5.0, np.inf)])
def test_nb_normalizes(lam, r):
    y = np.arange(0, 4000)
    assert np.exp(log_nb_pmf(y, lam, r)).sum() == pytest.approx(1.0, abs=1e-10)


@given(st.integers(0, 200), st.floats(0.01, 100), st.floats(0.05, 50))
@settings(max_examples=200, deadline=None)
def test_nb_matches_scipy(y, lam, r):
    ref = stats.nbinom.logpmf(y, r, r / (r + lam))
    assert log_nb_pmf(y, lam, r) == pytest.approx(ref, rel=1e-9, abs=1e-9)


def test_poisson_limit():
    y = np.arange(30)
    np.testing.assert_allclose(log_nb_pmf(y, 4.0, np.inf), stats.poisson.logpmf(y, 4.0), atol=1e-12)
    for r in (1e9, 1e14, 1e300):
        np.testing.assert_allclose(log_nb_pmf(y, 4.0, r), stats.poisson.logpmf(y, 4.0), atol=1e-7)


@given(st.integers(0, 3000), st.floats(0.01, 1e15))
@settings(max_examples=200, deadline=None)
def test_log_rising_matches_high_precision(y, r):
    mp = pytest.importorskip("mpmath")
    with mp.workdps(60):
        exact = float(mp.loggamma(mp.mpf(y) + mp.mpf(r)) - mp.loggamma(mp.mpf(r)))
    assert log_rising(y, r) == pytest.approx(exact, rel=1e-10, abs=1e-9)


def test_nb_rejects_bad_inputs():
    for args in [(-1, 2, 1), (0, -2, 1), (0, 2, 0), (0, np.nan, 1)]:
        with pytest.raises(ValidationError):
            log_nb_pmf(*args)


def test_emission_branches():
    assert emission_logprob(0, 0, 2.0, 1.5) == 0.0
    assert emission_logprob(3, 0, 2.0, 1.5) == IMPOSSIBLE
    assert emission_logprob(0, 1, 2.0, 1.5) == log_nb_pmf(0, 2.0, 1.5)
    with pytest.raises(ValidationError):
        emission_logprob(0, 2, 1.0, 1.0)


def _sim_like_model(temp, hdi, barrier=0.0):
    """Two neighbors with one time step and the simulation covariates."""
    g = path_graph(2)
    y = np.zeros((2, 1))
    x = np.stack([np.full((2, 1), temp), np.full((2, 1), hdi)], axis=2)
    z = np.full((2, 1), temp)
    z01c = np.full((g.n_edges, 1), barrier)
    m = make_model(y, g, x=x, z=z, z01c=z01c)
    v = m.params(np.array(DEFAULT_TRUTH))
    v["log_r"] = np.log(1.5)
    return m, v


def test_layout_matches_truth_names():
    m, _ = _sim_like_model(0.0, 0.5)
    assert tuple(m.layout.names) == TRUTH_NAMES


def test_mean_rate_log_linear():
    m, v = _sim_like_model(2.0, 0.05)
    np.testing.assert_allclose(m.mean_rate(v), np.exp(1.7), rtol=1e-14)


def test_mean_rate_all_zero():
    y = np.array([[3, 0, 2]])
    m = make_model(y, NeighborGraph.from_edges(1, []))
    np.testing.assert_allclose(m.mean_rate(m.params()), 1.0)
    ee = make_model(y, NeighborGraph.from_edges(1, []), spec=ModelSpec(mean=MeanModelSpec(variant="endemic-epidemic")))
    np.testing.assert_allclose(ee.mean_rate(ee.params()), [[1, 4, 1]])


def test_endemic_epidemic_no_lag_count():
    m = make_model(np.array([[0, 0]]), NeighborGraph.from_edges(1, []),
                   spec=ModelSpec(mean=MeanModelSpec(variant="endemic-epidemic")))
    v = m.params()
    v["beta0_en"] = 0.7
    v["beta0_ar"] = 3.0
    np.testing.assert_allclose(m.mean_rate(v), np.exp(0.7))


def test_coupling_barrier_effect():
    m, v = _sim_like_model(0.0, 0.5, barrier=1.0)
    assert m.coupling_effect(v, 0, 1, 1, "reemergence") == pytest.approx(0.10, abs=1e-14)
    assert m.coupling_effect(v, 0, 1, 1, "persistence") == pytest.approx(0.10, abs=1e-14)  # eta0c only
    m0, v0 = _sim_like_model(0.0, 0.5, barrier=0.0)
    assert m0.coupling_effect(v0, 0, 1, 1, "reemergence") == pytest.approx(0.25)


def test_transition_probs_examples():
    m, v = _sim_like_model(25.0, 0.5)
    p01, _ = m.transition_probs(v, np.array([0, 0]), t=1)
    assert p01[0] == pytest.approx(logistic(1.0)) and p01[0] == pytest.approx(0.7311, abs=1e-4)
    p01, _ = m.transition_probs(v, np.array([0, 1]), t=1)
    assert p01[0] == pytest.approx(0.7773, abs=1e-4)
    z = make_model(np.zeros((2, 1)))
    p01, p11 = z.transition_probs(z.params(), np.array([0, 0]), t=1)
    np.testing.assert_allclose([p01, p11], 0.5)


def test_zero_coupling_neighbors_irrelevant():
    m, v = _sim_like_model(3.0, 0.5)
    for name in ("zeta0c", "zeta1c", "eta0c"):
        v[name] = 0.0
    a = m.transition_probs(v, np.array([0, 0]), t=1)
    b = m.transition_probs(v, np.array([0, 1]), t=1)
    assert a[0][0] == b[0][0] and a[1][0] == b[1][0]


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.floats(-10, 10))
@settings(max_examples=100, deadline=None)
def test_transition_probs_open_interval_and_monotone(coefs, temp):
    m, v = _sim_like_model(temp, 0.5)
    v["zeta0"], v["zeta0c"], v["eta0"] = coefs
    v["zeta1"] = abs(v["zeta1"])
    p01, p11 = m.transition_probs(v, np.array([0, 1]), t=1)
    assert np.all((p01 > 0) & (p01 < 1) & (p11 > 0) & (p11 < 1))
    m2, _ = _sim_like_model(temp + 1.0, 0.5)
    q01, _ = m2.transition_probs(v, np.array([0, 1]), t=1)
    assert np.all(q01 >= p01)


@given(st.floats(0, 1), st.floats(0, 1))
def test_transition_matrix_rows(p01, p11):
    A = area_transition_matrix(p01, p11)
    np.testing.assert_allclose(A.sum(axis=-1), 1.0)


def test_transition_matrix_extremes():
    np.testing.assert_allclose(area_transition_matrix(0.5, 0.5), 0.5)
    A = area_transition_matrix(1e-9, 1 - 1e-9)
    assert A[0, 0] > 0.999 and A[1, 1] > 0.999


def test_joint_loglik_hand_computed():
    y = np.array([[4]])
    m = make_model(y, NeighborGraph.from_edges(1, []), init=InitialStateDist(np.array([0.3])))
    v = m.params()
    v["beta0"] = np.log(2.5)
    v["log_r"] = np.log(2.0)
    v["zeta0"] = 0.4
    S = np.array([[0, 1]])
    expect = np.log(0.7) + np.log(logistic(0.4)) + log_nb_pmf(4, 2.5, 2.0)
    assert m.joint_loglik(S, v) == pytest.approx(expect, abs=1e-13)
    assert m.joint_loglik(np.array([[0, 0]]), v) == IMPOSSIBLE


def test_joint_loglik_local_in_counts(small_sim):
    panel, states, model, v = small_sim
    S = states.s
    base = model.joint_loglik(S, v)
    i, t = np.argwhere(panel.y > 0)[0]
    y2 = panel.y.copy()
    y2[i, t] += 1
    from dataclasses import replace
    m2 = type(model)(replace(panel, y=y2), model.spec, model.init)
    lam, r = model.mean_rate(v)[i, t], model.dispersion(v)[i, t]
    d = log_nb_pmf(y2[i, t], lam, r) - log_nb_pmf(panel.y[i, t], lam, r)
    # the lagged count only enters the mean when the model uses it; it does not here
    assert m2.joint_loglik(S, v) - base == pytest.approx(d, abs=1e-9)


def test_panel_validation():
    g = path_graph(2)
    with pytest.raises(ValidationError):
        PanelData(y=np.array([[1, -1], [0, 0]]), graph=g)
    with pytest.raises(ValidationError):
        PanelData(y=np.zeros((3, 2)), graph=g)
    with pytest.raises(ValidationError):
        NeighborGraph.from_edges(2, [(0, 1)])
    assert NeighborGraph.from_edges(2, [(0, 1)], symmetrize=True).n_edges == 2


def test_condition_on_first():
    y = np.array([[3, 0, 1], [0, 0, 2]])
    panel = PanelData(y=y, graph=path_graph(2))
    p2, init = panel.condition_on_first()
    assert p2.y.shape == (2, 2) and p2.times == (2, 3)
    np.testing.assert_array_equal(p2.y_lag0, [3, 0])
    np.testing.assert_array_equal(init.prob, [1.0, 0.5])


def test_linear_predictor_clamp():
    m = make_model(np.array([[0, 0]]), NeighborGraph.from_edges(1, []))
    v = m.params()
    v["beta0"] = 500.0
    v["zeta0"] = -1e6
    assert np.all(np.isfinite(m.mean_rate(v)))
    p01, p11 = m.transition_probs(v, np.array([0]), t=1)
    assert 0 < p01[0] < 1e-12
