import numpy as np
import pytest

from zscmsnb.engine import FitConfig
from zscmsnb.model import ValidationError
from zscmsnb.simulation import (DEFAULT_TRUTH, TRUTH_NAMES, GeneratorSpec, RecoveryReport, ReplicationResult,
                                generate_dataset, run_replications, torus, zero_fraction)


def test_truth_vector():
    assert DEFAULT_TRUTH == (1, .1, 10, 1.5, -1.5, .1, .25, -.15, 1.5, .05, .1)
    v = GeneratorSpec().true_values()
    assert v[3] == pytest.approx(np.log(1.5))
    assert GeneratorSpec(regime="80").true_values()[0] == -1


def test_barrier_reduces_spread_by_sixty_percent():
    zc0, zc1 = DEFAULT_TRUTH[6], DEFAULT_TRUTH[7]
    assert (zc0 + zc1) / zc0 == pytest.approx(0.4)


def test_states_respect_fixed_mask():
    panel, states, model, _ = generate_dataset(GeneratorSpec(n_rows=3, n_cols=3, n_times=40), np.random.default_rng(1))
    assert np.all(states.s[:, 1:][panel.y > 0] == 1)
    assert np.all(panel.y[states.s[:, 1:] == 0] == 0)


def test_generator_deterministic():
    a = generate_dataset(GeneratorSpec(n_times=10), np.random.default_rng(7))[0]
    b = generate_dataset(GeneratorSpec(n_times=10), np.random.default_rng(7))[0]
    assert np.array_equal(a.y, b.y) and np.array_equal(a.x, b.x) and np.array_equal(a.z01c, b.z01c)


def test_barriers_symmetric():
    panel, _, model, _ = generate_dataset(GeneratorSpec(n_rows=4, n_cols=4, n_times=3), np.random.default_rng(2))
    b = panel.z01c[:, 0, 0]
    assert np.array_equal(b, b[model.graph.rev])


@pytest.mark.parametrize("regime,target", [("50", 0.5), ("80", 0.8)])
def test_zero_fraction_regimes(regime, target):
    spec = GeneratorSpec(n_rows=10, n_cols=10, n_times=84, regime=regime)
    panel = generate_dataset(spec, np.random.default_rng(0))[0]
    assert abs(zero_fraction(panel) - target) <= 0.10


def test_torus_regular():
    g = torus(4, 5)
    assert np.all(g.degree() == 4)
    with pytest.raises(ValidationError):
        torus(2, 5)


def test_exchangeable_areas_permutation():
    truth = list(DEFAULT_TRUTH)
    truth[2] = 0.0
    spec = GeneratorSpec(n_rows=4, n_cols=4, n_times=30, wrap=True, truth=tuple(truth), homogeneous=True,
                         barrier_prob=0.0)
    rng = np.random.default_rng(123)
    R = 200
    totals = np.array([generate_dataset(spec, rng)[0].y.sum(axis=1) for _ in range(R)], float)
    stat = lambda a: a.mean(axis=0).var()
    obs = stat(totals)
    prm = np.random.default_rng(0)
    null = [stat(prm.permuted(totals, axis=1)) for _ in range(2000)]
    p = (1 + np.sum(np.array(null) >= obs)) / 2001
    assert p > 0.01


def test_spec_validation():
    with pytest.raises(ValidationError):
        GeneratorSpec(regime="90")
    with pytest.raises(ValidationError):
        GeneratorSpec(truth=(1, 2))


def test_recovery_report_coverage():
    names = ("a", "b")
    rep = RecoveryReport("50", names, np.array([0.0, 1.0]))
    mk = lambda lo, hi, ok=True: ReplicationResult(0, ok, 500, 1.0, (lo + hi) / 2, np.ones(2), lo, hi, 0.5)
    rep.reps = [mk(np.array([-1, 0.5]), np.array([1, 2])), mk(np.array([0.5, 0.0]), np.array([1, 0.9])),
                mk(np.array([5, 5]), np.array([6, 6]), ok=False)]
    np.testing.assert_allclose(rep.coverage(), [0.5, 0.5])
    assert rep.n_excluded == 1
    rows = rep.table()
    assert [r["parameter"] for r in rows] == ["a", "b"] and rows[0]["n_used"] == 2


def test_run_replications_small():
    spec = GeneratorSpec(n_rows=2, n_cols=2, n_times=15)
    cfg = FitConfig(n_iterations=120, burn_in=60, n_chains=2)
    rep = run_replications(spec, cfg, n_reps=2, seed=1, min_ess=0, max_rhat=np.inf)
    assert len(rep.reps) == 2 and rep.names == TRUTH_NAMES
    again = run_replications(spec, cfg, n_reps=2, seed=1, min_ess=0, max_rhat=np.inf)
    assert np.array_equal(rep.reps[1].mean, again.reps[1].mean)
