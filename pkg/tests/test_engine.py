import time

import numpy as np
import pytest
from scipy import optimize

from zscmsnb.diagnostics import ess, gelman_rubin
from zscmsnb.engine import (FitConfig, default_slice_blocks, kernel_plan, log_posterior, pointwise_loglik,
                            run_chain, run_chains)
from zscmsnb.model import InitialStateDist, ModelSpec, NeighborGraph, PanelData, ValidationError, log_nb_pmf
from zscmsnb.simulation import GeneratorSpec, generate_dataset


def test_config_validation():
    for kw in (dict(burn_in=10, n_iterations=10), dict(n_chains=0), dict(thinning=0),
               dict(state_sampler="nope"), dict(retain_states="some")):
        with pytest.raises(ValidationError):
            FitConfig(**kw)


def test_single_stored_draw(small_sim):
    _, _, model, _ = small_sim
    cfg = FitConfig(n_iterations=21, burn_in=20, n_chains=2, seed=1)
    store = run_chains(model, cfg)
    assert store.draws.shape == (2, 1, model.layout.size)
    assert store.final_states.shape == (2, 1, model.N)


def test_default_blocks_and_plan(small_sim):
    _, _, model, _ = small_sim
    assert default_slice_blocks(model) == [["zeta0", "zeta0c", "zeta1c"], ["eta0", "eta0c"]]
    plan = kernel_plan(model, FitConfig(n_iterations=2, burn_in=1))
    labels = [p[1] for p in plan]
    # mean block before dispersion before the transition families
    assert labels.index("beta0") < labels.index("log_r") < labels.index("zeta1") < labels.index("eta1")
    assert any(p[0] == "slice" for p in plan)
    none = kernel_plan(model, FitConfig(n_iterations=2, burn_in=1, slice_blocks=[]))
    assert all(p[0] != "slice" for p in none)


@pytest.fixture(scope="module")
def short_fit():
    spec = GeneratorSpec(n_rows=2, n_cols=3, n_times=20)
    _, _, model, _ = generate_dataset(spec, np.random.default_rng(5))
    cfg = FitConfig(n_iterations=400, burn_in=200, n_chains=3, seed=42, retain_states="full")
    return model, cfg, run_chains(model, cfg)


def test_fit_is_reproducible(short_fit):
    model, cfg, store = short_fit
    again = run_chains(model, cfg)
    for a, b in zip(store.chains, again.chains):
        assert np.array_equal(a.draws, b.draws)
        assert np.array_equal(a.final_states, b.final_states)
        assert np.array_equal(a.state_sum, b.state_sum)
        assert np.array_equal(a.waic_lse, b.waic_lse)


def test_chains_differ(short_fit):
    _, _, store = short_fit
    inits = np.array([c.initial for c in store.chains])
    assert len({tuple(r) for r in inits}) == 3
    assert not np.array_equal(store.chains[0].draws, store.chains[1].draws)


def test_identical_seeds_give_unit_rhat(short_fit):
    model, cfg, _ = short_fit
    from dataclasses import replace
    store = run_chains(model, replace(cfg, identical_seeds=True, n_iterations=250))
    d = store.draws
    assert np.array_equal(d[0], d[1]) and np.array_equal(d[1], d[2])
    assert gelman_rubin(d[:, :, 0]) == pytest.approx(1.0, abs=1e-12)


def test_positive_cells_always_present(short_fit):
    model, _, store = short_fit
    S = store.states
    assert S is not None
    assert np.all(S[:, :, :, 1:][:, :, model.ypos] == 1)
    np.testing.assert_allclose(store.state_mean()[:, 1:][model.ypos], 1.0)


def test_waic_accumulators_match_recomputation(short_fit):
    from zscmsnb.diagnostics import pointwise_loglik_draws, waic, waic_from_loglik
    _, _, store = short_fit
    direct = waic_from_loglik(pointwise_loglik_draws(store))
    online = waic(store)
    assert online.waic == pytest.approx(direct.waic, rel=1e-10)
    assert online.p_waic == pytest.approx(direct.p_waic, rel=1e-8)


def test_pointwise_loglik_marginalizes_state(short_fit):
    model, _, store = short_fit
    v = store.param_vector(0, 0)
    S = store.states[0, 0]
    ll = pointwise_loglik(model, v, S)
    lam, r = model.mean_rate(v), model.dispersion(v)
    for i, t in [(0, 0), (1, 3), (2, 7), (5, 19)]:
        p1 = model.presence_prob(v, S[:, t], t=t + 1)[i]
        nb = np.exp(log_nb_pmf(model.y[i, t], lam[i, t], r[i, t]))
        expect = np.log(p1 * nb + (1 - p1) * (model.y[i, t] == 0))
        assert ll[i, t] == pytest.approx(expect, abs=1e-12)


def test_log_posterior_finite(short_fit):
    model, _, store = short_fit
    assert np.isfinite(log_posterior(model, store.param_vector(1, 5), store.states[1, 5]))


def test_acceptance_reported(short_fit):
    _, _, store = short_fit
    acc = store.acceptance()
    assert acc and all(0 <= v <= 1 for v in acc.values())


def _nb_mle(y, x):
    def nll(p):
        lam = np.exp(p[0] + p[1] * x)
        return -np.sum(log_nb_pmf(y, lam, np.exp(p[2])))
    res = optimize.minimize(nll, np.zeros(3), method="BFGS")
    return res.x, res.hess_inv


def test_all_positive_matches_nb_regression():
    rng = np.random.default_rng(3)
    N, T = 4, 50
    x = rng.normal(size=(N, T))
    lam = np.exp(1.5 + 0.4 * x)
    y = np.maximum(rng.negative_binomial(2.0, 2.0 / (2.0 + lam)), 1)  # keep every cell positive
    g = NeighborGraph.from_edges(N, [(0, 1), (1, 2), (2, 3)], symmetrize=True)
    panel = PanelData(y=y, graph=g, x=x)
    from zscmsnb.model import Model
    model = Model(panel, ModelSpec(zero_inflation=False), InitialStateDist(np.ones(N)))
    store = run_chains(model, FitConfig(n_iterations=6000, burn_in=1000, n_chains=2, seed=9))
    mle, cov = _nb_mle(y.ravel().astype(float), x.ravel())
    names = ["beta0", "beta1", "log_r"]
    for k, name in enumerate(names):
        draws = store.draws[:, :, store.names.index(name)]
        mcse = draws.std() / np.sqrt(sum(ess(c) for c in draws))
        sd = np.sqrt(cov[k, k])
        assert abs(draws.mean() - mle[k]) < 0.3 * sd + 4 * mcse, name
        assert draws.std() == pytest.approx(sd, rel=0.2), name


def test_dengue_scale_smoke():
    spec = GeneratorSpec(n_rows=10, n_cols=16, n_times=84)
    _, _, model, _ = generate_dataset(spec, np.random.default_rng(0))
    t0 = time.perf_counter()
    run_chain(model, FitConfig(n_iterations=100, burn_in=50, n_chains=1), 0)
    assert time.perf_counter() - t0 < 300
