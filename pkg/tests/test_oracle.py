import numpy as np
import pytest

from zscmsnb import filtering as F
from zscmsnb import oracle
from zscmsnb.model import InitialStateDist, Model, NeighborGraph, PanelData, ValidationError

from conftest import make_model


def test_path_total_is_one(rng):
    for _ in range(10):
        inst = oracle.random_instance(rng, int(rng.integers(1, 4)), 3)
        assert oracle.state_path_total(inst) == pytest.approx(1.0, abs=1e-10)


def test_size_cap():
    m = make_model(np.zeros((3, 5), int))
    with pytest.raises(ValidationError):
        oracle.TinyInstance(m, m.params())


def test_single_cell_emission_only():
    m = make_model(np.array([[3]]), NeighborGraph.from_edges(1, []), init=InitialStateDist(np.array([1.0])))
    v = m.params()
    v["eta0"] = 40.0  # clamped at 30 inside the logistic
    le = m.emission_present(v)[0, 0]
    inst = oracle.TinyInstance(m, v)
    assert oracle.exact_loglik_enumeration(inst) == pytest.approx(le + np.log(1 / (1 + np.exp(-30))), abs=1e-13)


def test_all_positive_single_path(rng):
    inst = oracle.random_instance(rng, 2, 3, zero_prob=0.0, init_prob=[1.0, 1.0])
    S = np.ones((2, 4), np.int8)
    assert oracle.exact_loglik_enumeration(inst) == pytest.approx(inst.model.joint_loglik(S, inst.v), abs=1e-12)


def test_positive_cells_have_unit_marginal(rng):
    inst = oracle.random_instance(rng, 3, 4)
    post = oracle.exact_state_posterior(inst)
    np.testing.assert_allclose(post[:, 1:][inst.model.ypos], 1.0, atol=1e-14)


def test_exchangeable_pair_equal_marginals():
    g = NeighborGraph(2, [[1], [0]])
    y = np.array([[0, 2, 0], [0, 2, 0]])
    m = Model(PanelData(y=y, graph=g), init=InitialStateDist(np.array([0.3, 0.3])))
    v = m.params(np.linspace(-0.5, 0.5, m.layout.size))
    post = oracle.exact_state_posterior(oracle.TinyInstance(m, v))
    np.testing.assert_allclose(post[0], post[1], atol=1e-14)


def test_first_step_from_initial_distribution(rng):
    inst = oracle.random_instance(rng, 2, 3)
    m, v = inst.model, inst.v
    p0 = m.init.prob
    expect = np.zeros(2)
    for a in (0, 1):
        for b in (0, 1):
            w = (p0[0] if a else 1 - p0[0]) * (p0[1] if b else 1 - p0[1])
            expect += w * m.presence_prob(v, np.array([a, b]), t=1)
    np.testing.assert_allclose(oracle.exact_one_step_predictive(inst, 1), expect, atol=1e-14)


def test_no_coupling_factorizes(rng):
    inst = oracle.random_instance(rng, 2, 4)
    m, v = inst.model, inst.v
    for k in np.r_[m.layout.idx("zeta_c"), m.layout.idx("eta_c")]:
        v.values[k] = 0.0
    total = oracle.exact_loglik_enumeration(inst)
    S = F.initialize_states(m).s
    from zscmsnb.model import _log_sigmoid
    logits = m.transition_logits(v, S)
    own = np.where(S[:, 1:] == 1, _log_sigmoid(logits), _log_sigmoid(-logits)).sum(axis=1)
    # each block's normalizer also carries the fixed neighbor's transitions
    parts = [F.block_forward_filter(m, v, S, [i], exact=True).log_normalizer - own[1 - i] for i in range(2)]
    assert total == pytest.approx(sum(parts), abs=1e-12)


def test_two_predictive_routes_agree(rng):
    for _ in range(5):
        inst = oracle.random_instance(rng, 3, 4)
        for t in range(1, 5):
            np.testing.assert_allclose(oracle.exact_one_step_predictive(inst, t),
                                       oracle.exact_one_step_by_paths(inst, t), atol=1e-13)


def _permuted(inst, perm):
    m = inst.model
    p = m.panel
    inv = np.argsort(perm)
    g = m.graph
    adj = [[int(inv[j]) for j in g.adjacency[perm[i]]] for i in range(m.N)]
    g2 = NeighborGraph.from_edges(m.N, [(i, j) for i in range(m.N) for j in adj[i]], symmetrize=True)
    order = [g.edge_index(perm[int(g2.dst[e])], perm[int(g2.indices[e])]) for e in range(g2.n_edges)]
    panel = PanelData(y=p.y[perm], graph=g2, z=p.z[perm], x=p.x[perm], w=p.w[perm], z01c=p.z01c[order],
                      z11c=p.z11c[order], y_lag0=p.y_lag0[perm])
    m2 = Model(panel, m.spec, InitialStateDist(m.init.prob[perm]))
    return oracle.TinyInstance(m2, m2.params(inst.v.values.copy()))


def test_loglik_permutation_invariant(rng):
    for _ in range(5):
        inst = oracle.random_instance(rng, 3, 3)
        perm = rng.permutation(3)
        a = oracle.exact_loglik_enumeration(inst)
        b = oracle.exact_loglik_enumeration(_permuted(inst, perm))
        assert a == pytest.approx(b, abs=1e-12)


def test_cross_check_small(rng):
    dev = oracle.cross_check(rng, n_instances=5, n_areas=3, n_times=3)
    assert set(dev) == {"loglik", "block_paths", "binary", "one_step"}
    assert max(dev.values()) < 1e-10


def test_gibbs_matches_enumeration(rng):
    inst = oracle.random_instance(rng, 2, 2)
    m, v = inst.model, inst.v
    sampler = F.StateSampler(m, "binary")
    inp = F.padded_inputs(m, v)
    S = F.initialize_states(m, rng).s.copy()
    n, acc = 100_000, np.zeros(S.shape)
    for _ in range(n):
        sampler.sweep(S, inp, rng)
        acc += S
    assert np.all(np.abs(acc / n - oracle.exact_state_posterior(inst)) <= 0.02)
