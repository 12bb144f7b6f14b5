"""Brute-force ground truth on tiny instances.

Everything here enumerates state paths (or the full ``2**N`` joint chain)
directly from the model definition, without touching the filtering code.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import Model, ParamVector, ValidationError, _log_sigmoid

MAX_BINARY_VARIABLES = 16


@dataclass
class TinyInstance:
    model: Model
    v: ParamVector

    def __post_init__(self):
        n_vars = self.model.N * (self.model.T + 1)
        if n_vars > MAX_BINARY_VARIABLES:
            raise ValidationError(
                f"instance has {n_vars} binary state variables; the oracle allows at most {MAX_BINARY_VARIABLES}"
            )


def _all_paths(N, T1):
    n = N * T1
    codes = np.arange(1 << n, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(n - 1, -1, -1)) & 1
    return bits.reshape(-1, N, T1).astype(np.int8)


def _path_terms(inst: TinyInstance, paths):
    """Per-path log-probability of the states alone and of the emissions per time."""
    m, v = inst.model, inst.v
    N, T = m.N, m.T
    LE = m.emission_present(v)
    B01, B11, P01, P11 = m.transition_inputs(v)
    g = m.graph
    n = paths.shape[0]
    with np.errstate(divide="ignore"):
        state_lp = np.where(paths[:, :, 0] == 1, np.log(m.init.prob), np.log1p(-m.init.prob)).sum(axis=1)
    em_t = np.zeros((n, T + 1))
    for t in range(1, T + 1):
        for i in range(N):
            prev = paths[:, i, t - 1]
            logit = np.where(prev == 1, B11[i, t - 1], B01[i, t - 1]).astype(float)
            for j in g.adjacency[i]:
                e = g.edge_index(i, j)
                phi = np.where(prev == 1, P11[e, t - 1], P01[e, t - 1])
                logit = logit + phi * paths[:, j, t - 1]
            cur = paths[:, i, t]
            state_lp = state_lp + np.where(cur == 1, _log_sigmoid(logit), _log_sigmoid(-logit))
            if m.ypos[i, t - 1]:
                em = np.where(cur == 1, LE[i, t - 1], -np.inf)
            else:
                em = np.where(cur == 1, LE[i, t - 1], 0.0)
            em_t[:, t] += em
    return state_lp, em_t


def _path_logweights(inst):
    paths = _all_paths(inst.model.N, inst.model.T + 1)
    state_lp, em_t = _path_terms(inst, paths)
    return paths, state_lp + em_t.sum(axis=1)


def exact_loglik_enumeration(inst: TinyInstance) -> float:
    """``log p(y | v)`` by summing the complete-data likelihood over all state paths."""
    _, lw = _path_logweights(inst)
    return float(logsumexp(lw))


def exact_state_posterior(inst: TinyInstance) -> np.ndarray:
    """``(N, T + 1)`` table of ``P(S_it = 1 | y, v)``."""
    paths, lw = _path_logweights(inst)
    w = np.exp(lw - logsumexp(lw))
    return np.tensordot(w, paths.astype(float), axes=(0, 0))


def state_path_total(inst: TinyInstance) -> float:
    """Total probability of all state paths ignoring emissions (should be 1)."""
    paths = _all_paths(inst.model.N, inst.model.T + 1)
    state_lp, _ = _path_terms(inst, paths)
    return float(np.exp(logsumexp(state_lp)))


def conditional_block_posterior(inst: TinyInstance, states, block):
    """Exact distribution of the block's trajectories given the other areas' states.

    Returns ``(paths, probs)`` where ``paths`` is ``(n, n_c, T + 1)``.
    """
    m = inst.model
    block = sorted(block)
    S = np.asarray(states.s if hasattr(states, "s") else states, dtype=np.int8)
    sub = _all_paths(len(block), m.T + 1)
    full = np.repeat(S[None], sub.shape[0], axis=0)
    full[:, block, :] = sub
    state_lp, em_t = _path_terms(inst, full)
    lw = state_lp + em_t.sum(axis=1)
    return sub, np.exp(lw - logsumexp(lw))


def _joint_transition(inst: TinyInstance, t):
    """``2**N x 2**N`` matrix of ``P(S_t = s | S_{t-1} = s')`` (rows ``s'``)."""
    m, v = inst.model, inst.v
    N = m.N
    states = _all_paths(N, 1)[:, :, 0]
    G = np.empty((states.shape[0], states.shape[0]))
    for a, sp in enumerate(states):
        p1 = m.presence_prob(v, sp, t)
        G[a] = np.prod(np.where(states == 1, p1, 1.0 - p1), axis=1)
    return states, G


def exact_one_step_predictive(inst: TinyInstance, t: int) -> np.ndarray:
    """``P(S_it = 1 | y_1..y_{t-1}, v)`` for every area by the joint-chain forward filter."""
    m, v = inst.model, inst.v
    if not 1 <= t <= m.T:
        raise ValidationError(f"t must lie in 1..{m.T}")
    N = m.N
    states = _all_paths(N, 1)[:, :, 0]
    LE = m.emission_present(v)
    alpha = np.prod(np.where(states == 1, m.init.prob, 1.0 - m.init.prob), axis=1)
    for tau in range(1, t + 1):
        _, G = _joint_transition(inst, tau)
        pred = G.T @ alpha
        if tau == t:
            pred = pred / pred.sum()
            return pred @ states
        y = m.y[:, tau - 1]
        em = np.where(states == 1, np.exp(LE[:, tau - 1]), (y == 0).astype(float))
        alpha = pred * np.prod(em, axis=1)
        alpha = alpha / alpha.sum()
    raise AssertionError("unreachable")


def exact_one_step_by_paths(inst: TinyInstance, t: int) -> np.ndarray:
    """Same quantity as :func:`exact_one_step_predictive` via path enumeration."""
    paths = _all_paths(inst.model.N, inst.model.T + 1)
    state_lp, em_t = _path_terms(inst, paths)
    lw = state_lp + em_t[:, :t].sum(axis=1)
    w = np.exp(lw - logsumexp(lw))
    return w @ paths[:, :, t].astype(float)


def random_instance(rng, n_areas=2, n_times=3, zero_prob=0.5, init_prob=None) -> TinyInstance:
    """Random tiny instance with one transition covariate and one pair covariate.

    Counts are drawn independently: zero with probability ``zero_prob``,
    otherwise 1 + Poisson(2).  Parameters are drawn from N(0, 1) (the
    overdispersion from U(0.5, 5)).
    """
    from .model import InitialStateDist, ModelSpec, NeighborGraph, PanelData

    N, T = n_areas, n_times
    if N == 1:
        graph = NeighborGraph(1, [[]])
    elif N == 2:
        graph = NeighborGraph(2, [[1], [0]])
    else:
        edges = [(i, i + 1) for i in range(N - 1)]
        if rng.random() < 0.5:
            edges.append((0, N - 1))
        graph = NeighborGraph.from_edges(N, edges, symmetrize=True)
    y = np.where(rng.random((N, T)) < zero_prob, 0, 1 + rng.poisson(2.0, (N, T)))
    E = graph.n_edges
    panel = PanelData(
        y=y,
        graph=graph,
        z=rng.normal(size=(N, T, 1)),
        x=rng.normal(size=(N, T, 1)),
        z01c=rng.integers(0, 2, size=(E, T, 1)).astype(float),
        z11c=rng.normal(size=(E, T, 1)),
        y_lag0=rng.poisson(1.0, N),
    )
    if init_prob is None:
        init_prob = rng.uniform(0.2, 0.8, N)
    model = Model(panel, ModelSpec(), InitialStateDist(np.asarray(init_prob, float)))
    vals = rng.normal(size=model.layout.size)
    v = model.params(vals)
    v["log_r"] = np.log(rng.uniform(0.5, 5.0))
    return TinyInstance(model, v)


def cross_check(rng, n_instances=20, n_areas=2, n_times=3) -> dict:
    """Largest deviations between the oracle and the filtering code.

    Keys: ``loglik`` (full-block filter normalizer), ``block_paths``
    (backward-sampling path probabilities of every block of size 1 and 2),
    ``binary`` (single-site conditionals) and ``one_step`` (block filter
    predictive with the whole graph as one block).
    """
    from . import filtering as F

    dev = dict(loglik=0.0, block_paths=0.0, binary=0.0, one_step=0.0)
    for _ in range(n_instances):
        inst = random_instance(rng, n_areas, n_times)
        m, v = inst.model, inst.v
        everyone = list(range(m.N))
        res = F.block_forward_filter(m, v, F.initialize_states(m).s, everyone, exact=True)
        dev["loglik"] = max(dev["loglik"], abs(res.log_normalizer - exact_loglik_enumeration(inst)))
        pred = res.predictive_presence()[1:].T
        exact = np.array([exact_one_step_predictive(inst, t) for t in range(1, m.T + 1)]).T
        dev["one_step"] = max(dev["one_step"], float(np.abs(pred - exact).max()))
        fixed = m.fixed_mask()
        S = np.where(fixed, F.initialize_states(m).s, rng.integers(0, 2, fixed.shape)).astype(np.int8)
        blocks = [[i] for i in everyone] + [[i, j] for i in everyone for j in m.graph.adjacency[i] if i < j]
        for block in blocks:
            r = F.block_forward_filter(m, v, S, block)
            paths, probs = conditional_block_posterior(inst, S, block)
            for p, pr in zip(paths, probs):
                if pr > 0:
                    dev["block_paths"] = max(dev["block_paths"], abs(np.exp(F.block_path_logprob(r, p)) - pr))
        for i, t in np.argwhere(~fixed):
            pb = F.binary_full_conditional(m, v, S, i, t)
            paths, probs = conditional_block_posterior(inst, S, [i])
            keep = np.all(np.delete(paths[:, 0, :], t, axis=1) == np.delete(S[i], t), axis=1)
            pp, pa = probs[keep], paths[keep, 0, t]
            dev["binary"] = max(dev["binary"], abs(pp[pa == 1].sum() / pp.sum() - pb))
    return dev
