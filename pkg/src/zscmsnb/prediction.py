"""Posterior-predictive forecasts, fitted values and spread summaries."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import filtering
from .model import CLAMP, Model, ValidationError


@dataclass
class ForecastScenario:
    """Raw covariate paths for horizons ``1..K``.

    Area tables are ``(N, K, k)`` and pair tables ``(E, K, k)``, with the same
    columns as the fitted panel.  Horizon ``k`` holds the covariates of time
    ``T + k``.
    """

    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    z01c: np.ndarray
    z11c: np.ndarray

    @property
    def horizon(self) -> int:
        return self.x.shape[1]

    def check(self, model: Model):
        p = model.panel
        N, E = model.N, model.graph.n_edges
        for name, lead, ref in (("x", N, p.x), ("z", N, p.z), ("w", N, p.w), ("z01c", E, p.z01c),
                                ("z11c", E, p.z11c)):
            a = getattr(self, name)
            if a.ndim != 3 or a.shape[0] != lead or a.shape[2] != ref.shape[2]:
                raise ValidationError(f"scenario {name} has shape {a.shape}; expected ({lead}, K, {ref.shape[2]})")
            if a.shape[1] != self.horizon:
                raise ValidationError("scenario tables disagree on the horizon")
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"scenario {name} has non-finite values")

    @classmethod
    def hold_last(cls, model: Model, K: int) -> "ForecastScenario":
        """Repeat the last observed covariates for ``K`` horizons."""
        p = model.panel
        rep = lambda a: np.repeat(a[:, -1:, :], K, axis=1)
        return cls(rep(p.x), rep(p.z), rep(p.w), rep(p.z01c), rep(p.z11c))


@dataclass
class PredictiveDraws:
    states: np.ndarray    # (M, K, N)
    counts: np.ndarray    # (M, K, N)
    presence: np.ndarray  # (M, K, N)

    def summary(self, what="counts"):
        """``(mean, q025, q975)`` per horizon and area."""
        a = getattr(self, what).astype(float)
        return a.mean(axis=0), np.quantile(a, 0.025, axis=0), np.quantile(a, 0.975, axis=0)


def _nb_draw(rng, lam, r):
    lam = np.asarray(lam, float)
    r = np.broadcast_to(r, lam.shape)
    out = np.zeros(lam.shape, dtype=np.int64)
    pois = np.isinf(r)
    if pois.any():
        out[pois] = rng.poisson(lam[pois])
    nb = ~pois
    if nb.any():
        out[nb] = rng.negative_binomial(r[nb], r[nb] / (r[nb] + lam[nb]))
    return out


def _draw_list(store, draws=None):
    """Flattened ``(chain, k)`` pairs in chain-major order."""
    pairs = [(c, k) for c in range(store.n_chains) for k in range(store.n_kept)]
    if draws is not None:
        pairs = [pairs[j] for j in draws]
    return pairs


def _step_inputs(model: Model, scenario: ForecastScenario, k: int, ylag):
    d = model.assemble(scenario.x[:, k], scenario.z[:, k], scenario.z01c[:, k], scenario.z11c[:, k],
                       scenario.w[:, k], ylag)
    return d


def simulate_forecast(store, scenario: ForecastScenario, K: int, rng, draws=None) -> PredictiveDraws:
    """Forward simulation of states and counts for horizons ``1..K``.

    For each stored draw the chain starts from that draw's states at time
    ``T``; the presence probability at each horizon is recorded alongside the
    sampled state and count.
    """
    model = store.model
    if K < 1:
        raise ValidationError("K must be >= 1")
    scenario.check(model)
    if scenario.horizon < K:
        raise ValidationError(f"scenario covers {scenario.horizon} horizons, {K} requested")
    pairs = _draw_list(store, draws)
    M, N = len(pairs), model.N
    S_out = np.empty((M, K, N), dtype=np.int8)
    y_out = np.empty((M, K, N), dtype=np.int64)
    pi_out = np.empty((M, K, N))
    y_last = model.y[:, -1].astype(float)
    zi = model.spec.zero_inflation
    for m, (c, j) in enumerate(pairs):
        v = store.chains[c].draws[j]
        s_prev = store.chains[c].final_states[j].astype(np.int8)
        ylag = y_last
        for k in range(K):
            d = _step_inputs(model, scenario, k, ylag)
            if zi:
                pi = model.presence_prob(v, s_prev, inputs=model.transition_inputs(v, d))
            else:
                pi = np.ones(N)
            s = (rng.random(N) < pi).astype(np.int8)
            lam = model.mean_rate(v, d)
            r = model.dispersion(v, d)
            y = np.where(s == 1, _nb_draw(rng, lam, r), 0)
            S_out[m, k], y_out[m, k], pi_out[m, k] = s, y, pi
            s_prev, ylag = s, y.astype(float)
    return PredictiveDraws(S_out, y_out, pi_out)


def one_step_presence(store, scenario: Optional[ForecastScenario] = None, draws=None) -> np.ndarray:
    """Monte Carlo average of ``p01 (1 - S_T) + p11 S_T`` over stored draws.

    Returns the ``(N,)`` one-step-ahead presence probability at ``T + 1``.
    """
    model = store.model
    if scenario is None:
        scenario = ForecastScenario.hold_last(model, 1)
    scenario.check(model)
    if not model.spec.zero_inflation:
        return np.ones(model.N)
    d = _step_inputs(model, scenario, 0, model.y[:, -1].astype(float))
    pairs = _draw_list(store, draws)
    acc = np.zeros(model.N)
    for c, j in pairs:
        v = store.chains[c].draws[j]
        s = store.chains[c].final_states[j]
        p01, p11 = model.transition_probs(v, s, inputs=model.transition_inputs(v, d))
        acc += p01 * (1 - s) + p11 * s
    return acc / len(pairs)


# ---------------------------------------------------------------------------
# fitted values


@dataclass
class SmoothedFit:
    presence: np.ndarray              # (N, T) posterior P(S_it = 1 | y)
    replicates: Optional[np.ndarray]  # (M, N, T) or None without full state draws


def smoothed_fitted(store, rng, draws=None) -> SmoothedFit:
    """Posterior presence means and replicate counts drawn given each draw's states."""
    model = store.model
    presence = store.state_mean()[:, 1:]
    presence = np.where(model.ypos, 1.0, presence)
    states = store.states
    if states is None:
        return SmoothedFit(presence, None)
    pairs = _draw_list(store, draws)
    reps = np.empty((len(pairs), model.N, model.T), dtype=np.int64)
    for m, (c, j) in enumerate(pairs):
        v = store.chains[c].draws[j]
        lam = model.mean_rate(v)
        r = model.dispersion(v)
        reps[m] = np.where(states[c, j, :, 1:] == 1, _nb_draw(rng, lam, r), 0)
    return SmoothedFit(presence, reps)


@dataclass
class CoupledFit:
    presence: np.ndarray  # (M, N, T) one-step predictive presence probabilities
    states: np.ndarray    # (M, N, T)
    counts: np.ndarray    # (M, N, T)

    def mean_presence(self):
        return self.presence.mean(axis=0)


def coupled_one_step_fitted(store, rng, block_plan=None, draws=None, block_size: int = 2) -> CoupledFit:
    """One-step-ahead fitted values from the block forward filter.

    For every draw and block the filter runs with the other areas' states
    fixed at that draw; the predictive distribution at ``t`` uses the
    block's counts only through ``t - 1``.  States are drawn jointly per block
    from the predictive, counts from the emission.  Every area is covered,
    including those with all counts positive.
    """
    model = store.model
    states = store.states
    if states is None:
        raise ValidationError("coupled one-step fitted values need full state draws (retain_states='full')")
    plan = block_plan or filtering.build_blocks(model, block_size, include_all=True)
    pairs = _draw_list(store, draws)
    M, N, T = len(pairs), model.N, model.T
    pres = np.empty((M, N, T))
    S_out = np.empty((M, N, T), dtype=np.int8)
    y_out = np.empty((M, N, T), dtype=np.int64)
    for m, (c, j) in enumerate(pairs):
        v = store.chains[c].draws[j]
        S = states[c, j]
        if not model.spec.zero_inflation:
            pres[m] = 1.0
            S_out[m] = 1
        else:
            inp = filtering.padded_inputs(model, v)
            for block in plan.blocks:
                res = filtering.block_forward_filter(model, v, S, block, exact=True, inputs=inp)
                pres[m, block] = res.predictive_presence()[1:].T
                pred = np.exp(res.log_predictive[1:])
                cum = np.cumsum(pred, axis=1)
                u = rng.random(T)[:, None] * cum[:, -1:]
                codes = np.minimum((cum <= u).sum(axis=1), pred.shape[1] - 1)
                S_out[m, block] = filtering.BlockPlan.enumeration(len(block))[codes].T
        lam = model.mean_rate(v)
        r = model.dispersion(v)
        y_out[m] = np.where(S_out[m] == 1, _nb_draw(rng, lam, r), 0)
    return CoupledFit(pres, S_out, y_out)


# ---------------------------------------------------------------------------
# spread of disease between neighbors


def spread_odds_ratio(store, i: int, j: int, t: Optional[int] = None, draws=None) -> np.ndarray:
    """Posterior draws of the odds ratio of presence in ``i`` when ``j`` is present.

    Per draw: ``S_it exp(phi11_{j->i}) + (1 - S_it) exp(phi01_{j->i})`` with
    the coupling effects evaluated at the pair covariates of time ``t``
    (default ``T``).
    """
    model = store.model
    if not model.spec.zero_inflation:
        raise ValidationError("the model has no transition component")
    e = model.graph.edge_index(i, j)
    T = model.T
    t = T if t is None else t
    if not 1 <= t <= T:
        raise ValidationError(f"t must lie in 1..{T}")
    pairs = _draw_list(store, draws)
    if t == T:
        s = np.array([store.chains[c].final_states[k, i] for c, k in pairs], dtype=float)
    else:
        states = store.states
        if states is None:
            raise ValidationError("odds ratios before time T need full state draws")
        s = np.array([states[c, k, i, t] for c, k in pairs], dtype=float)
    lay = model.layout
    i01, i11 = lay.idx("zeta_c"), lay.idx("eta_c")
    col = t - 1
    z01 = np.concatenate([[1.0], model.design["Z01"][e, col]])
    z11 = np.concatenate([[1.0], model.design["Z11"][e, col]])
    V = np.array([store.chains[c].draws[k] for c, k in pairs])
    phi01 = np.clip(V[:, i01] @ z01, -CLAMP, CLAMP)
    phi11 = np.clip(V[:, i11] @ z11, -CLAMP, CLAMP)
    return s * np.exp(phi11) + (1.0 - s) * np.exp(phi01)


def arrow_table(store, threshold: float = 1.2, prob: float = 0.75, t: Optional[int] = None, all_pairs=False):
    """Directed neighbor pairs where ``P(OR > threshold) >= prob``.

    Rows are ``(area_i, area_j, p)``: spread from ``area_j`` into ``area_i``.
    With ``all_pairs`` every directed pair is listed regardless of the rule.
    """
    g = store.model.graph
    ids = store.model.panel.area_ids
    rows = []
    for e in range(g.n_edges):
        i, j = int(g.dst[e]), int(g.indices[e])
        orr = spread_odds_ratio(store, i, j, t)
        p = float(np.mean(orr > threshold))
        if all_pairs or p >= prob:
            rows.append((ids[i], ids[j], p))
    return rows
