"""Hybrid Gibbs sampler: parameter kernels followed by a state sweep, over
several chains."""
from __future__ import annotations

import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from . import filtering
from .model import (CLAMP, IMPOSSIBLE, Model, ModelSpec, NumericalError, PanelData, ParamVector, log_rising,
                    ValidationError)
from .samplers import (AdaptiveRWMState, FactorSliceState, PriorSpec, afss_step, arwm_step,
                       arwm_vector_step, log_prior_terms)

WORKERS_ENV = "ZSCMSNB_WORKERS"
FULL_STATE_LIMIT = 5000

_FAMILY = {
    "mean": "emission", "dispersion": "emission", "dispersion_area": "emission",
    "random_ar": "emission", "random_en": "emission",
    "zeta": "t01", "zeta_c": "t01", "eta": "t11", "eta_c": "t11", "hyper": "prior",
}
_VECTOR_GROUPS = ("dispersion_area", "random_ar", "random_en")


@dataclass
class FitConfig:
    n_iterations: int = 80000
    burn_in: int = 30000
    n_chains: int = 3
    state_sampler: str = "iffbs"
    thinning: int = 1
    seed: int = 0
    priors: PriorSpec = field(default_factory=PriorSpec)
    model_spec: ModelSpec = field(default_factory=ModelSpec)
    # None: the default (zeta0, zeta0c, zeta_c) / (eta0, eta0c, eta_c) blocks; [] disables slicing
    slice_blocks: Optional[list] = None
    adapt_schedule: str = "log"
    initial_scale: float = 0.1
    retain_states: str = "auto"
    identical_seeds: bool = False
    progress_every: int = 0
    n_workers: Optional[int] = None

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValidationError("n_chains must be >= 1")
        if not 0 <= self.burn_in < self.n_iterations:
            raise ValidationError("need 0 <= burn_in < n_iterations")
        if self.thinning < 1:
            raise ValidationError("thinning must be >= 1")
        if self.state_sampler not in filtering.SAMPLERS:
            raise ValidationError(f"unknown state sampler {self.state_sampler!r}")
        if self.retain_states not in ("auto", "full", "moments"):
            raise ValidationError("retain_states must be auto, full or moments")

    @property
    def n_kept(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thinning


@dataclass
class ChainResult:
    chain: int
    draws: np.ndarray            # (n_kept, P)
    iterations: np.ndarray       # (n_kept,)
    final_states: np.ndarray     # (n_kept, N) states at time T
    state_sum: np.ndarray        # (N, T + 1)
    states: Optional[np.ndarray]  # (n_kept, N, T + 1) or None
    waic_lse: np.ndarray         # running logsumexp of pointwise log-likelihoods
    waic_mean: np.ndarray
    waic_m2: np.ndarray
    initial: np.ndarray
    acceptance: dict

    @property
    def n_kept(self) -> int:
        return self.draws.shape[0]


@dataclass
class PosteriorStore:
    model: Model
    config: FitConfig
    chains: list

    @classmethod
    def from_arrays(cls, model: Model, draws, states, config: Optional[FitConfig] = None) -> "PosteriorStore":
        """Store built from given ``(C, n, P)`` draws and ``(C, n, N, T + 1)`` state draws.

        State moments and WAIC accumulators are computed from the arrays.
        """
        draws = np.asarray(draws, dtype=float)
        states = np.asarray(states, dtype=np.int8)
        if draws.ndim != 3 or draws.shape[2] != model.layout.size:
            raise ValidationError(f"draws must be (C, n, {model.layout.size})")
        if states.shape != draws.shape[:2] + (model.N, model.T + 1):
            raise ValidationError("states must be (C, n, N, T + 1) matching the draws")
        C, n = draws.shape[:2]
        chains = []
        for c in range(C):
            ll = np.array([pointwise_loglik(model, draws[c, k], states[c, k]) for k in range(n)]).reshape(
                n, model.N, model.T)
            lse = np.logaddexp.reduce(ll, axis=0) if n else np.full((model.N, model.T), -np.inf)
            mean = ll.mean(axis=0) if n else np.zeros((model.N, model.T))
            m2 = ((ll - mean) ** 2).sum(axis=0) if n else np.zeros((model.N, model.T))
            chains.append(ChainResult(c, draws[c].copy(), np.arange(1, n + 1), states[c, :, :, -1].copy(),
                                      states[c].sum(axis=0).astype(float), states[c].copy(), lse, mean, m2,
                                      draws[c, 0].copy() if n else np.zeros(model.layout.size), {}))
        cfg = config or FitConfig(n_iterations=max(n, 1), burn_in=0, n_chains=max(C, 1))
        return cls(model, cfg, chains)

    @property
    def names(self):
        return list(self.model.layout.names)

    @property
    def n_chains(self):
        return len(self.chains)

    @property
    def n_kept(self):
        return self.chains[0].n_kept if self.chains else 0

    @property
    def draws(self) -> np.ndarray:
        """``(n_chains, n_kept, P)``."""
        return np.stack([c.draws for c in self.chains])

    def flat_draws(self) -> np.ndarray:
        return self.draws.reshape(-1, self.model.layout.size)

    @property
    def final_states(self) -> np.ndarray:
        return np.stack([c.final_states for c in self.chains])

    @property
    def states(self) -> Optional[np.ndarray]:
        if any(c.states is None for c in self.chains):
            return None
        return np.stack([c.states for c in self.chains])

    def param(self, name) -> np.ndarray:
        """``(n_chains, n_kept)`` draws of one parameter."""
        return self.draws[:, :, self.model.layout.index[name]]

    def param_vector(self, chain, k) -> ParamVector:
        return ParamVector(self.chains[chain].draws[k].copy(), self.model.layout)

    def state_mean(self) -> np.ndarray:
        n = sum(c.n_kept for c in self.chains)
        if n == 0:
            return np.full((self.model.N, self.model.T + 1), np.nan)
        return sum(c.state_sum for c in self.chains) / n

    def waic_moments(self):
        """Merged per-cell (log mean likelihood, mean log-lik, variance of log-lik, n)."""
        n_tot = 0
        lse = mean = m2 = None
        for c in self.chains:
            n = c.n_kept
            if n == 0:
                continue
            if n_tot == 0:
                lse, mean, m2 = c.waic_lse.copy(), c.waic_mean.copy(), c.waic_m2.copy()
            else:
                lse = np.logaddexp(lse, c.waic_lse)
                delta = c.waic_mean - mean
                tot = n_tot + n
                mean = mean + delta * n / tot
                m2 = m2 + c.waic_m2 + delta ** 2 * n_tot * n / tot
            n_tot += n
        if n_tot == 0:
            raise ValidationError("store holds no draws")
        return lse - np.log(n_tot), mean, m2 / n_tot, n_tot

    def acceptance(self) -> dict:
        out = {}
        for c in self.chains:
            for k, val in c.acceptance.items():
                out.setdefault(k, []).append(val)
        return {k: float(np.mean(v)) for k, v in out.items()}


# ---------------------------------------------------------------------------
# conditional log-posterior pieces


class _Posterior:
    """Cached likelihood pieces used by the parameter kernels."""

    def __init__(self, model: Model, priors: PriorSpec):
        self.m = model
        self.priors = priors
        self.y = model.y.astype(float)
        self.poisson = model.spec.emission == "poisson"
        N, T = model.N, model.T
        d = model.design
        self.Z = d["Z"].reshape(N * T, -1)
        self.Z01 = d["Z01"]
        self.Z11 = d["Z11"]
        self.src = model.graph.indices
        lay = model.layout
        zi = model.spec.zero_inflation
        self.i01 = np.concatenate([lay.idx("zeta"), lay.idx("zeta_c")]) if zi else None
        self.i11 = np.concatenate([lay.idx("eta"), lay.idx("eta_c")]) if zi else None
        self.present = np.ones((N, T))

    def set_states(self, S):
        m = self.m
        N, T = m.N, m.T
        self.present = S[:, 1:].astype(float)
        if not m.spec.zero_inflation:
            return
        prev = S[:, :-1].astype(float)
        nS = (m.A @ prev).reshape(-1, 1)
        sp = prev[self.src]
        cols = lambda Zc: (m.M @ (sp[:, :, None] * Zc).reshape(sp.shape[0], -1)).reshape(N * T, -1)
        one = np.ones((N * T, 1))
        D01 = np.hstack([one, self.Z, nS, cols(self.Z01)])
        D11 = np.hstack([one, self.Z, nS, cols(self.Z11)])
        flat_prev = prev.ravel() == 1
        cur = S[:, 1:].ravel().astype(float)
        self.D01, self.y01 = D01[~flat_prev], cur[~flat_prev]
        self.D11, self.y11 = D11[flat_prev], cur[flat_prev]

    def emission_cells(self, vals, with_r=True):
        lam = self.m.mean_rate(vals)
        if self.poisson:
            return self.present * (self.y * np.log(lam) - lam)
        r = self.m.dispersion(vals)
        out = -r * np.log1p(lam / r) + self.y * (np.log(lam) - np.log(r + lam))
        if with_r:
            out = out + log_rising(self.y, r)
        return self.present * out

    def emission(self, vals, with_r=True) -> float:
        return float(self.emission_cells(vals, with_r).sum())

    def trans(self, vals, which) -> float:
        if which == "t01":
            D, y, idx = self.D01, self.y01, self.i01
        else:
            D, y, idx = self.D11, self.y11, self.i11
        if y.size == 0:
            return 0.0
        l = np.clip(D @ vals[idx], -CLAMP, CLAMP)
        return float(np.sum(y * l - np.logaddexp(0.0, l)))

    def prior_terms(self, vals):
        return log_prior_terms(self.m, vals, self.priors)

    def prior(self, vals) -> float:
        lp = self.prior_terms(vals)
        return float(lp.sum()) if np.all(lp > IMPOSSIBLE) else IMPOSSIBLE

    def prior_fn(self, idx):
        """Prior terms that change when only ``vals[idx]`` moves (up to a constant)."""
        lay = self.m.layout
        group = _group_of(lay)
        plain = {"mean", "dispersion", "zeta", "zeta_c", "eta", "eta_c"}
        re = lay.idx("random_ar").size or lay.idx("random_en").size
        if all(group[int(k)] in plain for k in idx) and "log_r" not in [lay.names[k] for k in idx] and not re:
            c = -0.5 / self.priors.coef_sd ** 2
            if len(idx) == 1:
                k = int(idx[0])
                return lambda vals: c * vals[k] * vals[k]
            return lambda vals: c * float(np.dot(vals[idx], vals[idx]))
        return self.prior

    def target(self, families, with_r=True, idx=None):
        prior = self.prior if idx is None else self.prior_fn(idx)

        def f(vals):
            lp = prior(vals)
            if lp == IMPOSSIBLE:
                return IMPOSSIBLE
            for fam in families:
                if fam == "emission":
                    lp += self.emission(vals, with_r)
                elif fam != "prior":
                    lp += self.trans(vals, fam)
            return lp if np.isfinite(lp) else IMPOSSIBLE
        return f

    def area_target(self, idx):
        def f(x, vals):
            w = vals.copy()
            w[idx] = x
            lp = self.prior_terms(w)[idx] + self.emission_cells(w).sum(axis=1)
            return np.where(np.isfinite(lp), lp, IMPOSSIBLE)
        return f


# ---------------------------------------------------------------------------
# kernel plan


def default_slice_blocks(model: Model) -> list:
    if not model.spec.zero_inflation:
        return []
    lay = model.layout
    names = lay.names
    out = []
    for g, gc in (("zeta", "zeta_c"), ("eta", "eta_c")):
        blk = [names[lay.idx(g)[0]]] + [names[k] for k in lay.idx(gc)]
        if len(blk) >= 2:
            out.append(blk)
    return out


def _group_of(layout):
    g = {}
    for name, idx in layout.groups.items():
        for k in idx:
            g[k] = name
    return g


def kernel_plan(model: Model, config: FitConfig) -> list:
    """Ordered list of ``(kind, label, indices)`` parameter kernels.

    ``kind`` is ``arwm`` (scalar), ``area`` (independent per-area scalars) or
    ``slice``.
    """
    lay = model.layout
    group = _group_of(lay)
    blocks = default_slice_blocks(model) if config.slice_blocks is None else config.slice_blocks
    in_block = {}
    for b, blk in enumerate(blocks):
        if len(blk) < 2:
            raise ValidationError(f"slice block {blk} needs at least two parameters")
        for name in blk:
            if name not in lay.index:
                raise ValidationError(f"slice block names unknown parameter {name!r}")
            if name in in_block:
                raise ValidationError(f"parameter {name!r} appears in two slice blocks")
            k = lay.index[name]
            if group[k] in _VECTOR_GROUPS:
                raise ValidationError(f"per-area parameter {name!r} cannot join a slice block")
            in_block[name] = b
    order = [("mean",), ("dispersion", "dispersion_area"), ("zeta", "zeta_c"), ("eta", "eta_c"),
             ("random_ar", "random_en", "hyper")]
    plan, placed = [], set()
    for fam in order:
        for g in fam:
            if g in _VECTOR_GROUPS:
                idx = lay.idx(g)
                if idx.size:
                    plan.append(("area", g, idx))
                continue
            for k in lay.idx(g):
                name = lay.names[k]
                if name not in in_block:
                    plan.append(("arwm", name, np.array([k])))
        for g in fam:
            for k in lay.idx(g):
                b = in_block.get(lay.names[k])
                if b is not None and b not in placed:
                    placed.add(b)
                    plan.append(("slice", "+".join(blocks[b]), np.array([lay.index[n] for n in blocks[b]])))
    return plan


def _families(model, idx):
    group = _group_of(model.layout)
    fams = []
    for k in idx:
        f = _FAMILY[group[int(k)]]
        if f not in fams:
            fams.append(f)
    return fams


# ---------------------------------------------------------------------------
# initial values


def initial_values(model: Model, priors: PriorSpec, rng) -> np.ndarray:
    """Dispersed starting point: coefficients ~ N(0, 0.5), positives from
    their priors truncated to a moderate range."""
    lay = model.layout
    vals = rng.normal(0.0, 0.5, lay.size)
    if "log_r" in lay.index:
        g = stats.gamma(priors.r_shape, scale=1.0 / priors.r_rate)
        lo, hi = g.cdf(0.5), g.cdf(10.0)
        vals[lay.index["log_r"]] = np.log(g.ppf(lo + (hi - lo) * rng.random()))
    ia = lay.idx("dispersion_area")
    if ia.size:
        vals[ia] = model.log_mean_count + priors.r_area_offset + priors.r_area_sd * rng.standard_normal(ia.size)
    for k in lay.idx("hyper"):
        vals[k] = np.clip(abs(rng.normal(0.0, priors.sigma_scale)), 0.1, 2.0)
    for grp, centre, sig in (("random_ar", "beta0_ar", "sigma_ar"), ("random_en", "beta0_en", "sigma_en")):
        ib = lay.idx(grp)
        if ib.size:
            vals[ib] = vals[lay.index[centre]] + vals[lay.index[sig]] * rng.standard_normal(ib.size)
    return vals


# ---------------------------------------------------------------------------
# one chain


def _retain_full(model, config):
    if config.retain_states == "full":
        return True
    if config.retain_states == "moments":
        return False
    return model.N * (model.T + 1) <= FULL_STATE_LIMIT


def pointwise_loglik(model: Model, v, S, LE=None) -> np.ndarray:
    """``log p(y_it | S_{t-1}, v)`` with ``S_it`` summed out, ``(N, T)``."""
    if LE is None:
        LE = model.emission_present(v)
    if not model.spec.zero_inflation:
        return LE
    l = np.clip(model.transition_logits(v, S), -CLAMP, CLAMP)
    lp1 = -np.logaddexp(0.0, -l)
    lp0 = -np.logaddexp(0.0, l)
    return np.where(model.ypos, lp1 + LE, np.logaddexp(lp1 + LE, lp0))


def _as_model(data, config):
    if isinstance(data, Model):
        return data
    if isinstance(data, PanelData):
        return Model(data, config.model_spec)
    raise ValidationError("data must be a Model or PanelData")


def run_chain(data, config: FitConfig, chain_seed, chain: int = 0) -> ChainResult:
    """Run one chain; ``chain_seed`` is an int or ``numpy.random.SeedSequence``."""
    model = _as_model(data, config)
    rng = np.random.default_rng(chain_seed)
    try:
        return _run(model, config, rng, chain)
    except NumericalError as e:
        raise NumericalError(f"chain {chain}: {e}") from e


def _run(model: Model, config: FitConfig, rng, chain: int) -> ChainResult:
    N, T, P = model.N, model.T, model.layout.size
    post = _Posterior(model, config.priors)
    vals = initial_values(model, config.priors, rng)
    init = vals.copy()
    sfield = filtering.initialize_states(model, rng)
    S = sfield.s
    sampler = filtering.StateSampler(model, config.state_sampler)
    post.set_states(S)

    kernels = []
    for kind, label, idx in kernel_plan(model, config):
        fams = _families(model, idx)
        if kind == "arwm":
            # dispersion terms are constant while only the mean moves
            with_r = _group_of(model.layout)[int(idx[0])] != "mean"
            st = AdaptiveRWMState.create(config.initial_scale, schedule=config.adapt_schedule)
            kernels.append((kind, label, idx, post.target(fams, with_r, idx), st))
        elif kind == "area":
            st = AdaptiveRWMState.create(config.initial_scale, size=idx.size, schedule=config.adapt_schedule)
            kernels.append((kind, label, idx, post.area_target(idx), st))
        else:
            st = FactorSliceState(idx.size)
            kernels.append((kind, label, idx, post.target(fams, idx=idx), st))

    full = _retain_full(model, config)
    n_kept = config.n_kept
    draws = np.empty((n_kept, P))
    iters = np.empty(n_kept, dtype=np.int64)
    finals = np.empty((n_kept, N), dtype=np.int8)
    states = np.empty((n_kept, N, T + 1), dtype=np.int8) if full else None
    ssum = np.zeros((N, T + 1))
    lse = np.full((N, T), -np.inf)
    wmean = np.zeros((N, T))
    wm2 = np.zeros((N, T))
    kept = 0

    for it in range(1, config.n_iterations + 1):
        if it == config.burn_in + 1:
            for k in kernels:
                k[4].adapting = False
        for kind, label, idx, f, st in kernels:
            if kind == "arwm":
                arwm_step(int(idx[0]), vals, f, st, rng)
            elif kind == "area":
                x = vals[idx].copy()
                arwm_vector_step(x, lambda z, f=f: f(z, vals), st, rng)
                vals[idx] = x
            else:
                afss_step(idx, vals, f, st, rng)
        if sampler.idle:
            LE = model.emission_present(vals)
        else:
            inputs = filtering.padded_inputs(model, vals)
            sampler.sweep(S, inputs, rng)
            post.set_states(S)
            LE = inputs["LE"][:, 1:]

        if it > config.burn_in and (it - config.burn_in) % config.thinning == 0:
            draws[kept] = vals
            iters[kept] = it
            finals[kept] = S[:, T]
            ssum += S
            if full:
                states[kept] = S
            ll = pointwise_loglik(model, vals, S, LE)
            lse = np.logaddexp(lse, ll)
            delta = ll - wmean
            wmean += delta / (kept + 1)
            wm2 += delta * (ll - wmean)
            kept += 1
        if config.progress_every and it % config.progress_every == 0:
            _progress(model, config, chain, it, vals, S, kernels)

    acc = {}
    for kind, label, idx, f, st in kernels:
        if kind == "slice":
            continue
        rates = st.acceptance_rate
        if kind == "area":
            for k, r in zip(idx, rates):
                acc[model.layout.names[k]] = float(r)
        else:
            acc[label] = float(rates[0])
    return ChainResult(chain, draws, iters, finals, ssum, states, lse, wmean, wm2, init, acc)


def log_posterior(model: Model, v, S, priors: Optional[PriorSpec] = None) -> float:
    from .samplers import log_prior
    lp = log_prior(model, v, priors)
    if lp == IMPOSSIBLE:
        return IMPOSSIBLE
    return lp + model.joint_loglik(S, v)


def _progress(model, config, chain, it, vals, S, kernels):
    lp = log_posterior(model, vals, S, config.priors)
    rates = " ".join(
        f"{label}={st.acceptance_rate.mean():.2f}" for kind, label, idx, f, st in kernels if kind != "slice"
    )
    print(f"chain {chain} iter {it}/{config.n_iterations} logpost {lp:.4f} acc {rates}", file=sys.stderr)


# ---------------------------------------------------------------------------
# several chains


def chain_seeds(seed, n_chains, identical=False):
    if identical:
        return [np.random.SeedSequence(seed) for _ in range(n_chains)]
    return np.random.SeedSequence(seed).spawn(n_chains)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ValidationError(f"{WORKERS_ENV} must be an integer") from None


def _chain_job(args):
    model, config, seed, c = args
    return run_chain(model, config, seed, c)


def run_chains(data, config: FitConfig) -> PosteriorStore:
    """Run ``config.n_chains`` chains with seeds derived from ``config.seed``.

    Chains run in worker processes when ``n_workers`` (or the
    ``ZSCMSNB_WORKERS`` environment variable) exceeds 1; results are ordered
    by chain index either way.
    """
    model = _as_model(data, config)
    seeds = chain_seeds(config.seed, config.n_chains, config.identical_seeds)
    workers = config.n_workers or default_workers()
    jobs = [(model, config, s, c) for c, s in enumerate(seeds)]
    if workers > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(workers, config.n_chains)) as ex:
            chains = list(ex.map(_chain_job, jobs))
    else:
        chains = [_chain_job(j) for j in jobs]
    return PosteriorStore(model, config, chains)
