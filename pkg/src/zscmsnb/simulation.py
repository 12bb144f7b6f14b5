"""Synthetic data from the model and the parameter-recovery harness."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .model import (InitialStateDist, Model, ModelSpec, NeighborGraph, PanelData, StateField,
                    ValidationError)

TRUTH_NAMES = ("beta0", "beta1", "beta2", "log_r", "zeta0", "zeta1", "zeta0c", "zeta1c",
               "eta0", "eta1", "eta0c")
# beta0, beta1 (temperature), beta2 (development index), r, zeta0, zeta1, zeta0c, zeta1c (barrier),
# eta0, eta1, eta0c
DEFAULT_TRUTH = (1.0, 0.1, 10.0, 1.5, -1.5, 0.1, 0.25, -0.15, 1.5, 0.05, 0.1)
REGIME_BETA0 = {"50": 1.0, "80": -1.0}


def torus(nrow, ncol) -> NeighborGraph:
    """Rook adjacency with wrap-around; every area has four neighbors."""
    if nrow < 3 or ncol < 3:
        raise ValidationError("a torus needs at least 3 rows and 3 columns")
    adj = []
    for r in range(nrow):
        for c in range(ncol):
            adj.append(sorted({((r - 1) % nrow) * ncol + c, ((r + 1) % nrow) * ncol + c,
                               r * ncol + (c - 1) % ncol, r * ncol + (c + 1) % ncol}))
    return NeighborGraph(nrow * ncol, adj)


@dataclass
class GeneratorSpec:
    """Synthetic panel settings.

    ``truth`` holds the 11 values in the order of ``TRUTH_NAMES`` with the
    overdispersion ``r`` on its natural scale.  ``regime`` picks the
    intercept (``"50"`` sets beta0 = 1, ``"80"`` sets beta0 = -1) unless
    ``beta0`` is given.  Temperature is a centred seasonal sine with noise;
    the development index is U(hdi_low, hdi_high), centred at its midpoint
    unless ``center_hdi`` is false.
    """

    n_rows: int = 4
    n_cols: int = 5
    n_times: int = 60
    graph: Optional[NeighborGraph] = None
    wrap: bool = False
    truth: tuple = DEFAULT_TRUTH
    regime: str = "50"
    beta0: Optional[float] = None
    barrier_prob: float = 0.30
    init_prob: float = 0.5
    temp_amplitude: float = 3.5
    temp_period: float = 12.0
    temp_noise: float = 0.5
    hdi_low: float = 0.4
    hdi_high: float = 0.9
    center_hdi: bool = True
    homogeneous: bool = False

    def __post_init__(self):
        if len(self.truth) != len(TRUTH_NAMES):
            raise ValidationError(f"truth needs {len(TRUTH_NAMES)} values")
        if self.regime not in REGIME_BETA0:
            raise ValidationError(f"regime must be one of {sorted(REGIME_BETA0)}")
        if not 0 <= self.barrier_prob <= 1 or not 0 <= self.init_prob <= 1:
            raise ValidationError("probabilities must lie in [0, 1]")
        if self.truth[3] <= 0:
            raise ValidationError("overdispersion r must be positive")
        if self.n_times < 1:
            raise ValidationError("n_times must be >= 1")

    def build_graph(self) -> NeighborGraph:
        if self.graph is not None:
            return self.graph
        if self.wrap:
            return torus(self.n_rows, self.n_cols)
        return NeighborGraph.lattice(self.n_rows, self.n_cols)

    def true_values(self) -> np.ndarray:
        """Truth on the fitted scale (``log r``), beta0 set by the regime."""
        v = np.array(self.truth, dtype=float)
        v[0] = self.beta0 if self.beta0 is not None else REGIME_BETA0[self.regime]
        v[3] = np.log(v[3])
        return v


def model_for(panel: PanelData, spec: Optional[ModelSpec] = None) -> Model:
    """Model matching the generator: Bernoulli(0.5) initial states by default."""
    return Model(panel, spec or ModelSpec(), InitialStateDist.constant(panel.n_areas, 0.5))


def generate_dataset(spec: GeneratorSpec, rng) -> tuple:
    """Draw a panel and its latent states; returns ``(panel, states, model, v)``.

    ``states`` is the true ``StateField``; ``model`` and ``v`` are the fitting
    model and the true parameter vector.
    """
    graph = spec.build_graph()
    N, T, E = graph.n_areas, spec.n_times, graph.n_edges
    tt = np.arange(T + 1)
    temp = spec.temp_amplitude * np.sin(2 * np.pi * tt / spec.temp_period) + spec.temp_noise * rng.standard_normal(T + 1)
    if spec.homogeneous:
        hdi = np.zeros(N)
    else:
        hdi = rng.uniform(spec.hdi_low, spec.hdi_high, N)
        if spec.center_hdi:
            hdi = hdi - 0.5 * (spec.hdi_low + spec.hdi_high)
    # one barrier draw per undirected pair, shared by both directions
    barrier = np.zeros(E)
    for e in range(E):
        i, j = graph.dst[e], graph.indices[e]
        if i < j:
            barrier[e] = float(rng.random() < spec.barrier_prob)
    barrier = np.maximum(barrier, barrier[graph.rev])
    temp_lag = np.broadcast_to(temp[:-1], (N, T))
    x = np.stack([temp_lag, np.broadcast_to(hdi[:, None], (N, T))], axis=-1)
    z = temp_lag[:, :, None]
    z01c = np.broadcast_to(barrier[:, None, None], (E, T, 1)).copy()

    y_dummy = np.zeros((N, T), dtype=np.int64)
    mk = lambda y: PanelData(y=y, graph=graph, x=x.copy(), z=z.copy(), z01c=z01c, x_names=("temp_lag", "hdi"),
                             z_names=("temp_lag",), z01c_names=("barrier",))
    model = model_for(mk(y_dummy))
    v = model.params(spec.true_values())
    lam = model.mean_rate(v)
    r = float(np.exp(v["log_r"]))
    S = np.zeros((N, T + 1), dtype=np.int8)
    S[:, 0] = rng.random(N) < spec.init_prob
    y = np.zeros((N, T), dtype=np.int64)
    for t in range(1, T + 1):
        p = model.presence_prob(v, S[:, t - 1], t)
        S[:, t] = rng.random(N) < p
        draw = rng.negative_binomial(r, r / (r + lam[:, t - 1]))
        y[:, t - 1] = np.where(S[:, t] == 1, draw, 0)
    panel = mk(y)
    model = model_for(panel)
    fixed = model.fixed_mask()
    return panel, StateField(S, fixed), model, model.params(spec.true_values())


def zero_fraction(panel: PanelData) -> float:
    return float(np.mean(panel.y == 0))


# ---------------------------------------------------------------------------
# replication study


@dataclass
class ReplicationResult:
    rep: int
    converged: bool
    min_ess: float
    max_rhat: float
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    zero_fraction: float


@dataclass
class RecoveryReport:
    regime: str
    names: tuple
    truth: np.ndarray
    reps: list = field(default_factory=list)

    @property
    def converged(self):
        return [r for r in self.reps if r.converged]

    @property
    def n_excluded(self):
        return len(self.reps) - len(self.converged)

    def coverage(self) -> np.ndarray:
        ok = self.converged
        if not ok:
            return np.full(len(self.names), np.nan)
        hit = np.array([(r.lower <= self.truth) & (self.truth <= r.upper) for r in ok])
        return hit.mean(axis=0)

    def table(self) -> list:
        """One dict per parameter summarising the sampling distribution of the posterior means."""
        ok = self.converged
        cov = self.coverage()
        rows = []
        for k, name in enumerate(self.names):
            means = np.array([r.mean[k] for r in ok])
            sds = np.array([r.sd[k] for r in ok])
            row = dict(regime=self.regime, parameter=name, truth=float(self.truth[k]), n_used=len(ok),
                       n_excluded=self.n_excluded)
            if ok:
                row.update(mean=float(means.mean()), q025=float(np.quantile(means, 0.025)),
                           q975=float(np.quantile(means, 0.975)), coverage=float(cov[k]),
                           bias=float(means.mean() - self.truth[k]), mean_post_sd=float(sds.mean()))
            else:
                row.update(mean=np.nan, q025=np.nan, q975=np.nan, coverage=np.nan, bias=np.nan,
                           mean_post_sd=np.nan)
            rows.append(row)
        return rows

    def write_csv(self, path):
        from .io import write_rows
        cols = ["regime", "parameter", "truth", "mean", "q025", "q975", "coverage", "bias", "mean_post_sd",
                "n_used", "n_excluded"]
        write_rows(path, cols, [[r[c] for c in cols] for r in self.table()])


def _fit_one(args):
    from .diagnostics import MIN_ESS_DRAWS, gelman_rubin, multichain_ess
    from .engine import run_chains

    spec, config, seed, rep, min_ess, max_rhat = args
    rng = np.random.default_rng(seed)
    panel, _, model, v = generate_dataset(spec, rng)
    cfg = replace(config, seed=int(rng.integers(2 ** 63)), n_workers=1)
    store = run_chains(model, cfg)
    draws = store.draws
    flat = draws.reshape(-1, draws.shape[-1])
    P = flat.shape[1]
    # too few draws for an ESS estimate: unknown, which only a zero threshold accepts
    ess_min = min(multichain_ess(draws[:, :, k]) for k in range(P)) if draws.shape[1] >= MIN_ESS_DRAWS else np.nan
    rhat_max = max(gelman_rubin(draws[:, :, k]) for k in range(P)) if draws.shape[0] > 1 else np.nan
    ess_ok = ess_min >= min_ess if not np.isnan(ess_min) else min_ess <= 0
    conv = ess_ok and (np.isnan(rhat_max) or rhat_max < max_rhat)
    lo, hi = np.quantile(flat, [0.025, 0.975], axis=0)
    return ReplicationResult(rep, bool(conv), float(ess_min), float(rhat_max), flat.mean(axis=0),
                             flat.std(axis=0, ddof=1), lo, hi, zero_fraction(panel))


def run_replications(spec: GeneratorSpec, fit_config, n_reps: int, seed: int = 0, min_ess: float = 1000.0,
                     max_rhat: float = 1.05, n_workers: int = 1, progress=None) -> RecoveryReport:
    """Generate, fit and summarise ``n_reps`` replications.

    Replications failing the ESS / R-hat gates are kept in the report but
    excluded from coverage and bias.  Replication ``k`` uses the ``k``-th
    child of ``SeedSequence(seed)``.
    """
    seeds = np.random.SeedSequence(seed).spawn(n_reps)
    jobs = [(spec, fit_config, s, k, min_ess, max_rhat) for k, s in enumerate(seeds)]
    probe = model_for(generate_dataset(spec, np.random.default_rng(0))[0])
    report = RecoveryReport(spec.regime, tuple(probe.layout.names), spec.true_values())
    if n_workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            for res in ex.map(_fit_one, jobs):
                report.reps.append(res)
                if progress:
                    progress(res)
    else:
        for job in jobs:
            res = _fit_one(job)
            report.reps.append(res)
            if progress:
                progress(res)
    return report
