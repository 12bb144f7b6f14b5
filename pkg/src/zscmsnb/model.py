"""Domain types and model densities for the zero-state coupled Markov switching
negative binomial model.

Conventions
-----------
Counts ``y`` have shape ``(N, T)`` where column ``t - 1`` holds time ``t``.
States have shape ``(N, T + 1)``; column 0 is the initial state.  Arrays that
feed the state samplers (emission log-probabilities, transition linear
predictors) are padded to ``T + 1`` columns so that column ``t`` is time ``t``.

Directed neighbor pairs ``(i, j)`` with ``j in NE(i)`` are stored in CSR order:
edges into area ``i`` occupy ``indptr[i]:indptr[i + 1]`` and ``indices[e]`` is
the source area ``j``.  Pair covariate tables are indexed by this edge order.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.special import gammaln

IMPOSSIBLE = -np.inf
CLAMP = 30.0

MEAN_VARIANTS = ("log-linear", "endemic-epidemic")
EMISSIONS = ("negbin", "poisson")


class ValidationError(ValueError):
    """Input data or configuration is inconsistent."""


class NumericalError(RuntimeError):
    """Filter underflow or a non-finite posterior."""


# ---------------------------------------------------------------------------
# graph and data containers


@dataclass
class NeighborGraph:
    n_areas: int
    adjacency: list

    def __post_init__(self):
        if self.n_areas < 1:
            raise ValidationError("n_areas must be positive")
        adj = [sorted(int(j) for j in nb) for nb in self.adjacency]
        if len(adj) != self.n_areas:
            raise ValidationError("adjacency must list neighbors for every area")
        for i, nb in enumerate(adj):
            if len(set(nb)) != len(nb):
                raise ValidationError(f"duplicate neighbor in area {i}")
            for j in nb:
                if not 0 <= j < self.n_areas:
                    raise ValidationError(f"neighbor index {j} of area {i} out of range")
                if j == i:
                    raise ValidationError(f"self-loop at area {i}")
        for i, nb in enumerate(adj):
            for j in nb:
                if i not in adj[j]:
                    raise ValidationError(f"asymmetric adjacency: {j} in NE({i}) but not {i} in NE({j})")
        self.adjacency = adj
        self.indptr = np.zeros(self.n_areas + 1, dtype=np.int64)
        self.indptr[1:] = np.cumsum([len(nb) for nb in adj])
        self.indices = np.array([j for nb in adj for j in nb], dtype=np.int64)
        self.dst = np.repeat(np.arange(self.n_areas), np.diff(self.indptr))
        pos = {(int(i), int(j)): e for e, (i, j) in enumerate(zip(self.dst, self.indices))}
        # rev[e] is the edge j <- i for edge e = i <- j
        self.rev = np.array([pos[(int(j), int(i))] for i, j in zip(self.dst, self.indices)], dtype=np.int64)
        self._pos = pos

    @property
    def n_edges(self) -> int:
        return int(self.indices.size)

    def edge_index(self, i: int, j: int) -> int:
        """Index of the directed pair ``i <- j`` (``j`` a neighbor of ``i``)."""
        try:
            return self._pos[(i, j)]
        except KeyError:
            raise ValidationError(f"{j} is not a neighbor of {i}") from None

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def adjacency_matrix(self) -> sparse.csr_matrix:
        data = np.ones(self.n_edges)
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(self.n_areas, self.n_areas))

    def incidence_matrix(self) -> sparse.csr_matrix:
        """``(N, E)`` matrix summing edge quantities into their destination area."""
        data = np.ones(self.n_edges)
        cols = np.arange(self.n_edges)
        return sparse.csr_matrix((data, cols, self.indptr), shape=(self.n_areas, self.n_edges))

    @classmethod
    def from_edges(cls, n_areas, edges, symmetrize=False):
        adj = [set() for _ in range(n_areas)]
        for i, j in edges:
            adj[int(i)].add(int(j))
            if symmetrize:
                adj[int(j)].add(int(i))
        return cls(n_areas, [sorted(a) for a in adj])

    @classmethod
    def lattice(cls, nrow, ncol):
        """Rook adjacency on an ``nrow x ncol`` grid, areas numbered row-major."""
        adj = []
        for r in range(nrow):
            for c in range(ncol):
                nb = []
                if r > 0:
                    nb.append((r - 1) * ncol + c)
                if c > 0:
                    nb.append(r * ncol + c - 1)
                if c < ncol - 1:
                    nb.append(r * ncol + c + 1)
                if r < nrow - 1:
                    nb.append((r + 1) * ncol + c)
                adj.append(nb)
        return cls(nrow * ncol, adj)


def _as_cov(arr, lead, T, name):
    if arr is None:
        return np.zeros((lead, T, 0))
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[:2] != (lead, T):
        raise ValidationError(f"{name} has shape {arr.shape}, expected ({lead}, {T}, k)")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _names(names, k, prefix):
    if names is None:
        return tuple(f"{prefix}{c + 1}" for c in range(k))
    names = tuple(names)
    if len(names) != k:
        raise ValidationError(f"{prefix}: {len(names)} names for {k} columns")
    return names


@dataclass
class PanelData:
    """Observed counts and covariates over ``N`` areas and times ``1..T``.

    Covariate tables may be given as ``(N, T)`` (single column) or
    ``(N, T, k)``; pair tables ``z01c``/``z11c`` have a leading edge axis in the
    graph's CSR order.  ``y_lag0`` holds counts at time 0, used only as the
    lagged count for ``t = 1``.
    """

    y: np.ndarray
    graph: NeighborGraph
    z: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    z01c: Optional[np.ndarray] = None
    z11c: Optional[np.ndarray] = None
    y_lag0: Optional[np.ndarray] = None
    population: Optional[np.ndarray] = None
    z_names: Optional[Sequence[str]] = None
    x_names: Optional[Sequence[str]] = None
    w_names: Optional[Sequence[str]] = None
    z01c_names: Optional[Sequence[str]] = None
    z11c_names: Optional[Sequence[str]] = None
    area_ids: Optional[Sequence[str]] = None
    times: Optional[Sequence[int]] = None

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 2:
            raise ValidationError("y must be an (N, T) table")
        if not np.all(np.isfinite(y)) or np.any(y < 0) or np.any(y != np.round(y)):
            raise ValidationError("y must hold non-negative integer counts")
        self.y = y.astype(np.int64)
        N, T = self.y.shape
        if N != self.graph.n_areas:
            raise ValidationError(f"y has {N} areas, graph has {self.graph.n_areas}")
        E = self.graph.n_edges
        self.z = _as_cov(self.z, N, T, "z")
        self.x = _as_cov(self.x, N, T, "x")
        self.w = _as_cov(self.w, N, T, "w")
        self.z01c = _as_cov(self.z01c, E, T, "z01c")
        self.z11c = _as_cov(self.z11c, E, T, "z11c")
        self.z_names = _names(self.z_names, self.z.shape[2], "z")
        self.x_names = _names(self.x_names, self.x.shape[2], "x")
        self.w_names = _names(self.w_names, self.w.shape[2], "w")
        self.z01c_names = _names(self.z01c_names, self.z01c.shape[2], "z01c")
        self.z11c_names = _names(self.z11c_names, self.z11c.shape[2], "z11c")
        if self.y_lag0 is None:
            self.y_lag0 = np.zeros(N, dtype=np.int64)
        self.y_lag0 = np.asarray(self.y_lag0, dtype=np.int64)
        if self.y_lag0.shape != (N,) or np.any(self.y_lag0 < 0):
            raise ValidationError("y_lag0 must hold N non-negative counts")
        if self.population is not None:
            self.population = np.asarray(self.population, dtype=float)
            if self.population.shape != (N,) or np.any(self.population <= 0):
                raise ValidationError("population must hold N positive values")
        if self.area_ids is None:
            self.area_ids = tuple(str(i) for i in range(N))
        self.area_ids = tuple(str(a) for a in self.area_ids)
        if len(self.area_ids) != N:
            raise ValidationError("area_ids length must equal N")
        if self.times is None:
            self.times = tuple(range(1, T + 1))
        self.times = tuple(int(t) for t in self.times)
        if len(self.times) != T:
            raise ValidationError("times length must equal T")

    @property
    def n_areas(self) -> int:
        return self.y.shape[0]

    @property
    def n_times(self) -> int:
        return self.y.shape[1]

    def lagged_counts(self) -> np.ndarray:
        """``(N, T)`` table of ``y_{i, t-1}``."""
        return np.concatenate([self.y_lag0[:, None], self.y[:, :-1]], axis=1)

    def condition_on_first(self) -> tuple["PanelData", "InitialStateDist"]:
        """Drop time 1 from the modelled period and use it as the initial state.

        The returned initial distribution is degenerate at presence where the
        first count is positive and Bernoulli(0.5) otherwise.
        """
        if self.n_times < 2:
            raise ValidationError("need at least two times to condition on the first")
        y0 = self.y[:, 0]
        cut = lambda a: None if a is None else a[:, 1:]
        panel = replace(
            self,
            y=self.y[:, 1:],
            z=cut(self.z),
            x=cut(self.x),
            w=cut(self.w),
            z01c=cut(self.z01c),
            z11c=cut(self.z11c),
            y_lag0=y0.copy(),
            times=self.times[1:],
        )
        return panel, InitialStateDist(np.where(y0 > 0, 1.0, 0.5))


@dataclass
class StateField:
    s: np.ndarray
    fixed_mask: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.int8)
        self.fixed_mask = np.asarray(self.fixed_mask, dtype=bool)
        if self.s.shape != self.fixed_mask.shape:
            raise ValidationError("s and fixed_mask shapes differ")
        if not np.all((self.s == 0) | (self.s == 1)):
            raise ValidationError("states must be 0 or 1")

    def copy(self) -> "StateField":
        return StateField(self.s.copy(), self.fixed_mask.copy())


@dataclass
class InitialStateDist:
    prob: np.ndarray

    def __post_init__(self):
        self.prob = np.asarray(self.prob, dtype=float)
        if self.prob.ndim != 1 or np.any((self.prob < 0) | (self.prob > 1)) or not np.all(np.isfinite(self.prob)):
            raise ValidationError("initial presence probabilities must lie in [0, 1]")

    @classmethod
    def constant(cls, n_areas, p=0.5):
        return cls(np.full(n_areas, float(p)))

    def log_probs(self):
        with np.errstate(divide="ignore"):
            return np.log1p(-self.prob), np.log(self.prob)


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class MeanModelSpec:
    """Form of the NB mean ``lambda_it``.

    ``log-linear``: ``log lambda = beta0 + x'beta`` with ``covariates`` naming
    columns of ``x`` (``None`` selects all).  ``lag_log_cases`` appends
    ``log(y_{t-1} + 1)``.

    ``endemic-epidemic``: ``lambda = lambda_AR * y_{t-1} + lambda_EN`` with
    each log-rate linear in its covariates and, optionally, per-area random
    intercepts.
    """

    variant: str = "log-linear"
    covariates: Optional[tuple] = None
    lag_log_cases: bool = False
    ar_covariates: tuple = ()
    en_covariates: tuple = ()
    random_ar: bool = False
    random_en: bool = False

    def __post_init__(self):
        if self.variant not in MEAN_VARIANTS:
            raise ValidationError(f"unknown mean-model variant {self.variant!r}")


@dataclass(frozen=True)
class ModelSpec:
    mean: MeanModelSpec = field(default_factory=MeanModelSpec)
    emission: str = "negbin"
    overdispersion: str = "global"
    overdispersion_covariates: tuple = ()
    zero_inflation: bool = True
    transition_covariates: Optional[tuple] = None
    transition_lag_log_cases: bool = False
    reemergence_pair_covariates: Optional[tuple] = None
    persistence_pair_covariates: Optional[tuple] = None
    neighbor_prevalence: tuple = ()

    def __post_init__(self):
        if self.emission not in EMISSIONS:
            raise ValidationError(f"unknown emission {self.emission!r}")
        if self.overdispersion not in ("global", "area"):
            raise ValidationError(f"unknown overdispersion {self.overdispersion!r}")
        for k in self.neighbor_prevalence:
            if k not in ("reemergence", "persistence"):
                raise ValidationError(f"neighbor_prevalence entry {k!r}")


def _select(names, wanted, label):
    if wanted is None:
        return list(range(len(names)))
    idx = []
    for w in wanted:
        if w not in names:
            raise ValidationError(f"{label} covariate {w!r} not in data columns {list(names)}")
        idx.append(names.index(w))
    return idx


# ---------------------------------------------------------------------------
# parameter layout


@dataclass
class ParamLayout:
    names: list
    groups: dict

    def __post_init__(self):
        self.index = {n: k for k, n in enumerate(self.names)}

    @property
    def size(self) -> int:
        return len(self.names)

    def idx(self, group) -> np.ndarray:
        return np.asarray(self.groups.get(group, []), dtype=np.int64)

    def theta_index(self) -> np.ndarray:
        return np.concatenate([self.idx(g) for g in ("zeta", "zeta_c", "eta", "eta_c")]).astype(np.int64)

    def beta_index(self) -> np.ndarray:
        theta = set(self.theta_index().tolist())
        return np.array([k for k in range(self.size) if k not in theta], dtype=np.int64)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.layout.size,):
            raise ValidationError("parameter vector length does not match layout")

    def __getitem__(self, name):
        return self.values[self.layout.index[name]]

    def __setitem__(self, name, value):
        self.values[self.layout.index[name]] = value

    @property
    def theta(self) -> np.ndarray:
        return self.values[self.layout.theta_index()]

    @property
    def beta(self) -> np.ndarray:
        return self.values[self.layout.beta_index()]

    def as_dict(self) -> dict:
        return dict(zip(self.layout.names, self.values.tolist()))

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


# ---------------------------------------------------------------------------
# scalar densities


def _log_sigmoid(l):
    l = np.clip(l, -CLAMP, CLAMP)
    return -np.logaddexp(0.0, -l)


def logistic(l):
    return np.exp(_log_sigmoid(l))


def log_nb_pmf(y, lam, r):
    """Log NB pmf with mean ``lam`` and variance ``lam * (1 + lam / r)``.

    ``r = inf`` gives the Poisson limit.
    """
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    r = np.asarray(r, dtype=float)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(lam))) or np.any(np.isnan(r)):
        raise ValidationError("non-finite input to log_nb_pmf")
    if np.any(y < 0) or np.any(lam < 0) or np.any(r <= 0):
        raise ValidationError("log_nb_pmf requires y >= 0, lambda >= 0, r > 0")
    return _nb_logpmf(y, lam, r)


def log_rising(y, r):
    """``gammaln(y + r) - gammaln(r)``, with a series in ``1/r`` where the difference cancels."""
    y, r = np.broadcast_arrays(np.asarray(y, float), np.asarray(r, float))
    big = y * y < 1e-3 * r
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = gammaln(y + r) - gammaln(r)
        q = y * (y - 1) / r
        series = y * np.log(r) + q / 2 - q * (2 * y - 1) / r / 12
    out = np.where(big, series, direct)
    return out if out.ndim else float(out)


def _nb_logpmf(y, lam, r):
    y, lam, r = np.broadcast_arrays(np.asarray(y, float), np.asarray(lam, float), np.asarray(r, float))
    out = np.empty(y.shape)
    pois = np.isinf(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        if np.any(pois):
            yp, lp = y[pois], lam[pois]
            out[pois] = np.where(yp > 0, yp * np.log(lp), 0.0) - lp - gammaln(yp + 1)
        nb = ~pois
        if np.any(nb):
            yn, ln, rn = y[nb], lam[nb], r[nb]
            out[nb] = (
                log_rising(yn, rn) - gammaln(yn + 1)
                - rn * np.log1p(ln / rn)
                + np.where(yn > 0, yn * (np.log(ln) - np.log(rn + ln)), 0.0)
            )
    return out if out.ndim else float(out)


def emission_logprob(y, s, lam, r):
    """``log p(y | S=s)``: structural zero when absent, NB when present."""
    y = np.asarray(y)
    s = np.asarray(s)
    if np.any((s != 0) & (s != 1)):
        raise ValidationError("state must be 0 or 1")
    nb = log_nb_pmf(y, lam, r)
    out = np.where(s == 1, nb, np.where(y == 0, 0.0, IMPOSSIBLE))
    return out if np.ndim(out) else float(out)


def area_transition_matrix(p01, p11):
    """2x2 row-stochastic matrix ``[[1-p01, p01], [1-p11, p11]]``."""
    p01 = float(p01)
    p11 = float(p11)
    return np.array([[1.0 - p01, p01], [1.0 - p11, p11]])


# ---------------------------------------------------------------------------
# the model


class Model:
    """Binds panel data, model specification and initial state distribution.

    Builds the covariate design once and evaluates the model densities for any
    parameter vector.
    """

    def __init__(self, panel: PanelData, spec: Optional[ModelSpec] = None,
                 init: Optional[InitialStateDist] = None):
        self.panel = panel
        self.spec = spec or ModelSpec()
        N, T = panel.n_areas, panel.n_times
        self.N, self.T = N, T
        self.graph = panel.graph
        if init is None:
            init = InitialStateDist.constant(N, 0.5)
        if init.prob.shape != (N,):
            raise ValidationError("initial state distribution must have one entry per area")
        self.init = init
        self.logpi0, self.logpi1 = init.log_probs()
        if self.spec.neighbor_prevalence and panel.population is None:
            raise ValidationError("neighbor_prevalence requires population")
        self._select_columns()
        self._build_static()
        self.layout = self._build_layout()
        self.y = panel.y
        self.ypos = panel.y > 0
        self.gl_y1 = gammaln(panel.y + 1.0)
        self.log_mean_count = self._log_mean_counts()

    # -- design --------------------------------------------------------------

    def _select_columns(self):
        p, s = self.panel, self.spec
        m = s.mean
        if m.variant == "log-linear":
            self.x_cols = _select(p.x_names, m.covariates, "mean")
        else:
            self.ar_cols = _select(p.x_names, m.ar_covariates, "AR")
            self.en_cols = _select(p.x_names, m.en_covariates, "EN")
        self.w_cols = _select(p.w_names, s.overdispersion_covariates, "overdispersion")
        self.z_cols = _select(p.z_names, s.transition_covariates, "transition")
        self.z01_cols = _select(p.z01c_names, s.reemergence_pair_covariates, "reemergence pair")
        self.z11_cols = _select(p.z11c_names, s.persistence_pair_covariates, "persistence pair")

    def dynamic_columns(self, ylag):
        """Covariates computed from lagged counts.

        ``ylag`` is ``(N,)`` or ``(N, T)``; returns the appended mean-model
        column, transition column and pair-prevalence column (per edge), each
        ``None`` when unused.
        """
        s = self.spec
        ylag = np.asarray(ylag, dtype=float)
        xl = np.log1p(ylag) if s.mean.variant == "log-linear" and s.mean.lag_log_cases else None
        zl = np.log1p(ylag) if s.transition_lag_log_cases else None
        prev = None
        if s.neighbor_prevalence:
            pop = self.panel.population
            src = self.graph.indices
            yl = ylag[src] if ylag.ndim == 1 else ylag[src, :]
            pp = pop[src] if ylag.ndim == 1 else pop[src][:, None]
            prev = np.log1p(yl / pp)
        return xl, zl, prev

    def assemble(self, x, z, z01c, z11c, w, ylag):
        """Model design arrays from raw covariate slices and lagged counts.

        Works for the full panel (``(N, T, k)`` slices, ``(N, T)`` lag) and for
        a single forecast time (``(N, k)`` slices, ``(N,)`` lag).
        """
        xl, zl, prev = self.dynamic_columns(ylag)
        cat = lambda a, extra: a if extra is None else np.concatenate([a, extra[..., None]], axis=-1)
        d = {}
        if self.spec.mean.variant == "log-linear":
            d["X"] = cat(x[..., self.x_cols], xl)
        else:
            d["XA"] = x[..., self.ar_cols]
            d["XE"] = x[..., self.en_cols]
        d["W"] = w[..., self.w_cols]
        d["Z"] = cat(z[..., self.z_cols], zl)
        z01 = z01c[..., self.z01_cols]
        z11 = z11c[..., self.z11_cols]
        if "reemergence" in self.spec.neighbor_prevalence:
            z01 = cat(z01, prev)
        if "persistence" in self.spec.neighbor_prevalence:
            z11 = cat(z11, prev)
        d["Z01"] = z01
        d["Z11"] = z11
        d["ylag"] = np.asarray(ylag, dtype=float)
        return d

    def _build_static(self):
        p = self.panel
        d = self.assemble(p.x, p.z, p.z01c, p.z11c, p.w, p.lagged_counts())
        self.design = d
        self.K = d["Z"].shape[-1]
        self.K01 = d["Z01"].shape[-1]
        self.K11 = d["Z11"].shape[-1]
        self.A = self.graph.adjacency_matrix()
        self.M = self.graph.incidence_matrix()

    def _build_layout(self):
        s, m = self.spec, self.spec.mean
        names, groups = [], {}

        def add(group, labels):
            start = len(names)
            names.extend(labels)
            groups.setdefault(group, []).extend(range(start, len(names)))

        N = self.N
        if m.variant == "log-linear":
            nx = self.design["X"].shape[-1]
            add("mean", ["beta0"] + [f"beta{k + 1}" for k in range(nx)])
        else:
            add("mean", ["beta0_ar"] + [f"beta_ar{k + 1}" for k in range(len(self.ar_cols))])
            add("mean", ["beta0_en"] + [f"beta_en{k + 1}" for k in range(len(self.en_cols))])
        if s.emission == "negbin":
            if s.overdispersion == "global":
                add("dispersion", ["log_r"])
            else:
                add("dispersion_area", [f"log_r[{i}]" for i in range(N)])
            add("dispersion", [f"gamma{k + 1}" for k in range(len(self.w_cols))])
        if s.zero_inflation:
            add("zeta", ["zeta0"] + [f"zeta{k + 1}" for k in range(self.K)])
            add("zeta_c", ["zeta0c"] + [f"zeta{k + 1}c" for k in range(self.K01)])
            add("eta", ["eta0"] + [f"eta{k + 1}" for k in range(self.K)])
            add("eta_c", ["eta0c"] + [f"eta{k + 1}c" for k in range(self.K11)])
        if m.variant == "endemic-epidemic":
            if m.random_ar:
                add("random_ar", [f"b_ar[{i}]" for i in range(N)])
                add("hyper", ["sigma_ar"])
            if m.random_en:
                add("random_en", [f"b_en[{i}]" for i in range(N)])
                add("hyper", ["sigma_en"])
        return ParamLayout(names, groups)

    def _log_mean_counts(self):
        y = self.panel.y.astype(float)
        out = np.empty(self.N)
        overall = y[y > 0].mean() if np.any(y > 0) else 1.0
        for i in range(self.N):
            pos = y[i][y[i] > 0]
            out[i] = np.log(pos.mean() if pos.size else overall)
        return out

    # -- parameters ------------------------------------------------------------

    def params(self, values=None, **named) -> ParamVector:
        v = ParamVector(np.zeros(self.layout.size) if values is None else values, self.layout)
        for k, val in named.items():
            v[k] = val
        return v

    def _get(self, v, group):
        return v[self.layout.idx(group)]

    # -- mean model ----------------------------------------------------------------

    def log_linear_predictors(self, v, d=None):
        """Clamped linear predictors of the mean model."""
        d = self.design if d is None else d
        v = v.values if isinstance(v, ParamVector) else v
        mean = self._get(v, "mean")
        if self.spec.mean.variant == "log-linear":
            eta = mean[0] + d["X"] @ mean[1:]
            return (np.clip(eta, -CLAMP, CLAMP),)
        na = 1 + len(self.ar_cols)
        ar = mean[0] + d["XA"] @ mean[1:na]
        en = mean[na] + d["XE"] @ mean[na + 1:]
        if self.spec.mean.random_ar:
            ar = ar + self._re(v, "random_ar", mean[0], ar.ndim)
        if self.spec.mean.random_en:
            en = en + self._re(v, "random_en", mean[na], en.ndim)
        return np.clip(ar, -CLAMP, CLAMP), np.clip(en, -CLAMP, CLAMP)

    def _re(self, v, group, centre, ndim):
        # area intercepts are stored on the intercept scale; offset relative to the fixed intercept
        b = self._get(v, group) - centre
        return b[:, None] if ndim == 2 else b

    def mean_rate(self, v, d=None) -> np.ndarray:
        """``lambda_it`` for every cell (``(N, T)``) or one forecast time."""
        d = self.design if d is None else d
        lp = self.log_linear_predictors(v, d)
        if self.spec.mean.variant == "log-linear":
            return np.exp(lp[0])
        ar, en = lp
        return np.exp(ar) * d["ylag"] + np.exp(en)

    def dispersion(self, v, d=None) -> np.ndarray:
        """``r_it`` broadcastable to ``(N, T)``; ``inf`` for the Poisson emission."""
        d = self.design if d is None else d
        v = v.values if isinstance(v, ParamVector) else v
        if self.spec.emission == "poisson":
            return np.full(d["W"].shape[:-1], np.inf)
        lay = self.layout
        if self.spec.overdispersion == "global":
            base = v[lay.index["log_r"]]
        else:
            base = self._get(v, "dispersion_area")
            if d["W"].ndim == 3:
                base = base[:, None]
        gam = v[lay.idx("dispersion")][1:] if self.spec.overdispersion == "global" else v[lay.idx("dispersion")]
        lr = base + d["W"] @ gam
        return np.exp(np.clip(lr, -CLAMP, CLAMP))

    def emission_present(self, v, d=None, y=None) -> np.ndarray:
        """``log p(y_it | S_it = 1)`` for every cell."""
        lam = self.mean_rate(v, d)
        r = self.dispersion(v, d)
        y = self.y if y is None else y
        return _nb_logpmf(y, lam, r)

    # -- transition model ------------------------------------------------------

    def transition_inputs(self, v, d=None):
        """Non-coupling linear predictors and per-edge coupling effects.

        Returns ``(B01, B11, PHI01, PHI11)`` with shapes ``(N, T)`` and
        ``(E, T)`` (or without the time axis for a single forecast time).
        """
        d = self.design if d is None else d
        v = v.values if isinstance(v, ParamVector) else v
        zeta, zc = self._get(v, "zeta"), self._get(v, "zeta_c")
        eta, ec = self._get(v, "eta"), self._get(v, "eta_c")
        B01 = zeta[0] + d["Z"] @ zeta[1:]
        B11 = eta[0] + d["Z"] @ eta[1:]
        PHI01 = zc[0] + d["Z01"] @ zc[1:]
        PHI11 = ec[0] + d["Z11"] @ ec[1:]
        return B01, B11, PHI01, PHI11

    def coupling_effect(self, v, i, j, t, which):
        """``phi_{j->i}`` at time ``t`` for ``which`` in {reemergence, persistence}."""
        e = self.graph.edge_index(i, j)
        _, _, P01, P11 = self.transition_inputs(v)
        if which == "reemergence":
            return float(P01[e, t - 1])
        if which == "persistence":
            return float(P11[e, t - 1])
        raise ValidationError(f"unknown coupling {which!r}")

    def transition_probs(self, v, s_prev, t=None, inputs=None):
        """``(p01, p11)`` for all areas given the field ``s_prev`` at ``t - 1``.

        ``inputs`` may carry precomputed single-time transition inputs
        (forecasting); otherwise time ``t`` of the fitted period is used.
        """
        if inputs is None:
            B01, B11, P01, P11 = self.transition_inputs(v)
            B01, B11, P01, P11 = B01[:, t - 1], B11[:, t - 1], P01[:, t - 1], P11[:, t - 1]
        else:
            B01, B11, P01, P11 = inputs
        s_src = np.asarray(s_prev, dtype=float)[self.graph.indices]
        c01 = self.M @ (P01 * s_src)
        c11 = self.M @ (P11 * s_src)
        return logistic(B01 + c01), logistic(B11 + c11)

    def presence_prob(self, v, s_prev, t=None, inputs=None):
        """``P(S_it = 1 | S_{t-1})`` for all areas."""
        p01, p11 = self.transition_probs(v, s_prev, t, inputs)
        s_prev = np.asarray(s_prev)
        return np.where(s_prev == 1, p11, p01)

    def transition_logits(self, v, S):
        """``(N, T)`` linear predictors of ``P(S_it = 1 | S_{t-1})``."""
        B01, B11, P01, P11 = self.transition_inputs(v)
        prev = S[:, :-1].astype(float)
        src = prev[self.graph.indices]
        c01 = self.M @ (P01 * src)
        c11 = self.M @ (P11 * src)
        return np.where(prev == 1, B11 + c11, B01 + c01)

    def transition_loglik(self, v, S) -> float:
        if not self.spec.zero_inflation:
            return 0.0
        l = self.transition_logits(v, S)
        cur = S[:, 1:]
        return float(np.sum(np.where(cur == 1, _log_sigmoid(l), _log_sigmoid(-l))))

    # -- states ------------------------------------------------------------------

    def fixed_mask(self) -> np.ndarray:
        mask = np.zeros((self.N, self.T + 1), dtype=bool)
        if not self.spec.zero_inflation:
            mask[:] = True
            return mask
        mask[:, 1:] = self.ypos
        p = self.init.prob
        mask[:, 0] = (p == 0.0) | (p == 1.0)
        return mask

    def check_states(self, states):
        S = states.s if isinstance(states, StateField) else np.asarray(states)
        if S.shape != (self.N, self.T + 1):
            raise ValidationError(f"states have shape {S.shape}, expected {(self.N, self.T + 1)}")
        return S

    def joint_loglik(self, states, v) -> float:
        """Complete-data log-likelihood of counts and states."""
        S = self.check_states(states)
        if np.any((S[:, 1:] == 0) & self.ypos):
            return IMPOSSIBLE
        le = self.emission_present(v)
        em = float(np.sum(np.where(S[:, 1:] == 1, le, 0.0)))
        if not self.spec.zero_inflation:
            if np.any(S != 1):
                return IMPOSSIBLE
            return em
        init = float(np.sum(np.where(S[:, 0] == 1, self.logpi1, self.logpi0)))
        if not np.isfinite(init):
            return IMPOSSIBLE
        return em + init + self.transition_loglik(v, S)


# module-level forms of the per-cell operations


def mean_rate(model: Model, v, i, t) -> float:
    return float(model.mean_rate(v)[i, t - 1])


def coupling_effect(model: Model, v, i, j, t, which) -> float:
    return model.coupling_effect(v, i, j, t, which)


def transition_probs(model: Model, v, i, t, s_prev) -> tuple:
    p01, p11 = model.transition_probs(v, s_prev, t)
    return float(p01[i]), float(p11[i])


def joint_loglik(model: Model, states, v) -> float:
    return model.joint_loglik(states, v)
