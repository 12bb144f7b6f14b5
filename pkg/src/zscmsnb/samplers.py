"""Parameter kernels: adaptive random-walk Metropolis and automated factor slice
sampling, plus the prior."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import gammaln

from .model import IMPOSSIBLE, Model, NumericalError, ParamVector, ValidationError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class PriorSpec:
    """Hyperparameters of the independent priors.

    Per-area overdispersion uses ``log r_i ~ N(log m_i + r_area_offset,
    r_area_sd)`` where ``m_i`` is the mean positive count of area ``i``; the
    defaults put the variance-to-mean ratio ``1 + lambda / r`` between 1.5
    and 5 with 95% prior probability.
    """

    coef_sd: float = 10.0
    r_shape: float = 0.1
    r_rate: float = 0.1
    r_area_offset: float = -0.3466
    r_area_sd: float = 0.530
    sigma_scale: float = 1.0

    def __post_init__(self):
        for name in ("coef_sd", "r_shape", "r_rate", "r_area_sd", "sigma_scale"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"prior {name} must be positive")


def _norm_lpdf(x, mu, sd):
    return -0.5 * LOG_2PI - np.log(sd) - 0.5 * ((x - mu) / sd) ** 2


def log_prior_terms(model: Model, v, priors: PriorSpec) -> np.ndarray:
    """One log-density summand per parameter, on the stored scale.

    ``log_r`` carries the Gamma density of ``r`` plus the log-Jacobian of the
    log transform.  Area intercepts are centred on their fixed intercept with
    the matching ``sigma``.  Out-of-support values give ``-inf``.
    """
    vals = v.values if isinstance(v, ParamVector) else np.asarray(v, float)
    lay = model.layout
    out = _norm_lpdf(vals, 0.0, priors.coef_sd)
    if "log_r" in lay.index:
        k = lay.index["log_r"]
        lr = vals[k]
        a, b = priors.r_shape, priors.r_rate
        out[k] = a * np.log(b) - gammaln(a) + a * lr - b * np.exp(min(lr, 700.0))
    ia = lay.idx("dispersion_area")
    if ia.size:
        out[ia] = _norm_lpdf(vals[ia], model.log_mean_count + priors.r_area_offset, priors.r_area_sd)
    for grp, centre, sig in (("random_ar", "beta0_ar", "sigma_ar"), ("random_en", "beta0_en", "sigma_en")):
        ib = lay.idx(grp)
        if not ib.size:
            continue
        s = vals[lay.index[sig]]
        out[ib] = _norm_lpdf(vals[ib], vals[lay.index[centre]], s) if s > 0 else IMPOSSIBLE
    for k in lay.idx("hyper"):
        s = vals[k]
        out[k] = np.log(2.0) + _norm_lpdf(s, 0.0, priors.sigma_scale) if s > 0 else IMPOSSIBLE
    if not np.all(np.isfinite(vals)):
        out[~np.isfinite(vals)] = IMPOSSIBLE
    return out


def log_prior(model: Model, v, priors: Optional[PriorSpec] = None) -> float:
    lp = log_prior_terms(model, v, priors or PriorSpec())
    return float(lp.sum()) if np.all(lp > IMPOSSIBLE) else IMPOSSIBLE


# ---------------------------------------------------------------------------
# adaptive random-walk Metropolis


@dataclass
class AdaptiveRWMState:
    """Scale and batch counters of one scalar (or per-coordinate) ARWM kernel.

    ``schedule="log"`` adapts every ``batch_size`` iterations with
    ``log_scale += 10 * (b + 3) ** -0.8 * (acc - target)`` where ``b`` counts
    completed batches.  ``schedule="bounded"`` moves ``log_scale`` by
    ``+/- min(0.01, b ** -0.5)``.
    """

    log_scale: np.ndarray = field(default_factory=lambda: np.zeros(1))
    target: float = 0.44
    batch_size: int = 50
    schedule: str = "log"
    adapting: bool = True
    batch_index: int = 0
    batch_accepts: np.ndarray = None
    batch_count: int = 0
    n_accepts: np.ndarray = None
    n_steps: int = 0

    def __post_init__(self):
        self.log_scale = np.atleast_1d(np.asarray(self.log_scale, float)).copy()
        if self.schedule not in ("log", "bounded"):
            raise ValidationError(f"unknown adaptation schedule {self.schedule!r}")
        if self.batch_accepts is None:
            self.batch_accepts = np.zeros_like(self.log_scale)
        if self.n_accepts is None:
            self.n_accepts = np.zeros_like(self.log_scale)

    @classmethod
    def create(cls, scale=1.0, size=1, **kw):
        return cls(log_scale=np.full(size, np.log(scale)), **kw)

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def acceptance_rate(self):
        return self.n_accepts / max(self.n_steps, 1)

    def record(self, accepted):
        self.batch_accepts += accepted
        self.n_accepts += accepted
        self.batch_count += 1
        self.n_steps += 1
        if self.batch_count == self.batch_size:
            if self.adapting:
                rate = self.batch_accepts / self.batch_size
                self.batch_index += 1
                b = self.batch_index
                if self.schedule == "log":
                    self.log_scale += 10.0 * (b + 3.0) ** -0.8 * (rate - self.target)
                else:
                    self.log_scale += np.sign(rate - self.target) * min(0.01, b ** -0.5)
            self.batch_accepts[:] = 0.0
            self.batch_count = 0

    def adjustment_bound(self, b):
        """Largest possible ``|log_scale|`` change at batch ``b``."""
        if self.schedule == "log":
            return 10.0 * (b + 3.0) ** -0.8
        return min(0.01, b ** -0.5)


def arwm_step(index: int, values: np.ndarray, log_target: Callable, state: AdaptiveRWMState, rng,
              current: Optional[float] = None):
    """One Metropolis update of ``values[index]`` in place.

    ``log_target`` maps the full vector to a log density.  Returns
    ``(log_target at the kept point, accepted)``.
    """
    cur = log_target(values) if current is None else current
    if not np.isfinite(cur):
        raise NumericalError(f"log target is {cur} at the current point (coordinate {index})")
    old = values[index]
    values[index] = old + state.scale[0] * rng.standard_normal()
    prop = log_target(values)
    accepted = bool(np.log(rng.random()) < prop - cur) if prop > IMPOSSIBLE else False
    if accepted:
        cur = prop
    else:
        values[index] = old
    state.record(float(accepted))
    return cur, accepted


def arwm_vector_step(x: np.ndarray, log_target: Callable, state: AdaptiveRWMState, rng, current=None):
    """Independent scalar updates of every coordinate of ``x`` in one pass.

    ``log_target`` returns one log density per coordinate and must factorize
    across coordinates.  Updates ``x`` in place and returns the per-coordinate
    log densities.
    """
    cur = log_target(x) if current is None else current
    if not np.all(np.isfinite(cur)):
        raise NumericalError("non-finite log target at the current point")
    prop_x = x + state.scale * rng.standard_normal(x.shape)
    prop = log_target(prop_x)
    u = np.log(rng.random(x.shape))
    acc = (prop > IMPOSSIBLE) & (u < prop - cur)
    x[acc] = prop_x[acc]
    cur = np.where(acc, prop, cur)
    state.record(acc.astype(float))
    return cur


# ---------------------------------------------------------------------------
# automated factor slice sampling


@dataclass
class FactorSliceState:
    """Factor basis, per-factor widths and adaptation counters.

    The basis comes from the eigenvectors of the running covariance of the
    sampled sub-vector; it is refreshed every ``refresh_every`` sweeps while
    adapting.  Widths are rescaled every ``width_every`` sweeps by
    ``2 * n_expand / (n_expand + n_contract)``.
    """

    dim: int
    basis: np.ndarray = None
    widths: np.ndarray = None
    refresh_every: int = 200
    width_every: int = 50
    max_steps: int = 100
    adapting: bool = True
    n_sweeps: int = 0
    n_expand: np.ndarray = None
    n_contract: np.ndarray = None
    mean: np.ndarray = None
    m2: np.ndarray = None
    n_obs: int = 0

    def __post_init__(self):
        d = self.dim
        if d < 1:
            raise ValidationError("factor slice block needs at least one coordinate")
        self.basis = np.eye(d) if self.basis is None else np.asarray(self.basis, float)
        self.widths = np.ones(d) if self.widths is None else np.asarray(self.widths, float).copy()
        self.n_expand = np.zeros(d)
        self.n_contract = np.zeros(d)
        self.mean = np.zeros(d)
        self.m2 = np.zeros((d, d))

    def observe(self, x):
        self.n_obs += 1
        delta = x - self.mean
        self.mean += delta / self.n_obs
        self.m2 += np.outer(delta, x - self.mean)

    def covariance(self):
        return self.m2 / max(self.n_obs - 1, 1)

    def refresh_basis(self):
        if self.n_obs < self.dim + 1:
            return
        evals, evecs = np.linalg.eigh(self.covariance())
        evals = np.maximum(evals, 1e-12 * max(evals.max(), 1e-300))
        self.basis = evecs
        self.widths = 2.0 * np.sqrt(evals)
        self.n_expand[:] = 0
        self.n_contract[:] = 0

    def tune_widths(self):
        tot = self.n_expand + self.n_contract
        ok = tot > 0
        # no expansions at all means the width is too large; halve it
        factor = np.where(ok, 2.0 * self.n_expand / np.where(ok, tot, 1.0), 1.0)
        factor = np.where(ok & (self.n_expand == 0), 0.5, factor)
        self.widths = self.widths * factor
        self.n_expand[:] = 0
        self.n_contract[:] = 0


def _slice_1d(x, direction, width, f, level, state, k, rng):
    u = rng.random()
    lo = -width * u
    hi = lo + width
    steps = 0
    while f(x + lo * direction) > level:
        lo -= width
        steps += 1
        state.n_expand[k] += 1
        if steps > state.max_steps:
            raise NumericalError(f"slice stepping-out exceeded {state.max_steps} steps")
    steps = 0
    while f(x + hi * direction) > level:
        hi += width
        steps += 1
        state.n_expand[k] += 1
        if steps > state.max_steps:
            raise NumericalError(f"slice stepping-out exceeded {state.max_steps} steps")
    for _ in range(200):
        step = lo + (hi - lo) * rng.random()
        cand = x + step * direction
        fc = f(cand)
        if fc >= level:
            return cand, fc
        state.n_contract[k] += 1
        if step < 0:
            lo = step
        else:
            hi = step
    # the interval has collapsed onto the current point
    return x, None


def afss_step(indices, values: np.ndarray, log_target: Callable, state: FactorSliceState, rng,
              current: Optional[float] = None) -> float:
    """One slice update along every factor direction of ``values[indices]``.

    Updates ``values`` in place and returns the log target at the new point.
    """
    indices = np.asarray(indices)
    if indices.size < 2:
        raise ValidationError("factor slice sampling needs a sub-vector of length >= 2")
    work = values.copy()

    def f(sub):
        work[indices] = sub
        return log_target(work)

    x = values[indices].copy()
    cur = f(x) if current is None else current
    if not np.isfinite(cur):
        raise NumericalError("log target is not finite at the current point")
    for k in range(state.dim):
        level = cur - rng.exponential()
        x_new, f_new = _slice_1d(x, state.basis[:, k], state.widths[k], f, level, state, k, rng)
        if f_new is not None:
            x, cur = x_new, f_new
    values[indices] = x
    state.n_sweeps += 1
    if state.adapting:
        state.observe(x)
        if state.n_sweeps % state.width_every == 0:
            state.tune_widths()
        if state.n_sweeps % state.refresh_every == 0:
            state.refresh_basis()
    return cur
