"""Convergence and fit diagnostics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .model import NumericalError, ValidationError

MIN_ESS_DRAWS = 100


def _autocov(x):
    n = x.size
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    return acov


def ess(draws, return_flag: bool = False):
    """Effective sample size of one chain.

    Autocorrelations are summed over Geyer's initial monotone sequence of
    paired sums.  The result is capped at ``n``.  A constant sequence returns
    ``n`` and, with ``return_flag``, ``degenerate=True``.
    """
    x = np.asarray(draws, dtype=float).ravel()
    n = x.size
    if n < MIN_ESS_DRAWS:
        raise ValidationError(f"ESS needs at least {MIN_ESS_DRAWS} draws, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("draws contain non-finite values")
    acov = _autocov(x)
    if acov[0] <= 1e-14 * max(1.0, float(np.mean(x * x))):
        return (float(n), True) if return_flag else float(n)
    rho = acov / acov[0]
    # Gamma_k = rho_{2k} + rho_{2k+1}; keep the initial positive, monotone part
    m = (n - 1) // 2
    pairs = rho[0:2 * m:2] + rho[1:2 * m + 1:2]
    total = 0.0
    prev = np.inf
    for g in pairs:
        if g <= 0:
            break
        g = min(g, prev)
        total += g
        prev = g
    tau = -1.0 + 2.0 * total
    out = min(float(n), n / max(tau, 1e-12))
    return (out, False) if return_flag else out


def multichain_ess(chains) -> float:
    """Sum of per-chain ESS over ``(n_chains, n)`` draws."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    return float(sum(ess(c) for c in chains))


def batch_means_mcse(chains, batch_size: Optional[int] = None) -> float:
    """Monte Carlo standard error of the pooled mean of ``(n_chains, n)`` draws.

    Non-overlapping batches of ``batch_size`` (default ``floor(sqrt(n))``)
    draws within each chain; the batch-mean variance scaled by the batch size
    estimates the asymptotic variance.
    """
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    C, n = x.shape
    b = int(np.sqrt(n)) if batch_size is None else int(batch_size)
    a = n // max(b, 1)
    if b < 1 or a * C < 2:
        raise ValidationError("need at least two batches")
    means = x[:, :a * b].reshape(C, a, b).mean(axis=2)
    return float(np.sqrt(means.var(ddof=1) * b / (C * a * b)))


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor for ``(m, n)`` draws, ``m >= 2``.

    ``sqrt(V / W_n)`` with ``V = (n - 1) / n * W + B / n`` and ``W_n`` the
    within-chain variance using divisor ``n``; identical chains give exactly 1.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError("Gelman-Rubin needs at least two chains")
    m, n = x.shape
    if n < 2:
        raise ValidationError("each chain needs at least two draws")
    means = x.mean(axis=1)
    w_pop = x.var(axis=1, ddof=0).mean()
    b_over_n = means.var(ddof=1)
    if w_pop == 0.0:
        return 1.0 if b_over_n == 0.0 else np.inf
    return float(np.sqrt(1.0 + b_over_n / w_pop))


# ---------------------------------------------------------------------------
# WAIC


@dataclass
class WaicResult:
    waic: float
    lppd: float
    p_waic: float
    pointwise_lppd: np.ndarray
    pointwise_pwaic: np.ndarray
    n_draws: int

    @property
    def pointwise_waic(self):
        return -2.0 * (self.pointwise_lppd - self.pointwise_pwaic)


def _waic(lppd_i, var_i, n):
    if np.any(~np.isfinite(lppd_i)):
        bad = np.argwhere(~np.isfinite(np.asarray(lppd_i)))
        raise NumericalError(f"pointwise likelihood is zero in every draw at {bad[:5].tolist()}")
    lppd = float(np.sum(lppd_i))
    p = float(np.sum(var_i))
    return WaicResult(-2.0 * lppd + 2.0 * p, lppd, p, np.asarray(lppd_i), np.asarray(var_i), n)


def waic_from_loglik(loglik) -> WaicResult:
    """WAIC from a ``(n_draws, ...)`` array of pointwise log-likelihoods.

    The penalty uses the variance with divisor ``n_draws``.
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim < 1 or ll.shape[0] < 1:
        raise ValidationError("need at least one draw")
    n = ll.shape[0]
    lppd_i = logsumexp(ll, axis=0) - np.log(n)
    with np.errstate(invalid="ignore"):
        var_i = ll.var(axis=0, ddof=0)
    return _waic(lppd_i, var_i, n)


def waic(store) -> WaicResult:
    """WAIC from the per-cell accumulators kept by the engine.

    Each pointwise term is ``log p(y_it | S_{t-1}, v)`` with ``S_it`` summed
    over its transition distribution.
    """
    lppd_i, _, var_i, n = store.waic_moments()
    return _waic(lppd_i, np.maximum(var_i, 0.0), n)


def pointwise_loglik_draws(store, chain: Optional[int] = None) -> np.ndarray:
    """Recompute the ``(n_draws, N, T)`` pointwise log-likelihoods (needs full states)."""
    from .engine import pointwise_loglik

    states = store.states
    if states is None:
        raise ValidationError("full state draws were not retained")
    chains = range(store.n_chains) if chain is None else [chain]
    out = []
    for c in chains:
        for k in range(store.n_kept):
            out.append(pointwise_loglik(store.model, store.chains[c].draws[k], states[c, k]))
    return np.array(out)


# ---------------------------------------------------------------------------
# Pearson residuals


@dataclass
class AcfTable:
    acf: np.ndarray            # (N, max_lag + 1)
    band: float
    residuals: np.ndarray      # (N, T)
    zero_variance: np.ndarray  # (N, T) flags
    undefined: np.ndarray      # (N,) flags

    @property
    def max_lag(self):
        return self.acf.shape[1] - 1

    def fraction_outside(self) -> float:
        ok = ~self.undefined
        if not np.any(ok) or self.max_lag < 1:
            return np.nan
        lags = self.acf[ok, 1:]
        return float(np.mean(np.abs(lags) > self.band))


def pearson_residuals(y, replicates):
    """``(y - mean) / sd`` against replicate draws ``(M, N, T)``.

    Zero-variance cells are flagged; they get residual 0 when ``y`` equals
    the replicate mean and NaN otherwise.
    """
    y = np.asarray(y, dtype=float)
    rep = np.asarray(replicates, dtype=float)
    if rep.shape[1:] != y.shape:
        raise ValidationError(f"replicates have shape {rep.shape}, expected (M, {y.shape})")
    mu = rep.mean(axis=0)
    sd = rep.std(axis=0, ddof=1) if rep.shape[0] > 1 else np.zeros_like(mu)
    zero = sd == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        res = (y - mu) / sd
    res[zero] = np.where(y[zero] == mu[zero], 0.0, np.nan)
    return res, zero


def _acf_1d(e, max_lag):
    ok = np.isfinite(e)
    mu = e[ok].mean() if ok.any() else np.nan
    d = np.where(ok, e - mu, 0.0)
    denom = np.sum(d * d)
    out = np.full(max_lag + 1, np.nan)
    if not ok.any() or denom <= 1e-300:
        return out, True
    for k in range(max_lag + 1):
        out[k] = np.sum(d[:e.size - k] * d[k:]) / denom
    return out, False


def pearson_residual_acf(y, replicates, max_lag: int = 12) -> AcfTable:
    """Per-area autocorrelation of Pearson residuals up to ``max_lag``.

    Bands are ``+/- 1.96 / sqrt(T)``.  Areas whose residuals are all zero
    (or otherwise constant) have an undefined ACF and are flagged.
    """
    res, zero = pearson_residuals(y, replicates)
    N, T = res.shape
    if max_lag >= T:
        raise ValidationError("max_lag must be smaller than the series length")
    acf = np.empty((N, max_lag + 1))
    undef = np.zeros(N, dtype=bool)
    for i in range(N):
        acf[i], undef[i] = _acf_1d(res[i], max_lag)
    if zero.any():
        warnings.warn(f"{int(zero.sum())} cells have zero predictive variance", stacklevel=2)
    return AcfTable(acf, 1.96 / np.sqrt(T), res, zero, undef)


# ---------------------------------------------------------------------------
# report


@dataclass
class DiagnosticsReport:
    names: list
    ess: np.ndarray
    rhat: np.ndarray
    waic: Optional[WaicResult] = None
    acf: Optional[AcfTable] = None
    notes: list = field(default_factory=list)

    def rows(self):
        return [dict(parameter=n, ess=float(e), rhat=float(r)) for n, e, r in zip(self.names, self.ess, self.rhat)]

    @property
    def min_ess(self):
        return float(np.nanmin(self.ess)) if self.ess.size else np.nan

    @property
    def max_rhat(self):
        return float(np.nanmax(self.rhat)) if self.rhat.size else np.nan


def diagnose(store, acf: Optional[AcfTable] = None) -> DiagnosticsReport:
    """ESS and R-hat per parameter plus WAIC when the store has draws."""
    draws = store.draws
    P = len(store.names)
    e = np.full(P, np.nan)
    r = np.full(P, np.nan)
    notes = []
    n = draws.shape[1] if draws.ndim == 3 else 0
    if n >= MIN_ESS_DRAWS:
        for k in range(P):
            e[k] = multichain_ess(draws[:, :, k])
    elif n:
        notes.append(f"ESS not computed: {n} draws per chain (< {MIN_ESS_DRAWS})")
    if draws.shape[0] >= 2 and n >= 2:
        for k in range(P):
            r[k] = gelman_rubin(draws[:, :, k])
    w = waic(store) if n else None
    return DiagnosticsReport(list(store.names), e, r, w, acf, notes)
