"""Compiled inner loops for the state samplers.

All time-indexed arrays are padded so column ``t`` is time ``t`` (``0..T``).
Block states are integer codes over ``2**nc`` configurations in lexicographic
order: member ``k`` of the block is bit ``nc - 1 - k`` of the code.
Uniform variates are drawn by the caller so runs stay reproducible under a
numpy ``Generator``.
"""
import numpy as np
from numba import njit

CLAMP = 30.0
NEG_INF = -np.inf


@njit(cache=True)
def log_sig(l):
    if l > CLAMP:
        l = CLAMP
    elif l < -CLAMP:
        l = -CLAMP
    if l >= 0.0:
        return -np.log1p(np.exp(-l))
    return l - np.log1p(np.exp(l))


@njit(cache=True)
def _bit(code, k, nc):
    return (code >> (nc - 1 - k)) & 1


@njit(cache=True)
def _linpred(j, t, sj_prev, S, B01, B11, PHI01, PHI11, indptr, indices, bpos, code, nc):
    """Logit of P(S_jt = 1) given S_{j,t-1} = sj_prev; block members read ``code``."""
    if sj_prev == 1:
        val = B11[j, t]
    else:
        val = B01[j, t]
    for e in range(indptr[j], indptr[j + 1]):
        src = indices[e]
        k = bpos[src]
        if k >= 0:
            s = _bit(code, k, nc)
        else:
            s = S[src, t - 1]
        if s == 1:
            if sj_prev == 1:
                val += PHI11[e, t]
            else:
                val += PHI01[e, t]
    return val


@njit(cache=True)
def _boundary(t, code, nc, bnd, S, B01, B11, PHI01, PHI11, indptr, indices, bpos):
    """Sum over out-of-block neighbors j of log p(S_{j,t+1} | block code at t)."""
    acc = 0.0
    for q in range(bnd.shape[0]):
        j = bnd[q]
        l = _linpred(j, t + 1, S[j, t], S, B01, B11, PHI01, PHI11, indptr, indices, bpos, code, nc)
        if S[j, t + 1] == 1:
            acc += log_sig(l)
        else:
            acc += log_sig(-l)
    return acc


@njit(cache=True)
def _normalize(row, ns):
    m = NEG_INF
    for s in range(ns):
        if row[s] > m:
            m = row[s]
    if m == NEG_INF:
        return NEG_INF
    tot = 0.0
    for s in range(ns):
        tot += np.exp(row[s] - m)
    c = m + np.log(tot)
    for s in range(ns):
        row[s] -= c
    return c


@njit(cache=True)
def _block_transition(t, members, nc, S, B01, B11, PHI01, PHI11, indptr, indices, bpos, Gt, lp1, lp0):
    ns = 1 << nc
    for sp in range(ns):
        for k in range(nc):
            i = members[k]
            l = _linpred(i, t, _bit(sp, k, nc), S, B01, B11, PHI01, PHI11, indptr, indices, bpos, sp, nc)
            lp1[k] = log_sig(l)
            lp0[k] = log_sig(-l)
        for s in range(ns):
            acc = 0.0
            for k in range(nc):
                if _bit(s, k, nc) == 1:
                    acc += lp1[k]
                else:
                    acc += lp0[k]
            Gt[sp, s] = acc


@njit(cache=True)
def forward_filter(members, bnd, S, ypos, LE, logpi0, logpi1, B01, B11, PHI01, PHI11,
                   indptr, indices, bpos, exact, F, P, G):
    """Blocked forward filter in log space.

    Fills filtered ``F[t, code]``, predictive ``P[t, code]`` (t >= 1) and the
    block transition log-matrices ``G[t, prev, cur]``.  Returns the summed log
    normalizers, or NaN when a filtered vector underflows to all zeros.
    With ``exact`` false, emissions of forced-present cells are set to 1 and
    times where every member is forced present are not filtered.
    """
    nc = members.shape[0]
    ns = 1 << nc
    T = S.shape[1] - 1
    lp1 = np.empty(nc)
    lp0 = np.empty(nc)
    lognorm = 0.0
    for s in range(ns):
        acc = 0.0
        for k in range(nc):
            i = members[k]
            if _bit(s, k, nc) == 1:
                acc += logpi1[i]
            else:
                acc += logpi0[i]
        if acc > NEG_INF and T >= 1:
            acc += _boundary(0, s, nc, bnd, S, B01, B11, PHI01, PHI11, indptr, indices, bpos)
        F[0, s] = acc
        P[0, s] = NEG_INF
    c = _normalize(F[0], ns)
    if c == NEG_INF:
        return np.nan
    lognorm += c
    for t in range(1, T + 1):
        _block_transition(t, members, nc, S, B01, B11, PHI01, PHI11, indptr, indices, bpos, G[t], lp1, lp0)
        allpos = True
        for k in range(nc):
            if not ypos[members[k], t]:
                allpos = False
        if allpos and not exact:
            for s in range(ns):
                F[t, s] = NEG_INF
                P[t, s] = NEG_INF
            F[t, ns - 1] = 0.0
            continue
        for s in range(ns):
            m = NEG_INF
            for sp in range(ns):
                v = G[t, sp, s] + F[t - 1, sp]
                if v > m:
                    m = v
            if m == NEG_INF:
                P[t, s] = NEG_INF
            else:
                tot = 0.0
                for sp in range(ns):
                    tot += np.exp(G[t, sp, s] + F[t - 1, sp] - m)
                P[t, s] = m + np.log(tot)
        for s in range(ns):
            acc = P[t, s]
            if acc > NEG_INF:
                for k in range(nc):
                    i = members[k]
                    if _bit(s, k, nc) == 1:
                        if exact or not ypos[i, t]:
                            acc += LE[i, t]
                    elif ypos[i, t]:
                        acc = NEG_INF
                        break
            if acc > NEG_INF and t < T:
                acc += _boundary(t, s, nc, bnd, S, B01, B11, PHI01, PHI11, indptr, indices, bpos)
            F[t, s] = acc
        c = _normalize(F[t], ns)
        if c == NEG_INF:
            return np.nan
        lognorm += c
    return lognorm


@njit(cache=True)
def _draw(logw, ns, u):
    m = NEG_INF
    for s in range(ns):
        if logw[s] > m:
            m = logw[s]
    tot = 0.0
    for s in range(ns):
        tot += np.exp(logw[s] - m)
    target = u * tot
    acc = 0.0
    last = 0
    for s in range(ns):
        w = np.exp(logw[s] - m)
        if w > 0.0:
            last = s
        acc += w
        if target < acc:
            return s
    return last


@njit(cache=True)
def backward_sample(members, S, F, G, u):
    """Draw block trajectories from the filter output and write them into S."""
    nc = members.shape[0]
    ns = 1 << nc
    T = S.shape[1] - 1
    w = np.empty(ns)
    code = _draw(F[T], ns, u[T])
    for k in range(nc):
        S[members[k], T] = _bit(code, k, nc)
    for t in range(T - 1, -1, -1):
        for s in range(ns):
            w[s] = G[t + 1, s, code] + F[t, s]
        code = _draw(w, ns, u[t])
        for k in range(nc):
            S[members[k], t] = _bit(code, k, nc)


@njit(cache=True)
def bffbs_sweep(S, ypos, LE, logpi0, logpi1, B01, B11, PHI01, PHI11, indptr, indices,
                blk_ptr, blk_mem, bnd_ptr, bnd_mem, U, max_nc):
    """One systematic scan of forward filtering / backward sampling over all blocks.

    Returns 0 on success, otherwise ``1 + index`` of the block whose filter
    underflowed.
    """
    N = S.shape[0]
    T = S.shape[1] - 1
    ns = 1 << max_nc
    F = np.empty((T + 1, ns))
    P = np.empty((T + 1, ns))
    G = np.empty((T + 1, ns, ns))
    bpos = -np.ones(N, dtype=np.int64)
    for c in range(blk_ptr.shape[0] - 1):
        members = blk_mem[blk_ptr[c]:blk_ptr[c + 1]]
        bnd = bnd_mem[bnd_ptr[c]:bnd_ptr[c + 1]]
        for k in range(members.shape[0]):
            bpos[members[k]] = k
        nsc = 1 << members.shape[0]
        Fc = F[:, :nsc]
        Pc = P[:, :nsc]
        Gc = G[:, :nsc, :nsc]
        ln = forward_filter(members, bnd, S, ypos, LE, logpi0, logpi1, B01, B11, PHI01, PHI11,
                            indptr, indices, bpos, False, Fc, Pc, Gc)
        if np.isnan(ln):
            return c + 1
        backward_sample(members, S, Fc, Gc, U[c])
        for k in range(members.shape[0]):
            bpos[members[k]] = -1
    return 0


@njit(cache=True)
def binary_logweights(i, t, S, LE, logpi0, logpi1, B01, B11, PHI01, PHI11, indptr, indices, out):
    """Unnormalized log full conditional of S_it in {0, 1} for a zero-count cell."""
    bpos = -np.ones(S.shape[0], dtype=np.int64)
    _binary_lw(i, t, S, LE, logpi0, logpi1, B01, B11, PHI01, PHI11, indptr, indices, bpos, out)


@njit(cache=True)
def _binary_lw(i, t, S, LE, logpi0, logpi1, B01, B11, PHI01, PHI11, indptr, indices, bpos, out):
    T = S.shape[1] - 1
    keep = S[i, t]
    for s in range(2):
        S[i, t] = s
        val = 0.0
        if t == 0:
            val = logpi1[i] if s == 1 else logpi0[i]
        else:
            if s == 1:
                val += LE[i, t]
            l = _linpred(i, t, S[i, t - 1], S, B01, B11, PHI01, PHI11, indptr, indices, bpos, 0, 1)
            val += log_sig(l) if s == 1 else log_sig(-l)
        if t < T and val > NEG_INF:
            l = _linpred(i, t + 1, s, S, B01, B11, PHI01, PHI11, indptr, indices, bpos, 0, 1)
            val += log_sig(l) if S[i, t + 1] == 1 else log_sig(-l)
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                l = _linpred(j, t + 1, S[j, t], S, B01, B11, PHI01, PHI11, indptr, indices, bpos, 0, 1)
                val += log_sig(l) if S[j, t + 1] == 1 else log_sig(-l)
        out[s] = val
    S[i, t] = keep


@njit(cache=True)
def binary_sweep(S, cells, LE, logpi0, logpi1, B01, B11, PHI01, PHI11, indptr, indices, U):
    """Single-site Gibbs updates over ``cells`` (rows of ``(i, t)``) in order."""
    lw = np.empty(2)
    bpos = -np.ones(S.shape[0], dtype=np.int64)
    for q in range(cells.shape[0]):
        i = cells[q, 0]
        t = cells[q, 1]
        _binary_lw(i, t, S, LE, logpi0, logpi1, B01, B11, PHI01, PHI11, indptr, indices, bpos, lw)
        if lw[0] == NEG_INF and lw[1] == NEG_INF:
            return q + 1
        if lw[1] == NEG_INF:
            p1 = 0.0
        elif lw[0] == NEG_INF:
            p1 = 1.0
        else:
            p1 = 1.0 / (1.0 + np.exp(lw[0] - lw[1]))
        S[i, t] = 1 if U[q] < p1 else 0
    return 0
