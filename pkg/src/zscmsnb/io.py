"""CSV ingestion and result emission.

All floats are written with 17 significant digits so 64-bit values survive
a write/read round trip, and rows are emitted in a fixed order.
"""
from __future__ import annotations

import csv
import os
from typing import Optional

import numpy as np

from .model import NeighborGraph, PanelData, ValidationError

def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        # 17 significant digits round-trip every float64 exactly
        return format(float(x), ".17g")
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def write_rows(path, header, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([fmt(x) for x in r])
    except OSError as e:
        raise ValidationError(f"cannot write {path}: {e}") from None


def read_rows(path):
    """Header and rows (as ``(line_number, dict)``) of a CSV file."""
    try:
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            try:
                header = [h.strip() for h in next(rd)]
            except StopIteration:
                raise ValidationError(f"{path}: empty file") from None
            rows = []
            for n, rec in enumerate(rd, start=2):
                if not rec or all(not c.strip() for c in rec):
                    continue
                if len(rec) != len(header):
                    raise ValidationError(f"{path} line {n}: expected {len(header)} fields, got {len(rec)}")
                rows.append((n, dict(zip(header, (c.strip() for c in rec)))))
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}") from None
    return header, rows


def _need(path, header, cols):
    missing = [c for c in cols if c not in header]
    if missing:
        raise ValidationError(f"{path}: missing column(s) {missing}")


def _num(path, n, col, s, kind=float):
    try:
        v = kind(s) if kind is float else int(s)
    except ValueError:
        raise ValidationError(f"{path} line {n}: {col}={s!r} is not a valid number") from None
    if kind is float and not np.isfinite(v):
        raise ValidationError(f"{path} line {n}: {col} is not finite")
    return v


# ---------------------------------------------------------------------------
# ingestion


def _read_counts(path):
    header, rows = read_rows(path)
    _need(path, header, ["area_id", "time", "count"])
    areas, seen_area = [], {}
    cells = {}
    for n, r in rows:
        a = r["area_id"]
        t = _num(path, n, "time", r["time"], int)
        try:
            c = float(r["count"])
        except ValueError:
            raise ValidationError(f"{path} line {n}: count={r['count']!r} is not a number") from None
        if not np.isfinite(c) or c != int(c):
            raise ValidationError(f"{path} line {n}: count {r['count']!r} is not an integer")
        if c < 0:
            raise ValidationError(f"{path} line {n}: negative count {int(c)} for area {a}, time {t}")
        if (a, t) in cells:
            raise ValidationError(f"{path} line {n}: duplicate cell (area {a}, time {t})")
        if a not in seen_area:
            seen_area[a] = len(areas)
            areas.append(a)
        cells[(a, t)] = int(c)
    if not cells:
        raise ValidationError(f"{path}: no counts")
    times = sorted({t for _, t in cells})
    if times != list(range(times[0], times[0] + len(times))):
        raise ValidationError(f"{path}: times must be consecutive integers")
    y = np.empty((len(areas), len(times)), dtype=np.int64)
    for i, a in enumerate(areas):
        for k, t in enumerate(times):
            if (a, t) not in cells:
                raise ValidationError(f"{path}: missing cell (area {a}, time {t})")
            y[i, k] = cells[(a, t)]
    return areas, times, y


def _read_graph(path, index, symmetrize):
    header, rows = read_rows(path)
    _need(path, header, ["area_i", "area_j"])
    N = len(index)
    adj = [set() for _ in range(N)]
    for n, r in rows:
        for col in ("area_i", "area_j"):
            if r[col] not in index:
                raise ValidationError(f"{path} line {n}: unknown area id {r[col]!r} in {col}")
        i, j = index[r["area_i"]], index[r["area_j"]]
        if i == j:
            raise ValidationError(f"{path} line {n}: self-loop at area {r['area_i']}")
        adj[i].add(j)
    for i in range(N):
        for j in sorted(adj[i]):
            if i not in adj[j]:
                if not symmetrize:
                    ids = list(index)
                    raise ValidationError(
                        f"{path}: edge {ids[i]} -> {ids[j]} has no reverse edge (set symmetrize to add it)")
    if symmetrize:
        for i in range(N):
            for j in list(adj[i]):
                adj[j].add(i)
    return NeighborGraph(N, [sorted(a) for a in adj])


def _as_list(p):
    if p is None:
        return []
    return [p] if isinstance(p, str) else list(p)


def _read_area_table(paths, index, times):
    """``(N, T, k)`` table plus column names from one or more CSVs."""
    N, T = len(index), len(times)
    tpos = {t: k for k, t in enumerate(times)}
    blocks, names = [], []
    for path in _as_list(paths):
        header, rows = read_rows(path)
        _need(path, header, ["area_id"])
        static = "time" not in header
        cols = [h for h in header if h not in ("area_id", "time")]
        arr = np.full((N, T, len(cols)), np.nan)
        seen = set()
        for n, r in rows:
            a = r["area_id"]
            if a not in index:
                raise ValidationError(f"{path} line {n}: unknown area id {a!r}")
            i = index[a]
            vals = [_num(path, n, c, r[c]) for c in cols]
            if static:
                key = (i,)
                arr[i, :, :] = vals
            else:
                t = _num(path, n, "time", r["time"], int)
                if t not in tpos:
                    continue
                key = (i, t)
                arr[i, tpos[t], :] = vals
            if key in seen:
                raise ValidationError(f"{path} line {n}: duplicate row for {key}")
            seen.add(key)
        if np.isnan(arr).any():
            i, k, _ = np.argwhere(np.isnan(arr))[0]
            ids = list(index)
            raise ValidationError(f"{path}: missing value for area {ids[i]}, time {times[k]}")
        blocks.append(arr)
        names.extend(cols)
    if not blocks:
        return None, None
    return np.concatenate(blocks, axis=2), names


def _read_pair_table(paths, index, times, graph):
    E, T = graph.n_edges, len(times)
    tpos = {t: k for k, t in enumerate(times)}
    blocks, names = [], []
    for path in _as_list(paths):
        header, rows = read_rows(path)
        _need(path, header, ["area_i", "area_j"])
        static = "time" not in header
        cols = [h for h in header if h not in ("area_i", "area_j", "time")]
        arr = np.full((E, T, len(cols)), np.nan)
        for n, r in rows:
            for col in ("area_i", "area_j"):
                if r[col] not in index:
                    raise ValidationError(f"{path} line {n}: unknown area id {r[col]!r}")
            i, j = index[r["area_i"]], index[r["area_j"]]
            try:
                e = graph.edge_index(i, j)
            except ValidationError:
                raise ValidationError(f"{path} line {n}: {r['area_j']} is not a neighbor of {r['area_i']}") from None
            vals = [_num(path, n, c, r[c]) for c in cols]
            if static:
                arr[e, :, :] = vals
            else:
                t = _num(path, n, "time", r["time"], int)
                if t in tpos:
                    arr[e, tpos[t], :] = vals
        if np.isnan(arr).any():
            e, k, _ = np.argwhere(np.isnan(arr))[0]
            ids = list(index)
            raise ValidationError(f"{path}: missing value for pair ({ids[graph.dst[e]]}, {ids[graph.indices[e]]}), "
                                  f"time {times[k]}")
        blocks.append(arr)
        names.extend(cols)
    if not blocks:
        return None, None
    return np.concatenate(blocks, axis=2), names


def load_panel(counts, adjacency, x=None, z=None, w=None, z01c=None, z11c=None, population=None,
               symmetrize: bool = False) -> PanelData:
    """Read a panel from CSV files.

    ``counts``: ``area_id,time,count``.  ``adjacency``: ``area_i,area_j``.
    Area covariates: ``area_id,time,<cols>`` or static ``area_id,<cols>``.
    Pair covariates: ``area_i,area_j,time,<cols>`` or ``area_i,area_j,<cols>``;
    a row gives the covariate of the effect of ``area_j`` on ``area_i``.
    ``population``: ``area_id,population``.
    Areas are ordered by first appearance in the counts file.
    """
    areas, times, y = _read_counts(counts)
    index = {a: i for i, a in enumerate(areas)}
    graph = _read_graph(adjacency, index, symmetrize)
    tabs = {}
    for name, paths in (("x", x), ("z", z), ("w", w)):
        tabs[name], tabs[name + "_names"] = _read_area_table(paths, index, times)
    for name, paths in (("z01c", z01c), ("z11c", z11c)):
        tabs[name], tabs[name + "_names"] = _read_pair_table(paths, index, times, graph)
    pop = None
    if population is not None:
        header, rows = read_rows(population)
        _need(population, header, ["area_id", "population"])
        pop = np.full(len(areas), np.nan)
        for n, r in rows:
            if r["area_id"] not in index:
                raise ValidationError(f"{population} line {n}: unknown area id {r['area_id']!r}")
            pop[index[r["area_id"]]] = _num(population, n, "population", r["population"])
        if np.isnan(pop).any():
            raise ValidationError(f"{population}: missing population for some areas")
    return PanelData(y=y, graph=graph, population=pop, area_ids=areas, times=times, **tabs)


def panel_paths(dirname):
    """Conventional file names inside a data directory (only those present)."""
    out = {}
    for key, fname in (("counts", "counts.csv"), ("adjacency", "adjacency.csv"), ("x", "x.csv"), ("z", "z.csv"),
                       ("w", "w.csv"), ("z01c", "z01c.csv"), ("z11c", "z11c.csv"),
                       ("population", "population.csv")):
        p = os.path.join(dirname, fname)
        if os.path.exists(p):
            out[key] = p
    if "counts" not in out or "adjacency" not in out:
        raise ValidationError(f"{dirname}: needs counts.csv and adjacency.csv")
    return out


def load_panel_config(data) -> PanelData:
    """Panel from a ``DataConfig`` (explicit paths override the directory)."""
    paths = panel_paths(data.dir) if data.dir else {}
    for key in ("counts", "adjacency", "x", "z", "w", "z01c", "z11c", "population"):
        val = getattr(data, key)
        if val is not None:
            paths[key] = val
    if "counts" not in paths or "adjacency" not in paths:
        raise ValidationError("data: counts and adjacency files are required")
    return load_panel(symmetrize=data.symmetrize, **paths)


def _times(panel):
    return panel.times


def write_panel(panel: PanelData, dirname):
    """Write the panel in the layout read by :func:`load_panel`."""
    os.makedirs(dirname, exist_ok=True)
    ids, times = panel.area_ids, _times(panel)
    g = panel.graph
    write_rows(os.path.join(dirname, "counts.csv"), ["area_id", "time", "count"],
               [(ids[i], times[k], int(panel.y[i, k])) for i in range(panel.n_areas) for k in range(panel.n_times)])
    write_rows(os.path.join(dirname, "adjacency.csv"), ["area_i", "area_j"],
               [(ids[g.dst[e]], ids[g.indices[e]]) for e in range(g.n_edges)])
    for name in ("x", "z", "w"):
        arr = getattr(panel, name)
        if arr.shape[2]:
            write_rows(os.path.join(dirname, f"{name}.csv"), ["area_id", "time", *getattr(panel, name + "_names")],
                       [(ids[i], times[k], *arr[i, k]) for i in range(panel.n_areas) for k in range(panel.n_times)])
    for name in ("z01c", "z11c"):
        arr = getattr(panel, name)
        if arr.shape[2]:
            write_rows(os.path.join(dirname, f"{name}.csv"), ["area_i", "area_j", "time", *getattr(panel, name + "_names")],
                       [(ids[g.dst[e]], ids[g.indices[e]], times[k], *arr[e, k])
                        for e in range(g.n_edges) for k in range(panel.n_times)])
    if panel.population is not None:
        write_rows(os.path.join(dirname, "population.csv"), ["area_id", "population"],
                   [(ids[i], panel.population[i]) for i in range(panel.n_areas)])


# ---------------------------------------------------------------------------
# results


def emit_results(store, out_dir, report=None, fitted=None, forecast=None, arrows=None, extra=None):
    """Write the fit results as CSV tables into ``out_dir``.

    ``fitted`` is a dict of ``(N, T)`` columns keyed by name; ``forecast`` a
    :class:`~zscmsnb.prediction.PredictiveDraws`; ``arrows`` rows of
    ``(area_i, area_j, p)``.  Returns the written paths.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise ValidationError(f"cannot create {out_dir}: {e}") from None
    model = store.model
    ids = model.panel.area_ids
    times = _times(model.panel)
    t0 = times[0] - 1
    names = store.names
    written = []

    def out(name, header, rows):
        p = os.path.join(out_dir, name)
        write_rows(p, header, rows)
        written.append(p)

    out("draws.csv", ["chain", "iteration", "name", "value"],
        [(c.chain, int(c.iterations[k]), names[p], c.draws[k, p])
         for c in store.chains for k in range(c.n_kept) for p in range(len(names))])
    out("final_states.csv", ["chain", "iteration", "area", "state"],
        [(c.chain, int(c.iterations[k]), ids[i], int(c.final_states[k, i]))
         for c in store.chains for k in range(c.n_kept) for i in range(model.N)])
    n = sum(c.n_kept for c in store.chains)
    sm = store.state_mean() if n else None
    out("state_means.csv", ["area", "time", "mean"],
        [] if sm is None else [(ids[i], t0 + t, sm[i, t]) for i in range(model.N) for t in range(model.T + 1)])
    out("acceptance.csv", ["chain", "parameter", "rate"],
        [(c.chain, k, float(v)) for c in store.chains for k, v in c.acceptance.items()])
    if report is not None:
        out("diagnostics.csv", ["parameter", "ess", "rhat"],
            [(r["parameter"], r["ess"], r["rhat"]) for r in report.rows()])
        w = report.waic
        out("waic.csv", ["waic", "lppd", "p_waic", "n_draws"], [] if w is None else [(w.waic, w.lppd, w.p_waic, w.n_draws)])
        out("waic_pointwise.csv", ["area", "time", "lppd", "p_waic"],
            [] if w is None else [(ids[i], times[t], w.pointwise_lppd[i, t], w.pointwise_pwaic[i, t])
                                  for i in range(model.N) for t in range(model.T)])
        if report.acf is not None:
            a = report.acf
            out("acf.csv", ["area", "lag", "acf", "band"],
                [(ids[i], lag, a.acf[i, lag], a.band) for i in range(model.N) for lag in range(a.max_lag + 1)])
    if fitted is not None:
        cols = list(fitted)
        out("fitted.csv", ["area", "time", "count", *cols],
            [(ids[i], times[t], int(model.y[i, t]), *(fitted[c][i, t] for c in cols))
             for i in range(model.N) for t in range(model.T)])
    if forecast is not None:
        cm, cl, ch = forecast.summary("counts")
        pm, pl, ph = forecast.summary("presence")
        K = cm.shape[0]
        out("forecast.csv", ["area", "horizon", "count_mean", "count_q025", "count_q975", "presence_mean",
                             "presence_q025", "presence_q975"],
            [(ids[i], k + 1, cm[k, i], cl[k, i], ch[k, i], pm[k, i], pl[k, i], ph[k, i])
             for i in range(model.N) for k in range(K)])
    if arrows is not None:
        out("arrows.csv", ["area_i", "area_j", "prob"], arrows)
    for name, (header, rows) in (extra or {}).items():
        out(name, header, rows)
    return written


# ---------------------------------------------------------------------------
# reload


def load_draws(path, names):
    """``(chains, iterations, values)`` from a long draws CSV.

    ``values`` is ``(n_chains, n_kept, P)`` in the order of ``names``.
    """
    header, rows = read_rows(path)
    _need(path, header, ["chain", "iteration", "name", "value"])
    pos = {n: k for k, n in enumerate(names)}
    data = {}
    for n, r in rows:
        if r["name"] not in pos:
            raise ValidationError(f"{path} line {n}: unknown parameter {r['name']!r}")
        c, it = int(r["chain"]), int(r["iteration"])
        data.setdefault(c, {}).setdefault(it, np.full(len(names), np.nan))[pos[r["name"]]] = float(r["value"])
    chains = sorted(data)
    if not chains:
        return [], np.zeros((0, 0), dtype=np.int64), np.zeros((0, 0, len(names)))
    iters = [sorted(data[c]) for c in chains]
    if len({len(i) for i in iters}) != 1:
        raise ValidationError(f"{path}: chains have different numbers of draws")
    vals = np.array([[data[c][it] for it in iters[k]] for k, c in enumerate(chains)])
    if np.isnan(vals).any():
        raise ValidationError(f"{path}: incomplete draws")
    return chains, np.array(iters, dtype=np.int64), vals


def load_final_states(path, area_ids, chains, iters):
    header, rows = read_rows(path)
    _need(path, header, ["chain", "iteration", "area", "state"])
    index = {a: i for i, a in enumerate(area_ids)}
    cpos = {c: k for k, c in enumerate(chains)}
    ipos = [{it: k for k, it in enumerate(row)} for row in iters]
    out = np.full((len(chains), iters.shape[1] if len(chains) else 0, len(area_ids)), -1, dtype=np.int8)
    for n, r in rows:
        c = int(r["chain"])
        if c not in cpos or r["area"] not in index:
            raise ValidationError(f"{path} line {n}: unknown chain or area")
        k = ipos[cpos[c]].get(int(r["iteration"]))
        if k is None:
            raise ValidationError(f"{path} line {n}: iteration not among the stored draws")
        out[cpos[c], k, index[r["area"]]] = int(r["state"])
    if (out < 0).any():
        raise ValidationError(f"{path}: incomplete final states")
    return out


def load_store(fit_dir, model, config=None):
    """Rebuild a draws-only :class:`~zscmsnb.engine.PosteriorStore` from emitted CSVs.

    State moments and WAIC accumulators are not restored; state means come
    from ``state_means.csv`` when present.
    """
    from .engine import ChainResult, FitConfig, PosteriorStore

    chains, iters, vals = load_draws(os.path.join(fit_dir, "draws.csv"), model.layout.names)
    finals = load_final_states(os.path.join(fit_dir, "final_states.csv"), model.panel.area_ids, chains, iters)
    N, T = model.N, model.T
    ssum = np.zeros((N, T + 1))
    sm_path = os.path.join(fit_dir, "state_means.csv")
    if os.path.exists(sm_path):
        _, rows = read_rows(sm_path)
        index = {a: i for i, a in enumerate(model.panel.area_ids)}
        t0 = _times(model.panel)[0] - 1
        for n, r in rows:
            ssum[index[r["area"]], int(r["time"]) - t0] = float(r["mean"])
    out = []
    n_tot = vals.shape[0] * vals.shape[1] if len(chains) else 0
    for k, c in enumerate(chains):
        nk = vals.shape[1]
        empty = np.zeros((N, T))
        out.append(ChainResult(c, vals[k], iters[k], finals[k], ssum * nk if n_tot else ssum, None,
                               empty, empty, empty, np.full(model.layout.size, np.nan), {}))
    cfg = config or FitConfig(n_iterations=max(int(iters.max()) if iters.size else 1, 1), burn_in=0, n_chains=max(len(chains), 1))
    return PosteriorStore(model, cfg, out)


def load_waic_pointwise(path, model):
    from .diagnostics import _waic
    header, rows = read_rows(path)
    _need(path, header, ["area", "time", "lppd", "p_waic"])
    index = {a: i for i, a in enumerate(model.panel.area_ids)}
    tpos = {t: k for k, t in enumerate(_times(model.panel))}
    l = np.full((model.N, model.T), np.nan)
    p = np.full((model.N, model.T), np.nan)
    for n, r in rows:
        i, t = index[r["area"]], tpos[int(r["time"])]
        l[i, t], p[i, t] = float(r["lppd"]), float(r["p_waic"])
    if np.isnan(l).any():
        raise ValidationError(f"{path}: incomplete pointwise table")
    return _waic(l, p, 0)
