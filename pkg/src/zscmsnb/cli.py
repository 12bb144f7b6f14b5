"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np
import yaml

from . import diagnostics, io, oracle, prediction
from .config import RunConfig, load_config
from .engine import PosteriorStore, run_chains
from .model import InitialStateDist, Model, NumericalError, ValidationError
from .simulation import TRUTH_NAMES, generate_dataset, run_replications

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _plain(x):
    if dataclasses.is_dataclass(x):
        return {f.name: _plain(getattr(x, f.name)) for f in dataclasses.fields(x)
                if f.name not in ("priors", "model_spec", "graph")}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def config_to_dict(cfg: RunConfig) -> dict:
    out = _plain(cfg)
    out["model"] = _plain(cfg.model)
    return out


def _abs_data_paths(cfg: RunConfig, base):
    d = cfg.data
    fix = lambda p: None if p is None else (os.path.abspath(os.path.join(base, p)) if isinstance(p, str)
                                            else [os.path.abspath(os.path.join(base, q)) for q in p])
    for k in ("dir", "counts", "adjacency", "x", "z", "w", "z01c", "z11c", "population"):
        setattr(d, k, fix(getattr(d, k)))


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    base = os.path.dirname(os.path.abspath(args.config)) if args.config else os.getcwd()
    _abs_data_paths(cfg, base)
    if getattr(args, "data", None):
        cfg.data.dir = os.path.abspath(args.data)
    if getattr(args, "condition_on_first", False):
        cfg.data.condition_on_first = True
    return cfg


def build_model(cfg: RunConfig) -> Model:
    panel = io.load_panel_config(cfg.data)
    if cfg.data.condition_on_first:
        panel, init = panel.condition_on_first()
    else:
        init = InitialStateDist.constant(panel.n_areas, cfg.data.initial_prob)
    return Model(panel, cfg.model, init)


def _fit_config(cfg: RunConfig, args):
    return cfg.fit_config(seed=args.seed, n_iterations=args.iterations, burn_in=args.burn_in,
                          n_chains=args.chains, state_sampler=args.sampler, thinning=args.thinning,
                          progress_every=args.progress)


def _scenario(cfg: RunConfig, model: Model, K: int):
    f = cfg.forecast
    if not any(getattr(f, k) for k in ("x", "z", "w", "z01c", "z11c")):
        return prediction.ForecastScenario.hold_last(model, K)
    p = model.panel
    times = tuple(range(p.times[-1] + 1, p.times[-1] + K + 1))
    index = {a: i for i, a in enumerate(p.area_ids)}
    tabs = {}
    for name in ("x", "z", "w"):
        arr, names = io._read_area_table(getattr(f, name), index, times)
        ref = getattr(p, name)
        if arr is None:
            if ref.shape[2]:
                raise ValidationError(f"forecast: scenario for {name} is required")
            arr = np.zeros((p.n_areas, K, 0))
        elif tuple(names) != tuple(getattr(p, name + "_names")):
            raise ValidationError(f"forecast {name}: columns {names} differ from the data")
        tabs[name] = arr
    for name in ("z01c", "z11c"):
        arr, names = io._read_pair_table(getattr(f, name), index, times, p.graph)
        ref = getattr(p, name)
        if arr is None:
            if ref.shape[2]:
                raise ValidationError(f"forecast: scenario for {name} is required")
            arr = np.zeros((p.graph.n_edges, K, 0))
        tabs[name] = arr
    return prediction.ForecastScenario(**tabs)


def _summary_rows(store: PosteriorStore, report):
    flat = store.flat_draws()
    rows = []
    for k, name in enumerate(store.names):
        col = flat[:, k]
        q = np.quantile(col, [0.025, 0.975]) if col.size else (np.nan, np.nan)
        rows.append((name, col.mean() if col.size else np.nan, col.std(ddof=1) if col.size > 1 else np.nan,
                     q[0], q[1], report.ess[k], report.rhat[k]))
    return rows


def _print_summary(rows, report, out=sys.stdout):
    print(f"{'parameter':<14}{'mean':>11}{'sd':>10}{'q2.5':>11}{'q97.5':>11}{'ess':>9}{'rhat':>8}", file=out)
    for name, m, sd, lo, hi, e, r in rows:
        print(f"{name:<14}{m:>11.4f}{sd:>10.4f}{lo:>11.4f}{hi:>11.4f}{e:>9.0f}{r:>8.3f}", file=out)
    if report.waic is not None:
        w = report.waic
        print(f"WAIC {w.waic:.3f}  lppd {w.lppd:.3f}  p_waic {w.p_waic:.3f}", file=out)
    for note in report.notes:
        print(f"note: {note}", file=out)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    cfg = _load(args)
    gen = cfg.generator
    if args.regime:
        gen = dataclasses.replace(gen, regime=args.regime)
    rng = np.random.default_rng(args.seed if args.seed is not None else cfg.fit.seed)
    panel, states, model, v = generate_dataset(gen, rng)
    io.write_panel(panel, args.out)
    io.write_rows(os.path.join(args.out, "truth.csv"), ["name", "value"], list(zip(model.layout.names, v.values)))
    io.write_rows(os.path.join(args.out, "states.csv"), ["area", "time", "state"],
                  [(panel.area_ids[i], t, int(states.s[i, t])) for i in range(panel.n_areas)
                   for t in range(panel.n_times + 1)])
    print(f"wrote {panel.n_areas} areas x {panel.n_times} times to {args.out} "
          f"(zero fraction {np.mean(panel.y == 0):.3f})")
    return EXIT_OK


def cmd_fit(args):
    cfg = _load(args)
    model = build_model(cfg)
    fcfg = _fit_config(cfg, args)
    store = run_chains(model, fcfg)
    rng = np.random.default_rng(np.random.SeedSequence(fcfg.seed).spawn(fcfg.n_chains + 1)[-1])
    fitted = {"smoothed_presence": prediction.smoothed_fitted(store, rng).presence}
    acf = None
    n = store.n_chains * store.n_kept
    if store.states is not None and n:
        step = max(1, n // max(cfg.diagnostics.fitted_draws, 1))
        cf = prediction.coupled_one_step_fitted(store, rng, draws=range(0, n, step))
        fitted["coupled_presence_mean"] = cf.presence.mean(axis=0)
        fitted["coupled_presence_q025"] = np.quantile(cf.presence, 0.025, axis=0)
        fitted["coupled_presence_q975"] = np.quantile(cf.presence, 0.975, axis=0)
        fitted["coupled_count_mean"] = cf.counts.mean(axis=0)
        if cf.counts.shape[0] > 1 and model.T > cfg.diagnostics.max_lag:
            acf = diagnostics.pearson_residual_acf(model.y, cf.counts, cfg.diagnostics.max_lag)
    report = diagnostics.diagnose(store, acf)
    forecast = None
    if cfg.forecast.horizon > 0 and n:
        K = cfg.forecast.horizon
        forecast = prediction.simulate_forecast(store, _scenario(cfg, model, K), K, rng)
    arrows = None
    if model.spec.zero_inflation and n:
        arrows = prediction.arrow_table(store, cfg.forecast.threshold, cfg.forecast.probability)
    rows = _summary_rows(store, report) if n else []
    io.emit_results(store, args.out, report, fitted, forecast, arrows,
                    extra={"summary.csv": (["parameter", "mean", "sd", "q025", "q975", "ess", "rhat"], rows)})
    resolved = config_to_dict(cfg)
    resolved["fit"] = _plain(fcfg)
    with open(os.path.join(args.out, "config.yaml"), "w") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True)
    if rows:
        _print_summary(rows, report)
    return EXIT_OK


def _fit_dir_model(args):
    if args.config is None:
        args.config = os.path.join(args.fit_dir, "config.yaml")
    cfg = _load(args)
    model = build_model(cfg)
    return cfg, model, io.load_store(args.fit_dir, model, cfg.fit)


def cmd_predict(args):
    cfg, model, store = _fit_dir_model(args)
    K = args.horizon or cfg.forecast.horizon or 1
    rng = np.random.default_rng(args.seed if args.seed is not None else cfg.fit.seed)
    out = args.out or args.fit_dir
    fc = prediction.simulate_forecast(store, _scenario(cfg, model, K), K, rng)
    arrows = prediction.arrow_table(store, cfg.forecast.threshold, cfg.forecast.probability) \
        if model.spec.zero_inflation else []
    os.makedirs(out, exist_ok=True)
    cm, cl, ch = fc.summary("counts")
    pm, pl, ph = fc.summary("presence")
    ids = model.panel.area_ids
    io.write_rows(os.path.join(out, "forecast.csv"),
                  ["area", "horizon", "count_mean", "count_q025", "count_q975", "presence_mean", "presence_q025",
                   "presence_q975"],
                  [(ids[i], k + 1, cm[k, i], cl[k, i], ch[k, i], pm[k, i], pl[k, i], ph[k, i])
                   for i in range(model.N) for k in range(K)])
    io.write_rows(os.path.join(out, "arrows.csv"), ["area_i", "area_j", "prob"], arrows)
    print(f"forecast for {K} horizon(s) written to {out}")
    return EXIT_OK


def cmd_diagnose(args):
    cfg, model, store = _fit_dir_model(args)
    draws = store.draws
    P = len(store.names)
    ess = np.full(P, np.nan)
    rhat = np.full(P, np.nan)
    if draws.shape[1] >= diagnostics.MIN_ESS_DRAWS:
        ess = np.array([diagnostics.multichain_ess(draws[:, :, k]) for k in range(P)])
    if draws.shape[0] >= 2 and draws.shape[1] >= 2:
        rhat = np.array([diagnostics.gelman_rubin(draws[:, :, k]) for k in range(P)])
    wpath = os.path.join(args.fit_dir, "waic_pointwise.csv")
    w = io.load_waic_pointwise(wpath, model) if os.path.exists(wpath) and store.n_kept else None
    report = diagnostics.DiagnosticsReport(list(store.names), ess, rhat, w)
    out = args.out or args.fit_dir
    os.makedirs(out, exist_ok=True)
    io.write_rows(os.path.join(out, "diagnostics.csv"), ["parameter", "ess", "rhat"],
                  [(r["parameter"], r["ess"], r["rhat"]) for r in report.rows()])
    _print_summary(_summary_rows(store, report), report)
    return EXIT_OK


def cmd_oracle_check(args):
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    dev = oracle.cross_check(rng, args.instances, args.n_areas, args.n_times)
    ok = True
    for k, d in dev.items():
        good = float(d) <= args.tol
        ok &= good
        print(f"{k:<12} max_abs_dev={float(d):.3e}  tol={args.tol:.0e}  {'PASS' if good else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_sim_study(args):
    cfg = _load(args)
    st = cfg.study
    regimes = args.regime or st.regimes
    n_reps = args.reps or st.n_reps
    seed = args.seed if args.seed is not None else cfg.fit.seed
    workers = args.workers or int(os.environ.get("ZSCMSNB_WORKERS", "1"))
    os.makedirs(args.out, exist_ok=True)
    rows, reps = [], []
    for reg in regimes:
        mult = float(st.iteration_multiplier.get(reg, st.iteration_multiplier.get(int(reg), 1)) if st.iteration_multiplier else 1)
        fcfg = cfg.fit_config(n_iterations=int(cfg.fit.n_iterations * mult), burn_in=int(cfg.fit.burn_in * mult))
        gen = dataclasses.replace(cfg.generator, regime=reg)

        def progress(res, reg=reg):
            print(f"regime {reg} rep {res.rep}: converged={res.converged} min_ess={res.min_ess:.0f} "
                  f"max_rhat={res.max_rhat:.3f}", file=sys.stderr)

        rep = run_replications(gen, fcfg, n_reps, seed, st.min_ess, st.max_rhat, workers, progress)
        rows.extend(rep.table())
        for r in rep.reps:
            reps.append((reg, r.rep, int(r.converged), r.min_ess, r.max_rhat, r.zero_fraction,
                         *r.mean, *r.lower, *r.upper))
        names = rep.names
    cols = ["regime", "parameter", "truth", "mean", "q025", "q975", "coverage", "bias", "mean_post_sd", "n_used",
            "n_excluded"]
    io.write_rows(os.path.join(args.out, "recovery.csv"), cols, [[r[c] for c in cols] for r in rows])
    io.write_rows(os.path.join(args.out, "replications.csv"),
                  ["regime", "rep", "converged", "min_ess", "max_rhat", "zero_fraction",
                   *[f"mean_{n}" for n in names], *[f"lo_{n}" for n in names], *[f"hi_{n}" for n in names]], reps)
    for r in rows:
        print(f"{r['regime']:>3} {r['parameter']:<8} truth={r['truth']:8.3f} mean={r['mean']:8.3f} "
              f"coverage={r['coverage']:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="zscmsnb", description="Zero-state coupled Markov switching NB models")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        if data:
            sp.add_argument("--data", help="directory holding counts.csv, adjacency.csv and covariate files")
            sp.add_argument("--condition-on-first", action="store_true",
                            help="use the first time as the initial state instead of modelling it")

    sp = sub.add_parser("simulate", help="generate a synthetic panel")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--regime", choices=["50", "80"])
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="run the sampler and write results")
    common(sp, data=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--burn-in", type=int)
    sp.add_argument("--chains", type=int)
    sp.add_argument("--thinning", type=int)
    sp.add_argument("--sampler", choices=["binary", "iffbs", "bffbs2"])
    sp.add_argument("--progress", type=int, help="progress line every N iterations (stderr)")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="forecast from a finished fit")
    common(sp, data=True)
    sp.add_argument("--fit-dir", required=True)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("diagnose", help="ESS, R-hat and WAIC of a finished fit")
    common(sp, data=True)
    sp.add_argument("--fit-dir", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("oracle-check", help="compare the filters with brute-force enumeration")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--n-areas", type=int, default=2)
    sp.add_argument("--n-times", type=int, default=3)
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.set_defaults(func=cmd_oracle_check)

    sp = sub.add_parser("sim-study", help="replicated parameter-recovery study")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--regime", action="append", choices=["50", "80"])
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_sim_study)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
