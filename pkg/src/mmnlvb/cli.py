"""Command-line interface: simulate, fit, mcmc, assess and compare.

Settings resolve as command-line flags over a JSON ``--config`` file over
built-in defaults. The resolved settings are echoed to stderr and written into
every output file.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from ._linalg import NumericalError
from .assessment import (McmcDraws, TrueParams, VariationalFit, compare_sources, kfold_split, predictive_loglik,
                         random_queries, save_report_csv, save_summary_json)
from .batch import DivergenceError, StopConfig, fit_batch
from .data_io import (DataFormatError, PRESETS, load_dataset, load_fit, load_truth, preset_spec, save_dataset,
                      save_fit, save_trace_csv, save_truth, simulate_dataset)
from .local import SlrConfig
from .mcmc import McmcConfig, load_draws_csv, run_chains, save_draws_csv
from .svi import SviConfig, fit_svi

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_IO = 5
EXIT_NUMERICAL = 6

DEFAULTS = {
    "common": {"seed": 0, "threads": None, "out": "."},
    "simulate": {"preset": "desk", "H": None, "J": None, "K": None, "T": None},
    "fit": {"data": None, "preset": None, "backend": "ncvmp", "mode": "batch", "kappa": 2.0, "batch_size": 25,
            "alpha": None, "max_sweeps": 500, "xi": 0.005, "slr_N": 40, "slr_w": 0.25},
    "mcmc": {"data": None, "preset": None, "chains": 4, "iterations": 10_000, "thin": 2, "burn_in": 0.5},
    "assess": {"data": None, "preset": None, "backends": "ncvmp,slr", "folds": 5, "outer": 100, "inner": 1000,
               "mode": "batch"},
    "compare": {"fit": None, "draws": None, "truth": None, "reference": None, "queries": 100, "J": None,
                "outer": None, "inner": 10_000},
}
MODE_ONLY = {"svi": ("kappa", "batch_size", "alpha")}


class ConfigError(ValueError):
    pass


def _add_common(p):
    p.add_argument("--config", help="JSON file with settings (overridden by flags)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker cap (recorded; computation is single-process)")
    p.add_argument("--out", help="output directory")


def _add_data(p):
    p.add_argument("--data", help="dataset CSV")
    p.add_argument("--preset", choices=sorted(PRESETS), help="simulate a preset dataset instead of --data")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmnlvb", description="Variational Bayes for mixed multinomial logit models")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated dataset and its true parameters")
    _add_common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    for k in ("H", "J", "K", "T"):
        p.add_argument(f"--{k}", type=int)

    p = sub.add_parser("fit", help="variational fit (batch or stochastic)")
    _add_common(p)
    _add_data(p)
    p.add_argument("--backend", choices=["laplace", "ncvmp", "slr"])
    p.add_argument("--mode", choices=["batch", "svi"])
    p.add_argument("--kappa", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--alpha", type=float, help="constant stochastic step size (default: linear schedule)")
    p.add_argument("--max-sweeps", dest="max_sweeps", type=int)
    p.add_argument("--xi", type=float, help="relative-change stopping threshold")
    p.add_argument("--slr-N", dest="slr_N", type=int)
    p.add_argument("--slr-w", dest="slr_w", type=float)

    p = sub.add_parser("mcmc", help="Metropolis-within-Gibbs reference draws")
    _add_common(p)
    _add_data(p)
    p.add_argument("--chains", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=float)

    p = sub.add_parser("assess", help="k-fold predictive log-likelihood of several backends")
    _add_common(p)
    _add_data(p)
    p.add_argument("--backends", help="comma-separated list")
    p.add_argument("--mode", choices=["batch", "svi"])
    p.add_argument("--folds", type=int)
    p.add_argument("--outer", type=int)
    p.add_argument("--inner", type=int)

    p = sub.add_parser("compare", help="TV distances between predictive choice distributions")
    _add_common(p)
    p.add_argument("--fit", action="append", help="fit JSON (repeatable); named by file stem")
    p.add_argument("--draws", help="MCMC draws CSV")
    p.add_argument("--truth", help="truth JSON from simulate")
    p.add_argument("--reference", help="source name used as reference (default: draws, else truth)")
    p.add_argument("--queries", type=int)
    p.add_argument("--J", type=int, help="alternatives per query (default: from truth file)")
    p.add_argument("--outer", type=int)
    p.add_argument("--inner", type=int)
    return ap


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    cmd = args.command
    cfg = {**DEFAULTS["common"], **DEFAULTS[cmd]}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown settings for {cmd}: {sorted(unknown)}")
        cfg.update(file_cfg)
    for k, v in vars(args).items():
        if k in ("command", "config") or v is None:
            continue
        cfg[k] = v
    cfg["command"] = cmd
    _validate(cfg, args)
    return cfg


def _validate(cfg, args):
    cmd = cfg["command"]
    if cfg.get("threads") is not None and cfg["threads"] < 1:
        raise ConfigError("--threads must be >= 1")
    if cmd in ("fit", "mcmc", "assess"):
        if cfg.get("data") and cfg.get("preset"):
            raise ConfigError("give either --data or --preset, not both")
        if not cfg.get("data") and not cfg.get("preset"):
            raise ConfigError("need --data or --preset")
    if cmd == "fit" and cfg["mode"] == "batch":
        given = [k for k in MODE_ONLY["svi"] if getattr(args, k, None) is not None]
        if given:
            raise ConfigError(f"{', '.join('--' + g.replace('_', '-') for g in given)} only apply to --mode svi")
    try:
        if cmd == "fit":
            StopConfig(xi_threshold=cfg["xi"], max_sweeps=cfg["max_sweeps"])
            SlrConfig(N=cfg["slr_N"], w=cfg["slr_w"])
            SviConfig(initial_batch=cfg["batch_size"], kappa=cfg["kappa"],
                      alpha_override=cfg["alpha"]).validate(max(cfg["batch_size"], 1))
        elif cmd == "mcmc":
            McmcConfig(chains=cfg["chains"], iterations=cfg["iterations"], thin=cfg["thin"], burn_in=cfg["burn_in"])
        elif cmd == "assess" and cfg["folds"] < 2:
            raise ValueError("--folds must be >= 2")
        elif cmd in ("compare", "assess") and (cfg.get("inner") or 1) < 1:
            raise ValueError("--inner must be >= 1")
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cmd == "compare" and not (cfg.get("fit") or cfg.get("draws") or cfg.get("truth")):
        raise ConfigError("compare needs at least one of --fit, --draws, --truth")


def _echo(cfg):
    print("resolved config: " + json.dumps(cfg, sort_keys=True), file=sys.stderr)


def _recorded(cfg) -> dict:
    # the output directory is left out so that reruns elsewhere give identical files
    return {k: v for k, v in cfg.items() if k != "out"}


def _stamp(cfg) -> str:
    return "config: " + json.dumps(_recorded(cfg), sort_keys=True)


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg):
    if cfg.get("data"):
        return load_dataset(cfg["data"])
    ds, _ = simulate_dataset(preset_spec(cfg["preset"], seed=cfg["seed"]))
    return ds


def cmd_simulate(cfg):
    spec = preset_spec(cfg["preset"], seed=cfg["seed"], H=cfg["H"], J=cfg["J"], K=cfg["K"], T=cfg["T"])
    ds, truth = simulate_dataset(spec)
    out = _out_dir(cfg)
    save_dataset(ds, out / "data.csv", comment=_stamp(cfg))
    save_truth(truth, out / "truth.json", extra={"config": _recorded(cfg)})
    print(f"wrote {out / 'data.csv'} ({ds.H} agents, {ds.n_events} events) and {out / 'truth.json'}")


def cmd_fit(cfg):
    ds = _dataset(cfg)
    stop = StopConfig(xi_threshold=cfg["xi"], max_sweeps=cfg["max_sweeps"])
    slr = SlrConfig(N=cfg["slr_N"], w=cfg["slr_w"])
    if cfg["mode"] == "batch":
        fit = fit_batch(ds, backend=cfg["backend"], stop=stop, seed=cfg["seed"], slr=slr)
    else:
        svi = SviConfig(initial_batch=min(cfg["batch_size"], ds.H), kappa=cfg["kappa"], alpha_override=cfg["alpha"])
        fit = fit_svi(ds, backend=cfg["backend"], cfg=svi, stop=stop, seed=cfg["seed"], slr=slr)
        for it, old, new in fit.diagnostics.get("batch_growth", []):
            print(f"iteration {it}: batch size {old} -> {new}", file=sys.stderr)
    fit.config = _recorded(cfg)
    out = _out_dir(cfg)
    save_fit(fit, out / "fit.json")
    save_trace_csv(fit, out / "trace.csv", comment=_stamp(cfg))
    last = fit.trace[-1]
    status = "converged" if fit.converged else "stopped without converging"
    print(f"{fit.backend} {cfg['mode']}: {status} after {len(fit.trace)} iterations (xi={last['xi']:.3g})")
    print("mu_zeta: " + " ".join(f"{v:.4f}" for v in fit.glob.mu_zeta))


def cmd_mcmc(cfg):
    ds = _dataset(cfg)
    mc = McmcConfig(chains=cfg["chains"], iterations=cfg["iterations"], thin=cfg["thin"], burn_in=cfg["burn_in"],
                    seed=cfg["seed"])
    draws = run_chains(ds, cfg=mc)
    out = _out_dir(cfg)
    save_draws_csv(draws, out / "draws.csv", comment=_stamp(cfg))
    psrf = {k: np.asarray(v).tolist() for k, v in draws.psrf().items()} if mc.chains >= 2 else {}
    report = {"config": _recorded(cfg), "burn_in_iterations": mc.n_burn, "kept_per_chain": mc.kept_per_chain,
              "retained_draws": draws.n_draws, "psrf": psrf,
              "mean_acceptance": float(np.nanmean(draws.acceptance))}
    (out / "psrf.json").write_text(json.dumps(report, indent=1))
    print(f"{mc.chains} chains x {mc.iterations} iterations, burn-in {mc.n_burn}, thin {mc.thin}: "
          f"{draws.n_draws} draws kept")
    for k, v in psrf.items():
        print(f"PSRF {k}: " + " ".join(f"{x:.3f}" for x in v))


def cmd_assess(cfg):
    ds = _dataset(cfg)
    backends = [b.strip() for b in cfg["backends"].split(",") if b.strip()]
    folds = kfold_split(ds, cfg["folds"], seed=cfg["seed"])
    table = {b: [] for b in backends}
    for i, (train, test) in enumerate(folds):
        tr, te = ds.subset(train), ds.subset(test)
        for b in backends:
            if cfg["mode"] == "batch":
                fit = fit_batch(tr, backend=b, seed=cfg["seed"], track_bound=False)
            else:
                fit = fit_svi(tr, backend=b, seed=cfg["seed"], track_bound=False)
            rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(i,)))
            table[b].append(predictive_loglik(VariationalFit(fit.glob), te.agents, cfg["outer"], cfg["inner"], rng))
    out = _out_dir(cfg)
    with open(out / "predictive_loglik.csv", "w") as fh:
        fh.write(f"# {_stamp(cfg)}\n")
        fh.write("fold," + ",".join(backends) + "\n")
        for i in range(len(folds)):
            fh.write(f"{i + 1}," + ",".join(repr(table[b][i]) for b in backends) + "\n")
    summary = {b: {"folds": table[b], "mean": float(np.mean(table[b]))} for b in backends}
    (out / "predictive_loglik.json").write_text(json.dumps({"config": _recorded(cfg), "results": summary}, indent=1))
    print("fold  " + "  ".join(f"{b:>12}" for b in backends))
    for i in range(len(folds)):
        print(f"{i + 1:>4}  " + "  ".join(f"{table[b][i]:12.2f}" for b in backends))
    print("mean  " + "  ".join(f"{summary[b]['mean']:12.2f}" for b in backends))


def cmd_compare(cfg):
    sources = {}
    J = cfg.get("J")
    truth = None
    if cfg.get("truth"):
        truth = load_truth(cfg["truth"])
        sources["truth"] = TrueParams(truth["zeta"], truth["Omega"])
        J = J or (truth["spec"] or {}).get("J")
    for path in cfg.get("fit") or []:
        fit = load_fit(path)
        name = Path(path).stem
        n = 2
        while name in sources:
            name = f"{Path(path).stem}_{n}"
            n += 1
        sources[name] = VariationalFit(fit.glob)
    if cfg.get("draws"):
        sources["mcmc"] = McmcDraws(load_draws_csv(cfg["draws"]))
    ref = cfg.get("reference") or ("mcmc" if "mcmc" in sources else "truth" if "truth" in sources else next(iter(sources)))
    if ref not in sources:
        raise ConfigError(f"reference {ref!r} not among sources {sorted(sources)}")
    if J is None:
        raise ConfigError("--J is required when no truth file gives the number of alternatives")
    first = next(iter(sources.values()))
    K = len(first.zeta) if isinstance(first, TrueParams) else (
        first.glob.K if isinstance(first, VariationalFit) else first.draws.K)
    queries = random_queries(cfg["queries"], int(J), K, seed=cfg["seed"])
    outer = {n: cfg["outer"] for n in sources if cfg.get("outer")}
    rows, summary = compare_sources(queries, sources, ref, outer=outer, inner=cfg["inner"], seed=cfg["seed"])
    out = _out_dir(cfg)
    save_report_csv(rows, out / "tv.csv", comment=_stamp(cfg))
    save_summary_json(summary, out / "tv_summary.json", extra={"reference": ref, "config": _recorded(cfg)})
    names = list(summary)
    print(f"TV distance to {ref} over {len(queries)} queries")
    print(f"{'':>8}" + "".join(f"{n:>14}" for n in names))
    for stat in ("min", "q1", "median", "mean", "q3", "max"):
        print(f"{stat:>8}" + "".join(f"{summary[n][stat]:14.5f}" for n in names))


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "mcmc": cmd_mcmc, "assess": cmd_assess,
            "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    try:
        cfg = resolve_config(args)
        if cfg.get("threads") is None:
            cfg["threads"] = os.cpu_count() or 1
        _echo(cfg)
        COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataFormatError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
