"""``flexi`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
Log verbosity comes from ``FLEXI_LOG`` (error, info or debug).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("flexivae.cli")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class CLIConfigError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


# ---------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _out(args, path: str | Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(args.out_dir) / p


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CLIConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CLIConfigError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    import numpy as np

    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def _write_field_csv(path: Path, config, u) -> Path:
    """One row per grid point: ``x,u`` in 1D and ``x,y,u`` in 2D."""
    import numpy as np

    path.parent.mkdir(parents=True, exist_ok=True)
    u = np.asarray(u)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if u.ndim == 1:
            w.writerow(["x", "u"])
            w.writerows(zip(config.x.tolist(), u.tolist()))
        else:
            w.writerow(["x", "y", "u"])
            for iy, yv in enumerate(config.y):
                for ix, xv in enumerate(config.x):
                    w.writerow([float(xv), float(yv), float(u[iy, ix])])
    return path


def _load_data(path):
    from .pde import load_dataset

    if not Path(path).exists():
        raise CLIConfigError(f"dataset not found: {path}")
    return load_dataset(path)


def _pde_from_arg(kind: str, grid: int | None):
    from .pde import AdvDiffConfig, BurgersConfig

    if kind == "burgers":
        return BurgersConfig() if grid is None else BurgersConfig(n=grid)
    return AdvDiffConfig() if grid is None else AdvDiffConfig(grid=(grid, grid))


def _split_for(args, records, config, seed):
    from .pde import split_dataset, split_from_dict

    if getattr(args, "split", None):
        return split_from_dict(_read_json(args.split), records, config)
    return split_dataset(records, args.train_frac, seed, config=config)


def _training_config(args, seed):
    from dataclasses import replace

    from .training import TrainingConfig, get_preset

    if args.config:
        cfg = TrainingConfig.from_dict(_read_json(args.config))
    elif args.preset:
        cfg = get_preset(args.preset).train
    else:
        cfg = TrainingConfig()
    return cfg if args.seed is None else replace(cfg, seed=seed)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    from .pde import build_dataset, config_from_dict, save_dataset

    config = config_from_dict(_read_json(args.pde_config)) if args.pde_config else _pde_from_arg(args.pde, args.grid)
    records = build_dataset(config, args.k, args.j, args.i, _seed(args))
    out = _out(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, config, records)
    log.info("wrote %d records to %s", len(records), out)
    return 0


def cmd_split(args) -> int:
    from .pde import split_dataset, split_to_dict

    config, records = _load_data(args.data)
    split = split_dataset(records, args.train_frac, _seed(args), config=config)
    _write_json(_out(args, args.out), split_to_dict(split))
    log.info("split counts %s", split.counts())
    return 0


def cmd_train(args) -> int:
    from .pde import build_dataset
    from .training import get_preset, train

    seed = _seed(args)
    cfg = _training_config(args, seed)
    if args.data:
        config, records = _load_data(args.data)
    elif args.preset:
        p = get_preset(args.preset)
        config, records = p.pde, build_dataset(p.pde, *p.dataset_shape(), seed)
    else:
        raise CLIConfigError("train needs --data or --preset")
    split = _split_for(args, records, config, seed)
    model, report = train(split, cfg, config)
    out = _out(args, args.out)
    model.save(out)
    report.write_csv(out / "report.csv")
    _write_json(out / "report.json", {"config": cfg.to_dict(), "pde": config.to_dict(), **report.summary()})
    _write_json(out / "pde.json", config.to_dict())
    log.info("final loss %.6g after %d steps", report.epochs[-1]["L"], report.steps)
    return 0


def _load_model(path):
    from .model import FlexiVAE

    if not Path(path).exists():
        raise CLIConfigError(f"checkpoint not found: {path}")
    return FlexiVAE.load(path)


def cmd_evaluate(args) -> int:
    from .training import evaluate_zones, write_heatmap_csv

    model = _load_model(args.model)
    config, records = _load_data(args.data)
    seed = _seed(args)
    split = _split_for(args, records, config, seed)
    res = evaluate_zones(model, split, args.n_samples, seed, config)
    out = _out(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        z: None if r is None else {"count": r.count, "mse": r.mean, "mse_signal": r.mean_where(args.min_power)}
        for z, r in res.items()
    }
    _write_json(out / "zones.json", {"n_samples": args.n_samples, "seed": seed, "zones": summary})
    write_heatmap_csv(out / "heatmap.csv", res, args.bins)
    log.info("zone mse %s", {z: (s or {}).get("mse") for z, s in summary.items()})
    return 0


def cmd_diagnose(args) -> int:
    from .diagnostics import compare_encoded_vs_propagated, latent_grid_map, perturbation_probe

    model = _load_model(args.model)
    config, records = _load_data(args.data)
    if not 0 <= args.record < len(records):
        raise CLIConfigError(f"record index {args.record} out of range 0..{len(records) - 1}")
    rec = records[args.record]
    cmp = compare_encoded_vs_propagated(model, rec)
    probes = {name: perturbation_probe(model, rep.z, args.eps) for name, rep in (("encoded", cmp.encoded), ("propagated", cmp.propagated))}
    out = _out(args, args.out)
    report = {
        "record": {"index": args.record, "key": list(rec.key), "t": rec.t, "tau": rec.tau, "zeta": float(rec.zeta[0])},
        **cmp.to_dict(),
        "probes": {k: {"eps": p.eps, "gains": p.gains} for k, p in probes.items()},
    }
    _write_json(out, report)
    stem = out.with_suffix("")
    with open(f"{stem}_probes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["latent", "axis", "eps", "norm", "gain"])
        for name, p in probes.items():
            for j, (nrm, g) in enumerate(zip(p.norms, p.gains)):
                w.writerow([name, j, p.eps, float(nrm), float(g)])
    if len(model.arch.state_shape) == 1 and model.arch.latent_dim >= 2:
        lm = latent_grid_map(model, n=args.grid, dx=float(config.dx))
        with open(f"{stem}_latent_map.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["z0", "z1", "sharpness", "peak_position"])
            w.writerows(lm.rows())
    return 0


def cmd_forecast(args) -> int:
    model = _load_model(args.model)
    config, records = _load_data(args.input)
    if not 0 <= args.record < len(records):
        raise CLIConfigError(f"record index {args.record} out of range 0..{len(records) - 1}")
    if args.tau_steps < 1:
        raise CLIConfigError("--tau-steps must be >= 1")
    rec = records[args.record]
    re = float(rec.zeta[0]) if args.re is None else args.re
    pred = model.forecast(rec.u_now, args.tau_steps * config.dt, re)
    _write_field_csv(_out(args, args.out), config, pred)
    return 0


def cmd_baseline_train(args) -> int:
    from dataclasses import replace

    from .baseline import AELSTMConfig, baseline_preset, generate_trajectories, re_grid, train_baseline
    from .pde import BurgersConfig

    p = baseline_preset(args.preset)
    cfg = AELSTMConfig.from_dict(_read_json(args.config)) if args.config else p["config"]
    over = {k: v for k, v in (("ae_epochs", args.ae_epochs), ("lstm_epochs", args.lstm_epochs)) if v is not None}
    if args.seed is not None:
        over["seed"] = args.seed
    cfg = replace(cfg, **over)
    pde = BurgersConfig()
    data = generate_trajectories(pde, re_grid(*p["train_re"]), p["n_snapshots"])
    model, report = train_baseline(data, cfg)
    out = _out(args, args.out)
    model.save(out)
    _write_json(out / "report.json", report.to_dict())
    return 0


def cmd_baseline_forecast(args) -> int:
    import numpy as np

    from .baseline import AELSTM
    from .pde import BurgersConfig, snapshots

    if not Path(args.model).exists():
        raise CLIConfigError(f"checkpoint not found: {args.model}")
    model = AELSTM.load(args.model)
    w = model.config.window
    if args.window:
        config, records = _load_data(args.window)
        if len(records) < w:
            raise CLIConfigError(f"window file holds {len(records)} snapshots, need {w}")
        window = np.stack([r.u_now for r in records[:w]])
        re = float(records[0].zeta[0]) if args.re is None else args.re
    else:
        if args.re is None:
            raise CLIConfigError("give --window or --re")
        config, re = BurgersConfig(), args.re
        times = args.t_start + np.arange(w) * config.dt
        window = snapshots(config, times, np.full(w, re))
    if args.steps < 1:
        raise CLIConfigError("--steps must be >= 1")
    pred = model.rollout_forecast(window, re, args.steps)
    _write_field_csv(_out(args, args.out), config, pred)
    return 0


def cmd_bench(args) -> int:
    import numpy as np

    from .baseline import AELSTM
    from .bench import pin_single_worker, run_bench
    from .pde import BurgersConfig, snapshots

    model = _load_model(args.model)
    if not Path(args.baseline).exists():
        raise CLIConfigError(f"checkpoint not found: {args.baseline}")
    base = AELSTM.load(args.baseline)
    pde = BurgersConfig()
    w = base.config.window
    window = snapshots(pde, args.t_start + np.arange(w) * pde.dt, np.full(w, args.re))
    pin_single_worker()
    res = run_bench(model, base, window[-1], window, args.re, args.tau_steps, pde.dt, args.trials)
    res.write(_out(args, args.out))
    for row in res.rows():
        log.info("tau_steps=%d flexi=%.3gs baseline=%.3gs speedup=%.1fx", row["tau_steps"], row["flexi_median"], row["baseline_median"], row["speedup"])
    return 0


def cmd_scaling(args) -> int:
    from .training import data_scaling_study

    res = data_scaling_study(args.sizes, args.preset, seed=_seed(args))
    out = _out(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scaling.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "mse"])
        w.writerows(zip(res.sizes, res.mse))
    _write_json(out / "scaling.json", {"sizes": res.sizes, "mse": res.mse, "slope": res.slope, "intercept": res.intercept})
    log.info("log-log slope %.3f", res.slope)
    return 0


# ---------------------------------------------------------------- pipeline

PIPELINE_REQUIRED = ("pde", "dataset", "train")


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise CLIConfigError(f"missing config field '{where}{key}'")
    return d[key]


def cmd_pipeline(args) -> int:
    from dataclasses import replace

    from .diagnostics import compare_encoded_vs_propagated
    from .pde import build_dataset, config_from_dict, save_dataset, split_dataset, split_to_dict
    from .training import TrainingConfig, evaluate_zones, train

    cfg = _read_json(args.config)
    for key in PIPELINE_REQUIRED:
        _require(cfg, key, "")
    pde_cfg = cfg["pde"]
    if isinstance(pde_cfg, str):
        pde_cfg = {"kind": pde_cfg}
    config = config_from_dict(pde_cfg)
    ds = cfg["dataset"]
    K, J, I = (_require(ds, k, "dataset.") for k in ("k", "j", "i"))
    tcfg = TrainingConfig.from_dict(cfg["train"])
    seed = _seed(args, int(cfg.get("seed", 0)))
    tcfg = replace(tcfg, seed=seed)
    n_eval = int(cfg.get("evaluate", {}).get("n_samples", 2000))
    record_idx = int(cfg.get("diagnose", {}).get("record", 0))
    train_frac = float(cfg.get("train_frac", 0.7))

    out = _out(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": seed, "config": cfg, "stages": [], "status": "running"}
    mpath = out / "manifest.json"

    def stage(name: str, path: Path) -> None:
        manifest["stages"].append({"stage": name, "path": str(path.relative_to(out)), "sha256": _sha256(path)})
        _write_json(mpath, manifest)

    try:
        records = build_dataset(config, K, J, I, seed)
        save_dataset(out / "dataset.fvds", config, records)
        stage("gen", out / "dataset.fvds")

        split = split_dataset(records, train_frac, seed, config=config)
        _write_json(out / "split.json", split_to_dict(split))
        stage("split", out / "split.json")

        model, report = train(split, tcfg, config)
        model.save(out / "model")
        report.write_csv(out / "model" / "report.csv")
        stage("train", out / "model" / "params.fvps")

        res = evaluate_zones(model, split, n_eval, seed, config)
        zones = {z: None if r is None else {"count": r.count, "mse": r.mean} for z, r in res.items()}
        _write_json(out / "zones.json", zones)
        stage("evaluate", out / "zones.json")

        if not records:
            raise CLIConfigError("dataset is empty")
        cmp = compare_encoded_vs_propagated(model, records[min(record_idx, len(records) - 1)])
        _write_json(out / "diagnose.json", cmp.to_dict())
        stage("diagnose", out / "diagnose.json")
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        _write_json(mpath, manifest)
        raise
    manifest["status"] = "ok"
    _write_json(mpath, manifest)
    return 0


# ---------------------------------------------------------------- parser


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexi", description="Single-shot PDE forecasting with a propagator VAE.")
    p.add_argument("--seed", type=int, default=None, help="global seed (default: config value or 0)")
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads")
    p.add_argument("--out-dir", default=".", help="base directory for relative output paths")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="generate a tuple dataset from the closed forms")
    s.add_argument("--pde", choices=["burgers", "advdiff"], default="burgers")
    s.add_argument("--pde-config", help="JSON file with PDE config fields")
    s.add_argument("--grid", type=int, help="grid points per axis")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--j", type=int, required=True)
    s.add_argument("--i", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("split", help="split a dataset into training and validation zones")
    s.add_argument("--data", required=True)
    s.add_argument("--train-frac", type=float, default=0.7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train a Flexi-VAE")
    s.add_argument("--config", help="TrainingConfig JSON")
    s.add_argument("--preset", help="named preset (used for data and config when not given)")
    s.add_argument("--data")
    s.add_argument("--split", help="split JSON from 'flexi split'")
    s.add_argument("--train-frac", type=float, default=0.7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="zone-wise forecast error and heatmap")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split")
    s.add_argument("--train-frac", type=float, default=0.7)
    s.add_argument("--n-samples", type=int, default=30_000)
    s.add_argument("--bins", type=int, default=20)
    s.add_argument("--min-power", type=float, default=1e-2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("diagnose", help="decoder Jacobian diagnostics for one record")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--record", type=int, default=0)
    s.add_argument("--eps", type=float, default=1e-3)
    s.add_argument("--grid", type=int, default=21)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("forecast", help="single-shot forecast of one snapshot")
    s.add_argument("--model", required=True)
    s.add_argument("--tau-steps", type=int, required=True)
    s.add_argument("--re", type=float)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--record", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("baseline-train", help="train the AE-LSTM baseline")
    s.add_argument("--preset", default="desk")
    s.add_argument("--config", help="AELSTMConfig JSON")
    s.add_argument("--ae-epochs", type=int)
    s.add_argument("--lstm-epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline_train)

    s = sub.add_parser("baseline-forecast", help="AE-LSTM rollout forecast")
    s.add_argument("--model", required=True)
    s.add_argument("--window", help="dataset file whose first records form the input window")
    s.add_argument("--re", type=float)
    s.add_argument("--t-start", type=float, default=0.0)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline_forecast)

    s = sub.add_parser("bench", help="latency of single-shot vs rollout forecasts")
    s.add_argument("--model", required=True)
    s.add_argument("--baseline", required=True)
    s.add_argument("--tau-steps", type=_int_list, default=[150, 300, 450])
    s.add_argument("--trials", type=int, default=300)
    s.add_argument("--re", type=float, default=1000.0)
    s.add_argument("--t-start", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("pipeline", help="gen, split, train, evaluate and diagnose in one run")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="pipeline")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("scaling", help="forecast error against dataset size")
    s.add_argument("--sizes", type=_int_list, default=[2500, 5000, 10000, 20000])
    s.add_argument("--preset", default="burgers-dcp-desk")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scaling)
    return p


def _setup_logging() -> None:
    level = os.environ.get("FLEXI_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise CLIConfigError(f"FLEXI_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        if args.threads < 1:
            raise CLIConfigError("--threads must be >= 1")
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
        return args.func(args)
    except CLIConfigError as exc:
        print(f"flexi: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        from .errors import ConfigurationError, DimensionError, UsageError

        if isinstance(exc, (ConfigurationError, DimensionError, UsageError)):
            print(f"flexi: error: {exc}", file=sys.stderr)
            return 2
        log.debug("failure", exc_info=True)
        print(f"flexi: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
