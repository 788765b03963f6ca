"""Command-line entry point: ``pmurecon <subcommand> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 1 invalid input (config, paths, arguments), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import numcore as nc
from .datagen import (ModalConfig, ScheduleError, default_schedule, generate_windows, inject_missing,
                      load_dataset, split_and_store)
from .grid import GridError, GridGraph, build_khop_operators, bundled_grid_path, impedance_edge_features, load_grid
from .lowrank import LowRankConfig, LowRankModel, stack_inputs, train_lowrank, lowrank_forward, history_csv
from .numcore import ParamStore
from .online import StreamConfig, make_stream, offline_observed_mse, run_online
from .pipeline import (BASELINES, VARIANTS, ExperimentData, PrerequisiteError, SVTConfig, TrainedModels,
                       evaluate_models, reports_csv, reports_json, run_baseline, run_experiment, stack_truth)
from .stnet import STNetConfig, STNetModel, model_card, standardized_edges, train_stnet

log = logging.getLogger("pmurecon")

COMMANDS = ("gen-data", "train-aux", "train-stnet", "evaluate", "ablate", "baseline", "online", "report")


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def _section(cls) -> dict:
    d = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    return json.loads(json.dumps(d))  # tuples -> lists


def default_config() -> dict:
    return {
        "grid": "case39",
        "paths": {"dataset": "run/data", "checkpoints": "run/checkpoints", "reports": "run/reports"},
        "seeds": {"data": 0, "model": 0, "stream": 0},
        "K": 3,
        "data": {"n_windows": 2000, "splits": [0.7, 0.2, 0.1], "random_rate": 0.3, "target_rate": 0.6,
                 "event_len": 30, "modal": _section(ModalConfig)},
        "aux": _section(LowRankConfig),
        "stnet": _section(STNetConfig),
        "svt": _section(SVTConfig),
        "online": _section(StreamConfig),
        "ablate": {"variants": list(VARIANTS), "seeds": [0]},
        "baseline": {"methods": list(BASELINES)},
    }


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{where}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            out[k] = _merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(text)
    return cfg


def load_config(path: str | None, overrides: list[str] = ()) -> dict:
    cfg = default_config()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            cfg = _merge(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    cfg = apply_overrides(cfg, list(overrides))
    validate_config(cfg)
    return cfg


def _build(cls, d: dict, name: str):
    kw = {}
    for f in fields(cls):
        v = d[f.name]
        if isinstance(v, list):
            v = tuple(v)
        kw[f.name] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} config: {exc}") from exc


def modal_cfg(cfg) -> ModalConfig:
    return _build(ModalConfig, cfg["data"]["modal"], "data.modal")


def aux_cfg(cfg) -> LowRankConfig:
    return _build(LowRankConfig, cfg["aux"], "aux")


def stnet_cfg(cfg) -> STNetConfig:
    return _build(STNetConfig, cfg["stnet"], "stnet")


def svt_cfg(cfg) -> SVTConfig:
    return _build(SVTConfig, cfg["svt"], "svt")


def stream_cfg(cfg) -> StreamConfig:
    return _build(StreamConfig, cfg["online"], "online")


def validate_config(cfg: dict) -> None:
    for key in ("data", "model", "stream"):
        if not isinstance(cfg["seeds"][key], int):
            raise ConfigError(f"seeds.{key} must be an explicit integer")
    if not isinstance(cfg["K"], int) or cfg["K"] < 1:
        raise ConfigError("K must be a positive integer")
    if not isinstance(cfg["data"]["n_windows"], int) or cfg["data"]["n_windows"] < 1:
        raise ConfigError("data.n_windows must be a positive integer")
    for v in cfg["ablate"]["variants"]:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected a subset of {list(VARIANTS)}")
    for mth in cfg["baseline"]["methods"]:
        if mth not in BASELINES:
            raise ConfigError(f"unknown baseline {mth!r}; expected a subset of {list(BASELINES)}")
    if not all(isinstance(s, int) for s in cfg["ablate"]["seeds"]):
        raise ConfigError("ablate.seeds must be integers")
    modal_cfg(cfg), aux_cfg(cfg), stnet_cfg(cfg), svt_cfg(cfg), stream_cfg(cfg)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(directory: Path, command: str, cfg: dict, argv: list[str], extra: dict | None = None) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    man = {
        "command": command,
        "argv": list(argv),
        "config_hash": config_hash(cfg),
        "seeds": cfg["seeds"],
        "versions": {"pmurecon": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "config": cfg,
    }
    if extra:
        man.update(extra)
    path = directory / f"manifest-{command}.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# artifact helpers
# --------------------------------------------------------------------------


def resolve_grid(cfg) -> GridGraph:
    name = cfg["grid"]
    path = Path(name)
    if not path.suffix and not path.exists():
        path = bundled_grid_path(name)
    if not path.exists():
        raise ConfigError(f"grid file not found: {path}")
    return load_grid(path)


def experiment_data(cfg) -> ExperimentData:
    ddir = Path(cfg["paths"]["dataset"])
    if not (ddir / "manifest.json").exists():
        raise PrerequisiteError(f"dataset not found in {ddir}; run gen-data first")
    parts = load_dataset(ddir)
    man = json.loads((ddir / "manifest.json").read_text())
    g = resolve_grid(cfg)
    gen = man.get("generation", {})
    modal = ModalConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in gen["modal"].items()}) \
        if "modal" in gen else None
    return ExperimentData(g, parts["train"], parts["test"], modal, gen.get("n_windows"), gen.get("seed"))


def _ckpt(cfg, name: str) -> Path:
    return Path(cfg["paths"]["checkpoints"]) / f"{name}.json"


def save_models(cfg, models: TrainedModels, seed: int) -> None:
    d = Path(cfg["paths"]["checkpoints"])
    d.mkdir(parents=True, exist_ok=True)
    if models.aux is not None:
        models.aux.store.save(_ckpt(cfg, "aux"))
    models.stnet.store.save(_ckpt(cfg, "stnet"))
    card = model_card(models.stnet, seed)
    card["variant"] = models.variant
    (d / "stnet.card.json").write_text(json.dumps(card, indent=2, sort_keys=True) + "\n")


def load_aux(cfg, g: GridGraph) -> LowRankModel:
    p = _ckpt(cfg, "aux")
    if not p.exists():
        raise PrerequisiteError(f"aux checkpoint not found: {p}; run train-aux first")
    ops = build_khop_operators(g, cfg["K"])
    return LowRankModel(ParamStore.load(p), ops, aux_cfg(cfg))


def load_models(cfg, g: GridGraph) -> TrainedModels:
    p = _ckpt(cfg, "stnet")
    card_p = Path(cfg["paths"]["checkpoints"]) / "stnet.card.json"
    if not p.exists() or not card_p.exists():
        raise PrerequisiteError(f"ST-Net checkpoint not found: {p}; run train-stnet first")
    card = json.loads(card_p.read_text())
    variant = card.get("variant", "full")
    ops = build_khop_operators(g, cfg["K"])
    st = STNetModel(ParamStore.load(p), ops, standardized_edges(impedance_edge_features(g), ops), stnet_cfg(cfg))
    aux = load_aux(cfg, g) if variant == "full" else None
    return TrainedModels(variant, aux, st)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_reports(cfg, stem: str, reports) -> Path:
    rdir = Path(cfg["paths"]["reports"])
    _write(rdir / f"{stem}.csv", reports_csv(reports))
    _write(rdir / f"{stem}.json", reports_json(reports))
    return rdir


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(cfg, args, argv) -> None:
    g = resolve_grid(cfg)
    mc = modal_cfg(cfg)
    d = cfg["data"]
    seed = cfg["seeds"]["data"]
    windows = generate_windows(g, mc, d["n_windows"], seed)
    sched = default_schedule(len(windows), g.n_pmu, mc.window_len, seed, random_rate=d["random_rate"],
                             target_rate=d["target_rate"], event_len=d["event_len"])
    windows = inject_missing(windows, sched)
    extra = {"generation": {"grid": g.name, "modal": json.loads(json.dumps(asdict(mc))),
                            "n_windows": d["n_windows"], "seed": seed, "n_events": len(sched.events)}}
    ddir = Path(cfg["paths"]["dataset"])
    split_and_store(windows, tuple(d["splits"]), ddir, extra)
    write_manifest(ddir, "gen-data", cfg, argv)


def cmd_train_aux(cfg, args, argv) -> None:
    data = experiment_data(cfg)
    ops = build_khop_operators(data.g, cfg["K"])
    model = train_lowrank(data.train, ops, aux_cfg(cfg), cfg["seeds"]["model"])
    d = Path(cfg["paths"]["checkpoints"])
    d.mkdir(parents=True, exist_ok=True)
    model.store.save(_ckpt(cfg, "aux"))
    _write(d / "aux_history.csv", history_csv(model.history))
    write_manifest(d, "train-aux", cfg, argv)


def cmd_train_stnet(cfg, args, argv) -> None:
    data = experiment_data(cfg)
    seed = cfg["seeds"]["model"]
    ops = build_khop_operators(data.g, cfg["K"])
    x, m = stack_inputs(data.train)
    if args.no_prior:
        aux, prior, variant = None, None, "v2"
    else:
        aux = load_aux(cfg, data.g)
        prior, variant = lowrank_forward(aux, x, m).L, "full"
    st = train_stnet(x, m, stack_truth(data.train), prior, ops, impedance_edge_features(data.g),
                     stnet_cfg(cfg), seed)
    save_models(cfg, TrainedModels(variant, aux, st), seed)
    d = Path(cfg["paths"]["checkpoints"])
    lines = ["step,epoch,loss"] + [f"{h['step']},{h['epoch']},{h['loss']!r}" for h in st.history]
    _write(d / "stnet_history.csv", "\n".join(lines) + "\n")
    write_manifest(d, "train-stnet", cfg, argv)


def cmd_evaluate(cfg, args, argv) -> None:
    data = experiment_data(cfg)
    models = load_models(cfg, data.g)
    res = evaluate_models(models, data, cfg["seeds"]["model"], split=args.split)
    rdir = _write_reports(cfg, "evaluate", [res.report])
    write_manifest(rdir, "evaluate", cfg, argv)


def cmd_ablate(cfg, args, argv) -> None:
    variants = args.variants.split(",") if args.variants else cfg["ablate"]["variants"]
    seeds = [args.seed] if args.seed is not None else cfg["ablate"]["seeds"]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected a subset of {list(VARIANTS)}")
    data = experiment_data(cfg)
    reports = []
    for seed in seeds:
        for v in variants:
            res = run_experiment(data, v, aux_cfg(cfg), stnet_cfg(cfg), cfg["K"], seed)
            log.info("ablate %s seed %d: rmse %.5f (%.1f s)", v, seed, res.report.rmse, res.report.wall_time)
            reports.append(res.report)
    rdir = _write_reports(cfg, "ablate", reports)
    write_manifest(rdir, "ablate", cfg, argv, {"variants": variants, "ablate_seeds": seeds})


def cmd_baseline(cfg, args, argv) -> None:
    methods = args.methods.split(",") if args.methods else cfg["baseline"]["methods"]
    for mth in methods:
        if mth not in BASELINES:
            raise ConfigError(f"unknown baseline {mth!r}; expected a subset of {list(BASELINES)}")
    data = experiment_data(cfg)
    reports = [run_baseline(data, mth, svt_cfg(cfg), cfg["seeds"]["model"]).report for mth in methods]
    rdir = _write_reports(cfg, "baseline", reports)
    write_manifest(rdir, "baseline", cfg, argv)


def cmd_online(cfg, args, argv) -> None:
    data = experiment_data(cfg)
    models = load_models(cfg, data.g)
    if models.aux is None:
        raise PrerequisiteError("online adaptation needs a checkpoint trained with the prior (variant full)")
    scfg = stream_cfg(cfg)
    stream = make_stream(data.g, data.modal or modal_cfg(cfg), scfg, cfg["seeds"]["stream"], drift=not args.no_drift,
                         random_rate=cfg["data"]["random_rate"], target_rate=cfg["data"]["target_rate"],
                         pool_seed=data.data_seed)
    x, m = stack_inputs(data.test)
    base = offline_observed_mse(models, x, m)
    res = run_online(models, stream, scfg, cfg["seeds"]["stream"], offline_obs_mse=base)
    rdir = Path(cfg["paths"]["reports"])
    _write(rdir / "online.csv", res.staged_csv())
    _write(rdir / "online_history.csv", res.history_csv())
    summary = {"trigger_batch": res.trigger_batch, "threshold": res.threshold,
               "pseudo_label_reached": res.pseudo_label_reached,
               "stages": json.loads(reports_json([res.reports[s] for s in res.reports]))}
    _write(rdir / "online.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(rdir, "online", cfg, argv)


def cmd_report(cfg, args, argv) -> None:
    """Merge the per-run report CSVs into one table keyed by (method, variant, seed)."""
    rdir = Path(cfg["paths"]["reports"])
    sources = ["evaluate", "baseline", "ablate"]
    rows = {}
    keys = None
    for src in sources:
        p = rdir / f"{src}.csv"
        if not p.exists():
            continue
        for row in csv.DictReader(io.StringIO(p.read_text())):
            row = {"source": src, **row}
            keys = keys or list(row)
            rows[(row["method"], row["variant"], row["seed"], src)] = row
    if not rows:
        raise PrerequisiteError(f"no report CSVs found in {rdir}")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for k in sorted(rows):
        w.writerow(rows[k])
    _write(rdir / "comparison.csv", buf.getvalue())
    def num(text, cast):
        v = cast(text)
        return None if isinstance(v, float) and not np.isfinite(v) else v

    table = [{"source": r["source"], "method": r["method"], "variant": r["variant"], "seed": num(r["seed"], int),
              "rmse": num(r["rmse"], float), "mspe": num(r["mspe"], float), "n_missing": num(r["n_missing"], int)}
             for r in (rows[key] for key in sorted(rows))]
    _write(rdir / "comparison.json", json.dumps(table, indent=2, sort_keys=True) + "\n")
    write_manifest(rdir, "report", cfg, argv)


HANDLERS = {
    "gen-data": cmd_gen_data, "train-aux": cmd_train_aux, "train-stnet": cmd_train_stnet,
    "evaluate": cmd_evaluate, "ablate": cmd_ablate, "baseline": cmd_baseline, "online": cmd_online,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set stnet.lr=0.01")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="pmurecon", description="PMU missing-data reconstruction")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate and split a synthetic dataset")
    sub.add_parser("train-aux", parents=[common], help="train the low-rank auxiliary model")
    s = sub.add_parser("train-stnet", parents=[common], help="train the reconstruction network")
    s.add_argument("--no-prior", action="store_true", help="train without the low-rank prior")
    s = sub.add_parser("evaluate", parents=[common], help="evaluate saved checkpoints")
    s.add_argument("--split", choices=["test", "train"], default="test")
    s = sub.add_parser("ablate", parents=[common], help="train and evaluate ablation variants")
    s.add_argument("--variants", help="comma-separated subset of full,v1,v2")
    s.add_argument("--seed", type=int, help="single model seed (overrides ablate.seeds)")
    s = sub.add_parser("baseline", parents=[common], help="run classical baselines")
    s.add_argument("--methods", help="comma-separated subset of svt,linear_interp")
    s = sub.add_parser("online", parents=[common], help="streaming adaptation run")
    s.add_argument("--no-drift", action="store_true", help="stationary stream")
    sub.add_parser("report", parents=[common], help="merge report CSVs into a comparison table")
    return p


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if not args.command:
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, args.overrides)
        HANDLERS[args.command](cfg, args, argv)
    except (ConfigError, GridError, ScheduleError, PrerequisiteError, FileNotFoundError) as exc:
        msg = exc
        if isinstance(exc, FileNotFoundError) and exc.filename:
            msg = f"file not found: {exc.filename}"
        print(f"pmurecon {args.command}: {msg}", file=sys.stderr)
        return 1
    except (nc.NumericError, ValueError, OSError, RuntimeError) as exc:
        print(f"pmurecon {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
