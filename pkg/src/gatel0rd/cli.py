"""Command-line front end.

Subcommands: gen-data, train, eval, plan, sweep, export-latents. Every run
directory receives the fully resolved ``config.json``. Exit codes: 0 on
success, 1 for usage errors, 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, config as C
from .envs.dataset import (DEFAULT_BALANCE, ENV_KINDS, DatasetFormatError, QuotaError, generate_dataset, manifest,
                           read_jsonl, to_arrays, write_jsonl)
from .model import SeqModel
from .planner import TASKS, success_rate
from .training import TrainingDiverged, train

log = logging.getLogger("gatel0rd")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SWEEP_COLUMNS = ("cell", "lambda", "seed", "status", "task_loss", "nstep_mse", "gate_open_rate",
                 "dims_changed")


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag dest -> config path
FLAG_PATHS = {
    "env": ("env",),
    "seed": ("seed",),
    "out": ("output",),
    "count": ("dataset", "count"),
    "length": ("dataset", "length"),
    "policy": ("dataset", "policy"),
    "data": ("dataset", "path"),
    "test": ("dataset", "test_path"),
    "gen_set": ("dataset", "gen_path"),
    "cell": ("model", "cell"),
    "gate": ("model", "gate"),
    "latent_dim": ("model", "latent_dim"),
    "layers": ("model", "layers"),
    "warmup": ("model", "warmup"),
    "noise_variance": ("model", "noise_variance"),
    "lam": ("train", "lam"),
    "penalty": ("train", "penalty"),
    "lr": ("train", "lr"),
    "batch_size": ("train", "batch_size"),
    "epochs": ("train", "epochs"),
    "k": ("train", "k"),
    "p_min": ("train", "p_min"),
    "clip": ("train", "clip"),
    "task": ("planner", "task"),
    "episodes": ("planner", "episodes"),
    "horizon": ("planner", "horizon"),
    "samples": ("planner", "samples"),
    "iterations": ("planner", "iterations"),
    "elites": ("planner", "elites"),
    "beta": ("planner", "beta"),
    "init_std": ("planner", "init_std"),
    "cells": ("sweep", "cells"),
    "lambdas": ("sweep", "lambdas"),
    "seeds": ("sweep", "seeds"),
    "workers": ("sweep", "workers"),
}


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gatel0rd", description="Sparse-gated recurrent forward models: data, training, evaluation, planning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run config; explicit flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    def model_flags(sp):
        sp.add_argument("--cell", choices=("gatel0rd", "gru", "lstm", "elman"))
        sp.add_argument("--gate", choices=("retanh-stochastic", "retanh-deterministic", "sigmoid", "heaviside-ste"))
        sp.add_argument("--latent-dim", type=int)
        sp.add_argument("--layers", type=int)
        sp.add_argument("--warmup", type=int)
        sp.add_argument("--noise-variance", type=float)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--penalty", choices=("l0", "l1", "l2", "none"))
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--k", type=float)
        sp.add_argument("--p-min", type=float)
        sp.add_argument("--clip", type=float)

    def planner_flags(sp):
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--samples", type=int)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--elites", type=int)
        sp.add_argument("--beta", type=float)
        sp.add_argument("--init-std", type=float)

    g = sub.add_parser("gen-data", help="generate a balanced episode dataset")
    common(g)
    g.add_argument("--env")
    g.add_argument("--count", type=int)
    g.add_argument("--length", type=int)
    g.add_argument("--policy", choices=("rand", "time", "shepherd"))

    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    t.add_argument("--data", help="dataset JSONL file or gen-data directory")
    t.add_argument("--env")
    model_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--test", help="held-out dataset")
    e.add_argument("--gen-set", help="distribution-shift dataset")
    e.add_argument("--env")
    e.add_argument("--traces", type=int, default=0, help="export latent traces for the first N episodes")
    e.add_argument("--window", type=int, default=0, help="tolerance in steps for event-aligned gating")

    pl = sub.add_parser("plan", help="model-predictive control episodes")
    common(pl)
    pl.add_argument("--task", choices=TASKS)
    src = pl.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--ground-truth", action="store_true")
    pl.add_argument("--episodes", type=int)
    planner_flags(pl)

    s = sub.add_parser("sweep", help="train and evaluate a grid of cells, lambdas and seeds")
    common(s)
    s.add_argument("--data")
    s.add_argument("--test")
    s.add_argument("--env")
    s.add_argument("--cells", type=_csv_list(str))
    s.add_argument("--lambdas", type=_csv_list(float))
    s.add_argument("--seeds", type=_csv_list(int))
    s.add_argument("--workers", type=int)
    model_flags(s)

    x = sub.add_parser("export-latents", help="write per-episode latent-trace CSVs")
    common(x)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data")
    x.add_argument("--env")
    x.add_argument("--episodes", type=_csv_list(int), help="comma-separated episode indices (default: first 5)")
    x.add_argument("--feed", choices=("teacher", "autoregressive"), default="teacher")
    return p


# -- config plumbing ------------------------------------------------------------


def _set(doc: dict, path: tuple, value):
    for key in path[:-1]:
        doc = doc.setdefault(key, {})
    doc[path[-1]] = value


def run_config(args) -> dict:
    """Defaults < config file < explicit flags, then resolved against the env preset."""
    doc = C.load(args.config) if getattr(args, "config", None) else {}
    flags: dict = {}
    for dest, path in FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is not None and not (dest == "episodes" and args.command == "export-latents"):
            _set(flags, path, value)
    try:
        merged = C.merge(C.merge(C.DEFAULTS, doc), flags)
        return C.resolve(merged)
    except C.ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(cfg: dict, default: str) -> Path:
    out = Path(cfg["output"] or default)
    out.mkdir(parents=True, exist_ok=True)
    cfg["output"] = str(out)
    return out


def _dataset_file(path) -> Path:
    p = Path(path)
    return p / "dataset.jsonl" if p.is_dir() else p


def _manifest_env(path) -> str | None:
    m = _dataset_file(path).parent / "manifest.json"
    if m.exists():
        return json.loads(m.read_text()).get("env")
    return None


def _load_data(path):
    f = _dataset_file(path)
    if not f.exists():
        raise RuntimeFailure(f"dataset {f} does not exist")
    try:
        eps = read_jsonl(f)
        obs, act = to_arrays(eps)
    except (DatasetFormatError, ValueError) as exc:
        raise RuntimeFailure(str(exc)) from exc
    return eps, obs, act


def _env_from_data(args, doc_env_given: bool) -> dict:
    """Use the dataset manifest's env unless the env was set explicitly."""
    if getattr(args, "env", None) is None and getattr(args, "data", None):
        env = _manifest_env(args.data)
        if env is not None and not doc_env_given:
            args.env = env
    return run_config(args)


def _config_sets_env(args) -> bool:
    return bool(getattr(args, "config", None)) and "env" in C.load(args.config)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_checkpoint(path) -> SeqModel:
    p = Path(path)
    if not p.exists():
        raise RuntimeFailure(f"checkpoint {p} does not exist")
    try:
        return SeqModel.load(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise RuntimeFailure(f"cannot load checkpoint {p}: {exc}") from exc


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.env is not None and args.env not in ENV_KINDS:
        raise UsageError(f"unknown env {args.env!r}; valid names: {', '.join(ENV_KINDS)}")
    cfg = run_config(args)
    ds = cfg["dataset"]
    out = _out_dir(cfg, f"data/{cfg['env']}-{ds['policy']}-{cfg['seed']}")
    data_path, man_path = out / "dataset.jsonl", out / "manifest.json"
    try:
        eps = generate_dataset(cfg["env"], ds["count"], ds["length"], ds["policy"], ds["balance"], cfg["seed"])
        write_jsonl(data_path, eps)
    except (QuotaError, ValueError) as exc:
        for f in (data_path, man_path):
            f.unlink(missing_ok=True)
        raise RuntimeFailure(str(exc)) from exc
    man = manifest(cfg["env"], ds["policy"], cfg["seed"], ds["count"], ds["length"],
                   ds["balance"] if ds["balance"] is not None else DEFAULT_BALANCE[cfg["env"]])
    man["file"] = data_path.name
    man["sha256"] = _sha256(data_path)
    man_path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    C.dump(cfg, out / "config.json")
    print(f"wrote {len(eps)} episodes to {data_path}")
    return EXIT_OK


def _check_dims(cfg, obs, act):
    do, da = C.OBS_ACT_DIMS[cfg["env"]]
    if obs.shape[2] != do or act.shape[2] != da:
        raise RuntimeFailure(
            f"dataset has observation/action widths ({obs.shape[2]}, {act.shape[2]}), "
            f"env {cfg['env']!r} expects ({do}, {da})"
        )


def train_run(cfg: dict, out: Path) -> dict:
    """Train one model as described by a resolved config; returns a summary."""
    eps, obs, act = _load_data(cfg["dataset"]["path"])
    _check_dims(cfg, obs, act)
    mcfg = C.model_config(cfg)
    tcfg = C.train_config(cfg)
    model = SeqModel(mcfg, seed=tcfg.seed)
    C.dump(cfg, out / "config.json")
    ckpt = out / "checkpoint.json"
    try:
        history = train(model, obs, act if act.shape[2] else None, tcfg, log_path=out / "log.csv")
    except TrainingDiverged as exc:
        model.save(ckpt)
        raise RuntimeFailure(f"training diverged: {exc}; last good parameters saved to {ckpt}") from exc
    model.save(ckpt)
    last = history[-1] if history else None
    return {"checkpoint": str(ckpt), "epochs": len(history),
            "task_loss": None if last is None else last.task,
            "gate_open_rate": None if last is None else last.gate_open_rate}


def cmd_train(args) -> int:
    if args.data is None and not args.config:
        raise UsageError("train needs --data (or a config with dataset.path)")
    cfg = _env_from_data(args, _config_sets_env(args))
    if cfg["dataset"]["path"] is None:
        raise UsageError("no dataset path given")
    out = _out_dir(cfg, f"runs/{cfg['env']}-{cfg['model']['cell']}-lam{cfg['train']['lam']}-seed{cfg['train']['seed']}")
    summary = train_run(cfg, out)
    print(json.dumps(summary))
    return EXIT_OK


def _event_key(env: str) -> str | None:
    return "control_onset" if env == "rrc" else None


def evaluate_split(model: SeqModel, env: str, path, window: int = 0) -> dict:
    eps, obs, act = _load_data(path)
    if obs.shape[2] != model.config.obs_dim or act.shape[2] != model.config.act_dim:
        raise RuntimeFailure(
            f"dataset {path} has widths ({obs.shape[2]}, {act.shape[2]}), checkpoint expects "
            f"({model.config.obs_dim}, {model.config.act_dim})"
        )
    A = act if act.shape[2] else None
    metas = [e.meta for e in eps]
    key = _event_key(env)
    report = analysis.evaluate(model, obs, A, metas if key else None, key, window)
    if env == "shepherd":
        steps = [m.get("reappear_step") for m in metas]
        if any(s is not None and s >= model.config.warmup for s in steps):
            err = analysis.reappearance_error(model, obs, A, steps)
            report.extra["reappearance_x_error"] = {k: v for k, v in err.items() if k != "per_episode"}
    d = report.to_dict()
    d["dataset"] = str(_dataset_file(path))
    d["episodes"] = len(eps)
    return d


def _env_for_model(model: SeqModel, data_path) -> str:
    env = _manifest_env(data_path) if data_path else None
    if env is not None:
        return env
    for name, dims in C.OBS_ACT_DIMS.items():
        if dims == (model.config.obs_dim, model.config.act_dim):
            return name
    raise RuntimeFailure("cannot determine the environment of this checkpoint")


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    paths = {"train": args.data, "test": args.test, "generalization": args.gen_set}
    if not any(paths.values()):
        raise UsageError("eval needs at least one of --data, --test, --gen-set")
    first = next(v for v in paths.values() if v)
    if args.env is None:
        args.env = _env_for_model(model, first)
    cfg = run_config(args)
    out = _out_dir(cfg, str(Path(args.checkpoint).parent / "eval"))
    metrics = {"checkpoint": str(args.checkpoint), "env": cfg["env"]}
    for split, path in paths.items():
        if path:
            metrics[split] = evaluate_split(model, cfg["env"], path, args.window)
    if "test" in metrics and "generalization" in metrics:
        metrics["generalization_ratio"] = metrics["generalization"]["nstep_mse"] / metrics["test"]["nstep_mse"]
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    if args.traces:
        _export(model, first, range(args.traces), "teacher", out / "traces")
    C.dump(cfg, out / "config.json")
    print(json.dumps({k: v for k, v in metrics.items() if not isinstance(v, dict)}))
    return EXIT_OK


def cmd_plan(args) -> int:
    if not args.ground_truth and not args.checkpoint:
        raise UsageError("plan needs --checkpoint or --ground-truth")
    cfg = run_config(args)
    task = cfg["planner"]["task"]
    if task not in TASKS:
        raise UsageError(f"unknown task {task!r}; valid tasks: {', '.join(TASKS)}")
    model = None
    if args.checkpoint:
        model = _load_checkpoint(args.checkpoint)
        if (model.config.obs_dim, model.config.act_dim) != C.OBS_ACT_DIMS[task]:
            raise RuntimeFailure(f"checkpoint dimensions do not match task {task!r}")
    out = _out_dir(cfg, f"plans/{task}-{'gt' if model is None else 'model'}-seed{cfg['seed']}")
    logs = out / "plan_logs"
    logs.mkdir(exist_ok=True)
    cfg["env"] = task
    C.dump(cfg, out / "config.json")
    res = success_rate(task, cfg["planner"]["episodes"], model, C.planner_config(cfg), cfg["seed"], logs)
    res["ground_truth"] = model is None
    (out / "plan.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: res[k] for k in ("task", "episodes", "success_rate", "std_error")}))
    return EXIT_OK


def _sweep_child(job: dict) -> dict:
    cfg, out = job["cfg"], Path(job["out"])
    row = {"cell": cfg["model"]["cell"], "lambda": cfg["train"]["lam"], "seed": cfg["train"]["seed"]}
    done = out / "metrics.json"
    if done.exists():
        return {**row, **json.loads(done.read_text())["row"]}
    out.mkdir(parents=True, exist_ok=True)
    try:
        summary = train_run(cfg, out)
        model = SeqModel.load(summary["checkpoint"])
        path = cfg["dataset"]["test_path"] or cfg["dataset"]["path"]
        ev = evaluate_split(model, cfg["env"], path)
        result = {"status": "ok", "task_loss": summary["task_loss"], "nstep_mse": ev["nstep_mse"],
                  "gate_open_rate": ev["gate_open_rate"], "dims_changed": ev["dims_changed"]}
        done.write_text(json.dumps({"row": result, "eval": ev}, indent=2, sort_keys=True) + "\n")
    except Exception as exc:  # a failed child must not stop the sweep
        result = {"status": f"failed: {exc}", "task_loss": None, "nstep_mse": None,
                  "gate_open_rate": None, "dims_changed": None}
    return {**row, **result}


def cmd_sweep(args) -> int:
    if args.data is None and not args.config:
        raise UsageError("sweep needs --data (or a config with dataset.path)")
    cfg = _env_from_data(args, _config_sets_env(args))
    sw = cfg["sweep"]
    if not (sw["cells"] and sw["lambdas"] and sw["seeds"]):
        raise UsageError("sweep grid is empty")
    out = _out_dir(cfg, f"sweeps/{cfg['env']}")
    C.dump(cfg, out / "config.json")
    jobs = []
    for cell in sw["cells"]:
        for lam in sw["lambdas"]:
            for seed in sw["seeds"]:
                child = json.loads(json.dumps(cfg))
                child["model"]["cell"] = cell
                child["train"]["lam"] = lam
                child["train"]["seed"] = seed
                child["seed"] = seed
                run_dir = out / "runs" / f"{cell}-lam{lam}-seed{seed}"
                child["output"] = str(run_dir)
                try:
                    child = C.resolve(child)
                except C.ConfigError as exc:
                    raise UsageError(str(exc)) from exc
                jobs.append({"cfg": child, "out": str(run_dir)})
    if sw["workers"] > 1:
        with ProcessPoolExecutor(max_workers=sw["workers"]) as pool:
            rows = list(pool.map(_sweep_child, jobs))
    else:
        rows = [_sweep_child(j) for j in jobs]
    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k) for k in SWEEP_COLUMNS})
    failed = sum(not str(r["status"]).startswith("ok") for r in rows)
    print(f"{len(rows)} runs, {failed} failed; results in {out / 'results.csv'}")
    return EXIT_OK


def _export(model: SeqModel, data_path, indices, feed: str, out: Path) -> list[Path]:
    eps, obs, act = _load_data(data_path)
    if obs.shape[2] != model.config.obs_dim:
        raise RuntimeFailure(f"dataset observation width {obs.shape[2]} does not match the checkpoint")
    out.mkdir(parents=True, exist_ok=True)
    idx = [i for i in indices if i < len(eps)]
    if not idx:
        raise RuntimeFailure("no valid episode indices to export")
    A = act[idx] if act.shape[2] else None
    res = model.forward(obs[idx], A, feed=feed, train=False)
    preds = res.predictions()
    written = []
    for j, i in enumerate(idx):
        path = out / f"trace_{eps[i].id}.csv"
        try:
            analysis.export_latent_trace(res.trace.episode(j), preds[j], path)
        except OSError as exc:
            raise RuntimeFailure(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written


def cmd_export_latents(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    if args.data is None:
        raise UsageError("export-latents needs --data")
    if args.env is None:
        args.env = _env_for_model(model, args.data)
    cfg = run_config(args)
    out = _out_dir(cfg, str(Path(args.checkpoint).parent / "latents"))
    written = _export(model, args.data, args.episodes or range(5), args.feed, out)
    C.dump(cfg, out / "config.json")
    print(f"wrote {len(written)} trace files to {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "plan": cmd_plan,
    "sweep": cmd_sweep,
    "export-latents": cmd_export_latents,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, FloatingPointError) as exc:
        log.debug(traceback.format_exc())
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
