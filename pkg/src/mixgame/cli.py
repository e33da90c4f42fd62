"""``mixgame`` command line: generate-data, train-nominal, train-cost, evaluate, report.

Values resolve as built-in defaults < ``--config`` JSON file < explicit flags,
and every command writes the resolved config next to its outputs.
Exit codes: 0 ok, 2 usage or validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import benchmark as bm
from .checkpoint import CheckpointError
from .cvae import CvaeConfig, CvaeModel, CvaeTrainConfig, dataset_loss, train_cvae
from .data import load_dataset, save_dataset, split_trials
from .inverse import (CostNet, CostNetConfig, CostTrainConfig, agent_windows,
                      mean_window_loss, train_cost, window_dataset)

log = logging.getLogger("mixgame")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad flags, config values or input files (exit 2)."""


DEFAULTS = {
    "generate-data": {"trials": 50, "seed": 0, "out": "data/train.jsonl", "workers": 1,
                      "max_steps": 300},
    "train-nominal": {"data": None, "out": "models/cvae", "seed": 0, "workers": 1,
                      "epochs": 50, "batch_size": 32, "lr": 1e-4, "hidden": 256,
                      "noise_sigma": 0.0, "stride": 1, "holdout": 0.1},
    "train-cost": {"data": None, "cvae": None, "out": "models/cost", "seed": 0, "workers": 1,
                   "epochs": 10, "batch_size": 48, "lr": 1e-4, "K": 100, "sweeps": 3,
                   "width": 256, "stride": 1, "holdout": 0.1, "chunk": 8,
                   "noise_sigma": 0.0},
    "evaluate": {"policies": "gt,oracle,blind,cvae,ours", "episodes": 100, "seed": 1000,
                 "out": "results", "workers": 1, "cvae": None, "cost": None,
                 "noisy_cvae": "", "noise_sigmas": "0", "K": 200,
                 "calibration_episodes": 20, "collision_threshold": None, "timing": False,
                 "max_steps": 300},
    "report": {"results": None, "out": "report", "seed": 0, "workers": 1},
}


# -------------------------------------------------------------------- parsing

def _common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file with flag values")
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixgame", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="collect all-LQ navigation trials")
    _common(p)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)

    p = sub.add_parser("train-nominal", help="train the trajectory CVAE")
    _common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--holdout", type=float, default=None)

    p = sub.add_parser("train-cost", help="train the pairwise cost net (inverse game)")
    _common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--cvae", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--sweeps", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--holdout", type=float, default=None)
    p.add_argument("--chunk", type=int, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)

    p = sub.add_parser("evaluate", help="closed-loop evaluation of robot policies")
    _common(p)
    p.add_argument("--policies", default=None, help="comma list of " + ",".join(bm.POLICIES))
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--cvae", default=None)
    p.add_argument("--cost", default=None)
    p.add_argument("--noisy-cvae", default=None, help="e.g. 0.05=models/cvae05,0.1=models/cvae10")
    p.add_argument("--noise-sigmas", default=None, help="comma list, e.g. 0,0.05,0.1")
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--calibration-episodes", type=int, default=None)
    p.add_argument("--collision-threshold", type=float, default=None)
    p.add_argument("--timing", dest="timing", action="store_true", default=None,
                   help="record wall-clock plan times (outputs are then not byte-reproducible)")
    p.add_argument("--no-timing", dest="timing", action="store_false",
                   help="write NaN plan times (default)")
    p.add_argument("--max-steps", type=int, default=None)

    p = sub.add_parser("report", help="per-policy distribution files from a results CSV")
    _common(p)
    p.add_argument("--results", default=None)
    return ap


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(file_cfg)
    for k, v in vars(args).items():
        if k in cfg and v is not None:
            cfg[k] = v
    if cfg.get("workers", 1) < 1:
        raise UsageError("--workers must be >= 1")
    return cfg


def _write_config(path: Path, command: str, cfg: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"command": command, **cfg}, indent=1, sort_keys=True) + "\n")


def _require_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _positive(cfg, *keys):
    for k in keys:
        if cfg[k] is None or cfg[k] < 1:
            raise UsageError(f"--{k.replace('_', '-')} must be >= 1")


def _writable(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path.parent}: {exc}") from None
    if not os.access(path.parent, os.W_OK):
        raise UsageError(f"output directory not writable: {path.parent}")


def _load_trials(path):
    try:
        trials = load_dataset(_require_file(path, "data"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not trials:
        raise UsageError(f"dataset {path} is empty")
    return trials


def _load_cvae(path) -> CvaeModel:
    if path is None:
        raise UsageError("--cvae is required")
    try:
        return CvaeModel.load(path)
    except (CheckpointError, OSError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot load CVAE checkpoint {path}: {exc}") from None


def _load_cost(path) -> CostNet:
    try:
        return CostNet.load(path)
    except (CheckpointError, OSError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot load cost checkpoint {path}: {exc}") from None


def _stem(out) -> Path:
    p = Path(out)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


# ------------------------------------------------------------------- commands

def cmd_generate_data(cfg: dict) -> int:
    _positive(cfg, "trials", "max_steps")
    out = Path(cfg["out"])
    _writable(out)
    scen = bm.ScenarioConfig(episode_max_steps=cfg["max_steps"])
    records = bm.collect_dataset(cfg["trials"], scen, cfg["seed"], cfg["workers"])
    save_dataset(out, records)
    _write_config(out.with_suffix(".config.json"), "generate-data", cfg)
    lengths = np.array([r.length for r in records])
    print(f"wrote {len(records)} trials to {out}")
    print(f"trial length: mean {lengths.mean():.1f} min {lengths.min()} max {lengths.max()} "
          f"(capped: {int((lengths >= cfg['max_steps'] + 1).sum())})")
    return 0


def _cvae_arrays(trials, cfg, tau1, tau2):
    windows, skipped = window_dataset(trials, tau1, tau2, cfg["stride"], cfg["noise_sigma"])
    if not windows:
        raise UsageError(f"no windows: all {skipped} trials shorter than {tau1 + tau2} steps")
    return windows


def cmd_train_nominal(cfg: dict) -> int:
    _positive(cfg, "epochs", "batch_size", "hidden", "stride")
    if cfg["noise_sigma"] < 0:
        raise UsageError("--noise-sigma must be >= 0")
    trials = _load_trials(cfg["data"])
    stem = _stem(cfg["out"])
    _writable(stem)
    mcfg = CvaeConfig(hidden=cfg["hidden"])
    train, hold = split_trials(trials, cfg["holdout"], cfg["seed"])
    windows = _cvae_arrays(train, cfg, mcfg.tau1, mcfg.tau2)
    pasts, futures, betas = agent_windows(windows)
    tc = CvaeTrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["seed"])
    model, history = train_cvae(pasts, futures, betas, model_cfg=mcfg, train_cfg=tc)
    model.save(stem)
    rows = [("epoch", "loss")] + [(k + 1, "%.17g" % v) for k, v in enumerate(history)]
    extra = {}
    if hold:
        hw, _ = window_dataset(hold, mcfg.tau1, mcfg.tau2, cfg["stride"], cfg["noise_sigma"])
        if hw:
            extra["holdout_loss"] = dataset_loss(model, *agent_windows(hw))
    with open(stem.with_suffix(".loss.csv"), "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    _write_config(stem.with_suffix(".config.json"), "train-nominal", {**cfg, **extra})
    print(f"trained CVAE on {len(pasts)} agent windows; loss {history[0]:.3f} -> {history[-1]:.3f}")
    return 0


def cmd_train_cost(cfg: dict) -> int:
    _positive(cfg, "epochs", "batch_size", "K", "sweeps", "width", "stride", "chunk")
    trials = _load_trials(cfg["data"])
    cvae = _load_cvae(cfg["cvae"])
    if (cvae.config.tau1, cvae.config.tau2) != (30, 10):
        raise UsageError(f"incompatible CVAE checkpoint: tau1={cvae.config.tau1}, "
                         f"tau2={cvae.config.tau2} (expected 30, 10)")
    stem = _stem(cfg["out"])
    _writable(stem)
    train, hold = split_trials(trials, cfg["holdout"], cfg["seed"])
    windows = _cvae_arrays(train, cfg, 30, 10)
    net = CostNet.init(CostNetConfig(width=cfg["width"]), seed=cfg["seed"])
    tc = CostTrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["K"], cfg["sweeps"],
                         cfg["chunk"], cfg["seed"])
    net, history = train_cost(net, cvae, windows, tc,
                              callback=lambda e, loss, n: n.save(stem))
    net.save(stem)
    extra = {}
    if hold:
        hw, _ = window_dataset(hold, 30, 10, cfg["stride"], cfg["noise_sigma"])
        if hw:
            extra["holdout_loss"] = mean_window_loss(net, cvae, hw, cfg["K"], cfg["seed"],
                                                     cfg["sweeps"])
            extra["holdout_zero_cost_loss"] = mean_window_loss(None, cvae, hw, cfg["K"],
                                                               cfg["seed"], cfg["sweeps"])
    rows = [("epoch", "loss")] + [(k + 1, "%.17g" % v) for k, v in enumerate(history)]
    with open(stem.with_suffix(".loss.csv"), "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    _write_config(stem.with_suffix(".config.json"), "train-cost", {**cfg, **extra})
    print(f"trained cost net on {len(windows)} windows; loss {history[0]:.3f} -> {history[-1]:.3f}")
    if extra:
        print(f"held-out loss {extra['holdout_loss']:.3f} "
              f"(zero-cost baseline {extra['holdout_zero_cost_loss']:.3f})")
    return 0


def _parse_floats(text, what):
    try:
        return [float(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad {what}: {text!r}") from None


def cmd_evaluate(cfg: dict) -> int:
    _positive(cfg, "episodes", "K", "max_steps")
    policies = [p.strip() for p in str(cfg["policies"]).split(",") if p.strip()]
    bad = [p for p in policies if p not in bm.POLICIES]
    if bad or not policies:
        raise UsageError(f"unknown policy {', '.join(bad) or '(none)'}; "
                         f"choose from {', '.join(bm.POLICIES)}")
    sigmas = _parse_floats(cfg["noise_sigmas"], "--noise-sigmas")
    if any(s < 0 for s in sigmas) or not sigmas:
        raise UsageError("noise sigmas must be >= 0")
    models = bm.EvalModels(K=cfg["K"])
    if any(p in ("cvae", "ours") for p in policies):
        models.cvae = _load_cvae(cfg["cvae"])
    if "ours" in policies:
        if cfg["cost"] is None:
            raise UsageError("--cost is required for policy 'ours'")
        models.cost = _load_cost(cfg["cost"])
    for item in str(cfg["noisy_cvae"]).split(","):
        if item.strip():
            try:
                s, path = item.split("=", 1)
                models.noisy_cvae[float(s)] = _load_cvae(path)
            except ValueError:
                raise UsageError(f"bad --noisy-cvae entry {item!r}") from None
    out = Path(cfg["out"])
    _writable(out / "results.csv")
    scen = bm.ScenarioConfig(episode_max_steps=cfg["max_steps"])
    threshold = cfg["collision_threshold"]
    if threshold is None:
        if cfg["calibration_episodes"] < 1:
            raise UsageError("--calibration-episodes must be >= 1 without --collision-threshold")
        calib = bm.run_policy_episodes("gt", cfg["calibration_episodes"], scen, models, 0.0,
                                       cfg["seed"], cfg["workers"])
        threshold = bm.calibrate_threshold(calib)
    log.info("collision threshold %.4f m", threshold)
    rows = []
    for sigma in sigmas:
        for name in policies:
            if name == "gt" and sigma > 0:
                continue        # GT sees true states; noise does not apply
            recs = bm.run_policy_episodes(name, cfg["episodes"], scen, models, sigma,
                                          cfg["seed"], cfg["workers"])
            for r in recs:
                rows.append(bm.result_row(r, bm.compute_metrics(r, threshold,
                                                                scen.goal_tolerance),
                                          timing=cfg["timing"]))
    (out / "results.csv").write_text(bm.rows_to_csv(rows))
    summary = {"collision_threshold": threshold, "policies": bm.summarize(rows)}
    (out / "summary.json").write_text(bm.summary_json(summary))
    _write_config(out / "evaluate.config.json", "evaluate", cfg)
    for key, s in summary["policies"].items():
        print(f"{key:>12}: collisions {100 * s['collision_rate']:5.1f}%  "
              f"min-dist median {s['min_distance']['median']:.3f}  "
              f"cost median {s['robot_runtime_cost']['median']:.2f}")
    return 0


def cmd_report(cfg: dict) -> int:
    path = _require_file(cfg["results"], "results")
    try:
        rows = bm.read_results(path)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"malformed results file {path}: {exc}") from None
    if not rows:
        raise UsageError(f"results file {path} has no rows")
    out = Path(cfg["out"])
    _writable(out / "x")
    groups: dict = {}
    for r in rows:
        groups.setdefault(bm.group_key(r), []).append(r)
    metrics = ("robot_runtime_cost", "min_distance", "mean_plan_time")
    qrows = [("group", "metric", "n", "min", "q1", "median", "q3", "max")]
    for key in sorted(groups):
        g = groups[key]
        safe = key.replace("@", "_sigma")
        with open(out / f"{safe}.dist.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("rank",) + metrics)
            cols = [sorted(r[m] for r in g) for m in metrics]
            for k in range(len(g)):
                w.writerow([k] + ["%.17g" % c[k] for c in cols])
        for m in metrics:
            vals = [r[m] for r in g]
            if any(np.isnan(vals)):
                continue
            q = bm.quartiles(vals)
            qrows.append((key, m, len(vals)) + tuple("%.17g" % q[s] for s in
                                                     ("min", "q1", "median", "q3", "max")))
        qrows.append((key, "collision_rate", len(g), "", "", "%.17g" % (
            sum(r["collided"] for r in g) / len(g)), "", ""))
    with open(out / "quartiles.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(qrows)
    _write_config(out / "report.config.json", "report", cfg)
    print(f"wrote {len(groups)} distribution files and quartiles.csv to {out}")
    return 0


COMMANDS = {"generate-data": cmd_generate_data, "train-nominal": cmd_train_nominal,
            "train-cost": cmd_train_cost, "evaluate": cmd_evaluate, "report": cmd_report}


def setup_logging():
    level_name = os.environ.get("MIXGAME_LOG", "error").lower()
    if level_name not in LOG_LEVELS:
        raise UsageError(f"MIXGAME_LOG must be one of {', '.join(LOG_LEVELS)}, got {level_name!r}")
    logging.basicConfig(level=LOG_LEVELS[level_name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        setup_logging()
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"mixgame: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"mixgame: runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
