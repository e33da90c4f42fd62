"""Desk-scale end-to-end run: data, CVAEs, cost net, evaluation, report.

Everything goes through the ``mixgame`` CLI so the artifacts carry their
resolved configs. Steps whose outputs already exist are skipped, so the
acceptance suite can reuse a finished run.

    python scripts/desk_pipeline.py [--out artifacts/desk] [--episodes 50]

On one laptop core the full run takes roughly two and a half hours: about an hour
of training and the rest closed-loop evaluation.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from mixgame.cli import main as cli

DESK = {
    "trials": 50, "data_seed": 11,
    "cvae": ["--hidden", "64", "--epochs", "40", "--lr", "1e-3", "--stride", "2", "--holdout", "0.1"],
    "cost": ["--width", "32", "--epochs", "8", "--lr", "3e-3", "--K", "32", "--stride", "2",
             "--chunk", "16", "--holdout", "0.2"],
    "K": 32,
    "gt_episodes": 20,
    "gt_seed": 5000,
    "noise_sigmas": ("0.05", "0.1"),
}


def step(name, done: Path, argv):
    if done.exists():
        print(f"[skip] {name}: {done} exists")
        return
    t = time.time()
    print(f"[run]  {name}: mixgame {' '.join(argv)}", flush=True)
    rc = cli(argv)
    if rc != 0:
        sys.exit(f"{name} failed with exit code {rc}")
    print(f"[done] {name} in {time.time() - t:.0f} s", flush=True)


def threshold_of(summary: Path) -> float:
    return json.loads(summary.read_text())["collision_threshold"]


def run(out: Path, episodes: int = 50) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    data = out / "train.jsonl"
    step("generate-data", data, ["generate-data", "--trials", str(DESK["trials"]),
                                 "--seed", str(DESK["data_seed"]), "--out", str(data)])
    step("train-nominal", out / "cvae.bin", ["train-nominal", "--data", str(data),
                                             *DESK["cvae"], "--out", str(out / "cvae")])
    step("train-cost", out / "cost.bin", ["train-cost", "--data", str(data), "--cvae",
                                          str(out / "cvae"), *DESK["cost"],
                                          "--out", str(out / "cost")])
    models = ["--cvae", str(out / "cvae"), "--cost", str(out / "cost"), "--K", str(DESK["K"])]
    main_eval = out / "eval"
    # the collision threshold is calibrated on GT episodes inside this run
    step("evaluate", main_eval / "summary.json",
         ["evaluate", "--policies", "blind,cvae,ours", "--episodes", str(episodes),
          *models, "--out", str(main_eval)])
    thr = str(threshold_of(main_eval / "summary.json"))
    # one CVAE per noise level, trained on pasts observed with that noise
    noisy = []
    for s in DESK["noise_sigmas"]:
        name = "cvae_noise" + s.replace(".", "")
        step(f"train-nominal sigma {s}", out / f"{name}.bin",
             ["train-nominal", "--data", str(data), *DESK["cvae"], "--noise-sigma", s,
              "--out", str(out / name)])
        noisy.append(f"{s}={out / name}")
    # same episode seeds, noisy observations
    step("evaluate-noise", out / "eval_noise" / "summary.json",
         ["evaluate", "--policies", "ours", "--episodes", str(episodes), "--noise-sigmas",
          ",".join(DESK["noise_sigmas"]), "--noisy-cvae", ",".join(noisy),
          "--collision-threshold", thr, *models, "--out", str(out / "eval_noise")])
    # fresh scenarios for the GT safety check, so it is not the calibration set
    step("evaluate-gt", out / "eval_gt" / "summary.json",
         ["evaluate", "--policies", "gt", "--episodes", str(DESK["gt_episodes"]),
          "--seed", str(DESK["gt_seed"]), "--collision-threshold", thr,
          "--out", str(out / "eval_gt")])
    step("report", out / "report" / "quartiles.csv",
         ["report", "--results", str(main_eval / "results.csv"), "--out", str(out / "report")])
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="artifacts/desk")
    ap.add_argument("--episodes", type=int, default=50)
    a = ap.parse_args()
    run(Path(a.out), a.episodes)
