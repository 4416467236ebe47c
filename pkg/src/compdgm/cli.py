"""Command-line entry points: simulate, fit, eval, reproduce, check-theory, ingest."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import io
from .evaluation import evaluate
from .metrics import MetricsReport
from .optim import TrainConfig, history_jsonl, model_for_config, train
from .simgen import SimConfig, generate_contrastive
from .theory import run_checks

log = logging.getLogger("compdgm")


# ---------------------------------------------------------------- single commands


def cmd_simulate(config: dict, out_dir: Path, seed: int | None = None) -> Path:
    if seed is not None:
        config = {**config, "seed": seed}
    cfg = SimConfig.from_dict(config)
    t0 = time.time()
    ds = generate_contrastive(cfg)
    out_dir = io.write_dataset(Path(out_dir), ds)
    artifacts = {"dataset": str(out_dir), "meta": str(out_dir / "meta.json")}
    io.RunManifest(cfg.to_dict(), [cfg.seed], artifacts, wall_clock_s={"simulate": time.time() - t0}).write(
        out_dir / "manifest.json")
    return out_dir


def cmd_fit(dataset_dir: Path, config: dict, out_dir: Path, seed: int | None = None) -> Path:
    if seed is not None:
        config = {**config, "seed": seed}
    cfg = TrainConfig.from_dict(config)
    data = io.read_dataset(Path(dataset_dir))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = model_for_config(cfg, data.n_features)
    t0 = time.time()
    result = train(model, data.x_background, data.x_target, cfg)
    wall = time.time() - t0
    io.save_model(out_dir / "checkpoint", model, {"train_config": cfg.to_dict()})
    (out_dir / "history.jsonl").write_text(history_jsonl(result.history))
    artifacts = {"dataset": str(dataset_dir), "checkpoint": str(out_dir / "checkpoint"),
                 "history": str(out_dir / "history.jsonl")}
    io.RunManifest(cfg.to_dict(), [cfg.seed], artifacts, wall_clock_s={"fit": wall}).write(out_dir / "manifest.json")
    return out_dir


def _read_history(path: Path) -> list[dict] | None:
    if not path.exists():
        return None
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def cmd_eval(dataset_dir: Path, checkpoint_dir: Path, out_file: Path, seed: int = 0) -> MetricsReport:
    data = io.read_dataset(Path(dataset_dir))
    checkpoint_dir = Path(checkpoint_dir)
    model = io.load_model(checkpoint_dir)
    if model.n_features != data.n_features:
        raise ValueError(f"dimension mismatch: checkpoint expects {model.n_features} features, "
                         f"dataset has {data.n_features}")
    history = _read_history(checkpoint_dir.parent / "history.jsonl")
    rep = evaluate(model, data.x_background, data.x_target, data.z_true, data.s_true, data.labels,
                   history=history, seed=seed, config={"dataset": str(dataset_dir), "checkpoint": str(checkpoint_dir)})
    Path(out_file).parent.mkdir(parents=True, exist_ok=True)
    Path(out_file).write_text(json.dumps(rep.to_dict(), indent=2))
    return rep


# ---------------------------------------------------------------- reproduction grids


def table_grid(table: str) -> list[tuple[str, dict, dict]]:
    """(cell label, simulation overrides, training overrides) for each cell of a results table."""
    cells = []
    if table == "t1":
        for noise in ("poisson", "nb"):
            for label, train_over in (("MO-cVAE", {"objective": "MO"}), ("SO-cVAE", {"objective": "SO"}),
                                      ("VAE", {"model": "vae"})):
                cells.append((f"{label} / {noise}", {"noise": noise}, {"likelihood": noise, **train_over}))
    elif table == "t2":
        for obj in ("SO", "MO"):
            for q_hat in (5, 7, 10, 15):
                cells.append((f"{obj}-cVAE / q_hat={q_hat}", {}, {"objective": obj, "q_hat": q_hat}))
    elif table == "t3":
        for obj in ("SO", "MO"):
            for lam in (0, 10, 50, 100, 200):
                cells.append((f"{obj} / U(lambda={lam})", {},
                              {"objective": obj, "q_hat": 10, "regularizer": "penalty", "penalty_lambda": float(lam)}))
            cells.append((f"{obj} / CO(beta=0.05)", {},
                          {"objective": obj, "q_hat": 10, "regularizer": "constrained", "beta": 0.05}))
    elif table == "gaussian":
        cells.append(("SO-cVAE / gaussian", {"noise": "gaussian"}, {"objective": "SO", "likelihood": "gaussian"}))
    else:
        raise ValueError(f"unknown table {table!r}; choose t1, t2, t3 or gaussian")
    return cells


def run_key(sim: dict, tc: dict) -> str:
    blob = json.dumps({"sim": sim, "train": tc}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_cell(sim_over: dict, train_over: dict, seed: int, cache_dir: Path, epochs: int | None = None) -> dict:
    """Simulate, fit and evaluate one (cell, seed) pair; cached by the full config hash."""
    sim = SimConfig.from_dict({**sim_over, "seed": seed})
    tc = TrainConfig.from_dict({**train_over, "seed": seed, **({} if epochs is None else {"epochs": epochs})})
    key = run_key(sim.to_dict(), tc.to_dict())
    run_dir = Path(cache_dir) / key
    metrics_path = run_dir / "metrics.json"
    if metrics_path.exists():
        return json.loads(metrics_path.read_text())
    run_dir.mkdir(parents=True, exist_ok=True)
    ds = generate_contrastive(sim)
    model = model_for_config(tc, ds.n_features)
    t0 = time.time()
    result = train(model, ds.x_background, ds.x_target, tc)
    wall = time.time() - t0
    rep = evaluate(model, ds.x_background, ds.x_target, ds.z_true, ds.s_true, ds.labels, history=result.history,
                   seed=seed, config={"sim": sim.to_dict(), "train": tc.to_dict()})
    out = rep.to_dict()
    out["epochs_run"] = len(result.history)
    out["wall_clock_s"] = wall
    (run_dir / "history.jsonl").write_text(history_jsonl(result.history))
    metrics_path.write_text(json.dumps(out, indent=2))
    return out


COLUMNS = (("MCC_zz", "pearson", "mcc_zz"), ("MCC_zs", "pearson", "mcc_zs"), ("MCC_sz", "pearson", "mcc_sz"),
           ("MCC_ss", "pearson", "mcc_ss"), ("delta-MCC", None, "delta_mcc"))


def _cell_value(run: dict, block: str | None, key: str) -> float | None:
    if block is None:
        return run.get(key)
    b = run.get(block)
    return None if b is None else b[key]


def aggregate(runs: list[dict]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation (ddof=1) over seeds for each column."""
    out = {}
    for col, block, key in COLUMNS:
        vals = [v for v in (_cell_value(r, block, key) for r in runs) if v is not None]
        if vals:
            arr = np.asarray(vals, float)
            out[col] = (float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0)
    return out


def render_table(rows: list[tuple[str, dict | None]]) -> str:
    head = "| setting | " + " | ".join(c for c, _, _ in COLUMNS) + " |"
    sep = "|" + "---|" * (len(COLUMNS) + 1)
    lines = [head, sep]
    for label, agg in rows:
        if agg is None:
            cells = ["failed"] * len(COLUMNS)
        else:
            cells = [f"{agg[c][0]:.2f} ± {agg[c][1]:.2f}" if c in agg else "n/a" for c, _, _ in COLUMNS]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_reproduce(table: str, seeds: list[int], out_dir: Path, epochs: int | None = None) -> dict:
    if len(seeds) < 2:
        raise ValueError("reproduce needs at least two seeds")
    out_dir = Path(out_dir)
    cache = out_dir / "runs"
    rows, raw = [], {}
    for label, sim_over, train_over in table_grid(table):
        runs, failed = [], []
        for seed in seeds:
            try:
                runs.append(run_cell(sim_over, train_over, seed, cache, epochs))
            except Exception as exc:  # recorded per run; the cell is marked failed below
                log.error("run %s seed %d failed: %s", label, seed, exc)
                failed.append({"seed": seed, "error": repr(exc), "trace": traceback.format_exc()})
        raw[label] = {"runs": runs, "failures": failed}
        rows.append((label, aggregate(runs) if runs and not failed else None))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{table}.md").write_text(render_table(rows))
    (out_dir / f"{table}.json").write_text(json.dumps(raw, indent=2))
    return raw


def cmd_check_theory(which: str, seed: int, out_dir: Path | None = None, negative_control: bool = False) -> list:
    reports = run_checks(which, seed, negative_control)
    lines = ["| check | result | criteria |", "|---|---|---|"]
    for r in reports:
        crit = ", ".join(f"{k}={'ok' if v else 'no'}" for k, v in r.criteria.items())
        lines.append(f"| {r.name} | {'PASS' if r.passed else 'FAIL'} | {crit} |")
    text = "\n".join(lines) + "\n"
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "checks.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2))
        (out_dir / "checks.md").write_text(text)
    print(text, end="")
    return reports


# ---------------------------------------------------------------- argument parsing


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compdgm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset directory")
    s.add_argument("--config", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int)

    f = sub.add_parser("fit", help="train a model on a dataset directory")
    f.add_argument("--data", type=Path, required=True)
    f.add_argument("--config", type=Path)
    f.add_argument("--out", type=Path, required=True)
    f.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="compute the metrics report for a checkpoint")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("reproduce", help="run a results table over several seeds")
    r.add_argument("--table", choices=("t1", "t2", "t3", "gaussian"), required=True)
    r.add_argument("--seeds", type=_seeds, default=[0, 1, 2, 3, 4])
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--epochs", type=int, help="override the epoch budget (smoke runs)")

    c = sub.add_parser("check-theory", help="run the counterexample verifiers")
    c.add_argument("which", nargs="?", default="all", choices=("all", "rotation", "linear", "nonlinear", "bernoulli"))
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", type=Path)
    c.add_argument("--negative-control", action="store_true")

    i = sub.add_parser("ingest", help="convert external count matrices into the dataset layout")
    i.add_argument("--background", type=Path, required=True)
    i.add_argument("--target", type=Path, required=True)
    i.add_argument("--labels", type=Path)
    i.add_argument("--out", type=Path, required=True)
    i.add_argument("--real-valued", action="store_true", help="skip the count-data validation")
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = io.load_json_config(args.config) if getattr(args, "config", None) else {}
        if args.command == "simulate":
            print(cmd_simulate(config, args.out, args.seed))
        elif args.command == "fit":
            print(cmd_fit(args.data, config, args.out, args.seed))
        elif args.command == "eval":
            rep = cmd_eval(args.data, args.checkpoint, args.out, args.seed)
            print(f"delta_mcc={rep.delta_mcc}")
        elif args.command == "reproduce":
            cmd_reproduce(args.table, args.seeds, args.out, args.epochs)
            print((args.out / f"{args.table}.md").read_text(), end="")
        elif args.command == "check-theory":
            reports = cmd_check_theory(args.which, args.seed, args.out, args.negative_control)
            expected = not args.negative_control
            return 0 if all(r.passed == expected for r in reports) else 1
        elif args.command == "ingest":
            print(io.ingest_external(args.background, args.target, args.out, args.labels,
                                     count_data=not args.real_valued))
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
