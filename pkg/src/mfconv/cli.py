"""Command-line experiment runner: ``run``, ``sweep`` and ``report``.

Exit codes: 0 success, 2 invalid or missing configuration, 3 training
divergence, 4 missing run artifacts.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from mfconv import uq
from mfconv.config import ExperimentConfig, load_config_data, set_dotted
from mfconv.datagen import build_1d_dataset, build_poiseuille_dataset
from mfconv.dropblock import drop_ratio_table
from mfconv.training import (
    TrainingDivergedError, make_network, network_inputs, oned_training_data, poiseuille_training_data, train,
)

log = logging.getLogger("mfconv")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 0, 2, 3, 4
EXHIBITS = ("fig6", "fig7", "fig9", "fig11", "fig13", "table1", "table2", "table5")


class ConfigError(Exception):
    pass


class MissingArtifactsError(Exception):
    pass


# -- helpers --------------------------------------------------------------

def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, rows: list[dict], fields: list[str]) -> None:
    uq.write_csv(path, rows, fields)


def locate_jump(x: np.ndarray, y: np.ndarray) -> float:
    """Position of the sharpest step: the sign change of the second difference
    with the largest swing, placed midway between the two straddling points."""
    d2 = np.diff(y, 2)
    swing = np.where(d2[:-1] * d2[1:] < 0, np.abs(d2[:-1] - d2[1:]), -1.0)
    i = int(np.argmax(swing))
    return float(0.5 * (x[i + 1] + x[i + 2]))


def _read_config(path) -> dict:
    try:
        return load_config_data(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def _validate(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines)) from exc


# -- run ------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out: Path) -> dict:
    """Generate data, train, evaluate and write every artifact into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "config.json", cfg.model_dump(mode="json"))
    spec = cfg.network_spec()
    tcfg = cfg.train_config()
    ev = cfg.evaluation

    if cfg.is_oned:
        ds = build_1d_dataset(int(cfg.kind[-1]), cfg.dataset.lf_x, cfg.dataset.hf_x)
        data = oned_training_data(ds, hf_only=cfg.regime == "hf")
        names = ["lf", "hf"]
    else:
        ds = build_poiseuille_dataset(
            cfg.dataset.n_samples, cfg.dataset.seed, cfg.dataset.split_probs, cfg.dataset.hf_subset_size,
            cfg.poiseuille_config(), cfg.dataset.lf3_bias, cfg.dataset.split_seed,
        )
        _dump_json(out / "dataset.json", ds.manifest())
        data = poiseuille_training_data(ds, cfg.family, cfg.regime)
        names = ["lf1", "lf2", "lf3", "hf"]

    net = make_network(spec, tcfg)
    try:
        trained = train(net, data, tcfg, names)
    except TrainingDivergedError as exc:
        net.save_checkpoint(out / "checkpoint")
        raise exc
    net.save_checkpoint(out / "checkpoint")
    trained.write_history(out / "history.csv")

    summary = {
        "kind": cfg.kind, "regime": cfg.regime, "seed": cfg.seed,
        "best_val_loss": trained.best_val_loss, "best_epoch": trained.best_epoch,
        "n_replicas": ev.n_replicas, "lf3_bias": cfg.dataset.lf3_bias,
        "skip_mode": spec.skip_mode, "coupling": spec.coupling,
    }
    if cfg.is_oned:
        summary.update(_evaluate_oned(net, ds, data, cfg, out))
    else:
        summary.update(_evaluate_poiseuille(net, ds, cfg, out))
    _dump_json(out / "summary.json", summary)
    return summary


def _evaluate_oned(net, ds, data, cfg: ExperimentConfig, out: Path) -> dict:
    ev = cfg.evaluation
    x = ds.test_x.reshape(1, 1, -1)
    hf = uq.ensemble_stats(uq.mc_ensemble(net, x, ev.n_replicas, ev.master_seed)[:, 0, 0])
    lf = uq.ensemble_stats(uq.mc_ensemble(net, x, ev.n_replicas, ev.master_seed, output=0)[:, 0, 0])
    y_l, y_h = ds.truth(ds.test_x)
    rows = [
        {"x": xv, "truth_lf": a, "truth_hf": b, "lf_mean": lm, "mean": m, "std": s, "p5": lo, "p95": hi}
        for xv, a, b, lm, m, s, lo, hi in zip(ds.test_x, y_l, y_h, lf.mean, hf.mean, hf.std, hf.p5, hf.p95)
    ]
    if "predictions" in ev.outputs:
        _write_rows(out / "predictions.csv", rows, list(rows[0]))
    r2 = uq.r_squared(hf.mean, y_h, np.ones_like(y_h))
    # cost: labeled training values across both fidelities
    cost = int(sum(m.sum() for m in data.masks if m is not None))
    return {
        "r2": r2, "normalized_r2": r2 / cost, "cost": cost,
        "mse_hf": float(np.mean((hf.mean - y_h) ** 2)),
        "mse_lf": float(np.mean((lf.mean - y_l) ** 2)),
        "jump_x": locate_jump(ds.test_x, hf.mean),
    }


def _evaluate_poiseuille(net, ds, cfg: ExperimentConfig, out: Path) -> dict:
    ev = cfg.evaluation
    test = [ds.samples[i] for i in ds.ids("test")]
    inputs = network_inputs(test, cfg.family)
    truths = np.stack([s.pressure_hf for s in test])
    masks = np.stack([s.fluid_mask for s in test])
    rows_idx = np.array([uq.centerline_row(m) for m in masks])
    idx = np.arange(len(test))
    total = np.zeros_like(truths)

    def keep(hf_out):
        total[...] += hf_out[:, 0]
        return hf_out[idx, 0, rows_idx]

    lines = uq.mc_ensemble(net, inputs, ev.n_replicas, ev.master_seed, transform=keep)
    mean_field = total / ev.n_replicas
    r2 = uq.r_squared(mean_field, truths, masks)

    n_train = len(ds.ids("train"))
    n_hf = len(ds.hf_subset)
    ledger = uq.default_ledger(n_train, n_hf, ds.cfg.grid, tuple(ds.cfg.grid // f for f in (2, 4, 8)))
    dataset_id = {"mf": f"mf_{n_hf}_{n_train}", "hf_small": f"hf_{n_hf}", "hf_full": f"hf_{n_train}"}[cfg.regime]

    st = uq.ensemble_stats(lines)
    width = truths.shape[-1]
    xs = (np.arange(width) + 0.5) / width
    if "centerline" in ev.outputs:
        rows = []
        for k, sid in enumerate(ds.ids("test")):
            for j in range(width):
                rows.append({"sample": sid, "location": j, "x": xs[j], "truth": truths[k, rows_idx[k], j],
                             "mean": st.mean[k, j], "std": st.std[k, j], "p5": st.p5[k, j], "p95": st.p95[k, j]})
        _write_rows(out / "centerline.csv", rows, list(rows[0]))
    if "location_stats" in ev.outputs:
        rows = uq.location_stats({cfg.regime: net}, inputs, truths, masks, ev.n_replicas, ev.master_seed,
                                 stacks={cfg.regime: lines})
        _write_rows(out / "location_stats.csv", rows, uq.LOCATION_FIELDS)
    if "slices" in ev.outputs:
        rows = []
        for k, sid in enumerate(ds.ids("test")):
            fluid = np.flatnonzero(masks[k].any(axis=1))
            for r in fluid:
                for j in range(width):
                    rows.append({"sample": sid, "row": int(r), "x": xs[j],
                                 "truth": truths[k, r, j], "mean": mean_field[k, r, j]})
        _write_rows(out / "slices.csv", rows, list(rows[0]))
    if "stacks" in ev.outputs:
        uq.save_stack(out / "centerline_stack.f64", lines)

    return {
        "r2": r2, "normalized_r2": uq.normalized_accuracy(r2, ledger, dataset_id),
        "cost": ledger.cost(dataset_id), "cost_ratio": ledger.ratio(dataset_id),
        "dataset_id": dataset_id, "hf_count": n_hf if cfg.regime != "hf_full" else n_train,
        "lf_count": n_train if cfg.regime == "mf" else 0,
        "centerline_mean_std": float(st.std.mean()),
    }


def _output_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    if override:
        return Path(override)
    if cfg.out:
        return Path(cfg.out)
    return Path("runs") / (cfg.name or f"{cfg.kind}_{cfg.regime}")


def cmd_run(args) -> int:
    data = _read_config(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = _validate(data)
    out = _output_dir(cfg, args.out)
    try:
        summary = run_experiment(cfg, out)
    except TrainingDivergedError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# -- sweep ----------------------------------------------------------------

def sweep_points(data: dict) -> list[dict]:
    grid = data.get("sweep") or {}
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("sweep block is missing or has an empty value list")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def cmd_sweep(args) -> int:
    data = _read_config(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    points = sweep_points(data)
    base = {k: v for k, v in data.items() if k != "sweep"}
    cfgs = []
    for point in points:
        d = copy.deepcopy(base)
        for key, value in point.items():
            set_dotted(d, key, value)
        cfgs.append(_validate(d))
    root = _output_dir(_validate(base), args.out)
    results = []
    for i, (point, cfg) in enumerate(zip(points, cfgs)):
        run_dir = root / f"run_{i:03d}"
        try:
            summary = run_experiment(cfg, run_dir)
            val, r2 = summary["best_val_loss"], summary["r2"]
        except TrainingDivergedError as exc:
            log.warning("run %d diverged: %s", i, exc)
            val, r2 = float("inf"), float("nan")
        results.append({"run": run_dir.name, **point, "best_val_loss": val, "r2": r2})
    order = sorted(range(len(results)), key=lambda i: (results[i]["best_val_loss"], i))
    rows = [{"rank": rank, **results[i]} for rank, i in enumerate(order, start=1)]
    fields = ["rank", "run", *points[0], "best_val_loss", "r2"]
    root.mkdir(parents=True, exist_ok=True)
    _write_rows(root / "ranking.csv", rows, fields)
    print(root / "ranking.csv")
    return EXIT_OK


# -- report ---------------------------------------------------------------

def _runs(root: Path) -> list[tuple[Path, dict, dict]]:
    """(run_dir, summary, config) for every completed run at or below ``root``."""
    found = []
    for path in sorted(root.rglob("summary.json")):
        run_dir = path.parent
        cfg_path = run_dir / "config.json"
        if not cfg_path.exists():
            continue
        found.append((run_dir, json.loads(path.read_text()), json.loads(cfg_path.read_text())))
    return found


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _concat(root: Path, runs, filename: str, keep=None) -> tuple[list[dict], list[str]]:
    rows, fields = [], None
    for run_dir, summary, _ in runs:
        if keep and not keep(summary):
            continue
        path = run_dir / filename
        if not path.exists():
            continue
        part = _read_csv(path)
        if part:
            fields = fields or ["run", *part[0]]
            rel = run_dir.relative_to(root).as_posix() or "."
            rows += [{"run": rel, **r} for r in part]
    if not rows:
        raise MissingArtifactsError(f"no {filename} found under {root}")
    return rows, fields


TABLE_FIELDS = ["run", "kind", "skip_mode", "coupling", "regime", "hf_count", "lf_count", "lf3_bias",
                "r2", "normalized_r2", "cost"]


def build_report(root: Path, exhibit: str) -> Path:
    if exhibit not in EXHIBITS:
        raise ConfigError(f"unknown exhibit {exhibit!r}; choose from {EXHIBITS}")
    if exhibit == "table5":
        root.mkdir(parents=True, exist_ok=True)
        rows = drop_ratio_table()
        fields = ["b", "p", "F", "gamma", "gamma_ref", "drop_ratio", "drop_ratio_ref"]
        _write_rows(root / "table5.csv", rows, fields)
        return root / "table5.csv"
    if not root.is_dir():
        raise MissingArtifactsError(f"{root} is not a directory")
    runs = _runs(root)
    if not runs:
        raise MissingArtifactsError(f"no completed runs under {root}")
    if exhibit in ("table1", "table2"):
        biased = exhibit == "table2"
        rows = []
        for run_dir, s, _ in runs:
            if s["kind"] not in ("dense", "l2h") or (s.get("lf3_bias", 0.0) != 0.0) != biased:
                continue
            rel = run_dir.relative_to(root).as_posix() or "."
            rows.append({"run": rel, **{k: s.get(k) for k in TABLE_FIELDS[1:]}})
        if not rows:
            raise MissingArtifactsError(f"no {'biased' if biased else 'unbiased'} 2D runs under {root}")
        fields = TABLE_FIELDS
    elif exhibit in ("fig6", "fig7"):
        kind = "oned_ex1" if exhibit == "fig6" else "oned_ex2"
        rows, fields = _concat(root, runs, "predictions.csv", lambda s: s["kind"] == kind)
    elif exhibit == "fig9":
        rows, fields = _concat(root, runs, "history.csv", lambda s: s["kind"] in ("dense", "l2h"))
    elif exhibit == "fig11":
        rows, fields = _concat(root, runs, "centerline.csv")
        fields = ["run", "sample", "x", "truth", "mean", "p5", "p95"]
    else:
        rows, fields = _concat(root, runs, "location_stats.csv")
    path = root / f"{exhibit}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def cmd_report(args) -> int:
    path = build_report(Path(args.run_dir), args.exhibit)
    print(path)
    return EXIT_OK


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfconv", description="Multifidelity CNN experiment runner")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "generate, train and evaluate one config"),
                           ("sweep", "run the config's hyperparameter grid")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
    p = sub.add_parser("report", help="emit the data behind one exhibit")
    p.add_argument("run_dir")
    p.add_argument("--exhibit", required=True, choices=EXHIBITS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handlers = {"run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
