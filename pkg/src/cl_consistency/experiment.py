"""Seeded experiment runs, persisted reports and run comparison."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import statistics
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import (Dataset, TaskStream, load_csv, load_digits, load_idx, make_blobs, mnist360_stream,
                   rotated_domain_il, split_class_il, train_test_split)
from .metrics import compute_metrics, relative_gains, robust_accuracy
from .model import MlpClassifier, init_mlp, save_checkpoint
from .trainer import TrainLog, train_continual, train_joint

log = logging.getLogger(__name__)

REPORT_FILE = "report.json"
AGGREGATE_FILE = "aggregate.json"
CONFIG_ECHO = "config.json"


def load_dataset(spec: dict) -> tuple[Dataset, Dataset]:
    kind = spec["kind"]
    if kind == "mnist_idx":
        return (load_idx(spec["train_images"], spec["train_labels"]),
                load_idx(spec["test_images"], spec["test_labels"]))
    if kind == "csv":
        shape = tuple(spec["image_shape"]) if spec.get("image_shape") else None
        return load_csv(spec["train"], shape), load_csv(spec["test"], shape)
    if kind == "digits":
        full = load_digits(spec["side"], spec["pad"])
    else:
        full = make_blobs(spec["n_classes"], spec["dim"], spec["n_per_class"], spec["seed"], spec["spread"])
    return train_test_split(full, spec["test_fraction"], spec["split_seed"])


def build_stream(scenario: dict, train: Dataset, test: Dataset, seed: int) -> TaskStream:
    if scenario["kind"] in ("joint", "sgd"):
        scenario = scenario["stream"]
    kind = scenario["kind"]
    if kind == "class_il":
        return split_class_il(train, test, scenario["n_tasks"])
    if kind == "rotated_domain_il":
        return rotated_domain_il(train, test, scenario["n_tasks"], seed)
    return mnist360_stream(train, test, seed, scenario.get("samples_per_block"), scenario.get("test_per_block"))


def build_model(cfg: dict, stream: TaskStream, seed: int) -> MlpClassifier:
    return init_mlp([stream.input_dim, *cfg["model"]["hidden"], stream.n_classes], seed)


def run_seed(cfg: dict, seed: int, train: Dataset, test: Dataset) -> tuple[MlpClassifier, TaskStream, TrainLog, dict]:
    stream = build_stream(cfg["scenario"], train, test, seed)
    model = build_model(cfg, stream, seed)
    tcfg = cfgmod.train_config(cfg, seed)
    trainer = train_joint if cfg["scenario"]["kind"] == "joint" else train_continual
    model, train_log = trainer(stream, model, tcfg)
    ev = cfg["eval"]
    metrics = compute_metrics(model, stream, train_log, ev["n_bins"], ev["include_first_task_fwt"])
    if ev.get("robustness"):
        if stream.tasks[0].test.image_shape is None:
            raise cfgmod.ConfigError("robustness evaluation needs image-shaped data")
        metrics.robustness = robust_accuracy(model, stream.all_test(), seed=ev["corruption_seed"]).to_dict()
    report = {
        "schema_version": cfgmod.SCHEMA_VERSION,
        "config": cfg,
        "seed": seed,
        "scenario": stream.scenario,
        "task_names": [t.name for t in stream.tasks],
        "accuracy_matrix": train_log.accuracy_matrix,
        "pre_task_accuracy": train_log.pre_task_accuracy,
        "random_init_accuracy": train_log.random_init_accuracy,
        "losses": {"er": train_log.loss_er, "cr": train_log.loss_cr, "total": train_log.loss_total},
        "metrics": metrics.to_dict(),
    }
    return model, stream, train_log, report


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_matrix_csv(path: Path, matrix: list[list[float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["after_task"] + [f"task_{j + 1}" for j in range(len(matrix[0]))])
        for i, row in enumerate(matrix):
            w.writerow([i + 1] + [f"{v:.2f}" for v in row])


def _write_reliability_csv(path: Path, rel: dict) -> None:
    m = rel["n_bins"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "lower", "upper", "count", "mean_confidence", "accuracy"])
        for i in range(m):
            w.writerow([i + 1, f"{i / m:.6f}", f"{(i + 1) / m:.6f}", rel["counts"][i],
                        f"{rel['confidence'][i]:.6f}", f"{rel['accuracy'][i]:.6f}"])


def fmt_mean_std(values) -> str:
    mean, std = mean_std(values)
    return f"{mean:.2f} ± {std:.2f}"


def mean_std(values) -> tuple[float, float]:
    values = [float(v) for v in values]
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return statistics.fmean(values), std


def aggregate(reports: list[dict]) -> dict:
    """Mean and sample standard deviation of every scalar metric over seeds."""
    out = {}
    for name in ("avg_top1", "ece", "forward_transfer"):
        vals = [r["metrics"][name] for r in reports]
        if any(v is None for v in vals):
            out[name] = None
            continue
        mean, std = mean_std(vals)
        out[name] = {"mean": mean, "std": std, "values": vals, "formatted": fmt_mean_std(vals)}
    probs = [r["metrics"]["task_probabilities"] for r in reports]
    out["task_probabilities"] = None if any(p is None for p in probs) else np.mean(probs, axis=0).tolist()
    per_task = np.mean([r["metrics"]["per_task_top1"] for r in reports], axis=0)
    out["per_task_top1"] = per_task.tolist()
    robust = [r["metrics"].get("robustness") for r in reports]
    if all(robust):
        vals = [r["mra"] for r in robust]
        mean, std = mean_std(vals)
        out["mra"] = {"mean": mean, "std": std, "values": vals, "formatted": fmt_mean_std(vals)}
    return out


def run_experiment(cfg: dict, out_dir: Path | None = None) -> dict:
    """Run every seed (and sweep point), writing reports under ``out_dir``."""
    out_dir = Path(out_dir if out_dir is not None else cfg["output_dir"])
    if cfg.get("sweep"):
        sweep = cfg["sweep"]
        keys = sorted(sweep)
        results = {}
        base = {k: v for k, v in cfg.items() if k != "sweep"}
        for combo in itertools.product(*(sweep[k] for k in keys)):
            point = base
            for k, v in zip(keys, combo):
                point = cfgmod.set_dotted(point, k, v)
            point = cfgmod.normalize(point)
            tag = "__".join(f"{k}={v}" for k, v in zip(keys, combo))
            results[tag] = run_experiment(point, out_dir / tag)
        _write_json(out_dir / "sweep.json", {k: v["metrics"] for k, v in results.items()})
        return {"sweep": results}

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_ECHO).write_text(cfgmod.dumps(cfg))
    train, test = load_dataset(cfg["dataset"])
    reports = []
    for offset in range(cfg["n_seeds"]):
        seed = cfg["seed"] + offset
        started = time.perf_counter()
        model, stream, train_log, report = run_seed(cfg, seed, train, test)
        elapsed = time.perf_counter() - started
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        _write_json(seed_dir / REPORT_FILE, report)
        _write_matrix_csv(seed_dir / "accuracy_matrix.csv", train_log.accuracy_matrix)
        _write_reliability_csv(seed_dir / "reliability.csv", report["metrics"]["reliability"])
        save_checkpoint(model, seed_dir / "model.bin")
        # wall-clock kept apart so reports stay byte-identical across reruns
        _write_json(seed_dir / "timing.json", {"seed": seed, "wall_clock_seconds": elapsed})
        log.info("seed %d: avg top-1 %.2f (%.1fs)", seed, report["metrics"]["avg_top1"], elapsed)
        reports.append(report)

    agg = {
        "schema_version": cfgmod.SCHEMA_VERSION,
        "name": cfg["name"],
        "config": cfg,
        "scenario": reports[0]["scenario"],
        "dataset": cfg["dataset"],
        "seeds": [r["seed"] for r in reports],
        "n_runs": len(reports),
        "metrics": aggregate(reports),
    }
    _write_json(out_dir / AGGREGATE_FILE, agg)
    return agg


def load_aggregate(run_dir) -> dict:
    path = Path(run_dir) / AGGREGATE_FILE
    if not path.exists():
        raise FileNotFoundError(f"no aggregate report at {path}")
    return json.loads(path.read_text())


def _scenario_key(agg: dict) -> tuple:
    scen = agg["config"]["scenario"]
    inner = scen.get("stream", scen)
    return inner["kind"], inner.get("n_tasks"), agg["config"]["dataset"]["kind"]


def compare(run_dir_a, run_dir_b) -> dict:
    """Relative gains of run A over run B plus a side-by-side table."""
    a, b = load_aggregate(run_dir_a), load_aggregate(run_dir_b)
    if _scenario_key(a) != _scenario_key(b):
        raise ValueError(f"incompatible scenarios: {_scenario_key(a)} vs {_scenario_key(b)}")

    def summary(agg):
        m = agg["metrics"]
        return {"avg_top1": m["avg_top1"]["mean"], "ece": m["ece"]["mean"],
                "task_probabilities": m["task_probabilities"]}

    gains = relative_gains(summary(a), summary(b))
    rows = []
    for name in ("avg_top1", "ece", "forward_transfer", "mra"):
        ma, mb = a["metrics"].get(name), b["metrics"].get(name)
        if ma and mb:
            rows.append({"metric": name, "a": ma["formatted"], "b": mb["formatted"]})
    return {"a": str(run_dir_a), "b": str(run_dir_b), "name_a": a["name"], "name_b": b["name"],
            "relative_gains": gains, "table": rows}
