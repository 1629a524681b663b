"""One-axis ablation sweeps and training-throughput measurement."""

from __future__ import annotations

import copy
import csv
import logging
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .data import Dataset, Vocabulary
from .evaluate import retrieval_precision_at_k, zero_shot_classify
from .train import TrainResult, Trainer

log = logging.getLogger(__name__)

AXES = {
    "mask_ratio": ("train", "mask_ratio", float),
    "pretrain_fraction": ("train", "pretrain_fraction", float),
    "beta": ("loss", "beta", float),
    "loss_mode": ("loss", "mode", str),
}


def with_axis(cfg: RunConfig, axis: str, value, seed: int | None = None) -> RunConfig:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    section, key, cast = AXES[axis]
    out = copy.deepcopy(cfg)
    setattr(getattr(out, section), key, cast(value))
    if seed is not None:
        out.train.seed = seed
    return out.validate()


def default_factory(cfg: RunConfig, dataset: Dataset, axis: str,
                    out_root: str | Path | None = None) -> Callable[[object, int], TrainResult]:
    def factory(value, seed: int) -> TrainResult:
        run_cfg = with_axis(cfg, axis, value, seed)
        out_dir = None if out_root is None else Path(out_root) / f"{axis}={value}" / f"seed{seed}"
        return Trainer(run_cfg, dataset, out_dir).run()

    return factory


@dataclass
class CellResult:
    axis_value: object
    seed: int
    metrics: dict[str, float]
    error: str | None = None


def evaluate_cell(result: TrainResult, dataset: Dataset, ks: Sequence[int]) -> dict[str, float]:
    vocab = Vocabulary(result.vocabulary)
    test = dataset.split("test")
    zs = zero_shot_classify(result.model, vocab, test)
    rt = retrieval_precision_at_k(result.model, vocab, test, ks)
    return {"zero_shot_acc": zs.overall, **rt.precision_at_k}


def ablate(factory: Callable[[object, int], TrainResult], axis: str, values: Sequence, dataset: Dataset,
           seeds: Sequence[int] = (0,), ks: Sequence[int] = (1, 2, 5, 10),
           out_dir: str | Path | None = None) -> list[CellResult]:
    """Train and evaluate one model per (value, seed); failures are recorded and skipped."""
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    cells = []
    for value in values:
        for seed in seeds:
            try:
                metrics = evaluate_cell(factory(value, seed), dataset, ks)
                cells.append(CellResult(value, seed, metrics))
            except Exception as exc:  # keep sweeping; the cell is marked failed
                log.error("cell %s=%s seed %d failed: %s", axis, value, seed, exc)
                log.debug("%s", traceback.format_exc())
                cells.append(CellResult(value, seed, {}, error=f"{type(exc).__name__}: {exc}"))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(cells, out_dir / f"ablation_{axis}.csv")
        write_svg(cells, axis, out_dir / f"ablation_{axis}.svg")
    return cells


def write_csv(cells: Sequence[CellResult], path: str | Path) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis_value", "metric", "value", "seed", "status"])
        for cell in cells:
            if cell.error is not None:
                writer.writerow([cell.axis_value, "", "", cell.seed, f"failed: {cell.error}"])
                continue
            for metric, value in cell.metrics.items():
                writer.writerow([cell.axis_value, metric, repr(float(value)), cell.seed, "ok"])
    return Path(path)


def summarize(cells: Sequence[CellResult]) -> dict[str, dict[object, tuple[float, float]]]:
    """metric -> axis value -> (mean, std) over successful seeds, in first-seen value order."""
    grouped: dict[str, dict[object, list[float]]] = {}
    for cell in cells:
        for metric, value in cell.metrics.items():
            grouped.setdefault(metric, {}).setdefault(cell.axis_value, []).append(value)
    return {m: {v: (float(np.mean(xs)), float(np.std(xs))) for v, xs in per.items()} for m, per in grouped.items()}


def write_svg(cells: Sequence[CellResult], axis: str, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "medflip"
    summary = summarize(cells)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for metric, per in summary.items():
        labels = list(per)
        xs = np.arange(len(labels))
        try:
            xs = np.array([float(v) for v in labels])
        except (TypeError, ValueError):
            pass
        means = np.array([per[v][0] for v in labels])
        stds = np.array([per[v][1] for v in labels])
        ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3, label=metric)
        if xs.dtype.kind not in "f":
            ax.set_xticks(xs, [str(v) for v in labels])
    ax.set_xlabel(axis)
    ax.set_ylabel("metric value")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def measure_throughput(cfg: RunConfig, dataset: Dataset, ratios: Sequence[float], steps: int = 30,
                       warmup: int = 3) -> list[dict]:
    """Images/sec of full training steps (forward + backward + update) per mask ratio."""
    rows = []
    for ratio in ratios:
        run_cfg = with_axis(cfg, "mask_ratio", ratio)
        trainer = Trainer(run_cfg, dataset)
        for k in range(warmup):
            trainer.train_step(0, k)
        rates = []
        for k in range(steps):
            start = time.perf_counter()
            trainer.train_step(1, k)
            rates.append(run_cfg.train.batch_size / (time.perf_counter() - start))
        rows.append({"mask_ratio": float(ratio), "img_per_sec_mean": float(np.mean(rates)),
                     "img_per_sec_std": float(np.std(rates)), "steps": steps})
    return rows
