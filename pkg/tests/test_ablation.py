import csv

import numpy as np
import pytest

from medflip.ablation import ablate, default_factory, measure_throughput, summarize, with_axis
from medflip.config import ConfigError
from medflip.train import Trainer

from conftest import tiny_config


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_repeated_cell_is_deterministic(tmp_path, small_dataset):
    cfg = tiny_config(record_timing=False)
    cells = ablate(default_factory(cfg, small_dataset, "mask_ratio"), "mask_ratio", [0.0, 0.0], small_dataset,
                   out_dir=tmp_path)
    assert cells[0].metrics == cells[1].metrics
    rows = _rows(tmp_path / "ablation_mask_ratio.csv")
    assert list(rows[0]) == ["axis_value", "metric", "value", "seed", "status"]
    assert len(rows) == 2 * 5 and all(r["status"] == "ok" for r in rows)


def test_loss_mode_axis_rows_finite(tmp_path, small_dataset):
    cfg = tiny_config()
    ablate(default_factory(cfg, small_dataset, "loss_mode"), "loss_mode", ["verbatim", "soft_ce"], small_dataset,
           out_dir=tmp_path)
    rows = _rows(tmp_path / "ablation_loss_mode.csv")
    for metric in {r["metric"] for r in rows}:
        vals = [r for r in rows if r["metric"] == metric]
        assert [r["axis_value"] for r in vals] == ["verbatim", "soft_ce"]
        assert all(np.isfinite(float(r["value"])) for r in vals)


def test_failed_cells_are_marked_and_sweep_continues(tmp_path, small_dataset):
    cfg = tiny_config()

    def factory(value, seed):
        if value == 0.2:
            raise RuntimeError("boom")
        return Trainer(with_axis(cfg, "beta", value, seed), small_dataset).run()

    cells = ablate(factory, "beta", [0.0, 0.2, 0.5], small_dataset, out_dir=tmp_path)
    assert [c.error is None for c in cells] == [True, False, True]
    rows = _rows(tmp_path / "ablation_beta.csv")
    failed = [r for r in rows if r["status"] != "ok"]
    assert len(failed) == 1 and failed[0]["axis_value"] == "0.2" and "boom" in failed[0]["status"]
    assert set(summarize(cells)["P@1"]) == {0.0, 0.5}


def test_svg_is_deterministic(tmp_path, small_dataset):
    from medflip.ablation import CellResult, write_svg

    cells = [CellResult(v, s, {"zero_shot_acc": 0.1 * v + 0.01 * s, "P@1": 0.5}) for v in (0.1, 0.5, 1.0)
             for s in range(3)]
    a = write_svg(cells, "pretrain_fraction", tmp_path / "a.svg").read_bytes()
    b = write_svg(cells, "pretrain_fraction", tmp_path / "b.svg").read_bytes()
    assert a == b and a.lstrip().startswith(b"<?xml")


def test_unknown_axis(small_dataset):
    with pytest.raises(ValueError):
        ablate(lambda v, s: None, "depth", [1], small_dataset)
    with pytest.raises(ConfigError):
        with_axis(tiny_config(), "mask_ratio", 1.5)


def test_throughput_rows(small_dataset):
    rows = measure_throughput(tiny_config(), small_dataset, [0.0], steps=3, warmup=1)
    assert len(rows) == 1 and rows[0]["mask_ratio"] == 0.0 and rows[0]["img_per_sec_mean"] > 0
