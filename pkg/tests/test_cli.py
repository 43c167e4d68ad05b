import csv
import json
import subprocess
import sys

import pytest

from rollgcn.cli import main
from rollgcn.dataio import ConfigError, load_dataset
from rollgcn.evaluation import MetricBundle
from rollgcn.experiment import (Cell, CellResult, expand_grid, improvement_pct, load_config, parse_config,
                                sweep_rows, write_sweep)

SMALL = """\
seed: 3
synth: {users: 30, items: 60, days: 24, events_per_day: 30, regime_length: 8}
split: {train_end_day: 14, val_end_day: 19}
model: {variant: windowed, window: 2, layers: 1, id_dim: 8, feature_dim: 2}
train: {epochs: 2, lr: 1e-3, dns_pool: 20}
eval: {k: 10}
"""


def write_cfg(tmp_path, text=SMALL, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def only_dir(path, prefix):
    dirs = sorted(path.glob(f"{prefix}-*"))
    assert len(dirs) == 1
    return dirs[0]


def test_help_config_lists_every_section(capsys):
    assert main(["--help-config"]) == 0
    out = capsys.readouterr().out
    for section in ("data:", "synth:", "split:", "model:", "train:", "eval:", "sweep:", "report:"):
        assert section in out
    assert "map_literal_paper_formula" in out and "dns_pool: 50" in out


def test_unknown_key_names_it(tmp_path, capsys):
    p = write_cfg(tmp_path, SMALL + "train_extra: 1\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "train_extra" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="model.windw"):
        parse_config("model: {windw: 3}")


@pytest.mark.parametrize("text", ["model: {window: 0}", "train: {lr: -1}", "model: {variant: gcn}",
                                  "train: {neg_ratio: 20, dns_pool: 10}", "sweep: {windows: []}",
                                  "data: {events: nowhere.csv}", "eval: {k: 1.5}"])
def test_invalid_values_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_scientific_notation_lr():
    cfg = parse_config("train: {lr: 1e-4}")
    assert cfg.train_config().lr == 1e-4


def test_seed_override():
    assert parse_config("seed: 4", seed=9).seed == 9
    assert parse_config("seed: 4").seed == 4


def test_grid_expansion():
    cells = expand_grid(["static", "windowed", "forward_weighted", "mf", "mostpop", "recentpop"],
                        [1, 2, 3], [1, 2], ["id", "feats"])
    by = {}
    for c in cells:
        by.setdefault(c.variant, []).append(c)
    assert len(by["windowed"]) == len(by["forward_weighted"]) == 3 * 2 * 2
    assert len(by["static"]) == 4 and all(c.window is None for c in by["static"])
    assert len(by["recentpop"]) == 3
    assert len(by["mf"]) == len(by["mostpop"]) == 1
    assert len(set(cells)) == len(cells)


def test_grid_examples():
    assert len(expand_grid(["windowed"], [1, 2, 5], [1], ["id"])) == 3
    cells = expand_grid(["windowed", "forward_weighted"], [1, 2, 3, 4, 5], [1], ["id"])
    oracle = [(v, w) for v in ("windowed", "forward_weighted") for w in range(1, 6)]
    assert [(c.variant, c.window) for c in cells] == oracle


def test_default_grid():
    cfg = parse_config("")
    assert cfg.get("sweep", "windows") == list(range(1, 26))
    assert cfg.get("sweep", "layers") == [1, 2, 3]
    assert cfg.get("sweep", "feature_modes") == ["id", "feats"]


def test_improvement_example():
    assert f"{improvement_pct(5.06, 1.47):.1f}" == "244.2"
    assert round(improvement_pct(5.06, 1.47)) == 244


def test_sweep_rows_relative_to_matching_static(tmp_path):
    def res(cell, m, err=None):
        return CellResult(cell, None if err else MetricBundle(m, m, m, m), error=err)

    rows = sweep_rows([res(Cell("static", None, 1, "id"), 1.47), res(Cell("windowed", 2, 1, "id"), 5.06),
                       res(Cell("windowed", 2, 2, "id"), 3.0), res(Cell("mostpop"), 0.5),
                       res(Cell("forward_weighted", 3, 1, "id"), 0, err="ValueError: boom")])
    assert rows[1]["improvement_map_pct"] == pytest.approx(244.2, abs=0.05)
    assert rows[2]["improvement_map_pct"] is None  # no static row with 2 layers
    assert rows[3]["improvement_map_pct"] is None
    assert rows[4]["status"] == "ValueError: boom" and rows[4]["map"] is None
    write_sweep(rows, tmp_path / "s.csv")
    lines = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert lines[1]["improvement_map_pct"] == "244.2"
    assert lines[4]["map"] == ""


def test_train_writes_every_artifact(tmp_path, capsys):
    p = write_cfg(tmp_path)
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "runs")]) == 0
    d = only_dir(tmp_path / "runs", "run")
    assert {f.name for f in d.iterdir()} == {"config.yaml", "checkpoint.bin", "train_log.csv",
                                             "daily_metrics.csv", "summary.json"}
    assert (d / "config.yaml").read_text() == SMALL
    s = json.loads((d / "summary.json").read_text())
    assert set(s["metrics"]) == {"mrr", "recall_at_k", "map", "ndcg_at_k"}
    assert s["seed"] == 3 and s["k"] == 10 and s["model"] == "LightGCN-W"
    assert s["config"]["train"]["epochs"] == 2
    daily = list(csv.DictReader(open(d / "daily_metrics.csv")))
    assert [int(r["day"]) for r in daily] == list(range(19, 24))

    # evaluate the checkpoint again: same test metrics
    assert main(["evaluate", "--config", str(p), "--checkpoint", str(d / "checkpoint.bin"),
                 "--out", str(tmp_path / "ev")]) == 0
    e = only_dir(tmp_path / "ev", "eval")
    assert (e / "daily_metrics.csv").read_bytes() == (d / "daily_metrics.csv").read_bytes()


@pytest.mark.parametrize("variant", ["static", "forward_weighted", "mf", "mostpop", "recentpop"])
def test_train_every_variant(tmp_path, variant):
    p = write_cfg(tmp_path, SMALL.replace("variant: windowed", f"variant: {variant}"))
    assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == 0
    d = only_dir(tmp_path, "run")
    assert (d / "checkpoint.bin").exists() == (variant not in ("mostpop", "recentpop"))


def test_report_base_date(tmp_path):
    p = write_cfg(tmp_path, SMALL + "report: {base_date: '2020-01-01'}\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == 0
    s = json.loads((only_dir(tmp_path, "run") / "summary.json").read_text())
    assert s["test_dates"] == ["2020-01-20", "2020-01-24"]


def test_sweep_runs_grid(tmp_path):
    text = SMALL + ("sweep: {variants: [static, windowed, mostpop, recentpop], windows: [1, 3], layers: [1],"
                    " feature_modes: [id]}\n")
    p = write_cfg(tmp_path, text)
    assert main(["sweep", "--config", str(p), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(only_dir(tmp_path, "sweep") / "sweep.csv")))
    assert [(r["variant"], r["window"]) for r in rows] == [("static", ""), ("windowed", "1"), ("windowed", "3"),
                                                           ("mostpop", ""), ("recentpop", "1"), ("recentpop", "3")]
    assert all(r["status"] == "ok" for r in rows)
    assert rows[0]["improvement_map_pct"] == "0.0"


def test_sweep_parallel_matches_serial(tmp_path):
    text = SMALL + "sweep: {variants: [windowed, mostpop], windows: [1, 2], layers: [1]}\n"
    p = write_cfg(tmp_path, text)
    assert main(["sweep", "--config", str(p), "--out", str(tmp_path / "a")]) == 0
    assert main(["sweep", "--config", str(p), "--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    a = (only_dir(tmp_path / "a", "sweep") / "sweep.csv").read_bytes()
    b = (only_dir(tmp_path / "b", "sweep") / "sweep.csv").read_bytes()
    assert a == b


def test_synth_command_round_trips(tmp_path, capsys):
    p = write_cfg(tmp_path, "synth: {users: 20, items: 40, days: 12, events_per_day: 20}\n")
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "data"), "--seed", "5"]) == 0
    out = capsys.readouterr().out
    assert "repeat_fraction" in out
    ds = load_dataset(tmp_path / "data" / "events.csv", tmp_path / "data" / "items.csv", infer=False)
    assert ds.last_day <= 11

    # the written files feed straight back into a run
    cfg = write_cfg(tmp_path, "data: {events: data/events.csv, items: data/items.csv}\n"
                              "model: {id_dim: 4}\ntrain: {epochs: 1}\n", "run.yaml")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert load_config(cfg).path("events") == tmp_path / "data" / "events.csv"


def test_bad_data_file_exit_code(tmp_path, capsys):
    (tmp_path / "ev.csv").write_text("day,user_id,item_id\nx,u,i\n")
    p = write_cfg(tmp_path, "data: {events: ev.csv}\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "line 2" in capsys.readouterr().err
    assert (only_dir(tmp_path, "run") / "ERROR").exists()


def test_no_command_prints_help(capsys):
    assert main([]) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "rollgcn", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "train" in r.stdout and "sweep" in r.stdout
