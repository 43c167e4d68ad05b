"""Experiment configuration, single runs and grid sweeps with CSV/JSON reports."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from . import __version__
from .baselines import PopularityScorer, mf_config, most_pop, recent_pop
from .dataio import (ConfigError, Dataset, SynthSpec, chronological_split, daily_stats,
                     generate_synthetic, load_dataset, split_by_fraction, write_events, write_items)
from .engine import FeatureMode, ModelConfig, Variant, load_checkpoint, save_checkpoint
from .evaluation import (METRICS, MetricBundle, aggregate_over_time, evaluate_range,
                         write_daily_metrics)
from .training import GraphScorer, TrainConfig, train, write_train_log

log = logging.getLogger(__name__)

GCN_VARIANTS = ("static", "windowed", "forward_weighted")
VARIANTS = GCN_VARIANTS + ("mf", "mostpop", "recentpop")
WINDOWED = ("windowed", "forward_weighted", "recentpop")
DISPLAY = {"static": "LightGCN", "windowed": "LightGCN-W", "forward_weighted": "LightGCN-FW",
           "mf": "MF", "mostpop": "MostPop", "recentpop": "RecentPop"}

_SYNTH_HELP = {
    "users": "number of users",
    "items": "number of bonds",
    "days": "length of the stream in days",
    "events_per_day": "mean events per day (Poisson)",
    "segments": "latent user segments",
    "item_clusters": "latent item clusters",
    "regime_length": "days between re-draws of segment preferences",
    "repeat_prob": "share of each day's events replayed from the previous day",
    "item_lifetime_mean": "mean bond lifetime in days (geometric)",
    "seed": "generator seed",
}

# key -> (default, help); every accepted key is listed here
CONFIG_DOC: dict[str, dict[str, tuple[object, str]]] = {
    "data": {
        "events": (None, "events CSV (day,user_id,item_id); omit to generate synthetic data"),
        "items": (None, "items CSV; omit to infer availability and use UNK features"),
        "infer_items": (True, "infer metadata for items missing from the items file"),
        "maturity_margin": (30, "days added to the last observed day when inferring maturity"),
    },
    "synth": {f.name: (f.default, _SYNTH_HELP[f.name]) for f in fields(SynthSpec)},
    "split": {
        "train_end_day": (None, "first validation day; default from train_frac"),
        "val_end_day": (None, "first test day; default from train_frac + val_frac"),
        "train_frac": (0.6, "share of the day span used for training"),
        "val_frac": (0.2, "share of the day span used for validation"),
    },
    "model": {
        "variant": ("windowed", "one of " + ", ".join(VARIANTS)),
        "layers": (1, "propagation layers K"),
        "id_dim": (64, "ID embedding size"),
        "feature_mode": ("id", "id | feats"),
        "feature_dim": (16, "embedding size per categorical feature"),
        "window": (2, "window w in days (windowed, forward_weighted, recentpop)"),
    },
    "train": {
        "epochs": (40, "maximum epochs"),
        "patience": (10, "early-stopping patience in evaluations"),
        "neg_ratio": (10, "negatives kept per positive"),
        "dns_pool": (50, "uniform candidate pool per positive for dynamic negative sampling"),
        "lr": (1e-4, "Adam learning rate"),
        "beta1": (0.9, "Adam beta1"),
        "beta2": (0.999, "Adam beta2"),
        "eps": (1e-8, "Adam epsilon"),
        "eval_every": (1, "epochs between validation passes"),
    },
    "eval": {
        "k": (50, "cutoff for Recall@k and NDCG@k"),
        "map_literal_paper_formula": (False, "average precision without division by the relevant count"),
    },
    "sweep": {
        "variants": (["static", "windowed", "forward_weighted", "mf", "mostpop", "recentpop"], "variants to run"),
        "windows": (list(range(1, 26)), "window sizes for windowed variants"),
        "layers": ([1, 2, 3], "layer counts for graph variants"),
        "feature_modes": (["id", "feats"], "feature modes for graph variants"),
    },
    "report": {
        "base_date": (None, "ISO date of day 0, used only in summary.json"),
    },
}
TOP_LEVEL = {"seed": (0, "master random seed")}


def help_config() -> str:
    lines = ["# all configuration keys with defaults", f"seed: {TOP_LEVEL['seed'][0]}  # {TOP_LEVEL['seed'][1]}"]
    for section, keys in CONFIG_DOC.items():
        lines.append(f"{section}:")
        for key, (default, text) in keys.items():
            lines.append(f"  {key}: {json.dumps(default)}  # {text}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentConfig:
    sections: dict[str, dict] = field(default_factory=dict)
    seed: int = 0
    text: str = ""
    base_dir: Path = Path(".")

    def get(self, section: str, key: str):
        return self.sections.get(section, {}).get(key, CONFIG_DOC[section][key][0])

    def echo(self) -> dict:
        out = {"seed": self.seed}
        for section, keys in CONFIG_DOC.items():
            out[section] = {k: self.get(section, k) for k in keys}
        return out

    @property
    def synth_spec(self) -> SynthSpec:
        return SynthSpec(**{f.name: self.get("synth", f.name) for f in fields(SynthSpec)})

    def train_config(self) -> TrainConfig:
        kw = {k: self.get("train", k) for k in CONFIG_DOC["train"]}
        return TrainConfig(seed=self.seed, k=self.get("eval", "k"),
                           literal_map=self.get("eval", "map_literal_paper_formula"), **kw)

    def path(self, key: str) -> Path | None:
        p = self.get("data", key)
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


def _positive_int(name, v, minimum=1):
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {v!r}")


def validate_config(cfg: ExperimentConfig) -> None:
    variant = cfg.get("model", "variant")
    if variant not in VARIANTS:
        raise ConfigError(f"model.variant must be one of {', '.join(VARIANTS)}, got {variant!r}")
    if variant in WINDOWED:
        _positive_int("model.window", cfg.get("model", "window"))
    _positive_int("model.layers", cfg.get("model", "layers"), 0)
    _positive_int("model.id_dim", cfg.get("model", "id_dim"))
    _positive_int("model.feature_dim", cfg.get("model", "feature_dim"))
    if cfg.get("model", "feature_mode") not in ("id", "feats"):
        raise ConfigError(f"model.feature_mode must be id or feats, got {cfg.get('model', 'feature_mode')!r}")
    for key in ("epochs", "patience", "neg_ratio", "dns_pool", "eval_every"):
        _positive_int(f"train.{key}", cfg.get("train", key))
    if cfg.get("train", "dns_pool") < cfg.get("train", "neg_ratio"):
        raise ConfigError("train.dns_pool must be >= train.neg_ratio")
    lr = cfg.get("train", "lr")
    if not isinstance(lr, (int, float)) or not lr > 0:
        raise ConfigError(f"train.lr must be > 0, got {lr!r}")
    _positive_int("eval.k", cfg.get("eval", "k"))
    windows = cfg.get("sweep", "windows")
    if not isinstance(windows, list) or not windows:
        raise ConfigError("sweep.windows must be a non-empty list")
    for w in windows:
        _positive_int("sweep.windows entry", w)
    if len(set(windows)) != len(windows):
        raise ConfigError("sweep.windows entries must be distinct")
    for v in cfg.get("sweep", "variants"):
        if v not in VARIANTS:
            raise ConfigError(f"sweep.variants: unknown variant {v!r}")
    for k in cfg.get("sweep", "layers"):
        _positive_int("sweep.layers entry", k, 0)
    for m in cfg.get("sweep", "feature_modes"):
        if m not in ("id", "feats"):
            raise ConfigError(f"sweep.feature_modes: unknown mode {m!r}")
    for key in ("events", "items"):
        p = cfg.path(key)
        if p is not None and not p.exists():
            raise ConfigError(f"data.{key}: file {p} does not exist")
    try:
        cfg.synth_spec.validate()
    except TypeError as e:
        raise ConfigError(f"synth: {e}") from None


def parse_config(text: str, base_dir: Path = Path("."), seed: int | None = None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    sections = {}
    for key, value in raw.items():
        if key in TOP_LEVEL:
            continue
        if key not in CONFIG_DOC:
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key!r} must be a mapping")
        value = dict(value)
        for sub in value:
            if sub not in CONFIG_DOC[key]:
                raise ConfigError(f"unknown config key {key}.{sub}")
            # YAML 1.1 reads 1e-4 as a string
            if isinstance(CONFIG_DOC[key][sub][0], float) and isinstance(value[sub], str):
                try:
                    value[sub] = float(value[sub])
                except ValueError:
                    raise ConfigError(f"{key}.{sub} must be a number, got {value[sub]!r}") from None
        sections[key] = value
    s = raw.get("seed", 0) if seed is None else seed
    _positive_int("seed", s, 0)
    cfg = ExperimentConfig(sections, s, text, base_dir)
    validate_config(cfg)
    return cfg


def load_config(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent, seed)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    events = cfg.path("events")
    if events is None:
        ds = generate_synthetic(cfg.synth_spec)
    else:
        ds = load_dataset(events, cfg.path("items"), cfg.get("data", "infer_items"),
                          cfg.get("data", "maturity_margin"))
    te, ve = cfg.get("split", "train_end_day"), cfg.get("split", "val_end_day")
    if te is not None and ve is not None:
        return chronological_split(ds, te, ve)
    return split_by_fraction(ds, cfg.get("split", "train_frac"), cfg.get("split", "val_frac"))


@dataclass(frozen=True)
class Cell:
    variant: str
    window: int | None = None
    layers: int | None = None
    features: str | None = None

    def model_config(self, cfg: ExperimentConfig) -> ModelConfig | None:
        id_dim = cfg.get("model", "id_dim")
        if self.variant == "mf":
            return mf_config(id_dim)
        if self.variant not in GCN_VARIANTS:
            return None
        return ModelConfig(Variant(self.variant), self.layers, id_dim, FeatureMode(self.features),
                           cfg.get("model", "feature_dim"),
                           self.window if self.variant != "static" else None)


def expand_grid(variants, windows, layers, feature_modes) -> list[Cell]:
    """Grid cells in declaration order.

    windowed / forward_weighted: windows x layers x feature modes;
    static: layers x feature modes; recentpop: windows; mf and mostpop: one cell.
    """
    cells = []
    for v in variants:
        if v in ("windowed", "forward_weighted"):
            cells += [Cell(v, w, k, f) for k in layers for f in feature_modes for w in windows]
        elif v == "static":
            cells += [Cell(v, None, k, f) for k in layers for f in feature_modes]
        elif v == "recentpop":
            cells += [Cell(v, w) for w in windows]
        elif v in ("mf", "mostpop"):
            cells.append(Cell(v))
        else:
            raise ConfigError(f"unknown variant {v!r}")
    return cells


def single_cell(cfg: ExperimentConfig) -> Cell:
    v = cfg.get("model", "variant")
    return Cell(v, cfg.get("model", "window") if v in WINDOWED else None,
                cfg.get("model", "layers") if v in GCN_VARIANTS else None,
                cfg.get("model", "feature_mode") if v in GCN_VARIANTS else None)


@dataclass
class CellResult:
    cell: Cell
    summary: MetricBundle | None = None
    daily: list[MetricBundle] = field(default_factory=list)
    train_log: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    state: object = None
    error: str | None = None


def run_cell(dataset: Dataset, cell: Cell, cfg: ExperimentConfig, keep_state: bool = False) -> CellResult:
    tc = cfg.train_config()
    lo, hi = dataset.split.test
    res = CellResult(cell)
    if cell.variant == "mostpop":
        scorer = PopularityScorer(most_pop(dataset), dataset)
    elif cell.variant == "recentpop":
        scorer = PopularityScorer(recent_pop(cell.window), dataset)
    else:
        tr = train(dataset, cell.model_config(cfg), tc)
        scorer = GraphScorer(tr.state, dataset)
        res.train_log, res.best_epoch = tr.log, tr.best_epoch
        if keep_state:
            res.state = tr.state
    res.daily = evaluate_range(scorer, dataset, lo, hi, tc.k, tc.literal_map)
    res.summary = aggregate_over_time(res.daily)
    return res


def _safe_cell(args) -> CellResult:
    dataset, cell, cfg = args
    try:
        return run_cell(dataset, cell, cfg)
    except Exception as e:  # recorded in the sweep row; other cells continue
        log.exception("cell %s failed", cell)
        return CellResult(cell, error=f"{type(e).__name__}: {e}")


def _run_dir(out: Path, prefix: str) -> Path:
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    d = Path(out) / f"{prefix}-{stamp}"
    d.mkdir(parents=True, exist_ok=False)
    return d


def _summary_doc(cfg: ExperimentConfig, result: CellResult, created: str) -> dict:
    s = result.summary
    doc = {
        "metrics": {name: getattr(s, name) for name in METRICS},
        "k": s.k,
        "n_days": s.n_days,
        "variant": result.cell.variant,
        "model": DISPLAY[result.cell.variant],
        "best_epoch": result.best_epoch,
        "seed": cfg.seed,
        "config": cfg.echo(),
        "version": __version__,
        "created": created,
    }
    base = cfg.get("report", "base_date")
    if base:
        d0 = dt.date.fromisoformat(str(base))
        days = [b.day for b in result.daily]
        doc["test_dates"] = [str(d0 + dt.timedelta(days=days[0])), str(d0 + dt.timedelta(days=days[-1]))]
    return doc


def run(cfg: ExperimentConfig, out: str | Path) -> Path:
    """Train, evaluate on the test range and write all artifacts; returns the run directory."""
    run_dir = _run_dir(Path(out), "run")
    created = dt.datetime.now().isoformat(timespec="seconds")
    (run_dir / "config.yaml").write_text(cfg.text, encoding="utf-8")
    try:
        dataset = build_dataset(cfg)
        result = run_cell(dataset, single_cell(cfg), cfg, keep_state=True)
        if result.state is not None:
            save_checkpoint(result.state, run_dir / "checkpoint.bin",
                            {"variant": result.cell.variant, "seed": cfg.seed})
            write_train_log(result.train_log, run_dir / "train_log.csv")
        write_daily_metrics(result.daily, run_dir / "daily_metrics.csv")
        doc = _summary_doc(cfg, result, created)
        (run_dir / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except Exception:
        (run_dir / "ERROR").write_text(traceback.format_exc(), encoding="utf-8")
        raise
    return run_dir


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint: str | Path, out: str | Path) -> Path:
    run_dir = _run_dir(Path(out), "eval")
    created = dt.datetime.now().isoformat(timespec="seconds")
    try:
        dataset = build_dataset(cfg)
        state, extra = load_checkpoint(checkpoint)
        tc = cfg.train_config()
        daily = evaluate_range(GraphScorer(state, dataset), dataset, *dataset.split.test, tc.k, tc.literal_map)
        variant = extra.get("variant", state.config.variant.value)
        result = CellResult(Cell(variant), aggregate_over_time(daily), daily)
        write_daily_metrics(daily, run_dir / "daily_metrics.csv")
        doc = _summary_doc(cfg, result, created)
        doc["checkpoint"] = str(checkpoint)
        (run_dir / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except Exception:
        (run_dir / "ERROR").write_text(traceback.format_exc(), encoding="utf-8")
        raise
    return run_dir


SWEEP_HEADER = ["variant", "window", "layers", "features", "map", "mrr", "ndcg_at_k", "recall_at_k",
                "improvement_map_pct", "improvement_mrr_pct", "improvement_ndcg_at_k_pct",
                "improvement_recall_at_k_pct", "best_epoch", "status"]
SWEEP_METRICS = ("map", "mrr", "ndcg_at_k", "recall_at_k")


def improvement_pct(value: float, baseline: float) -> float:
    return (value - baseline) / baseline * 100.0


def sweep_rows(results: list[CellResult]) -> list[dict]:
    """One row per cell; improvements are relative to the static row with the same layers/features."""
    base = {(r.cell.layers, r.cell.features): r.summary for r in results
            if r.cell.variant == "static" and r.summary is not None}
    rows = []
    for r in results:
        c = r.cell
        row = {"variant": c.variant, "window": c.window, "layers": c.layers, "features": c.features,
               "best_epoch": r.best_epoch, "status": "ok" if r.error is None else r.error}
        ref = base.get((c.layers, c.features)) if c.variant in GCN_VARIANTS else None
        for name in SWEEP_METRICS:
            v = getattr(r.summary, name) if r.summary is not None else None
            row[name] = v
            b = getattr(ref, name) if ref is not None else None
            row[f"improvement_{name}_pct"] = improvement_pct(v, b) if v is not None and b else None
        rows.append(row)
    return rows


def write_sweep(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for row in rows:
            out = []
            for name in SWEEP_HEADER:
                v = row[name]
                if v is None:
                    out.append("")
                elif name.startswith("improvement"):
                    out.append(f"{v:.1f}")
                elif isinstance(v, float):
                    out.append(f"{v:.6f}")
                else:
                    out.append(v)
            w.writerow(out)


def run_sweep_cells(dataset: Dataset, cells: list[Cell], cfg: ExperimentConfig,
                    threads: int = 1) -> list[CellResult]:
    tasks = [(dataset, c, cfg) for c in cells]
    if threads <= 1:
        return [_safe_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_safe_cell, tasks))


def sweep(cfg: ExperimentConfig, out: str | Path, threads: int = 1) -> Path:
    run_dir = _run_dir(Path(out), "sweep")
    created = dt.datetime.now().isoformat(timespec="seconds")
    (run_dir / "config.yaml").write_text(cfg.text, encoding="utf-8")
    try:
        dataset = build_dataset(cfg)
        cells = expand_grid(cfg.get("sweep", "variants"), cfg.get("sweep", "windows"),
                            cfg.get("sweep", "layers"), cfg.get("sweep", "feature_modes"))
        results = run_sweep_cells(dataset, cells, cfg, threads)
        rows = sweep_rows(results)
        write_sweep(rows, run_dir / "sweep.csv")
        doc = {"cells": len(rows), "failed": sum(r.error is not None for r in results),
               "seed": cfg.seed, "config": cfg.echo(), "version": __version__, "created": created}
        (run_dir / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except Exception:
        (run_dir / "ERROR").write_text(traceback.format_exc(), encoding="utf-8")
        raise
    return run_dir


SYNTH_TARGETS = {"repeat_fraction": 0.1341}


def synth(spec: SynthSpec, out: str | Path) -> dict:
    """Write events.csv / items.csv for ``spec`` and return the achieved daily statistics."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic(spec)
    write_events(ds, out / "events.csv")
    write_items(ds.items, out / "items.csv")
    return daily_stats(ds)
