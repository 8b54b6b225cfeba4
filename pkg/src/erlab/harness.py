"""Experiment orchestration: multi-seed runs across approaches, bounds, sweeps and reports.

Every file written here is a pure function of the config: no timestamps, no
wall-clock data, sorted JSON keys and ``repr`` floats.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .attribution import TECHNIQUES, compute_all, dump_records, read_dump, write_dump
from .data import SPLITS, EncodedSplit, SyntheticSpec, build_vocab, encode_split, generate_synthetic, load_dataset
from .metrics import (DEFAULT_ALPHAS, average_precision, auc_plausibility, correlate_across_approaches,
                      f1_macro, faithfulness_batch, kendall_tau_b, mean_std, recall_at_k)
from .model import ModelConfig, init_model
from .training import BoundNeverMet, TrainConfig, bounds_from_results, select_result, train, write_curves

log = logging.getLogger(__name__)

APPROACHES: dict[str, tuple[str, str | None]] = {
    "baseline": ("baseline", None),
    "er-att": ("joint", "att"),
    "er-attr": ("joint", "attr"),
    "er-ixg": ("joint", "ixg"),
    "erc-att": ("constrained", "att"),
    "erc-attr": ("constrained", "attr"),
    "erc-ixg": ("constrained", "ixg"),
    "expl-only-att": ("expl-only", "att"),
    "expl-only-attr": ("expl-only", "attr"),
    "expl-only-ixg": ("expl-only", "ixg"),
}
GRID = ("baseline", "er-att", "er-attr", "er-ixg", "erc-att", "erc-attr", "erc-ixg")
DEFAULT_SEEDS = tuple(range(15))
LAMBDA_GRID = (0.0, 0.6, 1.0, 3.0, 10.0, 30.0, 100.0)
EVAL_SPLITS = ("dev", "test_id", "test_ood")
GUIDANCE_SCOPE = {"att": "local", "attr": "global", "ixg": "global"}


# -- randomness ------------------------------------------------------------------------

def substream(root_seed: int, name: str, *keys: int) -> np.random.SeedSequence:
    """Named child of the root seed; the name is hashed so streams never collide by index."""
    return np.random.SeedSequence(root_seed, spawn_key=(zlib.crc32(name.encode()), *map(int, keys)))


def derived_seed(root_seed: int, name: str, *keys: int) -> int:
    return int(substream(root_seed, name, *keys).generate_state(1)[0])


# -- configuration -----------------------------------------------------------------------

@dataclass
class TrainingSection:
    lr: float = 1e-3
    epochs: int = 12
    constrained_epochs: int = 24
    batch_size: int = 32
    warmup_fraction: float = 0.1
    lam: float = 1.0
    dual_lr: float = 0.1
    slack: float = 1.1
    bound_train_factor: float = 1.5


@dataclass
class ExperimentConfig:
    approaches: list[str] = field(default_factory=lambda: list(GRID))
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    root_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    data_path: str | None = None
    training: TrainingSection = field(default_factory=TrainingSection)
    # per-approach replacements for training fields; joint Att keeps improving past the shared schedule
    approach_overrides: dict[str, dict] = field(default_factory=lambda: {"er-att": {"epochs": 24}})
    bounds: dict[str, list[float]] = field(default_factory=dict)   # technique -> [b_train, b_val]
    bound_seeds: int = 3
    retry_budget: int = 1
    alpha_grid: list[float] = field(default_factory=lambda: list(DEFAULT_ALPHAS))
    literal_suff: bool = False
    faithfulness_splits: list[str] = field(default_factory=lambda: ["test_id"])
    dump_attributions: bool = True
    save_checkpoints: bool = True
    output_dir: str = "runs"
    workers: int = 1
    precision: str = "float32"

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        for a in self.approaches:
            if a not in APPROACHES:
                raise ValueError(f"unknown approach {a!r}; expected one of {sorted(APPROACHES)}")
        train_keys = {f.name for f in fields(TrainingSection)}
        for a, over in self.approach_overrides.items():
            if a not in APPROACHES:
                raise ValueError(f"approach_overrides: unknown approach {a!r}")
            if not isinstance(over, dict) or set(over) - train_keys:
                raise ValueError(f"approach_overrides[{a!r}] must map training fields to values")
        for t, b in self.bounds.items():
            if t not in TECHNIQUES or len(b) != 2 or min(b) <= 0:
                raise ValueError(f"bounds[{t!r}] must be [b_train, b_val] with positive values")
        if self.bound_seeds < 1:
            raise ValueError("bound_seeds must be at least 1")
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be nonnegative")
        if any(not 0 < a <= 1 for a in self.alpha_grid):
            raise ValueError("alpha_grid entries must lie in (0, 1]")
        for s in self.faithfulness_splits:
            if s not in EVAL_SPLITS:
                raise ValueError(f"unknown split {s!r}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        self.model.validate()
        if self.data_path is None:
            self.data.validate(self.model.max_seq_len)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        nested = {"model": ModelConfig, "data": SyntheticSpec, "training": TrainingSection}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in d:
                sub = d[key]
                if not isinstance(sub, dict):
                    raise ValueError(f"config section {key!r} must be a mapping")
                bad = set(sub) - {f.name for f in fields(typ)}
                if bad:
                    raise ValueError(f"unknown keys in {key!r}: {sorted(bad)}")
                d[key] = typ(**sub)
        cfg = cls(**d)
        cfg.validate()
        return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(raw)


# -- data ------------------------------------------------------------------------------

@dataclass
class DataBundle:
    spec: SyntheticSpec | None
    vocab: dict[str, int]
    splits: dict[str, EncodedSplit]


def prepare_data(cfg: ExperimentConfig) -> DataBundle:
    if cfg.data_path is not None:
        raw = load_dataset(cfg.data_path)
        spec = None
    else:
        spec = replace(cfg.data, seed=derived_seed(cfg.root_seed, "data"))
        raw = generate_synthetic(spec)
    missing = [s for s in ("train", "dev") if s not in raw]
    if missing:
        raise ValueError(f"dataset lacks required splits {missing}")
    vocab = build_vocab(raw)
    enc = {name: encode_split(exs, vocab) for name, exs in raw.items() if exs}
    too_long = [n for n, e in enc.items() if e.ids.shape[1] > cfg.model.max_seq_len]
    if too_long:
        raise ValueError(f"splits {too_long} exceed max_seq_len={cfg.model.max_seq_len}")
    return DataBundle(spec, vocab, enc)


# -- single runs ---------------------------------------------------------------------------

def train_config_for(cfg: ExperimentConfig, approach: str, bounds: dict[str, list[float]] | None = None,
                     lam: float | None = None) -> TrainConfig:
    objective, technique = APPROACHES[approach]
    t = cfg.training
    if lam is None:   # a lambda sweep keeps the shared schedule
        t = replace(t, **cfg.approach_overrides.get(approach, {}))
    tc = TrainConfig(objective=objective, technique=technique, lam=t.lam if lam is None else lam, lr=t.lr,
                     epochs=t.constrained_epochs if objective == "constrained" else t.epochs,
                     batch_size=t.batch_size, warmup_fraction=t.warmup_fraction, dual_lr=t.dual_lr, slack=t.slack)
    if objective == "constrained":
        if not bounds or technique not in bounds:
            raise ValueError(f"approach {approach!r} needs bounds for {technique!r}")
        tc.b_train, tc.b_val = bounds[technique]
    return tc


def fit(cfg: ExperimentConfig, data: DataBundle, approach: str, seed: int, attempt: int = 0,
        bounds: dict[str, list[float]] | None = None, lam: float | None = None):
    """Train one model; returns (model, TrainResult). Attempt 0 uses the seed's own streams."""
    keys = (seed,) if attempt == 0 else (seed, attempt)
    mcfg = replace(cfg.model, vocab_size=len(data.vocab), seed=derived_seed(cfg.root_seed, "init", *keys))
    tc = train_config_for(cfg, approach, bounds, lam)
    with ad.default_dtype(cfg.precision):
        model = init_model(mcfg)
        result = train(model, data.splits["train"], data.splits["dev"], tc,
                       seed=derived_seed(cfg.root_seed, "batching", *keys))
    return model, result


def plausibility_table(maps: dict, split: EncodedSplit) -> dict[str, dict]:
    """Mean AUC/AP/recall@k per technique; Att and AttR carry one entry per layer."""
    out: dict[str, dict] = {}
    for (tech, layer), arr in maps.items():
        auc, ap, rec = [], [], []
        for i, n in enumerate(split.lengths):
            s, m = arr[i, :n], split.rationales[i, :n]
            auc.append(auc_plausibility(s, m))
            ap.append(average_precision(s, m))
            rec.append(recall_at_k(s, m)[0])
        entry = {"auc": _nanmean(auc), "ap": _nanmean(ap), "recall": _nanmean(rec)}
        if layer is None:
            out[tech] = entry
        else:
            out.setdefault(tech, [])
            out[tech].append((layer, entry))
    for tech, v in out.items():
        if isinstance(v, list):
            out[tech] = [e for _, e in sorted(v, key=lambda p: p[0])]
    return out


def faithfulness_table(model, maps: dict, split: EncodedSplit, alpha_grid, literal_suff: bool) -> dict:
    """Mean NullDiff/NormSuff/NormComp for the top-layer Att, AttR and IxG maps."""
    L = model.config.num_layers
    out = {}
    for key in (("att", L - 1), ("attr", L - 1), ("ixg", None)):
        r = faithfulness_batch(model, split.ids, split.lengths, maps[key], alpha_grid, literal_suff)
        out[key[0]] = {
            "null_diff": _nanmean(r["null_diff"]),
            "norm_suff": [_nanmean(c) for c in r["norm_suff"].T],
            "norm_comp": [_nanmean(c) for c in r["norm_comp"].T],
        }
    return out


def evaluate_model(cfg: ExperimentConfig, model, data: DataBundle, approach: str = "", seed: int = 0,
                   dump_path: Path | None = None) -> dict:
    f1, plaus, faith = {}, {}, {}
    records = []
    for name in EVAL_SPLITS:
        if name not in data.splits:
            continue
        split = data.splits[name]
        f1[name] = f1_macro(model.predict(split.ids), split.labels)
        maps = compute_all(model, split.ids)
        plaus[name] = plausibility_table(maps, split)
        if name in cfg.faithfulness_splits:
            faith[name] = faithfulness_table(model, maps, split, cfg.alpha_grid, cfg.literal_suff)
        if dump_path is not None:
            records.extend(dump_records(maps, split.lengths, range(len(split)), seed, approach, name))
    if dump_path is not None:
        dump_path.parent.mkdir(parents=True, exist_ok=True)
        write_dump(dump_path, records)
    return {"f1": f1, "plausibility": plaus, "faithfulness": faith}


def run_single(cfg: ExperimentConfig, approach: str, seed: int, bounds: dict[str, list[float]] | None = None,
               data: DataBundle | None = None) -> dict:
    """Train, select, evaluate and write files for one (approach, seed); retries constrained failures."""
    data = data or prepare_data(cfg)
    out = Path(cfg.output_dir)
    objective, _ = APPROACHES[approach]
    attempts = 1 + (cfg.retry_budget if objective == "constrained" else 0)
    failures = []
    for attempt in range(attempts):
        model, result = fit(cfg, data, approach, seed, attempt, bounds)
        try:
            epoch = select_result(result)
        except BoundNeverMet as exc:
            failures.append(str(exc))
            log.info("%s seed %d attempt %d: %s", approach, seed, attempt, exc)
            continue
        model.load_state(result.states[epoch])
        tag = f"{approach}/seed{seed}"
        (out / "curves" / approach).mkdir(parents=True, exist_ok=True)
        write_curves(out / "curves" / f"{tag}.csv", result)
        if cfg.save_checkpoints:
            (out / "checkpoints" / approach).mkdir(parents=True, exist_ok=True)
            model.save(out / "checkpoints" / f"{tag}.json")
        dump = out / "dumps" / f"{tag}.jsonl" if cfg.dump_attributions else None
        with ad.default_dtype(cfg.precision):
            metrics = evaluate_model(cfg, model, data, approach, seed, dump)
        val = [r for r in result.records if r.split == "val"][epoch]
        return {
            "approach": approach, "seed": seed, "status": "ok", "attempt": attempt, "failures": failures,
            "selected_epoch": epoch, "val_ce": val.ce, "val_expl": val.expl,
            "mu_min": min(result.mu_trace) if result.mu_trace else None,
            "curves": f"curves/{tag}.csv", **metrics,
        }
    return {"approach": approach, "seed": seed, "status": "failed", "attempt": attempts - 1, "failures": failures}


def compute_bounds(cfg: ExperimentConfig, techniques: Iterable[str], data: DataBundle | None = None) -> dict[str, list[float]]:
    """Bounds from expl-only runs on ``bound_seeds`` dedicated seeds per technique."""
    data = data or prepare_data(cfg)
    bounds = {}
    for tech in sorted(set(techniques)):
        results = []
        for k in range(cfg.bound_seeds):
            seed = derived_seed(cfg.root_seed, "bounds", k)
            results.append(fit(cfg, data, f"expl-only-{tech}", seed)[1])
        bt, bv = bounds_from_results(results, cfg.training.bound_train_factor)
        bounds[tech] = [bt, bv]
        log.info("bounds %s: b_train %.5f b_val %.5f", tech, bt, bv)
    return bounds


def _run_job(args):
    cfg, approach, seed, bounds = args
    return run_single(cfg, approach, seed, bounds)


def run_experiment(cfg: ExperimentConfig) -> dict:
    cfg.validate()
    data = prepare_data(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    needed = {APPROACHES[a][1] for a in cfg.approaches if APPROACHES[a][0] == "constrained"}
    bounds = {t: list(b) for t, b in cfg.bounds.items()}
    missing = needed - set(bounds)
    if missing:
        bounds.update(compute_bounds(cfg, missing, data))

    jobs = [(a, s) for a in cfg.approaches for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            runs = list(pool.map(_run_job, [(cfg, a, s, bounds) for a, s in jobs]))
    else:
        runs = [run_single(cfg, a, s, bounds, data) for a, s in jobs]

    report = {
        "config": cfg.to_dict(),
        "data_seed": data.spec.seed if data.spec else None,
        "bounds": bounds,
        "runs": runs,
        "aggregates": aggregate(runs),
    }
    if cfg.dump_attributions:
        report["correlations"] = correlation_summary(cfg, out / "dumps", cfg.approaches, cfg.model.num_layers)
    write_json(out / "report.json", report)
    write_metric_table(out / "metrics.csv", report)
    return report


# -- aggregation -------------------------------------------------------------------

def flatten_metrics(run: dict) -> dict[str, float]:
    """Scalar metrics of one run under slash-joined keys, e.g. ``auc/dev/att/1``."""
    flat = {}
    for split, v in run.get("f1", {}).items():
        flat[f"f1/{split}"] = v
    for split, techs in run.get("plausibility", {}).items():
        for tech, entry in techs.items():
            layered = entry if isinstance(entry, list) else [entry]
            for l, e in enumerate(layered):
                suffix = f"/{l}" if isinstance(entry, list) else ""
                for metric, value in e.items():
                    flat[f"{metric}/{split}/{tech}{suffix}"] = value
    for split, techs in run.get("faithfulness", {}).items():
        for tech, e in techs.items():
            flat[f"null_diff/{split}/{tech}"] = e["null_diff"]
            for name in ("norm_suff", "norm_comp"):
                for i, v in enumerate(e[name]):
                    flat[f"{name}/{split}/{tech}/{i}"] = v
    return flat


def aggregate(runs: Sequence[dict]) -> dict[str, dict[str, dict]]:
    """Per approach and metric: mean, sample std and count over successful seeds."""
    by_approach: dict[str, list[dict]] = {}
    for r in runs:
        by_approach.setdefault(r["approach"], []).append(r)
    out = {}
    for approach, rs in by_approach.items():
        ok = [flatten_metrics(r) for r in rs if r["status"] == "ok"]
        keys = sorted({k for f in ok for k in f})
        stats = {}
        for k in keys:
            vals = [f.get(k) for f in ok]
            vals = [math.nan if v is None else v for v in vals]
            m, s = mean_std(vals)
            stats[k] = {"mean": m, "std": s, "n": int(np.isfinite(vals).sum())}
        out[approach] = {"n_ok": len(ok), "n_failed": len(rs) - len(ok), "metrics": stats}
    return out


def correlation_summary(cfg: ExperimentConfig, dump_dir: Path, approaches: Sequence[str], num_layers: int,
                        split: str = "dev") -> list[dict]:
    """Kendall correlations of each approach against baseline and against itself, on top-layer maps."""
    records = []
    for path in sorted(dump_dir.glob("*/seed*.jsonl")):
        records.extend(r for r in read_dump(path) if r["split"] == split)
    if not records:
        return []
    rows = []
    seed = derived_seed(cfg.root_seed, "correlation")
    seeds_of: dict[str, set] = {}
    for r in records:
        seeds_of.setdefault(r["approach"], set()).add(r["seed"])
    pairs = list(dict.fromkeys(p for a in approaches for p in (("baseline", a), (a, a))))
    for tech, layer in (("att", num_layers - 1), ("attr", num_layers - 1), ("ixg", None)):
        for pair in pairs:
            # failed seeds leave no dumps, so an approach may lack the two seeds a self-pair needs
            if not set(pair) <= set(seeds_of) or (pair[0] == pair[1] and len(seeds_of[pair[0]]) < 2):
                continue
            rec = correlate_across_approaches(records, tech, *pair, seed=seed, layer=layer, split=split)
            rows.append({"technique": tech, "layer": layer, "a": pair[0], "b": pair[1], "split": split,
                         "mean_tau": rec.mean_tau, "n": int(np.isfinite(rec.taus).sum())})
    return rows


# -- λ sweep ---------------------------------------------------------------------------

def sweep_lambda(cfg: ExperimentConfig, technique: str = "attr", lambdas: Sequence[float] = LAMBDA_GRID,
                 seeds: Sequence[int] | None = None, bounds: dict[str, list[float]] | None = None) -> list[dict]:
    """Final-epoch train/val CE and explanation loss per λ, mean and std over seeds."""
    if technique not in TECHNIQUES:
        raise ValueError(f"unknown technique {technique!r}")
    if any(l < 0 for l in lambdas):
        raise ValueError("lambda values must be nonnegative")
    seeds = list(seeds if seeds is not None else cfg.seeds)
    data = prepare_data(cfg)
    ref = (bounds or cfg.bounds).get(technique)
    rows = []
    for lam in lambdas:
        finals = {k: [] for k in ("train_ce", "train_expl", "val_ce", "val_expl")}
        for s in seeds:
            _, result = fit(cfg, data, f"er-{technique}", s, lam=lam)
            for split, prefix in (("train", "train"), ("val", "val")):
                finals[f"{prefix}_ce"].append(result.curve(split, "ce")[-1])
                finals[f"{prefix}_expl"].append(result.curve(split, "expl")[-1])
        row = {"lambda": lam, "technique": technique, "n_seeds": len(seeds)}
        for k, v in finals.items():
            row[k], row[f"{k}_std"] = mean_std(v)
        row["b_train"], row["b_val"] = (ref if ref else (math.nan, math.nan))
        rows.append(row)
    return rows


def count_inversions(values: Sequence[float]) -> int:
    """Adjacent increases in a sequence expected to be non-increasing."""
    return int(sum(b > a for a, b in zip(values, values[1:])))


# -- OOD scatter and effect summary ---------------------------------------------------------

SCATTER_PREDICTORS = ("id_f1", "id_auc_att", "id_auc_attr", "id_auc_ixg", "ood_auc_att", "ood_auc_attr", "ood_auc_ixg")


def _top(entry):
    return entry[-1]["auc"] if isinstance(entry, list) else entry["auc"]


def emit_ood_scatter(report: dict, path: str | Path | None = None) -> dict:
    """Per-(seed, approach) predictors of OOD F1 and their Kendall correlation with it."""
    rows = []
    for r in report["runs"]:
        if r["status"] != "ok" or "test_ood" not in r["f1"] or "test_id" not in r["f1"]:
            continue
        pid, pood = r["plausibility"]["test_id"], r["plausibility"]["test_ood"]
        row = {"seed": r["seed"], "approach": r["approach"], "id_f1": r["f1"]["test_id"]}
        for tech in TECHNIQUES:
            row[f"id_auc_{tech}"] = _top(pid[tech])
            row[f"ood_auc_{tech}"] = _top(pood[tech])
        row["ood_f1"] = r["f1"]["test_ood"]
        rows.append(row)
    return scatter_from_rows(rows, path)


def scatter_from_rows(rows: list[dict], path: str | Path | None = None) -> dict:
    target = [r["ood_f1"] for r in rows]
    corr = {}
    for p in SCATTER_PREDICTORS:
        tau = kendall_tau_b([r[p] for r in rows], target) if len(rows) >= 2 else math.nan
        corr[p] = None if not np.isfinite(tau) else float(tau)
    if path is not None:
        cols = ["seed", "approach", *SCATTER_PREDICTORS, "ood_f1"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rows:
                w.writerow([_cell(r[c]) for c in cols])
            w.writerow([])
            w.writerow(["predictor", "kendall_tau_vs_ood_f1"])
            for p in SCATTER_PREDICTORS:
                w.writerow([p, "missing" if corr[p] is None else repr(corr[p])])
    return {"rows": rows, "kendall": corr}


def effect_flag(mean_a: float, std_a: float, mean_b: float, std_b: float, margin: float = 1.0) -> str:
    """``✓`` above baseline by more than ``margin`` pooled stds, ``✗`` below, ``∅`` within."""
    if not all(np.isfinite([mean_a, mean_b])):
        return "missing"
    pooled = math.sqrt(((std_a or 0.0) ** 2 + (std_b or 0.0) ** 2) / 2.0)
    diff = mean_a - mean_b
    if diff > margin * pooled:
        return "✓"
    if diff < -margin * pooled:
        return "✗"
    return "∅"


def summarize_effects(report: dict, margin: float = 1.0, plaus_split: str = "dev", f1_split: str = "test_ood") -> list[dict]:
    """Effect flags per ER approach against baseline: OOD F1, guided and non-guided plausibility."""
    agg = report["aggregates"]
    L = report["config"]["model"]["num_layers"]
    key = {t: f"auc/{plaus_split}/{t}/{L - 1}" if t != "ixg" else f"auc/{plaus_split}/ixg" for t in TECHNIQUES}

    def stat(approach, k):
        s = agg.get(approach, {}).get("metrics", {}).get(k)
        return (s["mean"], s["std"]) if s else (math.nan, math.nan)

    def nonguided(approach, tech):
        others = [stat(approach, key[t]) for t in TECHNIQUES if t != tech]
        means, stds = zip(*others)
        return float(np.mean(means)), float(np.sqrt(np.mean(np.square(stds))))

    rows = []
    for approach in GRID[1:]:
        objective, tech = APPROACHES[approach]
        row = {"approach": approach, "setup": "joint" if objective == "joint" else "constrained",
               "guidance": GUIDANCE_SCOPE[tech], "technique": tech}
        if approach not in agg or "baseline" not in agg:
            row.update({"ood_f1": "missing", "guided": "missing", "non_guided": "missing"})
        else:
            row["ood_f1"] = effect_flag(*stat(approach, f"f1/{f1_split}"), *stat("baseline", f"f1/{f1_split}"), margin)
            row["guided"] = effect_flag(*stat(approach, key[tech]), *stat("baseline", key[tech]), margin)
            row["non_guided"] = effect_flag(*nonguided(approach, tech), *nonguided("baseline", tech), margin)
        rows.append(row)
    return rows


# -- output helpers --------------------------------------------------------------------

def _nanmean(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(np.nanmean(v)) if np.isfinite(v).any() else math.nan


def _clean(obj: Any):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=1, sort_keys=True, allow_nan=False) + "\n")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    return str(v)


def write_rows(path: str | Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def write_metric_table(path: str | Path, report: dict) -> None:
    rows = []
    for approach, a in sorted(report["aggregates"].items()):
        for metric, s in sorted(a["metrics"].items()):
            rows.append({"approach": approach, "metric": metric, "mean": s["mean"], "std": s["std"], "n": s["n"]})
    write_rows(path, rows, ["approach", "metric", "mean", "std", "n"])


def load_report(path: str | Path) -> dict:
    report = json.loads(Path(path).read_text())
    for key in ("runs", "aggregates", "config"):
        if key not in report:
            raise ValueError(f"{path}: report lacks {key!r}")
    return report
