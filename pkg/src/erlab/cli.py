"""Command line entry point: ``erlab <subcommand> ...``.

Every subcommand that trains reads a single JSON config (see README); flags
override the output location only. Validation problems exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attribution import compute_all, dump_records, read_dump, write_dump
from .data import EncodedSplit, audit_splits, build_vocab, encode_split, generate_synthetic, load_dataset, save_splits
from .harness import (APPROACHES, DataBundle, ExperimentConfig, compute_bounds, derived_seed,
                      emit_ood_scatter, evaluate_model, fit, load_config, load_report, prepare_data,
                      run_experiment, summarize_effects, sweep_lambda, write_json, write_rows)
from .metrics import correlate_across_approaches
from .model import Encoder
from .training import BoundNeverMet, select_result, write_curves

log = logging.getLogger("erlab")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=str(args.out))
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=list(args.seeds))
    cfg.validate()
    return cfg


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    spec = replace(cfg.data, seed=derived_seed(cfg.root_seed, "data"))
    splits = generate_synthetic(spec)
    out = save_splits(args.out, splits, spec)
    write_json(out / "audit.json", audit_splits(splits, spec.shortcut_token))
    print(f"wrote {sum(map(len, splits.values()))} examples to {out}")
    return 0


def cmd_set_bounds(args) -> int:
    cfg = _config(args)
    bounds = compute_bounds(cfg, args.techniques)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_json(args.out, bounds)
    for t, (bt, bv) in sorted(bounds.items()):
        print(f"{t}: b_train={bt:.6f} b_val={bv:.6f}")
    return 0


def _bounds_arg(cfg: ExperimentConfig, path: str | None) -> dict:
    bounds = dict(cfg.bounds)
    if path:
        bounds.update(json.loads(Path(path).read_text()))
    return bounds


def cmd_train(args) -> int:
    cfg = _config(args)
    data = prepare_data(cfg)
    model, result = fit(cfg, data, args.approach, args.seed, bounds=_bounds_arg(cfg, args.bounds))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_curves(out / f"{args.approach}-seed{args.seed}-curves.csv", result)
    try:
        epoch = select_result(result)
    except BoundNeverMet as exc:
        print(f"bound never met: {exc}", file=sys.stderr)
        return 1
    model.load_state(result.states[epoch])
    model.save(out / f"{args.approach}-seed{args.seed}.json")
    write_json(out / f"{args.approach}-seed{args.seed}-vocab.json", data.vocab)
    print(f"selected epoch {epoch}; checkpoint in {out}")
    return 0


def _load_split(args) -> tuple[Encoder, EncodedSplit]:
    model = Encoder.load(args.checkpoint)
    raw = load_dataset(args.data)
    if args.split not in raw:
        raise ValueError(f"split {args.split!r} not found in {args.data}")
    vocab = json.loads(Path(args.vocab).read_text()) if args.vocab else build_vocab(raw)
    return model, encode_split(raw[args.split], vocab)


def cmd_attribute(args) -> int:
    model, split = _load_split(args)
    maps = compute_all(model, split.ids)
    n = write_dump(args.out, dump_records(maps, split.lengths, range(len(split)), args.seed, args.approach, args.split))
    print(f"wrote {n} attribution records to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model, split = _load_split(args)
    cfg = ExperimentConfig(faithfulness_splits=[args.split] if args.faithfulness else [])
    metrics = evaluate_model(cfg, model, DataBundle(None, {}, {args.split: split}))
    if args.out:
        write_json(args.out, metrics)
    print(json.dumps({"f1": metrics["f1"]}, sort_keys=True))
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = _config(args)
    rows = sweep_lambda(cfg, args.technique, args.lambdas, bounds=_bounds_arg(cfg, args.bounds))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / f"lambda-sweep-{args.technique}.csv", rows)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_correlate(args) -> int:
    records = [r for p in args.dumps for r in read_dump(p)]
    rec = correlate_across_approaches(records, args.technique, args.a, args.b, seed=args.seed,
                                      layer=args.layer, split=args.split)
    result = {"technique": rec.technique, "a": args.a, "b": args.b, "layer": rec.layer, "split": rec.split,
              "mean_tau": rec.mean_tau, "n": int(np.isfinite(rec.taus).sum())}
    if args.out:
        write_json(args.out, result)
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


def cmd_report(args) -> int:
    cfg = _config(args)
    report = run_experiment(cfg)
    failed = [(r["approach"], r["seed"]) for r in report["runs"] if r["status"] != "ok"]
    print(f"{len(report['runs'])} runs, {len(failed)} failed; report in {cfg.output_dir}/report.json")
    return 0


def cmd_summarize(args) -> int:
    report = load_report(args.report)
    out = Path(args.out or Path(args.report).parent)
    out.mkdir(parents=True, exist_ok=True)
    effects = summarize_effects(report, args.margin)
    write_rows(out / "effects.csv", effects, ["approach", "setup", "guidance", "technique", "ood_f1", "guided", "non_guided"])
    scatter = emit_ood_scatter(report, out / "ood_scatter.csv")
    for row in effects:
        print(f"{row['approach']:9s} {row['setup']:11s} {row['guidance']:6s} "
              f"F1 {row['ood_f1']}  guided {row['guided']}  non-guided {row['non_guided']}")
    print("kendall vs OOD F1:", json.dumps(scatter["kendall"], sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="erlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, out_required=False):
        sp.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
        sp.add_argument("--out", required=out_required)
        return sp

    g = with_config(sub.add_parser("generate-data", help="write synthetic splits as JSONL"), True)
    g.set_defaults(func=cmd_generate_data)

    b = with_config(sub.add_parser("set-bounds", help="expl-only runs -> (b_train, b_val)"), True)
    b.add_argument("--techniques", nargs="+", default=["attr"], choices=["att", "attr", "ixg"])
    b.set_defaults(func=cmd_set_bounds)

    t = with_config(sub.add_parser("train", help="train and select one (approach, seed)"))
    t.add_argument("--approach", required=True, choices=sorted(APPROACHES))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--bounds", help="JSON file from set-bounds")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("attribute", cmd_attribute, "dump attributions as JSONL"),
                              ("evaluate", cmd_evaluate, "F1, plausibility and faithfulness of a checkpoint")):
        a = sub.add_parser(name, help=help_)
        a.add_argument("--checkpoint", required=True)
        a.add_argument("--data", required=True, help="directory of split JSONL files")
        a.add_argument("--vocab", help="vocab JSON written by train (rebuilt from train split otherwise)")
        a.add_argument("--split", default="dev")
        a.add_argument("--out", required=name == "attribute")
        if name == "attribute":
            a.add_argument("--approach", default="unknown")
            a.add_argument("--seed", type=int, default=0)
        else:
            a.add_argument("--faithfulness", action="store_true")
        a.set_defaults(func=func)

    s = with_config(sub.add_parser("sweep-lambda", help="final losses over a lambda grid"))
    s.add_argument("--technique", default="attr", choices=["att", "attr", "ixg"])
    s.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.6, 1.0, 3.0, 10.0, 30.0, 100.0])
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--bounds")
    s.set_defaults(func=cmd_sweep_lambda)

    c = sub.add_parser("correlate", help="Kendall correlation between two approaches' dumps")
    c.add_argument("dumps", nargs="+")
    c.add_argument("--technique", required=True, choices=["att", "attr", "ixg"])
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument("--layer", type=int)
    c.add_argument("--split")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_correlate)

    r = with_config(sub.add_parser("report", help="run the multi-seed grid and write report.json"))
    r.add_argument("--seeds", type=int, nargs="+")
    r.set_defaults(func=cmd_report)

    m = sub.add_parser("summarize", help="effect flags and OOD scatter from a report")
    m.add_argument("report")
    m.add_argument("--out")
    m.add_argument("--margin", type=float, default=1.0, help="significance margin in pooled stds")
    m.set_defaults(func=cmd_summarize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
