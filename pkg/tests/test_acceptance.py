"""Acceptance criteria A1-A8.

Each test prints one ``A<n> PASS|FAIL`` line; the lines are repeated in the
terminal summary. A5 and A7 read the full default grid (7 approaches x 15
seeds), which A8 also times, so this module takes well over an hour on one
core. Set ``ERLAB_ACCEPTANCE_OUT`` to keep the grid and sweep outputs.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from erlab import autodiff as ad
from erlab.attribution import attention_scores, rollout_gradient_reference, rollout_matrices, rollout_scores
from erlab.data import EncodedSplit
from erlab.harness import ExperimentConfig, count_inversions, prepare_data, run_experiment, sweep_lambda, write_rows
from erlab.metrics import auc_plausibility, average_precision, f1_macro, kendall_tau_b, recall_at_k
from erlab.model import CLS_ID, PAD_ID, Encoder, ModelConfig, init_model
from erlab.training import (TrainConfig, batch_targets, build_target, explanation_loss, explanation_loss_batch,
                            guided_scores, train)

from conftest import VERDICTS
from oracles import ap_bruteforce, auc_bruteforce, f1_macro_bruteforce, kendall_bruteforce, recall_at_k_bruteforce

GRID_BUDGET_S = 2 * 3600


def verdict(name, ok, detail, capsys):
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    VERDICTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


@pytest.fixture(scope="session")
def out_dir(tmp_path_factory):
    env = os.environ.get("ERLAB_ACCEPTANCE_OUT")
    path = Path(env) if env else tmp_path_factory.mktemp("acceptance")
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def grid(out_dir):
    cfg = ExperimentConfig(output_dir=str(out_dir / "grid"))
    start = time.perf_counter()
    report = run_experiment(cfg)
    return report, time.perf_counter() - start, cfg


def _metric(report, approach, key):
    return report["aggregates"][approach]["metrics"][key]["mean"]


# -- A1 --------------------------------------------------------------------------------------

def test_a1_gradient_correctness(capsys):
    start = time.perf_counter()
    cfg = ModelConfig(vocab_size=30, max_seq_len=16, seed=0)
    assert (cfg.num_layers, cfg.num_heads, cfg.d_model) == (2, 2, 32)
    m = init_model(cfg)
    rng = np.random.default_rng(0)
    lengths = np.array([7, 4, 9])
    ids = np.full((3, 10), PAD_ID)
    ids[:, 0] = CLS_ID
    rat = np.zeros((3, 9))
    for i, n in enumerate(lengths):
        ids[i, 1: n + 1] = rng.integers(4, 30, size=n)
        rat[i, rng.choice(n, size=2, replace=False)] = 1
    batch = EncodedSplit(ids, np.array([0, 1, 1]), rat, lengths)

    def expl(technique):
        def loss():
            scores, out = guided_scores(m, batch, technique)
            return explanation_loss_batch(scores, batch_targets(rat, technique), out.mask[:, 1:], technique)
        return loss

    checks = {"ce": (lambda: ad.cross_entropy(m.forward(ids).logits, batch.labels), 1e-4),
              "att": (expl("att"), 1e-3), "attr": (expl("attr"), 1e-3), "ixg": (expl("ixg"), 1e-3)}
    errs = {}
    passed = True
    for name, (fn, tol) in checks.items():
        rep = ad.finite_difference_check(fn, m.parameters(), h=1e-4, tol=tol, max_entries=8,
                                         rng=np.random.default_rng(1))
        errs[name] = rep.max_rel_error
        passed &= rep.passed
    elapsed = time.perf_counter() - start
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in errs.items()) + f"; {elapsed:.1f}s"
    verdict("A1", passed and elapsed < 60, detail, capsys)


# -- A2 --------------------------------------------------------------------------------------

def test_a2_rollout_gradient_oracle(capsys):
    m = init_model(ModelConfig(vocab_size=30, max_seq_len=16, seed=3))
    ids = np.array([[CLS_ID, 5, 9, 14, 22, 7, 11], [CLS_ID, 4, 8, 12, PAD_ID, PAD_ID, PAD_ID]])
    target = batch_targets(np.array([[0, 1, 0, 0, 1, 0], [1, 0, 0, 0, 0, 0]], dtype=float), "attr")
    mask = (ids[:, 1:] != PAD_ID).astype(float)
    loss = lambda s: explanation_loss_batch(s, target, mask, "attr")
    auto = ad.gradient(loss(rollout_scores(m.forward(ids))), m.parameters())
    ref = rollout_gradient_reference(m, ids, loss)
    local = rollout_gradient_reference(m, ids, loss, include_recursion=False)
    err = max(np.abs(a.data - r).max() for a, r in zip(auto, ref))
    gap = max(np.abs(r - l).max() for r, l in zip(ref, local))
    verdict("A2", err < 1e-6 and gap > 1e-6, f"max |autodiff - reference| {err:.1e}; without recursion {gap:.1e}", capsys)


# -- A3 --------------------------------------------------------------------------------------

def test_a3_metric_oracles(capsys):
    rng = np.random.default_rng(7)
    n_cases = worst = 0
    for _ in range(2000):
        n = int(rng.integers(1, 7))
        s = list(rng.integers(0, 3, size=n) / 2.0) if rng.random() < 0.5 else list(rng.normal(size=n))
        mask = list(rng.integers(0, 2, size=n))
        other = list(rng.normal(size=n)) if rng.random() < 0.5 else list(rng.integers(0, 3, size=n).astype(float))
        pred, gold = list(rng.integers(0, 2, size=n)), list(rng.integers(0, 2, size=n))
        pairs = [(auc_plausibility(s, mask), auc_bruteforce(s, mask)),
                 (average_precision(s, mask), ap_bruteforce(s, mask)),
                 (recall_at_k(s, mask)[0], recall_at_k_bruteforce(s, mask)),
                 (f1_macro(pred, gold), f1_macro_bruteforce(pred, gold))]
        if n >= 2:
            pairs.append((kendall_tau_b(s, other), kendall_bruteforce(s, other)))
        for a, b in pairs:
            if np.isnan(a) and np.isnan(b):
                continue
            worst = max(worst, abs(a - b) if np.isfinite(a) and np.isfinite(b) else np.inf)
        n_cases += 1
    verdict("A3", n_cases >= 1000 and worst <= 1e-9, f"{n_cases} random inputs, worst deviation {worst:.1e}", capsys)


# -- A4 --------------------------------------------------------------------------------------

def _stochastic_deviation(model, split, batch=250):
    worst = 0.0
    for lo in range(0, len(split), batch):
        b = split.batch(np.arange(lo, min(len(split), lo + batch)))
        with ad.no_grad():
            out = model.forward(b.ids)
            mask = out.mask[:, 1:]
            L = len(out.attentions)
            maps = [attention_scores(out, l).data for l in range(L)]
            joints = rollout_matrices(out)
            maps += [rollout_scores(out, l).data for l in range(L)]
        for arr in maps:
            worst = max(worst, np.abs(arr.sum(-1) - 1).max(), -arr.min(), np.abs(arr * (1 - mask)).max())
        for j in joints:
            worst = max(worst, np.abs(j.data.sum(-1) - 1).max(), -j.data.min())
    return worst


def test_a4_stochasticity(grid, capsys):
    report, _, cfg = grid
    data = prepare_data(cfg)
    worst, n_models = 0.0, 0
    for seed in range(3):
        model = init_model(ModelConfig(vocab_size=len(data.vocab), seed=seed))
        for split in data.splits.values():
            worst = max(worst, _stochastic_deviation(model, split))
        n_models += 1
    ck_dir = Path(cfg.output_dir) / "checkpoints"
    for ck in sorted(ck_dir.glob("*/seed0.json")):
        model = Encoder.load(ck)
        for split in data.splits.values():
            worst = max(worst, _stochastic_deviation(model, split))
        n_models += 1
    verdict("A4", worst <= 1e-6, f"{n_models} models over all splits, worst deviation {worst:.1e}", capsys)


# -- A5 --------------------------------------------------------------------------------------

def test_a5_constrained_contract(grid, capsys):
    report, _, _ = grid
    b_val = report["bounds"]["attr"][1]
    runs = [r for r in report["runs"] if r["approach"] == "erc-attr"]
    ok = [r for r in runs if r["status"] == "ok"]
    within = all(r["val_expl"] <= 1.1 * b_val for r in ok)
    mu_ok = all(r["mu_min"] is not None and r["mu_min"] >= 0 for r in ok)
    retries = sum(r["attempt"] for r in ok)
    detail = (f"{len(ok)}/{len(runs)} seeds succeeded ({retries} retries); max val expl "
              f"{max((r['val_expl'] for r in ok), default=float('nan')):.4f} vs 1.1*b_val {1.1 * b_val:.4f}; "
              f"min mu {min((r['mu_min'] for r in ok), default=float('nan')):.3g}")
    verdict("A5", within and mu_ok and len(ok) >= 10, detail, capsys)


# -- A6 --------------------------------------------------------------------------------------

def test_a6_lambda_sweep(out_dir, capsys):
    cfg = ExperimentConfig(output_dir=str(out_dir / "sweep"))
    rows = sweep_lambda(cfg, "attr", seeds=range(5))
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    write_rows(Path(cfg.output_dir) / "lambda-sweep-attr.csv", rows)
    expl = [r["train_expl"] for r in rows]
    ce = {r["lambda"]: r["train_ce"] for r in rows}
    inv = count_inversions(expl)
    detail = (f"train expl {' '.join(f'{v:.4f}' for v in expl)} ({inv} inversions); "
              f"CE lambda=100 {ce[100.0]:.4f} vs lambda=0 {ce[0.0]:.4f}")
    verdict("A6", inv <= 1 and ce[100.0] > ce[0.0], detail, capsys)


# -- A7 --------------------------------------------------------------------------------------

def test_a7_hacking_reproduction(grid, capsys):
    report, _, cfg = grid
    assert cfg.data.rho_id == 0.95
    top = cfg.model.num_layers - 1
    guided = _metric(report, "er-att", f"auc/dev/att/{top}") - _metric(report, "baseline", f"auc/dev/att/{top}")
    # "layer 1" is the first encoder layer (index 0)
    first = _metric(report, "er-att", "auc/dev/att/0") - _metric(report, "baseline", "auc/dev/att/0")
    ixg = _metric(report, "erc-attr", "auc/dev/ixg") - _metric(report, "baseline", "auc/dev/ixg")
    detail = (f"joint Att guided AUC {guided:+.2f} (need >= 15), first-layer Att {first:+.2f} (need |.| < 5), "
              f"constrained AttR -> IxG AUC {ixg:+.2f} (need >= 10)")
    verdict("A7", guided >= 15 and abs(first) < 5 and ixg >= 10, detail, capsys)


# -- A8 --------------------------------------------------------------------------------------

def test_a8_reductions(grid, capsys):
    _, elapsed, cfg = grid
    data = prepare_data(cfg)
    mcfg = ModelConfig(vocab_size=len(data.vocab), seed=11)
    runs = []
    for tc in (TrainConfig(epochs=2), TrainConfig("joint", "attr", lam=0.0, epochs=2)):
        model = init_model(mcfg)
        runs.append(train(model, data.splits["train"], data.splits["dev"], tc, seed=11, val_techniques=()))
    bit_exact = all(np.array_equal(a[k], b[k]) for a, b in zip(runs[0].states, runs[1].states) for k in a)
    t = build_target([1, 0, 1, 1], "ixg")
    zero = explanation_loss(t.values, t, "ixg").item() == 0.0
    detail = (f"lambda=0 trajectory bit-exact: {bit_exact}; expl_loss(t, t) = 0: {zero}; "
              f"full grid {elapsed / 60:.1f} min (budget {GRID_BUDGET_S / 60:.0f})")
    verdict("A8", bit_exact and zero and elapsed < GRID_BUDGET_S, detail, capsys)
