"""Plausibility, classification, faithfulness and attribution-correlation metrics.

Undefined values (single-class masks, constant rankings, zero denominators)
are reported as ``nan`` rather than raising, so they can be skipped with
``np.nanmean`` during aggregation.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import MASK_ID, PAD_ID, Encoder

MISSING = float("nan")
DEFAULT_ALPHAS = (0.01, 0.2, 0.4, 0.6, 0.8, 1.0)


def _pair(scores, mask) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    m = np.asarray(mask).astype(bool)
    if s.shape != m.shape:
        raise ValueError(f"scores {s.shape} and mask {m.shape} differ in shape")
    return s, m


# -- plausibility ----------------------------------------------------------------

def auc_plausibility(scores, mask) -> float:
    """ROC-AUC (x100) of scores against a binary rationale; ties count half."""
    s, m = _pair(scores, mask)
    pos, neg = s[m], s[~m]
    if len(pos) == 0 or len(neg) == 0:
        return MISSING
    diff = pos[:, None] - neg[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return 100.0 * wins / (len(pos) * len(neg))


def average_precision(scores, mask) -> float:
    """Sum over descending score thresholds of (R_n - R_{n-1}) * P_n, x100.

    Tied scores share one threshold.
    """
    s, m = _pair(scores, mask)
    n_pos = m.sum()
    if n_pos == 0:
        return MISSING
    order = np.argsort(-s, kind="stable")
    s_sorted, m_sorted = s[order], m[order]
    tp = np.cumsum(m_sorted)
    # last index of each block of tied scores
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    prev_recall = np.r_[0.0, recall[:-1]]
    return 100.0 * float(np.sum((recall - prev_recall) * precision))


def descending_ranks(scores) -> np.ndarray:
    """0-based rank of each entry under a stable descending sort (ties by position)."""
    s = np.asarray(scores, dtype=float)
    order = np.argsort(-s, kind="stable")
    ranks = np.empty(len(s), dtype=int)
    ranks[order] = np.arange(len(s))
    return ranks


def recall_at_k(scores, mask, k: int | None = None) -> tuple[float, int]:
    """Share (x100) of annotated tokens ranked within the top ``k``; default k = #annotated."""
    s, m = _pair(scores, mask)
    n_pos = int(m.sum())
    if n_pos == 0:
        return MISSING, 0
    k = n_pos if k is None else int(k)
    if k < 1:
        raise ValueError("k must be at least 1")
    ranks = descending_ranks(s)
    return 100.0 * float((ranks[m] < k).sum()) / n_pos, k


@dataclass
class PlausibilityScores:
    auc: float
    average_precision: float
    recall_at_k: float
    k_used: int


def plausibility(scores, mask, k: int | None = None) -> PlausibilityScores:
    r, k_used = recall_at_k(scores, mask, k)
    return PlausibilityScores(auc_plausibility(scores, mask), average_precision(scores, mask), r, k_used)


# -- classification --------------------------------------------------------------

def f1_macro(predictions, gold) -> float:
    """Unweighted mean per-class F1 (x100) over classes seen in gold or predictions."""
    p = np.asarray(predictions)
    g = np.asarray(gold)
    if p.shape != g.shape:
        raise ValueError("predictions and gold differ in length")
    if p.size == 0:
        raise ValueError("f1_macro of an empty input")
    f1s = []
    for c in np.union1d(p, g):
        tp = np.sum((p == c) & (g == c))
        fp = np.sum((p == c) & (g != c))
        fn = np.sum((p != c) & (g == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return 100.0 * float(np.mean(f1s))


# -- rank correlation --------------------------------------------------------------

def kendall_tau_b(x, y) -> float:
    """Tie-corrected Kendall rank correlation; ``nan`` if either side is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("kendall_tau_b needs equal-length vectors")
    n = len(x)
    if n < 2:
        return MISSING
    iu = np.triu_indices(n, 1)
    dx = np.sign(x[:, None] - x[None, :])[iu]
    dy = np.sign(y[:, None] - y[None, :])[iu]
    n0 = len(dx)
    tx = np.sum(dx == 0)
    ty = np.sum(dy == 0)
    denom = math.sqrt(float(n0 - tx) * float(n0 - ty))
    if denom == 0:
        return MISSING
    return float(np.sum(dx * dy)) / denom


# -- faithfulness -------------------------------------------------------------------

@dataclass
class FaithfulnessScores:
    null_diff: float
    norm_suff: np.ndarray
    norm_comp: np.ndarray
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHAS
    suff: np.ndarray = field(default=None, repr=False)
    comp: np.ndarray = field(default=None, repr=False)


def top_k_count(alpha: float, length: int) -> int:
    return min(length, int(math.ceil(alpha * length - 1e-12)))


def _masked_inputs(ids: np.ndarray, lengths: np.ndarray, scores: np.ndarray, alpha: float, keep_top: bool) -> np.ndarray:
    """Replace tokens by MASK: keep only the top-alpha tokens, or remove exactly those."""
    out = ids.copy()
    for i, (n, s) in enumerate(zip(lengths, scores)):
        k = top_k_count(alpha, int(n))
        top = np.argsort(-np.asarray(s[:n], dtype=float), kind="stable")[:k]
        chosen = np.zeros(int(n), dtype=bool)
        chosen[top] = True
        drop = ~chosen if keep_top else chosen
        row = out[i, 1: n + 1]
        row[drop] = MASK_ID
    return out


def faithfulness_batch(model: Encoder, ids: np.ndarray, lengths: np.ndarray, scores: np.ndarray,
                       alpha_grid: Sequence[float] = DEFAULT_ALPHAS, literal_suff: bool = False,
                       batch_size: int = 500) -> dict[str, np.ndarray]:
    """Per-example NullDiff, NormSuff and NormComp for a padded batch.

    ``scores`` is ``(N, T-1)`` aligned with the non-[CLS] positions.
    ``literal_suff`` divides by ``1 - Suff(alpha)`` instead of ``1 - Suff(0)``.
    """
    ids = np.asarray(ids)
    lengths = np.asarray(lengths)

    def probs(x):
        return np.concatenate([model.predict_proba(x[lo: lo + batch_size]) for lo in range(0, len(x), batch_size)])

    full = probs(ids)
    y_hat = full.argmax(-1)
    rows = np.arange(len(ids))
    p_full = full[rows, y_hat]
    empty = ids.copy()
    empty[(ids != PAD_ID) & (np.arange(ids.shape[1]) > 0)] = MASK_ID
    p_empty = probs(empty)[rows, y_hat]
    null_diff = np.maximum(0.0, p_full - p_empty)
    suff0 = 1.0 - null_diff
    comp1 = null_diff  # removing every token is the empty input

    suff, comp = [], []
    for a in alpha_grid:
        p_keep = probs(_masked_inputs(ids, lengths, scores, a, keep_top=True))[rows, y_hat]
        p_drop = probs(_masked_inputs(ids, lengths, scores, a, keep_top=False))[rows, y_hat]
        suff.append(1.0 - np.maximum(0.0, p_full - p_keep))
        comp.append(np.maximum(0.0, p_full - p_drop))
    suff = np.stack(suff, 1)
    comp = np.stack(comp, 1)

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = (1.0 - suff) if literal_suff else (1.0 - suff0)[:, None]
        norm_suff = np.where(denom > 0, np.clip((suff - suff0[:, None]) / denom, 0.0, 1.0), np.nan)
        norm_comp = np.where(comp1[:, None] > 0, np.clip(comp / comp1[:, None], 0.0, 1.0), np.nan)
    return {"null_diff": null_diff, "suff": suff, "comp": comp, "norm_suff": norm_suff, "norm_comp": norm_comp}


def faithfulness(model: Encoder, token_ids, attr, alpha_grid: Sequence[float] = DEFAULT_ALPHAS,
                 literal_suff: bool = False) -> FaithfulnessScores:
    ids = np.atleast_2d(np.asarray(token_ids))
    n = int((ids[0] != PAD_ID).sum()) - 1
    scores = np.asarray(getattr(attr, "scores", attr), dtype=float)
    if len(scores) != n:
        raise ValueError(f"attribution has {len(scores)} scores for {n} tokens")
    out = faithfulness_batch(model, ids, np.array([n]), scores[None, :], alpha_grid, literal_suff)
    return FaithfulnessScores(float(out["null_diff"][0]), out["norm_suff"][0], out["norm_comp"][0],
                              tuple(alpha_grid), out["suff"][0], out["comp"][0])


def normalised_scores(suff: Sequence[float], comp: Sequence[float], suff0: float, comp1: float,
                      literal_suff: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Normalisation step alone, for Suff/Comp values computed elsewhere."""
    suff = np.asarray(suff, dtype=float)
    comp = np.asarray(comp, dtype=float)
    denom = 1.0 - suff if literal_suff else np.full_like(suff, 1.0 - suff0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ns = np.where(denom > 0, np.clip((suff - suff0) / denom, 0.0, 1.0), np.nan)
        nc = np.clip(comp / comp1, 0.0, 1.0) if comp1 > 0 else np.full_like(comp, np.nan)
    return ns, nc


# -- correlation across approaches ------------------------------------------------------

@dataclass
class CorrelationRecord:
    technique: str
    approach_pair: tuple[str, str]
    taus: np.ndarray
    mean_tau: float
    layer: int | None = None
    split: str | None = None


def correlate_across_approaches(records: Iterable[dict], technique: str, approach_a: str, approach_b: str,
                                seed: int = 0, layer: int | None = None, split: str | None = None) -> CorrelationRecord:
    """Per-example Kendall tau-b between randomly paired model versions of two approaches.

    For each example one seed of ``approach_a`` and one of ``approach_b`` are
    drawn; when both approaches are the same the two seeds differ.
    """
    table: dict[str, dict[int, dict[int, list]]] = defaultdict(lambda: defaultdict(dict))
    seen_tech = False
    for rec in records:
        if rec["technique"] != technique:
            continue
        seen_tech = True
        if layer is not None and rec.get("layer") != layer:
            continue
        if split is not None and rec.get("split") != split:
            continue
        table[rec["approach"]][int(rec["example"])][int(rec["seed"])] = rec["scores"]
    if not seen_tech:
        raise ValueError(f"technique {technique!r} not present in the dumps")
    for a in (approach_a, approach_b):
        if a not in table:
            raise ValueError(f"approach {a!r} not present for technique {technique!r}")
    rng = np.random.default_rng(seed)
    taus = []
    for ex in sorted(set(table[approach_a]) & set(table[approach_b])):
        seeds_a = sorted(table[approach_a][ex])
        seeds_b = sorted(table[approach_b][ex])
        if approach_a == approach_b:
            if len(seeds_a) < 2:
                raise ValueError("self-correlation needs at least two seeds")
            sa, sb = rng.choice(seeds_a, size=2, replace=False)
        else:
            sa, sb = rng.choice(seeds_a), rng.choice(seeds_b)
        taus.append(kendall_tau_b(table[approach_a][ex][int(sa)], table[approach_b][ex][int(sb)]))
    taus = np.array(taus, dtype=float)
    mean_tau = float(np.nanmean(taus)) if np.isfinite(taus).any() else MISSING
    return CorrelationRecord(technique, (approach_a, approach_b), taus, mean_tau, layer, split)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if len(v) == 0:
        return MISSING, MISSING
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0
