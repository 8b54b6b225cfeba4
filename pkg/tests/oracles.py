"""Brute-force reference implementations used only by the tests.

Each one enumerates pairs, thresholds or ranks directly so it shares no code
path with the vectorised versions in ``erlab.metrics``.
"""
import math


def auc_bruteforce(scores, mask):
    pos = [s for s, m in zip(scores, mask) if m]
    neg = [s for s, m in zip(scores, mask) if not m]
    if not pos or not neg:
        return math.nan
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return 100.0 * total / (len(pos) * len(neg))


def ap_bruteforce(scores, mask):
    n_pos = sum(mask)
    if n_pos == 0:
        return math.nan
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores), reverse=True):
        predicted = [m for s, m in zip(scores, mask) if s >= t]
        tp = sum(predicted)
        precision = tp / len(predicted)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return 100.0 * ap


def recall_at_k_bruteforce(scores, mask, k=None):
    n_pos = sum(mask)
    if n_pos == 0:
        return math.nan
    k = n_pos if k is None else k
    hits = 0
    for i, (s, m) in enumerate(zip(scores, mask)):
        if not m:
            continue
        rank = sum(1 for j, t in enumerate(scores) if t > s or (t == s and j < i))
        hits += rank < k
    return 100.0 * hits / n_pos


def kendall_bruteforce(x, y):
    n = len(x)
    conc = disc = tie_x = tie_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            if dx == 0 and dy == 0:
                tie_x += 1
                tie_y += 1
            elif dx == 0:
                tie_x += 1
            elif dy == 0:
                tie_y += 1
            elif (dx > 0) == (dy > 0):
                conc += 1
            else:
                disc += 1
    n0 = n * (n - 1) // 2
    denom = math.sqrt((n0 - tie_x) * (n0 - tie_y))
    if denom == 0:
        return math.nan
    return (conc - disc) / denom


def f1_macro_bruteforce(pred, gold):
    classes = sorted(set(pred) | set(gold))
    f1s = []
    for c in classes:
        tp = sum(1 for p, g in zip(pred, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gold) if p != c and g == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return 100.0 * sum(f1s) / len(f1s)


def matmul_lists(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]
