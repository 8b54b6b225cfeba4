"""Explanation targets and losses, the joint/constrained objectives and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attribution import TECHNIQUES, AttributionMap, attention_scores, ixg_scores, rollout_scores, token_mask
from .autodiff import Tensor
from .data import EncodedSplit
from .model import Encoder

log = logging.getLogger(__name__)

OBJECTIVES = ("baseline", "joint", "expl-only", "constrained")
ATTENTION_SCALE = 100.0


class BoundNeverMet(RuntimeError):
    """No epoch satisfied the validation explanation bound."""


# -- targets and losses ---------------------------------------------------------

@dataclass
class ExplanationTarget:
    values: np.ndarray
    normalisation: str  # "sum-to-one" or "binary"


def build_target(rationale_mask: Sequence[int], technique: str) -> ExplanationTarget:
    mask = np.asarray(rationale_mask, dtype=float)
    if technique not in TECHNIQUES:
        raise ValueError(f"unknown technique {technique!r}")
    if technique == "ixg":
        return ExplanationTarget(mask.copy(), "binary")
    total = mask.sum()
    if total == 0:
        raise ValueError("cannot normalise an all-zero rationale to sum to one")
    return ExplanationTarget(mask / total, "sum-to-one")


def batch_targets(rationales: np.ndarray, technique: str) -> np.ndarray:
    if technique == "ixg":
        return rationales
    counts = rationales.sum(-1, keepdims=True)
    return np.divide(rationales, counts, out=np.zeros_like(rationales), where=counts > 0)


def _masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    return ad.softmax(x + (1.0 - mask) * -1e9, -1)


def explanation_loss_batch(scores: Tensor, targets: np.ndarray, mask: np.ndarray, technique: str) -> Tensor:
    """Mean over examples of the per-token MAE between processed scores and targets.

    Attention-based scores are scaled by 100 and pushed through a softmax over
    the real tokens first. Examples without any rationale token are skipped.
    """
    if scores.shape != targets.shape:
        raise ValueError(f"score shape {scores.shape} does not match target shape {targets.shape}")
    if technique in ("att", "attr"):
        scores = _masked_softmax(scores * ATTENTION_SCALE, mask)
    keep = (targets.sum(-1) > 0).astype(float)
    counts = np.maximum(mask.sum(-1), 1.0)
    per_example = (ad.abs_(scores - targets) * mask).sum(-1) * (1.0 / counts)
    n_keep = keep.sum()
    if n_keep == 0:
        return Tensor(0.0)
    return (per_example * keep).sum() * (1.0 / n_keep)


def explanation_loss(attr: AttributionMap | Tensor | np.ndarray, target: ExplanationTarget | np.ndarray,
                     technique: str | None = None) -> Tensor:
    """Explanation loss of one attribution map against one target."""
    if isinstance(attr, AttributionMap):
        technique = technique or attr.technique
        scores = Tensor(attr.scores)
    else:
        scores = ad.as_tensor(attr)
    values = target.values if isinstance(target, ExplanationTarget) else np.asarray(target, dtype=float)
    if scores.shape[-1] != values.shape[-1]:
        raise ValueError(f"attribution length {scores.shape[-1]} != target length {values.shape[-1]}")
    if technique is None:
        raise ValueError("technique is required for raw score vectors")
    scores = scores.reshape(1, -1)
    values = values.reshape(1, -1)
    mask = np.ones_like(values)
    if technique in ("att", "attr"):
        scores = _masked_softmax(scores * ATTENTION_SCALE, mask)
    return ad.abs_(scores - values).mean()


def joint_loss(ce, expl, lam: float):
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return ce + lam * expl


def guided_scores(model: Encoder, batch: EncodedSplit, technique: str, output=None):
    """Forward pass plus the differentiable guided attribution for a batch."""
    if technique == "ixg":
        scores, output = ixg_scores(model, batch.ids, batch.labels, create_graph=True, output=output)
        return scores, output
    if output is None:
        output = model.forward(batch.ids)
    if technique == "att":
        return attention_scores(output, -1), output
    if technique == "attr":
        return rollout_scores(output, -1), output
    raise ValueError(f"unknown technique {technique!r}")


# -- optimisers ------------------------------------------------------------------------

class Adam:
    """Adam with decoupled weight decay (AdamW)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def linear_schedule(step: int, total: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warm-up over the first fraction of steps, then linear decay to zero."""
    warm = int(round(warmup_fraction * total))
    if warm and step < warm:
        return base_lr * (step + 1) / warm
    if total <= warm:
        return base_lr
    return base_lr * max(0.0, (total - step) / (total - warm))


@dataclass
class DualState:
    """Lagrange multiplier for the explanation-loss constraint, updated by RMSprop ascent."""

    mu: float = 0.0
    b_train: float = 0.03
    b_val: float = 0.03
    lr: float = 0.1
    alpha: float = 0.99
    eps: float = 1e-8
    sq_avg: float = 0.0
    steps: int = 0


def dual_update(state: DualState, observed_expl: float, adaptive: bool = True) -> DualState:
    """One projected ascent step on the constraint violation ``expl - b_train``."""
    if state.mu < 0:
        raise ValueError("multiplier must be nonnegative")
    g = observed_expl - state.b_train
    if adaptive:
        sq = state.alpha * state.sq_avg + (1.0 - state.alpha) * g * g
        step = state.lr * g / (math.sqrt(sq) + state.eps)
    else:
        sq = state.sq_avg
        step = state.lr * g
    mu = max(0.0, state.mu + step)
    return DualState(mu, state.b_train, state.b_val, state.lr, state.alpha, state.eps, sq, state.steps + 1)


# -- training -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    objective: str = "baseline"
    technique: str | None = None
    lam: float = 1.0
    lr: float = 1e-3
    epochs: int = 12
    batch_size: int = 32
    warmup_fraction: float = 0.1
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.0
    dual_lr: float = 0.1
    b_train: float | None = None
    b_val: float | None = None
    slack: float = 1.1
    eval_batch_size: int = 250

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective != "baseline" and self.technique not in TECHNIQUES:
            raise ValueError(f"objective {self.objective!r} needs a technique in {TECHNIQUES}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.objective == "constrained" and (self.b_train is None or self.b_val is None):
            raise ValueError("constrained training needs b_train and b_val")
        if self.slack <= 1.0:
            raise ValueError("slack factor must exceed 1")


@dataclass
class EpochRecord:
    epoch: int
    split: str
    ce: float
    expl: float
    total: float
    mu: float
    expl_by_technique: dict[str, float] = field(default_factory=dict)


@dataclass
class TrainResult:
    config: TrainConfig
    records: list[EpochRecord]
    states: list[dict[str, np.ndarray]]
    mu_trace: list[float]
    selected_epoch: int | None = None

    def curve(self, split: str, key: str) -> np.ndarray:
        return np.array([getattr(r, key) for r in self.records if r.split == split])

    def val_expl(self, technique: str) -> np.ndarray:
        return np.array([r.expl_by_technique[technique] for r in self.records if r.split == "val"])


def _total(cfg: TrainConfig, ce: float, expl: float, mu: float) -> float:
    if cfg.objective == "baseline":
        return ce
    if cfg.objective == "joint":
        return ce + cfg.lam * expl
    if cfg.objective == "expl-only":
        return expl
    return ce + mu * (expl - cfg.b_train)


def evaluate_losses(model: Encoder, split: EncodedSplit, batch_size: int = 250,
                    techniques: Sequence[str] = TECHNIQUES) -> tuple[float, dict[str, float]]:
    """Mean CE and per-technique explanation losses over a split (gold-label IxG)."""
    n = len(split)
    ce_sum = 0.0
    expl_sum = {t: 0.0 for t in techniques}
    weight = {t: 0.0 for t in techniques}
    for lo in range(0, n, batch_size):
        b = split.batch(np.arange(lo, min(n, lo + batch_size)))
        mask = b.rationales.any(-1)
        with ad.no_grad():
            out = model.forward(b.ids)
            ce_sum += ad.cross_entropy(out.logits, b.labels, reduction="none").data.sum()
            for t in techniques:
                if t == "ixg":
                    continue
                scores = attention_scores(out, -1) if t == "att" else rollout_scores(out, -1)
                loss = explanation_loss_batch(scores, batch_targets(b.rationales, t), token_mask(out), t).item()
                expl_sum[t] += loss * mask.sum()
                weight[t] += mask.sum()
        if "ixg" in techniques:
            scores, out = ixg_scores(model, b.ids, b.labels)
            loss = explanation_loss_batch(scores, batch_targets(b.rationales, "ixg"), token_mask(out), "ixg").item()
            expl_sum["ixg"] += loss * mask.sum()
            weight["ixg"] += mask.sum()
    expl = {t: expl_sum[t] / weight[t] if weight[t] else float("nan") for t in techniques}
    return ce_sum / n, expl


def train(model: Encoder, train_split: EncodedSplit, val_split: EncodedSplit, config: TrainConfig,
          seed: int, val_techniques: Sequence[str] = TECHNIQUES) -> TrainResult:
    """Train ``model`` in place and return per-epoch curves and parameter snapshots.

    ``seed`` drives batch order only; initialisation comes from the model config.
    The stored ``states[e]`` is the parameter snapshot after epoch ``e``.
    """
    config.validate()
    cfg = config
    if cfg.objective != "baseline" and not train_split.rationales.any():
        raise ValueError(f"objective {cfg.objective!r} needs rationale annotations")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    dual = DualState(0.0, cfg.b_train or 0.0, cfg.b_val or 0.0, cfg.dual_lr)
    n = len(train_split)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    records: list[EpochRecord] = []
    states: list[dict[str, np.ndarray]] = []
    mu_trace: list[float] = []
    guided = cfg.technique if cfg.objective != "baseline" else None

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        ce_acc = expl_acc = tot_acc = 0.0
        for lo in range(0, n, cfg.batch_size):
            b = train_split.batch(order[lo: lo + cfg.batch_size])
            if guided is None:
                out = model.forward(b.ids)
                expl = None
            else:
                scores, out = guided_scores(model, b, guided)
                expl = explanation_loss_batch(scores, batch_targets(b.rationales, guided), token_mask(out), guided)
            ce = ad.cross_entropy(out.logits, b.labels)
            if cfg.objective == "baseline":
                objective = ce
            elif cfg.objective == "joint":
                objective = joint_loss(ce, expl, cfg.lam)
            elif cfg.objective == "expl-only":
                objective = expl
            else:
                objective = ce + dual.mu * expl
            grads = ad.gradient(objective, params)
            opt.step([g.data for g in grads], linear_schedule(step, total_steps, cfg.lr, cfg.warmup_fraction))
            step += 1
            expl_v = expl.item() if expl is not None else float("nan")
            weight = len(b)
            ce_acc += ce.item() * weight
            expl_acc += expl_v * weight
            tot_acc += _total(cfg, ce.item(), expl_v, dual.mu) * weight
            if cfg.objective == "constrained":
                dual = dual_update(dual, expl_v)
                mu_trace.append(dual.mu)

        records.append(EpochRecord(epoch, "train", ce_acc / n, expl_acc / n, tot_acc / n, dual.mu))
        val_ce, val_expl = evaluate_losses(model, val_split, cfg.eval_batch_size, val_techniques)
        g_expl = val_expl.get(guided, float("nan")) if guided else float("nan")
        records.append(EpochRecord(epoch, "val", val_ce, g_expl, _total(cfg, val_ce, g_expl, dual.mu), dual.mu, val_expl))
        states.append(model.state())
        log.debug("epoch %d train ce %.4f expl %.4f | val ce %.4f expl %.4f mu %.3f",
                  epoch, ce_acc / n, expl_acc / n, val_ce, g_expl, dual.mu)
    return TrainResult(config, records, states, mu_trace)


# -- bounds and checkpoint selection -------------------------------------------------------

def set_bounds(min_train_losses: Sequence[float], min_val_losses: Sequence[float],
               train_factor: float = 1.5) -> tuple[float, float]:
    """(b_train, b_val) from per-seed minimum explanation losses of expl-only runs."""
    if len(min_train_losses) < 1 or len(min_val_losses) < 1:
        raise ValueError("set_bounds needs at least one seed")
    return train_factor * float(np.mean(min_train_losses)), float(np.mean(min_val_losses))


def bounds_from_results(results: Sequence[TrainResult], train_factor: float = 1.5) -> tuple[float, float]:
    return set_bounds([r.curve("train", "expl").min() for r in results],
                      [r.curve("val", "expl").min() for r in results], train_factor)


@dataclass
class SelectionRule:
    kind: str = "min-avg-val-loss"
    slack: float = 1.1
    b_val: float | None = None

    def __post_init__(self):
        if self.kind not in ("min-avg-val-loss", "min-val-ce-subject-to-bound"):
            raise ValueError(f"unknown selection rule {self.kind!r}")
        if self.slack <= 1.0:
            raise ValueError("slack factor must exceed 1")


def select_checkpoint(val_total: Sequence[float], rule: SelectionRule,
                      val_ce: Sequence[float] | None = None, val_expl: Sequence[float] | None = None) -> int:
    """Epoch index chosen by ``rule``; raises :class:`BoundNeverMet` if no epoch qualifies."""
    if len(val_total) == 0 and not val_ce:
        raise ValueError("no epochs recorded")
    if rule.kind == "min-avg-val-loss":
        return int(np.argmin(np.asarray(val_total, dtype=float)))
    if rule.b_val is None or val_ce is None or val_expl is None:
        raise ValueError("constrained selection needs b_val, val_ce and val_expl")
    ce = np.asarray(val_ce, dtype=float)
    expl = np.asarray(val_expl, dtype=float)
    ok = expl < rule.slack * rule.b_val
    if not ok.any():
        raise BoundNeverMet(
            f"validation explanation loss never below {rule.slack} x b_val = {rule.slack * rule.b_val:.4f} "
            f"(best {np.nanmin(expl):.4f})"
        )
    candidates = np.where(ok)[0]
    return int(candidates[np.argmin(ce[candidates])])


def select_result(result: TrainResult) -> int:
    cfg = result.config
    if cfg.objective == "constrained":
        rule = SelectionRule("min-val-ce-subject-to-bound", cfg.slack, cfg.b_val)
        return select_checkpoint(result.curve("val", "total"), rule,
                                 result.curve("val", "ce"), result.curve("val", "expl"))
    return select_checkpoint(result.curve("val", "total"), SelectionRule())


def write_curves(path: str | Path, result: TrainResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "ce", "expl", "total", "mu"])
        for r in result.records:
            w.writerow([r.epoch, r.split, _fmt(r.ce), _fmt(r.expl), _fmt(r.total), _fmt(r.mu)])


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))
