"""Differentiable per-token attributions: top-layer attention, rollout, InputXGradient.

The batched ``*_scores`` functions return ``(B, T-1)`` Tensors over the
non-[CLS] positions, with PAD positions set to zero, and stay inside the
autodiff graph so they can feed an explanation loss. The single-example
functions wrap them into :class:`AttributionMap` records for analysis.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Encoder, ModelOutput

TECHNIQUES = ("att", "attr", "ixg")


@dataclass
class AttributionMap:
    technique: str
    scores: np.ndarray
    layer: int | None = None
    signed: bool = False

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise ValueError(f"unknown technique {self.technique!r}")
        self.scores = np.asarray(self.scores, dtype=float)


def _check_layer(output: ModelOutput, layer: int) -> None:
    if not 0 <= layer < len(output.attentions):
        raise ValueError(f"layer {layer} out of range for {len(output.attentions)} layers")


def token_mask(output: ModelOutput) -> np.ndarray:
    """(B, T-1) mask of real tokens after [CLS]."""
    return output.mask[:, 1:]


def _renormalise(row: Tensor, mask: np.ndarray) -> Tensor:
    """Drop masked entries and rescale to sum 1; an all-zero row becomes uniform."""
    row = row * mask
    total = row.data.sum(-1, keepdims=True)
    empty = (total == 0.0).astype(ad.DTYPE)
    counts = np.maximum(mask.sum(-1, keepdims=True), 1.0)
    fallback = empty * mask / counts
    return row * ad.reciprocal(row.sum(-1, keepdims=True)) + fallback


def head_average(att: Tensor) -> Tensor:
    return att.mean(axis=1)


def attention_scores(output: ModelOutput, layer: int = -1) -> Tensor:
    layer = layer % len(output.attentions)
    _check_layer(output, layer)
    avg = head_average(output.attentions[layer])
    return _renormalise(avg[:, 0, 1:], token_mask(output))


def residual_attention(att: Tensor) -> Tensor:
    """0.5 * head-averaged attention + 0.5 * I."""
    avg = head_average(att)
    eye = np.eye(avg.shape[-1])
    return avg * 0.5 + 0.5 * eye


def rollout_matrices(output: ModelOutput, upto_layer: int = -1) -> list[Tensor]:
    """Cumulative rollout products after each layer up to ``upto_layer`` (inclusive)."""
    upto_layer = upto_layer % len(output.attentions)
    _check_layer(output, upto_layer)
    joint = None
    out = []
    for l in range(upto_layer + 1):
        mixed = residual_attention(output.attentions[l])
        joint = mixed if joint is None else mixed @ joint
        out.append(joint)
    return out


def rollout_scores(output: ModelOutput, upto_layer: int = -1) -> Tensor:
    joint = rollout_matrices(output, upto_layer)[-1]
    return _renormalise(joint[:, 0, 1:], token_mask(output))


def ixg_from_gradients(embeds: Tensor, grads: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Raw signed per-token scores and their |.|, L2-normalised form."""
    raw = (embeds * grads).sum(-1)[:, 1:] * mask
    return raw, ad.l2_normalize(ad.abs_(raw), -1)


def target_logit(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return (logits * onehot).sum()


def ixg_scores(model: Encoder, token_ids: np.ndarray, labels, create_graph: bool = False,
               output: ModelOutput | None = None) -> tuple[Tensor, ModelOutput]:
    """Normalised InputXGradient scores for a batch.

    With ``create_graph`` the gradient w.r.t. the word embeddings is recorded,
    so the scores are differentiable in the model parameters (training path).
    Otherwise the embeddings are a fresh leaf and the result is detached.
    Pass ``labels=None`` to target each example's predicted class.
    """
    ids = np.atleast_2d(np.asarray(token_ids))
    if create_graph:
        if output is None:
            output = model.forward(ids)
        embeds = output.embedded_input
    else:
        embeds = Tensor(model.params["tok_emb"].data[ids], requires_grad=True)
        output = model.forward(ids, inputs_embeds=embeds)
    if labels is None:
        labels = output.logits.data.argmax(-1)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= output.logits.shape[-1]:
        raise ValueError("target label out of range")
    (g,) = ad.grad(target_logit(output.logits, labels), [embeds], create_graph=create_graph)
    _, scores = ixg_from_gradients(embeds, g, token_mask(output))
    return scores, output


# -- single-example wrappers ---------------------------------------------------

def _real_length(output: ModelOutput) -> int:
    return int(output.mask[0].sum()) - 1


def attention_attribution(output: ModelOutput, layer: int) -> AttributionMap:
    _check_layer(output, layer)
    n = _real_length(output)
    scores = attention_scores(output, layer).data[0, :n]
    return AttributionMap("att", scores, layer=layer)


def rollout_attribution(output: ModelOutput, upto_layer: int) -> AttributionMap:
    _check_layer(output, upto_layer)
    n = _real_length(output)
    scores = rollout_scores(output, upto_layer).data[0, :n]
    return AttributionMap("attr", scores, layer=upto_layer)


def input_x_gradient(model: Encoder, token_ids, target_label: int | None) -> AttributionMap:
    labels = None if target_label is None else [target_label]
    scores, output = ixg_scores(model, token_ids, labels)
    n = _real_length(output)
    return AttributionMap("ixg", scores.data[0, :n])


def input_x_gradient_fn(fn: Callable[[Tensor], Tensor], inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """InputXGradient of a scalar function of a ``(tokens, dims)`` input.

    Returns the raw signed per-token scores and the |.|, L2-normalised map.
    """
    x = Tensor(np.atleast_2d(np.asarray(inputs, dtype=float)), requires_grad=True)
    (g,) = ad.grad(fn(x), [x])
    raw = (x.data * g.data).sum(-1)
    mag = np.abs(raw)
    norm = np.sqrt((mag ** 2).sum())
    return raw, (mag / norm if norm > 0 else mag)


# -- batched analysis ------------------------------------------------------------

def compute_all(model: Encoder, ids: np.ndarray, labels=None) -> dict[tuple[str, int | None], np.ndarray]:
    """All analysis maps for a padded batch, keyed by (technique, layer).

    Att and AttR appear once per layer; IxG uses the predicted label unless
    ``labels`` is given. Arrays are ``(B, T-1)`` with zeros on PAD.
    """
    with ad.no_grad():
        output = model.forward(ids)
        maps: dict[tuple[str, int | None], np.ndarray] = {}
        L = len(output.attentions)
        for l in range(L):
            maps[("att", l)] = attention_scores(output, l).data
        for l, joint in enumerate(rollout_matrices(output)):
            maps[("attr", l)] = _renormalise(joint[:, 0, 1:], token_mask(output)).data
    scores, _ = ixg_scores(model, ids, labels)
    maps[("ixg", None)] = scores.data
    return maps


# -- rollout gradient recursion ---------------------------------------------------

def rollout_gradient_reference(
    model: Encoder,
    token_ids: np.ndarray,
    loss_on_rollout: Callable[[Tensor], Tensor],
    params: Sequence[Tensor] | None = None,
    include_recursion: bool = True,
) -> list[np.ndarray]:
    """Parameter gradients of ``loss_on_rollout(rollout scores)`` via the layer recursion.

    The rollout after layer l is ``a_l = R_l[0]`` with ``R_l = M_l @ R_{l-1}``
    and ``M_l = 0.5 * mean_h A_l + 0.5 * I``. Walking down from the top:

    * local term: dL/dM_l = G_l @ R_{l-1}^T, pushed to the parameters through
      the attention of layer l (which depends on h^{l-1} and, below it, on
      every lower layer);
    * recursion term: G_{l-1} = M_l^T @ G_l, carrying dL/da_{l-1} downward.

    With ``include_recursion=False`` the recursion term is dropped, which
    leaves only the top layer's local gradient.
    """
    params = list(params) if params is not None else model.parameters()
    ids = np.atleast_2d(np.asarray(token_ids))
    output = model.forward(ids)
    L = len(output.attentions)
    mask = token_mask(output)

    mixed = [residual_attention(a).data for a in output.attentions]
    joints = []
    for m in mixed:
        joints.append(m if not joints else m @ joints[-1])

    # dL/dR_L through the [CLS]-row selection, renormalisation and loss.
    top = Tensor(joints[-1], requires_grad=True)
    (g_top,) = ad.grad(loss_on_rollout(_renormalise(top[:, 0, 1:], mask)), [top])
    G = g_top.data

    cotangents: list[np.ndarray] = [np.zeros_like(a.data) for a in output.attentions]
    H = output.attentions[0].shape[1]
    for l in range(L - 1, -1, -1):
        prev = joints[l - 1] if l > 0 else None
        dM = G @ np.swapaxes(prev, -1, -2) if prev is not None else G
        # M_l = 0.5 * mean_h(A_l) + 0.5 I  ->  dL/dA_l[h] = 0.5 * dM / H
        cotangents[l] = np.repeat((0.5 * dM / H)[:, None], H, axis=1)
        if prev is None or not include_recursion:
            break
        G = np.swapaxes(mixed[l], -1, -2) @ G

    grads = ad.grad(output.attentions, params, grad_outputs=cotangents)
    return [g.data for g in grads]


# -- dump files ---------------------------------------------------------------------

def write_dump(path: str | Path, records: Iterable[dict]) -> int:
    """Write attribution records as JSON lines; returns the record count."""
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
    return n


def read_dump(path: str | Path) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            for key in ("example", "technique", "scores", "seed", "approach"):
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            out.append(rec)
    return out


def dump_records(maps: dict, lengths: Sequence[int], example_ids: Sequence[int], seed: int,
                 approach: str, split: str) -> list[dict]:
    records = []
    for (technique, layer), arr in sorted(maps.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])):
        for row, n, ex in zip(arr, lengths, example_ids):
            records.append({
                "example": int(ex),
                "split": split,
                "technique": technique,
                "layer": layer,
                "seed": int(seed),
                "approach": approach,
                "scores": [round(float(v), 12) for v in row[:n]],
            })
    return records
