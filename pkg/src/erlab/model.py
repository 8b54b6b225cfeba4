"""Small post-LN transformer encoder with a [CLS]-pooled classification head."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_ID, CLS_ID, MASK_ID, UNK_ID = 0, 1, 2, 3
CHECKPOINT_FORMAT = "erlab-checkpoint"
CHECKPOINT_VERSION = 1
NEG_INF = -1e9


@dataclass
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = 256
    max_seq_len: int = 32
    num_classes: int = 2
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_layers", "num_heads", "d_model", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must leave room for [CLS] plus one token")
        if self.num_classes != 2:
            raise ValueError("only binary classification is supported")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class ModelOutput:
    logits: Tensor
    attentions: list[Tensor]      # per layer, (B, H, T, T)
    hiddens: list[Tensor]         # per layer, (B, T, D)
    embedded_input: Tensor        # (B, T, D) word embeddings
    mask: np.ndarray = field(repr=False)  # (B, T) 1 for real tokens incl. [CLS]


class Encoder:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        config.validate()
        self.config = config
        self.params = params if params is not None else _init_params(config)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def copy(self) -> "Encoder":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return Encoder(ModelConfig(**asdict(self.config)), params)

    # -- forward --------------------------------------------------------------
    def forward(self, token_ids, inputs_embeds: Tensor | None = None) -> ModelOutput:
        """Run a padded batch ``(B, T)`` (or a single sequence) through the encoder.

        ``token_ids`` must already start with [CLS]. PAD positions are masked
        out of every attention row. ``inputs_embeds`` replaces the word
        embedding lookup, which is how attributions get a gradient leaf.
        """
        ids = np.asarray(token_ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        _check_ids(ids, self.config)
        cfg = self.config
        p = self.params
        B, T = ids.shape
        mask = (ids != PAD_ID).astype(ad.DTYPE)

        x = inputs_embeds if inputs_embeds is not None else ad.embedding(p["tok_emb"], ids)
        h = ad.layernorm(x + p["pos_emb"][:T], p["emb_ln_g"], p["emb_ln_b"])
        key_bias = ((1.0 - mask) * NEG_INF)[:, None, None, :]

        attentions, hiddens = [], []
        H, dh = cfg.num_heads, cfg.head_dim
        for l in range(cfg.num_layers):
            pre = f"l{l}."
            q = _heads(h @ p[pre + "wq"] + p[pre + "bq"], H, dh)
            k = _heads(h @ p[pre + "wk"] + p[pre + "bk"], H, dh)
            v = _heads(h @ p[pre + "wv"] + p[pre + "bv"], H, dh)
            scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)) + key_bias
            att = ad.softmax(scores, -1)
            ctx = (att @ v).swapaxes(1, 2).reshape(B, T, cfg.d_model)
            h = ad.layernorm(h + ctx @ p[pre + "wo"] + p[pre + "bo"], p[pre + "ln1_g"], p[pre + "ln1_b"])
            ff = ad.relu(h @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
            h = ad.layernorm(h + ff, p[pre + "ln2_g"], p[pre + "ln2_b"])
            attentions.append(att)
            hiddens.append(h)

        cls = h[:, 0, :]
        pooled = ad.tanh(cls @ p["head_w"] + p["head_b"])
        logits = pooled @ p["out_w"] + p["out_b"]
        return ModelOutput(logits, attentions, hiddens, x, mask)

    __call__ = forward

    def predict_proba(self, token_ids) -> np.ndarray:
        with ad.no_grad():
            out = self.forward(token_ids)
        return softmax_np(out.logits.data)

    def predict(self, token_ids) -> np.ndarray:
        return self.predict_proba(token_ids).argmax(-1)

    # -- persistence ------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "params": {
                k: {"shape": list(v.shape), "values": v.data.reshape(-1).tolist()}
                for k, v in self.params.items()
            },
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "Encoder":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
        config = ModelConfig(**payload["config"])
        params = {
            k: Tensor(np.array(v["values"], dtype=ad.DTYPE).reshape(v["shape"]), requires_grad=True, name=k)
            for k, v in payload["params"].items()
        }
        return cls(config, params)


def init_model(config: ModelConfig) -> Encoder:
    return Encoder(config)


def forward(model: Encoder, token_ids, inputs_embeds: Tensor | None = None) -> ModelOutput:
    return model.forward(token_ids, inputs_embeds)


def predict_proba(model: Encoder, token_ids) -> np.ndarray:
    return model.predict_proba(token_ids)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _heads(x: Tensor, H: int, dh: int) -> Tensor:
    B, T, _ = x.shape
    return x.reshape(B, T, H, dh).swapaxes(1, 2)


def _check_ids(ids: np.ndarray, cfg: ModelConfig) -> None:
    if ids.shape[-1] == 0:
        raise ValueError("empty sequence")
    if ids.shape[-1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_seq_len={cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")


def _init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    D, F = cfg.d_model, cfg.d_ff

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    raw: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0.0, 1.0, size=(cfg.vocab_size, D)),
        "pos_emb": rng.normal(0.0, 0.1, size=(cfg.max_seq_len, D)),
        "emb_ln_g": np.ones(D),
        "emb_ln_b": np.zeros(D),
    }
    raw["tok_emb"][PAD_ID] = 0.0
    for l in range(cfg.num_layers):
        pre = f"l{l}."
        for name in ("q", "k", "v", "o"):
            raw[pre + "w" + name] = dense(D, D)
            raw[pre + "b" + name] = np.zeros(D)
        raw[pre + "ln1_g"], raw[pre + "ln1_b"] = np.ones(D), np.zeros(D)
        raw[pre + "w1"], raw[pre + "b1"] = dense(D, F), np.zeros(F)
        raw[pre + "w2"], raw[pre + "b2"] = dense(F, D), np.zeros(D)
        raw[pre + "ln2_g"], raw[pre + "ln2_b"] = np.ones(D), np.zeros(D)
    raw["head_w"], raw["head_b"] = dense(D, D), np.zeros(D)
    raw["out_w"], raw["out_b"] = dense(D, cfg.num_classes), np.zeros(cfg.num_classes)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
