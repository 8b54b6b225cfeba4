"""Rationale-annotated examples: JSONL IO, vocabulary and a synthetic generator.

Synthetic examples mix filler words with class-consistent cue words (the
human rationale) and a shortcut token whose presence correlates with the
label in-domain but not out-of-domain.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import CLS_ID, MASK_ID, PAD_ID, UNK_ID

RESERVED = {"[PAD]": PAD_ID, "[CLS]": CLS_ID, "[MASK]": MASK_ID, "[UNK]": UNK_ID}
SPLITS = ("train", "dev", "test_id", "test_ood")


@dataclass
class RationaleExample:
    tokens: list[str]
    label: int
    rationale: list[int]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if len(self.rationale) != len(self.tokens):
            raise ValueError(
                f"rationale length {len(self.rationale)} does not match token count {len(self.tokens)}"
            )
        if any(r not in (0, 1) for r in self.rationale):
            raise ValueError("rationale entries must be 0 or 1")

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "label": int(self.label), "rationale": [int(r) for r in self.rationale]}


@dataclass
class SyntheticSpec:
    n_filler: int = 600
    n_filler_ood: int = 50
    n_pos_cues: int = 18
    n_neg_cues: int = 18
    min_len: int = 8
    max_len: int = 24
    min_cues: int = 1
    max_cues: int = 3
    shortcut_token: str = "sc"
    rho_id: float = 0.95
    rho_ood: float = 0.5
    ood_filler_mix: float = 0.5
    n_train: int = 4000
    n_dev: int = 500
    n_test_id: int = 500
    n_test_ood: int = 500
    seed: int = 0

    def validate(self, max_seq_len: int | None = None) -> None:
        for name in ("rho_id", "rho_ood", "ood_filler_mix"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} must lie in [0, 1]")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("invalid sequence length range")
        if self.min_cues < 1 or self.max_cues < self.min_cues:
            raise ValueError("invalid cue count range")
        # cues plus the shortcut slot must fit into the shortest sequence
        if self.max_cues + 1 > self.min_len:
            raise ValueError(f"max_cues={self.max_cues} plus shortcut does not fit min_len={self.min_len}")
        if min(self.n_filler, self.n_pos_cues, self.n_neg_cues) < 1:
            raise ValueError("vocabulary sizes must be positive")
        if max_seq_len is not None and self.max_len + 1 > max_seq_len:
            raise ValueError(f"max_len={self.max_len} plus [CLS] exceeds max_seq_len={max_seq_len}")


def _vocab_words(spec: SyntheticSpec) -> dict[str, list[str]]:
    return {
        "filler": [f"w{i}" for i in range(spec.n_filler)],
        "filler_ood": [f"v{i}" for i in range(spec.n_filler_ood)],
        "pos": [f"pos{i}" for i in range(spec.n_pos_cues)],
        "neg": [f"neg{i}" for i in range(spec.n_neg_cues)],
    }


def _make_split(spec: SyntheticSpec, n: int, rho: float, ood: bool, rng: np.random.Generator) -> list[RationaleExample]:
    words = _vocab_words(spec)
    labels = np.array([i % 2 for i in range(n)])
    rng.shuffle(labels)
    examples = []
    for y in labels:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        n_cues = int(rng.integers(spec.min_cues, spec.max_cues + 1))
        present = rng.random() < (rho if y == 1 else 1.0 - rho)
        fillers = []
        for _ in range(length):
            if ood and spec.n_filler_ood and rng.random() < spec.ood_filler_mix:
                fillers.append(words["filler_ood"][rng.integers(len(words["filler_ood"]))])
            else:
                fillers.append(words["filler"][rng.integers(len(words["filler"]))])
        tokens = list(fillers)
        rationale = [0] * length
        slots = rng.permutation(length)
        cue_pool = words["pos"] if y == 1 else words["neg"]
        for pos in slots[:n_cues]:
            tokens[pos] = cue_pool[rng.integers(len(cue_pool))]
            rationale[pos] = 1
        if present:
            tokens[slots[n_cues]] = spec.shortcut_token
        examples.append(RationaleExample(tokens, int(y), rationale))
    return examples


def generate_synthetic(spec: SyntheticSpec) -> dict[str, list[RationaleExample]]:
    spec.validate()
    # one child stream per split, so resizing a split does not reshuffle the others
    streams = np.random.SeedSequence(spec.seed).spawn(len(SPLITS))
    rngs = [np.random.default_rng(s) for s in streams]
    return {
        "train": _make_split(spec, spec.n_train, spec.rho_id, False, rngs[0]),
        "dev": _make_split(spec, spec.n_dev, spec.rho_id, False, rngs[1]),
        "test_id": _make_split(spec, spec.n_test_id, spec.rho_id, False, rngs[2]),
        "test_ood": _make_split(spec, spec.n_test_ood, spec.rho_ood, True, rngs[3]),
    }


def shortcut_agreement(examples: Sequence[RationaleExample], shortcut_token: str = "sc") -> float:
    """Fraction of examples where shortcut presence equals (label == 1)."""
    if not examples:
        return float("nan")
    hits = sum((shortcut_token in ex.tokens) == (ex.label == 1) for ex in examples)
    return hits / len(examples)


def audit_splits(splits: dict[str, list[RationaleExample]], shortcut_token: str = "sc") -> dict[str, dict]:
    """Per-split distributional summary: label balance, shortcut agreement, vocabulary."""
    train_vocab = {t for ex in splits.get("train", []) for t in ex.tokens}
    out = {}
    for name, exs in splits.items():
        toks = [t for ex in exs for t in ex.tokens]
        out[name] = {
            "n": len(exs),
            "positive_rate": float(np.mean([ex.label for ex in exs])) if exs else float("nan"),
            "shortcut_agreement": shortcut_agreement(exs, shortcut_token),
            "mean_length": float(np.mean([len(ex.tokens) for ex in exs])) if exs else float("nan"),
            "rationale_rate": float(np.mean([r for ex in exs for r in ex.rationale])) if exs else float("nan"),
            "unseen_token_rate": float(np.mean([t not in train_vocab for t in toks])) if toks else float("nan"),
        }
    return out


# -- IO ----------------------------------------------------------------------------

def write_jsonl(path: str | Path, examples: Iterable[RationaleExample]) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json()) + "\n")


def read_jsonl(path: str | Path) -> list[RationaleExample]:
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                examples.append(RationaleExample(list(rec["tokens"]), rec["label"], list(rec["rationale"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: invalid record: {exc}") from None
    return examples


def save_splits(directory: str | Path, splits: dict[str, list[RationaleExample]], spec: SyntheticSpec | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, exs in splits.items():
        write_jsonl(directory / f"{name}.jsonl", exs)
    manifest = {"splits": {name: len(exs) for name, exs in splits.items()}}
    if spec is not None:
        manifest["generator"] = "synthetic"
        manifest["spec"] = asdict(spec)
        manifest["seed"] = spec.seed
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(path: str | Path) -> dict[str, list[RationaleExample]]:
    """Load splits from a directory of ``<split>.jsonl`` files or a single JSONL file."""
    path = Path(path)
    if path.is_dir():
        splits = {}
        for name in SPLITS:
            f = path / f"{name}.jsonl"
            if f.exists():
                splits[name] = read_jsonl(f)
        if not splits:
            raise FileNotFoundError(f"no split files found in {path}")
        return splits
    if not path.exists():
        raise FileNotFoundError(path)
    return {path.stem: read_jsonl(path)}


# -- vocabulary and encoding ---------------------------------------------------------

def build_vocab(splits: dict[str, list[RationaleExample]] | list[RationaleExample]) -> dict[str, int]:
    train = splits["train"] if isinstance(splits, dict) else splits
    if not train:
        raise ValueError("build_vocab needs a nonempty train split")
    vocab = dict(RESERVED)
    for ex in train:
        for tok in ex.tokens:
            if tok not in vocab:
                vocab[tok] = len(vocab)
    return vocab


def tokenize(text: str) -> list[str]:
    return text.split()


def encode(tokens: Sequence[str], vocab: dict[str, int]) -> list[int]:
    return [CLS_ID] + [vocab.get(t, UNK_ID) for t in tokens]


@dataclass
class EncodedSplit:
    """Padded id matrix plus labels and rationale masks aligned to non-[CLS] positions."""

    ids: np.ndarray          # (N, T) with [CLS] at column 0
    labels: np.ndarray       # (N,)
    rationales: np.ndarray   # (N, T-1) zero on PAD
    lengths: np.ndarray      # (N,) real token counts (excluding [CLS])
    examples: list[RationaleExample] = field(repr=False, default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx) -> "EncodedSplit":
        idx = np.asarray(idx)
        T = int(self.lengths[idx].max()) + 1 if len(idx) else 1
        return EncodedSplit(self.ids[idx, :T], self.labels[idx], self.rationales[idx, : T - 1], self.lengths[idx])


def encode_split(examples: Sequence[RationaleExample], vocab: dict[str, int], max_len: int | None = None) -> EncodedSplit:
    lengths = np.array([len(ex.tokens) for ex in examples], dtype=int)
    T = (max_len if max_len is not None else (int(lengths.max()) if len(lengths) else 0)) + 1
    ids = np.full((len(examples), T), PAD_ID, dtype=np.int64)
    rats = np.zeros((len(examples), T - 1))
    for i, ex in enumerate(examples):
        enc = encode(ex.tokens, vocab)
        ids[i, : len(enc)] = enc
        rats[i, : len(ex.tokens)] = ex.rationale
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return EncodedSplit(ids, labels, rats, lengths, list(examples))
