"""Replace functions: turn (instance, keep-mask) into model inputs and predictions."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    MASK_ID,
    BudgetMeter,
    DegenerateMask,
    ExplanationMask,
    Instance,
    InvalidInput,
    charge,
)


class ReplaceKind(str, enum.Enum):
    ATTENTION = "attention"
    MASK = "mask"
    SLICE = "slice"
    ZERO = "zero"
    MARGINALIZE = "marginalize"


@dataclass(frozen=True)
class ReplaceFn:
    kind: ReplaceKind = ReplaceKind.ATTENTION
    marginalize_samples: int = 10

    def __post_init__(self):
        object.__setattr__(self, "kind", ReplaceKind(self.kind))
        if self.marginalize_samples < 1:
            raise InvalidInput("marginalize_samples must be >= 1")

    @property
    def passes_per_mask(self) -> int:
        return self.marginalize_samples if self.kind is ReplaceKind.MARGINALIZE else 1

    def __str__(self) -> str:
        return self.kind.value


ATTENTION = ReplaceFn(ReplaceKind.ATTENTION)


class Imputer:
    """Unigram or bigram token sampler with add-one smoothing.

    Bigram contexts that never occurred in training (and MASK contexts) back off
    to the unigram distribution.
    """

    def __init__(self, vocab: Sequence[int], order: int, unigram_counts: np.ndarray,
                 bigram_counts: np.ndarray | None = None, vocab_size: int | None = None):
        if order not in (1, 2):
            raise InvalidInput("imputer order must be 1 or 2")
        self.vocab = np.asarray(vocab, dtype=np.int64)
        self.order = order
        self.unigram_counts = np.asarray(unigram_counts, dtype=float)
        self.bigram_counts = None if bigram_counts is None else np.asarray(bigram_counts, dtype=float)
        self.vocab_size = int(vocab_size if vocab_size is not None else self.vocab.max() + 1)
        n = len(self.vocab)
        self.unigram = (self.unigram_counts + 1.0) / (self.unigram_counts.sum() + n)
        # Row per context token id (full id space); unseen contexts use the unigram row.
        table = np.tile(self.unigram, (self.vocab_size, 1))
        if order == 2:
            ctx_totals = self.bigram_counts.sum(axis=1)
            seen = ctx_totals > 0
            table[self.vocab[seen]] = (self.bigram_counts[seen] + 1.0) / (ctx_totals[seen, None] + n)
        table[MASK_ID] = self.unigram
        self.table = table
        self._cdf = np.cumsum(table, axis=1)
        self._cdf[:, -1] = 1.0

    def distribution(self, context: int | None = None) -> np.ndarray:
        """Probabilities over ``self.vocab`` given the left neighbour (None = unigram)."""
        if context is None or self.order == 1 or not 0 <= int(context) < self.vocab_size:
            return self.unigram
        return self.table[int(context)]

    def sample(self, contexts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One draw per entry of ``contexts`` (token ids; MASK_ID means no context)."""
        contexts = np.asarray(contexts, dtype=np.int64)
        if self.order == 1:
            contexts = np.full_like(contexts, MASK_ID)
        # ids the imputer never saw back off to the unigram row
        contexts = np.where((contexts >= 0) & (contexts < self.vocab_size), contexts, MASK_ID)
        u = rng.random(contexts.shape)
        idx = (self._cdf[contexts] < u[..., None]).sum(axis=-1)
        return self.vocab[np.minimum(idx, len(self.vocab) - 1)]

    def to_json(self) -> dict:
        return {
            "order": self.order,
            "vocab": self.vocab.tolist(),
            "vocab_size": self.vocab_size,
            "unigram_counts": self.unigram_counts.tolist(),
            "bigram_counts": None if self.bigram_counts is None else self.bigram_counts.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Imputer":
        return cls(d["vocab"], d["order"], d["unigram_counts"], d.get("bigram_counts"), d.get("vocab_size"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Imputer":
        return cls.from_json(json.loads(Path(path).read_text()))


def fit_imputer(corpus: Iterable, order: int = 2, vocab: Sequence[int] | None = None) -> Imputer:
    """Count unigrams (and left-context bigrams) over a corpus of instances or token lists.

    ``vocab`` defaults to every id except MASK up to the corpus vocabulary size.
    """
    if order not in (1, 2):
        raise InvalidInput("imputer order must be 1 or 2")
    seqs = [np.asarray(d.tokens if isinstance(d, Instance) else d, dtype=np.int64) for d in corpus]
    if not seqs or all(len(s) == 0 for s in seqs):
        raise InvalidInput("cannot fit an imputer on an empty corpus")
    vocab_size = getattr(corpus, "vocab_size", None) or int(max(s.max() for s in seqs if len(s)) + 1)
    if vocab is None:
        vocab = [t for t in range(vocab_size) if t != MASK_ID]
    vocab = np.asarray(vocab, dtype=np.int64)
    vocab_size = max(vocab_size, int(vocab.max()) + 1)
    col = np.full(vocab_size, -1)
    col[vocab] = np.arange(len(vocab))
    uni = np.zeros(len(vocab))
    bi = np.zeros((len(vocab), len(vocab))) if order == 2 else None
    for s in seqs:
        c = col[s]
        np.add.at(uni, c[c >= 0], 1.0)
        if order == 2 and len(s) > 1:
            prev, nxt = c[:-1], c[1:]
            ok = (prev >= 0) & (nxt >= 0)
            np.add.at(bi, (prev[ok], nxt[ok]), 1.0)
    return Imputer(vocab, order, uni, bi, vocab_size)


def _impute(instance: Instance, hidden: np.ndarray, imputer: Imputer, samples: int,
            rng: np.random.Generator) -> np.ndarray:
    """MASK every hidden position, then fill them one at a time in a fresh random order per sample."""
    tokens = np.tile(np.asarray(instance.tokens, dtype=np.int64), (samples, 1))
    pos = np.flatnonzero(hidden)
    tokens[:, pos] = MASK_ID
    if len(pos) == 0:
        return tokens
    order = np.argsort(rng.random((samples, len(pos))), axis=1)
    rows = np.arange(samples)
    for step in range(len(pos)):
        p = pos[order[:, step]]
        left = np.where(p > 0, tokens[rows, np.maximum(p - 1, 0)], MASK_ID)
        tokens[rows, p] = imputer.sample(left, rng)
    return tokens


def build_inputs(fn: ReplaceFn, instance: Instance, keep, rng: np.random.Generator | None = None,
                 imputer: Imputer | None = None, samples: int | None = None):
    """Model input rows ``(tokens, weights, scales)`` for one mask.

    Returns one row, or ``samples`` rows for Marginalize.
    """
    keep = np.asarray(keep, dtype=bool)
    tokens = np.asarray(instance.tokens, dtype=np.int64)
    if keep.shape != tokens.shape:
        raise InvalidInput("mask length does not match instance")
    if np.any(np.asarray(instance.protected) & ~keep):
        raise InvalidInput("mask hides a protected position")
    ones = np.ones(len(tokens))
    kind = fn.kind
    if kind is ReplaceKind.ATTENTION:
        if not keep.any():
            raise DegenerateMask("attention mask keeps no tokens")
        return [(tokens, keep.astype(float), ones)]
    if kind is ReplaceKind.MASK:
        return [(np.where(keep, tokens, MASK_ID), ones, ones)]
    if kind is ReplaceKind.SLICE:
        if not keep.any():
            raise DegenerateMask("slice-out leaves an empty sequence")
        kept = tokens[keep]
        return [(kept, np.ones(len(kept)), np.ones(len(kept)))]
    if kind is ReplaceKind.ZERO:
        return [(tokens, ones, keep.astype(float))]
    if imputer is None:
        raise InvalidInput("marginalize needs a fitted imputer")
    if rng is None:
        raise InvalidInput("marginalize needs a random generator")
    n = samples if samples is not None else fn.marginalize_samples
    imputed = _impute(instance, ~keep, imputer, n, rng)
    return [(row, ones, ones) for row in imputed]


def apply_batch(fn: ReplaceFn, model, instance: Instance, keeps, rng: np.random.Generator | None = None,
                imputer: Imputer | None = None, meter: BudgetMeter | None = None) -> np.ndarray:
    """Class probabilities for each row of ``keeps`` (n x L) under ``fn``; charges the meter.

    ``rng`` may be a list with one generator per mask, which makes Marginalize
    results independent of how masks are batched.
    """
    from .toymodel import pad_batch

    keeps = np.atleast_2d(np.asarray(keeps, dtype=bool))
    n = keeps.shape[0]
    charge(meter, n * fn.passes_per_mask)
    if fn.kind is ReplaceKind.ATTENTION:
        if not keeps.any(axis=1).all():
            raise DegenerateMask("attention mask keeps no tokens")
        tokens = np.broadcast_to(np.asarray(instance.tokens, dtype=np.int64), keeps.shape)
        return model.predict_inputs(tokens, keeps.astype(float), np.ones(keeps.shape))
    rows = []
    per_mask = isinstance(rng, (list, tuple))
    for i, keep in enumerate(keeps):
        rows.extend(build_inputs(fn, instance, keep, rng[i] if per_mask else rng, imputer))
    probs = model.predict_inputs(*pad_batch(rows))
    if fn.kind is ReplaceKind.MARGINALIZE:
        # Monte Carlo marginal: mean of p(y | x~) over imputations (log taken for argmax only).
        probs = probs.reshape(n, fn.marginalize_samples, -1).mean(axis=1)
        probs = probs / probs.sum(axis=1, keepdims=True)
    return probs


def apply(fn: ReplaceFn, model, instance: Instance, mask: ExplanationMask | Sequence[bool],
          rng: np.random.Generator | None = None, imputer: Imputer | None = None,
          meter: BudgetMeter | None = None) -> np.ndarray:
    keep = mask.array if isinstance(mask, ExplanationMask) else np.asarray(mask, dtype=bool)
    return apply_batch(fn, model, instance, keep[None], rng, imputer, meter)[0]


def marginal_log_scores(probs: np.ndarray) -> np.ndarray:
    """Log of Monte Carlo mean probabilities; argmax of this is the Marginalize prediction."""
    return np.log(np.clip(probs, 1e-300, None))
