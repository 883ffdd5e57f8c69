"""Bag-of-embeddings classifier with hand-written gradients, synthetic corpus, and training.

The pooled representation is a weighted mean of token embeddings,

    h = sum_i a_i * s_i * E[x_i] / sum_i a_i,

where ``a`` are attention-style mask weights in [0, 1] and ``s`` are embedding scales
(1 normally, 0 for zeroed-out positions). ``h`` goes through one tanh layer and a
softmax output layer.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    MASK_ID,
    BudgetMeter,
    Capability,
    DegenerateMask,
    Instance,
    InvalidInput,
    charge,
    sparsity_count,
    substream,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ToyClassifier:
    embeddings: np.ndarray  # V x D
    w_hidden: np.ndarray  # D x H
    b_hidden: np.ndarray  # H
    w_out: np.ndarray  # H x C
    b_out: np.ndarray  # C
    capabilities: frozenset = field(
        default=frozenset({Capability.PROBABILITIES, Capability.MASK_GRADIENTS,
                           Capability.EMBEDDING_GRADIENTS}))

    @classmethod
    def init(cls, vocab_size: int = 64, dim: int = 16, hidden: int = 16, num_classes: int = 3,
             rng: np.random.Generator | int = 0) -> "ToyClassifier":
        rng = np.random.default_rng(rng)
        return cls(
            embeddings=rng.normal(0.0, 1.0, (vocab_size, dim)),
            w_hidden=rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, hidden)),
            b_hidden=np.zeros(hidden),
            w_out=rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, num_classes)),
            b_out=np.zeros(num_classes),
        )

    @property
    def num_classes(self) -> int:
        return self.w_out.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {
            "embeddings": self.embeddings,
            "w_hidden": self.w_hidden,
            "b_hidden": self.b_hidden,
            "w_out": self.w_out,
            "b_out": self.b_out,
        }

    def copy(self) -> "ToyClassifier":
        return ToyClassifier(**{k: v.copy() for k, v in self.params().items()},
                             capabilities=self.capabilities)

    def without(self, *caps: Capability) -> "ToyClassifier":
        """Same parameters, reduced capability set (e.g. a probabilities-only handle)."""
        return ToyClassifier(**self.params(), capabilities=self.capabilities - set(caps))

    # ---- batched core -------------------------------------------------

    def _forward_embedded(self, X: np.ndarray, weights: np.ndarray):
        """X: (n, L, D) already-scaled embeddings; weights: (n, L)."""
        total = weights.sum(axis=1)
        if np.any(total <= 0):
            raise DegenerateMask("all mask weights are zero")
        # einsum rather than BLAS matmul: each row's bits must not depend on batch size,
        # so cached and re-evaluated masks compare exactly.
        h = np.einsum("nl,nld->nd", weights, X) / total[:, None]
        z = np.tanh(np.einsum("nd,dh->nh", h, self.w_hidden) + self.b_hidden)
        p = softmax(np.einsum("nh,hc->nc", z, self.w_out) + self.b_out)
        return p, (X, weights, total, h, z)

    def _embed(self, tokens: np.ndarray, scales: np.ndarray) -> np.ndarray:
        return self.embeddings[tokens] * scales[..., None]

    def predict_inputs(self, tokens, weights, scales) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        weights = np.asarray(weights, dtype=float)
        scales = np.asarray(scales, dtype=float)
        return self._forward_embedded(self._embed(tokens, scales), weights)[0]

    def _backward(self, p, cache, targets, of: str = "loss"):
        """Gradients of CE loss (or of the target probability) w.r.t. h, X and weights."""
        X, weights, total, h, z = cache
        n = p.shape[0]
        onehot = np.zeros_like(p)
        onehot[np.arange(n), targets] = 1.0
        if of == "loss":
            d_logits = p - onehot
        elif of == "prob":
            pt = p[np.arange(n), targets][:, None]
            d_logits = pt * (onehot - p)
        else:
            raise InvalidInput(f"unknown gradient target {of!r}")
        d_z = d_logits @ self.w_out.T
        d_u = d_z * (1.0 - z**2)
        d_h = d_u @ self.w_hidden.T
        # dh/da_i = (x_i - h) / sum(a); dh/dx_i = a_i / sum(a)
        d_weights = np.einsum("nd,nld->nl", d_h, X - h[:, None, :]) / total[:, None]
        d_X = d_h[:, None, :] * (weights / total[:, None])[..., None]
        return d_logits, d_u, d_h, d_X, d_weights

    # ---- single-instance API ------------------------------------------

    def forward(self, instance: Instance, mask_weights=None, meter: BudgetMeter | None = None,
                scales=None) -> np.ndarray:
        a, s = _weights_and_scales(instance, mask_weights, scales)
        charge(meter, 1)
        tokens = np.asarray(instance.tokens, dtype=np.int64)[None]
        return self.predict_inputs(tokens, a[None], s[None])[0]

    def forward_embedded(self, X: np.ndarray, mask_weights=None, meter: BudgetMeter | None = None):
        X = np.asarray(X, dtype=float)
        a = np.ones(X.shape[0]) if mask_weights is None else np.asarray(mask_weights, dtype=float)
        charge(meter, 1)
        return self._forward_embedded(X[None], a[None])[0][0]

    def backward_mask(self, instance: Instance, mask_weights, target_class: int,
                      meter: BudgetMeter | None = None, scales=None) -> np.ndarray:
        """d(cross-entropy of ``target_class``)/d(mask weights), length L."""
        return self.loss_and_mask_grad(instance, mask_weights, target_class, meter, scales)[1]

    def loss_and_mask_grad(self, instance: Instance, mask_weights, target_class: int,
                           meter: BudgetMeter | None = None, scales=None):
        """Cross-entropy loss and its mask-weight gradient; charges 1 forward + 1 backward."""
        a, s = _weights_and_scales(instance, mask_weights, scales)
        charge(meter, 1, 1)
        X = self._embed(np.asarray(instance.tokens)[None], s[None])
        p, cache = self._forward_embedded(X, a[None])
        grads = self._backward(p, cache, np.array([target_class]), "loss")
        return float(-np.log(p[0, target_class])), grads[4][0]

    def backward_embeddings(self, instance: Instance, mask_weights, target_class: int,
                            meter: BudgetMeter | None = None, of: str = "loss", X=None) -> np.ndarray:
        """Gradient w.r.t. the (L, D) input embedding rows.

        ``of="loss"`` differentiates the cross-entropy, ``of="prob"`` the target
        class probability. ``X`` overrides the looked-up embeddings (used along
        interpolation paths).
        """
        a, s = _weights_and_scales(instance, mask_weights, None)
        if X is None:
            X = self._embed(np.asarray(instance.tokens), s)
        charge(meter, 1, 1)
        p, cache = self._forward_embedded(np.asarray(X, dtype=float)[None], a[None])
        return self._backward(p, cache, np.array([target_class]), of)[3][0]

    def embedding_grad_batch(self, X: np.ndarray, target_class: int, of: str = "prob"):
        """Probabilities and d(output)/dX for a batch of (L, D) embedding matrices, all-ones mask."""
        weights = np.ones(X.shape[:2])
        p, cache = self._forward_embedded(X, weights)
        return p, self._backward(p, cache, np.full(X.shape[0], target_class), of)[3]

    def loss_and_mask_grad_batch(self, instance: Instance, weights: np.ndarray, target_class: int):
        """Cross-entropy and mask gradients for a batch of (n, L) weight vectors."""
        n = weights.shape[0]
        tokens = np.broadcast_to(np.asarray(instance.tokens), (n, len(instance)))
        X = self._embed(tokens, np.ones((n, len(instance))))
        p, cache = self._forward_embedded(X, weights)
        grads = self._backward(p, cache, np.full(n, target_class), "loss")
        return -np.log(p[:, target_class]), grads[4]

    # ---- training -----------------------------------------------------

    def param_grads(self, tokens, weights, scales, labels):
        """Mean cross-entropy and parameter gradients for a padded batch."""
        X = self._embed(tokens, scales)
        p, cache = self._forward_embedded(X, weights)
        n = len(labels)
        loss = float(-np.log(p[np.arange(n), labels] + 1e-300).mean())
        d_logits, d_u, d_h, d_X, _ = self._backward(p, cache, labels, "loss")
        z, h = cache[4], cache[3]
        grads = {
            "w_out": z.T @ d_logits / n,
            "b_out": d_logits.mean(axis=0),
            "w_hidden": h.T @ d_u / n,
            "b_hidden": d_u.mean(axis=0),
        }
        d_E = np.zeros_like(self.embeddings)
        np.add.at(d_E, tokens.ravel(), (d_X * scales[..., None]).reshape(-1, self.dim) / n)
        grads["embeddings"] = d_E
        return loss, grads, p

    # ---- persistence --------------------------------------------------

    def to_json(self, meta: dict | None = None) -> dict:
        d = {"version": CHECKPOINT_VERSION, "kind": "toy-bag-of-embeddings",
             "capabilities": sorted(c.value for c in self.capabilities),
             "params": {k: v.tolist() for k, v in self.params().items()}}
        if meta:
            d["meta"] = meta
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ToyClassifier":
        if d.get("version") != CHECKPOINT_VERSION:
            raise InvalidInput(f"unsupported checkpoint version {d.get('version')!r}")
        caps = frozenset(Capability(c) for c in d.get("capabilities", [c.value for c in Capability]))
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d["params"].items()}, capabilities=caps)

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_json(meta)))

    @classmethod
    def load(cls, path: str | Path) -> "ToyClassifier":
        return cls.from_json(json.loads(Path(path).read_text()))


def checkpoint_meta(path: str | Path) -> dict:
    """The free-form ``meta`` block stored with a checkpoint (empty if none)."""
    return json.loads(Path(path).read_text()).get("meta", {})


def _weights_and_scales(instance: Instance, mask_weights, scales):
    n = len(instance)
    a = np.ones(n) if mask_weights is None else np.asarray(mask_weights, dtype=float)
    s = np.ones(n) if scales is None else np.asarray(scales, dtype=float)
    if a.shape != (n,) or s.shape != (n,):
        raise InvalidInput("mask weights must have one entry per token")
    if not np.any(a > 0):
        raise DegenerateMask("all mask weights are zero")
    return a, s


# ---- synthetic corpus ---------------------------------------------------


@dataclass
class SyntheticCorpus:
    """Documents whose label is the class with the most evidence tokens.

    Vocabulary layout: id 0 is MASK, ids 1..C*evidence_per_class are evidence
    tokens (class c owns a contiguous block), the rest are neutral.
    """

    vocab_size: int
    num_classes: int
    evidence: list[list[int]]
    neutral: list[int]
    documents: list[Instance]

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def evidence_class(self) -> np.ndarray:
        """Map token id -> owning class, -1 for neutral / MASK."""
        owner = np.full(self.vocab_size, -1)
        for c, toks in enumerate(self.evidence):
            owner[toks] = c
        return owner

    def split(self, n_train: int) -> tuple["SyntheticCorpus", "SyntheticCorpus"]:
        head = SyntheticCorpus(self.vocab_size, self.num_classes, self.evidence, self.neutral,
                               self.documents[:n_train])
        tail = SyntheticCorpus(self.vocab_size, self.num_classes, self.evidence, self.neutral,
                               self.documents[n_train:])
        return head, tail

    def subset(self, docs: Sequence[Instance]) -> "SyntheticCorpus":
        return SyntheticCorpus(self.vocab_size, self.num_classes, self.evidence, self.neutral, list(docs))

    def write_jsonl(self, path: str | Path) -> None:
        meta = {"_meta": {"vocab_size": self.vocab_size, "num_classes": self.num_classes,
                          "evidence": self.evidence, "neutral": self.neutral}}
        lines = [json.dumps(meta, sort_keys=True)]
        lines += [json.dumps(d.to_dict(), sort_keys=True) for d in self.documents]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "SyntheticCorpus":
        docs, meta = [], None
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "_meta" in rec:
                meta = rec["_meta"]
            else:
                docs.append(Instance.from_dict(rec))
        if meta is None:
            vocab = max(max(d.tokens) for d in docs) + 1
            ncls = max(d.label for d in docs) + 1
            meta = {"vocab_size": vocab, "num_classes": ncls, "evidence": [], "neutral": []}
        return cls(meta["vocab_size"], meta["num_classes"], meta["evidence"], meta["neutral"], docs)


def generate_corpus(n_docs: int, seed: int = 0, vocab_size: int = 64, num_classes: int = 3,
                    evidence_per_class: int = 4, min_len: int = 12, max_len: int = 32,
                    evidence_density: float = 0.2, query_len: int = 0,
                    class_priors: Sequence[float] | None = None,
                    label_share: float = 0.6, neutral_zipf: float = 0.0,
                    weak_ratio: float = 1.0, topic_share: float = 0.5) -> SyntheticCorpus:
    """Sample a corpus.

    Each document draws a label from ``class_priors``, a length, and a binomial
    number of evidence tokens; each evidence token belongs to the label class with
    probability ``label_share`` and to a uniformly chosen other class otherwise.
    Draws where the label is not the strict majority are rejected. Neutral tokens
    follow a Zipf law with exponent ``neutral_zipf`` (0 = uniform).

    ``weak_ratio`` < 1 splits each class's evidence tokens into reliable and weak
    halves: tokens emitted for the label class favour the reliable half (relative
    weight 1 vs ``weak_ratio``), tokens emitted as distractors for another class
    favour the weak half. The label is still the plain majority count.

    ``topic_share`` > 0 gives each class a block of topical neutral tokens: every
    neutral slot is drawn from the label's block with that probability, and from
    the whole neutral set otherwise. Topic words never affect the label. With
    ``query_len > 0`` a protected query prefix of neutral tokens is prepended.
    """
    if n_docs < 1:
        raise InvalidInput("n_docs must be positive")
    n_evidence = num_classes * evidence_per_class
    if n_evidence + 2 > vocab_size:
        raise InvalidInput("vocabulary too small for the evidence layout")
    evidence = [list(range(1 + c * evidence_per_class, 1 + (c + 1) * evidence_per_class))
                for c in range(num_classes)]
    neutral = list(range(1 + n_evidence, vocab_size))
    priors = (np.full(num_classes, 1.0 / num_classes) if class_priors is None
              else np.asarray(class_priors, dtype=float) / np.sum(class_priors))
    ranks = np.arange(1, len(neutral) + 1, dtype=float)
    neutral_p = ranks ** -neutral_zipf
    neutral_p /= neutral_p.sum()
    topics = np.array_split(np.asarray(neutral), num_classes)
    half = evidence_per_class // 2
    reliable_w = np.where(np.arange(evidence_per_class) < half, 1.0, weak_ratio)
    p_signal = reliable_w / reliable_w.sum()
    p_distractor = reliable_w[::-1] / reliable_w.sum()
    rng = substream(seed, "corpus")
    docs = []
    while len(docs) < n_docs:
        y = int(rng.choice(num_classes, p=priors))
        length = int(rng.integers(min_len, max_len + 1))
        n_ev = int(rng.binomial(length, evidence_density))
        if n_ev == 0:
            continue
        others = [c for c in range(num_classes) if c != y]
        classes = np.where(rng.random(n_ev) < label_share, y, rng.choice(others, size=n_ev))
        counts = np.bincount(classes, minlength=num_classes)
        if counts[y] <= np.max(np.delete(counts, y)):
            continue  # tie or wrong majority: resample
        body = rng.choice(neutral, size=length, p=neutral_p)
        if topic_share > 0:
            topical = rng.random(length) < topic_share
            body[topical] = rng.choice(topics[y], size=int(topical.sum()))
        slots = rng.choice(length, size=n_ev, replace=False)
        body[slots] = [evidence[c][int(rng.choice(evidence_per_class, p=p_signal if c == y else p_distractor))]
                       for c in classes]
        query = rng.choice(neutral, size=query_len, p=neutral_p) if query_len else np.array([], dtype=int)
        tokens = np.concatenate([query, body]).astype(int)
        protected = [True] * query_len + [False] * length
        docs.append(Instance(tuple(tokens), tuple(protected), y, f"doc{len(docs):05d}"))
    return SyntheticCorpus(vocab_size, num_classes, evidence, neutral, docs)


def majority_label(tokens: Sequence[int], corpus: SyntheticCorpus) -> int | None:
    """Class with the strictly largest evidence count, None on ties."""
    owner = corpus.evidence_class()[np.asarray(tokens)]
    counts = np.bincount(owner[owner >= 0], minlength=corpus.num_classes)
    best = np.flatnonzero(counts == counts.max())
    return int(best[0]) if len(best) == 1 else None


# ---- training -----------------------------------------------------------


class TrainMode(str, enum.Enum):
    STANDARD = "standard"
    COUNTERFACTUAL = "ct"


CT_SPARSITY_POOL = (0.05, 0.1, 0.2, 0.5)


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.5
    batch_size: int = 16
    mode: TrainMode = TrainMode.STANDARD
    ct_sparsity_pool: tuple[float, ...] = CT_SPARSITY_POOL
    replace: str = "attention"
    seed: int = 0
    dim: int = 16
    hidden: int = 16

    def __post_init__(self):
        self.mode = TrainMode(self.mode)
        self.ct_sparsity_pool = tuple(self.ct_sparsity_pool)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


def random_keep(instance: Instance, n_keep: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random mask keeping all protected positions plus ``n_keep`` free ones."""
    keep = np.asarray(instance.protected, dtype=bool).copy()
    keep[rng.choice(instance.free_positions, size=n_keep, replace=False)] = True
    return keep


def pad_batch(rows: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]]):
    """Stack variable-length (tokens, weights, scales) rows; padding gets weight 0."""
    width = max(len(r[0]) for r in rows)
    n = len(rows)
    tokens = np.full((n, width), MASK_ID, dtype=np.int64)
    weights = np.zeros((n, width))
    scales = np.ones((n, width))
    for i, (t, w, s) in enumerate(rows):
        tokens[i, :len(t)] = t
        weights[i, :len(t)] = w
        scales[i, :len(t)] = s
    return tokens, weights, scales


def train(corpus: SyntheticCorpus, config: TrainConfig, imputer=None,
          history: list | None = None) -> ToyClassifier:
    """Mini-batch gradient descent on mean cross-entropy.

    In counterfactual mode every batch is doubled with an ablated copy of each
    document: a random mask keeping ``ceil(s * n_free)`` free tokens with ``s``
    drawn from ``config.ct_sparsity_pool``, passed through ``config.replace``,
    label unchanged.
    """
    from .replace import ReplaceFn, build_inputs

    if len(corpus) == 0:
        raise InvalidInput("cannot train on an empty corpus")
    rng = substream(config.seed, "train")
    model = ToyClassifier.init(corpus.vocab_size, config.dim, config.hidden, corpus.num_classes,
                               rng=substream(config.seed, "init"))
    replace_fn = ReplaceFn(config.replace)
    docs = corpus.documents
    base = [(np.asarray(d.tokens), np.ones(len(d)), np.ones(len(d))) for d in docs]
    labels_all = np.array([d.label for d in docs])
    ct = config.mode is TrainMode.COUNTERFACTUAL
    for epoch in range(config.epochs):
        order = rng.permutation(len(docs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            rows = [base[i] for i in idx]
            labels = labels_all[idx]
            if ct:
                for i in idx:
                    doc = docs[i]
                    s = config.ct_sparsity_pool[int(rng.integers(len(config.ct_sparsity_pool)))]
                    keep = random_keep(doc, sparsity_count(doc.n_free, s), rng)
                    rows.extend(build_inputs(replace_fn, doc, keep, rng, imputer=imputer, samples=1))
                labels = np.concatenate([labels, labels_all[idx]])
            loss, grads, _ = model.param_grads(*pad_batch(rows), labels)
            for name, g in grads.items():
                getattr(model, name)[...] -= config.learning_rate * g
            losses.append(loss)
        acc = accuracy(model, docs)
        logger.info("epoch %d loss %.4f train-acc %.4f", epoch, float(np.mean(losses)), acc)
        if history is not None:
            history.append({"epoch": epoch, "loss": float(np.mean(losses)), "train_accuracy": acc})
    return model


def predict_docs(model, docs: Sequence[Instance], batch: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(docs), batch):
        chunk = docs[start:start + batch]
        rows = [(np.asarray(d.tokens), np.ones(len(d)), np.ones(len(d))) for d in chunk]
        out.append(model.predict_inputs(*pad_batch(rows)))
    return np.concatenate(out)


def accuracy(model, docs: Sequence[Instance]) -> float:
    p = predict_docs(model, docs)
    return float(np.mean(np.argmax(p, axis=1) == np.array([d.label for d in docs])))
