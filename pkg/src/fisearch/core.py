"""Domain types, the classifier contract, sparsity arithmetic and budget accounting."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

MASK_ID = 0

SUFFICIENCY_LEVELS = (0.05, 0.10, 0.20, 0.50)
COMPREHENSIVENESS_LEVELS = (0.95, 0.90, 0.80, 0.50)


class FISearchError(Exception):
    """Base class for all package errors."""

    code = "error"


class InvalidSparsity(FISearchError, ValueError):
    code = "invalid-sparsity"


class InvalidInput(FISearchError, ValueError):
    code = "invalid-input"


class BudgetExhausted(FISearchError):
    code = "budget-exhausted"


class DegenerateMask(FISearchError, ValueError):
    code = "degenerate-mask"


class UnsupportedModel(FISearchError):
    code = "unsupported-model"


class SpaceTooLarge(FISearchError):
    code = "space-too-large"


class InsufficientData(FISearchError, ValueError):
    code = "insufficient-data"


class Direction(str, enum.Enum):
    SUFFICIENCY = "suff"
    COMPREHENSIVENESS = "comp"

    @property
    def minimize(self) -> bool:
        return self is Direction.SUFFICIENCY

    def better(self, a: float, b: float) -> bool:
        """True if ``a`` is strictly better than ``b`` in this direction."""
        return a < b if self.minimize else a > b

    def default_levels(self) -> tuple[float, ...]:
        if self is Direction.SUFFICIENCY:
            return SUFFICIENCY_LEVELS
        return COMPREHENSIVENESS_LEVELS


class Capability(str, enum.Enum):
    PROBABILITIES = "probabilities-only"
    MASK_GRADIENTS = "mask-gradients"
    EMBEDDING_GRADIENTS = "embedding-gradients"


@dataclass(frozen=True)
class Instance:
    tokens: tuple[int, ...]
    protected: tuple[bool, ...]
    label: int
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "protected", tuple(bool(p) for p in self.protected))
        if len(self.tokens) < 1:
            raise InvalidInput("instance must have at least one token")
        if len(self.protected) != len(self.tokens):
            raise InvalidInput("protected must have the same length as tokens")
        if all(self.protected):
            raise InvalidInput(f"instance {self.id!r} has no unprotected positions")

    @classmethod
    def plain(cls, tokens: Sequence[int], label: int = 0, id: str = "") -> "Instance":
        return cls(tuple(tokens), (False,) * len(tokens), label, id)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def free_positions(self) -> np.ndarray:
        """Indices of unprotected positions, ascending."""
        return np.flatnonzero(~np.asarray(self.protected, dtype=bool))

    @property
    def n_free(self) -> int:
        return len(self.protected) - sum(self.protected)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "tokens": list(self.tokens),
            "protected": list(self.protected),
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        return cls(tuple(d["tokens"]), tuple(d["protected"]), int(d["label"]), str(d.get("id", "")))


def sparsity_count(n_free: int, s: float) -> int:
    """Number of unprotected tokens a mask at sparsity ``s`` keeps: ceil(s * n_free)."""
    if not 0 < s <= 1:
        raise InvalidSparsity(f"sparsity must lie in (0, 1], got {s}")
    if n_free < 1:
        raise InvalidInput("need at least one unprotected position")
    # Fraction avoids ceil(0.07 * 100) style float artifacts.
    k = math.ceil(Fraction(str(s)) * n_free)
    return max(1, min(n_free, k))


@dataclass(frozen=True)
class ExplanationMask:
    keep: tuple[bool, ...]
    sparsity_target: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "keep", tuple(bool(k) for k in self.keep))

    @classmethod
    def from_free(cls, instance: Instance, kept_free: Sequence[int], sparsity: float = 1.0):
        """Build a mask keeping protected positions plus the given absolute positions."""
        keep = np.asarray(instance.protected, dtype=bool).copy()
        keep[list(kept_free)] = True
        return cls(tuple(keep), sparsity)

    @classmethod
    def full(cls, instance: Instance) -> "ExplanationMask":
        return cls((True,) * len(instance), 1.0)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.keep, dtype=bool)

    def n_kept_free(self, instance: Instance) -> int:
        return int(sum(k and not p for k, p in zip(self.keep, instance.protected)))

    def digest(self) -> str:
        return mask_digest(self.array)

    def check(self, instance: Instance) -> None:
        if len(self.keep) != len(instance):
            raise InvalidInput("mask length does not match instance")
        if any(p and not k for k, p in zip(self.keep, instance.protected)):
            raise InvalidInput("mask hides a protected position")


def mask_digest(keep: np.ndarray) -> str:
    return hashlib.blake2b(np.packbits(np.asarray(keep, dtype=bool)).tobytes()
                           + len(keep).to_bytes(4, "little"), digest_size=12).hexdigest()


@dataclass(frozen=True)
class SparsitySpec:
    levels: tuple[float, ...]
    direction: Direction = Direction.SUFFICIENCY

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "levels", tuple(float(s) for s in self.levels))
        if not self.levels:
            raise InvalidInput("need at least one sparsity level")
        for s in self.levels:
            if not 0 < s <= 1:
                raise InvalidSparsity(f"sparsity must lie in (0, 1], got {s}")

    @classmethod
    def default(cls, direction: Direction | str = Direction.SUFFICIENCY) -> "SparsitySpec":
        direction = Direction(direction)
        return cls(direction.default_levels(), direction)

    def kept_counts(self, instance: Instance) -> list[int]:
        """Exact number of unprotected positions kept per level."""
        return [sparsity_count(instance.n_free, s) for s in self.levels]

    def selected_counts(self, instance: Instance) -> list[int]:
        """Size of the explanation per level: tokens kept (Suff) or removed (Comp)."""
        kept = self.kept_counts(instance)
        if self.direction is Direction.SUFFICIENCY:
            return kept
        return [instance.n_free - k for k in kept]


@dataclass
class BudgetMeter:
    """Ledger of forward and backward passes. Charging past ``limit`` raises."""

    limit: int | None = None
    forward_count: int = 0
    backward_count: int = 0
    log: list[tuple[int, int]] | None = field(default=None, repr=False)
    parent: "BudgetMeter | None" = field(default=None, repr=False)

    @property
    def total(self) -> int:
        return self.forward_count + self.backward_count

    @property
    def remaining(self) -> float:
        own = math.inf if self.limit is None else self.limit - self.total
        if self.parent is not None:
            return min(own, self.parent.remaining)
        return own

    def child(self, limit: int | None) -> "BudgetMeter":
        """A sub-ledger with its own limit whose charges also land on this meter."""
        return BudgetMeter(limit, parent=self)

    def can_afford(self, forwards: int = 0, backwards: int = 0) -> bool:
        return forwards + backwards <= self.remaining

    def charge(self, forwards: int = 0, backwards: int = 0) -> "BudgetMeter":
        if forwards < 0 or backwards < 0:
            raise InvalidInput("pass counts must be non-negative")
        if not self.can_afford(forwards, backwards):
            raise BudgetExhausted(
                f"charging {forwards}+{backwards} passes exceeds limit {self.limit} "
                f"(used {self.total})"
            )
        if self.parent is not None:
            self.parent.charge(forwards, backwards)
        self.forward_count += forwards
        self.backward_count += backwards
        if self.log is not None:
            self.log.append((forwards, backwards))
        return self

    @classmethod
    def replay(cls, limit: int | None, log: Sequence[tuple[int, int]]) -> "BudgetMeter":
        meter = cls(limit)
        for f, b in log:
            meter.charge(f, b)
        return meter


def charge(meter: BudgetMeter | None, forwards: int = 0, backwards: int = 0) -> None:
    if meter is not None:
        meter.charge(forwards, backwards)


@runtime_checkable
class ModelHandle(Protocol):
    """What every classifier exposes to the explanation methods.

    ``predict_inputs`` consumes the replaced inputs built by :mod:`fisearch.replace`
    (token ids, per-position attention weights and embedding scales, padded to a batch)
    and returns an ``(n, C)`` array of class probabilities. It does not touch the
    budget; callers charge.
    """

    num_classes: int
    capabilities: frozenset

    def predict_inputs(self, tokens: np.ndarray, weights: np.ndarray,
                       scales: np.ndarray) -> np.ndarray: ...


def has_capability(model, cap: Capability) -> bool:
    return cap in getattr(model, "capabilities", frozenset())


def require(model, cap: Capability) -> None:
    if not has_capability(model, cap):
        raise UnsupportedModel(f"model lacks capability {cap.value!r}")


def argmax_lowest(p: np.ndarray) -> int:
    """Argmax with ties broken toward the lowest index (np.argmax already does this)."""
    return int(np.argmax(np.asarray(p)))


def predicted_class(model: ModelHandle, instance: Instance, meter: BudgetMeter | None = None) -> int:
    n = len(instance)
    tokens = np.asarray(instance.tokens, dtype=np.int64)[None, :]
    ones = np.ones((1, n))
    charge(meter, 1)
    return argmax_lowest(model.predict_inputs(tokens, ones, ones)[0])


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Derive an independent generator for a named component of a run.

    ``substream(seed, "search", 3)`` always yields the same stream for the same
    master seed and path; different paths are statistically independent.
    """
    words = []
    for part in path:
        if isinstance(part, str):
            words.append(int.from_bytes(hashlib.blake2b(part.encode(), digest_size=4).digest(), "little"))
        else:
            words.append(int(part))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(words)))
