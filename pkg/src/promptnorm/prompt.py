"""Soft prompts, single-position corruptions, and hybrid prompt sets.

Positions are 1-based everywhere in this module's interface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np

from promptnorm.autodiff import NORM_KINDS, NormKind


class PositionError(IndexError):
    """A prompt position outside 1..L."""


@dataclass(frozen=True, eq=False)
class SoftPrompt:
    rows: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValueError(f"soft prompt must be a non-empty L×D matrix, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("soft prompt entries must be finite")
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)

    @classmethod
    def random(cls, rng: np.random.Generator, length: int = 16, dim: int = 32,
               std: float = 0.02) -> "SoftPrompt":
        return cls(std * rng.standard_normal((length, dim)))

    @property
    def length(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def row(self, j: int) -> np.ndarray:
        return self.rows[_index(self, j)]

    def with_row(self, j: int, values: np.ndarray) -> "SoftPrompt":
        i = _index(self, j)
        rows = self.rows.copy()
        rows[i] = values
        return SoftPrompt(rows, self.trainable)

    def equals(self, other: "SoftPrompt") -> bool:
        """Bitwise equality of the rows."""
        return self.rows.shape == other.rows.shape and self.rows.tobytes() == other.rows.tobytes()


def _index(prompt: SoftPrompt, j: int) -> int:
    if not 1 <= j <= prompt.length:
        raise PositionError(f"position {j} outside 1..{prompt.length}")
    return j - 1


def rescale(prompt: SoftPrompt, j: int, s: float) -> SoftPrompt:
    """Copy of ``prompt`` with row ``j`` multiplied by ``s``."""
    if not np.isfinite(s):
        raise ValueError(f"rescaling factor must be finite, got {s}")
    return prompt.with_row(j, prompt.row(j) * float(s))


def replace(prompt: SoftPrompt, j: int, mean: float, std: float,
            rng: np.random.Generator) -> SoftPrompt:
    """Copy of ``prompt`` with row ``j`` replaced by a draw from N(mean·1, std²·I)."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    i = _index(prompt, j)
    if std == 0:
        row = np.full(prompt.dim, float(mean))
    else:
        row = mean + std * rng.standard_normal(prompt.dim)
    return prompt.with_row(i + 1, row)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: Literal["replace", "rescale"]
    position: int
    mean: float = 0.0
    std: float = 0.0
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in ("replace", "rescale"):
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.std < 0:
            raise ValueError(f"std must be >= 0, got {self.std}")

    def apply(self, prompt: SoftPrompt, rng: np.random.Generator | None = None) -> SoftPrompt:
        if self.kind == "rescale":
            return rescale(prompt, self.position, self.factor)
        if rng is None and self.std > 0:
            raise ValueError("replace corruption needs a random generator")
        return replace(prompt, self.position, self.mean, self.std, rng)


@dataclass(frozen=True)
class HybridPromptSet:
    """The original prompt plus one τ-rescaled variant per selected position."""

    original: SoftPrompt
    variants: tuple[SoftPrompt, ...]
    positions: tuple[int, ...]
    tau: float

    def __post_init__(self):
        if len(self.variants) != len(self.positions):
            raise ValueError("one variant per position required")
        if len(set(self.positions)) != len(self.positions):
            raise ValueError(f"positions must be distinct, got {self.positions}")

    @property
    def prompts(self) -> tuple[SoftPrompt, ...]:
        """Original first, then the variants in position order of selection."""
        return (self.original, *self.variants)

    def __len__(self) -> int:
        return len(self.variants) + 1


def build_hybrid_set(prompt: SoftPrompt, n: int, tau: float, rng: np.random.Generator,
                     *, strict: bool = True) -> HybridPromptSet:
    """Pick ``n`` distinct positions uniformly and rescale each one by ``tau``.

    ``strict=False`` lifts the ``0 < tau < 1`` restriction (used to test the
    identity corruption ``tau = 1``).
    """
    if not 1 <= n <= prompt.length:
        raise ValueError(f"need 1 <= N <= L={prompt.length}, got N={n}")
    if strict and not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    positions = tuple(int(p) + 1 for p in rng.choice(prompt.length, size=n, replace=False))
    variants = tuple(rescale(prompt, p, tau) for p in positions)
    return HybridPromptSet(prompt, variants, positions, float(tau))


class PromptNorms(NamedTuple):
    per_position: np.ndarray
    mean: float


def prompt_norms(prompt: SoftPrompt | np.ndarray, p: NormKind = "two") -> PromptNorms:
    rows = getattr(prompt, "rows", prompt)
    rows = np.asarray(rows, dtype=np.float64)
    if p == "one":
        norms = np.abs(rows).sum(axis=1)
    elif p == "two":
        norms = np.sqrt((rows * rows).sum(axis=1))
    elif p == "inf":
        norms = np.abs(rows).max(axis=1)
    else:
        raise ValueError(f"unknown norm kind {p!r}; expected one of {NORM_KINDS}")
    return PromptNorms(norms, float(norms.mean()))
