"""Classification loss, gradient-free pre-inference, and prompt-norm regularizers.

Three objectives are combined per training batch::

    total = ce + beta * pun + (1 - beta) * pan

``pun`` weights every prompt row equally; ``pan`` only weights rows whose
tau-rescaled variant classified the current batch strictly better than the
unmodified prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from promptnorm import autodiff as ad
from promptnorm.autodiff import NormKind, Tensor
from promptnorm.encoders import FrozenEncoders, encode_texts
from promptnorm.prompt import HybridPromptSet

OMEGA_PRESETS = {"default": 1.0, "imagenet": 10.0, "food_pets": 50.0}


@dataclass(frozen=True)
class CEConfig:
    temperature: float = 0.07

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class PUNConfig:
    omega: float = 1.0
    p: NormKind = "two"

    def __post_init__(self):
        if not (math.isfinite(self.omega) and self.omega >= 0):
            raise ValueError(f"omega must be finite and >= 0, got {self.omega}")
        if self.p not in ad.NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.p!r}")


@dataclass(frozen=True)
class PANConfig:
    omega: float = 1.0
    tau: float = 0.5
    n: int = 1
    p: NormKind = "two"

    def __post_init__(self):
        if not (math.isfinite(self.omega) and self.omega >= 0):
            raise ValueError(f"omega must be finite and >= 0, got {self.omega}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.p not in ad.NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.p!r}")


@dataclass(frozen=True)
class OmegaSchedule:
    k: float = 0.2
    max_epochs: int = 200
    enabled: bool = False

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"attenuation rate k must be > 0, got {self.k}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass(frozen=True)
class BetaMix:
    beta: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


@dataclass(frozen=True)
class AlphaVector:
    """Regularization weight per pre-inference position (1-based)."""

    positions: tuple[int, ...]
    values: tuple[float, ...]

    @property
    def M(self) -> int:
        return sum(1 for a in self.values if a != 0)

    @property
    def selected(self) -> tuple[int, ...]:
        return tuple(p for p, a in zip(self.positions, self.values) if a != 0)


@dataclass(frozen=True, eq=False)
class PredictionMatrix:
    """Row 0: predictions of the original prompt; row n: of the variant at ``positions[n-1]``."""

    labels: np.ndarray  # (N+1) × B, class indices
    positions: tuple[int, ...]

    def __post_init__(self):
        if self.labels.ndim != 2 or self.labels.shape[0] != len(self.positions) + 1:
            raise ValueError(
                f"prediction matrix of shape {self.labels.shape} does not match "
                f"{len(self.positions)} corrupted positions")


# --------------------------------------------------------------------------
# classification

def similarity_logits(image_features: np.ndarray, text_features: np.ndarray,
                      temperature: float) -> np.ndarray:
    """Gradient-free B×C matrix of cosine similarity / temperature."""
    return ad.cosine_matrix(image_features, text_features).data / temperature


def prediction_probabilities(image_features: np.ndarray, text_features: np.ndarray,
                             temperature: float) -> np.ndarray:
    return ad.softmax(similarity_logits(image_features, text_features, temperature)).data


def predict(image_features: np.ndarray, text_features: np.ndarray,
            temperature: float) -> np.ndarray:
    """Argmax class per image; ties go to the lowest class index."""
    probs = prediction_probabilities(image_features, text_features, temperature)
    return np.argmax(probs, axis=1)


def accuracy(image_features, text_features, labels, temperature: float) -> float:
    return float(np.mean(predict(image_features, text_features, temperature) == labels))


def ce_loss(image_features, text_features, labels, temperature: float = 0.07) -> Tensor:
    """Batch-summed cross-entropy of cosine-similarity logits."""
    logits = ad.scale(ad.cosine_matrix(image_features, text_features), 1.0 / temperature)
    return ad.cross_entropy(logits, labels)


def predict_with_prompts(hybrid: HybridPromptSet, class_embeddings: np.ndarray,
                         enc: FrozenEncoders, image_features: np.ndarray,
                         temperature: float = 0.07) -> PredictionMatrix:
    """Classify one batch under the original prompt and each corrupted variant.

    Runs entirely outside any gradient tape.
    """
    image_features = np.asarray(image_features, dtype=np.float64)
    if image_features.ndim != 2 or image_features.shape[0] == 0:
        raise ValueError("pre-inference needs a non-empty B×F batch of image features")
    rows = []
    for prompt in hybrid.prompts:
        text = encode_texts(enc, prompt.rows, class_embeddings).data
        rows.append(predict(image_features, text, temperature))
    return PredictionMatrix(np.stack(rows), tuple(hybrid.positions))


def pan_alphas(preds: PredictionMatrix, labels, omega: float) -> AlphaVector:
    labels = np.asarray(labels)
    if preds.labels.shape[1] != labels.shape[0]:
        raise ValueError(f"{preds.labels.shape[1]} predictions for {labels.shape[0]} labels")
    correct = (preds.labels == labels[None, :]).sum(axis=1)
    baseline = correct[0]
    values = tuple(float(omega) if c > baseline else 0.0 for c in correct[1:])
    return AlphaVector(tuple(preds.positions), values)


# --------------------------------------------------------------------------
# norm regularizers

def _rows(prompt) -> Tensor:
    rows = getattr(prompt, "rows", prompt)
    return rows if isinstance(rows, Tensor) else Tensor(rows)


def _zero(V: Tensor) -> Tensor:
    # stays on V's tape so backward() works and yields exact zeros
    return ad.scale(ad.sum(V), 0.0)


def pun_loss(prompt, cfg: PUNConfig = PUNConfig()) -> Tensor:
    """omega times the mean per-row p-norm of the prompt."""
    V = _rows(prompt)
    if cfg.omega == 0:
        return _zero(V)
    return ad.scale(ad.mean(ad.row_pnorms(V, cfg.p)), cfg.omega)


def pan_loss(prompt, alphas: AlphaVector, p: NormKind = "two") -> Tensor:
    """Alpha-weighted mean p-norm over the selected rows; 0 when nothing is selected."""
    V = _rows(prompt)
    picked = [(pos - 1, a) for pos, a in zip(alphas.positions, alphas.values) if a != 0]
    if not picked:
        return _zero(V)
    for idx, _ in picked:
        if not 0 <= idx < V.shape[0]:
            raise ValueError(f"alpha position {idx + 1} outside 1..{V.shape[0]}")
    idx = [i for i, _ in picked]
    weights = np.array([a for _, a in picked])
    norms = ad.row_pnorms(ad.take_rows(V, idx), p)
    return ad.scale(ad.sum(ad.mul(norms, weights)), 1.0 / len(picked))


def omega_at_epoch(epoch: float, sched: OmegaSchedule) -> float:
    """Logistic decay multiplier: 1 - 1/(1 + exp(-k (E - maxE/2)))."""
    if not 0 <= epoch <= sched.max_epochs:
        raise ValueError(f"epoch {epoch} outside 0..{sched.max_epochs}")
    z = sched.k * (epoch - 0.5 * sched.max_epochs)
    # algebraically equal to the form above; stays strictly monotone for large |z|
    if z > 700:
        return math.exp(-z)
    return 1.0 / (1.0 + math.exp(z))


def total_loss(ce: Tensor, pun: Tensor | None, pan: Tensor | None, beta: float) -> Tensor:
    """ce + beta * pun + (1 - beta) * pan; zero-weighted terms are not touched."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    out = ce
    if beta != 0 and pun is not None:
        out = ad.add(out, pun if beta == 1 else ad.scale(pun, beta))
    if beta != 1 and pan is not None:
        out = ad.add(out, pan if beta == 0 else ad.scale(pan, 1.0 - beta))
    return out
