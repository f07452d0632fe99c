"""Seeded stand-ins for a frozen two-tower image/text encoder and few-shot tasks.

The image tower is ``tanh(W_img x)``. The text tower reads a soft prompt of
``L`` rows plus one class embedding ``c`` and returns::

    tanh(sum_j W_tok[j] (v_j * sqrt(D) c) + W_cls c)

Each row has its own projection (position dependent), the class embedding
gates the prompt elementwise so the prompt can steer every class separately,
and large-norm prompts push the activations into tanh saturation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from promptnorm import autodiff as ad
from promptnorm.autodiff import Tensor
from promptnorm.rng import stream


class ConfigurationError(ValueError):
    """Extents or sizes are inconsistent with the encoders."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class FrozenEncoders:
    W_img: np.ndarray  # F × Dx
    W_tok: np.ndarray  # L_max × F × D
    W_cls: np.ndarray  # F × D
    seed: int

    @property
    def max_length(self) -> int:
        return self.W_tok.shape[0]

    @property
    def prompt_dim(self) -> int:
        return self.W_tok.shape[2]

    @property
    def image_dim(self) -> int:
        return self.W_img.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.W_img.shape[0]

    @cached_property
    def _token_stack(self) -> np.ndarray:
        # F × (L_max·D): column block j is W_tok[j], matching row-major prompt flattening
        L, F, D = self.W_tok.shape
        return _readonly(np.ascontiguousarray(self.W_tok.transpose(1, 0, 2).reshape(F, L * D)))

    def same_weights(self, other: "FrozenEncoders") -> bool:
        return all(np.array_equal(a, b) for a, b in
                   ((self.W_img, other.W_img), (self.W_tok, other.W_tok), (self.W_cls, other.W_cls)))


def build_encoders(seed: int, L_max: int = 16, D: int = 32, Dx: int = 24,
                   F: int = 48) -> FrozenEncoders:
    for name, n in (("L_max", L_max), ("D", D), ("Dx", Dx), ("F", F)):
        if n < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {n}")
    a_img, a_txt = 1.0 / np.sqrt(Dx), 1.0 / np.sqrt(D)
    W_img = stream(seed, "encoder/image", 0).uniform(-a_img, a_img, size=(F, Dx))
    W_tok = np.stack([stream(seed, "encoder/token", j).uniform(-a_txt, a_txt, size=(F, D))
                      for j in range(L_max)])
    W_cls = stream(seed, "encoder/class", 0).uniform(-a_txt, a_txt, size=(F, D))
    return FrozenEncoders(_readonly(W_img), _readonly(W_tok), _readonly(W_cls), int(seed))


def encode_images(enc: FrozenEncoders, x: np.ndarray) -> np.ndarray:
    """Image features for one vector (Dx) or a batch (B × Dx). Never tracked."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != enc.image_dim:
        raise ConfigurationError(f"image dim {x.shape[-1]} != encoder Dx {enc.image_dim}")
    return np.tanh(x @ enc.W_img.T)


encode_image = encode_images


def _prompt_rows(prompt) -> Tensor:
    rows = getattr(prompt, "rows", prompt)
    return rows if isinstance(rows, Tensor) else Tensor(rows)


def encode_texts(enc: FrozenEncoders, prompt, class_embeddings: np.ndarray) -> Tensor:
    """Text features (C × F) for every class under one prompt.

    ``prompt`` may be a SoftPrompt, an L×D array, or a (possibly tracked)
    Tensor; gradients flow into the prompt only.
    """
    V = _prompt_rows(prompt)
    if V.data.ndim != 2:
        raise ConfigurationError(f"prompt must be L×D, got {V.shape}")
    L, D = V.shape
    if L > enc.max_length:
        raise ConfigurationError(f"prompt length {L} exceeds encoder maximum {enc.max_length}")
    if D != enc.prompt_dim:
        raise ConfigurationError(f"prompt dim {D} != encoder D {enc.prompt_dim}")
    E = np.atleast_2d(np.asarray(class_embeddings, dtype=np.float64))
    if E.shape[1] != D:
        raise ConfigurationError(f"class embedding dim {E.shape[1]} != prompt dim {D}")
    gates = np.tile(np.sqrt(D) * E, (1, L))  # C × (L·D)
    gated = ad.mul(ad.reshape(V, (1, L * D)), gates)
    prompt_part = ad.matmul(gated, enc._token_stack[:, :L * D].T)  # C × F
    return ad.tanh(ad.add(prompt_part, E @ enc.W_cls.T))


def encode_text(enc: FrozenEncoders, prompt, class_embedding: np.ndarray) -> Tensor:
    """Text feature (F) for a single class embedding."""
    feats = encode_texts(enc, prompt, np.asarray(class_embedding, dtype=np.float64)[None, :])
    return ad.reshape(feats, (enc.feature_dim,))


@dataclass(frozen=True, eq=False)
class FrozenTask:
    """Synthetic few-shot classification task. Labels are 0-based class indices."""

    class_embeddings: np.ndarray  # C × D
    prototypes: np.ndarray  # C × Dx
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    noise: float
    seed: int

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "noise": self.noise,
            "class_embeddings": self.class_embeddings.tolist(),
            "prototypes": self.prototypes.tolist(),
            "train_x": self.train_x.tolist(),
            "train_y": self.train_y.tolist(),
            "test_x": self.test_x.tolist(),
            "test_y": self.test_y.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrozenTask":
        arr = lambda k, dt=np.float64: _readonly(np.array(d[k], dtype=dt))  # noqa: E731
        return cls(arr("class_embeddings"), arr("prototypes"), arr("train_x"),
                   arr("train_y", np.int64), arr("test_x"), arr("test_y", np.int64),
                   float(d["noise"]), int(d["seed"]))


def _samples(rng: np.random.Generator, prototypes: np.ndarray, per_class: int,
             noise: float) -> tuple[np.ndarray, np.ndarray]:
    C, Dx = prototypes.shape
    labels = np.repeat(np.arange(C), per_class)
    x = prototypes[labels] + noise * rng.standard_normal((C * per_class, Dx))
    return x, labels


def generate_task(seed: int, C: int = 8, D: int = 32, Dx: int = 24, shots: int = 8,
                  test_per_class: int = 32, noise: float = 0.3) -> FrozenTask:
    if C < 2:
        raise ConfigurationError(f"need at least 2 classes, got {C}")
    if shots < 1 or test_per_class < 1:
        raise ConfigurationError("shots and test_per_class must be >= 1")
    if noise < 0:
        raise ConfigurationError(f"noise must be >= 0, got {noise}")
    protos = stream(seed, "task/prototypes").standard_normal((C, Dx))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    emb = stream(seed, "task/class-embeddings").uniform(-1.0, 1.0, size=(C, D)) / np.sqrt(D)
    train_x, train_y = _samples(stream(seed, "task/train"), protos, shots, noise)
    test_x, test_y = _samples(stream(seed, "task/test"), protos, test_per_class, noise)
    return FrozenTask(_readonly(emb), _readonly(protos), _readonly(train_x), _readonly(train_y),
                      _readonly(test_x), _readonly(test_y), float(noise), int(seed))
