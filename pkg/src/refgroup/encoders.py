"""Trainable-from-scratch image and text encoders."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import MLP, ConvNormAct, LayerNorm, Linear
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class VocabularyError(KeyError):
    pass


@dataclass
class FeaturePyramid:
    """Visual maps ordered coarse-to-fine: ``V[0]`` is the stride-32 stage."""
    V: list[Tensor]

    def __getitem__(self, i: int) -> Tensor:
        return self.V[i]

    def shapes(self) -> list[tuple]:
        return [v.shape for v in self.V]


def coordinate_planes(h: int, w: int) -> np.ndarray:
    """(h, w, 2) row/column coordinates in [-1, 1] at pixel centres."""
    rows = (np.arange(h) + 0.5) / h * 2 - 1
    cols = (np.arange(w) + 0.5) / w * 2 - 1
    return np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)


class ImageEncoder:
    """Stride-4 stem followed by three stride-2 Conv3x3 -> LayerNorm -> ReLU blocks.

    With ``coords`` the stem also sees two coordinate planes, so features can
    say where they are; a pretrained backbone would carry this already.
    """

    def __init__(self, store, rng, channels=(64, 32, 16, 8), name="image_encoder", coords: bool = False):
        c1, c2, c3, c4 = channels
        self.channels = tuple(channels)
        self.coords = coords
        self.stem = ConvNormAct(store, f"{name}.stem", 3 + 2 * coords, c4, 7, rng, stride=4, pad=3)
        self.blocks = [
            ConvNormAct(store, f"{name}.block{i}", cin, cout, 3, rng, stride=2, pad=1)
            for i, (cin, cout) in enumerate([(c4, c3), (c3, c2), (c2, c1)], start=1)
        ]

    def __call__(self, img) -> FeaturePyramid:
        img = T.as_tensor(img)
        h, w = img.shape[-3], img.shape[-2]
        if h % 32 or w % 32:
            raise ConfigError(f"image size {h}x{w} must be divisible by 32")
        if img.shape[-1] != 3:
            raise ConfigError(f"expected 3 colour channels, got {img.shape[-1]}")
        if self.coords:
            xy = np.broadcast_to(coordinate_planes(h, w), img.shape[:-1] + (2,))
            img = T.concat([img, T.Tensor(xy)], axis=-1)
        fine = [self.stem(img)]
        for block in self.blocks:
            fine.append(block(fine[-1]))
        return FeaturePyramid(list(reversed(fine)))


class TextEncoder:
    """Embedding + learned positions, one pre-norm single-head self-attention block."""

    def __init__(self, store, rng, vocab_size: int, max_len: int, dim: int = 32, name="text_encoder"):
        self.vocab_size, self.max_len, self.dim = vocab_size, max_len, dim
        self.embed = store.add(f"{name}.embed", rng.normal((vocab_size, dim)))
        self.pos = store.add(f"{name}.pos", rng.normal((max_len, dim), std=0.1))
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim)
        self.q = Linear(store, f"{name}.attn.q", dim, dim, rng)
        self.k = Linear(store, f"{name}.attn.k", dim, dim, rng)
        self.v = Linear(store, f"{name}.attn.v", dim, dim, rng)
        self.o = Linear(store, f"{name}.attn.o", dim, dim, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim)
        self.mlp = MLP(store, f"{name}.mlp", dim, 2 * dim, dim, rng)
        self.pool = Linear(store, f"{name}.pool", dim, dim, rng)

    def lookup(self, tokens) -> Tensor:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 0 or ids.shape[-1] < 1:
            raise ConfigError("expression must contain at least one token")
        if ids.shape[-1] > self.max_len:
            raise ConfigError(f"expression length {ids.shape[-1]} exceeds max_len {self.max_len}")
        bad = (ids < 0) | (ids >= self.vocab_size)
        if bad.any():
            raise VocabularyError(f"token id {int(ids[bad][0])} outside vocabulary of size {self.vocab_size}")
        return T.getitem(self.embed, ids)

    def __call__(self, tokens):
        """Return (F, e): per-word features (..., L, C) and sentence embedding (..., C)."""
        x = self.lookup(tokens)
        L = x.shape[-2]
        x = x + self.pos[:L]
        h = self.ln1(x)
        att = T.softmax(T.matmul(self.q(h), self.k(h).T) * (1.0 / np.sqrt(self.dim)), axis=-1)
        x = x + self.o(T.matmul(att, self.v(h)))
        x = x + self.mlp(self.ln2(x))
        e = self.pool(T.mean(x, axis=-2, keepdims=True))
        return x, T.reshape(e, e.shape[:-2] + e.shape[-1:])


class Vocabulary:
    """Token strings; a token's id is its line number in the vocabulary file."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def encode(self, words) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise VocabularyError(f"unknown word {exc.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(line for line in Path(path).read_text().splitlines() if line)
