"""Synthetic 8x8 single-channel images in four pattern families.

Classes: 0 checkerboard, 1 linear gradient, 2 sinusoidal stripes, 3 gaussian blobs.
Pixels lie in [-1, 1]; images are cut into 2x2 patches, giving 16 tokens of width 4.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IMAGE_SIZE = 8
PATCH = 2
NUM_CLASSES = 4
CLASS_NAMES = ("checkerboard", "gradient", "stripes", "blobs")

_yy, _xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(float)


def _checkerboard(rng):
    cell = rng.choice([1, 2, 4])
    phase = rng.integers(0, 2)
    amp = rng.uniform(0.6, 1.0)
    board = ((_yy // cell + _xx // cell + phase) % 2) * 2 - 1
    return amp * board


def _gradient(rng):
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * (_xx - 3.5) + np.sin(theta) * (_yy - 3.5)
    return ramp / np.abs(ramp).max()


def _stripes(rng):
    theta = rng.choice([0.0, np.pi / 2, np.pi / 4, 3 * np.pi / 4])
    period = rng.uniform(2.5, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(2 * np.pi * (np.cos(theta) * _xx + np.sin(theta) * _yy) / period + phase)


def _blobs(rng):
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for _ in range(rng.integers(1, 3)):
        cy, cx = rng.uniform(1, 6, size=2)
        width = rng.uniform(1.0, 2.0)
        img += np.exp(-((_yy - cy) ** 2 + (_xx - cx) ** 2) / (2 * width ** 2))
    return 2 * img / img.max() - 1


_GENERATORS = (_checkerboard, _gradient, _stripes, _blobs)


def make_image(rng: np.random.Generator, label: int, noise: float = 0.05) -> np.ndarray:
    img = _GENERATORS[label](rng) + noise * rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE))
    return np.clip(img, -1.0, 1.0)


def patchify(images: np.ndarray) -> np.ndarray:
    """``[B, 8, 8] -> [B, 16, 4]`` (row-major patch grid, row-major within a patch)."""
    B = images.shape[0]
    g = IMAGE_SIZE // PATCH
    x = images.reshape(B, g, PATCH, g, PATCH).transpose(0, 1, 3, 2, 4)
    return x.reshape(B, g * g, PATCH * PATCH)


def unpatchify(tokens: np.ndarray) -> np.ndarray:
    B = tokens.shape[0]
    g = IMAGE_SIZE // PATCH
    x = tokens.reshape(B, g, g, PATCH, PATCH).transpose(0, 1, 3, 2, 4)
    return x.reshape(B, IMAGE_SIZE, IMAGE_SIZE)


@dataclass
class ToyDataset:
    images: np.ndarray  # [n, 8, 8]
    labels: np.ndarray  # [n]

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("empty dataset")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def tokens(self) -> np.ndarray:
        return patchify(self.images)

    def batch(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self), size=size)
        return patchify(self.images[idx]), self.labels[idx]

    @classmethod
    def generate(cls, n: int, seed: int = 0) -> "ToyDataset":
        rng = np.random.default_rng(seed)
        labels = np.arange(n) % NUM_CLASSES
        rng.shuffle(labels)
        images = np.stack([make_image(rng, int(y)) for y in labels])
        return cls(images, labels.astype(np.int64))

    def of_class(self, label: int) -> "ToyDataset":
        keep = self.labels == label
        return ToyDataset(self.images[keep], self.labels[keep])


TRAIN_SEED = 1234
HELDOUT_SEED = 98765


def default_splits(n_train: int = 4096, n_heldout: int = 1024) -> tuple[ToyDataset, ToyDataset]:
    return ToyDataset.generate(n_train, TRAIN_SEED), ToyDataset.generate(n_heldout, HELDOUT_SEED)
