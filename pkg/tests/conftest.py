import numpy as np
import pytest

from gsdd.core import PARAMS_PER_GAUSSIAN, DistilledSet
from gsdd.data_io import LabeledImageDataset, normalize_images


def make_random_set(rng: np.random.Generator, width: int, height: int,
                    channels: int = 3, n_images: int = 2, m: int = 8,
                    num_classes: int = 1) -> DistilledSet:
    """Random but well-conditioned Gaussians for renderer/gradient tests."""
    n = n_images * m
    p = np.zeros((n, PARAMS_PER_GAUSSIAN))
    p[:, 0] = rng.uniform(-0.85, 0.85, n)
    p[:, 1] = rng.uniform(-0.85, 0.85, n)
    p[:, 2] = rng.uniform(0.1, 0.6, n)
    p[:, 3] = rng.uniform(-0.3, 0.3, n)
    p[:, 4] = rng.uniform(0.1, 0.6, n)
    p[:, 5:8] = rng.uniform(-1.0, 1.0, (n, 3))
    p[:, 8] = rng.uniform(-1.5, 1.5, n)
    labels = rng.integers(0, num_classes, n_images)
    return DistilledSet(width, height, channels, n_images, m, p.reshape(-1),
                        labels, num_classes)


def make_blob_dataset(n_per_class: int, size: int = 16, seed: int = 0,
                      jitter: float = 0.22) -> LabeledImageDataset:
    """Two-class toy dataset: one soft blob per image, class = blob position.

    Position and size jitter make a single example per class a poor summary
    of its class, so more (or better-placed) training images genuinely help.
    """
    rng = np.random.default_rng(seed)
    centers = {0: (-0.35, -0.25), 1: (0.35, 0.25)}
    ys, xs = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size),
                         indexing="ij")
    images = []
    labels = []
    for cls in (0, 1):
        cx, cy = centers[cls]
        for _ in range(n_per_class):
            jx = cx + rng.normal(0.0, jitter)
            jy = cy + rng.normal(0.0, jitter)
            s = 0.22 + rng.uniform(-0.05, 0.05)
            blob = np.exp(-(((xs - jx) ** 2 + (ys - jy) ** 2) / (2 * s * s)))
            img = np.empty((size, size, 3))
            img[:, :, 0] = 0.15 + 0.7 * blob
            img[:, :, 1] = 0.15 + 0.5 * blob
            img[:, :, 2] = 0.2 + 0.1 * blob
            img += rng.normal(0.0, 0.03, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(cls)
    order = rng.permutation(len(images))
    raw = np.stack(images)[order]
    labels = np.asarray(labels)[order]
    return normalize_images(raw, labels, 2)


def make_field_dataset(n_per_class: int, size: int = 16, seed: int = 0
                       ) -> LabeledImageDataset:
    """Two-class dataset whose class evidence is large-scale by construction.

    Each image is a broad oriented shading field (direction encodes the
    class) plus a few small class-independent clutter dots, so fitted
    Gaussians with large spatial extent carry the discriminative content
    while small ones carry clutter.
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size),
                         indexing="ij")
    images, labels = [], []
    for cls in (0, 1):
        direction = 1.0 if cls == 0 else -1.0
        for _ in range(n_per_class):
            angle = direction * (0.8 + 0.4 * rng.uniform())
            field = 0.5 + 0.35 * np.tanh(angle * (xs + ys)
                                         + rng.normal(0.0, 0.15))
            img = np.stack([field * 0.9, field * 0.7, 0.3 + 0.4 * field],
                           axis=-1)
            for _ in range(4):
                dx, dy = rng.uniform(-0.8, 0.8, 2)
                dot = np.exp(-(((xs - dx) ** 2 + (ys - dy) ** 2) / 0.024))
                img += rng.choice([-0.25, 0.25]) * dot[:, :, None]
            img += rng.normal(0.0, 0.02, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(cls)
    order = rng.permutation(len(images))
    return normalize_images(np.stack(images)[order],
                            np.asarray(labels)[order], 2)


def make_natural_image(size: int = 32, seed: int = 3) -> np.ndarray:
    """Procedural target with smooth shading plus hard edges, values in [0, 1]."""
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    img = np.empty((size, size, 3))
    img[:, :, 0] = 0.3 + 0.5 * xs
    img[:, :, 1] = 0.2 + 0.5 * ys * (1 - xs)
    img[:, :, 2] = 0.5 + 0.3 * np.sin(4.0 * xs) * np.cos(3.0 * ys)
    disk = ((xs - 0.4) ** 2 + (ys - 0.55) ** 2) < 0.04
    img[disk] = [0.85, 0.3, 0.2]
    bar = (xs > 0.7) & (xs < 0.82)
    img[bar] = [0.1, 0.15, 0.6]
    img += rng.normal(0.0, 0.005, img.shape)
    return np.clip(img, 0.0, 1.0)


@pytest.fixture(scope="session")
def blob_dataset() -> LabeledImageDataset:
    return make_blob_dataset(n_per_class=64, seed=11)
