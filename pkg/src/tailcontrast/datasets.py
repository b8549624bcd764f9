"""Source datasets: in-memory arrays, synthetic imagery, CIFAR adapters.

A source dataset is anything exposing ``len()``, an integer ``labels``
array, and ``image(i)`` returning a float32 CHW tensor in [0, 1]. Split
construction and training only rely on this interface, so synthetic
desk-scale datasets plug in next to the CIFAR loaders.
"""
from __future__ import annotations

import os
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F

DATA_DIR_ENV = "TAILCONTRAST_DATA_DIR"


def data_cache_dir() -> str:
    """Dataset cache directory, overridable via TAILCONTRAST_DATA_DIR."""
    return os.environ.get(DATA_DIR_ENV, os.path.join(os.path.expanduser("~"), ".cache", "tailcontrast"))


@runtime_checkable
class SourceDataset(Protocol):
    """Labeled image collection addressable by index."""

    labels: np.ndarray

    def __len__(self) -> int: ...

    def image(self, index: int) -> torch.Tensor: ...


class ArrayDataset:
    """Images held in memory as uint8 HWC arrays, converted on access."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        if images.ndim != 4:
            raise ValueError(f"expected images [N, H, W, C], got shape {images.shape}")
        if len(images) != len(labels):
            raise ValueError("images and labels length mismatch")
        self.images = np.ascontiguousarray(images, dtype=np.uint8)
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)

    def image(self, index: int) -> torch.Tensor:
        arr = self.images[index].astype(np.float32) / 255.0
        return torch.from_numpy(arr).permute(2, 0, 1)

    def batch(self, indices) -> torch.Tensor:
        """Stacked float32 [B, C, H, W] batch for the given indices."""
        arr = self.images[np.asarray(indices)].astype(np.float32) / 255.0
        return torch.from_numpy(arr).permute(0, 3, 1, 2)


def make_synthetic_dataset(
    num_classes: int,
    per_class: int,
    image_size: int = 32,
    noise: float = 0.15,
    template_detail: int = 4,
    seed: int = 0,
) -> ArrayDataset:
    """Class-colored blob imagery for desk-scale experiments.

    Each class is a smooth low-frequency color template; samples add
    pixel noise and a global brightness jitter. Lower ``noise`` makes
    the task easier.
    """
    rng = np.random.default_rng(seed)
    low = rng.uniform(0.0, 1.0, size=(num_classes, 3, template_detail, template_detail))
    templates = F.interpolate(
        torch.from_numpy(low), size=(image_size, image_size), mode="bilinear", align_corners=False
    ).numpy()
    templates = 0.15 + 0.7 * templates

    images = np.empty((num_classes * per_class, image_size, image_size, 3), dtype=np.uint8)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    i = 0
    for k in range(num_classes):
        for _ in range(per_class):
            sample = templates[k] + rng.normal(0.0, noise, size=templates[k].shape)
            sample = sample * rng.uniform(0.8, 1.2)
            sample = np.clip(sample, 0.0, 1.0)
            images[i] = np.round(sample.transpose(1, 2, 0) * 255).astype(np.uint8)
            labels[i] = k
            i += 1
    return ArrayDataset(images, labels)


def load_cifar(name: str, train: bool, root: str | None = None, download: bool = True) -> ArrayDataset:
    """CIFAR-10/100 as an ArrayDataset (requires torchvision data access)."""
    from torchvision import datasets as tvd

    root = root or data_cache_dir()
    if name == "cifar10":
        base = tvd.CIFAR10(root=root, train=train, download=download)
    elif name == "cifar100":
        base = tvd.CIFAR100(root=root, train=train, download=download)
    else:
        raise ValueError(f"unknown CIFAR dataset {name!r}")
    return ArrayDataset(np.asarray(base.data), np.asarray(base.targets))


def balanced_test_counts(labels: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels), minlength=num_classes)
    return counts[:num_classes]
