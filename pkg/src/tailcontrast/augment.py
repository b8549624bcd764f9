"""Weak and strong image augmentation views.

The weak view is a horizontal flip plus a padded random crop. The strong
view applies the weak view, then a RandAugment-style policy (a fixed
number of color/geometry transforms drawn at random magnitude) and a
random square erasure. All transforms keep the image shape and never
change the class of the depicted object.

Every function is pure given an explicit ``numpy.random.Generator``;
callers that parallelize must hand each worker its own seeded stream.
"""
from __future__ import annotations

import dataclasses
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.transforms import functional as tvF


@dataclasses.dataclass(frozen=True)
class WeakPolicy:
    flip_prob: float = 0.5
    crop_padding: int = 4

    @property
    def ops(self) -> Tuple[str, ...]:
        return ("hflip", "crop")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class StrongPolicy:
    """RandAugment-style policy: ``num_ops`` transforms at random magnitude."""

    num_ops: int = 2
    ops: Tuple[str, ...] = (
        "brightness",
        "contrast",
        "saturation",
        "sharpness",
        "posterize",
        "solarize",
        "rotate",
        "shear_x",
        "shear_y",
        "translate_x",
        "translate_y",
    )
    erase_fraction: float = 0.5
    erase_fill: float = 0.5

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ops"] = list(self.ops)
        return d


WEAK_DEFAULT = WeakPolicy()
STRONG_DEFAULT = StrongPolicy()


def _random_crop_padded(img: torch.Tensor, padding: int, rng: np.random.Generator) -> torch.Tensor:
    if padding == 0:
        return img
    _, h, w = img.shape
    padded = F.pad(img.unsqueeze(0), (padding,) * 4, mode="reflect").squeeze(0)
    top = int(rng.integers(0, 2 * padding + 1))
    left = int(rng.integers(0, 2 * padding + 1))
    return padded[:, top : top + h, left : left + w]


def weak_augment(img: torch.Tensor, rng: np.random.Generator, policy: WeakPolicy = WEAK_DEFAULT) -> torch.Tensor:
    """Flip-and-crop view of a [C, H, W] float image in [0, 1]."""
    if rng.random() < policy.flip_prob:
        img = torch.flip(img, dims=(2,))
    return _random_crop_padded(img, policy.crop_padding, rng)


def _apply_op(img: torch.Tensor, name: str, magnitude: float) -> torch.Tensor:
    # magnitude in [0, 1]; signed ops map it to [-1, 1]
    signed = 2.0 * magnitude - 1.0
    if name == "brightness":
        return tvF.adjust_brightness(img, 0.1 + 1.8 * magnitude).clamp(0.0, 1.0)
    if name == "contrast":
        return tvF.adjust_contrast(img, 0.1 + 1.8 * magnitude).clamp(0.0, 1.0)
    if name == "saturation":
        return tvF.adjust_saturation(img, 0.1 + 1.8 * magnitude).clamp(0.0, 1.0)
    if name == "sharpness":
        return tvF.adjust_sharpness(img, 0.1 + 1.8 * magnitude).clamp(0.0, 1.0)
    if name == "posterize":
        levels = 2 ** max(1, 8 - int(4 * magnitude))
        return torch.floor(img * (levels - 1) + 0.5) / (levels - 1)
    if name == "solarize":
        threshold = 1.0 - 0.9 * magnitude
        return torch.where(img >= threshold, 1.0 - img, img)
    if name == "rotate":
        return tvF.rotate(img, angle=30.0 * signed)
    if name == "shear_x":
        return tvF.affine(img, angle=0.0, translate=[0, 0], scale=1.0, shear=[17.0 * signed, 0.0])
    if name == "shear_y":
        return tvF.affine(img, angle=0.0, translate=[0, 0], scale=1.0, shear=[0.0, 17.0 * signed])
    if name == "translate_x":
        shift = int(round(0.3 * img.shape[2] * signed))
        return tvF.affine(img, angle=0.0, translate=[shift, 0], scale=1.0, shear=[0.0, 0.0])
    if name == "translate_y":
        shift = int(round(0.3 * img.shape[1] * signed))
        return tvF.affine(img, angle=0.0, translate=[0, shift], scale=1.0, shear=[0.0, 0.0])
    raise ValueError(f"unknown augmentation op {name!r}")


def _random_erase(img: torch.Tensor, fraction: float, fill: float, rng: np.random.Generator) -> torch.Tensor:
    _, h, w = img.shape
    side_h = max(1, int(round(h * fraction)))
    side_w = max(1, int(round(w * fraction)))
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    top = max(0, cy - side_h // 2)
    left = max(0, cx - side_w // 2)
    bottom = min(h, top + side_h)
    right = min(w, left + side_w)
    out = img.clone()
    out[:, top:bottom, left:right] = fill
    return out


def strong_augment(
    img: torch.Tensor,
    rng: np.random.Generator,
    policy: StrongPolicy = STRONG_DEFAULT,
    weak_policy: WeakPolicy = WEAK_DEFAULT,
) -> torch.Tensor:
    """Aggressive view: weak view + policy transforms + random erasure."""
    img = weak_augment(img, rng, weak_policy)
    for _ in range(policy.num_ops):
        name = policy.ops[int(rng.integers(0, len(policy.ops)))]
        magnitude = float(rng.random())
        img = _apply_op(img, name, magnitude)
    return _random_erase(img, policy.erase_fraction, policy.erase_fill, rng)


def weak_augment_batch(images: torch.Tensor, rng: np.random.Generator, policy: WeakPolicy = WEAK_DEFAULT) -> torch.Tensor:
    return torch.stack([weak_augment(images[i], rng, policy) for i in range(images.shape[0])])


def strong_augment_batch(
    images: torch.Tensor,
    rng: np.random.Generator,
    policy: StrongPolicy = STRONG_DEFAULT,
    weak_policy: WeakPolicy = WEAK_DEFAULT,
) -> torch.Tensor:
    return torch.stack(
        [strong_augment(images[i], rng, policy, weak_policy) for i in range(images.shape[0])]
    )
