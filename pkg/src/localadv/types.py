"""Shared value types and pixel-domain arithmetic.

Everything here is an immutable value: arrays are copied on construction and
marked read-only, so instances can be shared freely between threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

Array = np.ndarray


def _frozen(a: Array, dtype=np.float64) -> Array:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class PixelDomain:
    """Legal range of a pixel channel plus the gray-level constant used by PSNR."""

    lo: float = 0.0
    hi: float = 255.0
    gray_levels: float = 255.0

    def __post_init__(self):
        if not (self.lo < self.hi):
            raise ValueError(f"pixel domain needs lo < hi, got [{self.lo}, {self.hi}]")
        if not (self.gray_levels > 0):
            raise ValueError(f"gray_levels must be positive, got {self.gray_levels}")


#: Raw 8-bit-style pixel domain. Attacks always operate here; models that want
#: normalized inputs get an adapter on the oracle side.
DEFAULT_DOMAIN = PixelDomain(0.0, 255.0, 255.0)


@dataclass(frozen=True)
class ImageTensor:
    """An H x W x C image whose every element lies inside its pixel domain."""

    data: Array
    domain: PixelDomain = DEFAULT_DOMAIN

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        if self.data.ndim != 3:
            raise ValueError(f"image must be H x W x C, got shape {self.data.shape}")
        h, w, c = self.data.shape
        if h < 1 or w < 1 or c < 1:
            raise ValueError(f"degenerate image shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("image contains non-finite values")
        if self.data.min() < self.domain.lo or self.data.max() > self.domain.hi:
            raise ValueError(
                f"image values [{self.data.min()}, {self.data.max()}] leave the "
                f"pixel domain [{self.domain.lo}, {self.domain.hi}]"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: Array) -> "ImageTensor":
        """New image in the same domain (values are clipped into it first)."""
        return ImageTensor(np.clip(data, self.domain.lo, self.domain.hi), self.domain)


@dataclass(frozen=True)
class SalienceMap:
    """Nonnegative h x w importance scores (the ReLU output of the CAM pass)."""

    data: Array

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        if self.data.ndim != 2:
            raise ValueError(f"salience map must be 2-D, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("salience map contains non-finite values")
        if self.data.min() < 0:
            raise ValueError("salience map must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class BinaryMask:
    """H x W {0,1} map of the pixels a local attack is allowed to touch."""

    data: Array

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        if self.data.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.data.shape}")
        vals = np.unique(self.data)
        if not np.isin(vals, (0.0, 1.0)).all():
            raise ValueError(f"mask values must be 0 or 1, got {vals}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def popcount(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class PreprocessConfig:
    """Pre-perturbation loop: per-step magnitude and iteration cap."""

    epsilon1: float = 1.5
    T1: int = 5

    def __post_init__(self):
        if not (self.epsilon1 > 0):
            raise ValueError("epsilon1 must be positive")
        if self.T1 < 1:
            raise ValueError("T1 must be at least 1")


@dataclass(frozen=True)
class GEConfig:
    """Gradient-estimation engine: probe step, update step, iteration cap, grouping."""

    epsilon_fd: float = 1.0
    epsilon2: float = 16.0
    T2: int = 10
    group_size: int = 20

    def __post_init__(self):
        if not (self.epsilon_fd > 0 and self.epsilon2 > 0):
            raise ValueError("epsilon_fd and epsilon2 must be positive")
        if self.T2 < 1 or self.group_size < 1:
            raise ValueError("T2 and group_size must be at least 1")


@dataclass(frozen=True)
class RSConfig:
    """Random-search engine: candidates per round, elite count, round cap, step.

    The default epsilon3 saturates perturbed pixels to white after clipping;
    smaller values trade queries for less visible noise.
    """

    K: int = 50
    R: int = 30
    T3: int = 60
    epsilon3: float = 255.0
    pixels_per_candidate: int = 1

    def __post_init__(self):
        if not (1 <= self.R < self.K):
            raise ValueError(f"need 1 <= R < K, got R={self.R}, K={self.K}")
        if self.T3 < 1:
            raise ValueError("T3 must be at least 1")
        if not (self.epsilon3 > 0):
            raise ValueError("epsilon3 must be positive")
        if self.pixels_per_candidate < 1:
            raise ValueError("pixels_per_candidate must be at least 1")


PHASE_PREPROCESS = "preprocess"
PHASE_BLACK_BOX = "black_box"
PHASE_FAILED = "failed"
PHASES = (PHASE_PREPROCESS, PHASE_BLACK_BOX, PHASE_FAILED)


@dataclass(frozen=True)
class AttackResult:
    """Outcome of one attack: success flag, final image, and exact query count.

    ``final_image`` is always the last iterate the attack produced; the
    ``adversarial`` property exposes it only when the attack succeeded.
    """

    success: bool
    final_image: Optional[ImageTensor]
    noq: int
    final_label: Optional[int]
    final_prob: Optional[float]
    phase: str

    def __post_init__(self):
        if self.noq < 0:
            raise ValueError("noq cannot be negative")
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.success and self.final_image is None:
            raise ValueError("successful result must carry the adversarial image")
        if self.final_prob is not None and not (0.0 <= self.final_prob <= 1.0):
            raise ValueError("final_prob must lie in [0, 1]")

    @property
    def adversarial(self) -> Optional[ImageTensor]:
        return self.final_image if self.success else None


def clip(x: Union[ImageTensor, Array], domain: Optional[PixelDomain] = None):
    """Clamp every element into the pixel domain; shape is preserved.

    Accepts either an ImageTensor (domain taken from it) or a raw array with
    an explicit domain. Idempotent.
    """
    if isinstance(x, ImageTensor):
        return ImageTensor(np.clip(x.data, x.domain.lo, x.domain.hi), x.domain)
    if domain is None:
        domain = DEFAULT_DOMAIN
    return np.clip(np.asarray(x, dtype=np.float64), domain.lo, domain.hi)


def sign(v):
    """Three-branch sign: 1 for positive, 0 for zero, -1 for negative.

    Applied elementwise to arrays. Non-finite input is rejected.
    """
    arr = np.asarray(v, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("sign() requires finite input")
    if np.isscalar(v) or arr.ndim == 0:
        return int(np.sign(arr))
    return np.sign(arr)


def masked_sign_step(
    x: Array, direction: Array, mask: Array, step: float, domain: PixelDomain
) -> Array:
    """Array core of apply_masked_step: clip(x + step * (sign(direction) * mask))."""
    x = np.asarray(x, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != x.shape:
        raise ValueError(
            f"direction shape {direction.shape} does not match image shape {x.shape}"
        )
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape[:2]:
        raise ValueError(
            f"mask shape {mask.shape} does not match image plane {x.shape[:2]}"
        )
    stepped = x + step * (sign(direction) * mask[:, :, None])
    out = np.clip(stepped, domain.lo, domain.hi)
    # Masked-out pixels must survive bit-identical, not merely clipped back.
    keep = mask[:, :, None] == 0
    return np.where(keep, x, out)


def apply_masked_step(
    x: ImageTensor, direction: Array, mask: BinaryMask, step: float
) -> ImageTensor:
    """One masked sign step: pixels outside the mask are bit-identical to input."""
    out = masked_sign_step(x.data, direction, mask.data, step, x.domain)
    return ImageTensor(out, x.domain)
