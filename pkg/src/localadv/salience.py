"""Discriminative-area identification: CAM salience, binarization, mask variants.

The salience map comes from the weighted feature-map sum with ReLU on top;
weights are the spatially averaged gradients of the class score w.r.t. each
feature map. Bilinear upsampling brings the map to image resolution, and the
mean-threshold binarization (ties map to 1) yields the attack mask.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .oracle import ReferenceModel
from .types import Array, BinaryMask, ImageTensor, SalienceMap


def grad_cam(ref: ReferenceModel, x: ImageTensor, c: int) -> SalienceMap:
    """Salience at feature-map resolution: ReLU(sum_b alpha_b * A^b).

    alpha_b is the mean over spatial positions of d(class score c)/dA^b.
    """
    if tuple(x.shape) != tuple(ref.input_shape):
        raise ValueError(f"image shape {x.shape} != reference input {ref.input_shape}")
    if not (0 <= c < ref.num_classes):
        raise ValueError(f"label {c} out of range for {ref.num_classes} classes")
    maps = np.asarray(ref.feature_maps(x.data), dtype=np.float64)
    grads = np.asarray(ref.feature_map_gradients(x.data, c), dtype=np.float64)
    if maps.shape != grads.shape:
        raise ValueError(
            f"feature maps {maps.shape} and gradients {grads.shape} disagree"
        )
    alpha = grads.mean(axis=(1, 2))
    weighted = (alpha[:, None, None] * maps).sum(axis=0)
    return SalienceMap(np.maximum(weighted, 0.0))


def resize_salience(sm: SalienceMap, target: Tuple[int, int]) -> SalienceMap:
    """Bilinear resize to (H, W), endpoints aligned to the source corners.

    Nonnegativity is preserved (interpolation is a convex combination), and
    constant maps stay constant.
    """
    if int(target[0]) < 1 or int(target[1]) < 1:
        raise ValueError(f"target size {target} is degenerate")
    out = resize_plane(sm.data, target)
    # convex combinations of nonnegative values; clamp away sign noise
    return SalienceMap(np.maximum(out, 0.0))


def resize_plane(plane: Array, target: Tuple[int, int]) -> Array:
    """Bilinear resize of one 2-D array, endpoints aligned to the corners."""
    ht, wt = int(target[0]), int(target[1])
    h, w = plane.shape
    if (h, w) == (ht, wt):
        return plane.copy()
    ys = np.linspace(0.0, h - 1.0, ht) if ht > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, wt) if wt > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (
        plane[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + plane[np.ix_(y1, x0)] * fy * (1 - fx)
        + plane[np.ix_(y0, x1)] * (1 - fy) * fx
        + plane[np.ix_(y1, x1)] * fy * fx
    )


def resize_image(img: ImageTensor, target: Tuple[int, int]) -> ImageTensor:
    """Bilinear resize of every channel; values stay inside the pixel domain."""
    planes = [resize_plane(img.data[:, :, c], target) for c in range(img.shape[2])]
    return ImageTensor(
        np.clip(np.stack(planes, axis=2), img.domain.lo, img.domain.hi), img.domain
    )


def binarize(sm: SalienceMap) -> BinaryMask:
    """Threshold at the map mean; values equal to the mean map to 1."""
    if sm.data.size == 0:
        raise ValueError("cannot binarize an empty salience map")
    return BinaryMask((sm.data >= sm.data.mean()).astype(np.float64))


def invert_mask(bm: BinaryMask) -> BinaryMask:
    """Complement mask: the non-discriminative areas."""
    return BinaryMask(1.0 - bm.data)


def random_mask(shape: Tuple[int, int], proportion: float, seed: int) -> BinaryMask:
    """Mask with exactly round(proportion * H * W) ones, placed uniformly.

    Sampling is without replacement, so the popcount is exact per seed.
    """
    if not (0.0 < proportion <= 1.0):
        raise ValueError(f"proportion must lie in (0, 1], got {proportion}")
    h, w = int(shape[0]), int(shape[1])
    if h < 1 or w < 1:
        raise ValueError(f"degenerate mask shape {shape}")
    total = h * w
    ones = int(round(proportion * total))
    rng = np.random.default_rng(seed)
    flat = np.zeros(total)
    flat[rng.choice(total, size=ones, replace=False)] = 1.0
    return BinaryMask(flat.reshape(h, w))


def salience_mask(ref: ReferenceModel, x: ImageTensor, c: int) -> BinaryMask:
    """The full pipeline: CAM -> resize to image size -> mean-threshold binarize.

    When the reference expects a different input size, the image is resized
    down for the CAM pass and the salience map is resized back up, so the
    mask always lands at image resolution.
    """
    rh, rw, rc = ref.input_shape
    if rc != x.shape[2]:
        raise ValueError(f"channel mismatch: image {x.shape} vs reference {ref.input_shape}")
    probe = x if (rh, rw) == x.shape[:2] else resize_image(x, (rh, rw))
    sm = grad_cam(ref, probe, c)
    resized = resize_salience(sm, (x.shape[0], x.shape[1]))
    return binarize(resized)


def mask_iou(a: BinaryMask, b) -> float:
    """Intersection-over-union of two {0,1} masks (accepts raw arrays too)."""
    da = a.data if isinstance(a, BinaryMask) else np.asarray(a)
    db = b.data if isinstance(b, BinaryMask) else np.asarray(b)
    if da.shape != db.shape:
        raise ValueError(f"mask shapes differ: {da.shape} vs {db.shape}")
    inter = float(np.logical_and(da == 1, db == 1).sum())
    union = float(np.logical_or(da == 1, db == 1).sum())
    return inter / union if union > 0 else 0.0
