"""Phase one: salience-masked sign-gradient pre-perturbation via the reference.

Each iteration takes one masked sign step through the reference model's loss
gradient, then spends one target query checking for success. If the target is
fooled, the whole attack ends here; otherwise phase two starts from the final
pre-perturbed image and inherits the mask.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .oracle import Oracle, Prediction, ReferenceModel, is_adversarial
from .salience import binarize, grad_cam, resize_image, resize_plane, resize_salience
from .types import (
    AttackResult,
    BinaryMask,
    ImageTensor,
    PHASE_PREPROCESS,
    PreprocessConfig,
    apply_masked_step,
)

SalienceFn = Callable[[ReferenceModel, ImageTensor, int], "object"]


def local_bim_step(
    x_t: ImageTensor,
    y: int,
    ref: ReferenceModel,
    bm: BinaryMask,
    epsilon1: float,
) -> ImageTensor:
    """clip(x + eps1 * (sign(grad J) * mask)): ascend the reference loss locally."""
    grad = ref.input_gradient(x_t.data, y)
    return apply_masked_step(x_t, grad, bm, epsilon1)


def _preperturb_loop(
    x: ImageTensor,
    y: int,
    target: Oracle,
    step_fn: Callable[[ImageTensor], ImageTensor],
    bm: BinaryMask,
    t1: int,
) -> Tuple[ImageTensor, Optional[AttackResult]]:
    """Shared iterate-then-check loop; one target query per completed step."""
    current = x
    for it in range(1, t1 + 1):
        current = step_fn(current)
        adv, pred = is_adversarial(target, current, y)
        if adv:
            return current, AttackResult(
                success=True,
                final_image=current,
                noq=it,
                final_label=pred.label,
                final_prob=pred.prob,
                phase=PHASE_PREPROCESS,
            )
    return current, None


def preprocess(
    x: ImageTensor,
    y: int,
    target: Oracle,
    ref: ReferenceModel,
    cfg: PreprocessConfig,
    salience_fn: SalienceFn = grad_cam,
) -> Tuple[ImageTensor, BinaryMask, Optional[AttackResult]]:
    """Locate discriminative areas, then pre-perturb inside them.

    Returns (pre-perturbed image, mask, early result). The early result is a
    success with phase "preprocess" when some iterate already fools the
    target; otherwise None after exactly cfg.T1 target queries.

    A reference with a different input size is handled by running the loop at
    reference resolution and mapping every candidate back before the target
    query; the round trip costs image quality, so keep sizes equal when
    possible.
    """
    if tuple(ref.input_shape[:2]) != x.shape[:2]:
        return _preprocess_cross_size(x, y, target, ref, cfg, salience_fn)
    sm = salience_fn(ref, x, y)
    resized = resize_salience(sm, (x.shape[0], x.shape[1]))
    bm = binarize(resized)

    def step(img: ImageTensor) -> ImageTensor:
        return local_bim_step(img, y, ref, bm, cfg.epsilon1)

    final, result = _preperturb_loop(x, y, target, step, bm, cfg.T1)
    return final, bm, result


class _ResizeBackOracle:
    """Maps reference-resolution iterates to image resolution before querying."""

    def __init__(self, inner: Oracle, to_image_size: Callable[[ImageTensor], ImageTensor]):
        self._inner = inner
        self._to_image_size = to_image_size

    @property
    def query_count(self) -> int:
        return self._inner.query_count

    def query(self, small: ImageTensor) -> Prediction:
        return self._inner.query(self._to_image_size(small))


def _preprocess_cross_size(
    x: ImageTensor,
    y: int,
    target: Oracle,
    ref: ReferenceModel,
    cfg: PreprocessConfig,
    salience_fn: SalienceFn,
) -> Tuple[ImageTensor, BinaryMask, Optional[AttackResult]]:
    h, w, c = x.shape
    rh, rw, rc = ref.input_shape
    if rc != c:
        raise ValueError(f"channel mismatch: image {x.shape} vs reference {ref.input_shape}")
    x_small = resize_image(x, (rh, rw))
    sm = salience_fn(ref, x_small, y)
    bm_big = binarize(resize_salience(sm, (h, w)))
    bm_small = binarize(resize_salience(sm, (rh, rw)))

    def to_image_size(small: ImageTensor) -> ImageTensor:
        delta = small.data - x_small.data
        delta_big = np.stack(
            [resize_plane(delta[:, :, ch], (h, w)) for ch in range(c)], axis=2
        )
        # re-masking keeps the upsampled perturbation confined
        return x.with_data(x.data + delta_big * bm_big.data[:, :, None])

    back = _ResizeBackOracle(target, to_image_size)

    def step(img: ImageTensor) -> ImageTensor:
        return local_bim_step(img, y, ref, bm_small, cfg.epsilon1)

    final_small, result = _preperturb_loop(x_small, y, back, step, bm_small, cfg.T1)
    x_ini = to_image_size(final_small)
    if result is not None:
        result = AttackResult(
            success=True,
            final_image=x_ini,
            noq=result.noq,
            final_label=result.final_label,
            final_prob=result.final_prob,
            phase=PHASE_PREPROCESS,
        )
    return x_ini, bm_big, result


def union_mask(masks: Sequence[BinaryMask]) -> BinaryMask:
    """sign(sum of masks): a pixel is discriminative if any reference says so."""
    if not masks:
        raise ValueError("need at least one mask")
    stacked = np.sum([m.data for m in masks], axis=0)
    return BinaryMask(np.sign(stacked))


def multi_reference_preprocess(
    x: ImageTensor,
    y: int,
    target: Oracle,
    refs: Sequence[ReferenceModel],
    cfg: PreprocessConfig,
    salience_fn: SalienceFn = grad_cam,
) -> Tuple[ImageTensor, BinaryMask, Optional[AttackResult]]:
    """Multi-reference variant: union of per-reference masks, summed loss gradient."""
    if not refs:
        raise ValueError("need at least one reference model")
    per_ref = []
    for ref in refs:
        sm = salience_fn(ref, x, y)
        resized = resize_salience(sm, (x.shape[0], x.shape[1]))
        per_ref.append(binarize(resized))
    bm = union_mask(per_ref)

    def step(img: ImageTensor) -> ImageTensor:
        grad = np.sum([ref.input_gradient(img.data, y) for ref in refs], axis=0)
        return apply_masked_step(img, grad, bm, cfg.epsilon1)

    final, result = _preperturb_loop(x, y, target, step, bm, cfg.T1)
    return final, bm, result
