"""Phase two: masked black-box perturbing engines plus global/fixed baselines.

Two engines share the query budget discipline (every oracle interaction is
counted, probes included):

* gradient estimation: central finite differences over randomly grouped
  discriminative pixels, two queries per group, then a masked sign step
  against the estimated gradient and one success-check query per iteration;

* random search: K single-query candidates per round, elites merged into the
  working example, one extra query checking the merged example.

Whenever any probe or candidate already crosses the boundary, that exact
image is returned as the adversarial example.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from .oracle import Oracle, Prediction, is_adversarial
from .types import (
    Array,
    AttackResult,
    BinaryMask,
    GEConfig,
    ImageTensor,
    PHASE_BLACK_BOX,
    PHASE_FAILED,
    RSConfig,
    apply_masked_step,
)

SeedLike = Union[int, np.random.Generator]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class PixelGroup:
    """Pixel coordinates sharing one directional-derivative estimate."""

    coordinates: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        if len(self.coordinates) == 0:
            raise ValueError("a pixel group cannot be empty")


@dataclass(frozen=True)
class AdversarialHit:
    """A probe or candidate that already fooled the target."""

    image: ImageTensor
    prediction: Prediction


def mask_coordinates(bm: BinaryMask) -> Array:
    """(k, 2) array of (row, col) positions where the mask is 1."""
    return np.argwhere(bm.data == 1.0)


def make_pixel_groups(
    bm: BinaryMask, group_size: int, seed: SeedLike
) -> List[PixelGroup]:
    """Random partition of the mask support into groups of at most group_size."""
    if group_size < 1:
        raise ValueError("group_size must be at least 1")
    coords = mask_coordinates(bm)
    if len(coords) == 0:
        raise ValueError("mask has no discriminative pixels")
    rng = _rng(seed)
    order = rng.permutation(len(coords))
    groups = []
    for start in range(0, len(coords), group_size):
        chunk = coords[order[start : start + group_size]]
        groups.append(PixelGroup(tuple((int(m), int(n)) for m, n in chunk)))
    return groups


def _group_indicator(group: PixelGroup, shape: Tuple[int, int]) -> Array:
    e = np.zeros(shape)
    rows = [m for m, _ in group.coordinates]
    cols = [n for _, n in group.coordinates]
    e[rows, cols] = 1.0
    return e


def _estimate_masked_gradient(
    x: ImageTensor,
    y: int,
    oracle: Oracle,
    bm: BinaryMask,
    epsilon_fd: float,
    group_size: int,
    rng: np.random.Generator,
) -> Tuple[Array, Optional[AdversarialHit], int]:
    """Core estimator; also reports how many queries the round spent."""
    if epsilon_fd <= 0:
        raise ValueError("epsilon_fd must be positive")
    if bm.shape != x.shape[:2]:
        raise ValueError(f"mask shape {bm.shape} does not match image {x.shape}")
    groups = make_pixel_groups(bm, group_size, rng)
    h, w, _ = x.shape
    grad = np.zeros((h, w))
    spent = 0
    for group in groups:
        e = _group_indicator(group, (h, w))[:, :, None]
        probe_plus = x.with_data(x.data + epsilon_fd * e)
        adv, pred_plus = is_adversarial(oracle, probe_plus, y)
        spent += 1
        if adv:
            return grad, AdversarialHit(probe_plus, pred_plus), spent
        probe_minus = x.with_data(x.data - epsilon_fd * e)
        adv, pred_minus = is_adversarial(oracle, probe_minus, y)
        spent += 1
        if adv:
            return grad, AdversarialHit(probe_minus, pred_minus), spent
        estimate = (pred_plus.prob - pred_minus.prob) / (2.0 * epsilon_fd)
        rows = [m for m, _ in group.coordinates]
        cols = [n for _, n in group.coordinates]
        grad[rows, cols] = estimate
    return grad, None, spent


def fd_gradient_masked(
    x: ImageTensor,
    y: int,
    oracle: Oracle,
    bm: BinaryMask,
    epsilon_fd: float,
    group_size: int,
    seed: SeedLike,
) -> Tuple[Array, Optional[AdversarialHit]]:
    """Masked finite-difference gradient of the true-class probability.

    Pixels outside the mask get gradient 0 and cost no queries; masked pixels
    are partitioned into random groups, each probed twice (x +- eps * e_S with
    e_S the group indicator broadcast over channels), and every member pixel
    receives the shared estimate. A probe whose top-1 label differs from y is
    returned immediately as an adversarial hit.
    """
    grad, hit, _ = _estimate_masked_gradient(
        x, y, oracle, bm, epsilon_fd, group_size, _rng(seed)
    )
    return grad, hit


def _success(image: ImageTensor, pred: Prediction, noq: int) -> AttackResult:
    return AttackResult(
        success=True,
        final_image=image,
        noq=noq,
        final_label=pred.label,
        final_prob=pred.prob,
        phase=PHASE_BLACK_BOX,
    )


def _failure(image: ImageTensor, pred: Optional[Prediction], noq: int) -> AttackResult:
    return AttackResult(
        success=False,
        final_image=image,
        noq=noq,
        final_label=None if pred is None else pred.label,
        final_prob=None if pred is None else pred.prob,
        phase=PHASE_FAILED,
    )


def ge_attack(
    x_ini: ImageTensor,
    y: int,
    oracle: Oracle,
    bm: BinaryMask,
    cfg: GEConfig,
    seed: SeedLike,
) -> AttackResult:
    """Masked gradient-estimation attack from a (possibly pre-perturbed) start.

    Per iteration: estimate the masked gradient, step against it with
    epsilon2 * sign, then spend one query checking the iterate. The estimate
    is zero outside the mask and sign(0) = 0, so confinement is automatic.
    """
    rng = _rng(seed)
    x_cur = x_ini
    noq = 0
    last_pred: Optional[Prediction] = None
    for _ in range(cfg.T2):
        grad, hit, spent = _estimate_masked_gradient(
            x_cur, y, oracle, bm, cfg.epsilon_fd, cfg.group_size, rng
        )
        noq += spent
        if hit is not None:
            return _success(hit.image, hit.prediction, noq)
        direction = np.broadcast_to(-grad[:, :, None], x_cur.shape)
        x_cur = apply_masked_step(x_cur, direction, bm, cfg.epsilon2)
        adv, pred = is_adversarial(oracle, x_cur, y)
        noq += 1
        last_pred = pred
        if adv:
            return _success(x_cur, pred, noq)
    return _failure(x_cur, last_pred, noq)


def ge_attack_global(
    x: ImageTensor, y: int, oracle: Oracle, cfg: GEConfig, seed: SeedLike
) -> AttackResult:
    """Global gradient-estimation baseline: every pixel is fair game."""
    ones = BinaryMask(np.ones(x.shape[:2]))
    return ge_attack(x, y, oracle, ones, cfg, seed)


PerturbFn = Callable[[ImageTensor, Array], ImageTensor]


def _additive_perturb(epsilon3: float) -> PerturbFn:
    def perturb(img: ImageTensor, pixels: Array) -> ImageTensor:
        data = img.data.copy()
        data[pixels[:, 0], pixels[:, 1], :] += epsilon3
        return img.with_data(data)

    return perturb


def _fixed_value_perturb(fixed_value: Array) -> PerturbFn:
    def perturb(img: ImageTensor, pixels: Array) -> ImageTensor:
        data = img.data.copy()
        data[pixels[:, 0], pixels[:, 1], :] = fixed_value
        return img.with_data(data)

    return perturb


def _random_search(
    x_ini: ImageTensor,
    y: int,
    oracle: Oracle,
    bm: BinaryMask,
    cfg: RSConfig,
    perturb: PerturbFn,
    seed: SeedLike,
) -> AttackResult:
    if bm.shape != x_ini.shape[:2]:
        raise ValueError(f"mask shape {bm.shape} does not match image {x_ini.shape}")
    coords = mask_coordinates(bm)
    if len(coords) == 0:
        raise ValueError("mask has no discriminative pixels")
    per_candidate = min(cfg.pixels_per_candidate, len(coords))
    rng = _rng(seed)
    x_cur = x_ini
    noq = 0
    last_pred: Optional[Prediction] = None
    for _ in range(cfg.T3):
        picks: List[Array] = []
        probs: List[float] = []
        for _k in range(cfg.K):
            sel = rng.choice(len(coords), size=per_candidate, replace=False)
            pixels = coords[np.sort(sel)]
            candidate = perturb(x_cur, pixels)
            adv, pred = is_adversarial(oracle, candidate, y)
            noq += 1
            if adv:
                return _success(candidate, pred, noq)
            picks.append(pixels)
            probs.append(pred.prob)
        # ascending true-class probability; ties broken by candidate index
        order = np.argsort(np.asarray(probs), kind="stable")
        elite = np.vstack([picks[i] for i in order[: cfg.R]])
        merged_pixels = np.unique(elite, axis=0)
        x_cur = perturb(x_cur, merged_pixels)
        adv, pred = is_adversarial(oracle, x_cur, y)
        noq += 1
        last_pred = pred
        if adv:
            return _success(x_cur, pred, noq)
    return _failure(x_cur, last_pred, noq)


def rs_attack(
    x_ini: ImageTensor,
    y: int,
    oracle: Oracle,
    bm: BinaryMask,
    cfg: RSConfig,
    seed: SeedLike,
) -> AttackResult:
    """Masked random search: candidates add epsilon3 to random mask pixels.

    Each round draws K candidates (one query each), merges the perturbation
    sets of the R candidates with the lowest true-class probability into the
    working example, and spends one query checking the merged example.
    """
    return _random_search(x_ini, y, oracle, bm, cfg, _additive_perturb(cfg.epsilon3), seed)


def rs_attack_fixed_value(
    x: ImageTensor,
    y: int,
    oracle: Oracle,
    mask: BinaryMask,
    cfg: RSConfig,
    fixed_value,
    seed: SeedLike,
) -> AttackResult:
    """Random-search baseline that SETS chosen pixels to a fixed color.

    With an all-ones mask this is the global random-search baseline; with an
    externally supplied foreground mask it reproduces the fixed-value local
    search it is modeled on.
    """
    value = np.asarray(fixed_value, dtype=np.float64).reshape(-1)
    c = x.shape[2]
    if value.size == 1:
        value = np.full(c, float(value[0]))
    if value.size != c:
        raise ValueError(f"fixed_value needs 1 or {c} channels, got {value.size}")
    return _random_search(x, y, oracle, mask, cfg, _fixed_value_perturb(value), seed)


ENGINE_GE = "GE"
ENGINE_RS = "RS"


def local_black_box_attack(
    x_ini: ImageTensor,
    bm: BinaryMask,
    y: int,
    oracle: Oracle,
    engine: str,
    cfg,
    seed: SeedLike = 0,
) -> Optional[AttackResult]:
    """Dispatch to an engine; returns the result on success, None on failure."""
    if engine == ENGINE_GE:
        if not isinstance(cfg, GEConfig):
            raise ValueError("GE engine needs a GEConfig")
        result = ge_attack(x_ini, y, oracle, bm, cfg, seed)
    elif engine == ENGINE_RS:
        if not isinstance(cfg, RSConfig):
            raise ValueError("RS engine needs an RSConfig")
        result = rs_attack(x_ini, y, oracle, bm, cfg, seed)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return result if result.success else None
