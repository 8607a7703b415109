"""Target-model access with exact query accounting.

The black-box side exposes only the top-1 (label, probability) pair per query
and counts every query issued. The white-box side is the reference-model
interface the salience and pre-perturbation stages need: loss gradients
w.r.t. the input plus last-layer feature maps and their gradients.

Attacks operate in the raw pixel domain; an input adapter converts raw pixels
into whatever convention a model was trained with (per-channel mean
subtraction, affine rescale to [-1, 1], ...).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional, Protocol, Tuple, runtime_checkable

import numpy as np

from .types import Array, ImageTensor


def softmax(logits: Array) -> Array:
    """Numerically stable softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Prediction:
    """Top-1 answer of the target model: label id and its probability."""

    label: int
    prob: float

    def __post_init__(self):
        if not (0.0 <= self.prob <= 1.0):
            raise ValueError(f"probability {self.prob} outside [0, 1]")


#: Std of a raw pixel drawn uniformly from [0, 255]; adapters scale it to hint
#: at their output magnitude so model init can normalize activations.
_RAW_PIXEL_STD = 255.0 / np.sqrt(12.0)


class InputAdapter:
    """Pixel-domain -> model-input-domain map. Affine, so gradients chain by a scale."""

    def apply(self, x: Array) -> Array:
        raise NotImplementedError

    def gradient_scale(self) -> Array:
        """d(adapted)/d(raw), broadcastable against an H x W x C array."""
        raise NotImplementedError

    def output_scale(self) -> float:
        """Typical std of adapted pixels, used to normalize first-layer init."""
        return float(np.mean(self.gradient_scale())) * _RAW_PIXEL_STD

    def config(self) -> dict:
        raise NotImplementedError


class IdentityAdapter(InputAdapter):
    def apply(self, x: Array) -> Array:
        return np.asarray(x, dtype=np.float64)

    def gradient_scale(self) -> Array:
        return np.float64(1.0)

    def config(self) -> dict:
        return {"kind": "identity"}


class MeanSubtractAdapter(InputAdapter):
    """Subtract a fixed per-channel mean (VGG/ResNet-style preprocessing)."""

    def __init__(self, mean):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)

    def apply(self, x: Array) -> Array:
        return np.asarray(x, dtype=np.float64) - self.mean

    def gradient_scale(self) -> Array:
        return np.float64(1.0)

    def config(self) -> dict:
        return {"kind": "mean_subtract", "mean": self.mean.tolist()}


class RangeAdapter(InputAdapter):
    """Affine map from [in_lo, in_hi] to [out_lo, out_hi] (Inception-style)."""

    def __init__(self, in_lo=0.0, in_hi=255.0, out_lo=-1.0, out_hi=1.0):
        if in_hi <= in_lo or out_hi <= out_lo:
            raise ValueError("adapter ranges must be increasing")
        self.in_lo, self.in_hi = float(in_lo), float(in_hi)
        self.out_lo, self.out_hi = float(out_lo), float(out_hi)
        self._scale = (self.out_hi - self.out_lo) / (self.in_hi - self.in_lo)

    def apply(self, x: Array) -> Array:
        return (np.asarray(x, dtype=np.float64) - self.in_lo) * self._scale + self.out_lo

    def gradient_scale(self) -> Array:
        return np.float64(self._scale)

    def config(self) -> dict:
        return {
            "kind": "range",
            "in_lo": self.in_lo,
            "in_hi": self.in_hi,
            "out_lo": self.out_lo,
            "out_hi": self.out_hi,
        }


def adapter_from_config(cfg: dict) -> InputAdapter:
    kind = cfg["kind"]
    if kind == "identity":
        return IdentityAdapter()
    if kind == "mean_subtract":
        return MeanSubtractAdapter(cfg["mean"])
    if kind == "range":
        return RangeAdapter(cfg["in_lo"], cfg["in_hi"], cfg["out_lo"], cfg["out_hi"])
    raise ValueError(f"unknown adapter kind {kind!r}")


class BlackBoxOracle:
    """Query-counted handle on a target model.

    The public surface reveals nothing beyond the top-1 prediction. The
    counter increments exactly once per completed query; shape errors raise
    before the counter moves. Increments are lock-protected so concurrent
    probes keep the count exact.
    """

    def __init__(self, model, adapter: Optional[InputAdapter] = None):
        self._model = model
        self._adapter = adapter if adapter is not None else getattr(
            model, "adapter", IdentityAdapter()
        )
        self._count = 0
        self._lock = threading.Lock()

    @property
    def query_count(self) -> int:
        return self._count

    def reset_count(self) -> None:
        with self._lock:
            self._count = 0

    def query(self, x: ImageTensor) -> Prediction:
        expected = getattr(self._model, "input_shape", None)
        if expected is not None and tuple(x.shape) != tuple(expected):
            raise ValueError(
                f"image shape {x.shape} does not match model input {expected}"
            )
        adapted = self._adapter.apply(x.data)
        logits = self._model.predict_logits(adapted)
        with self._lock:
            self._count += 1
        probs = softmax(logits)
        label = int(np.argmax(probs))
        return Prediction(label=label, prob=float(probs[label]))


@runtime_checkable
class Oracle(Protocol):
    """Anything an attack engine can query: the real oracle or a budget guard."""

    def query(self, x: ImageTensor) -> Prediction: ...

    @property
    def query_count(self) -> int: ...


def query(oracle: Oracle, x: ImageTensor) -> Prediction:
    return oracle.query(x)


def is_adversarial(oracle: Oracle, x: ImageTensor, y_true: int) -> Tuple[bool, Prediction]:
    """One query; adversarial iff the returned top-1 label differs from y_true."""
    pred = oracle.query(x)
    return pred.label != y_true, pred


@runtime_checkable
class ReferenceModel(Protocol):
    """White-box handle used for salience and pre-perturbation.

    All image arguments are raw-pixel H x W x C arrays; implementations chain
    gradients through their own input adapter.
    """

    input_shape: tuple
    num_classes: int

    def loss(self, x: Array, y: int) -> float: ...

    def input_gradient(self, x: Array, y: int) -> Array: ...

    def feature_maps(self, x: Array) -> Array: ...

    def feature_map_gradients(self, x: Array, c: int) -> Array: ...

    def class_score(self, x: Array, c: int) -> float: ...


def input_gradient(ref: ReferenceModel, x: ImageTensor, y: int) -> Array:
    """Gradient of the reference loss J(x, y) w.r.t. the raw input pixels."""
    if tuple(x.shape) != tuple(ref.input_shape):
        raise ValueError(
            f"image shape {x.shape} does not match reference input {ref.input_shape}"
        )
    if not (0 <= y < ref.num_classes):
        raise ValueError(f"label {y} out of range for {ref.num_classes} classes")
    return ref.input_gradient(x.data, y)
