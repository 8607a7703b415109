"""In-repo differentiable classifiers and synthetic data for desk-scale runs.

The convnet is a plain numpy implementation (im2col convolutions, manual
backprop), which keeps training and inference bit-deterministic for a fixed
seed and makes the analytic-vs-finite-difference gradient checks meaningful.

The synthetic task is orientation discrimination: each image carries a small
striped rectangle (vertical stripes = class 0, horizontal = class 1, ...) on
an i.i.d. noise background, so class identity depends only on pixels inside
the known signal region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .oracle import (
    BlackBoxOracle,
    IdentityAdapter,
    InputAdapter,
    adapter_from_config,
    softmax,
)
from .types import Array, DEFAULT_DOMAIN, ImageTensor, PixelDomain

_K = 3
_PAD = 1


class TrainingError(RuntimeError):
    """Training failed to reach the required accuracy bar."""


def _out_hw(h: int, w: int, stride: int) -> Tuple[int, int]:
    return (h + 2 * _PAD - _K) // stride + 1, (w + 2 * _PAD - _K) // stride + 1


def _im2col(x: Array, stride: int) -> Tuple[Array, int, int]:
    """(N, C, H, W) -> (N, C*K*K, oh*ow) patch matrix for a strided 3x3 conv."""
    n, c, h, w = x.shape
    oh, ow = _out_hw(h, w, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (_PAD, _PAD), (_PAD, _PAD)))
    cols = np.empty((n, c, _K, _K, oh, ow), dtype=np.float64)
    for i in range(_K):
        for j in range(_K):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * _K * _K, oh * ow), oh, ow


def _col2im(dcols: Array, c: int, h: int, w: int, stride: int) -> Array:
    """Adjoint of _im2col: scatter-add patch gradients back onto the input."""
    n = dcols.shape[0]
    oh, ow = _out_hw(h, w, stride)
    d = dcols.reshape(n, c, _K, _K, oh, ow)
    dxp = np.zeros((n, c, h + 2 * _PAD, w + 2 * _PAD), dtype=np.float64)
    for i in range(_K):
        for j in range(_K):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d[:, :, i, j]
    return dxp[:, :, _PAD : _PAD + h, _PAD : _PAD + w]


class ToyConvNet:
    """Small convnet: strided 3x3 conv+ReLU blocks, global average pool, linear head.

    The last ReLU output is the feature-map stack the CAM machinery consumes.
    ``adapter`` records the input convention the weights assume; oracles and
    reference wrappers apply it so attacks stay in raw pixel space.
    """

    def __init__(
        self,
        input_shape: Tuple[int, int, int] = (32, 32, 3),
        conv_channels: Sequence[int] = (8, 16),
        num_classes: int = 2,
        adapter: Optional[InputAdapter] = None,
        seed: int = 0,
        conv_strides: Optional[Sequence[int]] = None,
    ):
        if len(conv_channels) < 1:
            raise ValueError("need at least one conv layer")
        self.input_shape = tuple(input_shape)
        self.conv_channels = tuple(int(c) for c in conv_channels)
        self.num_classes = int(num_classes)
        self.adapter = adapter if adapter is not None else IdentityAdapter()
        if conv_strides is None:
            # first layer downsamples, deeper layers keep feature-map resolution
            conv_strides = [2] + [1] * (len(self.conv_channels) - 1)
        if len(conv_strides) != len(self.conv_channels):
            raise ValueError("conv_strides must match conv_channels")
        self.conv_strides = tuple(int(s) for s in conv_strides)

        # Inputs are standardized by the adapter's typical output scale before
        # the first conv, so weights sit at He scale whether the adapter emits
        # [-1, 1] values or +-128 ones; optimizer behavior is then identical.
        self.input_norm = float(self.adapter.output_scale())

        h, w, c_in = self.input_shape
        rng = np.random.default_rng(seed)
        self.conv_w: List[Array] = []
        self.conv_b: List[Array] = []
        for c_out, stride in zip(self.conv_channels, self.conv_strides):
            fan_in = c_in * _K * _K
            self.conv_w.append(rng.standard_normal((c_out, c_in, _K, _K)) * np.sqrt(2.0 / fan_in))
            self.conv_b.append(np.zeros(c_out))
            c_in = c_out
            h, w = _out_hw(h, w, stride)
        self.feature_hw = (h, w)
        b_last = self.conv_channels[-1]
        self.head_w = rng.standard_normal((self.num_classes, b_last)) * np.sqrt(1.0 / b_last)
        self.head_b = np.zeros(self.num_classes)
        self.train_history: Tuple[float, ...] = ()

    # -- forward / backward ------------------------------------------------

    def _forward(self, xs_adapted: Array):
        """Batched forward on adapted (N, H, W, C) input; caches for backprop."""
        x = np.ascontiguousarray((xs_adapted / self.input_norm).transpose(0, 3, 1, 2))
        caches = []
        for w_, b, stride in zip(self.conv_w, self.conv_b, self.conv_strides):
            n, c, h, w = x.shape
            cols, oh, ow = _im2col(x, stride)
            wm = w_.reshape(w_.shape[0], -1)
            z = np.einsum("oi,nip->nop", wm, cols) + b[None, :, None]
            z = z.reshape(n, w_.shape[0], oh, ow)
            caches.append(((n, c, h, w), cols, z))
            x = np.maximum(z, 0.0)
        feats = x  # (N, B, h, w)
        pooled = feats.mean(axis=(2, 3))
        logits = pooled @ self.head_w.T + self.head_b
        return logits, (caches, feats, pooled)

    def _backward(self, cache, dlogits: Array):
        """Gradients of a scalar loss given d(loss)/d(logits); returns input grad too."""
        caches, feats, pooled = cache
        d_head_w = dlogits.T @ pooled
        d_head_b = dlogits.sum(axis=0)
        dpooled = dlogits @ self.head_w
        n, b, h, w = feats.shape
        dx = np.broadcast_to(dpooled[:, :, None, None] / (h * w), feats.shape).copy()
        d_conv_w: List[Array] = [np.empty(0)] * len(self.conv_w)
        d_conv_b: List[Array] = [np.empty(0)] * len(self.conv_b)
        for li in range(len(self.conv_w) - 1, -1, -1):
            (n_, c_in, h_in, w_in), cols, z = caches[li]
            dz = dx * (z > 0)
            dz_flat = dz.reshape(n_, dz.shape[1], -1)
            d_conv_w[li] = np.einsum("nop,nip->oi", dz_flat, cols).reshape(self.conv_w[li].shape)
            d_conv_b[li] = dz_flat.sum(axis=(0, 2))
            wm = self.conv_w[li].reshape(self.conv_w[li].shape[0], -1)
            dcols = np.einsum("oi,nop->nip", wm, dz_flat)
            dx = _col2im(dcols, c_in, h_in, w_in, self.conv_strides[li])
        dx_nhwc = dx.transpose(0, 2, 3, 1)
        return dx_nhwc, d_conv_w, d_conv_b, d_head_w, d_head_b

    # -- inference helpers ---------------------------------------------------

    def predict_logits(self, adapted: Array) -> Array:
        """Logits for a single adapted H x W x C input."""
        logits, _ = self._forward(np.asarray(adapted, dtype=np.float64)[None])
        return logits[0]

    def logits_from_feature_maps(self, feature_maps: Array) -> Array:
        """The head alone: global-average-pool the maps and apply the linear layer."""
        pooled = np.asarray(feature_maps, dtype=np.float64).mean(axis=(1, 2))
        return pooled @ self.head_w.T + self.head_b

    def predict_batch_raw(self, xs_raw: Array) -> Array:
        """Argmax labels for a raw-pixel (N, H, W, C) batch."""
        logits, _ = self._forward(self.adapter.apply(xs_raw))
        return np.argmax(logits, axis=1)

    # -- parameter access ----------------------------------------------------

    def _params(self) -> List[Array]:
        return self.conv_w + self.conv_b + [self.head_w, self.head_b]

    def _set_params(self, params: List[Array]) -> None:
        n = len(self.conv_w)
        self.conv_w = [np.asarray(p, dtype=np.float64) for p in params[:n]]
        self.conv_b = [np.asarray(p, dtype=np.float64) for p in params[n : 2 * n]]
        self.head_w = np.asarray(params[2 * n], dtype=np.float64)
        self.head_b = np.asarray(params[2 * n + 1], dtype=np.float64)


class ToyReferenceModel:
    """White-box view of a ToyConvNet: loss/input gradients and CAM ingredients.

    Images come in as raw pixels; gradients chain back through the adapter.
    Class scores are pre-softmax logits.
    """

    def __init__(self, net: ToyConvNet, adapter: Optional[InputAdapter] = None):
        self.net = net
        self.adapter = adapter if adapter is not None else net.adapter
        self.input_shape = net.input_shape
        self.num_classes = net.num_classes

    def _check(self, x: Array, label: Optional[int] = None) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != tuple(self.input_shape):
            raise ValueError(f"input shape {x.shape} != {self.input_shape}")
        if label is not None and not (0 <= label < self.num_classes):
            raise ValueError(f"label {label} out of range")
        return x

    def loss(self, x: Array, y: int) -> float:
        x = self._check(x, y)
        logits, _ = self.net._forward(self.adapter.apply(x)[None])
        p = softmax(logits[0])
        return float(-np.log(p[y]))

    def input_gradient(self, x: Array, y: int) -> Array:
        x = self._check(x, y)
        logits, cache = self.net._forward(self.adapter.apply(x)[None])
        p = softmax(logits)
        dlogits = p.copy()
        dlogits[0, y] -= 1.0
        dx, *_ = self.net._backward(cache, dlogits)
        return dx[0] * (self.adapter.gradient_scale() / self.net.input_norm)

    def feature_maps(self, x: Array) -> Array:
        x = self._check(x)
        _, (_, feats, _) = self.net._forward(self.adapter.apply(x)[None])
        return feats[0]

    def feature_map_gradients(self, x: Array, c: int) -> Array:
        """d(class score c)/d(feature map): constant W[c, b]/(h*w) per map for a GAP head."""
        x = self._check(x, c)
        b = self.net.conv_channels[-1]
        h, w = self.net.feature_hw
        return np.broadcast_to(
            (self.net.head_w[c] / (h * w))[:, None, None], (b, h, w)
        ).copy()

    def class_score(self, x: Array, c: int) -> float:
        x = self._check(x, c)
        logits, _ = self.net._forward(self.adapter.apply(x)[None])
        return float(logits[0, c])

    def logits_from_feature_maps(self, feature_maps: Array) -> Array:
        return self.net.logits_from_feature_maps(feature_maps)


def make_black_box(net: ToyConvNet) -> BlackBoxOracle:
    return BlackBoxOracle(net, net.adapter)


def make_reference(net: ToyConvNet) -> ToyReferenceModel:
    return ToyReferenceModel(net)


# -- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDataset:
    """Images, labels, and the per-image rectangle holding the class signal."""

    images: Tuple[ImageTensor, ...]
    labels: Tuple[int, ...]
    signal_regions: Tuple[Tuple[int, int, int, int], ...]  # (top, left, height, width)

    def __len__(self) -> int:
        return len(self.images)

    def region_mask(self, index: int) -> Array:
        """H x W {0,1} array marking the signal rectangle of one image."""
        h, w, _ = self.images[index].shape
        top, left, rh, rw = self.signal_regions[index]
        m = np.zeros((h, w))
        m[top : top + rh, left : left + rw] = 1.0
        return m


def _paint_pattern(img: Array, label: int, top: int, left: int, rh: int, rw: int) -> None:
    # Deliberately moderate stripe contrast: orientation stays trivially
    # learnable, but a trained net's per-pixel sensitivity lands where small
    # masked perturbations move its decision measurably.
    hi, lo = 160.0, 96.0
    rows = np.arange(rh)[:, None]
    cols = np.arange(rw)[None, :]
    if label == 0:
        patt = np.where(cols % 2 == 0, hi, lo) + 0 * rows
    elif label == 1:
        patt = np.where(rows % 2 == 0, hi, lo) + 0 * cols
    elif label == 2:
        patt = np.where((rows + cols) % 2 == 0, hi, lo)
    elif label == 3:
        patt = np.full((rh, rw), hi)
    else:
        raise ValueError("synthetic patterns defined for at most 4 classes")
    img[top : top + rh, left : left + rw, :] = patt[:, :, None]


def make_dataset(
    n: int,
    size: Tuple[int, int, int] = (32, 32, 3),
    seed: int = 0,
    num_classes: int = 2,
    region_hw: Optional[Tuple[int, int]] = None,
    domain: PixelDomain = DEFAULT_DOMAIN,
) -> SyntheticDataset:
    """Deterministic synthetic corpus; labels alternate so classes stay balanced."""
    if n < 1:
        raise ValueError("need at least one image")
    h, w, c = size
    if h < 2 or w < 2 or c < 1:
        raise ValueError(f"degenerate image size {size}")
    if not (2 <= num_classes <= 4):
        raise ValueError("num_classes must be between 2 and 4")
    if region_hw is None:
        region_hw = (max(2, 3 * h // 8), max(2, 3 * w // 8))
    rh, rw = region_hw
    if rh > h or rw > w:
        raise ValueError(f"signal region {region_hw} does not fit in {size}")

    rng = np.random.default_rng(seed)
    images, labels, regions = [], [], []
    for i in range(n):
        label = i % num_classes
        # Mid-range background noise: label-independent, and lower contrast
        # than the full-swing stripe pattern so the signal stays dominant.
        img = rng.integers(64, 192, size=(h, w, c)).astype(np.float64)
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        _paint_pattern(img, label, top, left, rh, rw)
        images.append(ImageTensor(img, domain))
        labels.append(label)
        regions.append((top, left, rh, rw))
    return SyntheticDataset(tuple(images), tuple(labels), tuple(regions))


# -- training ----------------------------------------------------------------

def accuracy(net: ToyConvNet, ds: SyntheticDataset) -> float:
    xs = np.stack([im.data for im in ds.images])
    preds = net.predict_batch_raw(xs)
    return float(np.mean(preds == np.asarray(ds.labels)))


def train(
    net: ToyConvNet,
    ds: SyntheticDataset,
    epochs: int = 40,
    seed: int = 0,
    lr: float = 0.01,
    batch_size: int = 32,
    min_accuracy: float = 0.9,
    label_smoothing: float = 0.1,
) -> ToyConvNet:
    """Adam on label-smoothed softmax cross-entropy; deterministic for a fixed seed.

    Adam keeps one learning rate workable across adapters whose input scales
    differ by two orders of magnitude. Label smoothing caps the trained
    confidence near 1 - label_smoothing; without it this separable task
    saturates to p = 1 within a few epochs and leaves query-based probing no
    signal to work with. Raises TrainingError if final training accuracy
    lands below ``min_accuracy``. Per-epoch mean losses are recorded on
    ``net.train_history``.
    """
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    if not (0.0 <= label_smoothing < 1.0):
        raise ValueError("label_smoothing must lie in [0, 1)")
    xs_raw = np.stack([im.data for im in ds.images])
    ys = np.asarray(ds.labels)
    xs = net.adapter.apply(xs_raw)
    n = len(ds)
    k = net.num_classes
    rng = np.random.default_rng(seed)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = [np.zeros_like(p) for p in net._params()]
    v = [np.zeros_like(p) for p in net._params()]
    step = 0
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            logits, cache = net._forward(xs[idx])
            p = softmax(logits)
            batch = len(idx)
            targets = np.full((batch, k), label_smoothing / k)
            targets[np.arange(batch), ys[idx]] += 1.0 - label_smoothing
            epoch_loss += float(
                -(targets * np.log(np.maximum(p, 1e-300))).sum()
            )
            dlogits = (p - targets) / batch
            _, d_conv_w, d_conv_b, d_head_w, d_head_b = net._backward(cache, dlogits)
            grads = d_conv_w + d_conv_b + [d_head_w, d_head_b]
            params = net._params()
            step += 1
            for i, (param, grad) in enumerate(zip(params, grads)):
                m[i] = beta1 * m[i] + (1 - beta1) * grad
                v[i] = beta2 * v[i] + (1 - beta2) * grad * grad
                m_hat = m[i] / (1 - beta1**step)
                v_hat = v[i] / (1 - beta2**step)
                params[i] = param - lr * m_hat / (np.sqrt(v_hat) + eps)
            net._set_params(params)
        history.append(epoch_loss / n)
    net.train_history = tuple(history)
    acc = accuracy(net, ds)
    if acc < min_accuracy:
        raise TrainingError(
            f"training accuracy {acc:.3f} below the {min_accuracy:.2f} bar"
        )
    return net


# -- serialization -------------------------------------------------------------

def save_model(net: ToyConvNet, path) -> None:
    """Write the model as an npz archive; layout (stable across versions):

    - ``meta``: UTF-8 JSON bytes with keys input_shape [H, W, C],
      conv_channels, conv_strides, num_classes, adapter (its config dict),
      and input_norm (the internal standardization divisor);
    - ``conv_w_i`` (C_out, C_in, 3, 3) and ``conv_b_i`` (C_out,) per layer i;
    - ``head_w`` (num_classes, B) and ``head_b`` (num_classes,).

    All arrays are float64, so a load round-trips predictions bit-for-bit.
    """
    meta = {
        "input_shape": list(net.input_shape),
        "conv_channels": list(net.conv_channels),
        "conv_strides": list(net.conv_strides),
        "num_classes": net.num_classes,
        "adapter": net.adapter.config(),
        "input_norm": net.input_norm,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for i, (w_, b) in enumerate(zip(net.conv_w, net.conv_b)):
        arrays[f"conv_w_{i}"] = w_
        arrays[f"conv_b_{i}"] = b
    arrays["head_w"] = net.head_w
    arrays["head_b"] = net.head_b
    np.savez(path, **arrays)


def load_model(path) -> ToyConvNet:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        net = ToyConvNet(
            input_shape=tuple(meta["input_shape"]),
            conv_channels=tuple(meta["conv_channels"]),
            num_classes=meta["num_classes"],
            adapter=adapter_from_config(meta["adapter"]),
            conv_strides=tuple(meta["conv_strides"]),
        )
        net.input_norm = float(meta["input_norm"])
        net.conv_w = [np.array(data[f"conv_w_{i}"]) for i in range(len(net.conv_channels))]
        net.conv_b = [np.array(data[f"conv_b_{i}"]) for i in range(len(net.conv_channels))]
        net.head_w = np.array(data["head_w"])
        net.head_b = np.array(data["head_b"])
    return net
