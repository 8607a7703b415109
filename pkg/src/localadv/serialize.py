"""File formats: PNG images and masks, npz image tensors, JSONL run records.

Corpus images are integer-valued by construction, so 8-bit PNG round-trips
them exactly. Attack outputs carry fractional pixels and are stored as npz
(array + pixel domain) to keep replay bit-exact. Masks serialize one byte per
pixel (0 or 255); salience maps scale linearly so the map maximum lands at
255 (inspection only, not value-preserving).
"""

from __future__ import annotations

import json
import os
from typing import Iterable, List, Tuple

import numpy as np
from PIL import Image

from .models import SyntheticDataset
from .types import BinaryMask, DEFAULT_DOMAIN, ImageTensor, PixelDomain, SalienceMap


def save_image_png(img: ImageTensor, path) -> None:
    """8-bit PNG; requires a [0, 255] domain and integer-valued pixels."""
    if (img.domain.lo, img.domain.hi) != (0.0, 255.0):
        raise ValueError("PNG export expects the [0, 255] pixel domain")
    data = img.data
    if not np.array_equal(data, np.round(data)):
        raise ValueError("PNG export would truncate fractional pixel values; use npz")
    arr = data.astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    elif arr.shape[2] == 3:
        Image.fromarray(arr, mode="RGB").save(path)
    else:
        raise ValueError(f"unsupported channel count {arr.shape[2]} for PNG")


def load_image_png(path, domain: PixelDomain = DEFAULT_DOMAIN) -> ImageTensor:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageTensor(arr, domain)


def save_image_npz(img: ImageTensor, path) -> None:
    """Lossless tensor dump: float64 data plus its pixel domain."""
    np.savez(
        path,
        data=img.data,
        domain=np.array([img.domain.lo, img.domain.hi, img.domain.gray_levels]),
    )


def load_image_npz(path) -> ImageTensor:
    with np.load(path) as f:
        lo, hi, gl = f["domain"]
        return ImageTensor(f["data"], PixelDomain(float(lo), float(hi), float(gl)))


def save_mask_png(mask: BinaryMask, path) -> None:
    Image.fromarray((mask.data * 255).astype(np.uint8), mode="L").save(path)


def load_mask_png(path) -> BinaryMask:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return BinaryMask((arr > 127).astype(np.float64))


def save_salience_png(sm: SalienceMap, path) -> None:
    """Linear scale with the map maximum at 255; an all-zero map stays black."""
    data = sm.data
    peak = data.max()
    scaled = (data / peak * 255.0) if peak > 0 else data
    Image.fromarray(scaled.astype(np.uint8), mode="L").save(path)


# -- corpus ------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def example_id(index: int) -> str:
    return f"img_{index:04d}"


def save_corpus(ds: SyntheticDataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    items = []
    for i, (img, label, region) in enumerate(zip(ds.images, ds.labels, ds.signal_regions)):
        name = f"{example_id(i)}.png"
        save_image_png(img, os.path.join(directory, name))
        items.append(
            {
                "id": example_id(i),
                "file": name,
                "label": int(label),
                "signal_region": list(region),
            }
        )
    h, w, c = ds.images[0].shape
    manifest = {
        "size": [h, w, c],
        "count": len(ds),
        "domain": {
            "lo": ds.images[0].domain.lo,
            "hi": ds.images[0].domain.hi,
            "gray_levels": ds.images[0].domain.gray_levels,
        },
        "items": items,
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2)


def load_corpus(directory) -> Tuple[SyntheticDataset, List[str]]:
    with open(os.path.join(directory, MANIFEST_NAME)) as f:
        manifest = json.load(f)
    dom = manifest["domain"]
    domain = PixelDomain(dom["lo"], dom["hi"], dom["gray_levels"])
    images, labels, regions, ids = [], [], [], []
    for item in manifest["items"]:
        images.append(load_image_png(os.path.join(directory, item["file"]), domain))
        labels.append(int(item["label"]))
        regions.append(tuple(item["signal_region"]))
        ids.append(item["id"])
    return SyntheticDataset(tuple(images), tuple(labels), tuple(regions)), ids


# -- run records ---------------------------------------------------------------

def append_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "a") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path) -> List[dict]:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
