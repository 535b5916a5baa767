"""Synthetic texture segmentation data and image I/O.

Class identity is carried by distribution shape and pixel co-occurrence, not
by brightness: every texture generator is tuned to mean 0.5 and (for the
first three) matched variance, so per-pixel intensity alone cannot separate
the classes.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .tensor import Tensor, load_tsr, save_tsr  # noqa: F401  (re-exported I/O)

IGNORE_LABEL = 255

TEXTURE_RECIPES = ("uniform_noise", "checkerboard", "h_stripes", "gradient")

_NOISE_HALF_RANGE = 0.45                 # uniform in 0.5 +/- 0.45
_WAVE_AMP = _NOISE_HALF_RANGE / np.sqrt(3.0)   # variance-matched two-level textures
_GRAD_HALF_RANGE = 0.45
_GRAD_NOISE_STD = 0.02


@dataclass
class SegSample:
    image: np.ndarray    # [3, H, W] in [0, 1]
    labels: np.ndarray   # [H, W] class ids, 255 = ignore
    seed: int
    recipe: tuple


def _texture_canvas(recipe: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if recipe == "uniform_noise":
        return rng.uniform(0.5 - _NOISE_HALF_RANGE, 0.5 + _NOISE_HALF_RANGE, (h, w))
    if recipe == "checkerboard":
        phase = rng.integers(0, 2)
        sign = np.where((xx + yy + phase) % 2 == 0, 1.0, -1.0)
        return 0.5 + _WAVE_AMP * sign
    if recipe == "h_stripes":
        phase = rng.integers(0, 4)
        sign = np.where(((yy + phase) // 2) % 2 == 0, 1.0, -1.0)
        return 0.5 + _WAVE_AMP * sign
    if recipe == "gradient":
        axis = rng.integers(0, 2)
        coord = (xx / max(w - 1, 1)) if axis == 0 else (yy / max(h - 1, 1))
        if rng.integers(0, 2):
            coord = 1.0 - coord
        ramp = 0.5 + _GRAD_HALF_RANGE * (2.0 * coord - 1.0)
        return ramp + rng.normal(0.0, _GRAD_NOISE_STD, (h, w))
    raise ValueError("unknown texture recipe %r" % recipe)


def generate_sample(size: int, num_classes: int, seed: int) -> SegSample:
    """One image: a base class plus 1-3 random rectangles of other classes."""
    rng = np.random.default_rng(seed)
    recipe = TEXTURE_RECIPES[:num_classes]
    labels = np.full((size, size), int(rng.integers(0, num_classes)), dtype=np.int64)
    for _ in range(int(rng.integers(1, 4))):
        rh = int(rng.integers(size // 4, int(size * 0.7) + 1))
        rw = int(rng.integers(size // 4, int(size * 0.7) + 1))
        r0 = int(rng.integers(0, size - rh + 1))
        c0 = int(rng.integers(0, size - rw + 1))
        labels[r0:r0 + rh, c0:c0 + rw] = int(rng.integers(0, num_classes))
    gray = np.zeros((size, size))
    for cls in range(num_classes):
        canvas = _texture_canvas(recipe[cls], size, size, rng)
        gray = np.where(labels == cls, canvas, gray)
    gray = np.clip(gray, 0.0, 1.0)
    image = np.repeat(gray[None, :, :], 3, axis=0)
    return SegSample(image=image, labels=labels, seed=seed, recipe=recipe)


def generate_dataset(n: int, size: int, num_classes: int, seed: int):
    """n seeded samples; sample i uses derived seed (seed + i)."""
    if num_classes not in (2, 3, 4):
        raise ValueError("num_classes must be 2, 3 or 4, got %d" % num_classes)
    if size < 32:
        raise ValueError("size must be at least 32, got %d" % size)
    return [generate_sample(size, num_classes, seed + i) for i in range(n)]


# ---- PNG I/O ---------------------------------------------------------------------------


def save_png(image, path):
    """Write a [3, H, W] float map in [0, 1] as 8-bit RGB, rounding half up."""
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("expected [3, H, W] image, got %s" % (arr.shape,))
    quant = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(np.transpose(quant, (1, 2, 0)), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    """Read an RGB PNG to a [3, H, W] float64 map in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as exc:
        raise ValueError("cannot decode %s: %s" % (path, exc)) from exc
    return np.transpose(arr, (2, 0, 1)) / 255.0


def save_label_png(labels, path):
    """Class indices go to the red channel; green and blue stay zero."""
    lab = np.asarray(labels)
    rgb = np.zeros(lab.shape + (3,), dtype=np.uint8)
    rgb[:, :, 0] = lab.astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)


def load_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return arr[:, :, 0].astype(np.int64)


# ---- dataset directory layout ------------------------------------------------------------


def save_dataset(samples, out_dir, seed, train_fraction=0.8):
    """images/NNNN.png + labels/NNNN.png + meta.json with a seeded 80/20 split."""
    img_dir = os.path.join(out_dir, "images")
    lab_dir = os.path.join(out_dir, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)
    for i, s in enumerate(samples):
        save_png(s.image, os.path.join(img_dir, "%04d.png" % i))
        save_label_png(s.labels, os.path.join(lab_dir, "%04d.png" % i))
    order = list(np.random.default_rng(seed).permutation(len(samples)))
    cut = int(round(train_fraction * len(samples)))
    num_classes = int(max(int(s.labels.max()) for s in samples)) + 1 if samples else 0
    meta = {
        "seed": seed,
        "n": len(samples),
        "num_classes": num_classes,
        "recipe": list(samples[0].recipe) if samples else [],
        "split": {"train": [int(i) for i in order[:cut]],
                  "val": [int(i) for i in order[cut:]]},
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    return meta


def load_dataset(data_dir):
    """Returns (train samples, val samples, meta)."""
    with open(os.path.join(data_dir, "meta.json")) as fh:
        meta = json.load(fh)

    def read(idx):
        image = load_png(os.path.join(data_dir, "images", "%04d.png" % idx))
        labels = load_label_png(os.path.join(data_dir, "labels", "%04d.png" % idx))
        return SegSample(image=image, labels=labels, seed=meta["seed"] + idx,
                         recipe=tuple(meta["recipe"]))

    train = [read(i) for i in meta["split"]["train"]]
    val = [read(i) for i in meta["split"]["val"]]
    return train, val, meta
