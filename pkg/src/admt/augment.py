"""Weak and strong input perturbations with label-consistent handling.

Weak: random crop to training size plus horizontal flip. Strong comes in
two flavours, applied on top of the weak view so pseudo-labels computed
there stay aligned: a purely per-pixel intensity jitter (no geometry),
and rectangle copy-paste mixing where the labels are composed with the
identical rectangle.

Every operation returns an AugRecord; replaying a record on the same
input is bit-identical.
"""

from __future__ import annotations

import dataclasses

import numpy as np

BRIGHTNESS_RANGE = (-0.2, 0.2)
CONTRAST_RANGE = (0.8, 1.25)
GAMMA_RANGE = (0.8, 1.25)
PASTE_AREA_RANGE = (0.25, 0.5)
PASTE_ASPECT_RANGE = (0.7, 1.4)


@dataclasses.dataclass
class AugRecord:
    kind: str  # weak | color | copypaste
    crop: tuple | None = None  # (y0, x0)
    crop_size: tuple | None = None  # (h, w)
    flip: bool = False
    brightness: float = 0.0
    contrast: float = 1.0
    gamma: float = 1.0
    rect: tuple | None = None  # (y0, x0, h, w)
    source_index: int | None = None


# ---------------------------------------------------------------------------
# weak: crop + flip


def apply_weak(image, mask, record):
    y0, x0 = record.crop
    h, w = record.crop_size
    img = image[y0 : y0 + h, x0 : x0 + w]
    msk = mask[y0 : y0 + h, x0 : x0 + w] if mask is not None else None
    if record.flip:
        img = img[:, ::-1]
        msk = msk[:, ::-1] if msk is not None else None
    return np.ascontiguousarray(img), (None if msk is None else np.ascontiguousarray(msk))


def weak(image, mask, rng, crop_size):
    """Random crop to crop_size plus p=0.5 horizontal flip, mask-aligned."""
    hh, ww = image.shape
    if crop_size > hh or crop_size > ww:
        raise ValueError(f"crop {crop_size} exceeds image {image.shape}")
    y0 = int(rng.integers(0, hh - crop_size + 1))
    x0 = int(rng.integers(0, ww - crop_size + 1))
    flip = bool(rng.random() < 0.5)
    record = AugRecord(
        kind="weak", crop=(y0, x0), crop_size=(crop_size, crop_size), flip=flip
    )
    img, msk = apply_weak(image, mask, record)
    return img, msk, record


# ---------------------------------------------------------------------------
# strong A1: color jitter (geometry-free)


def apply_color(image, record):
    x = image + record.brightness
    x = x * record.contrast + x.mean() * (1.0 - record.contrast)
    x = np.clip(x, 0.0, 1.0)
    return np.power(x, record.gamma)


def strong_color(image, rng):
    """Brightness/contrast/gamma jitter; strictly per-pixel, so targets
    from the weak view need no transform."""
    record = AugRecord(
        kind="color",
        brightness=float(rng.uniform(*BRIGHTNESS_RANGE)),
        contrast=float(rng.uniform(*CONTRAST_RANGE)),
        gamma=float(rng.uniform(*GAMMA_RANGE)),
    )
    return apply_color(image, record), record


# ---------------------------------------------------------------------------
# strong A2: rectangle copy-paste


def paste_rect(target, source, rect):
    """source pixels replace target inside rect; works for any 2-D array."""
    if target.shape != source.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {source.shape}")
    y0, x0, h, w = rect
    out = target.copy()
    out[y0 : y0 + h, x0 : x0 + w] = source[y0 : y0 + h, x0 : x0 + w]
    return out


def sample_paste_rect(rng, shape):
    """Axis-aligned rectangle covering 25%-50% of the area; degenerate or
    out-of-band integer roundings are rejected and resampled."""
    hh, ww = shape
    lo, hi = PASTE_AREA_RANGE
    while True:
        area = rng.uniform(lo, hi)
        aspect = rng.uniform(*PASTE_ASPECT_RANGE)
        h = int(round(hh * np.sqrt(area * aspect)))
        w = int(round(ww * np.sqrt(area / aspect)))
        if h < 1 or w < 1 or h > hh or w > ww:
            continue
        if not lo <= (h * w) / (hh * ww) <= hi:
            continue
        y0 = int(rng.integers(0, hh - h + 1))
        x0 = int(rng.integers(0, ww - w + 1))
        return (y0, x0, h, w)


def strong_copypaste(image, source_image, labels, source_labels, rng):
    """Mix source into target inside a sampled rectangle.

    labels / source_labels are parallel sequences of per-pixel arrays
    (hard targets, validity, provenance, ...) composed with the same
    rectangle so supervision stays consistent with the mixed input.
    """
    rect = sample_paste_rect(rng, image.shape)
    mixed = paste_rect(image, source_image, rect)
    mixed_labels = tuple(
        paste_rect(a, b, rect) for a, b in zip(labels, source_labels)
    )
    return mixed, mixed_labels, AugRecord(kind="copypaste", rect=rect)
