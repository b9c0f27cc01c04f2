"""Synthetic multi-class 2D segmentation data: generation, IO, batching.

Images are HxW grayscale in [0,1] containing 1..3 non-overlapping shapes
(disk, rectangle, ring). Each shape carries a foreground class; the
class fixes both the shape kind and an intensity band, and a per-shape
offset jitters the intensity inside the band. A smooth background
gradient and global Gaussian noise (sigma 0.05) sit underneath. The
mask is the exact rendered geometry.

On disk a dataset is a directory of binary PGMs (P5) plus a JSON
manifest; see write_dataset / load_dataset.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from .rng import substream

NOISE_SIGMA = 0.05
SHAPE_KINDS = ("disk", "rect", "ring")
TEST_FRACTION = 0.2


@dataclasses.dataclass
class SegSample:
    id: str
    image: np.ndarray  # [H,W] float64 in [0,1]
    mask: np.ndarray | None  # [H,W] int64 class indices, or None


@dataclasses.dataclass
class ManifestEntry:
    id: str
    role: str  # labeled | unlabeled | test
    image_path: str
    mask_path: str | None


@dataclasses.dataclass
class DatasetManifest:
    num_classes: int
    size: int
    samples: list

    def ids_with_role(self, role):
        return [e.id for e in self.samples if e.role == role]


@dataclasses.dataclass
class BatchSpec:
    batch_size: int  # labeled images per step
    unlabeled_ratio: int  # unlabeled batch is ratio * batch_size

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.unlabeled_ratio * self.batch_size < 1:
            raise ValueError("unlabeled batch would be empty")

    @property
    def unlabeled_batch(self):
        return self.unlabeled_ratio * self.batch_size


# ---------------------------------------------------------------------------
# generation


# per-class (kind, polarity): the class cue is contrast polarity against
# the mid-grey background plus local geometry, both of which survive
# monotone photometric perturbation (brightness/contrast/gamma)
_CLASS_LOOKS = (("disk", "dark"), ("rect", "bright"), ("ring", "bright"), ("rect", "dark"))
_INTENSITY_BANDS = {"dark": (0.06, 0.20), "bright": (0.72, 0.94)}


def _sample_geometry(rng, size, num_classes):
    """Draw 1..3 non-overlapping shapes.

    A shape's class fixes its kind and polarity; the per-shape intensity
    offset jitters inside the polarity band. Counts lean towards 3 so
    most images carry most classes.
    """
    n_shapes = int(rng.choice([1, 2, 3], p=[0.15, 0.35, 0.5]))
    shapes = []
    for _ in range(n_shapes):
        cls = int(rng.integers(1, num_classes))
        kind, polarity = _CLASS_LOOKS[(cls - 1) % len(_CLASS_LOOKS)]
        intensity = rng.uniform(*_INTENSITY_BANDS[polarity])
        for _attempt in range(40):
            if kind == "disk":
                r = rng.uniform(6.0, 10.0)
                geom = {"r": r}
                extent = r
            elif kind == "rect":
                hh = rng.uniform(6.0, 10.0)
                hw = rng.uniform(6.0, 10.0)
                geom = {"hh": hh, "hw": hw}
                extent = max(hh, hw)
            else:  # ring
                ro = rng.uniform(6.5, 9.5)
                ri = ro - rng.uniform(2.0, 3.0)
                geom = {"ro": ro, "ri": ri}
                extent = ro
            cy = rng.uniform(extent + 1, size - extent - 1)
            cx = rng.uniform(extent + 1, size - extent - 1)
            # non-overlap via bounding-circle separation
            ok = all(
                np.hypot(cy - s["cy"], cx - s["cx"]) > extent + s["extent"] + 1.5
                for s in shapes
            )
            if ok:
                shapes.append(
                    {
                        "kind": kind,
                        "cls": cls,
                        "cy": cy,
                        "cx": cx,
                        "extent": extent,
                        "intensity": intensity,
                        **geom,
                    }
                )
                break
        # shape is dropped if no free spot was found
    return shapes


def render_mask(shapes, size):
    """Exact class-index mask from shape geometry (later shapes never overlap)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=np.int64)
    for s in shapes:
        dy, dx = yy - s["cy"], xx - s["cx"]
        if s["kind"] == "disk":
            inside = dy * dy + dx * dx <= s["r"] ** 2
        elif s["kind"] == "rect":
            inside = (np.abs(dy) <= s["hh"]) & (np.abs(dx) <= s["hw"])
        else:
            rr = dy * dy + dx * dx
            inside = (rr <= s["ro"] ** 2) & (rr >= s["ri"] ** 2)
        mask[inside] = s["cls"]
    return mask


def _render_image(shapes, size, rng):
    # mid-grey background so both polarities have headroom
    base = rng.uniform(0.36, 0.46)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy) / size
    image = base + 0.12 * (ramp - ramp.min())
    for s in shapes:
        dy, dx = yy - s["cy"], xx - s["cx"]
        if s["kind"] == "disk":
            inside = dy * dy + dx * dx <= s["r"] ** 2
        elif s["kind"] == "rect":
            inside = (np.abs(dy) <= s["hh"]) & (np.abs(dx) <= s["hw"])
        else:
            rr = dy * dy + dx * dx
            inside = (rr <= s["ro"] ** 2) & (rr >= s["ri"] ** 2)
        image[inside] = s["intensity"]
    image = image + rng.normal(0.0, NOISE_SIGMA, (size, size))
    return np.clip(image, 0.0, 1.0)


def generate_sample(seed, index, size, num_classes):
    """One sample, deterministic in (seed, index); independent across indices."""
    rng = substream(seed, "data", index)
    shapes = _sample_geometry(rng, size, num_classes)
    mask = render_mask(shapes, size)
    image = _render_image(shapes, size, rng)
    return SegSample(id=f"s{index:05d}", image=image, mask=mask)


def generate_dataset(seed, n, size, num_classes):
    if not 2 <= num_classes <= 5:
        raise ValueError(f"num_classes must be in 2..5, got {num_classes}")
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    return [generate_sample(seed, i, size, num_classes) for i in range(n)]


# ---------------------------------------------------------------------------
# PGM + manifest IO


def write_pgm(path, values):
    """Binary PGM (P5), maxval 255."""
    arr = np.asarray(values, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    # header: magic, width, height, maxval, single whitespace, then pixels
    fields = []
    pos = 2
    while len(fields) < 3:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width).copy()


def write_dataset(out_dir, samples, num_classes, size):
    """Write images/masks as PGM plus manifest.json; returns the manifest.

    Every generated sample has a mask, so the on-disk role is "labeled";
    split() assigns the run-time roles.
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    entries = []
    for s in samples:
        image_path = os.path.join("images", f"{s.id}.pgm")
        mask_path = os.path.join("masks", f"{s.id}.pgm")
        write_pgm(os.path.join(out_dir, image_path), np.rint(255.0 * s.image))
        write_pgm(os.path.join(out_dir, mask_path), s.mask)
        entries.append(ManifestEntry(s.id, "labeled", image_path, mask_path))
    manifest = DatasetManifest(num_classes=num_classes, size=size, samples=entries)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "num_classes": manifest.num_classes,
                "size": manifest.size,
                "samples": [dataclasses.asdict(e) for e in manifest.samples],
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return manifest


def load_manifest(dataset_dir):
    with open(os.path.join(dataset_dir, "manifest.json"), encoding="utf-8") as fh:
        doc = json.load(fh)
    entries = [
        ManifestEntry(e["id"], e["role"], e["image_path"], e.get("mask_path"))
        for e in doc["samples"]
    ]
    return DatasetManifest(doc["num_classes"], doc["size"], entries)


def load_samples(dataset_dir, manifest):
    """Read every sample into memory, keyed by id."""
    samples = {}
    for e in manifest.samples:
        image = read_pgm(os.path.join(dataset_dir, e.image_path)) / 255.0
        mask = None
        if e.mask_path is not None:
            mask = read_pgm(os.path.join(dataset_dir, e.mask_path)).astype(np.int64)
        samples[e.id] = SegSample(id=e.id, image=image, mask=mask)
    return samples


# ---------------------------------------------------------------------------
# splitting and batching


def split(manifest, labeled_fraction, seed):
    """Assign roles: seeded shuffle, 20% test held out first, then a
    labeled prefix of the remaining training pool."""
    if not 0.0 < labeled_fraction < 1.0:
        raise ValueError(f"labeled_fraction must be in (0,1), got {labeled_fraction}")
    ids = [e.id for e in manifest.samples]
    order = substream(seed, "split").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_test = int(len(ids) * TEST_FRACTION + 0.5)
    n_labeled = int((len(ids) - n_test) * labeled_fraction + 0.5)
    if n_labeled < 1:
        raise ValueError(
            f"labeled_fraction {labeled_fraction} yields no labeled samples"
        )
    roles = {}
    for sid in shuffled[:n_test]:
        roles[sid] = "test"
    for sid in shuffled[n_test : n_test + n_labeled]:
        roles[sid] = "labeled"
    for sid in shuffled[n_test + n_labeled :]:
        roles[sid] = "unlabeled"
    entries = [
        ManifestEntry(e.id, roles[e.id], e.image_path, e.mask_path)
        for e in manifest.samples
    ]
    return DatasetManifest(manifest.num_classes, manifest.size, entries)


class BatchSampler:
    """Without-replacement epoch sampling over the labeled and unlabeled pools.

    The unlabeled stream is consumed sequentially through a fresh per-epoch
    permutation, so consecutive teacher turns see disjoint batches and each
    id appears exactly once per epoch. An epoch is one pass over the
    unlabeled pool (the larger one); the labeled pool cycles independently
    through its own permutations. Batches keep a fixed size and may span
    an epoch boundary.
    """

    def __init__(self, labeled_ids, unlabeled_ids, spec, seed):
        if not labeled_ids or not unlabeled_ids:
            raise ValueError("both sample pools must be non-empty")
        self.labeled_ids = list(labeled_ids)
        self.unlabeled_ids = list(unlabeled_ids)
        self.spec = spec
        self.seed = seed
        self._lab_epoch = 0
        self._lab_pos = 0
        self._lab_perm = self._perm("batch_labeled", self.labeled_ids, 0)
        self._unl_epoch = 0
        self._unl_pos = 0
        self._unl_perm = self._perm("batch_unlabeled", self.unlabeled_ids, 0)

    def _perm(self, stream, ids, epoch):
        order = substream(self.seed, stream, epoch).permutation(len(ids))
        return [ids[i] for i in order]

    @property
    def epoch_iters(self):
        """Iterations per pass over the unlabeled pool (rounded up)."""
        m = self.spec.unlabeled_batch
        return -(-len(self.unlabeled_ids) // m)

    def _draw(self, count, which):
        out = []
        while len(out) < count:
            if which == "labeled":
                if self._lab_pos == len(self._lab_perm):
                    self._lab_epoch += 1
                    self._lab_perm = self._perm(
                        "batch_labeled", self.labeled_ids, self._lab_epoch
                    )
                    self._lab_pos = 0
                out.append(self._lab_perm[self._lab_pos])
                self._lab_pos += 1
            else:
                if self._unl_pos == len(self._unl_perm):
                    self._unl_epoch += 1
                    self._unl_perm = self._perm(
                        "batch_unlabeled", self.unlabeled_ids, self._unl_epoch
                    )
                    self._unl_pos = 0
                out.append(self._unl_perm[self._unl_pos])
                self._unl_pos += 1
        return out

    def next_batches(self):
        """(labeled ids of size B, unlabeled ids of size mu*B)."""
        labeled = self._draw(self.spec.batch_size, "labeled")
        unlabeled = self._draw(self.spec.unlabeled_batch, "unlabeled")
        return labeled, unlabeled
