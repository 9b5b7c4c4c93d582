"""Paired fMRI/image data: synthesis, preprocessing, augmentation and storage.

Voxel vectors are kept as float32 throughout so that the binary dataset
format round-trips bit-exactly.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "FmriSample", "PairedRecord", "PairedDataset", "NormStats", "SynthSpec",
    "DatasetFormatError", "DatasetVersionError", "DatasetTruncatedError",
    "generate_synthetic_dataset", "render_class_image", "max_renderable_classes",
    "wrap_pad", "constant_pad", "pad_to_patch_boundary", "fit_norm_stats",
    "apply_norm", "random_sparsify", "random_crop_image", "crop_box", "floor_count",
    "preprocess_dataset", "save_dataset", "load_dataset", "export_csv",
]


class DatasetFormatError(ValueError):
    """Raised when a dataset file does not carry the expected magic bytes."""


class DatasetVersionError(ValueError):
    pass


class DatasetTruncatedError(ValueError):
    pass


@dataclass(frozen=True)
class FmriSample:
    voxels: np.ndarray
    subject_id: int = 0
    image_id: Optional[int] = None
    class_id: Optional[int] = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("voxels must be a non-empty 1D vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("voxels must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "voxels", v)

    def with_voxels(self, voxels) -> "FmriSample":
        return FmriSample(voxels, self.subject_id, self.image_id, self.class_id)

    def __eq__(self, other):
        if not isinstance(other, FmriSample):
            return NotImplemented
        return (self.subject_id == other.subject_id and self.image_id == other.image_id
                and self.class_id == other.class_id
                and np.array_equal(self.voxels, other.voxels))

    __hash__ = None


class PairedRecord(NamedTuple):
    sample: FmriSample
    image: np.ndarray
    class_id: int


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not (self.std > 0 and math.isfinite(self.std)):
            raise ValueError(f"degenerate normalization std: {self.std}")


@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 10
    samples_per_class: int = 20
    voxel_count: int = 256
    image_size: int = 32
    snr: float = 4.0
    seed: int = 0
    test_fraction: float = 0.2
    # Per-subject ROI length shrinks by ``length_jitter`` voxels per subject index.
    subject_count: int = 1
    length_jitter: int = 0
    # voxel-only samples for pretraining, drawn from the same class templates
    unpaired_per_class: int = 0

    def __post_init__(self):
        for name in ("class_count", "samples_per_class", "voxel_count", "image_size", "subject_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.unpaired_per_class < 0:
            raise ValueError("unpaired_per_class must be >= 0")
        if not self.snr > 0:
            raise ValueError("snr must be > 0")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")
        if self.length_jitter < 0 or self.voxel_count - (self.subject_count - 1) * self.length_jitter < 1:
            raise ValueError("length_jitter leaves a subject without voxels")


@dataclass(frozen=True)
class PairedDataset:
    train: list
    test: list
    norm_stats: Optional[NormStats]
    class_count: int
    templates: Optional[np.ndarray] = field(default=None, compare=False)
    unpaired: list = field(default_factory=list)

    def voxels(self, split: str = "train") -> np.ndarray:
        """Stack the voxel vectors of one split; requires equal lengths.

        ``split="pretrain"`` gives the train voxels followed by the unpaired ones.
        """
        if split == "pretrain":
            return np.stack([r.sample.voxels for r in self.train] + [s.voxels for s in self.unpaired])
        records = getattr(self, split)
        return np.stack([r.sample.voxels for r in records])

    def images(self, split: str = "train") -> np.ndarray:
        return np.stack([r.image for r in getattr(self, split)])

    def labels(self, split: str = "train") -> np.ndarray:
        return np.array([r.class_id for r in getattr(self, split)], dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, PairedDataset):
            return NotImplemented

        def same(a, b):
            return len(a) == len(b) and all(
                x.sample == y.sample and x.class_id == y.class_id and np.array_equal(x.image, y.image)
                for x, y in zip(a, b))

        return (self.class_count == other.class_count and self.norm_stats == other.norm_stats
                and same(self.train, other.train) and same(self.test, other.test)
                and len(self.unpaired) == len(other.unpaired)
                and all(a == b for a, b in zip(self.unpaired, other.unpaired)))

    __hash__ = None


# ---------------------------------------------------------------------------
# procedural renders

_SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")
_PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.05, 0.85, 0.85],
], dtype=np.float32)
_BACKGROUND = 0.5


def max_renderable_classes() -> int:
    return len(_SHAPES) * len(_PALETTE)


def _shape_mask(shape: str, size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = (yy - c) / size, (xx - c) / size
    r = np.hypot(dx, dy)
    if shape == "disk":
        return r <= 0.32
    if shape == "square":
        return (np.abs(dx) <= 0.28) & (np.abs(dy) <= 0.28)
    if shape == "triangle":
        return (dy <= 0.3) & (dy >= -0.32 + 2 * np.abs(dx) * 0.95)
    if shape == "cross":
        return ((np.abs(dx) <= 0.1) & (np.abs(dy) <= 0.36)) | ((np.abs(dy) <= 0.1) & (np.abs(dx) <= 0.36))
    if shape == "ring":
        return (r <= 0.36) & (r >= 0.2)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 0.36
    if shape == "hbar":
        return (np.abs(dy) <= 0.12) & (np.abs(dx) <= 0.4)
    if shape == "vbar":
        return (np.abs(dx) <= 0.12) & (np.abs(dy) <= 0.4)
    raise ValueError(shape)


def render_class_image(class_id: int, size: int) -> np.ndarray:
    """Deterministic H x W x 3 render of one class: a unique (shape, colour) pair."""
    if not 0 <= class_id < max_renderable_classes():
        raise ValueError(f"class {class_id} has no distinguishable render "
                         f"(at most {max_renderable_classes()} classes)")
    n_shapes = len(_SHAPES)
    shape = _SHAPES[class_id % n_shapes]
    colour = _PALETTE[(class_id % n_shapes + class_id // n_shapes) % len(_PALETTE)]
    img = np.full((size, size, 3), _BACKGROUND, dtype=np.float32)
    img[_shape_mask(shape, size)] = colour
    return img


# ---------------------------------------------------------------------------
# synthesis

def _make_templates(rng: np.random.Generator, n_classes: int, n_vox: int) -> np.ndarray:
    # a handful of smooth blobs per class; everything else stays at zero
    idx = np.arange(n_vox)
    templates = np.zeros((n_classes, n_vox))
    n_blobs = max(2, n_vox // 40)
    for c in range(n_classes):
        for _ in range(n_blobs):
            centre = rng.uniform(0, n_vox)
            width = rng.uniform(1.5, 4.0)
            amp = rng.choice([-1.0, 1.0]) * rng.uniform(1.0, 2.0)
            templates[c] += amp * np.exp(-0.5 * ((idx - centre) / width) ** 2)
        templates[c] /= templates[c].std()
    return templates


def generate_synthetic_dataset(spec: SynthSpec) -> PairedDataset:
    """Class templates plus Gaussian noise of scale ``1/snr``, paired with class renders.

    The split is stratified: the first ``round(test_fraction * samples_per_class)``
    samples of every class go to the test set.
    """
    if spec.class_count > max_renderable_classes():
        raise ValueError(f"class_count {spec.class_count} exceeds the {max_renderable_classes()} "
                         "distinguishable procedural renders")
    rng = np.random.default_rng(spec.seed)
    templates = _make_templates(rng, spec.class_count, spec.voxel_count)
    images = [render_class_image(c, spec.image_size) for c in range(spec.class_count)]
    for im in images:
        im.setflags(write=False)
    n_test = int(round(spec.test_fraction * spec.samples_per_class))
    noise_scale = 1.0 / spec.snr
    train, test = [], []
    image_id = 0
    for c in range(spec.class_count):
        for j in range(spec.samples_per_class):
            subject = j % spec.subject_count
            n_vox = spec.voxel_count - subject * spec.length_jitter
            noise = rng.standard_normal(spec.voxel_count)
            vox = (templates[c] + noise_scale * noise)[:n_vox]
            sample = FmriSample(vox.astype(np.float32), subject_id=subject, image_id=image_id, class_id=c)
            (test if j < n_test else train).append(PairedRecord(sample, images[c], c))
            image_id += 1
    # separate stream so the paired records do not depend on the unpaired count
    urng = np.random.default_rng([spec.seed, 1])
    unpaired = []
    for c in range(spec.class_count):
        for j in range(spec.unpaired_per_class):
            subject = j % spec.subject_count
            n_vox = spec.voxel_count - subject * spec.length_jitter
            vox = (templates[c] + noise_scale * urng.standard_normal(spec.voxel_count))[:n_vox]
            unpaired.append(FmriSample(vox.astype(np.float32), subject_id=subject, image_id=None, class_id=c))
    return PairedDataset(train, test, None, spec.class_count, templates=templates, unpaired=unpaired)


# ---------------------------------------------------------------------------
# preprocessing

def floor_count(fraction: float, n: int) -> int:
    """``floor(fraction * n)`` robust to binary round-off (0.29 * 100 -> 29)."""
    return int(math.floor(fraction * n + 1e-9))


def wrap_pad(voxels, target_len: int) -> np.ndarray:
    v = np.asarray(voxels)
    if target_len < len(v):
        raise ValueError(f"target_len {target_len} < input length {len(v)}")
    if len(v) == 0:
        raise ValueError("cannot wrap-pad an empty vector")
    return v[np.arange(target_len) % len(v)]


def constant_pad(voxels, target_len: int, value: float = 0.0) -> np.ndarray:
    v = np.asarray(voxels)
    if target_len < len(v):
        raise ValueError(f"target_len {target_len} < input length {len(v)}")
    out = np.full(target_len, value, dtype=v.dtype)
    out[:len(v)] = v
    return out


def pad_to_patch_boundary(voxels, patch_size: int) -> np.ndarray:
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    n = len(voxels)
    return wrap_pad(voxels, -(-n // patch_size) * patch_size)


def fit_norm_stats(train_samples: Sequence) -> NormStats:
    """Single global mean/std over every training voxel value."""
    if len(train_samples) < 2:
        raise ValueError("need at least 2 training samples")
    values = np.concatenate([np.asarray(getattr(s, "voxels", s), dtype=np.float64).ravel()
                             for s in train_samples])
    std = float(values.std())
    if not std > 0:
        raise ValueError("training voxels are constant; normalization std is zero")
    return NormStats(float(values.mean()), std)


def apply_norm(sample, stats: NormStats):
    if isinstance(sample, FmriSample):
        return sample.with_voxels(apply_norm(sample.voxels, stats))
    v = np.asarray(sample, dtype=np.float64)
    return ((v - stats.mean) / stats.std).astype(np.float32)


def random_sparsify(voxels, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    out = np.array(voxels, copy=True)
    k = floor_count(fraction, len(out))
    if k:
        out[rng.choice(len(out), size=k, replace=False)] = 0
    return out


def crop_box(size: int, crop_ratio: float, rng: np.random.Generator):
    min_side = min(size, math.ceil((1 - crop_ratio) * size - 1e-9))
    side = int(rng.integers(min_side, size + 1))
    # Beta(2, 2) offsets concentrate the window around the centre
    offset = int(round((size - side) * rng.beta(2.0, 2.0)))
    return side, offset


def random_crop_image(image, crop_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Centre-biased random crop resized back to the input size (bilinear)."""
    if not 0 <= crop_ratio < 1:
        raise ValueError("crop_ratio must be in [0, 1)")
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    sh, oy = crop_box(h, crop_ratio, rng)
    sw, ox = crop_box(w, crop_ratio, rng)
    if sh == h and sw == w:
        return img.copy()
    crop = torch.from_numpy(np.ascontiguousarray(img[oy:oy + sh, ox:ox + sw])).permute(2, 0, 1)[None]
    out = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy().copy()


def preprocess_dataset(dataset: PairedDataset, patch_size: int, pad_strategy: str = "wrap") -> PairedDataset:
    """Normalize with train statistics, then equalize lengths and pad to the patch boundary.

    ``pad_strategy`` handles unequal ROI lengths: ``wrap`` (wrap-around to the
    longest), ``constant`` (zeros after normalization) or ``cut`` (truncate to
    the shortest).
    """
    if pad_strategy not in ("wrap", "constant", "cut"):
        raise ValueError(f"unknown pad_strategy {pad_strategy!r}")
    stats = fit_norm_stats([r.sample for r in dataset.train])
    lengths = [len(r.sample.voxels) for r in dataset.train + dataset.test]
    lengths += [len(u.voxels) for u in dataset.unpaired]
    target = max(lengths) if pad_strategy != "cut" else min(lengths)
    target = -(-target // patch_size) * patch_size

    def prep_sample(sample: FmriSample) -> FmriSample:
        v = apply_norm(sample.voxels, stats)
        if pad_strategy == "cut":
            v = v[:min(lengths)]
            v = pad_to_patch_boundary(v, patch_size)
        elif pad_strategy == "wrap":
            v = wrap_pad(v, target)
        else:
            v = constant_pad(v, target)
        return sample.with_voxels(v)

    def prep(rec: PairedRecord) -> PairedRecord:
        return PairedRecord(prep_sample(rec.sample), rec.image, rec.class_id)

    return PairedDataset([prep(r) for r in dataset.train], [prep(r) for r in dataset.test],
                         stats, dataset.class_count, dataset.templates,
                         [prep_sample(u) for u in dataset.unpaired])


# ---------------------------------------------------------------------------
# binary format
#
#   "MVDS" u16 version
#   u32 n_train u32 n_test u32 class_count u32 H u32 W
#   u8 has_norm f64 mean f64 std
#   per record: i32 subject_id i32 class_id i32 image_id u32 voxel_len
#               f32[voxel_len] voxels, f32[H*W*3] image
#   u32 n_unpaired
#   per unpaired sample: i32 subject_id i32 class_id u32 voxel_len f32[voxel_len]

_DS_MAGIC = b"MVDS"
_DS_VERSION = 1


def save_dataset(dataset: PairedDataset, path) -> None:
    records = dataset.train + dataset.test
    if records:
        h, w = records[0].image.shape[:2]
    else:
        h = w = 0
    buf = bytearray()
    buf += _DS_MAGIC + struct.pack("<H", _DS_VERSION)
    buf += struct.pack("<5I", len(dataset.train), len(dataset.test), dataset.class_count, h, w)
    ns = dataset.norm_stats
    buf += struct.pack("<Bdd", ns is not None, ns.mean if ns else 0.0, ns.std if ns else 0.0)
    for rec in records:
        s = rec.sample
        if rec.image.shape != (h, w, 3):
            raise ValueError("all images must share one H x W x 3 shape")
        buf += struct.pack("<iiiI", s.subject_id, rec.class_id,
                           -1 if s.image_id is None else s.image_id, len(s.voxels))
        buf += np.asarray(s.voxels, dtype="<f4").tobytes()
        buf += np.asarray(rec.image, dtype="<f4").tobytes()
    buf += struct.pack("<I", len(dataset.unpaired))
    for s in dataset.unpaired:
        buf += struct.pack("<iiI", s.subject_id, -1 if s.class_id is None else s.class_id, len(s.voxels))
        buf += np.asarray(s.voxels, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetTruncatedError(f"file truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_dataset(path) -> PairedDataset:
    r = _Reader(Path(path).read_bytes())
    if len(r.data) < len(_DS_MAGIC):
        raise DatasetTruncatedError("file too short to hold a dataset header")
    if r.take(4) != _DS_MAGIC:
        raise DatasetFormatError("bad magic bytes; not an MVDS dataset")
    (version,) = r.unpack("<H")
    if version != _DS_VERSION:
        raise DatasetVersionError(f"dataset version {version} unsupported (expected {_DS_VERSION})")
    n_train, n_test, class_count, h, w = r.unpack("<5I")
    has_norm, mean, std = r.unpack("<Bdd")
    records = []
    for _ in range(n_train + n_test):
        subject, class_id, image_id, n_vox = r.unpack("<iiiI")
        vox = np.frombuffer(r.take(4 * n_vox), dtype="<f4").astype(np.float32)
        img = np.frombuffer(r.take(4 * h * w * 3), dtype="<f4").astype(np.float32).reshape(h, w, 3)
        sample = FmriSample(vox, subject, None if image_id < 0 else image_id, class_id)
        records.append(PairedRecord(sample, img, class_id))
    (n_unpaired,) = r.unpack("<I")
    unpaired = []
    for _ in range(n_unpaired):
        subject, class_id, n_vox = r.unpack("<iiI")
        vox = np.frombuffer(r.take(4 * n_vox), dtype="<f4").astype(np.float32)
        unpaired.append(FmriSample(vox, subject, None, None if class_id < 0 else class_id))
    if r.pos != len(r.data):
        raise DatasetFormatError(f"{len(r.data) - r.pos} trailing bytes after last record")
    stats = NormStats(float(mean), float(std)) if has_norm else None
    return PairedDataset(records[:n_train], records[n_train:], stats, class_count, unpaired=unpaired)


def export_csv(dataset: PairedDataset, path) -> None:
    """One row per record: split, subject, class, image id, then the voxel values."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "subject_id", "class_id", "image_id", "voxel_len", "voxels"])
        for split in ("train", "test"):
            for rec in getattr(dataset, split):
                s = rec.sample
                writer.writerow([split, s.subject_id, rec.class_id, s.image_id, len(s.voxels),
                                 " ".join(repr(float(x)) for x in s.voxels)])
        for s in dataset.unpaired:
            writer.writerow(["unpaired", s.subject_id, s.class_id, s.image_id, len(s.voxels),
                             " ".join(repr(float(x)) for x in s.voxels)])
