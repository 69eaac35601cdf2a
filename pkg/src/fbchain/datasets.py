"""Volume ingestion, ROI/slice preprocessing, noise slices and synthetic data."""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

HIPPOCAMPUS_LABELS = (0, 1, 2)


class VolumeError(ValueError):
    pass


@dataclass
class SegmentationSample:
    image: np.ndarray
    mask: np.ndarray
    subject_id: str = ""
    slice_index: int = -1
    is_noise: bool = False

    def validate(self) -> None:
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise ValueError(
                f"sample {self.subject_id}/{self.slice_index}: image {self.image.shape} "
                f"and mask {self.mask.shape} must be equal 2D shapes"
            )
        if not np.isfinite(self.image).all():
            raise ValueError(f"sample {self.subject_id}/{self.slice_index}: non-finite image values")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"sample {self.subject_id}/{self.slice_index}: mask is not binary")


@dataclass
class VolumeRecord:
    voxels: np.ndarray
    labels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    subject_id: str = ""
    origin: Tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.voxels.shape != self.labels.shape:
            raise VolumeError(
                f"{self.subject_id}: image shape {self.voxels.shape} != label shape {self.labels.shape}"
            )
        if self.voxels.ndim != 3:
            raise VolumeError(f"{self.subject_id}: expected a 3D volume, got {self.voxels.ndim} axes")
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"{self.subject_id}: spacing must be positive, got {self.spacing}")

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0


# -- raw fallback format ------------------------------------------------------
#
# header (little-endian): magic b"FBVOL\x00" | u8 version | u8 dtype code |
#   3 x u32 dims | 3 x f64 spacing; body: prod(dims) voxels, C order.

RAW_MAGIC = b"FBVOL\x00"
RAW_DTYPES = ("<f4", "<f8", "<i2", "<i4", "|u1", "<u2")
_RAW_HEADER = struct.Struct("<6sBB3I3d")


def write_raw_volume(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    array = np.asarray(array)
    if array.ndim != 3:
        raise VolumeError(f"raw volumes are 3D, got shape {array.shape}")
    code = RAW_DTYPES.index(array.dtype.newbyteorder("<").str if array.dtype.byteorder == ">" else array.dtype.str)
    header = _RAW_HEADER.pack(RAW_MAGIC, 1, code, *array.shape, *map(float, spacing))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array, dtype=np.dtype(RAW_DTYPES[code])).tobytes())


def read_raw_volume(path) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    blob = Path(path).read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise VolumeError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, code, d0, d1, d2, s0, s1, s2 = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC or version != 1:
        raise VolumeError(f"{path}: not a raw volume (magic {magic!r}, version {version})")
    if code >= len(RAW_DTYPES):
        raise VolumeError(f"{path}: unknown dtype code {code}")
    dtype = np.dtype(RAW_DTYPES[code])
    body = len(blob) - _RAW_HEADER.size
    expected = d0 * d1 * d2 * dtype.itemsize
    if body != expected:
        raise VolumeError(
            f"{path}: header dims {d0}x{d1}x{d2} ({dtype}) need {expected} bytes, body has {body}"
        )
    arr = np.frombuffer(blob, dtype=dtype, offset=_RAW_HEADER.size).reshape(d0, d1, d2).copy()
    return arr, (s0, s1, s2)


def _is_nifti(path) -> bool:
    name = str(path).lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def _read_any(path) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    if _is_nifti(path):
        import nibabel as nib

        try:
            img = nib.load(str(path))
            data = np.asanyarray(img.dataobj)
        except Exception as exc:  # nibabel raises a zoo of types for bad headers
            raise VolumeError(f"{path}: cannot read NIfTI ({exc})") from exc
        if data.ndim == 4 and data.shape[-1] == 1:
            data = data[..., 0]
        zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
        return data, zooms
    return read_raw_volume(path)


def load_volume(image_path, label_path=None, subject_id: Optional[str] = None) -> VolumeRecord:
    """Read an image (and optional label) volume in NIfTI or raw format."""
    voxels, spacing = _read_any(image_path)
    if voxels.ndim != 3:
        raise VolumeError(f"{image_path}: expected 3 dimensions, got shape {voxels.shape}")
    if label_path is not None:
        labels, _ = _read_any(label_path)
        if labels.shape != voxels.shape:
            raise VolumeError(
                f"shape mismatch between image {image_path} {voxels.shape} "
                f"and label {label_path} {labels.shape}"
            )
        labels = np.rint(labels).astype(np.int16)
        bad = np.setdiff1d(np.unique(labels), HIPPOCAMPUS_LABELS)
        if bad.size:
            raise VolumeError(f"{label_path}: label values {bad.tolist()} outside {HIPPOCAMPUS_LABELS}")
    else:
        labels = np.zeros(voxels.shape, dtype=np.int16)
    if subject_id is None:
        subject_id = Path(image_path).name.split(".")[0]
    return VolumeRecord(voxels.astype(np.float32), labels, spacing, subject_id)


# -- preprocessing -----------------------------------------------------------


def zscore(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    std = x.std()
    out = x - x.mean()
    if std > 0:
        out /= std
    return out.astype(np.float32)


def extract_roi(v: VolumeRecord, size: int = 32, center: Optional[Sequence[float]] = None) -> VolumeRecord:
    """Crop a ``size``-cube around the foreground centroid (or ``center``).

    Out-of-bounds parts of the cube are zero-padded; intensities are
    z-scored inside the cube.
    """
    if center is None:
        fg = np.argwhere(v.foreground)
        if fg.size == 0:
            raise VolumeError(f"{v.subject_id}: empty foreground and no center override")
        center = fg.mean(axis=0)
    # floor(c + 0.5) keeps integer shifts exact (np.round is half-to-even)
    origin = tuple(int(math.floor(c + 0.5)) - size // 2 for c in center)

    vox = np.zeros((size,) * 3, dtype=np.float32)
    lab = np.zeros((size,) * 3, dtype=v.labels.dtype)
    src, dst = [], []
    for o, n in zip(origin, v.voxels.shape):
        lo, hi = max(o, 0), min(o + size, n)
        if hi <= lo:
            src.append(slice(0, 0))
            dst.append(slice(0, 0))
        else:
            src.append(slice(lo, hi))
            dst.append(slice(lo - o, hi - o))
    vox[tuple(dst)] = v.voxels[tuple(src)]
    lab[tuple(dst)] = v.labels[tuple(src)]
    return VolumeRecord(zscore(vox), lab, v.spacing, v.subject_id, origin)


def slice_volume(v: VolumeRecord, min_slices: int = 12, max_slices: int = 20, axis: int = 2) -> List[SegmentationSample]:
    """Pick adjacent depth slices around the largest-area mask slice."""
    if min_slices > max_slices:
        raise ValueError(f"min_slices {min_slices} > max_slices {max_slices}")
    fg = v.foreground
    depth = fg.shape[axis]
    other = tuple(a for a in range(3) if a != axis)
    area = fg.sum(axis=other)
    if not area.any():
        return []
    peak = int(np.argmax(area))
    lo = peak
    while lo > 0 and area[lo - 1] > 0:
        lo -= 1
    hi = peak + 1
    while hi < depth and area[hi] > 0:
        hi += 1
    run = hi - lo

    if run > max_slices:
        start = peak - max_slices // 2
        start = min(max(start, lo), hi - max_slices)
        stop = start + max_slices
    elif run < min_slices:
        deficit = min(min_slices, depth) - run
        start = lo - deficit // 2
        stop = hi + (deficit - deficit // 2)
        if start < 0:
            stop -= start
            start = 0
        if stop > depth:
            start -= stop - depth
            stop = depth
    else:
        start, stop = lo, hi

    samples = []
    for k in range(start, stop):
        img = np.take(v.voxels, k, axis=axis)
        msk = np.take(fg, k, axis=axis).astype(np.uint8)
        samples.append(SegmentationSample(img.astype(np.float32), msk, v.subject_id, k, False))
    return samples


def _fit(arr: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Center-crop or zero-pad a 2D array to ``shape``."""
    out = np.zeros(shape, dtype=arr.dtype)
    src, dst = [], []
    for n, m in zip(arr.shape, shape):
        if n >= m:
            a = (n - m) // 2
            src.append(slice(a, a + m))
            dst.append(slice(0, m))
        else:
            a = (m - n) // 2
            src.append(slice(0, n))
            dst.append(slice(a, a + n))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def noise_count(n_real: int, fraction: float) -> int:
    """Number k of noise slices with k == round(fraction * (n_real + k))."""
    if not 0 <= fraction < 1:
        raise ValueError(f"noise fraction must be in [0, 1), got {fraction}")
    return int(math.floor(fraction * n_real / (1 - fraction) + 0.5))


def inject_noise_slices(samples: List[SegmentationSample], volume_pool: Sequence[VolumeRecord],
                        fraction: float = 1 / 3, rng: Optional[np.random.Generator] = None,
                        axis: int = 2) -> List[SegmentationSample]:
    """Append empty-mask slices until they make up ``fraction`` of the result."""
    need = noise_count(len(samples), fraction)
    if need == 0:
        return list(samples)
    rng = rng if rng is not None else np.random.default_rng(0)
    shape = samples[0].image.shape if samples else None
    candidates = []
    for vi, v in enumerate(volume_pool):
        fg = v.foreground
        other = tuple(a for a in range(3) if a != axis)
        empty = np.flatnonzero(fg.sum(axis=other) == 0)
        candidates.extend((vi, int(k)) for k in empty)
    if len(candidates) < need:
        log.warning("only %d empty slices available for %d requested noise slices (%d short)",
                    len(candidates), need, need - len(candidates))
    take = min(need, len(candidates))
    picks = rng.choice(len(candidates), size=take, replace=False) if take else []
    out = list(samples)
    for p in sorted(int(i) for i in picks):
        vi, k = candidates[p]
        v = volume_pool[vi]
        img = np.take(v.voxels, k, axis=axis).astype(np.float32)
        if shape is not None and img.shape != shape:
            img = _fit(img, shape)
        out.append(SegmentationSample(img, np.zeros(img.shape, np.uint8), v.subject_id, k, True))
    return out


# -- synthetic data ----------------------------------------------------------


def _ellipse_radius(yy, xx, cy, cx, a, b, theta):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / a
    w = (-dx * s + dy * c) / b
    return np.sqrt(u * u + w * w)


def _synth_one(rng: np.random.Generator, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    scale = size / 32.0
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=1.5 * scale)
    texture /= texture.std() + 1e-12
    image = 0.15 * texture
    mask = np.zeros((size, size), dtype=bool)
    occupied = np.zeros((size, size), dtype=bool)

    def blob(level):
        a = rng.uniform(2.5, 6.5) * scale
        b = rng.uniform(1.5, 3.5) * scale
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
        r = _ellipse_radius(yy, xx, cy, cx, a, b, rng.uniform(0, math.pi))
        soft = 1.0 / (1.0 + np.exp((r - 1.0) / 0.12))
        return r <= 1.0, level * soft

    n_target = int(rng.integers(1, 3))
    for _ in range(n_target):
        inside, profile = blob(rng.uniform(0.9, 1.2))
        image += profile
        mask |= inside
        occupied |= ndimage.binary_dilation(inside, iterations=2)
    for _ in range(int(rng.integers(1, 3))):
        for _attempt in range(10):
            level = rng.choice([rng.uniform(0.2, 0.45), rng.uniform(1.8, 2.3)])
            inside, profile = blob(level)
            if not (inside & occupied).any():
                image += profile
                occupied |= inside
                break
    image += 0.06 * rng.standard_normal((size, size))
    return zscore(image), mask.astype(np.uint8)


def synth_dataset(n: int, size: int = 32, seed: int = 0, per_subject: int = 1) -> List[SegmentationSample]:
    """Soft-edged elliptical targets among distractor blobs of other intensities.

    Every mask covers between 1% and 25% of the image; draws outside that
    band are rejected and redrawn.
    """
    if n < 1 or size < 16:
        raise ValueError(f"need n >= 1 and size >= 16, got n={n}, size={size}")
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        while True:
            image, mask = _synth_one(rng, size)
            frac = mask.mean()
            if 0.01 <= frac <= 0.25:
                break
        out.append(SegmentationSample(image, mask, f"synth{seed}-{k // per_subject:04d}", k % per_subject, False))
    return out


def synth_volume(size: int = 48, seed: int = 0, subject_id: str = "vol") -> VolumeRecord:
    """A small volume with an ellipsoidal labelled structure, for pipeline tests."""
    rng = np.random.default_rng(seed)
    zz, yy, xx = np.mgrid[0:size, 0:size, 0:size].astype(np.float64)
    c = rng.uniform(0.35 * size, 0.65 * size, size=3)
    axes = rng.uniform(0.08 * size, 0.2 * size, size=3)
    r = np.sqrt(((zz - c[0]) / axes[0]) ** 2 + ((yy - c[1]) / axes[1]) ** 2 + ((xx - c[2]) / axes[2]) ** 2)
    labels = np.where(r <= 1.0, np.where(xx < c[2], 1, 2), 0).astype(np.int16)
    vox = ndimage.gaussian_filter(rng.standard_normal((size,) * 3), 1.0) + 1.5 / (1 + np.exp((r - 1) / 0.1))
    return VolumeRecord(vox.astype(np.float32), labels, (1.0, 1.0, 1.0), subject_id)


# -- containers & persistence ------------------------------------------------


def stack_samples(samples: Sequence[SegmentationSample]):
    """Arrays (N, 1, H, W) float32 images and masks."""
    if not samples:
        return np.zeros((0, 1, 0, 0), np.float32), np.zeros((0, 1, 0, 0), np.float32)
    images = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    masks = np.stack([s.mask for s in samples])[:, None].astype(np.float32)
    return images, masks


def save_samples(path, samples: Sequence[SegmentationSample]) -> None:
    images, masks = stack_samples(samples)
    np.savez_compressed(
        path,
        images=images[:, 0],
        masks=masks[:, 0].astype(np.uint8),
        subject_ids=np.array([s.subject_id for s in samples], dtype=str),
        slice_index=np.array([s.slice_index for s in samples], dtype=np.int64),
        is_noise=np.array([s.is_noise for s in samples], dtype=bool),
    )


def load_samples(path) -> List[SegmentationSample]:
    with np.load(path) as z:
        return [
            SegmentationSample(img, msk, str(sid), int(k), bool(noise))
            for img, msk, sid, k, noise in zip(
                z["images"], z["masks"], z["subject_ids"], z["slice_index"], z["is_noise"]
            )
        ]


def assign_folds(subject_ids: Iterable[str], folds: int, seed: int = 0) -> Dict[str, int]:
    """Seeded subject-disjoint fold assignment (round-robin over a permutation)."""
    subjects = sorted(set(subject_ids))
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if folds > len(subjects):
        raise ValueError(f"{folds} folds requested but only {len(subjects)} subjects")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return {subjects[i]: pos % folds for pos, i in enumerate(order)}


def split_fold(samples: Sequence[SegmentationSample], fold_of: Dict[str, int], test_fold: int,
               val_fraction: float = 0.1, seed: int = 0):
    """Test = subjects in ``test_fold``; the rest split train/val by subject."""
    test = [s for s in samples if fold_of[s.subject_id] == test_fold]
    rest_subjects = sorted({s.subject_id for s in samples if fold_of[s.subject_id] != test_fold})
    rng = np.random.default_rng(seed)
    perm = [rest_subjects[i] for i in rng.permutation(len(rest_subjects))]
    n_val = max(1, int(round(val_fraction * len(perm)))) if len(perm) > 1 else 0
    val_subjects = set(perm[:n_val])
    train = [s for s in samples if fold_of[s.subject_id] != test_fold and s.subject_id not in val_subjects]
    val = [s for s in samples if s.subject_id in val_subjects]
    return train, val, test
