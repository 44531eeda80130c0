"""Sample assembly, rotation augmentation, temporal sequencing, and crops.

On disk a dataset root holds ``lbev/NNNN.png`` (3-channel), ``cregion/NNNN.png``
and ``gt/NNNN.png`` (single-channel class indices) with matching zero-padded
ids; augmented copies carry a ``_pDD`` / ``_mDD`` rotation suffix.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pngio

__all__ = [
    "Sample",
    "SequenceSample",
    "DatasetSplit",
    "DatasetError",
    "TEST_ID_FIRST",
    "TEST_ID_LAST",
    "load_dataset",
    "make_split",
    "rotate_augment",
    "expand_training_set",
    "make_sequences",
    "random_crop_sequence",
    "center_crop_sequence",
    "to_network_inputs",
    "rotation_suffix",
]

# Held-out frame ids (inclusive): these never enter training sequences.
TEST_ID_FIRST, TEST_ID_LAST = 81, 148

RASTER_SIZE = 400  # required size for on-disk datasets
CREGION_CLASSES = 6  # camera maps never contain the LBEV-only 7th class
GT_CLASSES = 7

AUGMENT_DEGREES = tuple(range(-20, 0)) + tuple(range(1, 21))


class DatasetError(ValueError):
    """A dataset directory or sample violates the layout contract."""


@dataclass
class Sample:
    """Aligned rasters for one frame: LBEV image, camera label map, ground truth.

    The three rasters must agree in size and be square; gt may be None for
    prediction-only inputs. The 400x400 requirement is enforced at the
    on-disk loading boundary, not here, so synthetic desk-scale samples can
    be smaller.
    """

    lbev: np.ndarray
    c_region: np.ndarray
    gt: np.ndarray | None
    frame_id: int
    rotation_deg: int = 0

    def __post_init__(self):
        self.lbev = np.asarray(self.lbev, dtype=np.uint8)
        self.c_region = np.asarray(self.c_region, dtype=np.uint8)
        if self.lbev.ndim != 3 or self.lbev.shape[2] != 3 or self.lbev.shape[0] != self.lbev.shape[1]:
            raise DatasetError(f"LBEV raster must be square SxSx3, got {self.lbev.shape}")
        s = self.lbev.shape[0]
        if self.c_region.shape != (s, s):
            raise DatasetError(
                f"frame {self.frame_id}: c_region shape {self.c_region.shape} "
                f"does not match LBEV size {s}")
        if self.c_region.size and self.c_region.max() >= CREGION_CLASSES:
            raise DatasetError(
                f"frame {self.frame_id}: c_region label {int(self.c_region.max())} "
                f"outside [0, {CREGION_CLASSES})")
        if self.gt is not None:
            self.gt = np.asarray(self.gt, dtype=np.uint8)
            if self.gt.shape != (s, s):
                raise DatasetError(
                    f"frame {self.frame_id}: gt shape {self.gt.shape} does not match LBEV size {s}")
            if self.gt.size and self.gt.max() >= GT_CLASSES:
                raise DatasetError(
                    f"frame {self.frame_id}: gt label {int(self.gt.max())} outside [0, {GT_CLASSES})")

    @property
    def size(self) -> int:
        return self.lbev.shape[0]


@dataclass
class SequenceSample:
    """Strictly consecutive frames sharing one rotation angle."""

    frames: list
    rotation_deg: int = 0

    def __post_init__(self):
        if not self.frames:
            raise DatasetError("a sequence needs at least one frame")
        ids = [f.frame_id for f in self.frames]
        if any(b - a != 1 for a, b in zip(ids, ids[1:])):
            raise DatasetError(f"sequence frame ids are not consecutive: {ids}")
        if any(f.rotation_deg != self.rotation_deg for f in self.frames):
            raise DatasetError("all frames of a sequence must share rotation_deg")

    @property
    def time_step(self) -> int:
        return len(self.frames)

    @property
    def frame_ids(self) -> list:
        return [f.frame_id for f in self.frames]


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list

    def __post_init__(self):
        overlap = set(self.test) & (set(self.train) | set(self.validation))
        if overlap:
            raise DatasetError(f"test ids leak into train/validation: {sorted(overlap)}")


def make_split(frame_ids) -> DatasetSplit:
    """Hold out ids 81..148 for testing; the rest train (rotated copies) and
    validate (originals)."""
    ids = sorted(set(int(i) for i in frame_ids))
    test = [i for i in ids if TEST_ID_FIRST <= i <= TEST_ID_LAST]
    rest = [i for i in ids if not (TEST_ID_FIRST <= i <= TEST_ID_LAST)]
    return DatasetSplit(train=rest, validation=list(rest), test=test)


_STEM_RE = re.compile(r"^(\d+)(?:_([pm])(\d{2}))?$")


def _parse_stem(stem: str):
    m = _STEM_RE.match(stem)
    if not m:
        return None
    rot = 0
    if m.group(2):
        rot = int(m.group(3)) * (1 if m.group(2) == "p" else -1)
    return int(m.group(1)), rot


def rotation_suffix(degrees: int) -> str:
    if degrees == 0:
        return ""
    return f"_{'p' if degrees > 0 else 'm'}{abs(degrees):02d}"


def load_dataset(root, require_gt: bool = True) -> list:
    """Load aligned (LBEV, C-Region, gt) triples, sorted by frame id.

    Every id present in one subdirectory must be present in the others;
    rasters must be 400x400 with in-range label values.
    """
    root = Path(root)
    dirs = {"lbev": root / "lbev", "cregion": root / "cregion", "gt": root / "gt"}
    needed = ["lbev", "cregion"] + (["gt"] if require_gt else [])
    for name in needed:
        if not dirs[name].is_dir():
            raise DatasetError(f"missing dataset subdirectory: {dirs[name]}")
    have_gt = dirs["gt"].is_dir()

    keys = {}
    for name in (needed + (["gt"] if have_gt and "gt" not in needed else [])):
        found = {}
        for p in sorted(dirs[name].glob("*.png")):
            parsed = _parse_stem(p.stem)
            if parsed is not None:
                found[parsed] = p
        keys[name] = found

    ref = set(keys["lbev"])
    for name in keys:
        missing = sorted(ref - set(keys[name])) + sorted(set(keys[name]) - ref)
        if missing:
            ids = ", ".join(f"{i}{rotation_suffix(r)}" for i, r in missing[:10])
            raise DatasetError(f"mismatched ids between lbev/ and {name}/: {ids}")

    samples = []
    for key in sorted(ref):
        fid, rot = key
        lbev = pngio.read_rgb_png(keys["lbev"][key])
        creg = pngio.read_gray_png(keys["cregion"][key])
        gt = pngio.read_gray_png(keys["gt"][key]) if key in keys.get("gt", {}) else None
        for name, arr in (("lbev", lbev), ("cregion", creg), ("gt", gt)):
            if arr is not None and arr.shape[:2] != (RASTER_SIZE, RASTER_SIZE):
                raise DatasetError(
                    f"{name}/{keys[needed[0]][key].name}: raster is {arr.shape[:2]}, "
                    f"expected {RASTER_SIZE}x{RASTER_SIZE}")
        samples.append(Sample(lbev, creg, gt, frame_id=fid, rotation_deg=rot))
    return samples


# ---------------------------------------------------------------------------
# rotation augmentation


def _source_coords(size: int, degrees: float):
    """Inverse-map source coordinates for a rotation about the image center."""
    th = math.radians(degrees)
    c = (size - 1) / 2.0
    cos_t, sin_t = math.cos(th), math.sin(th)
    rr, cc = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    dy, dx = rr - c, cc - c
    src_r = c + cos_t * dy + sin_t * dx
    src_c = c - sin_t * dy + cos_t * dx
    return src_r, src_c


def _rotate_nearest(labels: np.ndarray, src_r, src_c) -> np.ndarray:
    size = labels.shape[0]
    r = np.rint(src_r).astype(np.int64)
    c = np.rint(src_c).astype(np.int64)
    inside = (r >= 0) & (r < size) & (c >= 0) & (c < size)
    out = np.zeros_like(labels)
    out[inside] = labels[np.clip(r, 0, size - 1), np.clip(c, 0, size - 1)][inside]
    return out


def _rotate_bilinear(img: np.ndarray, src_r, src_c) -> np.ndarray:
    size = img.shape[0]
    inside = (src_r >= 0) & (src_r <= size - 1) & (src_c >= 0) & (src_c <= size - 1)
    r = np.clip(src_r, 0, size - 1)
    c = np.clip(src_c, 0, size - 1)
    r0 = np.minimum(np.floor(r).astype(np.int64), size - 2)
    c0 = np.minimum(np.floor(c).astype(np.int64), size - 2)
    fr = (r - r0)[..., None]
    fc = (c - c0)[..., None]
    f = img.astype(np.float64)
    out = ((1 - fr) * ((1 - fc) * f[r0, c0] + fc * f[r0, c0 + 1])
           + fr * ((1 - fc) * f[r0 + 1, c0] + fc * f[r0 + 1, c0 + 1]))
    out[~inside] = 0.0
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _rotate_sample(sample: Sample, degrees: int) -> Sample:
    src_r, src_c = _source_coords(sample.size, degrees)
    lbev = _rotate_bilinear(sample.lbev, src_r, src_c)
    creg = _rotate_nearest(sample.c_region, src_r, src_c)
    gt = None if sample.gt is None else _rotate_nearest(sample.gt, src_r, src_c)
    return Sample(lbev, creg, gt, frame_id=sample.frame_id, rotation_deg=degrees)


def rotate_augment(sample: Sample, degrees: int) -> Sample:
    """Rotate about the image center: LBEV bilinearly, label maps nearest-neighbor.

    Out-of-image regions fill with 0/Background; the frame id is preserved and
    the rotation recorded on the new sample.
    """
    if degrees == 0 or abs(degrees) > 20:
        raise ValueError(f"rotation must be a nonzero angle in [-20, 20] degrees, got {degrees}")
    return _rotate_sample(sample, degrees)


def expand_training_set(samples) -> list:
    """40 rotated copies (+-1..+-20 degrees) of every training sample."""
    return [rotate_augment(s, d) for s in samples for d in AUGMENT_DEGREES]


# ---------------------------------------------------------------------------
# sequences and crops


def make_sequences(samples, time_step: int) -> list:
    """Stride-1 sliding windows over consecutive frame ids within one rotation.

    Windows that would cross a gap in the frame ids are not emitted.
    """
    if time_step < 1:
        raise ValueError(f"time_step must be >= 1, got {time_step}")
    by_rotation: dict[int, list] = {}
    for s in samples:
        by_rotation.setdefault(s.rotation_deg, []).append(s)
    sequences = []
    for rot in sorted(by_rotation):
        group = sorted(by_rotation[rot], key=lambda s: s.frame_id)
        for start in range(len(group) - time_step + 1):
            window = group[start:start + time_step]
            ids = [f.frame_id for f in window]
            if all(b - a == 1 for a, b in zip(ids, ids[1:])):
                sequences.append(SequenceSample(window, rotation_deg=rot))
    return sequences


def _crop_sequence(seq: SequenceSample, size: int, dr: int, dc: int) -> SequenceSample:
    frames = [
        Sample(
            f.lbev[dr:dr + size, dc:dc + size],
            f.c_region[dr:dr + size, dc:dc + size],
            None if f.gt is None else f.gt[dr:dr + size, dc:dc + size],
            frame_id=f.frame_id,
            rotation_deg=f.rotation_deg,
        )
        for f in seq.frames
    ]
    return SequenceSample(frames, rotation_deg=seq.rotation_deg)


def random_crop_sequence(seq: SequenceSample, size: int, rng) -> SequenceSample:
    """One random offset per sequence, applied identically to every frame and raster."""
    s = seq.frames[0].size
    if size > s:
        raise ValueError(f"crop size {size} exceeds raster size {s}")
    if size == s:
        return seq
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    dr = int(rng.integers(0, s - size + 1))
    dc = int(rng.integers(0, s - size + 1))
    return _crop_sequence(seq, size, dr, dc)


def center_crop_sequence(seq: SequenceSample, size: int) -> SequenceSample:
    s = seq.frames[0].size
    if size > s:
        raise ValueError(f"crop size {size} exceeds raster size {s}")
    if size == s:
        return seq
    off = (s - size) // 2
    return _crop_sequence(seq, size, off, off)


def to_network_inputs(sample: Sample) -> tuple[np.ndarray, np.ndarray]:
    """LBEV as 3xSxS floats in [0, 1]; C-Region as 1xSxS normalized class indices."""
    lbev = sample.lbev.astype(np.float32).transpose(2, 0, 1) / 255.0
    creg = sample.c_region.astype(np.float32)[None] / float(CREGION_CLASSES)
    return lbev, creg
