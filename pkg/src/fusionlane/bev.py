"""Bird's-eye-view rasters: the 3-channel LIDAR grid image, the camera
homography warp, and label-map color rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import PointCloudFrame, X_MAX, Y_MAX, roi_mask

__all__ = [
    "GRID_SIZE",
    "CELL_METERS",
    "PALETTE",
    "LbevImage",
    "CbevImage",
    "GridCellStats",
    "world_to_pixel",
    "rasterize_lbev",
    "ipm_transform",
    "colorize_labels",
    "labels_from_colors",
    "load_homography",
]

GRID_SIZE = 400
CELL_METERS = 0.05

# class index -> RGB: background, solid line, dotted line, stop line, arrow,
# prohibited area, other point
PALETTE = np.array(
    [
        [0, 0, 0],
        [255, 0, 0],
        [0, 255, 0],
        [128, 0, 128],
        [255, 255, 0],
        [0, 0, 255],
        [255, 255, 255],
    ],
    dtype=np.uint8,
)


@dataclass
class LbevImage:
    """400x400x3 byte raster: intensity, mean height, neighborhood height deviation."""

    pixels: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (GRID_SIZE, GRID_SIZE, 3):
            raise ValueError(f"LBEV raster must be {GRID_SIZE}x{GRID_SIZE}x3, got {self.pixels.shape}")

    def channel(self, i: int) -> np.ndarray:
        return self.pixels[:, :, i]


@dataclass
class CbevImage:
    """400x400 RGB top-down view warped from the front camera."""

    pixels: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (GRID_SIZE, GRID_SIZE, 3):
            raise ValueError(f"CBEV raster must be {GRID_SIZE}x{GRID_SIZE}x3, got {self.pixels.shape}")


def world_to_pixel(x: float, y: float) -> tuple[int, int]:
    """Grid cell of an in-ROI point; row 0 is the far edge, col 0 the left edge.

    The inclusive lower ROI bounds (x = 6, y = -10) fall on the outer edge of
    the last cell, so indices clamp to 399 there; everything else floors
    directly into [0, 400).
    """
    if not (6.0 <= x < 26.0 and -10.0 <= y < 10.0):
        raise ValueError(f"point ({x}, {y}) is outside the rasterization region; filter first")
    row = min(int(math.floor((X_MAX - float(x)) / CELL_METERS)), GRID_SIZE - 1)
    col = min(int(math.floor((Y_MAX - float(y)) / CELL_METERS)), GRID_SIZE - 1)
    return row, col


def _grid_indices(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # vectorized form of world_to_pixel, identical float64 arithmetic
    rows = np.floor((X_MAX - points[:, 0].astype(np.float64)) / CELL_METERS).astype(np.int64)
    cols = np.floor((Y_MAX - points[:, 1].astype(np.float64)) / CELL_METERS).astype(np.int64)
    return np.minimum(rows, GRID_SIZE - 1), np.minimum(cols, GRID_SIZE - 1)


@dataclass
class GridCellStats:
    """Per-cell accumulators over the 400x400 grid, float64, indexed [row, col]."""

    n: np.ndarray
    sum_i: np.ndarray
    sum_hs: np.ndarray
    sum_h: np.ndarray
    sum_h2: np.ndarray

    @classmethod
    def from_frame(cls, frame: PointCloudFrame) -> "GridCellStats":
        shape = (GRID_SIZE, GRID_SIZE)
        stats = cls(*(np.zeros(shape) for _ in range(5)))
        if len(frame):
            rows, cols = _grid_indices(frame.points)
            h = frame.points[:, 2].astype(np.float64)
            i = frame.points[:, 3].astype(np.float64)
            np.add.at(stats.n, (rows, cols), 1.0)
            np.add.at(stats.sum_i, (rows, cols), i)
            np.add.at(stats.sum_hs, (rows, cols), h + 2.0)
            np.add.at(stats.sum_h, (rows, cols), h)
            np.add.at(stats.sum_h2, (rows, cols), h * h)
        return stats


def _box_sum(a: np.ndarray) -> np.ndarray:
    """Sum of each cell and its existing neighbors in the 3x3 window (zero border)."""
    p = np.pad(a, 1)
    out = np.zeros_like(a)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            out += p[dr:dr + GRID_SIZE, dc:dc + GRID_SIZE]
    return out


def rasterize_lbev(frame: PointCloudFrame, check_roi: bool = True) -> LbevImage:
    """Encode a filtered point cloud as the 3-channel byte raster.

    Channel 0: floor(255 * mean intensity) per cell.
    Channel 1: floor(255 * mean (height + 2)) per cell.
    Channel 2: floor(255 * (2/pi) * atan(population std of height)) where the
    moments aggregate the cell and its 8 neighbors. Empty cells/windows are 0.
    """
    pts = frame.points
    if len(frame):
        mask = roi_mask(pts)
        if check_roi and not mask.all():
            bad = pts[~mask][0]
            raise ValueError(
                f"frame {frame.frame_id} contains a point outside the region of interest "
                f"({bad[0]:.3f}, {bad[1]:.3f}, {bad[2]:.3f}); run filter_roi first")
        if not mask.all():
            frame = PointCloudFrame(frame.frame_id, pts[mask].copy())

    stats = GridCellStats.from_frame(frame)
    occupied = stats.n > 0
    n_safe = np.maximum(stats.n, 1.0)

    f_chan = np.where(occupied, np.floor(stats.sum_i / n_safe * 255.0), 0.0)
    s_chan = np.where(occupied, np.floor(stats.sum_hs / n_safe * 255.0), 0.0)

    wn = _box_sum(stats.n)
    wh = _box_sum(stats.sum_h)
    wh2 = _box_sum(stats.sum_h2)
    wn_safe = np.maximum(wn, 1.0)
    mean = wh / wn_safe
    var = np.maximum(wh2 / wn_safe - mean * mean, 0.0)
    t_chan = np.where(wn > 0, np.floor(255.0 * (2.0 / np.pi) * np.arctan(np.sqrt(var))), 0.0)

    pixels = np.stack([f_chan, s_chan, t_chan], axis=-1).astype(np.uint8)
    return LbevImage(pixels, frame.frame_id)


def load_homography(path) -> np.ndarray:
    """Read a 3x3 homography from a text file of 9 numbers, row-major."""
    values = [float(v) for v in Path(path).read_text().split()]
    if len(values) != 9:
        raise ValueError(f"{path}: homography file must contain 9 numbers, found {len(values)}")
    return np.array(values, dtype=np.float64).reshape(3, 3)


def ipm_transform(front_image: np.ndarray, homography: np.ndarray,
                  frame_id: int = 0) -> CbevImage:
    """Warp a front-view RGB image into the 400x400 top-down view.

    For every output pixel (col=x, row=y) the source is sampled bilinearly at
    homography @ (x, y, 1); samples outside the source are black.
    """
    hmat = np.asarray(homography, dtype=np.float64).reshape(3, 3)
    det = np.linalg.det(hmat)
    if abs(det) <= 1e-9:
        raise ValueError(f"homography is singular (|det| = {abs(det):.3e})")
    img = np.asarray(front_image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"front image must be HxWx3, got shape {img.shape}")
    src_h, src_w = img.shape[:2]

    ys, xs = np.meshgrid(np.arange(GRID_SIZE, dtype=np.float64),
                         np.arange(GRID_SIZE, dtype=np.float64), indexing="ij")
    sx = hmat[0, 0] * xs + hmat[0, 1] * ys + hmat[0, 2]
    sy = hmat[1, 0] * xs + hmat[1, 1] * ys + hmat[1, 2]
    sw = hmat[2, 0] * xs + hmat[2, 1] * ys + hmat[2, 2]

    valid = np.abs(sw) > 1e-12
    sw_safe = np.where(valid, sw, 1.0)
    u = sx / sw_safe
    v = sy / sw_safe
    valid &= (u >= 0) & (u <= src_w - 1) & (v >= 0) & (v <= src_h - 1)

    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    x0 = np.minimum(np.floor(u).astype(np.int64), max(src_w - 2, 0))
    y0 = np.minimum(np.floor(v).astype(np.int64), max(src_h - 2, 0))
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx = u - x0
    fy = v - y0

    imgf = img.astype(np.float64)
    out = ((1 - fy)[..., None] * ((1 - fx)[..., None] * imgf[y0, x0] + fx[..., None] * imgf[y0, x1])
           + fy[..., None] * ((1 - fx)[..., None] * imgf[y1, x0] + fx[..., None] * imgf[y1, x1]))
    out[~valid] = 0.0
    return CbevImage(np.clip(np.rint(out), 0, 255).astype(np.uint8), frame_id)


def colorize_labels(labels: np.ndarray) -> np.ndarray:
    """Render a class-index map as RGB using the fixed 7-class palette."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= len(PALETTE)):
        bad = int(labels.max()) if labels.max() >= len(PALETTE) else int(labels.min())
        raise ValueError(f"label value {bad} outside [0, {len(PALETTE)})")
    return PALETTE[labels.astype(np.int64)]


def labels_from_colors(rgb: np.ndarray) -> np.ndarray:
    """Inverse palette lookup; raises on colors not in the palette."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    key = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) \
        | rgb[..., 2].astype(np.int64)
    table = {int((c[0] << 16) | (c[1] << 8) | c[2]): i for i, c in enumerate(PALETTE.astype(np.int64))}
    out = np.zeros(rgb.shape[:2], dtype=np.uint8)
    uniq = np.unique(key)
    for k in uniq:
        if int(k) not in table:
            raise ValueError(f"color {(k >> 16, (k >> 8) & 255, k & 255)} is not in the palette")
        out[key == k] = table[int(k)]
    return out
