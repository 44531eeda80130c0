"""KITTI-style LIDAR frame parsing and region-of-interest filtering."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "LidarPoint",
    "PointCloudFrame",
    "TruncatedFileError",
    "read_velodyne_bin",
    "write_velodyne_bin",
    "filter_roi",
    "roi_mask",
    "X_MIN", "X_MAX", "Y_MIN", "Y_MAX", "Z_MIN", "Z_MAX",
]

# Region of interest, sensor frame: x forward, y left, z up.
X_MIN, X_MAX = 6.0, 26.0
Y_MIN, Y_MAX = -10.0, 10.0
Z_MIN, Z_MAX = -2.0, -1.0

_RECORD_BYTES = 16  # four little-endian float32: x, y, z, reflectance


class TruncatedFileError(ValueError):
    """A point cloud file does not contain a whole number of point records."""


@dataclass(frozen=True)
class LidarPoint:
    x: float
    y: float
    z: float
    intensity: float


@dataclass
class PointCloudFrame:
    """One LIDAR sweep: an (n, 4) float32 array of (x, y, z, intensity) rows."""

    frame_id: int
    points: np.ndarray
    dropped_invalid: int = 0
    clamped_intensity: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)

    def __len__(self) -> int:
        return self.points.shape[0]

    def point(self, i: int) -> LidarPoint:
        x, y, z, it = self.points[i]
        return LidarPoint(float(x), float(y), float(z), float(it))

    @classmethod
    def from_points(cls, frame_id: int, pts) -> "PointCloudFrame":
        rows = np.array([[p.x, p.y, p.z, p.intensity] for p in pts], dtype=np.float32)
        return cls(frame_id, rows.reshape(-1, 4))


def _frame_id_from_name(path: Path) -> int:
    m = re.search(r"(\d+)", path.stem)
    return int(m.group(1)) if m else 0


def read_velodyne_bin(path, frame_id: int | None = None) -> PointCloudFrame:
    """Parse packed little-endian float32 quadruples (x, y, z, reflectance).

    Non-finite records are dropped and counted; intensities are clamped to
    [0, 1] with the clamp count recorded on the frame.
    """
    path = Path(path)
    raw = path.read_bytes()
    rem = len(raw) % _RECORD_BYTES
    if rem:
        raise TruncatedFileError(
            f"{path}: truncated point record at byte offset {len(raw) - rem} "
            f"(file length {len(raw)} is not a multiple of {_RECORD_BYTES})")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)

    finite = np.isfinite(pts).all(axis=1)
    dropped = int((~finite).sum())
    pts = pts[finite]

    out_of_range = (pts[:, 3] < 0.0) | (pts[:, 3] > 1.0)
    clamped = int(out_of_range.sum())
    if clamped:
        pts = pts.copy()
        np.clip(pts[:, 3], 0.0, 1.0, out=pts[:, 3])

    fid = _frame_id_from_name(path) if frame_id is None else frame_id
    return PointCloudFrame(fid, pts, dropped_invalid=dropped, clamped_intensity=clamped)


def write_velodyne_bin(path, frame: PointCloudFrame) -> None:
    Path(path).write_bytes(np.ascontiguousarray(frame.points, dtype="<f4").tobytes())


def roi_mask(points: np.ndarray) -> np.ndarray:
    """Boolean mask of rows inside the rasterization region of interest.

    x and y bounds are half-open (lower-inclusive) so grid indices always land
    in [0, 400); the height window is closed on both ends.
    """
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return ((x >= X_MIN) & (x < X_MAX)
            & (y >= Y_MIN) & (y < Y_MAX)
            & (z >= Z_MIN) & (z <= Z_MAX))


def filter_roi(frame: PointCloudFrame) -> PointCloudFrame:
    """Keep exactly the in-ROI points, original order preserved."""
    kept = frame.points[roi_mask(frame.points)].copy()
    return PointCloudFrame(frame.frame_id, kept,
                           dropped_invalid=frame.dropped_invalid,
                           clamped_intensity=frame.clamped_intensity)
