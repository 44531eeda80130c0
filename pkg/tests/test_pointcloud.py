"""Velodyne binary parsing and region-of-interest filtering."""

import struct

import numpy as np
import pytest

from fusionlane.pointcloud import (
    PointCloudFrame,
    TruncatedFileError,
    filter_roi,
    read_velodyne_bin,
    write_velodyne_bin,
)


def test_empty_file_gives_empty_frame(tmp_path):
    path = tmp_path / "000000.bin"
    path.write_bytes(b"")
    frame = read_velodyne_bin(path)
    assert len(frame) == 0
    assert frame.frame_id == 0


def test_single_known_record(tmp_path):
    path = tmp_path / "000042.bin"
    path.write_bytes(struct.pack("<4f", 1.0, 2.0, 3.0, 0.5))
    frame = read_velodyne_bin(path)
    assert len(frame) == 1
    p = frame.point(0)
    assert (p.x, p.y, p.z, p.intensity) == (1.0, 2.0, 3.0, 0.5)
    assert frame.frame_id == 42


def test_write_then_read_is_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((1000, 4)).astype(np.float32)
    pts[:, 3] = rng.random(1000, dtype=np.float32)
    frame = PointCloudFrame(7, pts)
    path = tmp_path / "000007.bin"
    write_velodyne_bin(path, frame)
    back = read_velodyne_bin(path)
    assert np.array_equal(back.points, pts)
    assert back.frame_id == 7


def test_truncated_file_reports_byte_offset(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 37)
    with pytest.raises(TruncatedFileError, match="byte offset 32"):
        read_velodyne_bin(path)


def test_nan_records_dropped_and_counted(tmp_path):
    pts = np.array([
        [1.0, 2.0, 3.0, 0.5],
        [np.nan, 0.0, 0.0, 0.1],
        [4.0, 5.0, np.inf, 0.2],
        [6.0, 7.0, 8.0, 0.9],
    ], np.float32)
    path = tmp_path / "0001.bin"
    path.write_bytes(pts.tobytes())
    frame = read_velodyne_bin(path)
    assert len(frame) == 2
    assert frame.dropped_invalid == 2
    assert np.isfinite(frame.points).all()


def test_out_of_range_intensity_clamped_and_counted(tmp_path):
    pts = np.array([
        [1.0, 0.0, -1.5, 1.5],
        [2.0, 0.0, -1.5, -0.25],
        [3.0, 0.0, -1.5, 0.75],
    ], np.float32)
    path = tmp_path / "0002.bin"
    path.write_bytes(pts.tobytes())
    frame = read_velodyne_bin(path)
    assert frame.clamped_intensity == 2
    assert frame.points[:, 3].min() >= 0.0
    assert frame.points[:, 3].max() <= 1.0


class TestFilterRoi:
    def test_interior_point_kept(self):
        frame = PointCloudFrame(0, np.array([[10.0, 0.0, -1.5, 0.5]], np.float32))
        assert len(filter_roi(frame)) == 1

    def test_boundary_points(self):
        pts = np.array([
            [5.99, 0.0, -1.5, 0.5],   # in front of the near bound -> dropped
            [10.0, 0.0, -0.99, 0.5],  # above the height window -> dropped
            [6.0, 0.0, -2.0, 0.5],    # lower-inclusive x, closed z -> kept
            [25.999, 9.999, -1.0, 0.5],  # just inside far/left bounds -> kept
            [26.0, 0.0, -1.5, 0.5],   # far bound excluded
            [0.0, 10.0, -1.5, 0.5],   # left bound excluded
        ], np.float32)
        kept = filter_roi(PointCloudFrame(0, pts))
        assert np.array_equal(kept.points, pts[[2, 3]])

    def test_matches_per_point_predicate_oracle(self):
        rng = np.random.default_rng(1)
        pts = np.empty((10_000, 4), np.float32)
        pts[:, 0] = rng.uniform(0, 32, 10_000)
        pts[:, 1] = rng.uniform(-14, 14, 10_000)
        pts[:, 2] = rng.uniform(-3, 0, 10_000)
        pts[:, 3] = rng.random(10_000)
        kept = filter_roi(PointCloudFrame(0, pts))
        expected = [
            i for i in range(10_000)
            if 6.0 <= pts[i, 0] < 26.0 and -10.0 <= pts[i, 1] < 10.0
            and -2.0 <= pts[i, 2] <= -1.0
        ]
        assert np.array_equal(kept.points, pts[expected])

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        pts = np.empty((500, 4), np.float32)
        pts[:, 0] = rng.uniform(0, 30, 500)
        pts[:, 1] = rng.uniform(-12, 12, 500)
        pts[:, 2] = rng.uniform(-3, 0, 500)
        pts[:, 3] = rng.random(500)
        once = filter_roi(PointCloudFrame(0, pts))
        twice = filter_roi(once)
        assert np.array_equal(once.points, twice.points)
