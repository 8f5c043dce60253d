import math
import struct

import numpy as np
import pytest

from radar_tr.config import ConfigError, PipelineConfig, load_config, parse_config
from radar_tr.geometry import Pose2
from radar_tr.map_store import (CorruptPayloadError, InvariantViolationError, PoseImportError, TeachGraph,
                                VersionMismatchError, decode_map, encode_map, export_poses_json,
                                import_optimized_poses, load_map, read_poses_json, save_map)
from radar_tr.odometry import Keyframe
from radar_tr.preprocessing import PolarScan
from radar_tr.scan_io import (ScanFormatError, decode_scan, encode_scan, list_scan_files, read_scan, read_scan_csv,
                              write_scan, write_scan_csv)
from support import random_surface_points


def random_graph(rng, n_nodes: int, n_points: int = 20) -> TeachGraph:
    nodes = tuple(Keyframe(i, Pose2(*rng.normal(0, [10, 10, 1])), random_surface_points(rng, n_points), 0.25 * i)
                  for i in range(n_nodes))
    return TeachGraph(nodes, {"note": "test"})


def test_single_node_round_trip(tmp_path):
    g = random_graph(np.random.default_rng(20), 1)
    save_map(g, tmp_path / "one.rtrm")
    back = load_map(tmp_path / "one.rtrm")
    assert back.same_as(g) and back.meta == g.meta
    assert np.array_equal(back[0].surface_points.covs, g[0].surface_points.covs)


def test_large_map_size_is_near_raw_payload():
    g = random_graph(np.random.default_rng(21), 500, 200)
    # raw geometry: pose, timestamp, and per point mean, normal, 3 covariance terms, count
    raw = sum(8 * 4 + len(kf.surface_points) * (7 * 8 + 4) for kf in g.nodes)
    data = encode_map(g)
    assert raw < len(data) < 2 * raw
    assert decode_map(data).same_as(g)


def test_empty_graph_rejected(tmp_path):
    with pytest.raises(InvariantViolationError):
        save_map(TeachGraph(()), tmp_path / "empty.rtrm")


def test_corrupt_map_files():
    data = encode_map(random_graph(np.random.default_rng(22), 3))
    with pytest.raises(CorruptPayloadError):
        decode_map(data[:-5])
    with pytest.raises(VersionMismatchError):
        decode_map(b"XXXX" + data[4:])
    with pytest.raises(VersionMismatchError):
        decode_map(data[:4] + struct.pack("<I", 99) + data[8:])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    with pytest.raises(CorruptPayloadError):
        decode_map(bytes(flipped))
    with pytest.raises(CorruptPayloadError):
        decode_map(data + b"\0")


def test_missing_map_file_names_path(tmp_path):
    with pytest.raises(OSError, match="nope.rtrm"):
        load_map(tmp_path / "nope.rtrm")


def test_import_optimized_poses():
    g = random_graph(np.random.default_rng(23), 5)
    same = import_optimized_poses(g, [(kf.id, kf.pose) for kf in g.nodes])
    assert same.same_as(g)
    shifted = import_optimized_poses(g, [(kf.id, Pose2(kf.pose.x + 1.0, kf.pose.y, kf.pose.theta)) for kf in g.nodes])
    assert shifted[2].pose.x == g[2].pose.x + 1.0
    assert shifted[2].surface_points is g[2].surface_points
    with pytest.raises(PoseImportError, match="missing"):
        import_optimized_poses(g, [(0, Pose2())])
    with pytest.raises(PoseImportError, match="unknown"):
        import_optimized_poses(g, [(i, Pose2()) for i in range(6)])
    with pytest.raises(PoseImportError, match="duplicate"):
        import_optimized_poses(g, [(0, Pose2())] * 2)
    assert read_poses_json(export_poses_json(g)) == [(kf.id, kf.pose) for kf in g.nodes]


def small_scan(rng) -> PolarScan:
    n_az = 16
    angles = np.linspace(0, 2 * math.pi, n_az, endpoint=False)
    return PolarScan(rng.uniform(0, 255, (n_az, 30)).astype(np.float32), angles, 0.5 + angles / (8 * math.pi),
                     0.5, 0.0596)


def test_scan_binary_round_trip(tmp_path):
    scan = small_scan(np.random.default_rng(24))
    write_scan(scan, tmp_path / "000000.rscan")
    back = read_scan(tmp_path / "000000.rscan")
    assert encode_scan(back) == encode_scan(scan)
    data = encode_scan(scan)
    with pytest.raises(ScanFormatError, match="expected"):
        decode_scan(data[:-1])
    with pytest.raises(ScanFormatError, match="magic"):
        decode_scan(b"ABCD" + data[4:])
    with pytest.raises(ScanFormatError, match="truncated"):
        decode_scan(data[:10])


def test_scan_csv_round_trip_and_errors(tmp_path):
    scan = small_scan(np.random.default_rng(25))
    write_scan_csv(scan, tmp_path / "scan000.csv")
    back = read_scan_csv(tmp_path / "scan000.csv")
    assert np.array_equal(back.intensities, scan.intensities.astype(float))
    assert np.array_equal(back.encoder_angles, scan.encoder_angles) and back.scan_time == scan.scan_time
    (tmp_path / "scan001.csv").write_text("0.0,0.0,1,2\n0.1,0.1,1,x\n")
    with pytest.raises(ScanFormatError, match=":2:"):
        read_scan_csv(tmp_path / "scan001.csv")
    (tmp_path / "scan002.csv").write_text("# only a comment\n")
    with pytest.raises(ScanFormatError, match="no azimuth"):
        read_scan_csv(tmp_path / "scan002.csv")
    (tmp_path / "notes.csv").write_text("x\n")
    assert [p.name for p in list_scan_files(tmp_path)] == ["scan000.csv", "scan001.csv", "scan002.csv"]


def test_config_round_trip_and_validation(tmp_path):
    cfg = PipelineConfig(k=12, beta=0.05, doppler=False, r_max=2.5)
    assert parse_config(cfg.dumps()) == cfg
    (tmp_path / "c.conf").write_text("# tuned\ns_m = 3  # narrower\nencoder = off\nr_max = none\n")
    loaded = load_config(tmp_path / "c.conf")
    assert (loaded.s_m, loaded.encoder, loaded.r_max) == (3, False, None)
    assert loaded.correspondence_radius == 2 * loaded.grid_res
    with pytest.raises(ConfigError, match="odd"):
        parse_config("s_m = 4")
    with pytest.raises(ConfigError, match=":2:"):
        parse_config("k = 10\nbogus = 1")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("k = ten")
    with pytest.raises(ConfigError):
        PipelineConfig(s_l=-1)
    assert PipelineConfig(s_l=0).s_l == 0
