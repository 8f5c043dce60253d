"""The teach-pass pose graph and its on-disk format.

Binary layout, little-endian::

    header   magic b"RTRM" | version u32 | node count u32 | meta length u32 | crc32 u32
    meta     UTF-8 JSON (sorted keys)                                      | crc32 u32
    node     payload length u32 | payload                                  | crc32 u32   (repeated)

    payload  id u32 | x, y, theta f64 | timestamp f64 | point count u32
             then per point: mean (2 x f64), normal (2 x f64),
             covariance xx, xy, yy (3 x f64), n_samples u32

Every checksum covers the bytes of its own section. Surface points are kept
in the keyframe's sensor frame, so node poses can be replaced without
touching stored geometry.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import Pose2
from .odometry import Keyframe
from .surface_points import SurfacePointSet

MAP_MAGIC = b"RTRM"
MAP_VERSION = 1

_HEADER = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")
_NODE_HEAD = struct.Struct("<IddddI")
_POINT = np.dtype([("mean", "<f8", (2,)), ("normal", "<f8", (2,)), ("cov", "<f8", (3,)), ("n", "<u4")])


class MapError(Exception):
    pass


class VersionMismatchError(MapError):
    pass


class CorruptPayloadError(MapError):
    pass


class InvariantViolationError(MapError):
    pass


class PoseImportError(MapError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TeachGraph:
    nodes: tuple[Keyframe, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, i: int) -> Keyframe:
        return self.nodes[i]

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array([[kf.pose.x, kf.pose.y] for kf in self.nodes]).reshape(-1, 2)

    def poses(self) -> np.ndarray:
        return np.array([kf.pose.as_tuple() for kf in self.nodes]).reshape(-1, 3)

    def validate(self) -> None:
        """Raise InvariantViolationError unless ids are 0..N-1 in order and all geometry is finite."""
        if not self.nodes:
            raise InvariantViolationError("graph has no nodes")
        for i, kf in enumerate(self.nodes):
            if kf.id != i:
                raise InvariantViolationError(f"node at position {i} has id {kf.id}")
            if not all(math.isfinite(v) for v in (*kf.pose.as_tuple(), kf.timestamp)):
                raise InvariantViolationError(f"node {i}: non-finite pose or timestamp")
            sp = kf.surface_points
            if len(sp) == 0:
                raise InvariantViolationError(f"node {i}: no surface points")
            if not (np.all(np.isfinite(sp.means)) and np.all(np.isfinite(sp.covs))):
                raise InvariantViolationError(f"node {i}: non-finite surface point")
            if np.any(np.abs(np.linalg.norm(sp.normals, axis=1) - 1.0) > 1e-9):
                raise InvariantViolationError(f"node {i}: normal is not unit length")

    def same_as(self, other: TeachGraph) -> bool:
        """Bit-exact equality of every stored field."""
        return encode_map(self) == encode_map(other)


def _section(payload: bytes) -> bytes:
    return payload + _U32.pack(zlib.crc32(payload))


def _encode_node(kf: Keyframe) -> bytes:
    sp = kf.surface_points
    rec = np.empty(len(sp), dtype=_POINT)
    rec["mean"] = sp.means
    rec["normal"] = sp.normals
    rec["cov"] = np.column_stack([sp.covs[:, 0, 0], sp.covs[:, 0, 1], sp.covs[:, 1, 1]])
    rec["n"] = sp.n_samples
    head = _NODE_HEAD.pack(kf.id, kf.pose.x, kf.pose.y, kf.pose.theta, kf.timestamp, len(sp))
    payload = head + rec.tobytes()
    return _U32.pack(len(payload)) + _section(payload)


def encode_map(graph: TeachGraph) -> bytes:
    if not graph.nodes:
        raise InvariantViolationError("refusing to save an empty graph")
    meta = json.dumps(graph.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        _section(_HEADER.pack(MAP_MAGIC, MAP_VERSION, len(graph.nodes), len(meta))),
        _section(meta),
    ]
    parts += [_encode_node(kf) for kf in graph.nodes]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptPayloadError(f"{self.source}: truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def checked(self, n: int, what: str) -> bytes:
        payload = self.take(n, what)
        (crc,) = _U32.unpack(self.take(4, f"{what} checksum"))
        if zlib.crc32(payload) != crc:
            raise CorruptPayloadError(f"{self.source}: checksum mismatch in {what}")
        return payload


def decode_map(data: bytes, source: str = "<bytes>") -> TeachGraph:
    if len(data) < 4 or data[:4] != MAP_MAGIC:
        raise VersionMismatchError(f"{source}: not a map file (bad magic {data[:4]!r})")
    r = _Reader(data, source)
    if len(data) >= _HEADER.size:
        (version,) = _U32.unpack_from(data, 4)
        if version != MAP_VERSION:
            raise VersionMismatchError(f"{source}: map format version {version}, expected {MAP_VERSION}")
    _, _, n_nodes, meta_len = _HEADER.unpack(r.checked(_HEADER.size, "header"))
    try:
        meta = json.loads(r.checked(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayloadError(f"{source}: unreadable metadata ({exc})") from None

    nodes = []
    for i in range(n_nodes):
        (length,) = _U32.unpack(r.take(4, f"node {i} length"))
        payload = r.checked(length, f"node {i}")
        if length < _NODE_HEAD.size:
            raise CorruptPayloadError(f"{source}: node {i} payload too short")
        nid, x, y, theta, ts, count = _NODE_HEAD.unpack_from(payload, 0)
        if length != _NODE_HEAD.size + count * _POINT.itemsize:
            raise CorruptPayloadError(f"{source}: node {i} length does not match its point count")
        rec = np.frombuffer(payload, dtype=_POINT, count=count, offset=_NODE_HEAD.size)
        covs = np.empty((count, 2, 2))
        covs[:, 0, 0] = rec["cov"][:, 0]
        covs[:, 0, 1] = covs[:, 1, 0] = rec["cov"][:, 1]
        covs[:, 1, 1] = rec["cov"][:, 2]
        sp = SurfacePointSet(rec["mean"].copy(), rec["normal"].copy(), covs, rec["n"].astype(np.int64))
        if Pose2(x, y, theta).theta != theta:
            raise InvariantViolationError(f"{source}: node {i} heading {theta} is not wrapped")
        nodes.append(Keyframe(nid, Pose2(x, y, theta), sp, ts))
    if r.pos != len(data):
        raise CorruptPayloadError(f"{source}: {len(data) - r.pos} trailing bytes")
    graph = TeachGraph(tuple(nodes), meta)
    try:
        graph.validate()
    except InvariantViolationError as exc:
        raise InvariantViolationError(f"{source}: {exc}") from None
    return graph


def save_map(graph: TeachGraph, destination: str | Path) -> None:
    data = encode_map(graph)
    path = Path(destination)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write map to {path}: {exc.strerror or exc}") from exc


def load_map(source: str | Path) -> TeachGraph:
    path = Path(source)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read map {path}: {exc.strerror or exc}") from exc
    return decode_map(data, str(path))


def import_optimized_poses(graph: TeachGraph, poses: Iterable[tuple[int, Pose2]]) -> TeachGraph:
    """Replace every node pose; surface points stay as stored."""
    new = {}
    for nid, pose in poses:
        nid = int(nid)
        if nid in new:
            raise PoseImportError(f"duplicate pose for node {nid}")
        if not 0 <= nid < len(graph.nodes):
            raise PoseImportError(f"unknown node id {nid}")
        new[nid] = pose
    missing = [i for i in range(len(graph.nodes)) if i not in new]
    if missing:
        raise PoseImportError(f"missing poses for {len(missing)} node(s), first id {missing[0]}")
    return TeachGraph(tuple(kf.with_pose(new[kf.id]) for kf in graph.nodes), dict(graph.meta))


def export_poses_json(graph: TeachGraph) -> str:
    """Node poses for plotting: a JSON list of {id, x, y, theta, timestamp}."""
    rows = [{"id": kf.id, "x": kf.pose.x, "y": kf.pose.y, "theta": kf.pose.theta, "timestamp": kf.timestamp}
            for kf in graph.nodes]
    return json.dumps(rows, indent=1)


def read_poses_json(text: str) -> list[tuple[int, Pose2]]:
    return [(int(r["id"]), Pose2(r["x"], r["y"], r["theta"])) for r in json.loads(text)]
