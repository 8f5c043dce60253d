"""PolarScan files.

Binary layout (little-endian, version 1)::

    magic        4 bytes  b"RTRS"
    version      u32
    n_azimuth    u32
    n_range      u32
    gamma        f64
    scan_time    f64
    encoder_angles  n_azimuth x f64
    azimuth_times   n_azimuth x f64
    intensities     n_azimuth * n_range x f32, row-major by azimuth

The CSV alternative is meant for hand-written fixtures: optional ``# gamma=...``
and ``# scan_time=...`` comment lines, then one row per azimuth holding
``encoder_angle, azimuth_time, i_0, ..., i_{n_range-1}``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .preprocessing import PolarScan

SCAN_MAGIC = b"RTRS"
SCAN_VERSION = 1
_HEADER = struct.Struct("<4sIIIdd")


class ScanFormatError(ValueError):
    pass


def encode_scan(scan: PolarScan) -> bytes:
    header = _HEADER.pack(SCAN_MAGIC, SCAN_VERSION, scan.n_azimuth, scan.n_range, scan.gamma, scan.scan_time)
    return b"".join([
        header,
        scan.encoder_angles.astype("<f8").tobytes(),
        scan.azimuth_times.astype("<f8").tobytes(),
        scan.intensities.astype("<f4").tobytes(),
    ])


def decode_scan(data: bytes, source: str = "<bytes>") -> PolarScan:
    if len(data) < _HEADER.size:
        raise ScanFormatError(f"{source}: truncated header")
    magic, version, n_a, n_r, gamma, scan_time = _HEADER.unpack_from(data, 0)
    if magic != SCAN_MAGIC:
        raise ScanFormatError(f"{source}: bad magic {magic!r}")
    if version != SCAN_VERSION:
        raise ScanFormatError(f"{source}: unsupported scan version {version}")
    expected = _HEADER.size + 16 * n_a + 4 * n_a * n_r
    if len(data) != expected:
        raise ScanFormatError(f"{source}: expected {expected} bytes, found {len(data)}")
    off = _HEADER.size
    angles = np.frombuffer(data, "<f8", n_a, off)
    off += 8 * n_a
    times = np.frombuffer(data, "<f8", n_a, off)
    off += 8 * n_a
    z = np.frombuffer(data, "<f4", n_a * n_r, off).reshape(n_a, n_r)
    return PolarScan(z, angles, times, scan_time, gamma)


def write_scan(scan: PolarScan, path: str | Path) -> None:
    Path(path).write_bytes(encode_scan(scan))


def read_scan(path: str | Path) -> PolarScan:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_scan_csv(path)
    return decode_scan(path.read_bytes(), source=str(path))


def read_scan_csv(path: str | Path) -> PolarScan:
    path = Path(path)
    meta = {"gamma": 0.0596, "scan_time": None}
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = (s.strip() for s in body.split("=", 1))
                if key in meta:
                    meta[key] = float(value)
            continue
        try:
            rows.append([float(tok) for tok in line.split(",")])
        except ValueError:
            raise ScanFormatError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise ScanFormatError(f"{path}: no azimuth rows")
    if len({len(r) for r in rows}) != 1 or len(rows[0]) < 3:
        raise ScanFormatError(f"{path}: rows must share the same number of range bins")
    arr = np.array(rows)
    scan_time = meta["scan_time"] if meta["scan_time"] is not None else float(arr[0, 1])
    return PolarScan(arr[:, 2:], arr[:, 0], arr[:, 1], scan_time, meta["gamma"])


def write_scan_csv(scan: PolarScan, path: str | Path) -> None:
    lines = [f"# gamma={scan.gamma!r}", f"# scan_time={scan.scan_time!r}"]
    for a in range(scan.n_azimuth):
        vals = [repr(float(scan.encoder_angles[a])), repr(float(scan.azimuth_times[a]))]
        vals += [repr(float(v)) for v in scan.intensities[a]]
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def list_scan_files(scan_dir: str | Path) -> list[Path]:
    """``*.rscan`` and ``scan*.csv`` files of a directory, ordered by name (zero-padded index)."""
    scan_dir = Path(scan_dir)
    files = [p for p in scan_dir.iterdir() if p.is_file()]
    return sorted(p for p in files
                  if p.suffix == ".rscan" or (p.suffix == ".csv" and p.name.startswith("scan")))
