"""Minimal PLY point-cloud reader/writer.

Vertices carry position as float32 and color as uchar. The header is, byte
for byte (with N the vertex count and FORMAT either ``ascii`` or
``binary_little_endian``)::

    ply\n
    format FORMAT 1.0\n
    element vertex N\n
    property float x\n
    property float y\n
    property float z\n
    property uchar red\n
    property uchar green\n
    property uchar blue\n
    end_header\n

ASCII rows are "x y z r g b"; binary rows are three little-endian float32
followed by three bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["save_ply", "load_ply", "PlyError"]

_PROPS = [b"property float x", b"property float y", b"property float z",
          b"property uchar red", b"property uchar green", b"property uchar blue"]


class PlyError(IOError):
    """Malformed PLY file."""


def save_ply(path, points: np.ndarray, colors: np.ndarray | None = None,
             binary: bool = True) -> None:
    """Write points [N, 3] (colors [N, 3] in [0, 1] or uint8; default white)."""
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    n = len(pts)
    if colors is None:
        cols = np.full((n, 3), 255, dtype=np.uint8)
    else:
        cols = np.asarray(colors)
        if cols.dtype != np.uint8:
            cols = np.clip(np.round(cols * 255.0), 0, 255).astype(np.uint8)
        cols = cols.reshape(-1, 3)
    fmt = b"binary_little_endian" if binary else b"ascii"
    header = b"\n".join([b"ply", b"format " + fmt + b" 1.0",
                         b"element vertex " + str(n).encode()] + _PROPS
                        + [b"end_header"]) + b"\n"
    with open(path, "wb") as f:
        f.write(header)
        if binary:
            rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            rec["xyz"] = pts
            rec["rgb"] = cols
            f.write(rec.tobytes())
        else:
            for (x, y, z), (r, g, b) in zip(pts, cols):
                f.write(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}\n".encode())


def load_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a PLY written by :func:`save_ply`; returns (points, colors)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise PlyError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]
    fmt = None
    n = None
    for line in header[1:]:
        if line.startswith("format"):
            fmt = line.split()[1]
        elif line.startswith("element vertex"):
            n = int(line.split()[2])
        elif line.startswith("element"):
            raise PlyError(f"{path}: unsupported element {line!r}")
    if fmt not in ("ascii", "binary_little_endian") or n is None:
        raise PlyError(f"{path}: unsupported header")
    if n == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8)
    if fmt == "binary_little_endian":
        rec = np.frombuffer(body, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)], count=n)
        return rec["xyz"].astype(np.float64), rec["rgb"].copy()
    rows = body.decode("ascii").split()
    vals = np.asarray(rows, dtype=np.float64).reshape(n, 6)
    return vals[:, :3], vals[:, 3:].astype(np.uint8)
