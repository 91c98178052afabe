"""On-disk formats: PCD v0.7 clouds, trajectories, JSON reports, PGM images.

Trajectory files are whitespace separated with ``#`` comments skipped. Two
layouts are understood:

* ``tum``: ``t tx ty tz qx qy qz qw`` per line
* ``xyz``: ``tx ty tz`` per line; yaw is synthesized from the path tangent

Reports are JSON with matrices stored row-major as nested lists.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .geometry import Pose, PointCloud, StampedPose, Trajectory, tangent_yaws

log = logging.getLogger(__name__)


class FormatError(ValueError):
    """A file could not be parsed."""


class UnsupportedFormatError(FormatError):
    pass


_PCD_KEYS = ("VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT", "VIEWPOINT",
             "POINTS", "DATA")
_PCD_TYPES = {("F", 4): "<f4", ("F", 8): "<f8", ("I", 1): "<i1", ("I", 2): "<i2",
              ("I", 4): "<i4", ("I", 8): "<i8", ("U", 1): "<u1", ("U", 2): "<u2",
              ("U", 4): "<u4", ("U", 8): "<u8"}


def _parse_header(path, raw: bytes):
    header: dict[str, list[str]] = {}
    pos = 0
    lineno = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: header ended before DATA line")
        lineno += 1
        line = raw[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if not line or line.startswith("#"):
            continue
        key, *vals = line.split()
        key = key.upper()
        if key not in _PCD_KEYS:
            raise FormatError(f"{path}: line {lineno}: unknown header key {key!r}")
        header[key] = vals
        if key == "DATA":
            break
    for key in ("FIELDS", "SIZE", "TYPE", "POINTS", "DATA"):
        if key not in header:
            raise FormatError(f"{path}: header is missing {key}")
    return header, pos, lineno


def _header_int(path, header, key, default=None):
    if key not in header:
        if default is None:
            raise FormatError(f"{path}: header is missing {key}")
        return default
    try:
        return int(header[key][0])
    except (ValueError, IndexError):
        raise FormatError(f"{path}: {key} must be an integer, got {header[key]}") from None


def _read_pcd(path):
    raw = Path(path).read_bytes()
    header, offset, header_lines = _parse_header(path, raw)
    names = header["FIELDS"]
    sizes = [int(s) for s in header["SIZE"]]
    types = [t.upper() for t in header["TYPE"]]
    counts = [int(c) for c in header.get("COUNT", ["1"] * len(names))]
    if not len(names) == len(sizes) == len(types) == len(counts):
        raise FormatError(f"{path}: FIELDS/SIZE/TYPE/COUNT lengths disagree")
    for axis in "xyz":
        if axis not in names:
            raise FormatError(f"{path}: FIELDS lacks '{axis}'")
    n = _header_int(path, header, "POINTS")
    width = _header_int(path, header, "WIDTH", n)
    height = _header_int(path, header, "HEIGHT", 1)
    if width * height != n:
        raise FormatError(f"{path}: WIDTH*HEIGHT = {width * height} but POINTS = {n}")
    encoding = header["DATA"][0].lower()

    columns = []
    for name, size, typ, count in zip(names, sizes, types, counts):
        if (typ, size) not in _PCD_TYPES:
            raise FormatError(f"{path}: unsupported field type {typ}{size} for {name}")
        columns.extend([(name, typ, size)] * count)
    col_of = {}
    for i, (name, _, _) in enumerate(columns):
        col_of.setdefault(name, i)

    if encoding == "ascii":
        body = raw[offset:].decode("ascii", errors="replace").splitlines()
        rows = []
        for k, line in enumerate(body):
            line = line.strip()
            if not line:
                continue
            toks = line.split()
            if len(toks) != len(columns):
                raise FormatError(f"{path}: line {header_lines + k + 1}: expected "
                                  f"{len(columns)} values, got {len(toks)}")
            try:
                rows.append([float(t) for t in toks])
            except ValueError:
                raise FormatError(f"{path}: line {header_lines + k + 1}: non-numeric value") from None
        if len(rows) != n:
            raise FormatError(f"{path}: header declares POINTS {n} but body has {len(rows)}")
        data = np.array(rows, dtype=np.float64).reshape(n, len(columns))
        xyz = data[:, [col_of["x"], col_of["y"], col_of["z"]]]
        inten = data[:, col_of["intensity"]] if "intensity" in col_of else None
    elif encoding == "binary":
        dtype = np.dtype([(f"f{i}", _PCD_TYPES[(t, s)]) for i, (_, t, s) in enumerate(columns)])
        need = n * dtype.itemsize
        if len(raw) - offset < need:
            raise FormatError(f"{path}: header declares POINTS {n} but binary body holds "
                              f"{(len(raw) - offset) // dtype.itemsize}")
        rec = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
        xyz = np.stack([rec[f"f{col_of[a]}"].astype(np.float64) for a in "xyz"], axis=1)
        inten = rec[f"f{col_of['intensity']}"].astype(np.float64) if "intensity" in col_of else None
    elif encoding == "binary_compressed":
        raise UnsupportedFormatError(f"{path}: DATA binary_compressed is not supported")
    else:
        raise FormatError(f"{path}: unknown DATA encoding {encoding!r}")

    ok = np.all(np.isfinite(xyz), axis=1)
    dropped = int(np.count_nonzero(~ok))
    if dropped:
        log.warning("%s: dropped %d non-finite points", path, dropped)
    cloud = PointCloud(xyz[ok], None if inten is None else inten[ok])
    return cloud, dropped


def read_pcd(path, with_stats: bool = False):
    """Read an ASCII or uncompressed binary PCD file.

    Non-finite points are dropped. With ``with_stats`` the number of dropped
    points is returned as well.
    """
    cloud, dropped = _read_pcd(path)
    return (cloud, dropped) if with_stats else cloud


def write_pcd(cloud: PointCloud, path, encoding: str = "binary") -> None:
    """Write PCD v0.7. Binary stores 8-byte floats so round trips are exact."""
    if len(cloud) == 0:
        raise ValueError("cannot write an empty point cloud")
    if encoding not in ("ascii", "binary"):
        raise ValueError(f"encoding must be 'ascii' or 'binary', got {encoding!r}")
    n = len(cloud)
    has_i = cloud.intensity is not None
    fsize = 8 if encoding == "binary" else 4
    fields = "x y z intensity" if has_i else "x y z"
    k = 4 if has_i else 3
    head = (
        "# .PCD v0.7 - Point Cloud Data file format\n"
        "VERSION 0.7\n"
        f"FIELDS {fields}\n"
        f"SIZE {' '.join([str(fsize)] * k)}\n"
        f"TYPE {' '.join(['F'] * k)}\n"
        f"COUNT {' '.join(['1'] * k)}\n"
        f"WIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\n"
        f"POINTS {n}\nDATA {encoding}\n"
    )
    cols = [cloud.xyz] + ([cloud.intensity[:, None]] if has_i else [])
    data = np.hstack(cols)
    try:
        with open(path, "wb") as fh:
            fh.write(head.encode("ascii"))
            if encoding == "binary":
                fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
            else:
                lines = "\n".join(" ".join(f"{v:.6f}" for v in row) for row in data)
                fh.write(lines.encode("ascii") + b"\n")
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def _numeric_rows(path, ncols: int):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            toks = line.split()
            if len(toks) != ncols:
                raise FormatError(f"{path}: line {lineno}: expected {ncols} values, got {len(toks)}")
            try:
                rows.append((lineno, [float(t) for t in toks]))
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: non-numeric token") from None
    if not rows:
        raise FormatError(f"{path}: no trajectory entries")
    return rows


def read_trajectory(path, format: str = "tum") -> Trajectory:
    if format == "tum":
        entries = []
        for i, (lineno, (t, x, y, z, qx, qy, qz, qw)) in enumerate(_numeric_rows(path, 8)):
            try:
                pose = Pose.from_quaternion((qx, qy, qz, qw), (x, y, z))
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
            entries.append(StampedPose(i, pose, t))
        return Trajectory(tuple(entries))
    if format == "xyz":
        P = np.array([r for _, r in _numeric_rows(path, 3)])
        return Trajectory.from_poses([Pose.from_yaw(a, p) for a, p in zip(tangent_yaws(P), P)])
    raise ValueError(f"unknown trajectory format {format!r}")


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Return ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    m = R
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def write_trajectory(traj: Trajectory, path, format: str = "tum") -> None:
    lines = []
    for e in traj:
        x, y, z = e.pose.translation
        if format == "tum":
            t = float(e.timestamp) if e.timestamp is not None else float(e.index)
            qx, qy, qz, qw = rotation_to_quaternion(e.pose.rotation)
            vals = (t, x, y, z, qx, qy, qz, qw)
        elif format == "xyz":
            vals = (x, y, z)
        else:
            raise ValueError(f"unknown trajectory format {format!r}")
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("# " + ("t tx ty tz qx qy qz qw" if format == "tum" else "tx ty tz")
                          + "\n" + "\n".join(lines) + "\n")


UNSTABLE_KEYS = ("timings_ms", "resources")


def strip_unstable(doc):
    """Drop timing and resource blocks so reports compare byte for byte."""
    if isinstance(doc, dict):
        return {k: strip_unstable(v) for k, v in doc.items() if k not in UNSTABLE_KEYS}
    if isinstance(doc, list):
        return [strip_unstable(v) for v in doc]
    return doc


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def emit_report(result, path, stable: bool = False) -> None:
    """Write a report. ``result`` is a dict or exposes ``to_report()``."""
    doc = result.to_report() if hasattr(result, "to_report") else result
    if stable:
        doc = strip_unstable(doc)
    text = json.dumps(doc, indent=2, sort_keys=True, default=_jsonable)
    try:
        Path(path).write_text(text + "\n")
    except OSError as exc:
        raise OSError(f"failed to write report {path}: {exc}") from exc


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


def write_pgm(pixels: np.ndarray, path) -> None:
    """8-bit binary PGM with value ``round(pixel * 255)``."""
    img = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval


LABEL_NAMES = ("straight", "junction", "turn")


def write_labels(labels, path) -> None:
    rows = [f"{i},{LABEL_NAMES[l]}" for i, l in enumerate(labels)]
    Path(path).write_text("index,class\n" + "\n".join(rows) + "\n")


def read_labels(path) -> list[int]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("index"):
                continue
            idx, name = line.split(",")
            if name not in LABEL_NAMES:
                raise FormatError(f"{path}: line {lineno}: unknown class {name!r}")
            if int(idx) != len(out):
                raise FormatError(f"{path}: line {lineno}: indices must be consecutive")
            out.append(LABEL_NAMES.index(name))
    return out
