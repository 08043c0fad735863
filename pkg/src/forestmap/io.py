"""Readers and writers for clouds, odometry, tree records and estimates."""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ParseError, ValidationError
from .geometry import BoundingBox, PointCloud, RigidTransform

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_NORMAL_FIELDS = ("nx", "ny", "nz")


def _make_cloud(xyz, normals, source):
    if not np.all(np.isfinite(xyz)) or (normals is not None and not np.all(np.isfinite(normals))):
        raise ValidationError(f"{source}: non-finite coordinate value")
    if normals is not None:
        norms = np.linalg.norm(normals, axis=1)
        # stored float32 normals are only unit to ~1e-7; renormalize if close
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ValidationError(f"{source}: normals are not unit length")
        normals = normals / norms[:, None]
    return PointCloud(xyz, normals)


def load_cloud(path, format=None) -> PointCloud:
    """Read a PLY or CSV point cloud.

    ``format`` defaults to the file extension. Normals are loaded only when
    the file carries nx, ny and nz.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "ply":
        return _load_ply(path)
    if fmt in ("csv", "txt"):
        return _load_csv(path)
    raise ParseError(f"{path}: unsupported cloud format {fmt!r}")


def _load_csv(path):
    rows = []
    has_normals = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not _is_number(row[0]):
                names = [c.strip().lower() for c in row]
                if names[:3] != ["x", "y", "z"]:
                    raise ParseError(f"{path}:1: header must start with x,y,z")
                has_normals = tuple(names[3:6]) == _NORMAL_FIELDS
                continue
            if len(row) not in (3, 6):
                raise ParseError(f"{path}:{lineno}: expected 3 or 6 columns, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise ValidationError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        return PointCloud(np.empty((0, 3)))
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ParseError(f"{path}: inconsistent column counts {sorted(widths)}")
    data = np.asarray(rows)
    if has_normals is None:
        has_normals = data.shape[1] == 6
    return _make_cloud(data[:, :3], data[:, 3:6] if has_normals else None, path)


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def _read_ply_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise ParseError(f"{path}:1: missing 'ply' magic")
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError(f"{path}:{lineno}: unexpected end of header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path}:{lineno}: property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list", parts[2], parts[3]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise ParseError(f"{path}:{lineno}: unknown property type {parts[1]!r}")
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        elif parts[0] == "end_header":
            return fmt, elements, lineno
        else:
            raise ParseError(f"{path}:{lineno}: unexpected header keyword {parts[0]!r}")


def _load_ply(path):
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _read_ply_header(fh, path)
        if not elements or elements[0][0] != "vertex":
            raise ParseError(f"{path}: first element must be 'vertex'")
        _, count, props = elements[0]
        if any(p[1] == "list" for p in props):
            raise ParseError(f"{path}: list properties on vertices are not supported")
        names = [p[0] for p in props]
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise ParseError(f"{path}: vertex element lacks property {axis!r}")
        if fmt == "ascii":
            data = _read_ply_ascii(fh, count, names, path, header_lines)
        elif fmt == "binary_little_endian":
            dtype = np.dtype([(n, "<" + t) for n, t in props])
            buf = fh.read(dtype.itemsize * count)
            if len(buf) < dtype.itemsize * count:
                raise ParseError(
                    f"{path}: truncated binary body at byte offset {fh.tell()}, "
                    f"expected {dtype.itemsize * count} bytes of vertices"
                )
            rec = np.frombuffer(buf, dtype=dtype, count=count)
            data = {n: rec[n].astype(np.float64) for n in names}
        else:
            raise ParseError(f"{path}: unsupported PLY format {fmt!r}")
    xyz = np.column_stack([data["x"], data["y"], data["z"]]) if count else np.empty((0, 3))
    normals = None
    if all(n in names for n in _NORMAL_FIELDS) and count:
        normals = np.column_stack([data[n] for n in _NORMAL_FIELDS])
    return _make_cloud(xyz, normals, path)


def _read_ply_ascii(fh, count, names, path, header_lines):
    cols = {n: np.empty(count) for n in names}
    for i in range(count):
        raw = fh.readline()
        lineno = header_lines + i + 1
        if not raw:
            raise ParseError(f"{path}:{lineno}: expected {count} vertices, file ended")
        parts = raw.split()
        if len(parts) != len(names):
            raise ParseError(f"{path}:{lineno}: expected {len(names)} values, got {len(parts)}")
        try:
            for n, v in zip(names, parts):
                cols[n][i] = float(v)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    return cols


def save_cloud(cloud: PointCloud, path, format=None, binary=True):
    """Write a cloud as PLY (binary little-endian unless ``binary=False``) or CSV."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    cols = [cloud.points]
    names = ["x", "y", "z"]
    if cloud.has_normals:
        cols.append(cloud.normals)
        names += list(_NORMAL_FIELDS)
    data = np.hstack(cols) if cols else np.empty((0, 3))
    if fmt == "csv":
        with _atomic_open(path, "w") as fh:
            fh.write(",".join(names) + "\n")
            np.savetxt(fh, data, delimiter=",", fmt="%.17g")
        return
    if fmt != "ply":
        raise ParseError(f"{path}: unsupported cloud format {fmt!r}")
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    with _atomic_open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
        else:
            np.savetxt(fh, data, fmt="%.17g")


class _atomic_open:
    """Write to a temporary sibling file and rename it into place on success."""

    def __init__(self, path, mode):
        self.path = Path(path)
        self.mode = mode

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self.tmp = tempfile.mkstemp(dir=self.path.parent, prefix=f".{self.path.name}.")
        self.fh = os.fdopen(fd, self.mode)
        return self.fh

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            os.unlink(self.tmp)
        return False


def write_json(obj, path):
    with _atomic_open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


# --- poses -----------------------------------------------------------------

def load_poses(path):
    """Read "timestamp, tx, ty, tz, qx, qy, qz, qw" rows.

    Returns (timestamps array, list of RigidTransform). A non-numeric first
    row is treated as a header.
    """
    stamps, poses = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not _is_number(row[0]):
                continue
            if len(row) != 8:
                raise ParseError(f"{path}:{lineno}: expected 8 columns, got {len(row)}")
            try:
                v = [float(c) for c in row]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(v)):
                raise ValidationError(f"{path}:{lineno}: non-finite value")
            quat = np.asarray(v[4:8])
            if np.linalg.norm(quat) < 1e-12:
                raise ValidationError(f"{path}:{lineno}: zero quaternion")
            stamps.append(v[0])
            poses.append(RigidTransform.from_quaternion(quat, v[1:4]))
    return np.asarray(stamps), poses


def save_poses(timestamps, poses, path):
    with _atomic_open(path, "w") as fh:
        fh.write("timestamp,tx,ty,tz,qx,qy,qz,qw\n")
        for ts, T in zip(timestamps, poses):
            vals = [ts, *T.translation, *T.as_quaternion()]
            fh.write(",".join(f"{v:.17g}" for v in vals) + "\n")


# --- tree records and estimates -------------------------------------------

@dataclass(frozen=True)
class TreeRecord:
    """A manually or synthetically segmented tree."""

    id: str
    box: BoundingBox
    truth_dbh: float | None = None
    species: str | None = None

    def to_dict(self):
        d = {"id": self.id, "box_min": self.box.min_corner.tolist(),
             "box_max": self.box.max_corner.tolist()}
        if self.truth_dbh is not None:
            d["truth_dbh_m"] = float(self.truth_dbh)
        if self.species is not None:
            d["species"] = self.species
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            box = BoundingBox(d["box_min"], d["box_max"])
            truth = d.get("truth_dbh_m")
            if truth is not None and not (np.isfinite(truth) and truth > 0):
                raise ValidationError(f"tree {d['id']}: truth_dbh_m must be positive")
            return cls(str(d["id"]), box, None if truth is None else float(truth), d.get("species"))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed tree record {d!r}: {exc}") from None


def load_trees(path):
    data = read_json(path)
    if not isinstance(data, list):
        raise ParseError(f"{path}: expected a JSON array of tree records")
    return [TreeRecord.from_dict(d) for d in data]


def save_trees(trees, path):
    write_json([t.to_dict() for t in trees], path)
