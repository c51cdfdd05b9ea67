"""Minimal ASCII PCD v0.7 reader/writer.

Only ``DATA ascii`` with single-count fields is supported. ``x y z`` are
required; any further fields (e.g. a per-point ``label``) are returned as
separate arrays. Floats are written with 17 significant digits so a
write/read cycle reproduces every coordinate bit for bit.
"""

import io
from pathlib import Path

import numpy as np

from .geometry import PointCloud

_DEFAULT_VIEWPOINT = (0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)


class PCDError(ValueError):
    pass


def write_pcd(path_or_file, cloud, extra_fields=None):
    """Write ``cloud`` as ASCII PCD.

    Parameters
    ----------
    path_or_file : str, Path or text file object
    cloud : PointCloud
    extra_fields : dict of name -> integer array, optional
        Per-point integer fields appended after ``x y z``.
    """
    extra_fields = dict(extra_fields or {})
    n = len(cloud)
    names = ["x", "y", "z"] + list(extra_fields)
    sizes = ["8", "8", "8"] + ["4"] * len(extra_fields)
    types = ["F", "F", "F"] + ["I"] * len(extra_fields)
    for name, values in extra_fields.items():
        if np.asarray(values).shape != (n,):
            raise PCDError(f"field {name!r} must have one value per point")
    vp = _DEFAULT_VIEWPOINT if cloud.view_point is None else (*map(float, cloud.view_point), 1.0, 0.0, 0.0, 0.0)
    header = [
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7",
        "FIELDS " + " ".join(names),
        "SIZE " + " ".join(sizes),
        "TYPE " + " ".join(types),
        "COUNT " + " ".join(["1"] * len(names)),
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT " + " ".join(repr(float(v)) for v in vp),
        f"POINTS {n}",
        "DATA ascii",
    ]
    buf = io.StringIO()
    buf.write("\n".join(header) + "\n")
    if n:
        cols = [cloud.points[:, i] for i in range(3)]
        fmt = ["%.17g"] * 3
        for values in extra_fields.values():
            cols.append(np.asarray(values, dtype=np.int64))
            fmt.append("%d")
        table = np.empty((n, len(cols)), dtype=object)
        for j, c in enumerate(cols):
            table[:, j] = c
        np.savetxt(buf, table, fmt=fmt, delimiter=" ")
    text = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        Path(path_or_file).write_text(text)


def read_pcd(path_or_file, frame_id="camera"):
    """Read an ASCII PCD file.

    Returns
    -------
    cloud : PointCloud
    extra : dict of name -> array
        All fields other than ``x y z``; integer-typed fields come back as int64.
    """
    if hasattr(path_or_file, "read"):
        text = path_or_file.read()
    else:
        text = Path(path_or_file).read_text()
    lines = text.splitlines()
    header = {}
    body_start = None
    for i, line in enumerate(lines):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        key, _, rest = s.partition(" ")
        header[key.upper()] = rest.split()
        if key.upper() == "DATA":
            body_start = i + 1
            break
    if body_start is None:
        raise PCDError("missing DATA line")
    if header["DATA"] != ["ascii"]:
        raise PCDError(f"unsupported DATA encoding {header['DATA']}")
    names = header.get("FIELDS")
    if not names or names[:3] != ["x", "y", "z"]:
        raise PCDError("FIELDS must start with x y z")
    counts = header.get("COUNT", ["1"] * len(names))
    if any(c != "1" for c in counts):
        raise PCDError("multi-count fields are not supported")
    types = header.get("TYPE", ["F"] * len(names))
    if len(types) != len(names):
        raise PCDError("TYPE and FIELDS differ in length")
    n = int(header.get("POINTS", header.get("WIDTH", ["0"]))[0])

    rows = [ln for ln in lines[body_start:] if ln.strip()]
    if len(rows) != n:
        raise PCDError(f"header declares {n} points, found {len(rows)}")
    if n:
        data = np.loadtxt(io.StringIO("\n".join(rows)), dtype=float, ndmin=2)
        if data.shape[1] != len(names):
            raise PCDError(f"expected {len(names)} columns, found {data.shape[1]}")
    else:
        data = np.zeros((0, len(names)))

    view_point = None
    vp = header.get("VIEWPOINT")
    if vp is not None:
        vp = tuple(float(v) for v in vp)
        if vp != _DEFAULT_VIEWPOINT:
            view_point = np.array(vp[:3])
    cloud = PointCloud(data[:, :3], frame_id, view_point)
    extra = {}
    for j, (name, typ) in enumerate(zip(names[3:], types[3:]), start=3):
        col = data[:, j]
        extra[name] = col.astype(np.int64) if typ in ("I", "U") else col
    return cloud, extra
