"""Binary little-endian PLY storage for Gaussian clouds.

Vertex properties, in this exact order::

    x y z nx ny nz f_dc_0 f_dc_1 f_dc_2 [f_rest_0 .. f_rest_8]
    opacity scale_0 scale_1 scale_2 rot_0 rot_1 rot_2 rot_3 [age]

Values are stored as held in memory (logit opacity, log scale, w-first
quaternion) in float64 so that a round trip is bit-exact. ``age`` is an
optional trailing int32 column; files without it load with zero ages.
"""

from __future__ import annotations

import numpy as np

from .core import GaussianCloud
from .errors import FormatError

_NP_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
             "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
             "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
             "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2"}


def property_names(sh_degree: int = 0) -> list:
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    if sh_degree >= 1:
        names += [f"f_rest_{i}" for i in range(9)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def write_ply(cloud: GaussianCloud, path) -> None:
    names = property_names(cloud.sh_degree)
    dtype = [(n, "<f8") for n in names] + [("age", "<i4")]
    n = len(cloud)
    data = np.zeros(n, dtype=dtype)
    cols = [cloud.positions, np.zeros((n, 3)), cloud.colors]
    if cloud.sh1 is not None:
        cols.append(cloud.sh1.reshape(n, 9))
    cols += [cloud.opacities[:, None], cloud.log_scales, cloud.rotations]
    table = np.concatenate(cols, axis=1) if n else np.zeros((0, len(names)))
    for i, name in enumerate(names):
        data[name] = table[:, i]
    data["age"] = np.clip(cloud.ages, 0, np.iinfo(np.int32).max)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property double {name}" for name in names]
    header += ["property int age", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def _parse_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise FormatError("not a PLY file", path)
    fmt, count, props, in_vertex = None, None, [], False
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("unterminated PLY header", path)
        parts = line.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif count is not None:
                raise FormatError(f"unexpected element {parts[1]!r} after vertex", path)
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise FormatError("list properties are not supported on vertices", path)
            if parts[1] not in _NP_TYPES:
                raise FormatError(f"unknown property type {parts[1]!r}", path)
            props.append((parts[2], _NP_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise FormatError(f"unsupported PLY format {fmt!r}", path)
    if count is None:
        raise FormatError("PLY has no vertex element", path)
    return count, props


def read_ply(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        count, props = _parse_header(fh, path)
        names = [p[0] for p in props]
        sh_degree = 1 if "f_rest_0" in names else 0
        expected = property_names(sh_degree)
        for i, name in enumerate(expected):
            if i >= len(names) or names[i] != name:
                got = names[i] if i < len(names) else "<end of header>"
                raise FormatError(f"expected property {name!r} at position {i}, found {got!r}", path)
        extra = names[len(expected):]
        if extra not in ([], ["age"]):
            raise FormatError(f"unexpected trailing properties {extra}", path)
        dtype = np.dtype(props)
        raw = fh.read(count * dtype.itemsize)
        if len(raw) != count * dtype.itemsize:
            raise FormatError("truncated PLY vertex data", path)
    data = np.frombuffer(raw, dtype=dtype, count=count)
    col = lambda *ns: np.stack([data[n].astype(np.float64) for n in ns], axis=1)  # noqa: E731
    sh1 = col(*[f"f_rest_{i}" for i in range(9)]).reshape(count, 3, 3) if sh_degree else None
    ages = data["age"].astype(np.int64) if "age" in names else None
    return GaussianCloud(col("x", "y", "z"), col("scale_0", "scale_1", "scale_2"),
                         col("rot_0", "rot_1", "rot_2", "rot_3"), data["opacity"].astype(np.float64),
                         col("f_dc_0", "f_dc_1", "f_dc_2"), sh1=sh1, ages=ages)
