"""Binary little-endian PLY reader/writer for 3DGS exports."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    MissingPropertyError,
    PlyError,
    TruncatedBodyError,
    UnsupportedFormatError,
)
from .splat_model import ExtraProperty, RawScene, sh_degree_from_width

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}

REQUIRED = (
    ["x", "y", "z"]
    + [f"f_dc_{i}" for i in range(3)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)
NORMALS = ["nx", "ny", "nz"]
_F_REST = re.compile(r"f_rest_(\d+)$")


@dataclass(frozen=True)
class PlyHeader:
    format: str
    vertex_count: int
    properties: list[tuple[str, str]]
    header_length: int
    sh_degree: int

    @property
    def stride(self) -> int:
        return sum(np.dtype(PLY_TYPES[t]).itemsize for _, t in self.properties)

    @property
    def body_length(self) -> int:
        return self.stride * self.vertex_count


def _read_header(data: bytes) -> PlyHeader:
    if not data.startswith(b"ply\n") and not data.startswith(b"ply\r\n"):
        raise BadMagicError("input does not start with 'ply'")
    end = data.find(b"end_header")
    if end < 0:
        raise PlyError("missing end_header")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyError("missing newline after end_header")
    header_length = nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()[1:]

    fmt = None
    vertex_count = None
    props: list[tuple[str, str]] = []
    current = None
    for line in lines:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
            if fmt != "binary_little_endian" or parts[2] != "1.0":
                raise UnsupportedFormatError(f"unsupported PLY format {' '.join(parts[1:])}")
        elif parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                vertex_count = int(parts[2])
            elif int(parts[2]) != 0:
                raise UnsupportedFormatError(f"unsupported element {current!r}")
        elif parts[0] == "property":
            if current != "vertex":
                continue
            if parts[1] == "list":
                raise UnsupportedFormatError("list properties are not supported on vertices")
            if parts[1] not in PLY_TYPES:
                raise UnsupportedFormatError(f"unknown scalar type {parts[1]!r}")
            props.append((parts[2], parts[1]))
    if fmt is None:
        raise UnsupportedFormatError("missing format line")
    if vertex_count is None:
        raise MissingPropertyError("element vertex")

    names = [n for n, _ in props]
    for req in REQUIRED:
        if req not in names:
            raise MissingPropertyError(req)
    rest = sorted(int(m.group(1)) for n in names if (m := _F_REST.match(n)))
    if rest != list(range(len(rest))):
        raise PlyError("f_rest_* properties must form a contiguous 0..K-1 run")
    degree = sh_degree_from_width(len(rest))
    if degree is None:
        raise PlyError(f"{len(rest)} f_rest coefficients do not match any SH degree")
    return PlyHeader("binary_little_endian_1_0", vertex_count, props, header_length, degree)


def sniff(data: bytes) -> PlyHeader:
    """Parse only the header."""
    return _read_header(data)


def parse_ply(data: bytes) -> RawScene:
    header = _read_header(data)
    n = header.vertex_count
    body = data[header.header_length : header.header_length + header.body_length]
    if len(body) < header.body_length:
        raise TruncatedBodyError(header.body_length, len(body))
    dtype = np.dtype([(name, PLY_TYPES[t]) for name, t in header.properties])
    rows = np.frombuffer(body, dtype=dtype, count=n)

    def cols(names):
        if not names:
            return np.zeros((n, 0), np.float32)
        return np.stack([rows[c].astype(np.float32) for c in names], axis=1)

    names = [p for p, _ in header.properties]
    k = 3 * ((header.sh_degree + 1) ** 2 - 1)
    rest_names = _rest_names(k)
    known = set(REQUIRED) | set(NORMALS) | set(rest_names)
    extras = tuple(
        ExtraProperty(name, t, rows[name].copy()) for name, t in header.properties if name not in known
    )
    return RawScene(
        position=cols(["x", "y", "z"]),
        normal=cols(NORMALS) if all(c in names for c in NORMALS) else None,
        f_dc=cols([f"f_dc_{i}" for i in range(3)]),
        f_rest=cols(rest_names),
        opacity_logit=rows["opacity"].astype(np.float32),
        log_scale=cols([f"scale_{i}" for i in range(3)]),
        quat=cols([f"rot_{i}" for i in range(4)]),
        sh_degree=header.sh_degree,
        extras=extras,
    )


def _rest_names(k: int) -> list[str]:
    return [f"f_rest_{i}" for i in range(k)]


def canonical_properties(sh_degree: int, extras=()) -> list[tuple[str, str]]:
    k = 3 * ((sh_degree + 1) ** 2 - 1)
    names = ["x", "y", "z"] + NORMALS + [f"f_dc_{i}" for i in range(3)] + _rest_names(k)
    names += ["opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
    return [(n, "float") for n in names] + [(e.name, e.ply_type) for e in extras]


def write_ply(raw: RawScene) -> bytes:
    props = canonical_properties(raw.sh_degree, raw.extras)
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {raw.count}"]
    lines += [f"property {t} {name}" for name, t in props]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")

    floats = np.concatenate(
        [
            raw.position,
            raw.normal,
            raw.f_dc,
            raw.f_rest,
            raw.opacity_logit[:, None],
            raw.log_scale,
            raw.quat,
        ],
        axis=1,
    ).astype("<f4")
    if not raw.extras:
        return header + floats.tobytes()
    dtype = np.dtype([(name, PLY_TYPES[t]) for name, t in props])
    rows = np.zeros(raw.count, dtype=dtype)
    for j, (name, _) in enumerate(props[: floats.shape[1]]):
        rows[name] = floats[:, j]
    for e in raw.extras:
        rows[e.name] = e.values
    return header + rows.tobytes()


def read_ply(path) -> RawScene:
    with open(path, "rb") as f:
        return parse_ply(f.read())


def save_ply(path, raw: RawScene) -> None:
    with open(path, "wb") as f:
        f.write(write_ply(raw))
