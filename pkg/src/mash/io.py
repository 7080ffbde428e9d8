"""Point-cloud input, normalisation, .mash parameter files and oriented PLY export."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import MashModel
from .sh import num_coeffs


class CloudFormatError(ValueError):
    """A point-cloud file could not be parsed; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MalformedHeaderError(CloudFormatError):
    pass


class TruncatedBodyError(CloudFormatError):
    pass


class UnsupportedEncodingError(CloudFormatError):
    pass


class MashFileError(ValueError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, (count_dtype, item_dtype)) for lists


def _parse_ply_header(data: bytes):
    if not data.startswith(b"ply"):
        raise MalformedHeaderError("missing 'ply' magic", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise MalformedHeaderError("no end_header line", len(data))
    body = data.find(b"\n", end)
    if body < 0:
        raise MalformedHeaderError("header not terminated by newline", end)
    body += 1

    fmt = None
    elements: list[_Element] = []
    offset = 0
    for raw in data[:end].split(b"\n"):
        line_offset = offset
        offset += len(raw) + 1
        words = raw.decode("ascii", errors="replace").strip().split()
        if not words or words[0] in ("ply", "comment", "obj_info"):
            continue
        try:
            if words[0] == "format":
                fmt = words[1]
                if fmt not in ("ascii", "binary_little_endian"):
                    raise UnsupportedEncodingError(f"unsupported PLY encoding {fmt!r}", line_offset)
            elif words[0] == "element":
                elements.append(_Element(words[1], int(words[2]), []))
            elif words[0] == "property":
                if not elements:
                    raise MalformedHeaderError("property before any element", line_offset)
                if words[1] == "list":
                    elements[-1].props.append((words[4], (_PLY_TYPES[words[2]], _PLY_TYPES[words[3]])))
                else:
                    elements[-1].props.append((words[2], _PLY_TYPES[words[1]]))
            else:
                raise MalformedHeaderError(f"unexpected header keyword {words[0]!r}", line_offset)
        except (IndexError, KeyError, ValueError) as exc:
            if isinstance(exc, CloudFormatError):
                raise
            raise MalformedHeaderError(f"bad header line {raw!r}", line_offset) from None
    if fmt is None:
        raise MalformedHeaderError("missing format line", 0)
    return fmt, elements, body


def _read_ascii_ply(data: bytes, elements, body: int) -> dict:
    out = {}
    pos = body
    for el in elements:
        rows = []
        for _ in range(el.count):
            nl = data.find(b"\n", pos)
            line = data[pos:] if nl < 0 else data[pos:nl]
            if pos >= len(data):
                raise TruncatedBodyError(f"expected {el.count} {el.name} rows", pos)
            words = line.split()
            vals, i = [], 0
            try:
                for _, typ in el.props:
                    if isinstance(typ, tuple):
                        n = int(words[i])
                        i += 1 + n
                        vals.append(np.nan)
                    else:
                        vals.append(float(words[i]))
                        i += 1
            except (IndexError, ValueError):
                raise TruncatedBodyError(f"short or bad {el.name} row", pos) from None
            rows.append(vals)
            pos = len(data) if nl < 0 else nl + 1
        out[el.name] = (el, np.array(rows, dtype=float).reshape(el.count, len(el.props)))
    return out


def _read_binary_ply(data: bytes, elements, body: int) -> dict:
    out = {}
    pos = body
    for el in elements:
        if any(isinstance(t, tuple) for _, t in el.props):
            vals = np.empty((el.count, len(el.props)))
            for r in range(el.count):
                for c, (_, typ) in enumerate(el.props):
                    if isinstance(typ, tuple):
                        cdt, idt = np.dtype("<" + typ[0]), np.dtype("<" + typ[1])
                        if pos + cdt.itemsize > len(data):
                            raise TruncatedBodyError(f"truncated {el.name} list", pos)
                        n = int(np.frombuffer(data, cdt, 1, pos)[0])
                        pos += cdt.itemsize + n * idt.itemsize
                        vals[r, c] = np.nan
                    else:
                        dt = np.dtype("<" + typ)
                        if pos + dt.itemsize > len(data):
                            raise TruncatedBodyError(f"truncated {el.name} element", pos)
                        vals[r, c] = np.frombuffer(data, dt, 1, pos)[0]
                        pos += dt.itemsize
            if pos > len(data):
                raise TruncatedBodyError(f"truncated {el.name} element", len(data))
            out[el.name] = (el, vals)
            continue
        dtype = np.dtype([(name, "<" + typ) for name, typ in el.props])
        need = dtype.itemsize * el.count
        if pos + need > len(data):
            raise TruncatedBodyError(
                f"{el.name} needs {need} bytes, {len(data) - pos} available", len(data))
        arr = np.frombuffer(data, dtype, el.count, pos)
        pos += need
        out[el.name] = (el, np.stack([arr[n].astype(float) for n, _ in el.props], axis=1)
                        if el.props else np.zeros((el.count, 0)))
    return out


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    data = Path(path).read_bytes()
    fmt, elements, body = _parse_ply_header(data)
    reader = _read_ascii_ply if fmt == "ascii" else _read_binary_ply
    parsed = reader(data, elements, body)
    if "vertex" not in parsed:
        raise MalformedHeaderError("no vertex element", 0)
    el, vals = parsed["vertex"]
    names = [n for n, _ in el.props]
    try:
        pts = vals[:, [names.index(c) for c in ("x", "y", "z")]]
    except ValueError:
        raise MalformedHeaderError("vertex element lacks x, y, z", 0) from None
    normals = None
    if all(c in names for c in ("nx", "ny", "nz")):
        normals = vals[:, [names.index(c) for c in ("nx", "ny", "nz")]]
    return pts, normals


def _read_text_columns(path, prefix: bytes | None):
    data = Path(path).read_bytes()
    pts, normals = [], []
    offset = 0
    for raw in data.split(b"\n"):
        line_offset = offset
        offset += len(raw) + 1
        line = raw.strip()
        if not line or line.startswith(b"#"):
            continue
        words = line.split()
        if prefix is not None:
            if words[0] == prefix:
                target = pts
            elif words[0] == b"vn":
                target = normals
            else:
                continue
            words = words[1:]
        else:
            target = pts
        try:
            target.append([float(w) for w in words[:3]])
            if len(words) < 3:
                raise ValueError
        except ValueError:
            raise CloudFormatError(f"bad coordinate line {raw!r}", line_offset) from None
        if prefix is None and len(words) >= 6:
            normals.append([float(w) for w in words[3:6]])
    pts_arr = np.array(pts, dtype=float).reshape(-1, 3)
    n_arr = np.array(normals, dtype=float).reshape(-1, 3) if len(normals) == len(pts) and normals else None
    return pts_arr, n_arr


def load_cloud(path, format: str | None = None, with_normals: bool = False):
    """Read points (and optionally normals) from .ply, .obj or .xyz."""
    fmt = (format or Path(path).suffix.lstrip(".")).lower()
    if fmt == "ply":
        pts, normals = read_ply(path)
    elif fmt == "obj":
        pts, normals = _read_text_columns(path, b"v")
    elif fmt in ("xyz", "txt", "pts"):
        pts, normals = _read_text_columns(path, None)
    else:
        raise ValueError(f"unknown point-cloud format {fmt!r}")
    return (pts, normals) if with_normals else pts


@dataclass(frozen=True)
class Normalization:
    """x_normalised = (x - center) * scale."""

    center: np.ndarray
    scale: float

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.center) * self.scale

    def invert(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) / self.scale + self.center

    def invert_model(self, model: MashModel) -> MashModel:
        """Express a model fitted in normalised space in original coordinates.

        Patches scale with their SH coefficients, so only positions and
        coefficients change."""
        out = model.copy()
        out.positions = self.invert(model.positions)
        out.sh_coeffs = model.sh_coeffs / self.scale
        return out

    def apply_model(self, model: MashModel) -> MashModel:
        out = model.copy()
        out.positions = self.apply(model.positions)
        out.sh_coeffs = model.sh_coeffs * self.scale
        return out


NORMALIZED_EXTENT = 0.9


def normalize(points) -> tuple[np.ndarray, Normalization]:
    """Centre on the bounding-box centre and scale the longest edge to 0.9."""
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        raise ValueError("empty point set")
    lo, hi = points.min(axis=0), points.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = float(np.max(hi - lo))
    scale = NORMALIZED_EXTENT / extent if extent > 0 else 1.0
    tr = Normalization(center, scale)
    return tr.apply(points), tr


MAGIC = b"MASH"
VERSION = 1
# magic, version u8, L u8, K u8, reserved u8, M u32, n_dir u32
_HEADER = struct.Struct("<4sBBBBII")
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def mash_file_size(M: int, K: int, L: int) -> int:
    return _HEADER.size + M * (6 + num_coeffs(L) + 2 * K + 1) * 8 + 8


def mash_bytes(model: MashModel) -> bytes:
    if model.L > 255 or model.K > 255:
        raise MashFileError("L and K must fit in one byte")
    head = _HEADER.pack(MAGIC, VERSION, model.L, model.K, 0, model.M, model.n_dir)
    payload = head + model.flatten().astype("<f8").tobytes()
    return payload + struct.pack("<Q", fnv1a64(payload))


def save_mash(path, model: MashModel) -> None:
    Path(path).write_bytes(mash_bytes(model))


def parse_mash(data: bytes) -> MashModel:
    if len(data) < _HEADER.size + 8:
        raise MashFileError("file too short for a MASH header")
    magic, version, L, K, _, M, n_dir = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise MashFileError("bad magic, not a MASH file")
    if version != VERSION:
        raise MashFileError(f"unsupported MASH format version {version}")
    expected = mash_file_size(M, K, L)
    if len(data) != expected:
        raise MashFileError(f"expected {expected} bytes, got {len(data)}")
    (stored,) = struct.unpack_from("<Q", data, len(data) - 8)
    if stored != fnv1a64(data[:-8]):
        raise MashFileError("checksum mismatch")
    flat = np.frombuffer(data, "<f8", offset=_HEADER.size, count=(len(data) - _HEADER.size - 8) // 8)
    return MashModel.unflatten(flat.astype(float), M, L, K, n_dir)


def load_mash(path) -> MashModel:
    return parse_mash(Path(path).read_bytes())


def export_oriented_ply(points, normals, path, transform: Normalization | None = None) -> None:
    """Binary little-endian PLY with double x, y, z, nx, ny, nz."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty point set")
    if len(normals) != len(points):
        raise ValueError("points and normals differ in length")
    if transform is not None:
        points = transform.invert(points)
    write_ply(path, points, normals)


def write_ply(path, points, normals=None) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if normals is not None else [])
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}"]
    header += [f"property double {p}" for p in props]
    header.append("end_header")
    cols = points if normals is None else np.hstack([points, np.asarray(normals, dtype=float)])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(cols, dtype="<f8").tobytes())
