"""Point and voxel containers, PLY I/O, deduplication and nearest-neighbor search."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "PointCloud",
    "VoxelizedCloud",
    "NeighborIndex",
    "PlyError",
    "PlyHeaderError",
    "PlyLayoutError",
    "PlyTruncatedError",
    "parse_ply",
    "write_ply",
    "read_ply",
    "save_ply",
    "dedupe",
    "knn_query",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    """Real-valued point set, shape (N, 3), float64. Duplicates are allowed."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, PointCloud) and np.array_equal(self.points, other.points)

    __hash__ = None


@dataclass(frozen=True)
class VoxelizedCloud:
    """Deduplicated integer voxels in lexicographic (x, y, z) order.

    Use :func:`dedupe` to build one from arbitrary integer coordinates; the
    constructor only validates.
    """

    voxels: np.ndarray
    bit_depth: int

    def __post_init__(self):
        vox = np.array(self.voxels, dtype=np.int64, copy=True).reshape(-1, 3)
        if self.bit_depth < 1:
            raise ValueError("bit_depth must be >= 1")
        if vox.size and (vox.min() < 0 or vox.max() >= (1 << self.bit_depth)):
            raise ValueError(f"voxel coordinates out of range for bit depth {self.bit_depth}")
        if len(vox) > 1 and not _strictly_lex_sorted(vox):
            raise ValueError("voxels must be unique and lexicographically sorted")
        object.__setattr__(self, "voxels", _frozen(vox))

    def __len__(self) -> int:
        return self.voxels.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, VoxelizedCloud)
            and self.bit_depth == other.bit_depth
            and np.array_equal(self.voxels, other.voxels)
        )

    __hash__ = None


def _strictly_lex_sorted(vox: np.ndarray) -> bool:
    diff = vox[1:] - vox[:-1]
    nz = diff != 0
    first = np.argmax(nz, axis=1)
    lead = diff[np.arange(len(diff)), first]
    return bool(np.all(nz.any(axis=1) & (lead > 0)))


def dedupe(voxels, bit_depth: int) -> VoxelizedCloud:
    """Removes duplicate voxels and sorts lexicographically."""
    vox = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    if vox.size and (vox.min() < 0 or vox.max() >= (1 << bit_depth)):
        raise ValueError(f"voxel coordinate outside [0, 2^{bit_depth})")
    if len(vox) == 0:
        return VoxelizedCloud(vox, bit_depth)
    if bit_depth <= 21:
        keys = np.unique((vox[:, 0] << 42) | (vox[:, 1] << 21) | vox[:, 2])
        mask = (1 << 21) - 1
        out = np.stack([keys >> 42, (keys >> 21) & mask, keys & mask], axis=1)
    else:
        out = np.unique(vox, axis=0)
    return VoxelizedCloud(out, bit_depth)


# --------------------------------------------------------------------------- PLY

class PlyError(ValueError):
    """Base class for PLY parsing failures. ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class PlyHeaderError(PlyError):
    pass


class PlyLayoutError(PlyError):
    pass


class PlyTruncatedError(PlyError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, numpy type code) or (name, None) for lists


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise PlyHeaderError("missing 'ply' magic", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise PlyHeaderError("missing end_header", len(data))
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyHeaderError("end_header not terminated by newline", end)
    body_start = nl + 1

    fmt = None
    elements: list[_Element] = []
    pos = 0
    for raw in data[:body_start].split(b"\n"):
        line_off = pos
        pos += len(raw) + 1
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line in ("ply", "end_header"):
            continue
        tok = line.split()
        if tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[2] != "1.0":
                raise PlyHeaderError(f"bad format line {line!r}", line_off)
            fmt = tok[1]
            if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PlyHeaderError(f"unknown format {fmt!r}", line_off)
            if fmt == "binary_big_endian":
                raise PlyLayoutError("big-endian PLY is not supported", line_off)
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyHeaderError(f"bad element line {line!r}", line_off)
            elements.append(_Element(tok[1], int(tok[2])))
        elif tok[0] == "property":
            if not elements:
                raise PlyHeaderError("property before any element", line_off)
            if len(tok) == 5 and tok[1] == "list":
                elements[-1].props.append((tok[4], None))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise PlyHeaderError(f"bad property line {line!r}", line_off)
        else:
            raise PlyHeaderError(f"unexpected header keyword {tok[0]!r}", line_off)
    if fmt is None:
        raise PlyHeaderError("missing format line", 0)
    return fmt, elements, body_start


def parse_ply(data: bytes) -> PointCloud:
    """Reads vertex positions from an ASCII or binary little-endian PLY."""
    fmt, elements, body = _parse_header(data)
    names = [e.name for e in elements]
    if "vertex" not in names:
        raise PlyLayoutError("no vertex element", body)
    vi = names.index("vertex")
    vertex = elements[vi]
    prop_names = [p[0] for p in vertex.props]
    for axis in "xyz":
        if axis not in prop_names:
            raise PlyLayoutError(f"vertex element lacks property {axis!r}", body)
        if dict(vertex.props)[axis] not in ("f4", "f8"):
            raise PlyLayoutError(f"property {axis!r} must be float or double", body)
    if any(t is None for _, t in vertex.props):
        raise PlyLayoutError("list properties in vertex element are not supported", body)

    if fmt == "ascii":
        return _parse_ascii(data, elements, vi, body)

    offset = body
    for e in elements[:vi]:
        if any(t is None for _, t in e.props):
            raise PlyLayoutError(f"variable-length element {e.name!r} precedes vertices", offset)
        offset += e.count * int(np.dtype([(n, "<" + t) for n, t in e.props]).itemsize)
    dtype = np.dtype([(n, "<" + t) for n, t in vertex.props])
    need = offset + vertex.count * dtype.itemsize
    if len(data) < need:
        raise PlyTruncatedError(
            f"vertex payload needs {need - offset} bytes, {max(len(data) - offset, 0)} present",
            len(data),
        )
    rec = np.frombuffer(data, dtype=dtype, count=vertex.count, offset=offset)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    return PointCloud(pts)


def _parse_ascii(data: bytes, elements, vi: int, body: int) -> PointCloud:
    vertex = elements[vi]
    cols = [p[0] for p in vertex.props]
    ix, iy, iz = cols.index("x"), cols.index("y"), cols.index("z")
    lines_to_skip = sum(e.count for e in elements[:vi])
    pos = body
    out = np.empty((vertex.count, 3), dtype=np.float64)
    row = -lines_to_skip
    n = len(data)
    while row < vertex.count:
        if pos >= n:
            raise PlyTruncatedError(
                f"expected {vertex.count} vertices, found {max(row, 0)}", n
            )
        nl = data.find(b"\n", pos)
        if nl < 0:
            nl = n
        line = data[pos:nl]
        line_off = pos
        pos = nl + 1
        if not line.strip():
            continue
        if row >= 0:
            tok = line.split()
            if len(tok) < len(cols):
                raise PlyTruncatedError(f"vertex {row} has {len(tok)} of {len(cols)} values", line_off)
            try:
                out[row] = (float(tok[ix]), float(tok[iy]), float(tok[iz]))
            except ValueError:
                raise PlyHeaderError(f"non-numeric vertex value in row {row}", line_off) from None
        row += 1
    return PointCloud(out)


def write_ply(cloud: PointCloud, format: str = "binary_le", dtype: str = "float32") -> bytes:
    """Serializes positions as PLY. Binary output is byte-deterministic."""
    pts = cloud.points
    if len(pts) == 0:
        raise ValueError("cannot write an empty point cloud")
    if dtype not in ("float32", "float64"):
        raise ValueError("dtype must be float32 or float64")
    ply_type = "float" if dtype == "float32" else "double"
    fmt_name = {"ascii": "ascii", "binary_le": "binary_little_endian"}.get(format)
    if fmt_name is None:
        raise ValueError(f"unknown PLY format {format!r}")
    header = (
        "ply\n"
        f"format {fmt_name} 1.0\n"
        f"element vertex {len(pts)}\n"
        f"property {ply_type} x\nproperty {ply_type} y\nproperty {ply_type} z\n"
        "end_header\n"
    ).encode("ascii")
    arr = pts.astype("<f4" if dtype == "float32" else "<f8")
    if format == "binary_le":
        return header + arr.tobytes()
    spec = "%.9g" if dtype == "float32" else "%.17g"
    body = "\n".join(" ".join(spec % v for v in row) for row in arr.tolist())
    return header + body.encode("ascii") + b"\n"


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        return parse_ply(fh.read())


def save_ply(cloud: PointCloud, path, format: str = "binary_le", dtype: str = "float32") -> None:
    with open(path, "wb") as fh:
        fh.write(write_ply(cloud, format, dtype))


# ------------------------------------------------------------------ neighbors

class NeighborIndex:
    """k-nearest / radius search over a point cloud.

    Results are exact: candidate sets come from a KD-tree, but distances are
    recomputed here and ordered by (distance, point index), so the answers are
    identical to a brute-force scan including ties.
    """

    def __init__(self, cloud):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot index an empty point cloud")
        self.points = pts
        self.tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def _exact(self, q: np.ndarray, cand: Sequence[int], k: int, radius):
        cand = np.asarray(cand, dtype=np.int64)
        diff = self.points[cand] - q
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        if radius is not None:
            keep = dist <= radius
            cand, dist = cand[keep], dist[keep]
        order = np.lexsort((cand, dist))[:k]
        return cand[order], dist[order]

    def query(self, q, k: int, radius: float | None = None):
        """Returns (indices, distances) of up to k neighbors of a single query point."""
        idx, dist, cnt = self.query_batch(np.asarray(q, dtype=np.float64).reshape(1, 3), k, radius)
        c = int(cnt[0])
        return idx[0, :c], dist[0, :c]

    def query_batch(self, queries, k: int, radius: float | None = None):
        """Batched exact kNN.

        Returns ``(idx, dist, count)`` with idx/dist of shape (Q, k); entries
        beyond ``count[i]`` are -1 / inf.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        if radius is not None and radius <= 0:
            raise ValueError("radius must be > 0")
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        kk = min(k, n)
        d, _ = self.tree.query(q, k=kk)
        d = np.asarray(d, dtype=np.float64).reshape(len(q), kk)
        # kth tree distance; widen a hair so ulp differences never drop a tied candidate
        reach = d[:, -1]
        if radius is not None:
            reach = np.minimum(reach, radius)
        reach = reach * (1 + 1e-9) + 1e-12
        cands = self.tree.query_ball_point(q, reach)
        out_idx = np.full((len(q), k), -1, dtype=np.int64)
        out_dist = np.full((len(q), k), np.inf)
        count = np.zeros(len(q), dtype=np.int64)
        for i in range(len(q)):
            ci, di = self._exact(q[i], cands[i], k, radius)
            c = len(ci)
            out_idx[i, :c] = ci
            out_dist[i, :c] = di
            count[i] = c
        return out_idx, out_dist, count


def knn_query(index: NeighborIndex, q, k: int, radius: float | None = None) -> list[tuple[int, float]]:
    """Up to k (point index, distance) pairs sorted by distance then index."""
    idx, dist = index.query(q, k, radius)
    return [(int(i), float(d)) for i, d in zip(idx, dist)]
