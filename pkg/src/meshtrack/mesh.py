"""Triangle mesh representation, OBJ/PLY I/O, and derived quantities.

Vertex order is the correspondence identity for the whole pipeline: no
operation here (or anywhere else in the package) reorders vertices.
Meshes are immutable after construction and safe to share between
threads.
"""

import json
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import FileFormatError, ValidationError
from .kernels import accumulate_face_normals

__all__ = [
    "Mesh",
    "LandmarkSet",
    "load_mesh",
    "save_mesh",
    "load_landmarks",
    "save_landmarks",
    "compute_vertex_normals",
    "build_edge_list",
    "n_ring",
]


class Mesh:
    """Immutable triangle mesh: vertices (n, 3), triangles (m, 3), optional unit normals.

    Triangle indices must be in range and reference three distinct
    vertices. An empty mesh (no vertices, no triangles) is valid.
    """

    def __init__(self, vertices, triangles, normals=None):
        v = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(triangles, dtype=np.int64))
        if v.size == 0:
            v = v.reshape(0, 3)
        if t.size == 0:
            t = t.reshape(0, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be (n, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValidationError(f"triangles must be (m, 3), got {t.shape}")
        if t.size:
            if t.min() < 0 or t.max() >= v.shape[0]:
                raise ValidationError(
                    f"triangle index out of range [0, {v.shape[0]}): "
                    f"min={t.min()}, max={t.max()}"
                )
            degenerate = (
                (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
            )
            if degenerate.any():
                bad = int(np.nonzero(degenerate)[0][0])
                raise ValidationError(
                    f"degenerate triangle {bad}: indices {tuple(t[bad])}"
                )
        v.flags.writeable = False
        t.flags.writeable = False
        self.vertices = v
        self.triangles = t
        if normals is not None:
            nrm = np.ascontiguousarray(np.asarray(normals, dtype=np.float64))
            if nrm.shape != v.shape:
                raise ValidationError(
                    f"normals shape {nrm.shape} does not match vertices {v.shape}"
                )
            nrm.flags.writeable = False
        self.normals = nrm if normals is not None else None

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @cached_property
    def edges(self):
        """Undirected edge list, each (i, j) with i < j, sorted lexicographically."""
        return build_edge_list(self)

    @cached_property
    def _adjacency(self):
        """CSR vertex adjacency (offsets, neighbors) built from the edge list."""
        n = self.n_vertices
        e = self.edges
        counts = np.zeros(n, dtype=np.int64)
        if len(e):
            np.add.at(counts, e[:, 0], 1)
            np.add.at(counts, e[:, 1], 1)
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        neighbors = np.empty(offsets[-1], dtype=np.int64)
        cursor = offsets[:-1].copy()
        for i, j in e:
            neighbors[cursor[i]] = j
            cursor[i] += 1
            neighbors[cursor[j]] = i
            cursor[j] += 1
        return offsets, neighbors

    def with_normals(self):
        """Return a copy carrying freshly computed vertex normals."""
        normals, _ = compute_vertex_normals(self)
        return Mesh(self.vertices, self.triangles, normals=normals)

    def with_vertices(self, vertices):
        """Return a mesh with replaced vertex positions, same topology, no normals."""
        return Mesh(vertices, self.triangles)

    def bounding_box(self):
        if self.n_vertices == 0:
            raise ValidationError("empty mesh has no bounding box")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return (
            self.vertices.shape == other.vertices.shape
            and self.triangles.shape == other.triangles.shape
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
        )

    def __repr__(self):
        return f"Mesh(n_vertices={self.n_vertices}, n_triangles={self.n_triangles})"


@dataclass(frozen=True)
class LandmarkSet:
    """Pairs of (template vertex index, target 3D position) in model units."""

    vertex_indices: np.ndarray  # (k,) int64
    positions: np.ndarray  # (k, 3) float64

    def __post_init__(self):
        idx = np.ascontiguousarray(np.asarray(self.vertex_indices, dtype=np.int64))
        pos = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        if pos.size == 0:
            pos = pos.reshape(0, 3)
        if idx.ndim != 1 or pos.ndim != 2 or pos.shape != (idx.shape[0], 3):
            raise ValidationError(
                f"landmark shapes mismatch: indices {idx.shape}, positions {pos.shape}"
            )
        idx.flags.writeable = False
        pos.flags.writeable = False
        object.__setattr__(self, "vertex_indices", idx)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return self.vertex_indices.shape[0]

    def validate_for(self, mesh):
        """Raise if any vertex index is out of range for ``mesh``."""
        if len(self) and (
            self.vertex_indices.min() < 0
            or self.vertex_indices.max() >= mesh.n_vertices
        ):
            raise ValidationError(
                f"landmark vertex index out of range for mesh with "
                f"{mesh.n_vertices} vertices"
            )

    def transformed(self, positions):
        """Return a copy with replaced target positions (same vertex indices)."""
        return LandmarkSet(self.vertex_indices, positions)


# ---------------------------------------------------------------------------
# derived quantities


def compute_vertex_normals(mesh):
    """Area-weighted vertex normals.

    Returns ``(normals, isolated)`` where normals is (n, 3) with unit rows
    for every vertex touched by at least one triangle, and ``isolated`` is
    a boolean mask marking vertices with no incident triangle (their
    normal is the zero vector).
    """
    acc = accumulate_face_normals(mesh.vertices, mesh.triangles)
    norms = np.linalg.norm(acc, axis=1)
    isolated = np.ones(mesh.n_vertices, dtype=bool)
    if mesh.n_triangles:
        isolated[np.unique(mesh.triangles)] = False
    safe = np.where(norms > 0.0, norms, 1.0)
    normals = acc / safe[:, None]
    normals[norms == 0.0] = 0.0
    # vertices whose incident face normals cancel exactly keep a zero vector
    isolated |= norms == 0.0
    return normals, isolated


def build_edge_list(mesh):
    """Each undirected triangle edge exactly once, (i, j) with i < j, sorted."""
    t = mesh.triangles
    if t.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    raw = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [0, 2]]])
    raw.sort(axis=1)
    return np.unique(raw, axis=0)


def n_ring(mesh, vertex, n):
    """Vertices within graph distance <= n of the seed, seed included.

    Returns a sorted int64 array (a set of vertex indices).
    """
    if not 0 <= vertex < mesh.n_vertices:
        raise ValidationError(
            f"vertex {vertex} out of range [0, {mesh.n_vertices})"
        )
    if n < 0:
        raise ValidationError(f"ring count must be >= 0, got {n}")
    offsets, neighbors = mesh._adjacency
    visited = np.zeros(mesh.n_vertices, dtype=bool)
    visited[vertex] = True
    frontier = [vertex]
    for _ in range(n):
        nxt = []
        for v in frontier:
            for u in neighbors[offsets[v] : offsets[v + 1]]:
                if not visited[u]:
                    visited[u] = True
                    nxt.append(int(u))
        if not nxt:
            break
        frontier = nxt
    return np.nonzero(visited)[0].astype(np.int64)


# ---------------------------------------------------------------------------
# OBJ


def _save_obj(mesh, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# meshtrack OBJ: {mesh.n_vertices} vertices, {mesh.n_triangles} faces\n")
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def _load_obj(path):
    vertices = []
    faces = []
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise FileFormatError(f"{path}:{lineno}: malformed vertex line")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise FileFormatError(f"{path}:{lineno}: bad vertex number") from exc
            elif tag == "f":
                if len(parts) != 4:
                    raise FileFormatError(
                        f"{path}:{lineno}: only triangular faces are supported"
                    )
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        k = int(head)
                    except ValueError as exc:
                        raise FileFormatError(f"{path}:{lineno}: bad face index") from exc
                    if k < 1:
                        raise FileFormatError(
                            f"{path}:{lineno}: face index must be positive, got {k}"
                        )
                    idx.append(k - 1)
                faces.append(idx)
            # vt/vn/usemtl/mtllib/o/g/s and anything else are ignored
    try:
        return Mesh(vertices, faces)
    except ValidationError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# PLY (ASCII and binary little-endian)

_PLY_TYPES = {
    "char": "b", "int8": "b",
    "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i",
    "uint": "I", "uint32": "I",
    "float": "f", "float32": "f",
    "double": "d", "float64": "d",
}


def _save_ply(mesh, path, binary=True):
    has_normals = mesh.normals is not None
    header = ["ply"]
    header.append(
        "format binary_little_endian 1.0" if binary else "format ascii 1.0"
    )
    header.append(f"element vertex {mesh.n_vertices}")
    header.extend(["property double x", "property double y", "property double z"])
    if has_normals:
        header.extend(["property double nx", "property double ny", "property double nz"])
    header.append(f"element face {mesh.n_triangles}")
    header.append("property list uchar int vertex_indices")
    header.append("end_header")
    if binary:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            if has_normals:
                inter = np.hstack([mesh.vertices, mesh.normals])
            else:
                inter = mesh.vertices
            fh.write(np.ascontiguousarray(inter, dtype="<f8").tobytes())
            if mesh.n_triangles:
                face_dt = np.dtype([("cnt", "u1"), ("idx", "<i4", (3,))])
                faces = np.empty(mesh.n_triangles, dtype=face_dt)
                faces["cnt"] = 3
                faces["idx"] = mesh.triangles
                fh.write(faces.tobytes())
    else:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(header) + "\n")
            for i in range(mesh.n_vertices):
                row = [f"{c:.17g}" for c in mesh.vertices[i]]
                if has_normals:
                    row += [f"{c:.17g}" for c in mesh.normals[i]]
                fh.write(" ".join(row) + "\n")
            for a, b, c in mesh.triangles:
                fh.write(f"3 {a} {b} {c}\n")


def _parse_ply_header(fh, path):
    def next_line():
        raw = fh.readline()
        if not raw:
            raise FileFormatError(f"{path}: truncated PLY header")
        return raw.decode("ascii", errors="replace").strip()

    if next_line() != "ply":
        raise FileFormatError(f"{path}: missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop_name, type) | ('__list__', count_t, idx_t, name)])
    while True:
        line = next_line()
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise FileFormatError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("__list__", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append((parts[2], parts[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FileFormatError(f"{path}: unsupported PLY format '{fmt}'")
    return fmt, elements


def _load_ply(path):
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh, path)
        vertices = normals = None
        faces = []
        for name, count, props in elements:
            if fmt == "ascii":
                rows = []
                for _ in range(count):
                    raw = fh.readline()
                    if not raw:
                        raise FileFormatError(f"{path}: truncated {name} data")
                    rows.append(raw.split())
                data = rows
            if name == "vertex":
                cols = {p[0]: k for k, p in enumerate(props)}
                for axis in ("x", "y", "z"):
                    if axis not in cols:
                        raise FileFormatError(f"{path}: vertex missing property {axis}")
                if any(p[0] == "__list__" for p in props):
                    raise FileFormatError(f"{path}: list property on vertex element")
                if fmt == "ascii":
                    arr = np.array(
                        [[float(tok) for tok in row] for row in data], dtype=np.float64
                    ).reshape(count, len(props))
                else:
                    dt = np.dtype([(f"p{k}", "<" + _PLY_TYPES[p[1]]) for k, p in enumerate(props)])
                    buf = fh.read(dt.itemsize * count)
                    if len(buf) != dt.itemsize * count:
                        raise FileFormatError(f"{path}: truncated vertex data")
                    rec = np.frombuffer(buf, dtype=dt)
                    arr = np.column_stack([rec[f"p{k}"].astype(np.float64) for k in range(len(props))])
                    arr = arr.reshape(count, len(props))
                vertices = arr[:, [cols["x"], cols["y"], cols["z"]]]
                if all(a in cols for a in ("nx", "ny", "nz")):
                    normals = arr[:, [cols["nx"], cols["ny"], cols["nz"]]]
            elif name == "face":
                if len(props) != 1 or props[0][0] != "__list__":
                    raise FileFormatError(f"{path}: face element must be a single index list")
                _, count_t, idx_t, _ = props[0]
                if fmt == "ascii":
                    for row in data:
                        k = int(row[0])
                        if k != 3:
                            raise FileFormatError(f"{path}: only triangular faces are supported")
                        faces.append([int(row[1]), int(row[2]), int(row[3])])
                else:
                    cs = struct.Struct("<" + _PLY_TYPES[count_t])
                    idx_code = "<" + _PLY_TYPES[idx_t]
                    isz = struct.calcsize(idx_code)
                    for _ in range(count):
                        raw = fh.read(cs.size)
                        if len(raw) != cs.size:
                            raise FileFormatError(f"{path}: truncated face data")
                        k = cs.unpack(raw)[0]
                        if k != 3:
                            raise FileFormatError(f"{path}: only triangular faces are supported")
                        buf = fh.read(3 * isz)
                        if len(buf) != 3 * isz:
                            raise FileFormatError(f"{path}: truncated face data")
                        faces.append(list(struct.unpack("<3" + _PLY_TYPES[idx_t], buf)))
            else:
                # skip unknown elements
                if fmt == "ascii":
                    continue
                if any(p[0] == "__list__" for p in props):
                    raise FileFormatError(
                        f"{path}: cannot skip binary element '{name}' with list property"
                    )
                size = sum(struct.calcsize(_PLY_TYPES[p[1]]) for p in props)
                fh.read(size * count)
    if vertices is None:
        raise FileFormatError(f"{path}: no vertex element")
    try:
        return Mesh(vertices, faces, normals=normals)
    except ValidationError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# public I/O


def _infer_format(path, format):
    if format is not None:
        fmt = format.lower()
        if fmt not in ("obj", "ply"):
            raise ValidationError(f"unknown mesh format '{format}'")
        return fmt
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return "obj"
    if suffix == ".ply":
        return "ply"
    raise ValidationError(f"cannot infer mesh format from '{path}'")


def load_mesh(path, format=None):
    """Load an OBJ or PLY mesh; vertex order is preserved exactly."""
    fmt = _infer_format(path, format)
    if not Path(path).exists():
        raise FileNotFoundError(path)
    return _load_obj(path) if fmt == "obj" else _load_ply(path)


def save_mesh(mesh, path, format=None, binary=True):
    """Write a mesh re-loadable by :func:`load_mesh` to equal coordinates.

    PLY is written binary little-endian by default (``binary=False`` for
    ASCII); both store float64 and round-trip exactly, as does OBJ.
    """
    fmt = _infer_format(path, format)
    if fmt == "obj":
        _save_obj(mesh, path)
    else:
        _save_ply(mesh, path, binary=binary)


def load_landmarks(path):
    """Landmark JSON: array of {"vertex": int, "position": [x, y, z]}."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            records = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise FileFormatError(f"{path}: expected a JSON array of landmark records")
    indices, positions = [], []
    for k, rec in enumerate(records):
        try:
            indices.append(int(rec["vertex"]))
            pos = rec["position"]
            positions.append([float(pos[0]), float(pos[1]), float(pos[2])])
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise FileFormatError(f"{path}: bad landmark record {k}: {rec!r}") from exc
    return LandmarkSet(np.array(indices, dtype=np.int64), np.array(positions))


def save_landmarks(landmarks, path):
    records = [
        {"vertex": int(i), "position": [float(c) for c in p]}
        for i, p in zip(landmarks.vertex_indices, landmarks.positions)
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)
        fh.write("\n")


def largest_connected_component(mesh):
    """Mask of vertices in the largest edge-connected component.

    Basic cleanup helper for scans with small disconnected pieces; it
    does not remove anything itself, callers filter with the mask.
    """
    n = mesh.n_vertices
    if n == 0:
        return np.zeros(0, dtype=bool)
    offsets, neighbors = mesh._adjacency
    label = np.full(n, -1, dtype=np.int64)
    current = 0
    best_label, best_size = 0, 0
    for seed in range(n):
        if label[seed] >= 0:
            continue
        stack = [seed]
        label[seed] = current
        size = 0
        while stack:
            v = stack.pop()
            size += 1
            for u in neighbors[offsets[v] : offsets[v + 1]]:
                if label[u] < 0:
                    label[u] = current
                    stack.append(int(u))
        if size > best_size:
            best_label, best_size = current, size
        current += 1
    return label == best_label
