"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Backend selection: set ``MESHTRACK_NUMBA=0`` to force the numpy path,
``MESHTRACK_NUMBA=1`` to require numba (ImportError if missing). Unset,
numba is used when importable. Both paths compute the same quantities;
floating-point sums may differ in the last ulps because of summation
order, so cross-backend comparisons need a small relative tolerance.

``benchmarks/bench_kernels.py`` times the two paths side by side.
"""

import os

import numpy as np

__all__ = [
    "NUMBA_ENABLED",
    "accumulate_face_normals",
    "affine_transform_vertices",
    "stiffness_energy",
    "weighted_sq_error",
]


# ---------------------------------------------------------------------------
# pure-numpy reference implementations


def accumulate_face_normals_numpy(vertices, triangles):
    """Sum area-weighted face normals onto vertices; returns (n, 3) sums."""
    acc = np.zeros_like(vertices)
    if len(triangles) == 0:
        return acc
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    fn = np.cross(p1 - p0, p2 - p0)  # magnitude = 2 * area
    for k in range(3):
        np.add.at(acc, triangles[:, k], fn)
    return acc


def affine_transform_vertices_numpy(field, vertices):
    """Map vertex i through its own 3x4 affine block.

    ``field`` is (4n, 3); rows 4i..4i+3 hold the transposed block of
    vertex i, so the mapped position is [x y z 1] @ field[4i:4i+4].
    """
    n = vertices.shape[0]
    blocks = field.reshape(n, 4, 3)
    out = np.einsum("nij,ni->nj", blocks[:, :3, :], vertices)
    out += blocks[:, 3, :]
    return out


def stiffness_energy_numpy(field, edges, skew_weight):
    """Sum over edges of ||(X_i - X_j) G||_F^2 with G = diag(1,1,1,lam)."""
    if len(edges) == 0:
        return 0.0
    n = field.shape[0] // 4
    blocks = field.reshape(n, 4, 3)
    diff = blocks[edges[:, 0]] - blocks[edges[:, 1]]  # (m, 4, 3)
    sq = diff * diff
    lin = sq[:, :3, :].sum(axis=(1, 2))
    trans = sq[:, 3, :].sum(axis=1)
    return float(np.sum(lin + skew_weight * skew_weight * trans))


def weighted_sq_error_numpy(points, targets, weights):
    """Sum of ||w_i * (p_i - t_i)||^2; weights enter quadratically."""
    d = points - targets
    return float(np.sum(weights * weights * np.sum(d * d, axis=1)))


# ---------------------------------------------------------------------------
# numba fast path

_flag = os.environ.get("MESHTRACK_NUMBA", "").strip().lower()
if _flag in {"0", "false", "off", "no"}:
    _use_numba = False
elif _flag in {"1", "true", "on", "yes"}:
    import numba  # noqa: F401  -- fail loudly if requested but missing

    _use_numba = True
else:
    try:
        import numba  # noqa: F401

        _use_numba = True
    except ImportError:
        _use_numba = False

NUMBA_ENABLED = _use_numba

if _use_numba:
    from numba import njit

    @njit(cache=True)
    def accumulate_face_normals_numba(vertices, triangles):
        n = vertices.shape[0]
        acc = np.zeros((n, 3))
        for t in range(triangles.shape[0]):
            i, j, k = triangles[t, 0], triangles[t, 1], triangles[t, 2]
            e1x = vertices[j, 0] - vertices[i, 0]
            e1y = vertices[j, 1] - vertices[i, 1]
            e1z = vertices[j, 2] - vertices[i, 2]
            e2x = vertices[k, 0] - vertices[i, 0]
            e2y = vertices[k, 1] - vertices[i, 1]
            e2z = vertices[k, 2] - vertices[i, 2]
            fx = e1y * e2z - e1z * e2y
            fy = e1z * e2x - e1x * e2z
            fz = e1x * e2y - e1y * e2x
            for v in (i, j, k):
                acc[v, 0] += fx
                acc[v, 1] += fy
                acc[v, 2] += fz
        return acc

    @njit(cache=True)
    def affine_transform_vertices_numba(field, vertices):
        n = vertices.shape[0]
        out = np.empty((n, 3))
        for i in range(n):
            r = 4 * i
            x, y, z = vertices[i, 0], vertices[i, 1], vertices[i, 2]
            for c in range(3):
                out[i, c] = (
                    x * field[r, c]
                    + y * field[r + 1, c]
                    + z * field[r + 2, c]
                    + field[r + 3, c]
                )
        return out

    @njit(cache=True)
    def stiffness_energy_numba(field, edges, skew_weight):
        total = 0.0
        lam2 = skew_weight * skew_weight
        for e in range(edges.shape[0]):
            ri = 4 * edges[e, 0]
            rj = 4 * edges[e, 1]
            for row in range(3):
                for c in range(3):
                    d = field[ri + row, c] - field[rj + row, c]
                    total += d * d
            for c in range(3):
                d = field[ri + 3, c] - field[rj + 3, c]
                total += lam2 * d * d
        return total

    @njit(cache=True)
    def weighted_sq_error_numba(points, targets, weights):
        total = 0.0
        for i in range(points.shape[0]):
            w2 = weights[i] * weights[i]
            for c in range(3):
                d = points[i, c] - targets[i, c]
                total += w2 * d * d
        return total

    accumulate_face_normals = accumulate_face_normals_numba
    affine_transform_vertices = affine_transform_vertices_numba
    stiffness_energy = stiffness_energy_numba
    weighted_sq_error = weighted_sq_error_numba
else:
    accumulate_face_normals = accumulate_face_normals_numpy
    affine_transform_vertices = affine_transform_vertices_numpy
    stiffness_energy = stiffness_energy_numpy
    weighted_sq_error = weighted_sq_error_numpy
