"""Nearest-neighbor correspondence search with reliability gating.

Search direction is template -> target, vertex to vertex. A match is
kept (weight 1) unless it fails the normal-angle gate or the distance
gate, in which case its weight is 0 and the vertex contributes nothing
to the data term.
"""

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError

__all__ = [
    "SpatialIndex",
    "build_spatial_index",
    "CorrespondenceSet",
    "find_correspondences",
    "default_max_distance",
]

DEFAULT_MAX_NORMAL_ANGLE = np.pi / 4


class SpatialIndex:
    """Exact nearest-neighbor index over a fixed point set.

    Ties (several points at the same minimal squared distance) resolve
    to the lowest point index, so queries are fully deterministic.
    Immutable after construction; concurrent queries are safe.
    """

    def __init__(self, points):
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValidationError(
                f"spatial index needs a non-empty (n, 3) point set, got {pts.shape}"
            )
        pts.flags.writeable = False
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return self.points.shape[0]

    def query(self, queries, workers=1):
        """Nearest point ids and distances for each query row.

        Candidate gathering goes through the kd-tree; the final argmin is
        recomputed with one fixed formula so ties break on the lowest
        index regardless of tree layout.
        """
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        dist, idx = self._tree.query(q, workers=workers)
        # collect every point within a whisker of the reported minimum,
        # then settle distance and tie-break in plain numpy
        radii = dist * (1.0 + 1e-9) + 1e-300
        balls = self._tree.query_ball_point(q, radii, workers=workers)
        out_idx = np.empty(q.shape[0], dtype=np.int64)
        out_d2 = np.empty(q.shape[0], dtype=np.float64)
        pts = self.points
        for k, candidates in enumerate(balls):
            if len(candidates) <= 1:
                cand = int(idx[k]) if not candidates else int(candidates[0])
                d = pts[cand] - q[k]
                out_idx[k] = cand
                out_d2[k] = d @ d
                continue
            cand = np.sort(np.asarray(candidates, dtype=np.int64))
            d = pts[cand] - q[k]
            d2 = np.einsum("ij,ij->i", d, d)
            best = int(np.argmin(d2))  # first minimum = lowest index (sorted)
            out_idx[k] = cand[best]
            out_d2[k] = d2[best]
        return out_idx, np.sqrt(out_d2)


def build_spatial_index(points):
    return SpatialIndex(points)


class CorrespondenceSet:
    """One (target point, weight) entry per template vertex, in vertex order."""

    def __init__(self, target_indices, target_points, weights, distances=None):
        self.target_indices = np.asarray(target_indices, dtype=np.int64)
        self.target_points = np.asarray(target_points, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.distances = (
            np.asarray(distances, dtype=np.float64) if distances is not None else None
        )
        n = self.target_indices.shape[0]
        if self.target_points.shape != (n, 3) or self.weights.shape != (n,):
            raise ValidationError("correspondence arrays have inconsistent shapes")

    def __len__(self):
        return self.target_indices.shape[0]


def default_max_distance(target):
    """Distance gate default: 5% of the target bounding-box diagonal."""
    lo, hi = target.bounding_box()
    return 0.05 * float(np.linalg.norm(hi - lo))


def find_correspondences(
    deformed_template,
    target,
    index=None,
    max_normal_angle=DEFAULT_MAX_NORMAL_ANGLE,
    max_distance=None,
    workers=1,
):
    """Closest target vertex for each template vertex, with gating.

    Both meshes must carry normals. A match keeps weight 1 unless the
    angle between the two vertex normals exceeds ``max_normal_angle`` or
    the distance exceeds ``max_distance`` (None: 5% of the target
    bounding-box diagonal). Pass ``max_normal_angle >= pi`` and
    ``max_distance = inf`` to disable gating.
    """
    if deformed_template.normals is None or target.normals is None:
        raise ValidationError("find_correspondences requires normals on both meshes")
    if index is None:
        index = SpatialIndex(target.vertices)
    if max_distance is None:
        max_distance = default_max_distance(target)

    idx, dist = index.query(deformed_template.vertices, workers=workers)
    points = index.points[idx]
    weights = np.ones(len(idx), dtype=np.float64)
    weights[dist > max_distance] = 0.0

    cosang = np.einsum("ij,ij->i", deformed_template.normals, target.normals[idx])
    angle = np.arccos(np.clip(cosang, -1.0, 1.0))
    weights[angle > max_normal_angle] = 0.0

    return CorrespondenceSet(idx, points, weights, distances=dist)
