"""Registration quality scored over landmark-centered surface regions.

For each landmark, the region is the n-ring of mesh vertices around it
(BFS over edges, center included). Coordinate error is the distance
between region mean positions on the two meshes; normal error is the
angle between the renormalized region mean normals. A region whose mean
normal cancels to (near) zero is degenerate: it keeps its coordinate
error but is excluded from the normal average and flagged.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .mesh import n_ring

__all__ = ["RegionMetrics", "SequenceMetrics", "evaluate_registration",
           "evaluate_sequence", "dense_errors"]

_DEGENERATE_NORM = 1e-12


@dataclass
class RegionMetrics:
    coordinate_errors: np.ndarray  # (k,) distances between region means
    normal_errors: np.ndarray  # (k,) radians, NaN where degenerate
    degenerate: np.ndarray  # (k,) bool, mean normal cancelled on either side
    ring: int

    @property
    def mean_coordinate_error(self):
        return float(np.mean(self.coordinate_errors))

    @property
    def mean_normal_error(self):
        valid = self.normal_errors[~self.degenerate]
        return float(np.mean(valid)) if valid.size else float("nan")


@dataclass
class SequenceMetrics:
    per_frame: list

    @property
    def mean_coordinate_error(self):
        return float(np.mean([m.mean_coordinate_error for m in self.per_frame]))

    @property
    def mean_normal_error(self):
        vals = [m.mean_normal_error for m in self.per_frame]
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")


def _region_stats(mesh, normals, center, ring):
    idx = n_ring(mesh, center, ring)
    mean_pos = mesh.vertices[idx].mean(axis=0)
    mean_nrm = normals[idx].mean(axis=0)
    norm = np.linalg.norm(mean_nrm)
    if norm <= _DEGENERATE_NORM:
        return mean_pos, None
    return mean_pos, mean_nrm / norm


def evaluate_registration(fitted, reference, landmark_indices,
                          reference_indices=None, ring=2):
    """Score fitted against reference over rings around paired landmarks.

    landmark_indices address fitted vertices; reference_indices address
    reference vertices (defaults to the same indices, the usual case when
    both meshes share the template topology).
    """
    landmark_indices = np.asarray(landmark_indices, dtype=np.int64)
    if reference_indices is None:
        reference_indices = landmark_indices
    else:
        reference_indices = np.asarray(reference_indices, dtype=np.int64)
    if landmark_indices.size != reference_indices.size:
        raise ValidationError("landmark index lists must pair up")
    if landmark_indices.size == 0:
        raise ValidationError("need at least one landmark to evaluate")
    if ring < 0:
        raise ValidationError("ring must be >= 0")
    for idx, mesh, side in ((landmark_indices, fitted, "fitted"),
                            (reference_indices, reference, "reference")):
        if np.any(idx < 0) or np.any(idx >= mesh.n_vertices):
            raise ValidationError(f"landmark index out of range on {side} mesh")

    fit_n = fitted.normals if fitted.normals is not None \
        else fitted.with_normals().normals
    ref_n = reference.normals if reference.normals is not None \
        else reference.with_normals().normals

    k = landmark_indices.size
    coord = np.empty(k)
    angle = np.full(k, np.nan)
    degenerate = np.zeros(k, dtype=bool)
    for j, (fi, ri) in enumerate(zip(landmark_indices, reference_indices)):
        f_pos, f_nrm = _region_stats(fitted, fit_n, int(fi), ring)
        r_pos, r_nrm = _region_stats(reference, ref_n, int(ri), ring)
        coord[j] = np.linalg.norm(f_pos - r_pos)
        if f_nrm is None or r_nrm is None:
            degenerate[j] = True
        else:
            angle[j] = np.arccos(np.clip(f_nrm @ r_nrm, -1.0, 1.0))
    return RegionMetrics(coord, angle, degenerate, ring)


def evaluate_sequence(fitted_frames, reference_frames, landmark_indices,
                      reference_indices=None, ring=2):
    if len(fitted_frames) != len(reference_frames):
        raise ValidationError("frame counts differ")
    per_frame = [
        evaluate_registration(f, r, landmark_indices, reference_indices, ring)
        for f, r in zip(fitted_frames, reference_frames)
    ]
    return SequenceMetrics(per_frame)


def dense_errors(positions_a, positions_b):
    """Per-vertex distances between two (n, 3) position arrays."""
    a = np.asarray(positions_a, dtype=np.float64)
    b = np.asarray(positions_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValidationError("position arrays must both be (n, 3)")
    return np.linalg.norm(a - b, axis=1)
