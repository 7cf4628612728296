"""Similarity transforms (rotation + uniform scale + translation).

Closed-form estimation from point pairs via SVD of the cross-covariance,
unit-cube normalization, and a landmark-initialized rigid ICP loop with
scale.
"""

from dataclasses import dataclass

import numpy as np

from . import correspondence as corr_mod
from .errors import DegenerateGeometryError, ValidationError
from .mesh import Mesh, compute_vertex_normals

__all__ = [
    "SimilarityTransform",
    "estimate_similarity",
    "apply_similarity",
    "rescale_to_unit_cube",
    "rigid_icp_with_scale",
]

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> s * R @ p + t with R a proper rotation and s > 0."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    scale: float

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        s = float(self.scale)
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise ValidationError("rotation is not orthogonal (tol 1e-9)")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValidationError("rotation determinant is not +1 (tol 1e-9)")
        if not s > 0.0:
            raise ValidationError(f"scale must be positive, got {s}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points):
        return apply_similarity(self, points)

    def compose(self, inner):
        """self o inner: first apply ``inner``, then ``self``."""
        return SimilarityTransform(
            self.rotation @ inner.rotation,
            self.scale * self.rotation @ inner.translation + self.translation,
            self.scale * inner.scale,
        )

    def inverse(self):
        Rt = self.rotation.T
        return SimilarityTransform(
            Rt, -(Rt @ self.translation) / self.scale, 1.0 / self.scale
        )

    def matrix_3x4(self):
        """The stacked [s*R | t] form used for convergence norms."""
        return np.hstack([self.scale * self.rotation, self.translation[:, None]])


def apply_similarity(transform, points):
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = transform.scale * (pts @ transform.rotation.T) + transform.translation
    return out[0] if single else out


def estimate_similarity(source, destination):
    """Least-squares similarity mapping source points onto destination points.

    Minimizes sum ||b_i - s R a_i - t||^2. The rotation comes from the
    SVD of the centered cross-covariance with a reflection correction,
    the scale from the ratio of projected to source spread, and the
    translation closes the centroids.
    """
    a = np.atleast_2d(np.asarray(source, dtype=np.float64))
    b = np.atleast_2d(np.asarray(destination, dtype=np.float64))
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValidationError(f"point pair shapes mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < 3:
        raise ValidationError(f"need at least 3 point pairs, got {a.shape[0]}")

    a_bar = a.mean(axis=0)
    b_bar = b.mean(axis=0)
    a_c = a - a_bar
    b_c = b - b_bar

    K = b_c.T @ a_c
    U, svals, Vt = np.linalg.svd(K)
    if svals[0] <= 0.0 or svals[1] <= 1e-12 * svals[0]:
        raise DegenerateGeometryError(
            "point pairs are collinear or coincident (rank-deficient cross-covariance)"
        )
    # force a proper rotation even when the unconstrained optimum reflects
    d = np.sign(np.linalg.det(U @ Vt))
    R = U @ np.diag([1.0, 1.0, d]) @ Vt

    a_rot = a_c @ R.T
    denom = float(np.einsum("ij,ij->", a_rot, a_rot))
    if denom <= 0.0:
        raise DegenerateGeometryError("source points are coincident")
    s = float(np.einsum("ij,ij->", b_c, a_rot)) / denom
    if s <= 0.0:
        raise DegenerateGeometryError(f"estimated scale is non-positive ({s})")
    t = b_bar - s * R @ a_bar
    return SimilarityTransform(R, t, s)


def rescale_to_unit_cube(mesh):
    """Uniformly rescale into [0,1]^3; largest axis spans exactly [0,1].

    Non-largest axes are centered. Returns the normalized mesh and the
    transform mapping original -> normalized coordinates.
    """
    lo, hi = mesh.bounding_box()
    extent = hi - lo
    largest = float(extent.max())
    if largest <= 0.0:
        raise DegenerateGeometryError("bounding box has zero extent")
    s = 1.0 / largest
    t = (1.0 - s * extent) / 2.0 - s * lo
    transform = SimilarityTransform(np.eye(3), t, s)
    out = Mesh(apply_similarity(transform, mesh.vertices), mesh.triangles)
    return out, transform


def rigid_icp_with_scale(
    template,
    target,
    landmarks,
    max_iters=100,
    tol=1e-7,
    max_normal_angle=corr_mod.DEFAULT_MAX_NORMAL_ANGLE,
    max_distance=None,
    workers=1,
):
    """Similarity registration of template onto target.

    Iteration 0 solves the closed form on the landmark pairs alone;
    subsequent iterations alternate closest-point correspondences (the
    landmark pairs stay in at weight 1) with re-estimation, stopping when
    the Frobenius change of [s*R | t] drops below ``tol``.
    ``max_iters=0`` returns the landmark-only solution.
    """
    landmarks.validate_for(template)
    if len(landmarks) < 3:
        raise ValidationError(f"need at least 3 landmarks, got {len(landmarks)}")
    lm_src = template.vertices[landmarks.vertex_indices]
    lm_dst = landmarks.positions
    transform = estimate_similarity(lm_src, lm_dst)
    if max_iters == 0:
        return transform

    index = corr_mod.SpatialIndex(target.vertices)
    target_n = target if target.normals is not None else target.with_normals()
    if max_distance is None:
        max_distance = corr_mod.default_max_distance(target)

    for _ in range(max_iters):
        moved = Mesh(apply_similarity(transform, template.vertices), template.triangles)
        normals, _ = compute_vertex_normals(moved)
        moved = Mesh(moved.vertices, moved.triangles, normals=normals)
        cs = corr_mod.find_correspondences(
            moved,
            target_n,
            index=index,
            max_normal_angle=max_normal_angle,
            max_distance=max_distance,
            workers=workers,
        )
        keep = cs.weights > 0.0
        src = np.vstack([template.vertices[keep], lm_src])
        dst = np.vstack([cs.target_points[keep], lm_dst])
        new = estimate_similarity(src, dst)
        change = np.linalg.norm(new.matrix_3x4() - transform.matrix_3x4())
        transform = new
        if change < tol:
            break
    return transform
