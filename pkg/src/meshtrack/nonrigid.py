"""Non-rigid ICP with per-vertex affine maps and motion-history regularization.

Each template vertex i carries its own 3x4 affine map X_i. The unknowns are
stacked as a (4n, 3) matrix X whose rows 4i..4i+3 hold X_i transposed, so a
deformed vertex is [v_i^T 1] @ X[4i:4i+4]. One outer "ladder" walks the
stiffness/landmark/motion coefficients down their schedules; inside each
step, correspondences and the sparse least-squares solve alternate until
the field stops moving.

The assembled system satisfies ||A X - B||_F^2 == E_d + E_s + E_l + E_m
exactly: every block is pre-multiplied by the square root of its
coefficient. Energy rows logged per inner iteration use the same
correspondences the solve used.
"""

import struct
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from . import kernels
from .correspondence import build_spatial_index, find_correspondences
from .errors import FileFormatError, SolverError, ValidationError
from .mesh import Mesh, compute_vertex_normals

__all__ = [
    "NicpConfig",
    "DeformationField",
    "NicpResult",
    "nonrigid_icp",
    "assemble_system",
    "energy_terms",
    "write_energy_report",
    "save_field",
    "load_field",
    "ENERGY_COLUMNS",
]

ENERGY_COLUMNS = ("ladder_step", "inner_iter", "E_d", "E_s", "E_l", "E_m",
                  "E_total")

_FIELD_VERSION_NOTE = "field container is headerless beyond the count"


def _default_alpha():
    return np.arange(100.0, 9.0, -10.0)  # 100, 90, ..., 10


def _default_gamma():
    return np.arange(5.0, 0.4, -0.5)  # 5.0, 4.5, ..., 0.5


@dataclass
class NicpConfig:
    """Coefficient schedules and stopping rules for one non-rigid fit."""

    alpha_schedule: np.ndarray = dc_field(default_factory=_default_alpha)
    beta_schedule: np.ndarray = dc_field(default_factory=_default_alpha)
    gamma_schedule: np.ndarray = dc_field(default_factory=_default_gamma)
    skew_weight: float = 1.0  # last diagonal entry of G
    inner_tol: float = 1e-4  # Frobenius change of X that ends an inner loop
    max_inner_iters: int = 20
    max_normal_angle: float = np.pi / 4.0
    max_distance: float = None  # None: 5% of target bbox diagonal
    workers: int = 1

    def __post_init__(self):
        self.alpha_schedule = np.asarray(self.alpha_schedule, dtype=np.float64)
        self.beta_schedule = np.asarray(self.beta_schedule, dtype=np.float64)
        self.gamma_schedule = np.asarray(self.gamma_schedule, dtype=np.float64)
        n = self.alpha_schedule.size
        if n < 1:
            raise ValidationError("schedules must have at least one step")
        if self.beta_schedule.size != n or self.gamma_schedule.size != n:
            raise ValidationError("all three schedules must have equal length")
        for name, sched in (("alpha", self.alpha_schedule),
                            ("beta", self.beta_schedule)):
            if np.any(sched <= 0.0):
                raise ValidationError(f"{name} schedule must be positive")
            if np.any(np.diff(sched) >= 0.0):
                raise ValidationError(f"{name} schedule must strictly decrease")
        g = self.gamma_schedule
        # gamma may be identically zero: that disables the motion term
        if not np.all(g == 0.0):
            if np.any(g <= 0.0):
                raise ValidationError(
                    "gamma schedule must be positive or identically zero")
            if np.any(np.diff(g) >= 0.0):
                raise ValidationError("gamma schedule must strictly decrease")
        if self.skew_weight <= 0.0:
            raise ValidationError("skew weight must be positive")
        if self.inner_tol <= 0.0:
            raise ValidationError("inner tolerance must be positive")
        if self.max_inner_iters < 1:
            raise ValidationError("max inner iterations must be >= 1")

    @property
    def motion_enabled(self):
        return bool(np.any(self.gamma_schedule > 0.0))

    def without_motion(self):
        return NicpConfig(self.alpha_schedule, self.beta_schedule,
                          np.zeros_like(self.gamma_schedule),
                          self.skew_weight, self.inner_tol,
                          self.max_inner_iters, self.max_normal_angle,
                          self.max_distance, self.workers)


class DeformationField:
    """Stacked per-vertex affine maps, rows 4i..4i+3 = X_i^T."""

    def __init__(self, matrix):
        matrix = np.ascontiguousarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != 3 or matrix.shape[0] % 4 != 0:
            raise ValidationError("field matrix must be (4n, 3)")
        self.matrix = matrix

    @classmethod
    def identity(cls, n_vertices):
        block = np.vstack([np.eye(3), np.zeros(3)])
        return cls(np.tile(block, (n_vertices, 1)))

    @property
    def n_vertices(self):
        return self.matrix.shape[0] // 4

    def affine(self, i):
        """The 3x4 map of vertex i."""
        return self.matrix[4 * i: 4 * i + 4].T.copy()

    def apply(self, vertices):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        if vertices.shape != (self.n_vertices, 3):
            raise ValidationError("vertex count does not match field")
        return kernels.affine_transform_vertices(self.matrix, vertices)

    def copy(self):
        return DeformationField(self.matrix.copy())


def _data_matrix(vertices):
    """n x 4n sparse, row i = [v_i^T 1] at columns 4i..4i+3."""
    n = vertices.shape[0]
    data = np.column_stack([vertices, np.ones(n)]).ravel()
    indices = (4 * np.arange(n)[:, None] + np.arange(4)).ravel()
    indptr = 4 * np.arange(n + 1)
    return sparse.csr_matrix((data, indices, indptr), shape=(n, 4 * n))


def _stiffness_matrix(edges, n_vertices, skew_weight):
    """kron(M, G): M the edge incidence (-1 at i, +1 at j), G = diag(1,1,1,w)."""
    m = edges.shape[0]
    rows = np.repeat(np.arange(m), 2)
    cols = edges.ravel()
    vals = np.tile([-1.0, 1.0], m)
    M = sparse.csr_matrix((vals, (rows, cols)), shape=(m, n_vertices))
    G = sparse.diags([1.0, 1.0, 1.0, skew_weight])
    return sparse.kron(M, G, format="csr")


def assemble_system(template_vertices, stiffness, correspondences,
                    alpha, beta=None, landmark_indices=None,
                    landmark_targets=None, gamma=0.0,
                    motion_predictions=None, data_matrix=None):
    """Build the sparse LS system (A, B) for one inner iteration.

    Blocks, in order: weighted data rows, sqrt(alpha) * stiffness,
    sqrt(beta) * landmark rows, sqrt(gamma) * motion rows. Landmark and
    motion blocks are omitted entirely when absent / when gamma == 0, so
    a zero gamma assembles byte-for-byte the same system as no motion
    input at all.
    """
    template_vertices = np.asarray(template_vertices, dtype=np.float64)
    n = template_vertices.shape[0]
    D = data_matrix if data_matrix is not None else _data_matrix(template_vertices)

    w = correspondences.weights
    WD = sparse.diags(w) @ D
    blocks = [WD, np.sqrt(alpha) * stiffness]
    rhs = [w[:, None] * correspondences.target_points,
           np.zeros((stiffness.shape[0], 3))]

    if landmark_indices is not None and len(landmark_indices) > 0:
        if beta is None:
            raise ValidationError("landmarks given but beta is None")
        DL = D[np.asarray(landmark_indices, dtype=np.int64)]
        blocks.append(np.sqrt(beta) * DL)
        rhs.append(np.sqrt(beta) * np.asarray(landmark_targets, dtype=np.float64))

    if gamma > 0.0:
        if motion_predictions is None:
            raise ValidationError("gamma > 0 requires motion predictions")
        preds = np.asarray(motion_predictions, dtype=np.float64)
        if preds.shape != (n, 3):
            raise ValidationError("motion predictions must be (n, 3)")
        blocks.append(np.sqrt(gamma) * D)
        rhs.append(np.sqrt(gamma) * preds)

    A = sparse.vstack(blocks, format="csr")
    B = np.vstack(rhs)
    return A, B


def energy_terms(field, template_vertices, edges, correspondences,
                 alpha, beta=0.0, landmark_indices=None,
                 landmark_targets=None, gamma=0.0, motion_predictions=None,
                 skew_weight=1.0):
    """(E_d, E_s, E_l, E_m) with coefficients folded in; sums to ||AX-B||^2."""
    deformed = field.apply(template_vertices)
    e_d = kernels.weighted_sq_error(deformed, correspondences.target_points,
                                    correspondences.weights)
    e_s = alpha * kernels.stiffness_energy(field.matrix, edges, skew_weight)
    e_l = 0.0
    if landmark_indices is not None and len(landmark_indices) > 0:
        diff = deformed[np.asarray(landmark_indices, dtype=np.int64)] \
            - np.asarray(landmark_targets, dtype=np.float64)
        e_l = beta * float(np.sum(diff * diff))
    e_m = 0.0
    if gamma > 0.0 and motion_predictions is not None:
        diff = deformed - np.asarray(motion_predictions, dtype=np.float64)
        e_m = gamma * float(np.sum(diff * diff))
    return float(e_d), float(e_s), float(e_l), float(e_m)


def _solve(A, B, weights, degrees):
    AtA = (A.T @ A).tocsc()
    AtB = A.T @ B
    try:
        lu = splu(AtA)
        X = lu.solve(AtB)
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}",
                          _suspect_blocks(weights, degrees)) from exc
    if not np.all(np.isfinite(X)):
        bad = np.unique(np.nonzero(~np.isfinite(X))[0] // 4)
        raise SolverError("solution contains non-finite blocks", list(bad))
    return X


def _suspect_blocks(weights, degrees):
    # vertices with no data support and no stiffness coupling are the
    # usual culprits when the normal matrix goes singular
    bad = np.nonzero((weights == 0.0) & (degrees == 0))[0]
    return list(bad)


@dataclass
class NicpResult:
    field: DeformationField
    deformed: Mesh
    energy_log: list  # rows matching ENERGY_COLUMNS
    converged: list  # per ladder step
    correspondences: object  # final CorrespondenceSet


def nonrigid_icp(template, target, landmarks=None, config=None,
                 motion_predictions=None, initial_field=None):
    """Fit the template onto the target through the coefficient ladder.

    landmarks: LandmarkSet whose indices address template vertices and
    whose positions are the matching target-space points. Gating normals
    are recomputed from the deformed geometry before every solve; target
    normals are computed once.
    """
    if config is None:
        config = NicpConfig()
    n = template.n_vertices
    if n == 0:
        raise ValidationError("template has no vertices")
    if target.n_vertices == 0:
        raise ValidationError("target has no vertices")
    if config.motion_enabled and motion_predictions is None:
        raise ValidationError(
            "gamma schedule is positive but no motion predictions given")
    if landmarks is not None:
        landmarks.validate_for(template)

    tgt = target if target.normals is not None else target.with_normals()
    index = build_spatial_index(tgt.vertices)
    D = _data_matrix(template.vertices)
    stiffness = _stiffness_matrix(template.edges, n, config.skew_weight)
    degrees = np.zeros(n, dtype=np.int64)
    if template.edges.size:
        np.add.at(degrees, template.edges.ravel(), 1)

    field = initial_field.copy() if initial_field is not None \
        else DeformationField.identity(n)
    lm_idx = landmarks.vertex_indices if landmarks is not None else None
    lm_tgt = landmarks.positions if landmarks is not None else None

    energy_log = []
    converged = []
    corr = None
    for step, (alpha, beta, gamma) in enumerate(zip(
            config.alpha_schedule, config.beta_schedule,
            config.gamma_schedule)):
        step_converged = False
        for inner in range(config.max_inner_iters):
            deformed_v = field.apply(template.vertices)
            normals, _ = compute_vertex_normals(
                Mesh(deformed_v, template.triangles))
            deformed = Mesh(deformed_v, template.triangles, normals)
            corr = find_correspondences(
                deformed, tgt, index=index,
                max_normal_angle=config.max_normal_angle,
                max_distance=config.max_distance, workers=config.workers)

            A, B = assemble_system(
                template.vertices, stiffness, corr, alpha, beta,
                lm_idx, lm_tgt, gamma, motion_predictions, data_matrix=D)
            X = _solve(A, B, corr.weights, degrees)
            new_field = DeformationField(X)

            e_d, e_s, e_l, e_m = energy_terms(
                new_field, template.vertices, template.edges, corr,
                alpha, beta, lm_idx, lm_tgt, gamma, motion_predictions,
                config.skew_weight)
            energy_log.append((step, inner, e_d, e_s, e_l, e_m,
                               e_d + e_s + e_l + e_m))

            delta = float(np.linalg.norm(new_field.matrix - field.matrix))
            field = new_field
            if delta < config.inner_tol:
                step_converged = True
                break
        if not step_converged:
            warnings.warn(
                f"ladder step {step} stopped after {config.max_inner_iters} "
                f"iterations without reaching tol {config.inner_tol}",
                RuntimeWarning, stacklevel=2)
        converged.append(step_converged)

    deformed = Mesh(field.apply(template.vertices), template.triangles)
    return NicpResult(field, deformed, energy_log, converged, corr)


def write_energy_report(path, energy_log):
    """CSV with the fixed ENERGY_COLUMNS header, one row per inner iteration."""
    with open(path, "w") as fh:
        fh.write(",".join(ENERGY_COLUMNS) + "\n")
        for row in energy_log:
            step, inner = int(row[0]), int(row[1])
            vals = ",".join("%.17g" % v for v in row[2:])
            fh.write(f"{step},{inner},{vals}\n")


def save_field(field, path):
    """Container: vertex count as u64 little-endian, then 4n x 3 float64."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", field.n_vertices))
        fh.write(np.ascontiguousarray(field.matrix).tobytes())


def load_field(path):
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise FileFormatError(f"{path}: truncated field header")
        (n,) = struct.unpack("<Q", header)
        body = fh.read(8 * 12 * n)
        if len(body) != 8 * 12 * n or fh.read(1):
            raise FileFormatError(f"{path}: field payload has wrong size")
    matrix = np.frombuffer(body, dtype="<f8").reshape(4 * n, 3).copy()
    return DeformationField(matrix)
