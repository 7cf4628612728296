"""Linear morphable shape model and weak-perspective landmark fitting.

A model is a mean shape plus two orthonormal linear bases (identity and
expression) over stacked vertex coordinates. Fitting to 2D landmarks
alternates a pose step (similarity solve against z-lifted observations)
with ridge least-squares shape steps; each step cannot increase the
regularized 2D objective, which is asserted.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FileFormatError, ValidationError
from .mesh import Mesh
from .rigid import estimate_similarity

__all__ = [
    "MorphableModel",
    "LandmarkFit",
    "project_weak_perspective",
    "fit_to_landmarks",
    "build_synthetic_model",
    "save_model",
    "load_model",
]

_MODEL_MAGIC = b"MTMM"
_MODEL_VERSION = 1


@dataclass(frozen=True)
class MorphableModel:
    """mean + basis_id @ a_id + basis_exp @ a_exp, coordinates stacked xyz per vertex."""

    mean: np.ndarray  # (3n,)
    basis_id: np.ndarray  # (3n, k_id), orthonormal columns
    basis_exp: np.ndarray  # (3n, k_exp), orthonormal columns
    std_id: np.ndarray  # (k_id,) per-coefficient scale
    std_exp: np.ndarray  # (k_exp,)
    triangles: np.ndarray  # (m, 3) shared topology

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        if mean.ndim != 1 or mean.size % 3 != 0:
            raise ValidationError("model mean must be a flat 3n vector")
        n3 = mean.size
        bid = np.ascontiguousarray(self.basis_id, dtype=np.float64)
        bexp = np.ascontiguousarray(self.basis_exp, dtype=np.float64)
        if bid.ndim != 2 or bid.shape[0] != n3:
            raise ValidationError("identity basis shape does not match mean")
        if bexp.ndim != 2 or bexp.shape[0] != n3:
            raise ValidationError("expression basis shape does not match mean")
        sid = np.ascontiguousarray(self.std_id, dtype=np.float64)
        sexp = np.ascontiguousarray(self.std_exp, dtype=np.float64)
        if sid.shape != (bid.shape[1],) or sexp.shape != (bexp.shape[1],):
            raise ValidationError("basis stds must match basis widths")
        if np.any(sid <= 0) or np.any(sexp <= 0):
            raise ValidationError("basis stds must be positive")
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise ValidationError("triangles must be (m, 3)")
        for name, val in (
            ("mean", mean), ("basis_id", bid), ("basis_exp", bexp),
            ("std_id", sid), ("std_exp", sexp), ("triangles", tris),
        ):
            val.flags.writeable = False
            object.__setattr__(self, name, val)

    @property
    def n_vertices(self):
        return self.mean.size // 3

    @property
    def k_id(self):
        return self.basis_id.shape[1]

    @property
    def k_exp(self):
        return self.basis_exp.shape[1]

    def synthesize_vertices(self, alpha_id=None, alpha_exp=None):
        """Vertex positions (n, 3) for the given coefficients (zeros if omitted)."""
        flat = self.mean.copy()
        if alpha_id is not None:
            alpha_id = np.asarray(alpha_id, dtype=np.float64)
            if alpha_id.shape != (self.k_id,):
                raise ValidationError("alpha_id has wrong length")
            flat += self.basis_id @ alpha_id
        if alpha_exp is not None:
            alpha_exp = np.asarray(alpha_exp, dtype=np.float64)
            if alpha_exp.shape != (self.k_exp,):
                raise ValidationError("alpha_exp has wrong length")
            flat += self.basis_exp @ alpha_exp
        return flat.reshape(-1, 3)

    def synthesize(self, alpha_id=None, alpha_exp=None):
        return Mesh(self.synthesize_vertices(alpha_id, alpha_exp), self.triangles)


def project_weak_perspective(points, focal, rotation, t3d):
    """Weak perspective: y = focal * P @ rotation @ (point + t3d), P drops z."""
    points = np.asarray(points, dtype=np.float64)
    cam = (points + t3d) @ rotation.T
    return focal * cam[..., :2]


@dataclass
class LandmarkFit:
    alpha_id: np.ndarray
    alpha_exp: np.ndarray
    focal: float
    rotation: np.ndarray
    t3d: np.ndarray
    objective: float  # regularized 2D objective at the final iterate
    history: np.ndarray  # objective after every outer iteration
    converged: bool
    n_iterations: int


def _pose_from_lift(landmarks3d, observed2d, focal, rotation, t3d):
    """One lifted-coordinate pose solve; never increases the 2D residual.

    Lifts each 2D observation to 3D using the z predicted by the current
    pose, then solves the exact 3D-3D similarity problem. The old pose
    scores the same on lifted 3D as on 2D (its z matches the lift), and
    the similarity solve is a global minimizer, so the new pose's 2D
    residual cannot exceed the old one's.
    """
    cam = focal * (landmarks3d + t3d) @ rotation.T
    lifted = np.column_stack([observed2d, cam[:, 2]])
    transform = estimate_similarity(landmarks3d, lifted)
    new_focal = transform.scale
    new_rotation = transform.rotation
    new_t3d = new_rotation.T @ transform.translation / new_focal
    return new_focal, new_rotation, new_t3d


def _shape_step(block, residual_rest, proj, lam, std):
    """Ridge solve of proj @ block-slice coefficients against the 2D residual."""
    k = block.shape[2]
    G = np.einsum("ij,ljk->lik", proj, block).reshape(-1, k)
    d = residual_rest.reshape(-1)
    lhs = G.T @ G + lam * np.diag(1.0 / std**2)
    return np.linalg.solve(lhs, G.T @ d)


def fit_to_landmarks(model, landmark_indices, observed2d, lam=1e-3,
                     max_iters=50, tol=1e-9):
    """Alternate pose and shape solves on 2D landmark observations.

    Minimizes  sum ||y_i - f P R (v_i(a) + t)||^2
             + lam * (||a_id/std_id||^2 + ||a_exp/std_exp||^2)
    by block coordinate descent. Raises if the objective ever increases
    beyond roundoff, since every block step is an exact minimizer.
    """
    landmark_indices = np.asarray(landmark_indices, dtype=np.int64)
    observed2d = np.asarray(observed2d, dtype=np.float64)
    L = landmark_indices.size
    if L < 4:
        raise ValidationError("landmark fit needs at least 4 landmarks")
    if observed2d.shape != (L, 2):
        raise ValidationError("observed2d must be (L, 2)")
    if np.any(landmark_indices < 0) or np.any(landmark_indices >= model.n_vertices):
        raise ValidationError("landmark index out of range")

    rows = (3 * landmark_indices[:, None] + np.arange(3)).ravel()
    mean_lm = model.mean[rows].reshape(L, 3)
    block_id = model.basis_id[rows].reshape(L, 3, model.k_id)
    block_exp = model.basis_exp[rows].reshape(L, 3, model.k_exp)

    alpha_id = np.zeros(model.k_id)
    alpha_exp = np.zeros(model.k_exp)
    focal, rotation, t3d = 1.0, np.eye(3), np.zeros(3)

    def objective(f, R, t, aid, aexp):
        pts = mean_lm + block_id @ aid + block_exp @ aexp
        r = observed2d - project_weak_perspective(pts, f, R, t)
        return float(
            np.sum(r**2)
            + lam * (np.sum((aid / model.std_id) ** 2)
                     + np.sum((aexp / model.std_exp) ** 2))
        )

    prev = objective(focal, rotation, t3d, alpha_id, alpha_exp)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        pts = mean_lm + block_id @ alpha_id + block_exp @ alpha_exp
        focal, rotation, t3d = _pose_from_lift(pts, observed2d, focal, rotation, t3d)

        proj = focal * rotation[:2, :]
        base2d = project_weak_perspective(mean_lm + block_exp @ alpha_exp,
                                          focal, rotation, t3d)
        alpha_id = _shape_step(block_id, observed2d - base2d, proj, lam, model.std_id)
        base2d = project_weak_perspective(mean_lm + block_id @ alpha_id,
                                          focal, rotation, t3d)
        alpha_exp = _shape_step(block_exp, observed2d - base2d, proj, lam, model.std_exp)

        cur = objective(focal, rotation, t3d, alpha_id, alpha_exp)
        history.append(cur)
        if cur > prev * (1.0 + 1e-12) + 1e-12:
            raise AssertionError(
                f"objective increased at iteration {it}: {prev} -> {cur}"
            )
        if prev - cur <= tol * max(prev, 1.0):
            converged = True
            prev = cur
            break
        prev = cur

    return LandmarkFit(alpha_id, alpha_exp, focal, rotation, t3d, prev,
                       np.array(history), converged, it)


def _smooth_fields(points, n_fields, smoothness, rng):
    """Superposed directional sinusoids; wavelength set by the smoothness scale."""
    n = points.shape[0]
    cols = np.empty((3 * n, n_fields))
    for j in range(n_fields):
        disp = np.zeros((n, 3))
        for _ in range(3):
            w = rng.normal(size=3)
            w /= np.linalg.norm(w)
            u = rng.normal(size=3)
            freq = rng.uniform(0.5, 1.5) / smoothness
            phase = rng.uniform(0.0, 2.0 * np.pi)
            disp += np.sin(2.0 * np.pi * freq * (points @ w) + phase)[:, None] * u
        cols[:, j] = disp.ravel()
    return cols


def build_synthetic_model(n_vertices=2000, k_id=10, k_exp=6, seed=0,
                          smoothness=0.6, base_mesh=None):
    """Random smooth orthonormal bases over a spherical-cap mean shape.

    All k_id + k_exp raw fields are orthonormalized jointly (one QR), so
    identity and expression columns are mutually orthogonal. Stds decay
    geometrically so leading components dominate sampled shapes.
    """
    from .synthetic import sphere_section_mesh

    rng = np.random.default_rng(seed)
    base = base_mesh if base_mesh is not None else sphere_section_mesh(n_vertices)
    raw = _smooth_fields(base.vertices, k_id + k_exp, smoothness, rng)
    q, r = np.linalg.qr(raw)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    std_id = 0.5 * 0.85 ** np.arange(k_id)
    std_exp = 0.3 * 0.85 ** np.arange(k_exp)
    return MorphableModel(base.vertices.ravel(), q[:, :k_id], q[:, k_id:],
                          std_id, std_exp, base.triangles)


def save_model(model, path):
    """Binary container: magic, version, dims, then row-major float64 payloads."""
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<IQIIQ", _MODEL_VERSION, model.n_vertices,
                             model.k_id, model.k_exp, model.triangles.shape[0]))
        fh.write(np.ascontiguousarray(model.mean).tobytes())
        fh.write(np.ascontiguousarray(model.basis_id).tobytes())
        fh.write(np.ascontiguousarray(model.basis_exp).tobytes())
        fh.write(np.ascontiguousarray(model.std_id).tobytes())
        fh.write(np.ascontiguousarray(model.std_exp).tobytes())
        fh.write(np.ascontiguousarray(model.triangles).tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MODEL_MAGIC:
            raise FileFormatError(f"{path}: not a morphable model file")
        header = fh.read(struct.calcsize("<IQIIQ"))
        if len(header) != struct.calcsize("<IQIIQ"):
            raise FileFormatError(f"{path}: truncated model header")
        version, n, k_id, k_exp, m = struct.unpack("<IQIIQ", header)
        if version != _MODEL_VERSION:
            raise FileFormatError(f"{path}: unsupported model version {version}")

        def read_f64(count):
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise FileFormatError(f"{path}: truncated model payload")
            return np.frombuffer(buf, dtype="<f8").copy()

        mean = read_f64(3 * n)
        basis_id = read_f64(3 * n * k_id).reshape(3 * n, k_id)
        basis_exp = read_f64(3 * n * k_exp).reshape(3 * n, k_exp)
        std_id = read_f64(k_id)
        std_exp = read_f64(k_exp)
        buf = fh.read(8 * 3 * m)
        if len(buf) != 8 * 3 * m:
            raise FileFormatError(f"{path}: truncated triangle payload")
        tris = np.frombuffer(buf, dtype="<i8").reshape(m, 3).copy()
        if fh.read(1):
            raise FileFormatError(f"{path}: trailing bytes after model payload")
    return MorphableModel(mean, basis_id, basis_exp, std_id, std_exp, tris)
