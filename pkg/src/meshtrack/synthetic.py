"""Synthetic deformable-sequence generator with exact dense ground truth.

Produces frame meshes (noisy), the noise-free true vertex positions, and
noise-free landmarks for every frame, so tracking accuracy can be scored
against a known correspondence. Everything is deterministic for a fixed
seed; per-frame noise uses per-frame derived seeds.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError
from .mesh import LandmarkSet, Mesh
from .rigid import SimilarityTransform

__all__ = [
    "SyntheticConfig",
    "SyntheticSequence",
    "generate_sequence",
    "grid_mesh",
    "sphere_section_mesh",
    "farthest_point_sample",
]


def grid_mesh(nx, ny, width=1.0, height=1.0):
    """Planar grid in z=0: nx*ny vertices, 2(nx-1)(ny-1) triangles."""
    if nx < 2 or ny < 2:
        raise ValidationError("grid needs nx, ny >= 2")
    xs = np.linspace(0.0, width, nx)
    ys = np.linspace(0.0, height, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(nx * ny)])
    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = (i + 1) * ny + j
            c = (i + 1) * ny + j + 1
            d = i * ny + j + 1
            tris.append([a, b, c])
            tris.append([a, c, d])
    return Mesh(vertices, np.array(tris, dtype=np.int64))


def sphere_section_mesh(n_target=2000, radius=0.6, cap_angle=1.1):
    """Spherical cap (pole up +z) triangulated in rings, about n_target vertices."""
    if n_target < 10:
        raise ValidationError("sphere section needs at least 10 vertices")
    factor = 2.0 * np.pi * np.sin(cap_angle / 2.0) / cap_angle
    n_rings = max(2, int(round(np.sqrt((n_target - 1) / factor))))
    n_cols = max(6, int(round((n_target - 1) / n_rings)))
    vertices = [(0.0, 0.0, radius)]
    for r in range(1, n_rings + 1):
        theta = cap_angle * r / n_rings
        for j in range(n_cols):
            phi = 2.0 * np.pi * j / n_cols
            vertices.append(
                (
                    radius * np.sin(theta) * np.cos(phi),
                    radius * np.sin(theta) * np.sin(phi),
                    radius * np.cos(theta),
                )
            )
    tris = []
    for j in range(n_cols):
        tris.append([0, 1 + j, 1 + (j + 1) % n_cols])
    for r in range(n_rings - 1):
        base0 = 1 + r * n_cols
        base1 = 1 + (r + 1) * n_cols
        for j in range(n_cols):
            jn = (j + 1) % n_cols
            tris.append([base0 + j, base1 + j, base1 + jn])
            tris.append([base0 + j, base1 + jn, base0 + jn])
    return Mesh(np.array(vertices), np.array(tris, dtype=np.int64))


def farthest_point_sample(points, count, start=0):
    """Greedy farthest-point vertex sampling; deterministic, returns indices."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if count > n:
        raise ValidationError(f"cannot sample {count} of {n} vertices")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for k in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[k] = nxt
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


@dataclass
class SyntheticConfig:
    """Deformation script for one generated sequence."""

    base_shape: str = "sphere"  # "sphere" | "grid"; ignored when base_mesh given
    base_mesh: Optional[Mesh] = None
    n_vertices: int = 2000
    frames: int = 20
    bend_amplitude: float = 0.08
    bend_frequency: float = 1.0  # spatial cycles per unit length
    bulge_amplitude: float = 0.0  # local bump ramping up over the sequence
    drift_rotation: float = 0.0  # radians per frame
    drift_translation: float = 0.0  # length units per frame
    drift_scale: float = 1.0  # multiplicative scale per frame
    noise_sigma: float = 0.0
    landmark_count: int = 51
    seed: int = 0

    def validate(self):
        if self.frames < 1:
            raise ValidationError("frames must be >= 1")
        if self.noise_sigma < 0.0:
            raise ValidationError("noise sigma must be >= 0")
        if self.landmark_count < 1:
            raise ValidationError("landmark count must be >= 1")
        if self.base_mesh is None and self.base_shape not in ("sphere", "grid"):
            raise ValidationError(f"unknown base shape '{self.base_shape}'")
        if self.drift_scale <= 0.0:
            raise ValidationError("drift scale must be positive")


@dataclass
class SyntheticSequence:
    """Frames with noise, noise-free truth, landmarks, and the drift script."""

    base: Mesh
    frames: list  # list[Mesh]
    truth: np.ndarray  # (F, n, 3) noise-free positions
    landmarks: list  # list[LandmarkSet], noise-free positions
    drift_transforms: list = field(default_factory=list)  # per-frame SimilarityTransform

    @property
    def n_frames(self):
        return len(self.frames)


def _axis_angle_rotation(axis, angle):
    a = axis / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    K = np.array(
        [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]]
    )
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


class _BendField:
    """Two seeded spatial sinusoids modulated smoothly in time."""

    def __init__(self, config, rng):
        self.amplitude = config.bend_amplitude
        self.waves = []
        for h in (1, 2):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            coeff = rng.normal(size=3)
            coeff /= np.linalg.norm(coeff) * h
            phase = rng.uniform(0.0, 2.0 * np.pi)
            freq = config.bend_frequency * h
            self.waves.append((direction, coeff, freq, phase))

    def __call__(self, points, tau):
        # intensity ramps linearly over the sequence; time-smooth by construction
        out = np.zeros_like(points)
        for direction, coeff, freq, phase in self.waves:
            phase_field = np.sin(2.0 * np.pi * freq * (points @ direction) + phase)
            out += phase_field[:, None] * coeff
        return self.amplitude * tau * out


class _BulgeField:
    """Gaussian bump around a seeded vertex, intensity ramping with time."""

    def __init__(self, config, base, rng):
        self.amplitude = config.bulge_amplitude
        center_idx = int(rng.integers(base.n_vertices))
        self.center = base.vertices[center_idx]
        lo, hi = base.bounding_box()
        self.sigma = 0.15 * float(np.linalg.norm(hi - lo))
        outward = self.center - base.vertices.mean(axis=0)
        norm = np.linalg.norm(outward)
        self.direction = outward / norm if norm > 0 else np.array([0.0, 0.0, 1.0])

    def __call__(self, points, tau):
        if self.amplitude == 0.0:
            return 0.0
        d2 = np.sum((points - self.center) ** 2, axis=1)
        bump = np.exp(-d2 / (2.0 * self.sigma**2))
        return (self.amplitude * tau) * bump[:, None] * self.direction


def generate_sequence(config):
    """Generate frames, truth, and landmarks per the config's deformation script.

    Frame k (0-based) applies the smooth bending + bulge field at time
    tau = k/(F-1), then the cumulative per-frame similarity drift, then
    adds i.i.d. Gaussian noise. Truth stores the noise-free positions;
    landmarks carry noise-free positions of well-spread base vertices.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)

    if config.base_mesh is not None:
        base = config.base_mesh
    elif config.base_shape == "grid":
        side = max(2, int(round(np.sqrt(config.n_vertices))))
        base = grid_mesh(side, side)
    else:
        base = sphere_section_mesh(config.n_vertices)

    bend = _BendField(config, rng)
    bulge = _BulgeField(config, base, rng)
    drift_axis = rng.normal(size=3)
    drift_axis /= np.linalg.norm(drift_axis)
    drift_dir = rng.normal(size=3)
    drift_dir /= np.linalg.norm(drift_dir)

    lm_indices = farthest_point_sample(base.vertices, config.landmark_count)

    frames, landmarks, drifts = [], [], []
    n = base.n_vertices
    truth = np.empty((config.frames, n, 3))
    for k in range(config.frames):
        tau = k / max(config.frames - 1, 1)
        deformed = base.vertices + bend(base.vertices, tau) + bulge(base.vertices, tau)
        drift = SimilarityTransform(
            _axis_angle_rotation(drift_axis, config.drift_rotation * k),
            k * config.drift_translation * drift_dir,
            config.drift_scale**k,
        )
        true_pos = drift.apply(deformed)
        truth[k] = true_pos
        drifts.append(drift)
        frame_rng = np.random.default_rng([config.seed, k])
        noisy = true_pos + frame_rng.normal(0.0, config.noise_sigma, size=(n, 3)) \
            if config.noise_sigma > 0.0 else true_pos.copy()
        frames.append(Mesh(noisy, base.triangles))
        landmarks.append(LandmarkSet(lm_indices, true_pos[lm_indices]))

    return SyntheticSequence(base, frames, truth, landmarks, drifts)
