"""Per-vertex Kalman trajectory filters for motion prediction.

One linear filter per vertex, but every vertex shares the same transition,
observation, and noise matrices and is observed on every frame, so all
filters share a single covariance matrix. States are therefore stored as
one (n, 3*order) array with a shared (3*order, 3*order) covariance, which
is what makes dense banks cheap.

order=2 is the constant-velocity model, order=3 constant-acceleration.
Process noise is discrete white noise on the highest-order derivative.
"""

import struct

import numpy as np

from .errors import FileFormatError, ValidationError

__all__ = ["KalmanBank", "save_bank", "load_bank"]

_BANK_MAGIC = b"MTKB"
_BANK_VERSION = 1


def _axis_matrices(order, q):
    if order == 2:
        F = np.array([[1.0, 1.0], [0.0, 1.0]])
        g = np.array([0.5, 1.0])
    elif order == 3:
        F = np.array([[1.0, 1.0, 0.5], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]])
        g = np.array([0.5, 1.0, 1.0])
    else:
        raise ValidationError("order must be 2 (velocity) or 3 (acceleration)")
    return F, q * np.outer(g, g)


class KalmanBank:
    """Bank of identical per-vertex filters with a shared covariance.

    The first observe() call initializes every state to the observed
    position with zero derivatives. Later calls run one predict+update
    cycle. predict_positions() is pure: it reports where each vertex is
    expected next frame without advancing the filters.
    """

    def __init__(self, n_vertices, order=2, q=1e-4, r=1e-3):
        if n_vertices < 1:
            raise ValidationError("bank needs at least one vertex")
        if q <= 0.0 or r <= 0.0:
            raise ValidationError("noise intensities q, r must be positive")
        F_axis, Q_axis = _axis_matrices(order, q)
        self.n_vertices = int(n_vertices)
        self.order = int(order)
        self.q = float(q)
        self.r = float(r)
        d = 3 * order
        # state layout: [x y z | vx vy vz | (ax ay az)]
        self.F = np.kron(F_axis, np.eye(3))
        self.Q = np.kron(Q_axis, np.eye(3))
        self.R = r * np.eye(3)
        self.states = np.zeros((n_vertices, d))
        self.P = np.zeros((d, d))
        self.n_observations = 0

    @property
    def initialized(self):
        return self.n_observations > 0

    def observe(self, positions):
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape != (self.n_vertices, 3):
            raise ValidationError(
                f"expected ({self.n_vertices}, 3) positions, got {positions.shape}"
            )
        if not np.all(np.isfinite(positions)):
            raise ValidationError("observed positions must be finite")
        d = self.F.shape[0]
        if not self.initialized:
            self.states[:, :3] = positions
            self.states[:, 3:] = 0.0
            # position pinned to the first observation, derivatives broad
            self.P = np.diag(
                np.concatenate([np.full(3, self.r), np.ones(d - 3)])
            )
            self.n_observations = 1
            return

        self.states = self.states @ self.F.T
        P = self.F @ self.P @ self.F.T + self.Q

        S = P[:3, :3] + self.R
        K = np.linalg.solve(S.T, P[:, :3].T).T  # P H^T S^-1, H = [I 0]
        innovation = positions - self.states[:, :3]
        self.states = self.states + innovation @ K.T
        IKH = np.eye(d) - np.hstack([K, np.zeros((d, d - 3))])
        P = IKH @ P @ IKH.T + K @ self.R @ K.T  # Joseph form
        P = 0.5 * (P + P.T)
        w, V = np.linalg.eigh(P)
        self.P = (V * np.maximum(w, 0.0)) @ V.T
        self.n_observations += 1

    def predict_positions(self):
        """Expected next-frame positions; does not mutate filter state."""
        if not self.initialized:
            raise ValidationError("bank has no observations to predict from")
        return (self.states @ self.F.T)[:, :3]

    def current_positions(self):
        if not self.initialized:
            raise ValidationError("bank has no observations")
        return self.states[:, :3].copy()

    def __eq__(self, other):
        if not isinstance(other, KalmanBank):
            return NotImplemented
        return (
            self.n_vertices == other.n_vertices
            and self.order == other.order
            and self.q == other.q
            and self.r == other.r
            and self.n_observations == other.n_observations
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.P, other.P)
        )


def save_bank(bank, path):
    """Binary container: magic, version, order, n, q, r, count, states, P."""
    with open(path, "wb") as fh:
        fh.write(_BANK_MAGIC)
        fh.write(struct.pack("<IIQddQ", _BANK_VERSION, bank.order,
                             bank.n_vertices, bank.q, bank.r,
                             bank.n_observations))
        fh.write(np.ascontiguousarray(bank.states).tobytes())
        fh.write(np.ascontiguousarray(bank.P).tobytes())


def load_bank(path):
    fmt = "<IIQddQ"
    with open(path, "rb") as fh:
        if fh.read(4) != _BANK_MAGIC:
            raise FileFormatError(f"{path}: not a filter bank file")
        header = fh.read(struct.calcsize(fmt))
        if len(header) != struct.calcsize(fmt):
            raise FileFormatError(f"{path}: truncated bank header")
        version, order, n, q, r, count = struct.unpack(fmt, header)
        if version != _BANK_VERSION:
            raise FileFormatError(f"{path}: unsupported bank version {version}")
        if order not in (2, 3):
            raise FileFormatError(f"{path}: invalid filter order {order}")
        d = 3 * order
        body = fh.read(8 * (n * d + d * d))
        if len(body) != 8 * (n * d + d * d) or fh.read(1):
            raise FileFormatError(f"{path}: bank payload has wrong size")
    bank = KalmanBank(n, order=order, q=q, r=r)
    flat = np.frombuffer(body, dtype="<f8")
    bank.states = flat[: n * d].reshape(n, d).copy()
    bank.P = flat[n * d:].reshape(d, d).copy()
    bank.n_observations = int(count)
    return bank
