"""Turn per-sensor trajectory multi-Bernoulli densities into the flat
vector sequence consumed by the fusion model.

Each surviving Bernoulli contributes one vector per trajectory step:
[state mean (4); upper-triangle of the step covariance block (10);
marginal existence (1)], optionally extended with the sensor pose
(position (2), orientation (1)) ahead of the existence entry.  Vector
ordering is by sensor, then Bernoulli, then step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tpmb import TrajectoryBernoulli, TrajectoryPmb

DIM_STATIC = 15
DIM_MOBILE = 18

# row-major upper-triangle index pairs of a 4x4 matrix
_TRIU_ROWS, _TRIU_COLS = np.triu_indices(4)


@dataclass
class InputVector:
    values: np.ndarray   # length 15 or 18
    time: int            # global time step t
    traj_step: int       # j, 1-based step within the trajectory
    sensor: int          # s, 1-based sensor index


@dataclass
class InputSequence:
    vectors: list[InputVector]

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return len(self.vectors[0].values) if self.vectors else 0

    def as_matrix(self) -> np.ndarray:
        if not self.vectors:
            return np.zeros((0, 0))
        return np.stack([v.values for v in self.vectors])

    def index_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = np.array([v.time for v in self.vectors], dtype=np.int64)
        j = np.array([v.traj_step for v in self.vectors], dtype=np.int64)
        s = np.array([v.sensor for v in self.vectors], dtype=np.int64)
        return t, j, s


def prune_bernoullis(bernoullis: list[TrajectoryBernoulli],
                     p_ber: float) -> list[TrajectoryBernoulli]:
    """Keep components whose existence probability reaches `p_ber`."""
    if not 0.0 <= p_ber <= 1.0:
        raise ValueError("pruning threshold must lie in [0, 1]")
    return [b for b in bernoullis if b.existence >= p_ber]


def extract_block_covariances(P: np.ndarray, ell: int) -> list[np.ndarray]:
    """Per-step 4x4 diagonal blocks of a stacked trajectory covariance."""
    if P.shape != (4 * ell, 4 * ell):
        raise ValueError(
            f"covariance shape {P.shape} does not match length {ell}")
    return [P[4 * j:4 * j + 4, 4 * j:4 * j + 4].copy() for j in range(ell)]


def vectorize_upper_triangle(C: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Row-major entries on and above the diagonal of a symmetric 4x4."""
    if C.shape != (4, 4):
        raise ValueError("expected a 4x4 matrix")
    if np.max(np.abs(C - C.T)) > tol:
        raise ValueError("matrix is not symmetric within tolerance")
    return C[_TRIU_ROWS, _TRIU_COLS].copy()


def devectorize_upper_triangle(c: np.ndarray) -> np.ndarray:
    """Inverse of vectorize_upper_triangle."""
    if c.shape != (10,):
        raise ValueError("expected a length-10 vector")
    C = np.zeros((4, 4))
    C[_TRIU_ROWS, _TRIU_COLS] = c
    return C + np.triu(C, 1).T


def marginal_existence(r: float, w: np.ndarray) -> np.ndarray:
    """Per-step marginal existence probabilities r * w_j."""
    return r * np.asarray(w, dtype=float)


@dataclass
class NormalizationBounds:
    """Axis-aligned box of the union of all FoVs over all time, plus the
    scan time used to bring velocities to position units."""
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    dt: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("normalization bounds must have positive extent")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def offset(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, 0.0, 0.0])

    @property
    def scales(self) -> np.ndarray:
        sx = 1.0 / (self.x_max - self.x_min)
        sy = 1.0 / (self.y_max - self.y_min)
        return np.array([sx, sy, sx * self.dt, sy * self.dt])

    def normalize_state(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, float) - self.offset) * self.scales

    def denormalize_state(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, float) / self.scales + self.offset

    def normalize_cov(self, C: np.ndarray) -> np.ndarray:
        s = self.scales
        return C * np.outer(s, s)

    def denormalize_cov(self, C: np.ndarray) -> np.ndarray:
        s = self.scales
        return C / np.outer(s, s)

    def normalize_position(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, float) - self.offset[:2]) * self.scales[:2]

    def denormalize_position(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, float) / self.scales[:2] + self.offset[:2]

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.x_max, self.y_min, self.y_max,
                         self.dt])

    @staticmethod
    def from_array(a: np.ndarray) -> "NormalizationBounds":
        return NormalizationBounds(*[float(v) for v in a])


def build_sequence(pmbs: list[TrajectoryPmb],
                   sensor_poses: list[np.ndarray] | None = None,
                   p_ber: float = 0.1,
                   mobile: bool = False,
                   orientations: list[float] | None = None) -> InputSequence:
    """Flatten surviving Bernoullis of all sensors into one vector list.

    For the mobile (18-dim) variant, `sensor_poses[i]` holds realized
    positions (horizon, 2) and `orientations[i]` the fixed orientation of
    the sensor behind `pmbs[i]`.
    """
    if mobile and (sensor_poses is None or orientations is None):
        raise ValueError("sensor poses and orientations required for the "
                         "mobile variant")
    vectors: list[InputVector] = []
    for idx, pmb in enumerate(pmbs):
        s = pmb.sensor_index
        survivors = prune_bernoullis(pmb.bernoullis, p_ber)
        for bern in survivors:
            blocks = extract_block_covariances(bern.cov, bern.max_length)
            w_hat = marginal_existence(bern.existence, bern.length_probs)
            means = bern.mean.reshape(bern.max_length, 4)
            for j in range(1, bern.max_length + 1):
                t = bern.start_time + j - 1
                c = vectorize_upper_triangle(blocks[j - 1])
                if mobile:
                    pose = sensor_poses[idx][t - 1]
                    values = np.concatenate(
                        [means[j - 1], c, pose, [orientations[idx]],
                         [w_hat[j - 1]]])
                else:
                    values = np.concatenate(
                        [means[j - 1], c, [w_hat[j - 1]]])
                vectors.append(InputVector(values, t, j, s))
    return InputSequence(vectors)


def sequence_length(pmbs: list[TrajectoryPmb], p_ber: float) -> int:
    """Total vector count: sum of surviving trajectory lengths."""
    return sum(b.max_length
               for pmb in pmbs
               for b in prune_bernoullis(pmb.bernoullis, p_ber))


def normalize(seq: InputSequence,
              bounds: NormalizationBounds) -> InputSequence:
    """Map positions into [0,1]^2 and scale the remaining state-like
    entries consistently; existence entries pass through unchanged."""
    out = []
    for v in seq.vectors:
        u = v.values.copy()
        u[:4] = bounds.normalize_state(u[:4])
        C = devectorize_upper_triangle(u[4:14])
        u[4:14] = vectorize_upper_triangle(bounds.normalize_cov(C))
        if len(u) == DIM_MOBILE:
            u[14:16] = bounds.normalize_position(u[14:16])
        out.append(InputVector(u, v.time, v.traj_step, v.sensor))
    return InputSequence(out)


def denormalize(seq: InputSequence,
                bounds: NormalizationBounds) -> InputSequence:
    """Inverse of normalize."""
    out = []
    for v in seq.vectors:
        u = v.values.copy()
        u[:4] = bounds.denormalize_state(u[:4])
        C = devectorize_upper_triangle(u[4:14])
        u[4:14] = vectorize_upper_triangle(bounds.denormalize_cov(C))
        if len(u) == DIM_MOBILE:
            u[14:16] = bounds.denormalize_position(u[14:16])
        out.append(InputVector(u, v.time, v.traj_step, v.sensor))
    return InputSequence(out)
