"""Synthetic multi-object scenario generation.

Ground-truth trajectories follow a 2-D constant-velocity model with
Poisson births and geometric survival; each sensor observes positions of
objects inside its fan-shaped field of view, plus uniform Poisson clutter.
All randomness flows through an explicit numpy Generator so runs are
reproducible bit-for-bit from a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gauss import symmetrize

STATE_DIM = 4  # [px, py, vx, vy]
MEAS_DIM = 2

H_MATRIX = np.array([[1.0, 0.0, 0.0, 0.0],
                     [0.0, 1.0, 0.0, 0.0]])


def motion_matrices(dt: float, sigma_q2: float) -> tuple[np.ndarray, np.ndarray]:
    """Discretized white-noise-acceleration constant-velocity model.

    Returns the transition matrix F and process noise covariance Q for a
    state [px, py, vx, vy].
    """
    if dt <= 0:
        raise ValueError(f"scan time must be positive, got {dt}")
    if sigma_q2 < 0:
        raise ValueError(f"process noise must be nonnegative, got {sigma_q2}")
    I2 = np.eye(2)
    F = np.block([[I2, dt * I2], [np.zeros((2, 2)), I2]])
    Q = sigma_q2 * np.block([
        [dt ** 3 / 3.0 * I2, dt ** 2 / 2.0 * I2],
        [dt ** 2 / 2.0 * I2, dt * I2],
    ])
    return F, symmetrize(Q)


@dataclass
class SensorConfig:
    """One sensor: a fan-shaped field of view anchored at a pose.

    `fov_bearing` is the full angular width of the fan; orientation is the
    bisector direction and never changes, even for mobile sensors.
    """
    initial_position: np.ndarray
    orientation: float
    fov_bearing: float = 2.0 * np.pi / 3.0
    fov_radius: float = 20.0
    mobile: bool = False
    sensor_motion_noise: float = 0.0  # std dev of the CV process noise
    initial_velocity: np.ndarray = field(
        default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.initial_position = np.asarray(self.initial_position, dtype=float)
        self.initial_velocity = np.asarray(self.initial_velocity, dtype=float)
        if self.fov_radius <= 0:
            raise ValueError("fov_radius must be positive")
        if not (0.0 < self.fov_bearing <= 2.0 * np.pi + 1e-12):
            raise ValueError("fov_bearing must lie in (0, 2*pi]")

    def fov_area(self) -> float:
        return 0.5 * self.fov_bearing * self.fov_radius ** 2


@dataclass
class ScenarioConfig:
    sensors: list[SensorConfig]
    horizon: int
    process_noise: float = 0.5       # sigma_q^2
    measurement_noise: float = 0.01  # sigma_z^2
    scan_time: float = 0.1
    birth_rate: float = 0.1
    clutter_rate: float = 5.0
    survival_prob: float = 0.9
    detection_prob: float = 0.95
    birth_mean: np.ndarray = field(
        default_factory=lambda: np.zeros(STATE_DIM))
    birth_cov: np.ndarray = field(
        default_factory=lambda: np.diag([100.0, 100.0, 1.0, 1.0]))
    num_initial_objects: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        self.birth_mean = np.asarray(self.birth_mean, dtype=float)
        self.birth_cov = np.asarray(self.birth_cov, dtype=float)
        for name, p in (("survival_prob", self.survival_prob),
                        ("detection_prob", self.detection_prob)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.birth_rate < 0 or self.clutter_rate < 0:
            raise ValueError("rates must be nonnegative")
        if self.scan_time <= 0:
            raise ValueError("scan_time must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")

    @property
    def num_sensors(self) -> int:
        return len(self.sensors)


@dataclass
class GroundTruthTrajectory:
    """States of one object for every step it is alive (1-based times)."""
    birth_time: int
    states: np.ndarray  # (length, 4)

    @property
    def death_time(self) -> int:
        return self.birth_time + len(self.states) - 1

    def state_at(self, t: int) -> np.ndarray | None:
        if self.birth_time <= t <= self.death_time:
            return self.states[t - self.birth_time]
        return None


@dataclass
class MeasurementSet:
    time: int
    sensor: int  # 1-based sensor index
    measurements: np.ndarray  # (m, 2); set semantics, order carries no meaning


def simulate_ground_truth(cfg: ScenarioConfig,
                          rng: np.random.Generator) -> list[GroundTruthTrajectory]:
    """Draw a full ground-truth trajectory set over steps 1..horizon."""
    F, Q = motion_matrices(cfg.scan_time, cfg.process_noise)
    trajectories: list[GroundTruthTrajectory] = []
    alive: list[tuple[int, list[np.ndarray]]] = []  # (birth_time, states)

    def spawn(t: int, count: int):
        for _ in range(count):
            x = rng.multivariate_normal(cfg.birth_mean, cfg.birth_cov)
            alive.append((t, [x]))

    for t in range(1, cfg.horizon + 1):
        if t > 1:
            survivors = []
            for birth, states in alive:
                if rng.random() < cfg.survival_prob:
                    nxt = F @ states[-1]
                    if cfg.process_noise > 0:
                        nxt = nxt + rng.multivariate_normal(np.zeros(STATE_DIM), Q)
                    states.append(nxt)
                    survivors.append((birth, states))
                else:
                    trajectories.append(
                        GroundTruthTrajectory(birth, np.array(states)))
            alive = survivors
        if t == 1 and cfg.num_initial_objects > 0:
            spawn(t, cfg.num_initial_objects)
        n_births = rng.poisson(cfg.birth_rate)
        spawn(t, n_births)

    for birth, states in alive:
        trajectories.append(GroundTruthTrajectory(birth, np.array(states)))
    return trajectories


def simulate_sensor_poses(sensor: SensorConfig, horizon: int, dt: float,
                          rng: np.random.Generator) -> np.ndarray:
    """Positions of one sensor for t = 1..horizon, shape (horizon, 2).

    Static sensors sit at their initial position; mobile ones follow a
    constant-velocity random walk with std `sensor_motion_noise`.
    """
    if not sensor.mobile:
        return np.tile(sensor.initial_position, (horizon, 1))
    F, Q = motion_matrices(dt, sensor.sensor_motion_noise ** 2)
    state = np.concatenate([sensor.initial_position, sensor.initial_velocity])
    poses = np.empty((horizon, 2))
    poses[0] = state[:2]
    for t in range(1, horizon):
        state = F @ state
        if sensor.sensor_motion_noise > 0:
            state = state + rng.multivariate_normal(np.zeros(STATE_DIM), Q)
        poses[t] = state[:2]
    return poses


def sensor_pose(sensor: SensorConfig, t: int, horizon: int, dt: float,
                rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Pose (position, orientation) of a sensor at step t in 1..horizon."""
    if not 1 <= t <= horizon:
        raise ValueError(f"step {t} outside 1..{horizon}")
    poses = simulate_sensor_poses(sensor, horizon, dt, rng)
    return poses[t - 1], sensor.orientation


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = (a + np.pi) % (2.0 * np.pi) - np.pi
    if w == -np.pi:
        w = np.pi
    return float(w)


def in_fov(position: np.ndarray, orientation: float, sensor: SensorConfig,
           point: np.ndarray) -> bool:
    """True iff `point` (first two entries used) lies in the sensor fan."""
    d = np.asarray(point, dtype=float)[:2] - position
    rng_dist = float(np.hypot(d[0], d[1]))
    if rng_dist > sensor.fov_radius:
        return False
    if rng_dist == 0.0:
        return True
    bearing = wrap_angle(float(np.arctan2(d[1], d[0])) - orientation)
    return abs(bearing) <= 0.5 * sensor.fov_bearing


def sample_in_fov(position: np.ndarray, orientation: float,
                  sensor: SensorConfig, rng: np.random.Generator,
                  count: int) -> np.ndarray:
    """Uniform points over the fan region, shape (count, 2)."""
    theta = orientation + sensor.fov_bearing * (rng.random(count) - 0.5)
    radius = sensor.fov_radius * np.sqrt(rng.random(count))
    return position + np.column_stack(
        [radius * np.cos(theta), radius * np.sin(theta)])


def generate_measurements(truth: list[GroundTruthTrajectory],
                          cfg: ScenarioConfig, sensor_idx: int, t: int,
                          pose: np.ndarray,
                          rng: np.random.Generator) -> MeasurementSet:
    """Measurement set of one sensor at step t: detections of in-FoV
    objects plus uniform clutter over the fan, order shuffled."""
    sensor = cfg.sensors[sensor_idx - 1]
    zs = []
    for traj in truth:
        x = traj.state_at(t)
        if x is None or not in_fov(pose, sensor.orientation, sensor, x):
            continue
        if rng.random() < cfg.detection_prob:
            z = H_MATRIX @ x
            if cfg.measurement_noise > 0:
                z = z + rng.normal(0.0, np.sqrt(cfg.measurement_noise), MEAS_DIM)
            zs.append(z)
    n_clutter = rng.poisson(cfg.clutter_rate)
    if n_clutter > 0:
        clutter = sample_in_fov(pose, sensor.orientation, sensor, rng, n_clutter)
        zs.extend(clutter)
    if zs:
        z_arr = np.array(zs)
        z_arr = z_arr[rng.permutation(len(z_arr))]
    else:
        z_arr = np.zeros((0, MEAS_DIM))
    return MeasurementSet(time=t, sensor=sensor_idx, measurements=z_arr)


@dataclass
class ScenarioRun:
    """One simulated scenario: truth, realized sensor poses, measurements."""
    cfg: ScenarioConfig
    truth: list[GroundTruthTrajectory]
    sensor_poses: list[np.ndarray]          # per sensor, (horizon, 2)
    measurements: list[list[MeasurementSet]]  # [sensor][step]

    def truth_at(self, t: int) -> np.ndarray:
        states = [tr.state_at(t) for tr in self.truth]
        states = [s for s in states if s is not None]
        return np.array(states) if states else np.zeros((0, STATE_DIM))


def simulate_scenario(cfg: ScenarioConfig,
                      rng: np.random.Generator) -> ScenarioRun:
    """Simulate truth, sensor motion and all measurement sets for one run."""
    truth = simulate_ground_truth(cfg, rng)
    poses = [simulate_sensor_poses(s, cfg.horizon, cfg.scan_time, rng)
             for s in cfg.sensors]
    measurements = []
    for s_idx in range(1, cfg.num_sensors + 1):
        per_step = [
            generate_measurements(truth, cfg, s_idx, t,
                                  poses[s_idx - 1][t - 1], rng)
            for t in range(1, cfg.horizon + 1)
        ]
        measurements.append(per_step)
    return ScenarioRun(cfg, truth, poses, measurements)


def fov_bounding_box(sensors: list[SensorConfig],
                     poses: list[np.ndarray]) -> tuple[float, float, float, float]:
    """Axis-aligned bounding box (xmin, xmax, ymin, ymax) of the union of
    all sensor fans over all realized poses."""
    lo = np.full(2, np.inf)
    hi = np.full(2, -np.inf)
    for sensor, track in zip(sensors, poses):
        half = 0.5 * sensor.fov_bearing
        for pos in np.atleast_2d(track):
            angles = [sensor.orientation - half, sensor.orientation + half]
            for cardinal in (0.0, 0.5 * np.pi, np.pi, -0.5 * np.pi):
                if abs(wrap_angle(cardinal - sensor.orientation)) <= half:
                    angles.append(cardinal)
            pts = [pos] + [
                pos + sensor.fov_radius * np.array([np.cos(a), np.sin(a)])
                for a in angles
            ]
            pts = np.array(pts)
            lo = np.minimum(lo, pts.min(axis=0))
            hi = np.maximum(hi, pts.max(axis=0))
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])
