"""Per-sensor linear-Gaussian trajectory Poisson multi-Bernoulli filter.

The filter tracks a PPP over undetected current states plus a list of
trajectory Bernoulli components.  Each Bernoulli carries the Gaussian over
its whole state sequence together with a distribution over the trajectory
length, where only the maximal length corresponds to a currently-alive
trajectory.  Data association enumerates the best global hypotheses with
Murty's algorithm and projects back to PMB form by per-track moment
matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .gauss import LOG_2PI, moment_match, safe_log, symmetrize
from .kbest import BIG_COST, k_best_assignments
from .simworld import (H_MATRIX, STATE_DIM, ScenarioConfig, SensorConfig,
                       MeasurementSet, in_fov, motion_matrices)


class FilterNumericsError(RuntimeError):
    """Raised when a covariance degenerates beyond tolerance."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None
                         else f"step {step}: {message}")
        self.step = step


@dataclass
class TrajectoryBernoulli:
    """One potential detected trajectory.

    `length_probs[j-1]` is the probability that the trajectory has length
    exactly j given it exists; only the maximal length is still alive.
    `mean`/`cov` describe the Gaussian over the stacked state sequence.
    """
    existence: float
    start_time: int
    length_probs: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    @property
    def max_length(self) -> int:
        return len(self.length_probs)

    @property
    def alive_prob(self) -> float:
        return float(self.length_probs[-1])

    def last_block(self) -> tuple[np.ndarray, np.ndarray]:
        d = 4 * self.max_length
        return self.mean[d - 4:d], self.cov[d - 4:d, d - 4:d]

    def validate(self, tol: float = 1e-9):
        if not -tol <= self.existence <= 1.0 + tol:
            raise FilterNumericsError(
                f"existence {self.existence} outside [0, 1]")
        if abs(self.length_probs.sum() - 1.0) > 1e-9:
            raise FilterNumericsError("length probabilities do not sum to 1")
        _check_psd(self.cov, tol)


def _check_psd(P: np.ndarray, tol: float = 1e-9):
    try:
        np.linalg.cholesky(P + tol * np.eye(P.shape[0]))
    except np.linalg.LinAlgError:
        raise FilterNumericsError("covariance lost positive semidefiniteness")


@dataclass
class PoissonIntensity:
    """Weighted Gaussian mixture intensity over current object states."""
    weights: np.ndarray
    means: np.ndarray  # (n, 4)
    covs: np.ndarray   # (n, 4, 4)

    @staticmethod
    def empty() -> "PoissonIntensity":
        return PoissonIntensity(np.zeros(0), np.zeros((0, STATE_DIM)),
                                np.zeros((0, STATE_DIM, STATE_DIM)))

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class TrajectoryPmb:
    poisson: PoissonIntensity
    bernoullis: list[TrajectoryBernoulli]
    sensor_index: int
    current_time: int

    @staticmethod
    def empty(sensor_index: int = 1) -> "TrajectoryPmb":
        return TrajectoryPmb(PoissonIntensity.empty(), [], sensor_index, 0)


@dataclass
class FilterSettings:
    gate_size: float = 20.0          # squared-Mahalanobis gate
    max_hypotheses: int = 100
    mb_weight_prune: float = 1e-3
    existence_prune: float = 1e-3
    ppp_weight_prune: float = 1e-5
    estimation_threshold: float = 0.5


@dataclass
class SensorModel:
    """Everything one sensor's filter needs per scan."""
    F: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    survival_prob: float
    detection_prob: float
    birth_weight: float
    birth_mean: np.ndarray
    birth_cov: np.ndarray
    clutter_intensity: float  # per unit area over the FoV
    sensor: SensorConfig
    poses: np.ndarray  # (horizon, 2) realized sensor positions

    def pose_at(self, t: int) -> np.ndarray:
        return self.poses[t - 1]

    def point_in_fov(self, t: int, x: np.ndarray) -> bool:
        return in_fov(self.pose_at(t), self.sensor.orientation,
                      self.sensor, x)


def make_sensor_model(cfg: ScenarioConfig, sensor_idx: int,
                      poses: np.ndarray) -> SensorModel:
    sensor = cfg.sensors[sensor_idx - 1]
    F, Q = motion_matrices(cfg.scan_time, cfg.process_noise)
    return SensorModel(
        F=F, Q=Q, H=H_MATRIX.copy(),
        R=cfg.measurement_noise * np.eye(2),
        survival_prob=cfg.survival_prob,
        detection_prob=cfg.detection_prob,
        birth_weight=cfg.birth_rate,
        birth_mean=cfg.birth_mean.copy(),
        birth_cov=cfg.birth_cov.copy(),
        clutter_intensity=cfg.clutter_rate / sensor.fov_area(),
        sensor=sensor,
        poses=poses,
    )


def predict(state: TrajectoryPmb, model: SensorModel) -> TrajectoryPmb:
    """Extend every trajectory by one step and predict the PPP with birth."""
    F, Q, ps = model.F, model.Q, model.survival_prob
    new_bernoullis = []
    for bern in state.bernoullis:
        d = 4 * bern.max_length
        x_last = bern.mean[d - 4:d]
        cross = bern.cov[:, d - 4:d] @ F.T          # (d, 4)
        bottom = F @ bern.cov[d - 4:d, d - 4:d] @ F.T + Q
        mean = np.concatenate([bern.mean, F @ x_last])
        cov = np.empty((d + 4, d + 4))
        cov[:d, :d] = bern.cov
        cov[:d, d:] = cross
        cov[d:, :d] = cross.T
        cov[d:, d:] = bottom
        cov = symmetrize(cov)
        _check_psd(cov[d:, d:])  # update re-checks the full matrix
        w = bern.length_probs
        new_w = np.concatenate([w[:-1], [w[-1] * (1.0 - ps)], [w[-1] * ps]])
        new_bernoullis.append(TrajectoryBernoulli(
            bern.existence, bern.start_time, new_w, mean, cov))

    ppp = state.poisson
    n = len(ppp)
    weights = np.concatenate([ppp.weights * ps, [model.birth_weight]])
    means = np.concatenate([
        (F @ ppp.means.T).T if n else np.zeros((0, STATE_DIM)),
        model.birth_mean[None, :],
    ])
    covs = np.concatenate([
        np.einsum("ij,njk,lk->nil", F, ppp.covs, F) + Q if n
        else np.zeros((0, STATE_DIM, STATE_DIM)),
        model.birth_cov[None, :, :],
    ])
    return TrajectoryPmb(PoissonIntensity(weights, means, covs),
                         new_bernoullis, state.sensor_index,
                         state.current_time + 1)


def _inv2_logdet(S: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse and log-determinant of a 2x2 SPD innovation covariance."""
    a, b, c = S[0, 0], S[0, 1], S[1, 1]
    det = a * c - b * b
    if det <= 0.0 or a <= 0.0:
        raise FilterNumericsError("innovation covariance not invertible")
    return np.array([[c, -b], [-b, a]]) / det, float(np.log(det))


def _misdetection_posterior(bern: TrajectoryBernoulli,
                            pd_eff: float) -> tuple[float, TrajectoryBernoulli]:
    """Misdetection weight and the corresponding posterior Bernoulli."""
    alive = bern.alive_prob
    not_detected = 1.0 - pd_eff * alive
    weight = 1.0 - bern.existence + bern.existence * not_detected
    if not_detected <= 0.0:
        # detection certain and trajectory surely alive: misdetection has
        # zero probability, keep a placeholder posterior
        return 0.0, replace(bern, existence=0.0)
    r_new = bern.existence * not_detected / weight
    w = bern.length_probs.copy()
    w[-1] *= (1.0 - pd_eff)
    w /= not_detected
    return weight, TrajectoryBernoulli(r_new, bern.start_time, w,
                                       bern.mean, bern.cov)


class _TrackUpdater:
    """Per-scan cached quantities for one Bernoulli: innovation inverse,
    Kalman gain over the whole trajectory and the (measurement-independent)
    detection-posterior covariance."""

    def __init__(self, bern: TrajectoryBernoulli, H: np.ndarray,
                 R: np.ndarray):
        self.bern = bern
        d = 4 * bern.max_length
        x_last, P_last = bern.last_block()
        self.z_pred = H @ x_last
        S = H @ P_last @ H.T + R
        self.S_inv, self.logdet = _inv2_logdet(S)
        self.gain = bern.cov[:, d - 4:d] @ H.T @ self.S_inv   # (d, 2)
        self.det_cov = symmetrize(bern.cov - self.gain @ S @ self.gain.T)
        self.det_lengths = np.zeros_like(bern.length_probs)
        self.det_lengths[-1] = 1.0

    def gate_and_loglik(self, zs: np.ndarray,
                        gate_size: float) -> tuple[np.ndarray, np.ndarray]:
        diff = zs - self.z_pred
        maha = np.einsum("mi,ik,mk->m", diff, self.S_inv, diff)
        logliks = -0.5 * (maha + self.logdet) - LOG_2PI
        return maha <= gate_size, logliks

    def detection_posterior(self, z: np.ndarray) -> TrajectoryBernoulli:
        mean = self.bern.mean + self.gain @ (z - self.z_pred)
        return TrajectoryBernoulli(1.0, self.bern.start_time,
                                   self.det_lengths, mean, self.det_cov)


class _PppUpdater:
    """Cached per-component update quantities for the Poisson intensity."""

    def __init__(self, ppp: PoissonIntensity, model: SensorModel):
        self.ppp = ppp
        self.pd = model.detection_prob
        self.clutter = model.clutter_intensity
        n = len(ppp)
        H, R = model.H, model.R
        self.z_pred = np.zeros((n, 2))
        self.S_inv = np.zeros((n, 2, 2))
        self.logdets = np.zeros(n)
        self.gains = np.zeros((n, STATE_DIM, 2))
        self.post_covs = np.zeros((n, STATE_DIM, STATE_DIM))
        for q in range(n):
            P = ppp.covs[q]
            self.z_pred[q] = H @ ppp.means[q]
            S = H @ P @ H.T + R
            self.S_inv[q], self.logdets[q] = _inv2_logdet(S)
            self.gains[q] = P @ H.T @ self.S_inv[q]
            self.post_covs[q] = symmetrize(P - self.gains[q] @ S
                                           @ self.gains[q].T)

    def new_track(self, z: np.ndarray, gate_size: float, t: int
                  ) -> tuple[float, TrajectoryBernoulli | None]:
        """Total weight and Bernoulli for `z` starting a new track."""
        if len(self.ppp) == 0:
            return self.clutter, None
        diff = z - self.z_pred
        maha = np.einsum("qi,qik,qk->q", diff, self.S_inv, diff)
        gated = np.flatnonzero(maha <= gate_size)
        if len(gated) == 0:
            return self.clutter, None
        logliks = -0.5 * (maha[gated] + self.logdets[gated]) - LOG_2PI
        liks = self.ppp.weights[gated] * self.pd * np.exp(logliks)
        det_sum = float(liks.sum())
        total = self.clutter + det_sum
        if det_sum <= 0.0:
            return total, None
        means = [self.ppp.means[q] + self.gains[q] @ diff[q] for q in gated]
        covs = [self.post_covs[q] for q in gated]
        mean, cov = moment_match(liks / det_sum, means, covs)
        bern = TrajectoryBernoulli(det_sum / total, t, np.array([1.0]),
                                   mean, cov)
        return total, bern


def prune_hypotheses(weights: np.ndarray,
                     threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Drop hypotheses below `threshold` and renormalize.

    Returns (kept indices, renormalized weights).
    """
    keep = np.flatnonzero(weights >= threshold)
    if len(keep) == 0:
        keep = np.array([int(np.argmax(weights))])
    kept = weights[keep]
    return keep, kept / kept.sum()


def update(state: TrajectoryPmb, z_set: MeasurementSet, model: SensorModel,
           settings: FilterSettings) -> TrajectoryPmb:
    """Measurement update with k-best global hypotheses, marginalized back
    to PMB form by per-track moment matching."""
    t = state.current_time
    zs = np.atleast_2d(z_set.measurements) if len(z_set.measurements) else \
        np.zeros((0, 2))
    n = len(state.bernoullis)
    m = len(zs)
    pd = model.detection_prob

    miss_weights = np.empty(n)
    miss_posts: list[TrajectoryBernoulli] = []
    trackers: list[_TrackUpdater | None] = []
    gate_masks = np.zeros((n, m), dtype=bool)
    det_log_weights = np.full((n, max(m, 1)), -np.inf)

    for i, bern in enumerate(state.bernoullis):
        x_last = bern.mean[-4:]
        pd_eff = pd if model.point_in_fov(t, x_last) else 0.0
        w_miss, post_miss = _misdetection_posterior(bern, pd_eff)
        miss_weights[i] = w_miss
        miss_posts.append(post_miss)
        if pd_eff <= 0.0 or m == 0:
            trackers.append(None)
            continue
        tracker = _TrackUpdater(bern, model.H, model.R)
        trackers.append(tracker)
        gated, logliks = tracker.gate_and_loglik(zs, settings.gate_size)
        gate_masks[i] = gated
        det_log_weights[i, gated] = (
            safe_log(bern.existence * pd_eff * bern.alive_prob)
            + logliks[gated])

    ppp_updater = _PppUpdater(state.poisson, model)
    new_totals = np.empty(m)
    new_berns: list[TrajectoryBernoulli | None] = []
    for j in range(m):
        total, bern = ppp_updater.new_track(zs[j], settings.gate_size, t)
        new_totals[j] = total
        new_berns.append(bern)

    if m > 0:
        cost = np.full((m, n + m), BIG_COST)
        for i in range(n):
            for j in np.flatnonzero(gate_masks[i]):
                cost[j, i] = -det_log_weights[i, j] + safe_log(miss_weights[i])
        for j in range(m):
            cost[j, n + j] = -safe_log(new_totals[j])
        assignments, costs = k_best_assignments(
            cost, settings.max_hypotheses,
            max_cost_gap=-np.log(settings.mb_weight_prune))
        raw = np.exp(-(costs - costs[0]))
        keep, weights = prune_hypotheses(raw / raw.sum(),
                                         settings.mb_weight_prune)
        assignments = [assignments[k] for k in keep]
    else:
        assignments = [np.zeros(0, dtype=np.int64)]
        weights = np.ones(1)

    new_bernoullis: list[TrajectoryBernoulli] = []

    # marginalize existing tracks over the kept hypotheses
    for i in range(n):
        # group hypotheses by the local association of track i
        # (-1 = misdetected, j = updated with measurement j)
        local_weights: dict[int, float] = {}
        for w_h, assign in zip(weights, assignments):
            js = np.flatnonzero(assign == i)
            key = int(js[0]) if len(js) else -1
            local_weights[key] = local_weights.get(key, 0.0) + float(w_h)
        posts = [miss_posts[i] if key == -1
                 else trackers[i].detection_posterior(zs[key])
                 for key in local_weights]
        hyp_weights = np.fromiter(local_weights.values(), dtype=float)
        existences = np.array([p.existence for p in posts])
        r_bar = float(hyp_weights @ existences)
        if r_bar <= 0.0:
            continue
        gammas = hyp_weights * existences / r_bar
        if len(posts) == 1:
            mean, cov = posts[0].mean, posts[0].cov
            length_probs = posts[0].length_probs
        else:
            mean, cov = moment_match(gammas, [p.mean for p in posts],
                                     [p.cov for p in posts])
            length_probs = sum(
                g * p.length_probs for g, p in zip(gammas, posts))
            length_probs = length_probs / length_probs.sum()
        _check_psd(cov)
        new_bernoullis.append(TrajectoryBernoulli(
            min(r_bar, 1.0), state.bernoullis[i].start_time,
            length_probs, mean, cov))

    # new tracks from measurements assigned to their own column
    for j in range(m):
        if new_berns[j] is None:
            continue
        pi_j = float(sum(w_h for w_h, assign in zip(weights, assignments)
                         if assign[j] == n + j))
        r = pi_j * new_berns[j].existence
        if r <= 0.0:
            continue
        new_bernoullis.append(replace(new_berns[j], existence=min(r, 1.0)))

    # PPP thinning: undetected objects stay undetected
    ppp = state.poisson
    thin = np.array([
        1.0 - (pd if model.point_in_fov(t, ppp.means[q]) else 0.0)
        for q in range(len(ppp))
    ]) if len(ppp) else np.zeros(0)
    poisson = PoissonIntensity(ppp.weights * thin, ppp.means.copy(),
                               ppp.covs.copy())

    return TrajectoryPmb(poisson, new_bernoullis, state.sensor_index, t)


def reduce(state: TrajectoryPmb, settings: FilterSettings) -> TrajectoryPmb:
    """Prune low-existence Bernoullis and low-weight PPP components."""
    bernoullis = [b for b in state.bernoullis
                  if b.existence >= settings.existence_prune]
    keep = state.poisson.weights >= settings.ppp_weight_prune
    poisson = PoissonIntensity(state.poisson.weights[keep],
                               state.poisson.means[keep],
                               state.poisson.covs[keep])
    return TrajectoryPmb(poisson, bernoullis, state.sensor_index,
                         state.current_time)


def run_filter(measurements: list[MeasurementSet], model: SensorModel,
               settings: FilterSettings,
               sensor_index: int = 1) -> TrajectoryPmb:
    """Alternate predict/update/reduce over the scan sequence."""
    times = [ms.time for ms in measurements]
    if times and times != list(range(1, len(times) + 1)):
        raise ValueError("measurement steps must be contiguous from 1")
    state = TrajectoryPmb.empty(sensor_index)
    for step, z_set in enumerate(measurements, start=1):
        try:
            state = predict(state, model)
            state = update(state, z_set, model, settings)
            state = reduce(state, settings)
        except FilterNumericsError as err:
            raise FilterNumericsError(str(err), step=step) from err
    return state


@dataclass
class TrajectoryEstimate:
    start_time: int
    states: np.ndarray  # (length, 4)


def estimate(state: TrajectoryPmb,
             settings: FilterSettings) -> list[TrajectoryEstimate]:
    """MAP-length trajectory means of sufficiently certain Bernoullis."""
    out = []
    for bern in state.bernoullis:
        if bern.existence < settings.estimation_threshold:
            continue
        map_len = int(np.argmax(bern.length_probs)) + 1
        states = bern.mean[:4 * map_len].reshape(map_len, 4)
        out.append(TrajectoryEstimate(bern.start_time, states))
    return out
