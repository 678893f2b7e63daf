"""Model-based Bayesian fusion baseline.

Each sensor's trajectory PMB is first marginalized to a PMB over current
object states.  Fusion then clusters Bernoulli components across sensors
by gated optimal assignment, fuses each cluster's Gaussians by covariance
intersection with trace-minimizing weights, combines existence under the
independence complement rule restricted to sensors covering the fused
location, and arithmetically averages the local Poisson intensities over
the sensors covering each component.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize_scalar

from .gauss import symmetrize
from .outputs import BernoulliComponent, FusionOutput
from .outputs import extract_estimates  # re-exported  # noqa: F401
from .simworld import SensorConfig, in_fov
from .tpmb import PoissonIntensity, TrajectoryPmb

_GATE_BIG = 1e9


@dataclass
class CurrentPmb:
    """One sensor's current-time PMB plus its FoV at that time."""
    poisson: PoissonIntensity
    bernoullis: list[BernoulliComponent]
    sensor: SensorConfig
    pose: np.ndarray  # sensor position at the fusion time
    sensor_index: int = 0

    def covers(self, point: np.ndarray) -> bool:
        return in_fov(self.pose, self.sensor.orientation, self.sensor, point)


@dataclass
class BayesFusionSettings:
    association_gate: float = 13.8   # chi-square(2) quantile at 0.999
    existence_cap: float = 1.0 - 1e-9
    ci_sweeps: int = 10


def marginalize_to_current(tpmb: TrajectoryPmb, T: int,
                           sensor: SensorConfig, pose: np.ndarray,
                           existence_cap: float = 1.0 - 1e-9) -> CurrentPmb:
    """Current-state PMB of one sensor.

    A trajectory contributes iff its maximal extent reaches T; its current
    existence is the trajectory existence times the probability of being
    alive through T, and its state density is the last 4-dim block.
    """
    if tpmb.current_time != T:
        raise ValueError(
            f"filter time {tpmb.current_time} does not match T={T}")
    bernoullis = []
    for bern in tpmb.bernoullis:
        if bern.start_time + bern.max_length - 1 != T:
            continue
        r = min(bern.existence * bern.alive_prob, existence_cap)
        if r <= 0.0:
            continue
        mean, cov = bern.last_block()
        bernoullis.append(BernoulliComponent(r, mean.copy(), cov.copy()))
    return CurrentPmb(tpmb.poisson, bernoullis, sensor, np.asarray(pose),
                      tpmb.sensor_index)


def _ci_trace(omegas: np.ndarray, infos: list[np.ndarray]) -> float:
    total = sum(w * info for w, info in zip(omegas, infos))
    return float(np.trace(np.linalg.inv(total)))


def _ci_weights(infos: list[np.ndarray], sweeps: int) -> np.ndarray:
    """Covariance-intersection weights minimizing the fused trace.

    Two members: bounded scalar search.  More: cyclic pairwise transfers,
    each solved by the same scalar search.
    """
    n = len(infos)
    if n == 1:
        return np.ones(1)

    def pair_best(info_a, info_b, mass):
        # minimize trace over omega_a in [0, mass] with omega_b = mass - w
        def f(w):
            return _ci_trace(np.array([w, mass - w]), [info_a, info_b])

        res = minimize_scalar(f, bounds=(0.0, mass), method="bounded",
                              options={"xatol": 1e-12})
        candidates = [(f(0.0), 0.0), (f(mass), mass),
                      (float(res.fun), float(res.x))]
        return min(candidates)[1]

    if n == 2:
        w = pair_best(infos[0], infos[1], 1.0)
        return np.array([w, 1.0 - w])

    omegas = np.full(n, 1.0 / n)
    for _ in range(sweeps):
        for a in range(n):
            for b in range(a + 1, n):
                mass = omegas[a] + omegas[b]
                if mass <= 0.0:
                    continue
                rest = sum(omegas[i] * infos[i] for i in range(n)
                           if i not in (a, b))

                def f(w):
                    total = rest + w * infos[a] + (mass - w) * infos[b]
                    return float(np.trace(np.linalg.inv(total)))

                res = minimize_scalar(f, bounds=(0.0, mass),
                                      method="bounded",
                                      options={"xatol": 1e-12})
                best = min([(f(0.0), 0.0), (f(mass), mass),
                            (float(res.fun), float(res.x))])[1]
                omegas[a], omegas[b] = best, mass - best
    return omegas


def covariance_intersection(means: list[np.ndarray], covs: list[np.ndarray],
                            sweeps: int = 10
                            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """CI fusion of Gaussians; returns (mean, cov, weights)."""
    infos = []
    for idx, P in enumerate(covs):
        try:
            infos.append(np.linalg.inv(P))
        except np.linalg.LinAlgError:
            raise ValueError(f"singular covariance in CI member {idx}")
    omegas = _ci_weights(infos, sweeps)
    fused_info = sum(w * info for w, info in zip(omegas, infos))
    fused_cov = symmetrize(np.linalg.inv(fused_info))
    fused_mean = fused_cov @ sum(
        w * info @ m for w, info, m in zip(omegas, infos, means))
    return fused_mean, fused_cov, omegas


def _cluster(locals_: list[CurrentPmb], gate: float) -> list[list[tuple[int, int]]]:
    """Cross-sensor clusters of Bernoulli components.

    Pairwise gated optimal assignment on position Mahalanobis distance
    under summed covariances; links merged in ascending cost while keeping
    at most one component per sensor in a cluster.
    """
    links = []
    for a in range(len(locals_)):
        for b in range(a + 1, len(locals_)):
            ca, cb = locals_[a].bernoullis, locals_[b].bernoullis
            if not ca or not cb:
                continue
            cost = np.full((len(ca), len(cb)), _GATE_BIG)
            for i, comp_a in enumerate(ca):
                for j, comp_b in enumerate(cb):
                    S = (comp_a.cov[:2, :2] + comp_b.cov[:2, :2])
                    d = comp_a.mean[:2] - comp_b.mean[:2]
                    m2 = float(d @ np.linalg.solve(S, d))
                    if m2 <= gate:
                        cost[i, j] = m2
            rows, cols = linear_sum_assignment(cost)
            for i, j in zip(rows, cols):
                if cost[i, j] < _GATE_BIG:
                    links.append((cost[i, j], (a, i), (b, j)))
    links.sort(key=lambda x: x[0])

    parent: dict[tuple[int, int], tuple[int, int]] = {}

    def find(x):
        while parent.get(x, x) != x:
            parent[x] = parent.get(parent[x], parent[x])
            x = parent[x]
        return x

    members: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for s in range(len(locals_)):
        for i in range(len(locals_[s].bernoullis)):
            members[(s, i)] = [(s, i)]

    for _, x, y in links:
        rx, ry = find(x), find(y)
        if rx == ry:
            continue
        sensors_x = {s for s, _ in members[rx]}
        sensors_y = {s for s, _ in members[ry]}
        if sensors_x & sensors_y:
            continue  # one component per sensor per cluster
        parent[ry] = rx
        members[rx] = members[rx] + members[ry]
        del members[ry]

    return sorted(members.values(), key=lambda ms: sorted(ms))


def fuse(locals_: list[CurrentPmb],
         settings: BayesFusionSettings | None = None
         ) -> tuple[FusionOutput, PoissonIntensity]:
    """Fuse per-sensor current PMBs into a global MB plus fused PPP."""
    if not locals_:
        raise ValueError("at least one local density required")
    settings = settings or BayesFusionSettings()

    clusters = _cluster(locals_, settings.association_gate)
    fused_components = []
    for cluster in clusters:
        comps = [locals_[s].bernoullis[i] for s, i in cluster]
        if len(comps) == 1:
            fused_components.append(BernoulliComponent(
                min(comps[0].existence, settings.existence_cap),
                comps[0].mean.copy(), comps[0].cov.copy()))
            continue
        mean, cov, _ = covariance_intersection(
            [c.mean for c in comps], [c.cov for c in comps],
            settings.ci_sweeps)
        covering = [c.existence for (s, _), c in zip(cluster, comps)
                    if locals_[s].covers(mean)]
        if covering:
            r = 1.0 - float(np.prod([1.0 - r_s for r_s in covering]))
        else:
            r = max(c.existence for c in comps)
        fused_components.append(BernoulliComponent(
            min(r, settings.existence_cap), mean, cov))

    # arithmetic average of local PPPs over the sensors covering each
    # component's location
    weights, means, covs = [], [], []
    for local in locals_:
        ppp = local.poisson
        for q in range(len(ppp)):
            n_cov = sum(other.covers(ppp.means[q]) for other in locals_)
            weights.append(ppp.weights[q] / max(n_cov, 1))
            means.append(ppp.means[q].copy())
            covs.append(ppp.covs[q].copy())
    poisson = PoissonIntensity(
        np.array(weights) if weights else np.zeros(0),
        np.array(means) if means else np.zeros((0, 4)),
        np.array(covs) if covs else np.zeros((0, 4, 4)))
    return FusionOutput(fused_components), poisson
