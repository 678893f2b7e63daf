import numpy as np
import pytest

from modfuse.bayesfusion import (BayesFusionSettings, CurrentPmb,
                                 covariance_intersection, extract_estimates,
                                 fuse, marginalize_to_current)
from modfuse.outputs import BernoulliComponent, FusionOutput
from modfuse.simworld import SensorConfig
from modfuse.tpmb import PoissonIntensity, TrajectoryBernoulli, TrajectoryPmb


def omni(position=(0.0, 0.0), radius=1000.0):
    return SensorConfig(initial_position=np.array(position, dtype=float),
                        orientation=0.0, fov_bearing=2 * np.pi,
                        fov_radius=radius)


def comp(r, mean, cov=None):
    return BernoulliComponent(r, np.asarray(mean, float),
                              np.eye(4) if cov is None else np.asarray(cov))


def local(comps, sensor=None, pose=(0.0, 0.0), poisson=None, index=1):
    return CurrentPmb(poisson or PoissonIntensity.empty(), comps,
                      sensor or omni(), np.asarray(pose, float), index)


def random_psd(rng, n=4):
    A = rng.normal(size=(n, n))
    return A @ A.T + 0.5 * np.eye(n)


class TestMarginalize:
    def test_product_rule(self):
        bern = TrajectoryBernoulli(0.9, 9, np.array([0.2, 0.8]),
                                   np.arange(8.0), np.eye(8))
        tpmb = TrajectoryPmb(PoissonIntensity.empty(), [bern], 1, 10)
        cur = marginalize_to_current(tpmb, 10, omni(), np.zeros(2))
        assert len(cur.bernoullis) == 1
        assert cur.bernoullis[0].existence == pytest.approx(0.72)

    def test_ended_trajectory_absent(self):
        bern = TrajectoryBernoulli(0.9, 5, np.array([0.2, 0.8]),
                                   np.arange(8.0), np.eye(8))
        tpmb = TrajectoryPmb(PoissonIntensity.empty(), [bern], 1, 10)
        cur = marginalize_to_current(tpmb, 10, omni(), np.zeros(2))
        assert cur.bernoullis == []

    def test_single_step_slice_oracle(self):
        rng = np.random.default_rng(0)
        mean = rng.normal(size=4)
        cov = random_psd(rng)
        bern = TrajectoryBernoulli(0.8, 10, np.array([1.0]), mean, cov)
        tpmb = TrajectoryPmb(PoissonIntensity.empty(), [bern], 1, 10)
        cur = marginalize_to_current(tpmb, 10, omni(), np.zeros(2))
        assert np.array_equal(cur.bernoullis[0].mean, mean)
        assert np.array_equal(cur.bernoullis[0].cov, cov)

    def test_time_mismatch_rejected(self):
        tpmb = TrajectoryPmb(PoissonIntensity.empty(), [], 1, 9)
        with pytest.raises(ValueError):
            marginalize_to_current(tpmb, 10, omni(), np.zeros(2))


class TestFuse:
    def test_single_sensor_identity(self):
        rng = np.random.default_rng(1)
        comps = [comp(0.7, rng.normal(size=4), random_psd(rng))]
        out, _ = fuse([local(comps)])
        assert len(out) == 1
        assert out.components[0].existence == pytest.approx(0.7)
        assert np.allclose(out.components[0].mean, comps[0].mean)
        assert np.allclose(out.components[0].cov, comps[0].cov)

    def test_two_identical_components(self):
        mean = np.array([1.0, 2.0, 0.1, -0.1])
        cov = np.diag([0.5, 0.5, 0.2, 0.2])
        out, _ = fuse([
            local([comp(0.8, mean, cov)], index=1),
            local([comp(0.8, mean, cov)], index=2),
        ])
        assert len(out) == 1
        fused = out.components[0]
        assert np.allclose(fused.mean, mean, atol=1e-9)
        assert np.allclose(fused.cov, cov, atol=1e-9)
        assert fused.existence == pytest.approx(1.0 - 0.2 ** 2)

    def test_trace_line_search_oracle(self):
        # 1-D oracle: omega* = argmin trace((w*I + (1-w)*I/2)^-1) = 1
        mean = np.zeros(4)
        out, _ = fuse([
            local([comp(0.5, mean, np.eye(4))], index=1),
            local([comp(0.5, mean, 2.0 * np.eye(4))], index=2),
        ])
        fused = out.components[0]
        omegas = np.linspace(0.0, 1.0, 10001)
        traces = [np.trace(np.linalg.inv(w * np.eye(4)
                                         + (1 - w) * np.eye(4) / 2.0))
                  for w in omegas]
        assert omegas[int(np.argmin(traces))] == pytest.approx(1.0)
        assert np.allclose(fused.cov, np.eye(4), atol=1e-6)

    def test_ci_consistency_eigen(self):
        # fused covariance is never tighter than the naive product
        rng = np.random.default_rng(2)
        for _ in range(100):
            covs = [random_psd(rng), random_psd(rng)]
            means = [rng.normal(size=4), rng.normal(size=4)]
            _, fused_cov, _ = covariance_intersection(means, covs)
            naive = np.linalg.inv(np.linalg.inv(covs[0])
                                  + np.linalg.inv(covs[1]))
            assert np.linalg.eigvalsh(fused_cov - naive).min() >= -1e-9

    def test_order_invariance(self):
        rng = np.random.default_rng(3)
        locs = []
        for s in range(3):
            comps = [comp(rng.uniform(0.3, 0.9), rng.normal(size=4),
                          random_psd(rng)) for _ in range(2)]
            locs.append(local(comps, index=s + 1))
        out1, _ = fuse(locs)
        out2, _ = fuse(locs[::-1])

        def key(c):
            return tuple(np.round(np.concatenate([[c.existence], c.mean]), 9))

        s1 = sorted(out1.components, key=key)
        s2 = sorted(out2.components, key=key)
        assert len(s1) == len(s2)
        for a, b in zip(s1, s2):
            assert a.existence == pytest.approx(b.existence, abs=1e-9)
            assert np.allclose(a.mean, b.mean, atol=1e-9)
            assert np.allclose(a.cov, b.cov, atol=1e-9)

    def test_disjoint_fovs_concatenate(self):
        # far-apart components with disjoint FoVs: no association,
        # fusion reduces to concatenation
        s1 = SensorConfig(initial_position=np.array([-50.0, 0.0]),
                          orientation=0.0, fov_bearing=np.pi / 2,
                          fov_radius=20.0)
        s2 = SensorConfig(initial_position=np.array([50.0, 0.0]),
                          orientation=np.pi, fov_bearing=np.pi / 2,
                          fov_radius=20.0)
        c1 = [comp(0.8, [-40.0, 0.0, 0.0, 0.0])]
        c2 = [comp(0.6, [40.0, 0.0, 0.0, 0.0])]
        out, _ = fuse([
            local(c1, sensor=s1, pose=(-50.0, 0.0), index=1),
            local(c2, sensor=s2, pose=(50.0, 0.0), index=2),
        ])
        assert len(out) == 2
        rs = sorted(c.existence for c in out.components)
        assert rs == pytest.approx([0.6, 0.8])

    def test_existence_monotone_and_bounded(self):
        mean = np.zeros(4)
        rng = np.random.default_rng(4)
        for _ in range(100):
            r1, r2 = rng.uniform(0.1, 0.99, 2)
            out, _ = fuse([
                local([comp(r1, mean)], index=1),
                local([comp(r2, mean)], index=2),
            ])
            r_f = out.components[0].existence
            assert r_f <= 1.0
            out_hi, _ = fuse([
                local([comp(min(r1 + 0.01, 0.999), mean)], index=1),
                local([comp(r2, mean)], index=2),
            ])
            assert out_hi.components[0].existence >= r_f - 1e-12

    def test_fused_poisson_average(self):
        ppp = PoissonIntensity(np.array([0.4]), np.zeros((1, 4)),
                               np.eye(4)[None])
        out, fused_ppp = fuse([
            local([], poisson=ppp, index=1),
            local([], poisson=ppp, index=2),
        ])
        # both omni sensors cover the component: each weight halves
        assert np.allclose(fused_ppp.weights, [0.2, 0.2])

    def test_requires_input(self):
        with pytest.raises(ValueError):
            fuse([])


class TestExtractEstimates:
    def test_threshold_strict(self):
        out = FusionOutput([comp(0.6, np.zeros(4)), comp(0.5, np.ones(4))])
        kept = extract_estimates(out, 0.5)
        assert len(kept) == 1
        assert kept[0].existence == 0.6

    def test_zero_keeps_all(self):
        out = FusionOutput([comp(0.1, np.zeros(4)), comp(0.9, np.ones(4))])
        assert len(extract_estimates(out, 0.0)) == 2

    def test_one_keeps_none(self):
        out = FusionOutput([comp(0.99, np.zeros(4))])
        assert extract_estimates(out, 1.0) == []

    def test_empty(self):
        assert extract_estimates(FusionOutput([]), 0.5) == []
