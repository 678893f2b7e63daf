import itertools

import numpy as np
import pytest

from modfuse.gauss import log_gaussian
from modfuse.metrics import (GospaConfig, NllConfig, gospa, nll, tune_ppp)
from modfuse.outputs import BernoulliComponent, FusionOutput
from modfuse.tpmb import PoissonIntensity


def brute_force_gospa(estimates, truth, cfg):
    """Exhaustive minimum over all partial assignments with pairs
    restricted to distance < cutoff."""
    est = np.atleast_2d(estimates) if len(estimates) else np.zeros((0, 2))
    tru = np.atleast_2d(truth) if len(truth) else np.zeros((0, 2))
    a, b = len(est), len(tru)
    c_pow = cfg.cutoff ** cfg.order
    best = np.inf
    for g in range(min(a, b) + 1):
        for est_idx in itertools.combinations(range(a), g):
            for tru_perm in itertools.permutations(range(b), g):
                total = 0.0
                ok = True
                for i, j in zip(est_idx, tru_perm):
                    d = np.linalg.norm(est[i] - tru[j])
                    if d >= cfg.cutoff:
                        ok = False
                        break
                    total += d ** cfg.order
                if not ok:
                    continue
                total += (c_pow / cfg.alpha) * (a + b - 2 * g)
                best = min(best, total)
    return best ** (1.0 / cfg.order)


def brute_force_nll(components, poisson_weights, poisson_means, poisson_covs,
                    floor, volume, truth):
    """Exhaustive PMB set density via subsets and permutations."""
    k, n = len(components), len(truth)
    lam_bar = floor * volume + sum(poisson_weights)

    def intensity(x):
        val = floor
        for w, m, P in zip(poisson_weights, poisson_means, poisson_covs):
            val += w * np.exp(log_gaussian(x, m, P))
        return val

    total = 0.0
    for g in range(min(k, n) + 1):
        for tru_idx in itertools.combinations(range(n), g):
            for comp_perm in itertools.permutations(range(k), g):
                weight = 1.0
                for j, i in zip(tru_idx, comp_perm):
                    r, mu, cov = components[i]
                    weight *= r * np.exp(log_gaussian(truth[j], mu, cov))
                for i in range(k):
                    if i not in comp_perm:
                        weight *= 1.0 - components[i][0]
                for j in range(n):
                    if j not in tru_idx:
                        weight *= intensity(truth[j])
                total += weight
    return lam_bar - np.log(total) if total > 0 else np.inf


def mb(*components):
    return FusionOutput([BernoulliComponent(r, np.asarray(m, float),
                                            np.asarray(P, float))
                         for r, m, P in components])


def no_ppp():
    return PoissonIntensity.empty()


def random_instance(rng, k, n):
    comps = []
    for _ in range(k):
        A = rng.normal(size=(4, 4))
        comps.append((rng.uniform(0.05, 0.95), rng.normal(scale=2.0, size=4),
                      A @ A.T + 0.5 * np.eye(4)))
    truth = rng.normal(scale=2.0, size=(n, 4))
    return comps, truth


class TestGospaExamples:
    def test_both_empty(self):
        rep = gospa(np.zeros((0, 2)), np.zeros((0, 2)))
        assert rep.total == 0.0

    def test_single_missed(self):
        rep = gospa(np.zeros((0, 2)), np.array([[0.0, 0.0]]))
        assert rep.missed == pytest.approx(1.0)
        assert rep.total == pytest.approx(1.0)
        assert rep.localization == 0.0 and rep.false == 0.0

    def test_mixed_decomposition(self):
        # brute-force-derived: one match at 0.5, one missed truth
        truth = np.array([[0.0, 0.0], [10.0, 0.0]])
        est = np.array([[0.5, 0.0]])
        rep = gospa(est, truth)
        assert rep.localization == pytest.approx(0.5)
        assert rep.missed == pytest.approx(1.0)
        assert rep.false == pytest.approx(0.0)
        assert rep.total == pytest.approx(1.5)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            GospaConfig(cutoff=-1.0)
        with pytest.raises(ValueError):
            GospaConfig(order=0.5)
        with pytest.raises(ValueError):
            GospaConfig(alpha=3.0)


class TestGospaOracle:
    def test_matches_brute_force(self):
        cfg = GospaConfig()
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = rng.integers(0, 6), rng.integers(0, 6)
            est = rng.uniform(-3.0, 3.0, size=(a, 2))
            tru = rng.uniform(-3.0, 3.0, size=(b, 2))
            rep = gospa(est, tru, cfg)
            assert rep.total == pytest.approx(
                brute_force_gospa(est, tru, cfg), abs=1e-12)
            assert rep.total == pytest.approx(
                rep.localization + rep.missed + rep.false, abs=1e-9)

    def test_metric_axioms(self):
        cfg = GospaConfig()
        rng = np.random.default_rng(1)
        for _ in range(100):
            sets = [rng.uniform(-3.0, 3.0, size=(rng.integers(0, 5), 2))
                    for _ in range(3)]
            X, Y, Z = sets
            assert gospa(X, X, cfg).total == pytest.approx(0.0, abs=1e-12)
            assert gospa(X, Y, cfg).total == pytest.approx(
                gospa(Y, X, cfg).total, abs=1e-12)
            dxy = gospa(X, Y, cfg).total
            dyz = gospa(Y, Z, cfg).total
            dxz = gospa(X, Z, cfg).total
            assert dxz <= dxy + dyz + 1e-9

    def test_removing_false_estimate_monotone(self):
        # append an estimate farther than the cutoff from every truth: it
        # can only be a false detection, and dropping it must not raise
        # the total
        cfg = GospaConfig()
        rng = np.random.default_rng(2)
        for _ in range(50):
            tru = rng.uniform(-3.0, 3.0, size=(rng.integers(1, 4), 2))
            est = rng.uniform(-3.0, 3.0, size=(rng.integers(0, 5), 2))
            far = np.array([[1e3, 1e3]])
            with_false = np.concatenate([est, far]) if len(est) else far
            before = gospa(with_false, tru, cfg).total
            after = gospa(est, tru, cfg).total
            assert after <= before + 1e-12
            assert before == pytest.approx(
                after + cfg.cutoff ** cfg.order / cfg.alpha, abs=1e-12)

    def test_position_only_slices_states(self):
        truth4 = np.array([[1.0, 2.0, 9.0, 9.0]])
        est4 = np.array([[1.0, 2.0, -9.0, -9.0]])
        rep = gospa(est4, truth4)
        assert rep.total == pytest.approx(0.0)


class TestNllExamples:
    def test_empty_truth_single_bernoulli(self):
        out = mb((0.3, np.zeros(4), np.eye(4)))
        rep = nll(out, no_ppp(), np.zeros((0, 4)))
        assert rep.total == pytest.approx(-np.log(0.7))
        assert rep.total == pytest.approx(
            rep.localization + rep.missed + rep.false, abs=1e-9)

    def test_perfect_match_limit(self):
        mu = np.array([1.0, -1.0, 0.5, 0.0])
        out = mb((1.0 - 1e-12, mu, np.eye(4)))
        rep = nll(out, no_ppp(), mu[None, :])
        expected = 0.5 * np.log((2 * np.pi) ** 4)
        assert rep.total == pytest.approx(expected, abs=1e-9)

    def test_exact_vs_best_two_components(self):
        rng = np.random.default_rng(3)
        comps, truth = random_instance(rng, 2, 1)
        out = mb(*comps)
        exact = nll(out, no_ppp(), truth,
                    NllConfig(exact_max_components=8))
        best = nll(out, no_ppp(), truth,
                   NllConfig(exact_max_components=0))
        assert exact.total <= best.total + 1e-12
        oracle = brute_force_nll(comps, [], [], [], 0.0, 1.0, truth)
        assert exact.total == pytest.approx(oracle, abs=1e-9)

    def test_zero_density_event(self):
        out = mb()
        with pytest.warns(RuntimeWarning):
            rep = nll(out, no_ppp(), np.zeros((1, 4)))
        assert np.isinf(rep.total)


class TestNllOracle:
    def test_matches_enumeration(self):
        rng = np.random.default_rng(4)
        for trial in range(100):
            k, n = rng.integers(0, 5), rng.integers(0, 5)
            comps, truth = random_instance(rng, k, n)
            floor = float(rng.uniform(0.001, 0.1))
            volume = float(rng.uniform(1.0, 50.0))
            ppp_w = rng.uniform(0.05, 0.3, size=rng.integers(0, 3))
            ppp_m = rng.normal(scale=2.0, size=(len(ppp_w), 4))
            ppp_c = np.stack([np.eye(4) * rng.uniform(0.5, 2.0)
                              for _ in ppp_w]) if len(ppp_w) else \
                np.zeros((0, 4, 4))
            poisson = PoissonIntensity(ppp_w, ppp_m, ppp_c)
            cfg = NllConfig(ppp_floor=floor, region_volume=volume)
            rep = nll(mb(*comps), poisson, truth, cfg)
            oracle = brute_force_nll(comps, ppp_w, ppp_m, ppp_c,
                                     floor, volume, truth)
            assert rep.total == pytest.approx(oracle, abs=1e-9)
            assert rep.total == pytest.approx(
                rep.localization + rep.missed + rep.false, abs=1e-9)

    def test_exact_below_best_association(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            k, n = rng.integers(1, 5), rng.integers(1, 5)
            comps, truth = random_instance(rng, k, n)
            cfg_exact = NllConfig(ppp_floor=0.01, region_volume=10.0)
            cfg_best = NllConfig(ppp_floor=0.01, region_volume=10.0,
                                 exact_max_components=0)
            exact = nll(mb(*comps), no_ppp(), truth, cfg_exact)
            best = nll(mb(*comps), no_ppp(), truth, cfg_best)
            assert exact.total <= best.total + 1e-12


class TestTunePpp:
    def make_batch(self, offset):
        rng = np.random.default_rng(6)
        outputs, truths = [], []
        for _ in range(5):
            truth = rng.normal(scale=2.0, size=(2, 4))
            comps = [(0.95, t + offset, 0.1 * np.eye(4)) for t in truth]
            outputs.append((mb(*comps), no_ppp()))
            truths.append(truth)
        return outputs, truths

    def test_perfect_coverage_lower_bound(self):
        outputs, truths = self.make_batch(offset=0.0)
        cfg = NllConfig(region_volume=100.0)
        phi = tune_ppp(outputs, truths, cfg)
        assert phi == pytest.approx(1e-6)

    def test_missed_objects_raise_floor(self):
        # constructed fixture: every output misses one truth object
        rng = np.random.default_rng(7)
        outputs, truths = [], []
        for _ in range(5):
            truth = rng.normal(scale=2.0, size=(2, 4))
            comps = [(0.95, truth[0], 0.1 * np.eye(4))]
            outputs.append((mb(*comps), no_ppp()))
            truths.append(truth)
        phi = tune_ppp(outputs, truths, NllConfig(region_volume=100.0))
        assert phi > 1e-6

    def test_single_candidate(self):
        outputs, truths = self.make_batch(offset=0.0)
        phi = tune_ppp(outputs, truths, NllConfig(region_volume=100.0),
                       grid=np.array([0.123]))
        assert phi == 0.123
