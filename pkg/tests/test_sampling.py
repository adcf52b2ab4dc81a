import numpy as np
import pytest

from nsnerf import sampling as S
from nsnerf.errors import ConfigError, DomainError


def rng(seed=0):
    return np.random.default_rng(seed)


class TestNearSurface:
    def test_left_edges_with_zero_draws(self):
        cfg = S.NearSurfaceConfig(alpha=1.0, n_samples=4, near_clip=0.0)
        t, hi = S.near_surface_batch([1.0], cfg, rng(), u=0.0)
        np.testing.assert_allclose(t[0], [0.0, 0.5, 1.0, 1.5])
        assert hi[0] == 2.0

    def test_clip_shrinks_bins(self):
        cfg = S.NearSurfaceConfig(alpha=1.0, n_samples=4, near_clip=0.5)
        t, hi = S.near_surface_batch([1.0], cfg, rng(), u=0.0)
        np.testing.assert_allclose(t[0], [0.5, 0.875, 1.25, 1.625])
        assert hi[0] == 2.0

    def test_single_sample(self):
        cfg = S.NearSurfaceConfig(alpha=0.5, n_samples=1)
        s = S.near_surface_samples(3.0, cfg, rng(1))
        assert len(s) == 1 and 2.5 <= s.positions[0] < 3.5
        assert s.deltas[0] == S.FAR_DELTA

    def test_non_positive_depth_rejected(self):
        cfg = S.NearSurfaceConfig(alpha=0.5, n_samples=4)
        with pytest.raises(DomainError):
            S.near_surface_samples(0.0, cfg, rng())
        with pytest.raises(DomainError):
            S.near_surface_samples(-1.0, cfg, rng())

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            S.NearSurfaceConfig(alpha=0.0, n_samples=4)
        with pytest.raises(ConfigError):
            S.NearSurfaceConfig(alpha=1.0, n_samples=0)

    def test_one_sample_per_bin_and_sorted(self):
        cfg = S.NearSurfaceConfig(alpha=0.4, n_samples=8)
        d = rng(2).uniform(0.1, 5, 500)
        t, hi = S.near_surface_batch(d, cfg, rng(3))
        lo = np.maximum(d - 0.4, cfg.near_clip)
        w = (hi - lo) / 8
        k = np.floor((t - lo[:, None]) / w[:, None])
        np.testing.assert_array_equal(k, np.broadcast_to(np.arange(8), k.shape))
        assert np.all(np.diff(t, axis=1) > 0)

    def test_shared_gamma_uniform_spacing(self):
        cfg = S.NearSurfaceConfig(alpha=1.0, n_samples=6, shared_gamma=True)
        t, _ = S.near_surface_batch(np.full(50, 3.0), cfg, rng(4))
        np.testing.assert_allclose(np.diff(t, axis=1), 2.0 / 6, atol=1e-12)

    def test_deterministic_with_seed(self):
        cfg = S.NearSurfaceConfig(alpha=1.0, n_samples=16)
        a, _ = S.near_surface_batch([2.0, 3.0], cfg, rng(9))
        b, _ = S.near_surface_batch([2.0, 3.0], cfg, rng(9))
        np.testing.assert_array_equal(a, b)


class TestFullRange:
    def test_left_edges(self):
        cfg = S.FullRangeConfig(2.0, 6.0, 4)
        s = S.full_range_stratified(cfg, rng(), u=0.0)
        np.testing.assert_allclose(s.positions, [2, 3, 4, 5])
        assert s.t_end == 6.0

    def test_range_scale(self):
        cfg = S.FullRangeConfig(2.0, 6.0, 4, range_scale=2.0)
        assert cfg.t_end == 10.0
        s = S.full_range_stratified(cfg, rng(), u=0.0)
        np.testing.assert_allclose(s.positions, [2, 4, 6, 8])

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            S.FullRangeConfig(6.0, 2.0, 4)
        with pytest.raises(ConfigError):
            S.FullRangeConfig(2.0, 6.0, 4, range_scale=0.5)

    def test_bounds(self):
        cfg = S.FullRangeConfig(2.0, 6.0, 32, 4.0)
        t, _ = S.full_range_batch(1000, cfg, rng(5))
        assert t.min() >= 2.0 and t.max() < cfg.t_end
        assert np.all(np.diff(t, axis=1) > 0)


class TestSampleSet:
    def test_deltas(self):
        s = S.SampleSet.from_positions([1.0, 1.5, 3.0])
        np.testing.assert_allclose(s.deltas, [0.5, 1.5, S.FAR_DELTA])

    def test_rejects_unsorted_and_non_positive(self):
        with pytest.raises(DomainError):
            S.SampleSet.from_positions([1.0, 1.0])
        with pytest.raises(DomainError):
            S.SampleSet.from_positions([0.0, 1.0])

    def test_empty(self):
        s = S.SampleSet.empty()
        assert len(s) == 0


class TestInverseCdf:
    def test_two_bin_occupancy(self):
        t = S.inverse_cdf_batch([[0.0, 1.0, 2.0]], [[1.0, 3.0]], 4000, rng(6))
        assert (t >= 1.0).mean() == pytest.approx(0.75, abs=0.02)

    def test_zero_weight_bin_never_chosen(self):
        t = S.inverse_cdf_batch([[0.0, 1.0, 2.0, 3.0]], [[1.0, 0.0, 1.0]], 2000, rng(7))
        assert not np.any((t >= 1.0) & (t < 2.0))

    def test_all_zero_weights_flat(self):
        t = S.inverse_cdf_batch([[0.0, 1.0, 2.0]], [[0.0, 0.0]], 4000, rng(8))
        assert (t >= 1.0).mean() == pytest.approx(0.5, abs=0.02)
        assert np.all((t >= 0) & (t <= 2))

    def test_rejects_negative_and_mismatch(self):
        with pytest.raises(DomainError):
            S.inverse_cdf_batch([[0.0, 1.0, 2.0]], [[1.0, -1.0]], 4, rng())
        with pytest.raises(DomainError):
            S.inverse_cdf_batch([[0.0, 1.0]], [[1.0, 1.0]], 4, rng())

    def test_resample_merges_sorted(self):
        coarse = S.SampleSet.from_positions([1.0, 2.0, 3.0], t_end=4.0)
        out = S.inverse_cdf_resample(coarse, [0.0, 1.0, 0.0], 5, rng(10))
        assert len(out) == 8
        assert np.all(np.diff(out.positions) > 0)
        fine = np.setdiff1d(out.positions, coarse.positions)
        assert np.all((fine >= 2.0) & (fine < 3.0))

    def test_resample_last_bin_uses_t_end(self):
        coarse = S.SampleSet.from_positions([1.0, 2.0], t_end=5.0)
        out = S.inverse_cdf_resample(coarse, [0.0, 1.0], 50, rng(11))
        fine = np.setdiff1d(out.positions, coarse.positions)
        assert fine.max() > 4.0 and fine.max() < 5.0

    def test_resample_zero_fine(self):
        coarse = S.SampleSet.from_positions([1.0, 2.0], t_end=3.0)
        out = S.inverse_cdf_resample(coarse, [1.0, 1.0], 0, rng())
        np.testing.assert_array_equal(out.positions, coarse.positions)

    def test_cdf_matches_weights(self):
        w = np.array([[0.1, 0.5, 0.0, 2.0, 0.4]])
        edges = np.arange(6.0)[None]
        t = S.inverse_cdf_batch(edges, w, 20000, rng(12))
        hist = np.bincount(np.floor(t[0]).astype(int), minlength=5) / 20000
        np.testing.assert_allclose(hist, w[0] / w.sum(), atol=0.01)


def test_million_near_surface_draws_in_bounds():
    cfg = S.NearSurfaceConfig(alpha=0.5, n_samples=32)
    r = rng(13)
    d = r.uniform(0.05, 6.0, 1_000_000 // 32)
    t, hi = S.near_surface_batch(d, cfg, r)
    lo = np.maximum(d - cfg.alpha, cfg.near_clip)
    assert t.size >= 1_000_000 - 32
    assert np.all(t >= lo[:, None]) and np.all(t <= hi[:, None])
