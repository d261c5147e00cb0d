"""Channel generator tests: path statistics, synthesis closed forms, shard IO."""
import math

import numpy as np
import pytest

from pilotmae.channel import (SPEED_OF_LIGHT, ChannelSample, PathSet,
                              ScenarioConfig, generate_samples, pathloss_db,
                              sample_rng, sample_scene, steering_matrix,
                              synthesize_channel)
from pilotmae.shards import ShardError, read_shard, write_shard

CFG = ScenarioConfig()


def draw_scene(seed, sample_id=0, cfg=CFG):
    return sample_scene(cfg, sample_rng(cfg.seed + seed, sample_id))


class TestSampleScene:
    def test_los_direct_path_power_fraction(self):
        cfg = ScenarioConfig(los_prob=1.0, rician_k_db_range=(8.0, 8.0))
        k_lin = 10 ** 0.8
        for s in range(10):
            ps = sample_scene(cfg, sample_rng(s, 0))
            frac = abs(ps.gains[0]) ** 2 / np.sum(np.abs(ps.gains) ** 2)
            assert frac >= k_lin / (k_lin + 1.0) - 1e-6
            assert ps.delays_s[0] == 0.0

    def test_nlos_has_no_zero_delay_dominant_path(self):
        cfg = ScenarioConfig(los_prob=0.0)
        for s in range(10):
            ps = sample_scene(cfg, sample_rng(s, 1))
            assert not ps.los
            assert ps.delays_s.min() > 0.0

    def test_doppler_bound(self):
        cfg = ScenarioConfig(speed_range_mps=(30.0, 30.0))
        bound = 30.0 * cfg.carrier_hz / SPEED_OF_LIGHT
        for s in range(20):
            ps = sample_scene(cfg, sample_rng(s, 2))
            assert np.abs(ps.dopplers_hz).max() <= bound + 1e-9

    def test_unit_total_power_and_cp_delays(self):
        for s in range(10):
            ps = draw_scene(s)
            assert np.sum(np.abs(ps.gains) ** 2) == pytest.approx(1.0, abs=1e-9)
            assert ps.delays_s.max() <= CFG.cp_duration_s + 1e-12

    def test_empty_path_set_rejected(self):
        with pytest.raises(ValueError):
            PathSet(gains=np.array([]), delays_s=np.array([]),
                    dopplers_hz=np.array([]), azimuths_rad=np.array([]),
                    elevations_rad=np.array([]), los=False, speed_mps=10.0,
                    distance_m=100.0, shadow_db=0.0, carrier_hz=3.5e9)


def single_path(az=0.0, el=0.0, nu=0.0, tau=0.0, speed=10.0):
    return PathSet(gains=np.array([1.0 + 0.0j]), delays_s=np.array([tau]),
                   dopplers_hz=np.array([nu]), azimuths_rad=np.array([az]),
                   elevations_rad=np.array([el]), los=True, speed_mps=speed,
                   distance_m=100.0, shadow_db=0.0, carrier_hz=3.5e9)


class TestSynthesize:
    def test_single_broadside_static_path(self):
        ps = single_path()
        s = synthesize_channel(ps, CFG)
        # constant over time and frequency; spatial vector = amp * g0 * steering
        assert np.abs(s.H - s.H[0, :, 0][None, :, None]).max() < 1e-6
        amp = 10 ** (s.large_scale_db / 20.0)
        steer = steering_matrix(np.array([0.0]), np.array([0.0]), CFG.n_h, CFG.n_v)[0]
        np.testing.assert_allclose(s.H[3, :, 7], amp * steer, rtol=1e-5)

    def test_single_path_frequency_phase_ramp(self):
        tau = 1e-6
        s = synthesize_channel(single_path(tau=tau), CFG)
        # frequency autocorrelation at lag of one subcarrier has phase -2 pi tau df
        r = np.vdot(s.H[:, :, :-1], s.H[:, :, 1:])
        expected = -2.0 * math.pi * tau * CFG.subcarrier_spacing_hz
        assert np.angle(r) == pytest.approx(expected, abs=1e-5)

    def test_two_path_shared_doppler_factorizes(self):
        nu = 100.0
        ps = PathSet(gains=np.array([0.8, 0.6 * 1j]),
                     delays_s=np.array([0.0, 0.8e-6]),
                     dopplers_hz=np.array([nu, nu]),
                     azimuths_rad=np.array([0.3, -0.5]),
                     elevations_rad=np.array([0.05, -0.1]),
                     los=True, speed_mps=10.0, distance_m=100.0, shadow_db=0.0,
                     carrier_hz=3.5e9)
        s = synthesize_channel(ps, CFG)
        H = s.H.astype(np.complex128)
        # empirical joint autocorrelation over (time lag, frequency lag)
        def corr(dt, df):
            a = H[dt:, :, df:]
            b = H[:H.shape[0] - dt, :, :H.shape[2] - df]
            return np.vdot(b, a) / math.sqrt(np.vdot(a, a).real * np.vdot(b, b).real)
        r_joint = abs(corr(2, 3))
        r_t = abs(corr(2, 0))
        r_f = abs(corr(0, 3))
        assert abs(r_joint - r_t * r_f) < 0.05

    def test_dual_carrier_resynthesis(self):
        ps = draw_scene(3)
        lo = synthesize_channel(ps, CFG, carrier_hz=3.5e9)
        hi = synthesize_channel(ps, CFG, carrier_hz=28e9)
        shift = 20.0 * math.log10(28e9 / 3.5e9)
        assert hi.large_scale_db == pytest.approx(lo.large_scale_db - shift, abs=1e-9)
        assert hi.carrier_hz == 28e9

    def test_steering_is_unit_modulus(self):
        u = steering_matrix(np.array([0.4]), np.array([-0.2]), 8, 4)
        np.testing.assert_allclose(np.abs(u), 1.0, atol=1e-12)


class TestDatasetProperties:
    def test_large_scale_span_at_least_40db(self):
        samples = generate_samples(ScenarioConfig(seed=5), 200)
        db = np.array([s.large_scale_db for s in samples])
        assert db.max() - db.min() >= 40.0

    def test_reproducible_per_sample_id(self):
        a = generate_samples(ScenarioConfig(seed=9), 5, start_id=10)
        b = generate_samples(ScenarioConfig(seed=9), 3, start_id=12)
        np.testing.assert_array_equal(a[2].H, b[0].H)
        assert a[2].los == b[0].los

    def test_autocorrelation_decay_signs(self):
        def mean_abs_lag_corr(samples, axis, lag):
            tot = 0.0
            for s in samples:
                H = np.moveaxis(s.H.astype(np.complex128), axis, 0)
                a, b = H[lag:], H[:H.shape[0] - lag]
                tot += abs(np.vdot(b, a)) / math.sqrt(
                    np.vdot(a, a).real * np.vdot(b, b).real)
            return tot / len(samples)

        slow = generate_samples(ScenarioConfig(seed=2, speed_range_mps=(8.0, 8.0)), 40)
        fast = generate_samples(ScenarioConfig(seed=2, speed_range_mps=(30.0, 30.0)), 40)
        assert mean_abs_lag_corr(fast, 0, 4) < mean_abs_lag_corr(slow, 0, 4)

        narrow = generate_samples(ScenarioConfig(seed=3, delay_spread_s=50e-9), 40)
        wide = generate_samples(ScenarioConfig(seed=3, delay_spread_s=800e-9), 40)
        assert mean_abs_lag_corr(wide, 2, 8) < mean_abs_lag_corr(narrow, 2, 8)


class TestShards:
    def test_round_trip_bitwise(self, tmp_path):
        samples = generate_samples(ScenarioConfig(seed=1), 10)
        p = tmp_path / "a.pwch"
        assert write_shard(samples, p) == 10
        back = read_shard(p)
        assert len(back) == 10
        for s, b in zip(samples, back):
            np.testing.assert_array_equal(s.H, b.H)
            assert (s.sample_id, s.los) == (b.sample_id, b.los)
            assert np.float32(s.speed_mps) == np.float32(b.speed_mps)
            assert s.large_scale_db == pytest.approx(b.large_scale_db, rel=1e-6)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.pwch"
        samples = generate_samples(ScenarioConfig(seed=1), 2)
        write_shard(samples, p)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(ShardError, match="bad magic"):
            read_shard(p)

    def test_dim_mismatch(self, tmp_path):
        p = tmp_path / "c.pwch"
        write_shard(generate_samples(ScenarioConfig(seed=1), 2), p)
        with pytest.raises(ShardError, match="dims"):
            read_shard(p, expect_dims=(14, 32, 64))

    def test_truncation_detected(self, tmp_path):
        p = tmp_path / "d.pwch"
        write_shard(generate_samples(ScenarioConfig(seed=1), 3), p)
        raw = p.read_bytes()
        p.write_bytes(raw[:-17])
        with pytest.raises(ShardError, match="truncated"):
            read_shard(p)
