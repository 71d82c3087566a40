import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decoyqkd.channel import ChannelModel, gain_analytic, qber_analytic
from decoyqkd.core import IntensitySetting, ObservedStatistics
from decoyqkd.sim import (
    AttackKind,
    AttackModel,
    SessionConfig,
    SessionTally,
    calibrate_stealth_pns,
    detect_attack,
    pns_expected_gain,
    simulate_session,
)

from conftest import MU, NU

PAIR = (IntensitySetting("signal", MU, 0.9), IntensitySetting("decoy", NU, 0.1))


def sigma(p, n):
    return math.sqrt(p * (1 - p) / n)


def poisson_pns_gain(ch, mu, attack, nmax=60):
    """Brute-force photon-number sum of the PNS detection probability."""
    y0, eta = ch.y0, ch.eta
    b, m = attack.block_fraction_single, attack.forward_fraction_multi
    total, p = 0.0, math.exp(-mu)
    for n in range(nmax + 1):
        if n == 0:
            y = y0
        elif n == 1:
            t = 1.0 if attack.lossless_forward else eta
            y = (1 - b) * (1 - (1 - y0) * (1 - t)) + b * y0
        else:
            fwd = 1.0 if attack.lossless_forward else 1 - (1 - y0) * (1 - eta) ** n
            y = m * fwd + (1 - m) * y0
        total += p * y
        p *= mu / (n + 1)
    return total


def test_config_validation(fitted_channel):
    with pytest.raises(ValueError):
        SessionConfig(0, PAIR, fitted_channel)
    with pytest.raises(ValueError):
        SessionConfig(10, (IntensitySetting("signal", MU, 0.9),), fitted_channel)
    with pytest.raises(ValueError):
        SessionConfig(10, (IntensitySetting("signal", MU, 0.5), IntensitySetting("signal", NU, 0.5)), fitted_channel)
    with pytest.raises(ValueError):
        SessionConfig(10, PAIR, fitted_channel, basis_match_prob=0)
    with pytest.raises(ValueError):
        AttackModel(block_fraction_single=1.5)


def test_lossless_limit():
    cfg = SessionConfig(10**6, (IntensitySetting("signal", 0.8, 1.0),), ChannelModel(), rng_seed=7)
    s = simulate_session(cfg).stats[0]
    expected = -math.expm1(-0.8)
    assert abs(s.gain - expected) < 3 * sigma(expected, s.n_sent)
    assert s.n_error == 0 and s.qber == 0.0


def test_fitted_channel_matches_analytic(fitted_channel):
    tally = simulate_session(SessionConfig(10**6, PAIR, fitted_channel, rng_seed=42))
    for s in tally.stats:
        q, e = gain_analytic(fitted_channel, s.mean_photons), qber_analytic(fitted_channel, s.mean_photons)
        assert abs(s.gain - q) < 3 * sigma(q, s.n_sent)
        assert abs(s.qber - e) < 3 * sigma(e, s.n_detected)


def test_deterministic_and_worker_invariant(fitted_channel):
    cfg = SessionConfig(300_001, PAIR, fitted_channel, rng_seed=123)
    a = simulate_session(cfg)
    assert simulate_session(cfg) == a
    assert simulate_session(cfg, n_workers=3) == a
    assert simulate_session(cfg, n_workers=8) == a
    assert simulate_session(SessionConfig(300_001, PAIR, fitted_channel, rng_seed=124)) != a


def test_attack_path_is_deterministic(fitted_channel):
    atk = calibrate_stealth_pns(fitted_channel, MU)
    cfg = SessionConfig(200_000, PAIR, fitted_channel, atk, rng_seed=5)
    assert simulate_session(cfg) == simulate_session(cfg, n_workers=4)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(0.0, 1e-2), st.floats(0.0, 0.3), st.integers(0, 2**32))
def test_conservation(eta, y0, e_det, seed):
    ch = ChannelModel(eta_receiver=eta, y0=y0, e_det=e_det)
    t = simulate_session(SessionConfig(20_000, PAIR, ch, rng_seed=seed))
    assert t.n_pulses == 20_000
    for s, sift, sift_err in zip(t.stats, t.sifted_lengths, t.sifted_errors):
        assert 0 <= s.n_error <= s.n_detected <= s.n_sent
        assert 0 <= sift_err <= sift <= s.n_detected
        assert sift_err <= s.n_error
    assert 0 <= t.double_click_errors <= t.double_click_count <= sum(s.n_detected for s in t.stats)


def test_double_clicks_are_random_bits():
    ch = ChannelModel(eta_receiver=1.0, y0=0.0, e_det=0.3)
    t = simulate_session(SessionConfig(200_000, (IntensitySetting("signal", 0.8, 1.0),), ch, rng_seed=3))
    n = t.double_click_count
    assert n > 10_000
    assert abs(t.double_click_errors / n - 0.5) < 3 * sigma(0.5, n)


def test_sifting_keeps_half(fitted_channel):
    t = simulate_session(SessionConfig(10**6, PAIR, fitted_channel, rng_seed=9))
    for s, sift in zip(t.stats, t.sifted_lengths):
        assert abs(sift / s.n_detected - 0.5) < 3 * sigma(0.5, s.n_detected)


def test_missing_intensity_is_an_error():
    ch = ChannelModel(eta_receiver=0.1)
    tiny = (IntensitySetting("signal", 0.8, 1 - 1e-9), IntensitySetting("decoy", 0.1, 1e-9))
    with pytest.raises(ValueError):
        simulate_session(SessionConfig(100, tiny, ch))


def test_pns_noop_equals_channel_gain(fitted_channel):
    noop = AttackModel(AttackKind.PNS, 0.0, False)
    for mu in (0.0, NU, MU, 1.5):
        assert pns_expected_gain(fitted_channel, mu, noop) == pytest.approx(gain_analytic(fitted_channel, mu), rel=1e-12)


def test_pns_full_block_lossless():
    ch = ChannelModel(eta_receiver=0.01)
    atk = AttackModel(AttackKind.PNS, 1.0, True)
    # mpmath Poisson sum over n >= 2 at mu = 0.12
    assert pns_expected_gain(ch, 0.12, atk) == pytest.approx(6.649110876783583e-3, rel=1e-12)
    assert pns_expected_gain(ch, 0.12, atk) == pytest.approx(poisson_pns_gain(ch, 0.12, atk), rel=1e-12)


@settings(max_examples=200)
@given(st.floats(1e-4, 1.0), st.floats(0.0, 1e-2), st.floats(0.0, 1.5), st.floats(0.0, 1.0), st.booleans(),
       st.floats(0.0, 1.0))
def test_pns_closed_form_matches_poisson_sum(eta, y0, mu, b, lossless, m):
    ch = ChannelModel(eta_receiver=eta, y0=y0)
    atk = AttackModel(AttackKind.PNS, b, lossless, m)
    assert pns_expected_gain(ch, mu, atk) == pytest.approx(poisson_pns_gain(ch, mu, atk), rel=1e-10, abs=1e-15)


def test_pns_monte_carlo_matches_closed_form():
    ch = ChannelModel(eta_receiver=0.01, y0=1e-5)
    atk = AttackModel(AttackKind.PNS, 1.0, True)
    t = simulate_session(SessionConfig(10**6, PAIR, ch, atk, rng_seed=11))
    for s in t.stats:
        q = pns_expected_gain(ch, s.mean_photons, atk)
        assert abs(s.gain - q) < 3 * sigma(q, s.n_sent)


def test_stealth_calibration_preserves_signal_gain(fitted_channel):
    atk = calibrate_stealth_pns(fitted_channel, MU)
    assert pns_expected_gain(fitted_channel, MU, atk) == pytest.approx(gain_analytic(fitted_channel, MU), rel=1e-12)
    # On this channel blocking every single photon is not enough, so Eve also
    # drops most multi-photon pulses.
    assert atk.block_fraction_single == 1.0
    assert 0 < atk.forward_fraction_multi < 0.1
    assert pns_expected_gain(fitted_channel, NU, atk) < 0.3 * gain_analytic(fitted_channel, NU)


def test_stealth_calibration_block_only():
    ch = ChannelModel(eta_receiver=0.3, y0=1e-6)
    atk = calibrate_stealth_pns(ch, 0.5)
    assert 0 < atk.block_fraction_single < 1 and atk.forward_fraction_multi == 1.0
    assert pns_expected_gain(ch, 0.5, atk) == pytest.approx(gain_analytic(ch, 0.5), rel=1e-12)


def test_stealth_calibration_on_lossless_link_is_noop():
    atk = calibrate_stealth_pns(ChannelModel(eta_receiver=1.0), 0.5, lossless_forward=False)
    assert atk.block_fraction_single == 0.0 and atk.forward_fraction_multi == 1.0


def test_detect_attack_clean_and_anomalous(fitted_channel):
    clean = simulate_session(SessionConfig(10**6, PAIR, fitted_channel, rng_seed=1))
    assert detect_attack(clean, fitted_channel, 5.0).label == "clean"

    atk = calibrate_stealth_pns(fitted_channel, MU)
    hit = simulate_session(SessionConfig(10**6, PAIR, fitted_channel, atk, rng_seed=1))
    v = detect_attack(hit, fitted_channel, 5.0)
    assert v.anomalous and v.label == "anomalous"
    assert v.z_gain["decoy"] < -5
    assert abs(v.z_gain["signal"]) < 5


def test_detect_attack_zero_when_exact(fitted_channel):
    n = 10**15
    stats = tuple(
        ObservedStatistics.from_rates(s, n, gain_analytic(fitted_channel, s.mean_photons),
                                      qber_analytic(fitted_channel, s.mean_photons))
        for s in PAIR
    )
    v = detect_attack(SessionTally(stats, 0, 0, (0, 0), (0, 0)), fitted_channel, 0.5)
    assert not v.anomalous
    assert all(abs(z) < 1e-3 for z in (*v.z_gain.values(), *v.z_qber.values()))


def test_detect_attack_rejects_single_intensity(fitted_channel):
    s = ObservedStatistics(IntensitySetting("signal", MU), 100, 1, 0)
    with pytest.raises(ValueError):
        detect_attack(SessionTally((s,), 0, 0, (0,), (0,)), fitted_channel, 5.0)


def test_decoy_z_grows_like_sqrt_n(fitted_channel):
    atk = calibrate_stealth_pns(fitted_channel, MU)
    q0 = gain_analytic(fitted_channel, NU)
    q1 = pns_expected_gain(fitted_channel, NU, atk)

    def z(n):
        return (q1 - q0) / sigma(q0, n)

    assert z(4 * 10**5) / z(10**5) == pytest.approx(2.0, rel=1e-12)
    zs = []
    for n in (10**5, 4 * 10**5, 16 * 10**5):
        t = simulate_session(SessionConfig(n, PAIR, fitted_channel, atk, rng_seed=2))
        zs.append(detect_attack(t, fitted_channel, 5.0).z_gain["decoy"])
    assert zs[0] > zs[1] > zs[2]
    assert zs[2] / zs[0] == pytest.approx(4.0, rel=0.25)


def test_decoy_z_exceeds_ten_with_larger_decoy_share(fitted_channel):
    # Twice the decoy share is enough to clear |z| > 10 at a million pulses.
    pair = (IntensitySetting("signal", MU, 0.8), IntensitySetting("decoy", NU, 0.2))
    atk = calibrate_stealth_pns(fitted_channel, MU)
    t = simulate_session(SessionConfig(10**6, pair, fitted_channel, atk, rng_seed=42))
    v = detect_attack(t, fitted_channel, 10.0)
    assert v.anomalous and v.z_gain["decoy"] < -10
