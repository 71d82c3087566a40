"""Key-rate bounds for weak coherent pulses with and without one weak decoy.

The ``_*_array`` helpers are the same formulas written with numpy so the
optimizer can evaluate whole parameter grids at once; the public functions
validate scalar inputs and delegate to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    Label,
    ObservedStatistics,
    ProtocolParams,
    binary_entropy,
    check_one_decoy_pair,
    h2,
    lower_confidence_gain,
)


@dataclass(frozen=True)
class SecurityBounds:
    """Outcome of the one-decoy analysis.

    ``e1_upper`` is NaN when ``q1_lower <= 0`` (no single-photon contribution
    can be certified, so there is nothing to bound).
    """

    q1_lower: float
    e1_upper: float
    q_nu_lower: float
    rate_lower: float
    secure: bool
    raw_rate: float = math.nan


@dataclass(frozen=True)
class KeyYield:
    rate_per_pulse: float
    key_length_bits: float
    rate_per_second: float


def _q1_lower_array(mu, nu, q_mu, e_mu, q_nu_lower, e0=0.5):
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    pref = mu**2 * np.exp(-mu) / (mu * nu - nu**2)
    bracket = (
        q_nu_lower * np.exp(nu)
        - q_mu * np.exp(mu) * nu**2 / mu**2
        - e_mu * q_mu * np.exp(mu) * (mu**2 - nu**2) / (e0 * mu**2)
    )
    return pref * bracket


def _gllp_rate_array(q, q_mu, e_mu, f_ec, q1, e1):
    return q * (-q_mu * f_ec * h2(e_mu) + q1 * (1 - h2(np.minimum(e1, 0.5))))


def single_photon_gain_lower(mu: float, nu: float, q_mu: float, e_mu: float, q_nu_lower: float, e0: float = 0.5) -> float:
    """Lower bound on the single-photon gain of the signal state.

    May be <= 0, in which case the decoy data certify no single-photon
    contribution at all.
    """
    check_one_decoy_pair(mu, nu)
    if not q_mu > 0:
        raise ValueError(f"q_mu must be positive, got {q_mu}")
    if not 0 <= e_mu <= 1:
        raise ValueError(f"e_mu must be in [0, 1], got {e_mu}")
    return float(_q1_lower_array(mu, nu, q_mu, e_mu, q_nu_lower, e0))


def single_photon_error_upper(e_mu: float, q_mu: float, q1_lower: float) -> float:
    """Upper bound on the single-photon error rate, ``E_mu Q_mu / Q1_lower``.

    Values of 1/2 or more are returned unchanged; the composed rates
    evaluate them as 1/2, which zeroes the single-photon term.
    """
    if not q1_lower > 0:
        raise ValueError(f"q1_lower must be positive, got {q1_lower}")
    return e_mu * q_mu / q1_lower


def key_rate_gllp(q: float, q_mu: float, e_mu: float, f_ec: float, q1: float, e1: float) -> float:
    """Raw (unclamped) secure bits per sent pulse from the GLLP expression."""
    return q * (-q_mu * f_ec * binary_entropy(e_mu) + q1 * (1 - binary_entropy(e1)))


def key_rate_lower_one_decoy(
    stats_signal: ObservedStatistics,
    stats_decoy: ObservedStatistics,
    params: ProtocolParams,
) -> SecurityBounds:
    """Finite-statistics lower bound on the key rate from signal and decoy data."""
    if stats_signal.intensity.label is not Label.SIGNAL or stats_decoy.intensity.label is not Label.DECOY:
        raise ValueError("expected one signal and one decoy statistics record")
    mu, nu = stats_signal.mean_photons, stats_decoy.mean_photons
    check_one_decoy_pair(mu, nu)
    if stats_decoy.n_detected == 0:
        raise ValueError("decoy intensity has no detections; its gain bound is undefined")
    q_mu, e_mu = stats_signal.gain, stats_signal.qber
    if q_mu <= 0:
        raise ValueError("signal intensity has no detections")

    q_nu_lower = lower_confidence_gain(stats_decoy.gain, stats_decoy.n_sent, params.u_alpha)
    q1 = single_photon_gain_lower(mu, nu, q_mu, e_mu, q_nu_lower, params.e0)
    return _assemble(q1, q_nu_lower, q_mu, e_mu, params)


# An error-rate bound above 1/2 certifies nothing; it is evaluated as 1/2 so
# that 1 - H2(e1) stays at 0 instead of rising again past the maximum.
def _assemble(q1: float, q_nu_lower: float, q_mu: float, e_mu: float, params: ProtocolParams) -> SecurityBounds:
    if q1 <= 0:
        return SecurityBounds(q1, math.nan, q_nu_lower, 0.0, False, math.nan)
    e1 = single_photon_error_upper(e_mu, q_mu, q1)
    raw = key_rate_gllp(params.q, q_mu, e_mu, params.f_ec, q1, min(e1, 0.5))
    secure = raw > 0
    return SecurityBounds(q1, e1, q_nu_lower, raw if secure else 0.0, secure, raw)


def multiphoton_probability(mu):
    """Probability that a Poisson(mu) pulse carries two or more photons."""
    mu = np.asarray(mu, dtype=float)
    # -expm1(-mu) - mu e^-mu, accurate for small mu
    out = -np.expm1(-mu) - mu * np.exp(-mu)
    return out if out.ndim else float(out)


def _nondecoy_rate_array(q_mu, e_mu, mu, params: ProtocolParams):
    q_mu = np.asarray(q_mu, dtype=float)
    q1 = q_mu - multiphoton_probability(mu)
    ok = q1 > 0
    q1s = np.where(ok, q1, 1.0)
    e1 = np.where(ok, e_mu * q_mu / q1s, 0.5)
    raw = _gllp_rate_array(params.q, q_mu, e_mu, params.f_ec, q1s, e1)
    out = np.where(ok & (raw > 0), raw, 0.0)
    return out if out.ndim else float(out)


def key_rate_nondecoy_gllp(q_mu: float, e_mu: float, mu: float, params: ProtocolParams) -> float:
    """Pessimistic GLLP rate with every multi-photon pulse assumed tagged.

    Uses ``Q1 >= Q_mu - P(n >= 2)`` and ``e1 <= E_mu Q_mu / Q1``; returns 0
    whenever the multi-photon probability swallows the whole gain.
    """
    if not q_mu > 0:
        raise ValueError(f"q_mu must be positive, got {q_mu}")
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    q1 = q_mu - multiphoton_probability(mu)
    if q1 <= 0:
        return 0.0
    e1 = min(e_mu * q_mu / q1, 0.5)
    return max(0.0, key_rate_gllp(params.q, q_mu, e_mu, params.f_ec, q1, e1))


def key_yield(bounds: SecurityBounds, n_total: int, session_seconds: float) -> KeyYield:
    """Final key length ``N * R`` and the corresponding bit rate."""
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    if not session_seconds > 0:
        raise ValueError("session_seconds must be positive")
    length = bounds.rate_lower * n_total
    return KeyYield(bounds.rate_lower, length, length / session_seconds)
