"""Analytic source + fiber + detector model.

A phase-randomised weak coherent source emits Poisson(mu) photons. Each
photon independently survives fiber and receiver with the overall
transmittance ``eta``; a background click fires with probability ``y0``.
A detected signal photon is wrong with probability ``e_det`` and a
background click is wrong half the time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .bounds import (
    SecurityBounds,
    _assemble,
    _gllp_rate_array,
    _nondecoy_rate_array,
    _q1_lower_array,
    key_rate_gllp,
)
from .core import VACUUM_ERROR, ObservedStatistics, ProtocolParams, check_one_decoy_pair, lower_confidence_gain

DEFAULT_ALPHA_DB_PER_KM = 0.21


class Protocol(str, enum.Enum):
    ONE_DECOY = "one-decoy"
    NON_DECOY = "non-decoy"
    PERFECT_DECOY = "perfect-decoy"


class FitError(ValueError):
    """Measurements cannot be reproduced by any physical channel of this model."""


@dataclass(frozen=True)
class ChannelModel:
    alpha_db_per_km: float = DEFAULT_ALPHA_DB_PER_KM
    distance_km: float = 0.0
    eta_receiver: float = 1.0
    y0: float = 0.0
    e_det: float = 0.0
    e0: float = VACUUM_ERROR

    def __post_init__(self):
        if not self.alpha_db_per_km >= 0:
            raise ValueError(f"alpha_db_per_km must be >= 0, got {self.alpha_db_per_km}")
        if not self.distance_km >= 0:
            raise ValueError(f"distance_km must be >= 0, got {self.distance_km}")
        if not 0 < self.eta_receiver <= 1:
            raise ValueError(f"eta_receiver must be in (0, 1], got {self.eta_receiver}")
        if not 0 <= self.y0 < 1:
            raise ValueError(f"y0 must be in [0, 1), got {self.y0}")
        if not 0 <= self.e_det < 0.5:
            raise ValueError(f"e_det must be in [0, 0.5), got {self.e_det}")
        if self.e0 != VACUUM_ERROR:
            raise ValueError(f"e0 is fixed at 0.5, got {self.e0}")

    @property
    def eta(self) -> float:
        return overall_transmittance(self)

    def at_distance(self, distance_km: float) -> "ChannelModel":
        return replace(self, distance_km=distance_km)

    def to_dict(self) -> dict:
        return {
            "alpha_db_per_km": self.alpha_db_per_km,
            "distance_km": self.distance_km,
            "eta_receiver": self.eta_receiver,
            "y0": self.y0,
            "e_det": self.e_det,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelModel":
        known = {"alpha_db_per_km", "distance_km", "eta_receiver", "y0", "e_det", "e0"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown channel fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


def fiber_transmittance(alpha_db_per_km, distance_km):
    return 10.0 ** (-np.asarray(alpha_db_per_km) * np.asarray(distance_km) / 10.0)


def overall_transmittance(ch: ChannelModel) -> float:
    return float(ch.eta_receiver * fiber_transmittance(ch.alpha_db_per_km, ch.distance_km))


def n_photon_yield(ch: ChannelModel, n: int) -> float:
    """Detection probability given exactly ``n`` photons were emitted."""
    if n < 0:
        raise ValueError("photon number must be >= 0")
    return 1.0 - (1.0 - ch.y0) * (1.0 - ch.eta) ** n


def _gain(eta, y0, mu):
    # 1 - (1 - y0) exp(-eta mu), written to keep precision when eta*mu is tiny
    return y0 - (1.0 - y0) * np.expm1(-np.asarray(eta) * mu)


def _error_gain(eta, y0, e_det, mu, e0=VACUUM_ERROR):
    return e0 * y0 - e_det * np.expm1(-np.asarray(eta) * mu) * (1.0 - y0)


def gain_analytic(ch: ChannelModel, mu: float) -> float:
    """Expected gain of a Poisson(mu) pulse: ``1 - (1 - y0) exp(-eta mu)``."""
    if not mu >= 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    return float(_gain(ch.eta, ch.y0, mu))


def qber_analytic(ch: ChannelModel, mu: float) -> float:
    if not mu >= 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    q = gain_analytic(ch, mu)
    if q <= 0:
        raise ValueError("QBER undefined: the channel has zero gain at this intensity")
    return float(_error_gain(ch.eta, ch.y0, ch.e_det, mu, ch.e0)) / q


@dataclass(frozen=True)
class ChannelFit:
    """Fitted channel plus the mismatch of the decoy QBER, which the fit does not use."""

    channel: ChannelModel
    eta_total: float
    decoy_qber_predicted: float
    decoy_qber_residual: float


def fit_channel(
    stats_signal: ObservedStatistics,
    stats_decoy: ObservedStatistics,
    distance_km: float,
    alpha_db_per_km: float = DEFAULT_ALPHA_DB_PER_KM,
) -> ChannelFit:
    """Recover ``(eta, y0, e_det)`` from signal and decoy measurements.

    The two gain equations ``1 - Q = (1 - y0) exp(-eta x)`` for x in
    ``{mu, nu}`` divide to ``exp(eta (mu - nu)) = (1 - Q_nu) / (1 - Q_mu)``,
    which is solved exactly for eta; y0 follows from either equation and
    e_det from the signal QBER. The total eta is split into fiber and
    receiver parts using ``alpha_db_per_km`` and ``distance_km``.
    """
    mu, nu = stats_signal.mean_photons, stats_decoy.mean_photons
    check_one_decoy_pair(mu, nu)
    q_mu, q_nu = stats_signal.gain, stats_decoy.gain
    if q_mu <= 0 or q_nu <= 0:
        raise FitError("both gains must be positive")
    if q_nu >= q_mu or q_mu >= 1:
        raise FitError(f"gains are not increasing in intensity (Q_nu={q_nu}, Q_mu={q_mu})")

    eta = (math.log1p(-q_nu) - math.log1p(-q_mu)) / (mu - nu)
    y0 = -math.expm1(eta * mu + math.log1p(-q_mu))
    if y0 < 0 or eta > 1:
        raise FitError(f"measurements imply unphysical parameters (eta={eta:.6g}, y0={y0:.6g})")

    click_signal = -math.expm1(-eta * mu) * (1.0 - y0)
    e_det = (stats_signal.qber * q_mu - VACUUM_ERROR * y0) / click_signal
    if not 0 <= e_det < 0.5:
        raise FitError(f"signal QBER implies e_det={e_det:.6g} outside [0, 0.5)")

    eta_rx = eta / float(fiber_transmittance(alpha_db_per_km, distance_km))
    if eta_rx > 1:
        raise FitError(f"receiver efficiency {eta_rx:.6g} > 1; fiber loss assumption too large")

    ch = ChannelModel(alpha_db_per_km, distance_km, eta_rx, y0, e_det)
    e_nu = qber_analytic(ch, nu)
    return ChannelFit(ch, ch.eta, e_nu, stats_decoy.qber - e_nu)


def single_photon_gain_exact(ch: ChannelModel, mu: float) -> tuple[float, float]:
    """Model-exact single-photon gain and error rate of the signal state."""
    eta = ch.eta
    y1 = ch.y0 + eta * (1.0 - ch.y0)
    q1 = mu * math.exp(-mu) * y1
    e1 = (ch.e0 * ch.y0 + ch.e_det * eta * (1.0 - ch.y0)) / y1
    return q1, e1


def perfect_decoy_rate(ch: ChannelModel, mu: float, params: ProtocolParams) -> float:
    """Rate with exactly known single-photon gain and error (infinite data, infinite decoys)."""
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    q_mu = gain_analytic(ch, mu)
    e_mu = qber_analytic(ch, mu)
    q1, e1 = single_photon_gain_exact(ch, mu)
    return max(0.0, key_rate_gllp(params.q, q_mu, e_mu, params.f_ec, q1, min(e1, 0.5)))


def one_decoy_bounds(
    ch: ChannelModel,
    mu: float,
    nu: float,
    decoy_fraction: float,
    n_total: int,
    params: ProtocolParams,
) -> SecurityBounds:
    """One-decoy bounds fed with the model's expected (noise-free) statistics."""
    check_one_decoy_pair(mu, nu)
    if not 0 < decoy_fraction < 1:
        raise ValueError(f"decoy_fraction must be in (0, 1), got {decoy_fraction}")
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    q_mu, e_mu = gain_analytic(ch, mu), qber_analytic(ch, mu)
    q_nu = gain_analytic(ch, nu)
    q_nu_lower = lower_confidence_gain(q_nu, decoy_fraction * n_total, params.u_alpha)
    q1 = float(_q1_lower_array(mu, nu, q_mu, e_mu, q_nu_lower, params.e0))
    return _assemble(q1, q_nu_lower, q_mu, e_mu, params)


def nondecoy_rate(ch: ChannelModel, mu: float, params: ProtocolParams) -> float:
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    return float(_nondecoy_rate_array(gain_analytic(ch, mu), qber_analytic(ch, mu), mu, params))


# Broadcasting versions used by grid searches and sweeps. ``eta`` may be an
# array of transmittances (distances) and mu/nu/fraction arrays of candidates.

def one_decoy_rate_array(eta, y0, e_det, mu, nu, fraction, n_total, params: ProtocolParams):
    eta, mu, nu, fraction = (np.asarray(a, dtype=float) for a in (eta, mu, nu, fraction))
    with np.errstate(divide="ignore", invalid="ignore"):
        q_mu = _gain(eta, y0, mu)
        e_mu = _error_gain(eta, y0, e_det, mu, params.e0) / q_mu
        q_nu = _gain(eta, y0, nu)
        q_nu_lower = q_nu * (1.0 - params.u_alpha / np.sqrt(fraction * n_total * q_nu))
        q1 = _q1_lower_array(mu, nu, q_mu, e_mu, q_nu_lower, params.e0)
        ok = (q1 > 0) & (nu > 0) & (nu < mu) & (q_nu > 0)
        q1s = np.where(ok, q1, 1.0)
        rate = _gllp_rate_array(params.q, q_mu, e_mu, params.f_ec, q1s, e_mu * q_mu / q1s)
    return np.where(ok & (rate > 0), rate, 0.0)


def nondecoy_rate_array(eta, y0, e_det, mu, params: ProtocolParams):
    eta, mu = np.asarray(eta, dtype=float), np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_mu = _gain(eta, y0, mu)
        e_mu = np.where(q_mu > 0, _error_gain(eta, y0, e_det, mu, params.e0) / q_mu, 0.5)
        return np.where(q_mu > 0, _nondecoy_rate_array(q_mu, e_mu, mu, params), 0.0)


def perfect_decoy_rate_array(eta, y0, e_det, mu, params: ProtocolParams):
    eta, mu = np.asarray(eta, dtype=float), np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_mu = _gain(eta, y0, mu)
        e_mu = _error_gain(eta, y0, e_det, mu, params.e0) / q_mu
        y1 = y0 + eta * (1.0 - y0)
        q1 = mu * np.exp(-mu) * y1
        e1 = (params.e0 * y0 + e_det * eta * (1.0 - y0)) / y1
        rate = _gllp_rate_array(params.q, q_mu, e_mu, params.f_ec, q1, e1)
    return np.where(rate > 0, rate, 0.0)


def secure_distance(
    ch_template: ChannelModel,
    protocol: Protocol,
    mu: float | None,
    params: ProtocolParams,
    nu: float | None = None,
    n_total: int | None = None,
    decoy_fraction: float = 0.1,
    resolution_km: float = 0.01,
    max_distance_km: float = 1000.0,
) -> float:
    """Largest distance with a positive rate, found by bisection.

    With ``mu=None`` the source parameters are re-optimized at every probed
    distance (mu alone for the non-decoy protocol, mu/nu/fraction for one
    decoy). Returns 0 when the link is insecure even at zero length and
    ``max_distance_km`` if it is still secure there.
    """
    protocol = Protocol(protocol)
    rate = _rate_at_distance(ch_template, protocol, mu, nu, n_total, decoy_fraction, params)

    if rate(0.0) <= 0:
        return 0.0
    lo, hi = 0.0, 1.0
    while rate(hi) > 0:
        lo, hi = hi, 2 * hi
        if hi >= max_distance_km:
            if rate(max_distance_km) > 0:
                return max_distance_km
            hi = max_distance_km
            break
    while hi - lo > resolution_km:
        mid = 0.5 * (lo + hi)
        if rate(mid) > 0:
            lo = mid
        else:
            hi = mid
    return lo


def _rate_at_distance(ch, protocol, mu, nu, n_total, decoy_fraction, params):
    if protocol is Protocol.ONE_DECOY:
        if n_total is None:
            raise ValueError("one-decoy secure distance needs n_total")
        if mu is None:
            from .optimize import OptimizationRequest, optimize_intensities

            def rate(d):
                return optimize_intensities(OptimizationRequest(ch.at_distance(d), n_total, params)).rate
        else:
            if nu is None:
                raise ValueError("one-decoy secure distance needs nu when mu is fixed")

            def rate(d):
                return one_decoy_bounds(ch.at_distance(d), mu, nu, decoy_fraction, n_total, params).rate_lower
    elif protocol is Protocol.NON_DECOY:
        if mu is None:
            from .optimize import optimize_nondecoy

            def rate(d):
                return optimize_nondecoy(ch.at_distance(d), params)[1]
        else:
            def rate(d):
                return nondecoy_rate(ch.at_distance(d), mu, params)
    else:
        if mu is None:
            from .optimize import optimize_perfect_decoy

            def rate(d):
                return optimize_perfect_decoy(ch.at_distance(d), params)[1]
        else:
            def rate(d):
                return perfect_decoy_rate(ch.at_distance(d), mu, params)
    return rate
