"""Grid search over source intensities and distance sweeps.

The objective is the key rate per *emitted* pulse, ``(1 - fraction) * R_L``:
decoy pulses never become key, and without that factor the decoy fraction
would always run to the top of its range. ``R_L`` itself (the per-pulse
bound as reported by the analysis) is carried alongside as ``rate_lower``.

The surface is clamped at zero, so the search is derivative free: an
exhaustive coarse grid, then two rounds that shrink the grid span tenfold
around the incumbent. Ties go to smaller mu, then smaller nu, then smaller
decoy fraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .channel import (
    ChannelModel,
    Protocol,
    fiber_transmittance,
    nondecoy_rate_array,
    one_decoy_rate_array,
    perfect_decoy_rate_array,
)
from .core import ProtocolParams

REFINE_ROUNDS = 2
SHRINK = 10.0


@dataclass(frozen=True)
class OptimizationRequest:
    channel: ChannelModel
    n_total: int
    params: ProtocolParams = field(default_factory=ProtocolParams)
    mu_range: tuple[float, float] = (0.02, 1.0)
    nu_range: tuple[float, float] = (0.01, 0.5)
    fraction_range: tuple[float, float] = (0.02, 0.95)
    grid: tuple[int, int, int] = (40, 40, 20)

    def __post_init__(self):
        if self.n_total <= 0:
            raise ValueError("n_total must be positive")
        for name, (lo, hi), upper in (
            ("mu_range", self.mu_range, 2.0),
            ("nu_range", self.nu_range, 2.0),
            ("fraction_range", self.fraction_range, 1.0),
        ):
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
            if hi > upper or (name == "fraction_range" and hi >= 1):
                raise ValueError(f"{name} upper end {hi} outside the allowed region")
        if self.nu_range[0] >= self.mu_range[1]:
            raise ValueError("nu_range lies entirely above mu_range; no nu < mu exists")
        if any(n < 1 for n in self.grid):
            raise ValueError(f"grid resolutions must be >= 1, got {self.grid}")


class OptimizationResult(NamedTuple):
    mu: float
    nu: float
    fraction: float
    rate: float
    rate_lower: float = 0.0


def _axis(lo: float, hi: float, n: int) -> np.ndarray:
    if n == 1:
        return np.array([hi])
    if lo == hi:
        return np.array([lo])
    return np.linspace(lo, hi, n)


def _better(rate, point, best_rate, best_point) -> bool:
    return rate > best_rate or (rate == best_rate and point < best_point)


def _grid_best(req: OptimizationRequest, eta: float, mus, nus, fracs):
    m, n, f = np.meshgrid(mus, nus, fracs, indexing="ij")
    ch = req.channel
    rates = (1.0 - f) * one_decoy_rate_array(eta, ch.y0, ch.e_det, m, n, f, req.n_total, req.params)
    # argmax returns the first maximum, i.e. the lexicographically smallest point
    # because every axis is ascending.
    k = int(np.argmax(rates))
    i, j, l = np.unravel_index(k, rates.shape)
    return float(rates[i, j, l]), (float(mus[i]), float(nus[j]), float(fracs[l])), rates


def coarse_grid(req: OptimizationRequest):
    """The coarse (mu, nu, fraction) axes of a request."""
    return (
        _axis(*req.mu_range, req.grid[0]),
        _axis(*req.nu_range, req.grid[1]),
        _axis(*req.fraction_range, req.grid[2]),
    )


def optimize_intensities(req: OptimizationRequest) -> OptimizationResult:
    """Maximise the one-decoy rate lower bound over (mu, nu, decoy fraction).

    Returns an all-zero result when no grid point yields a positive rate.
    """
    eta = req.channel.eta
    axes = coarse_grid(req)
    best_rate, best_point, _ = _grid_best(req, eta, *axes)
    if best_rate <= 0:
        return OptimizationResult(0.0, 0.0, 0.0, 0.0)

    ranges = [req.mu_range, req.nu_range, req.fraction_range]
    spans = [hi - lo for lo, hi in ranges]
    for _ in range(REFINE_ROUNDS):
        spans = [s / SHRINK for s in spans]
        new_axes = []
        for (lo, hi), centre, span, n in zip(ranges, best_point, spans, req.grid):
            a = max(lo, centre - span / 2)
            b = min(hi, centre + span / 2)
            new_axes.append(_axis(a, b, n) if b > a else np.array([centre]))
        rate, point, _ = _grid_best(req, eta, *new_axes)
        if _better(rate, point, best_rate, best_point):
            best_rate, best_point = rate, point
    mu, nu, frac = best_point
    return OptimizationResult(mu, nu, frac, best_rate, best_rate / (1.0 - frac))


def effective_rate(req: OptimizationRequest, mu: float, nu: float, fraction: float) -> float:
    """The optimizer's objective at a single point."""
    ch = req.channel
    return float((1.0 - fraction) * one_decoy_rate_array(ch.eta, ch.y0, ch.e_det, mu, nu, fraction, req.n_total, req.params))


def _optimize_1d(rate_fn, lo: float, hi: float, n: int = 400):
    # Optimal mu spans decades across distances, so the coarse axis is logarithmic.
    mus = np.geomspace(lo, hi, n)
    rates = rate_fn(mus)
    k = int(np.argmax(rates))
    best_mu, best_rate = float(mus[k]), float(rates[k])
    if best_rate <= 0:
        return 0.0, 0.0
    a, b = float(mus[max(k - 1, 0)]), float(mus[min(k + 1, n - 1)])
    for _ in range(REFINE_ROUNDS + 1):
        cand = np.linspace(a, b, n)
        r = rate_fn(cand)
        j = int(np.argmax(r))
        if _better(float(r[j]), float(cand[j]), best_rate, best_mu):
            best_mu, best_rate = float(cand[j]), float(r[j])
        step = (b - a) / (n - 1)
        a, b = max(lo, best_mu - step), min(hi, best_mu + step)
    return best_mu, best_rate


def optimize_nondecoy(ch: ChannelModel, params: ProtocolParams, mu_range=(1e-5, 1.0)) -> tuple[float, float]:
    """Best ``(mu, rate)`` for the pessimistic non-decoy bound."""
    eta = ch.eta
    return _optimize_1d(lambda m: nondecoy_rate_array(eta, ch.y0, ch.e_det, m, params), *mu_range)


def optimize_perfect_decoy(ch: ChannelModel, params: ProtocolParams, mu_range=(1e-3, 1.0)) -> tuple[float, float]:
    eta = ch.eta
    return _optimize_1d(lambda m: perfect_decoy_rate_array(eta, ch.y0, ch.e_det, m, params), *mu_range)


def distance_axis(d_min: float, d_max: float, step: float) -> np.ndarray:
    if not step > 0:
        raise ValueError("step must be positive")
    if d_min < 0 or d_max < d_min:
        raise ValueError(f"need 0 <= d_min <= d_max, got {d_min}, {d_max}")
    n = int(np.floor((d_max - d_min) / step + 1e-9)) + 1
    return d_min + step * np.arange(n)


def sweep_distance(
    req: OptimizationRequest,
    d_min: float,
    d_max: float,
    step: float,
    protocol: Protocol,
    point: tuple | None = None,
) -> list[tuple[float, float]]:
    """Rate per sent pulse over a range of fiber lengths.

    ``point`` fixes the source parameters: ``(mu, nu, fraction)`` for the
    one-decoy protocol, ``(mu,)`` (or a bare float) for the other two. When
    ``None`` the parameters are re-optimized at every distance. One-decoy
    rates are ``R_L`` at the chosen point, not the optimizer's objective.
    """
    protocol = Protocol(protocol)
    ds = distance_axis(d_min, d_max, step)
    ch, params = req.channel, req.params
    etas = ch.eta_receiver * fiber_transmittance(ch.alpha_db_per_km, ds)

    if point is None:
        if protocol is Protocol.ONE_DECOY:
            rates = [optimize_intensities(replace(req, channel=ch.at_distance(float(d)))).rate_lower for d in ds]
        else:
            fn = optimize_nondecoy if protocol is Protocol.NON_DECOY else optimize_perfect_decoy
            rates = [fn(ch.at_distance(float(d)), params)[1] for d in ds]
        rates = np.asarray(rates, dtype=float)
    else:
        pt = (point,) if np.isscalar(point) else tuple(point)
        if protocol is Protocol.ONE_DECOY:
            if len(pt) != 3:
                raise ValueError("one-decoy sweeps need (mu, nu, fraction)")
            mu, nu, frac = pt
            if not 0 < nu < mu:
                raise ValueError(f"need 0 < nu < mu, got mu={mu}, nu={nu}")
            rates = one_decoy_rate_array(etas, ch.y0, ch.e_det, mu, nu, frac, req.n_total, params)
        elif protocol is Protocol.NON_DECOY:
            rates = nondecoy_rate_array(etas, ch.y0, ch.e_det, pt[0], params)
        else:
            rates = perfect_decoy_rate_array(etas, ch.y0, ch.e_det, pt[0], params)
    return [(float(d), float(r)) for d, r in zip(ds, rates)]
