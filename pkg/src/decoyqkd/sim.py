"""Pulse-level Monte Carlo of a BB84 session with one decoy intensity.

Pulses are processed in fixed-size blocks. Block ``b`` draws from its own
generator seeded by ``SeedSequence(seed, spawn_key=(b,))``, and block
tallies are integer sums, so the result depends only on the seed and never
on how many workers share the blocks.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bounds import multiphoton_probability
from .channel import ChannelModel, gain_analytic, qber_analytic
from .core import IntensitySetting, Label, ObservedStatistics, check_fractions

BLOCK_SIZE = 1 << 16


class AttackKind(str, enum.Enum):
    NONE = "none"
    PNS = "pns"


@dataclass(frozen=True)
class AttackModel:
    """Photon-number-splitting eavesdropper.

    Single-photon pulses are blocked with probability ``block_fraction_single``.
    A multi-photon pulse is forwarded with probability ``forward_fraction_multi``
    (otherwise blocked); Eve keeps one photon of a forwarded pulse. With
    ``lossless_forward`` the remaining photons reach Bob's detector with
    certainty; without it they see the ordinary channel, and Eve's photon is
    taken out of what the fiber would have lost anyway.
    """

    kind: AttackKind = AttackKind.PNS
    block_fraction_single: float = 0.0
    lossless_forward: bool = False
    forward_fraction_multi: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        for name in ("block_fraction_single", "forward_fraction_multi"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    @property
    def active(self) -> bool:
        return self.kind is AttackKind.PNS


@dataclass(frozen=True)
class SessionConfig:
    n_pulses: int
    intensities: tuple[IntensitySetting, ...]
    channel: ChannelModel
    attack: AttackModel | None = None
    rng_seed: int = 0
    basis_match_prob: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "intensities", tuple(self.intensities))
        if self.n_pulses <= 0:
            raise ValueError(f"n_pulses must be positive, got {self.n_pulses}")
        if not self.intensities:
            raise ValueError("at least one intensity is required")
        check_fractions(self.intensities)
        labels = [s.label for s in self.intensities]
        if len(set(labels)) != len(labels):
            raise ValueError("intensity labels must be unique")
        if not 0 < self.basis_match_prob <= 1:
            raise ValueError(f"basis_match_prob must be in (0, 1], got {self.basis_match_prob}")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned value")


@dataclass(frozen=True)
class SessionTally:
    stats: tuple[ObservedStatistics, ...]
    double_click_count: int
    double_click_errors: int
    sifted_lengths: tuple[int, ...]
    sifted_errors: tuple[int, ...]

    def by_label(self, label) -> ObservedStatistics:
        label = Label(label)
        for s in self.stats:
            if s.intensity.label is label:
                return s
        raise KeyError(label)

    @property
    def n_pulses(self) -> int:
        return sum(s.n_sent for s in self.stats)


# Column order of the per-intensity count matrix produced by each block.
_SENT, _DET, _ERR, _SIFT, _SIFT_ERR, _DOUBLE, _DOUBLE_ERR = range(7)


def _arrivals_thinned(rng, which, means):
    """Photons reaching the detector with no eavesdropper.

    Independent loss thins Poisson(mu) to Poisson(eta mu), so a pulse is hit
    with probability ``1 - exp(-eta mu)`` and the count of a hit pulse is
    drawn from the zero-truncated law by inversion.
    """
    p_hit = -np.expm1(-means)
    hit_pos = np.flatnonzero(rng.random(which.size) < p_hit[which])
    lam = means[which[hit_pos]]
    v = rng.random(hit_pos.size)
    arrived = np.ones(hit_pos.size, dtype=np.int64)
    # P(N >= k+1 | N >= 1) for k = 1, 2, ...; stops once no pulse can go further.
    term = lam * np.exp(-lam)  # P(N = 1)
    tail = -np.expm1(-lam) - term  # P(N >= 2)
    k = 1
    while k < 64:
        more = v * -np.expm1(-lam) < tail
        if not more.any():
            break
        arrived += more
        k += 1
        term = term * lam / k
        tail = tail - term
    return hit_pos, arrived


def _arrivals_under_attack(rng, which, mus, eta, attack: AttackModel):
    photons = rng.poisson(mus[which])
    nz = np.flatnonzero(photons)
    n_ph = photons[nz]
    trans = np.full(nz.size, eta)
    single = n_ph == 1
    multi = ~single
    blocked = single & (rng.random(nz.size) < attack.block_fraction_single)
    forwarded = multi & (rng.random(nz.size) < attack.forward_fraction_multi)
    n_ph = np.where(blocked | (multi & ~forwarded), 0, n_ph)
    if attack.lossless_forward:
        n_ph = np.where(forwarded, n_ph - 1, n_ph)
        trans = np.where(forwarded, 1.0, trans)
    arrived = rng.binomial(n_ph, trans)
    hit = arrived > 0
    return nz[hit], arrived[hit]


def _simulate_block(cfg: SessionConfig, block: int) -> np.ndarray:
    start = block * BLOCK_SIZE
    size = min(BLOCK_SIZE, cfg.n_pulses - start)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.rng_seed, spawn_key=(block,))))
    ch = cfg.channel
    k = len(cfg.intensities)

    cum = np.cumsum([s.send_fraction for s in cfg.intensities])
    which = np.zeros(size, dtype=np.intp)
    u = rng.random(size)
    for c in cum[:-1]:
        which += u >= c
    mus = np.array([s.mean_photons for s in cfg.intensities])

    attack = cfg.attack
    if attack is not None and attack.active:
        hit_pos, arrived = _arrivals_under_attack(rng, which, mus, ch.eta, attack)
    else:
        hit_pos, arrived = _arrivals_thinned(rng, which, mus * ch.eta)
    wrong = rng.binomial(arrived, ch.e_det)
    right = arrived - wrong

    n_dark = rng.binomial(size, ch.y0)
    dark_pos = np.sort(rng.choice(size, n_dark, replace=False)) if n_dark else np.empty(0, dtype=np.int64)
    dark_wrong = rng.random(n_dark) < 0.5

    events = np.union1d(hit_pos, dark_pos)
    click_right = np.zeros(events.size, dtype=bool)
    click_wrong = np.zeros(events.size, dtype=bool)
    ih = np.searchsorted(events, hit_pos)
    click_right[ih] |= right > 0
    click_wrong[ih] |= wrong > 0
    idk = np.searchsorted(events, dark_pos)
    click_right[idk] |= ~dark_wrong
    click_wrong[idk] |= dark_wrong

    double = click_right & click_wrong
    coin = rng.random(events.size) < 0.5
    error = (click_wrong & ~click_right) | (double & coin)
    sifted = rng.random(events.size) < cfg.basis_match_prob
    ev_which = which[events]

    out = np.zeros((k, 7), dtype=np.int64)
    out[:, _SENT] = np.bincount(which, minlength=k)
    for col, mask in (
        (_DET, None),
        (_ERR, error),
        (_SIFT, sifted),
        (_SIFT_ERR, sifted & error),
        (_DOUBLE, double),
        (_DOUBLE_ERR, double & error),
    ):
        idx = ev_which if mask is None else ev_which[mask]
        out[:, col] = np.bincount(idx, minlength=k)
    return out


def simulate_session(cfg: SessionConfig, n_workers: int = 1) -> SessionTally:
    """Run the session; deterministic in ``cfg.rng_seed`` for any ``n_workers``."""
    n_blocks = math.ceil(cfg.n_pulses / BLOCK_SIZE)
    blocks = range(n_blocks)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(lambda b: _simulate_block(cfg, b), blocks))
    else:
        parts = [_simulate_block(cfg, b) for b in blocks]
    total = np.sum(parts, axis=0, dtype=np.int64)

    for s, row in zip(cfg.intensities, total):
        if row[_SENT] == 0:
            # tiny sessions can miss an intensity entirely
            raise ValueError(f"no pulses were sent at intensity {s.label.value}")
    stats = tuple(
        ObservedStatistics(s, int(row[_SENT]), int(row[_DET]), int(row[_ERR]))
        for s, row in zip(cfg.intensities, total)
    )
    return SessionTally(
        stats=stats,
        double_click_count=int(total[:, _DOUBLE].sum()),
        double_click_errors=int(total[:, _DOUBLE_ERR].sum()),
        sifted_lengths=tuple(int(v) for v in total[:, _SIFT]),
        sifted_errors=tuple(int(v) for v in total[:, _SIFT_ERR]),
    )


def pns_expected_gain(ch: ChannelModel, mu: float, attack: AttackModel) -> float:
    """Expected gain of a Poisson(mu) pulse under the photon-number-splitting attack.

    Sum over photon number n of P(n) times the detection probability:

    * n = 0: ``y0``
    * n = 1: ``(1 - b) (1 - (1 - y0)(1 - t)) + b y0`` with ``t = 1`` for a
      lossless forward line, ``eta`` otherwise
    * n >= 2, forwarded (prob. m): 1 on a lossless line, otherwise the
      ordinary yield ``1 - (1 - y0)(1 - eta)^n``; blocked: ``y0``
    """
    if not attack.active:
        raise ValueError("pns_expected_gain needs a PNS attack model")
    if not mu >= 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    y0, eta = ch.y0, ch.eta
    b, m = attack.block_fraction_single, attack.forward_fraction_multi
    p0 = math.exp(-mu)
    p1 = mu * p0
    pm = multiphoton_probability(mu)
    t = 1.0 if attack.lossless_forward else eta

    single = (1 - b) * (1 - (1 - y0) * (1 - t)) + b * y0
    if attack.lossless_forward:
        multi_fwd = pm
    else:
        # sum_{n>=2} P(n) (1 - eta)^n = exp(-eta mu) - p0 - p1 (1 - eta)
        multi_fwd = pm - (1 - y0) * (math.exp(-eta * mu) - p0 - p1 * (1 - eta))
    return p0 * y0 + p1 * single + m * multi_fwd + (1 - m) * pm * y0


def calibrate_stealth_pns(ch: ChannelModel, mu: float, lossless_forward: bool = True) -> AttackModel:
    """PNS attack that leaves the gain at intensity ``mu`` exactly as expected.

    Eve first blocks single-photon pulses; if blocking all of them still
    leaves too much light, she additionally drops a fraction of the
    multi-photon pulses. The expected gain is affine in either knob, so
    each step is a linear solve.
    """
    target = gain_analytic(ch, mu)

    def g(b, m):
        return pns_expected_gain(ch, mu, AttackModel(AttackKind.PNS, b, lossless_forward, m))

    g00, g10 = g(0.0, 1.0), g(1.0, 1.0)
    if g00 < target - 1e-15:
        raise ValueError("this attack cannot reach the expected gain even without blocking")
    if g10 <= target:
        b = (g00 - target) / (g00 - g10) if g00 > g10 else 0.0
        return AttackModel(AttackKind.PNS, min(max(b, 0.0), 1.0), lossless_forward, 1.0)
    g_none = g(1.0, 0.0)
    m = (target - g_none) / (g10 - g_none)
    return AttackModel(AttackKind.PNS, 1.0, lossless_forward, min(max(m, 0.0), 1.0))


@dataclass(frozen=True)
class AttackVerdict:
    anomalous: bool
    z_gain: dict = field(default_factory=dict)
    z_qber: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return "anomalous" if self.anomalous else "clean"


def _z(observed: float, expected: float, n: int) -> float:
    if n == 0:
        return 0.0
    sigma = math.sqrt(expected * (1 - expected) / n)
    if sigma == 0:
        return 0.0 if observed == expected else math.copysign(math.inf, observed - expected)
    return (observed - expected) / sigma


def detect_attack(tally: SessionTally, expected: ChannelModel, u_alpha: float) -> AttackVerdict:
    """Compare every intensity's gain and QBER with the expected channel.

    Gains are tested against the binomial sigma over pulses sent, QBERs
    against the binomial sigma over pulses detected. Any ``|z| > u_alpha``
    makes the session anomalous.
    """
    if len(tally.stats) < 2:
        raise ValueError("attack detection needs at least two intensities")
    z_gain, z_qber = {}, {}
    for s in tally.stats:
        if s.n_sent == 0:
            raise ValueError(f"intensity {s.intensity.label.value} has no pulses sent")
        mu = s.mean_photons
        name = s.intensity.label.value
        z_gain[name] = _z(s.gain, gain_analytic(expected, mu), s.n_sent)
        z_qber[name] = _z(s.qber, qber_analytic(expected, mu), s.n_detected)
    anomalous = any(abs(z) > u_alpha for z in (*z_gain.values(), *z_qber.values()))
    return AttackVerdict(anomalous, z_gain, z_qber)
