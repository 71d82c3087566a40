"""Domain types and the counting/entropy/confidence primitives.

Everything here is a pure function of its inputs. Counts are Python ints,
so products such as ``N * Q`` with N ~ 1e8 never overflow.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

# Error rate of a vacuum (background-only) detection.
VACUUM_ERROR = 0.5


class Label(str, enum.Enum):
    SIGNAL = "signal"
    DECOY = "decoy"

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown intensity label {text!r} (expected 'signal' or 'decoy')") from None


@dataclass(frozen=True)
class IntensitySetting:
    """One source intensity class.

    Attributes:
        label: Signal or decoy.
        mean_photons: Mean photon number per pulse (mu for signal, nu for decoy).
        send_fraction: Fraction of all pulses emitted at this intensity.
    """

    label: Label
    mean_photons: float
    send_fraction: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        if not self.mean_photons >= 0:
            raise ValueError(f"mean_photons must be >= 0, got {self.mean_photons}")
        if not 0 < self.send_fraction <= 1:
            raise ValueError(f"send_fraction must be in (0, 1], got {self.send_fraction}")


def check_fractions(settings) -> None:
    total = math.fsum(s.send_fraction for s in settings)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"send fractions sum to {total}, expected 1")


def check_one_decoy_pair(mu: float, nu: float) -> None:
    if not (0 < nu < mu):
        raise ValueError(f"one-decoy protocol needs 0 < nu < mu, got mu={mu}, nu={nu}")


@dataclass(frozen=True)
class ObservedStatistics:
    """Sent/detected/error counts for one intensity, with the derived gain and QBER."""

    intensity: IntensitySetting
    n_sent: int
    n_detected: int
    n_error: int
    gain: float = field(init=False)
    qber: float = field(init=False)

    def __post_init__(self):
        gain, qber = gain_and_qber(self.n_sent, self.n_detected, self.n_error)
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "qber", qber)

    @property
    def mean_photons(self) -> float:
        return self.intensity.mean_photons

    @classmethod
    def from_rates(cls, intensity: IntensitySetting, n_sent: int, gain: float, qber: float) -> "ObservedStatistics":
        """Build counts that reproduce the given gain and QBER up to integer rounding."""
        n_detected = int(round(gain * n_sent))
        n_error = int(round(qber * n_detected))
        return cls(intensity, int(n_sent), n_detected, n_error)


@dataclass(frozen=True)
class ProtocolParams:
    """Post-processing parameters of the rate formula.

    ``q`` is the protocol duty factor (sifting etc.), ``f_ec`` the error
    correction inefficiency, ``u_alpha`` the number of standard deviations
    used for the finite-statistics bound.
    """

    q: float = 0.4478
    f_ec: float = 1.22
    u_alpha: float = 10.0
    e0: float = VACUUM_ERROR

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValueError(f"q must be in (0, 1], got {self.q}")
        if not self.f_ec >= 1:
            raise ValueError(f"f_ec must be >= 1, got {self.f_ec}")
        if not self.u_alpha >= 0:
            raise ValueError(f"u_alpha must be >= 0, got {self.u_alpha}")
        if self.e0 != VACUUM_ERROR:
            raise ValueError(f"e0 is fixed at 0.5, got {self.e0}")


def h2(x):
    """Vectorised binary entropy without domain checks (0 log 0 := 0)."""
    x = np.asarray(x, dtype=float)
    inside = (x > 0) & (x < 1)
    xs = np.where(inside, x, 0.5)
    out = -xs * np.log2(xs) - (1 - xs) * np.log2(1 - xs)
    out = np.where(inside, out, 0.0)
    return out if out.ndim else float(out)


def binary_entropy(x: float) -> float:
    """Binary Shannon entropy H2(x) in bits.

    >>> binary_entropy(0.5)
    1.0
    """
    if not 0 <= x <= 1:
        raise ValueError(f"binary entropy is defined on [0, 1], got {x}")
    if x == 0 or x == 1:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


def gain_and_qber(n_sent: int, n_detected: int, n_error: int) -> tuple[float, float]:
    """Return ``(n_detected / n_sent, n_error / n_detected)``; QBER is 0 with no detections."""
    if n_sent <= 0:
        raise ValueError("n_sent must be positive")
    if not 0 <= n_error <= n_detected <= n_sent:
        raise ValueError(
            f"counts must satisfy 0 <= n_error <= n_detected <= n_sent, "
            f"got n_error={n_error}, n_detected={n_detected}, n_sent={n_sent}"
        )
    gain = n_detected / n_sent
    qber = n_error / n_detected if n_detected else 0.0
    return gain, qber


def lower_confidence_gain(q_nu: float, n_nu: int, u_alpha: float) -> float:
    """Lower edge of the Gaussian fluctuation band of a measured gain.

    Returns ``Q * (1 - u_alpha / sqrt(N * Q))``. The result can be zero or
    negative when the band is wider than the measurement itself; callers
    treat that as "no bound".
    """
    if not q_nu > 0:
        raise ValueError(f"gain must be positive, got {q_nu}")
    if n_nu <= 0:
        raise ValueError(f"pulse count must be positive, got {n_nu}")
    if not u_alpha >= 0:
        raise ValueError(f"u_alpha must be >= 0, got {u_alpha}")
    return q_nu * (1 - u_alpha / math.sqrt(n_nu * q_nu))


def confidence_from_u_alpha(u_alpha: float) -> float:
    """Two-sided Gaussian confidence level of a +-u_alpha sigma band."""
    if not u_alpha >= 0:
        raise ValueError(f"u_alpha must be >= 0, got {u_alpha}")
    return 1.0 - float(erfc(u_alpha / math.sqrt(2)))


def confidence_tail(u_alpha: float) -> float:
    """Complement of :func:`confidence_from_u_alpha`, kept exact for large u_alpha."""
    if not u_alpha >= 0:
        raise ValueError(f"u_alpha must be >= 0, got {u_alpha}")
    return float(erfc(u_alpha / math.sqrt(2)))
