import pytest

from decoyqkd.channel import ChannelModel
from decoyqkd.core import IntensitySetting, Label, ObservedStatistics, ProtocolParams

# Reference link: measured operating point.
MU, NU = 0.80, 0.12
Q_MU, E_MU, Q_NU, E_NU = 8.757e-3, 9.536e-3, 1.360e-3, 2.689e-2
N_TOTAL = 105_000_000
DECOY_FRACTION = 0.10

# Exact two-equation solve of the reference gains (independent mpmath findroot),
# 15 km at 0.21 dB/km.
FIT_ETA = 1.0933297366677501e-2
FIT_Y0 = 4.892875828947898e-5
FIT_EDET = 6.780189460606991e-3


def reference_stats(e_mu=E_MU, n_total=N_TOTAL, fraction=DECOY_FRACTION):
    n_nu = round(fraction * n_total)
    sig = ObservedStatistics.from_rates(IntensitySetting(Label.SIGNAL, MU, 1 - fraction), n_total - n_nu, Q_MU, e_mu)
    dec = ObservedStatistics.from_rates(IntensitySetting(Label.DECOY, NU, fraction), n_nu, Q_NU, E_NU)
    return sig, dec


@pytest.fixture
def params():
    return ProtocolParams()


@pytest.fixture
def reference():
    return reference_stats()


@pytest.fixture
def fitted_channel():
    return ChannelModel(0.21, 15.0, FIT_ETA / 10 ** (-0.21 * 15 / 10), FIT_Y0, FIT_EDET)


# One line per acceptance criterion, filled in by test_acceptance.py and
# echoed in the terminal summary so the verdicts are visible without -s.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
