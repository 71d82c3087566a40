"""Decoy-state QKD key-rate bounds, channel model, Monte Carlo and optimizer."""

from .bounds import (
    KeyYield,
    SecurityBounds,
    key_rate_gllp,
    key_rate_lower_one_decoy,
    key_rate_nondecoy_gllp,
    key_yield,
    single_photon_error_upper,
    single_photon_gain_lower,
)
from .channel import (
    ChannelFit,
    ChannelModel,
    FitError,
    Protocol,
    fit_channel,
    gain_analytic,
    n_photon_yield,
    overall_transmittance,
    perfect_decoy_rate,
    qber_analytic,
    secure_distance,
)
from .core import (
    IntensitySetting,
    Label,
    ObservedStatistics,
    ProtocolParams,
    binary_entropy,
    confidence_from_u_alpha,
    gain_and_qber,
    lower_confidence_gain,
)

__version__ = "0.1.0"
