"""Concrete state space models, simulators and exact oracles."""

from pmsmooth.models.linear_gaussian import (
    KalmanResult,
    LinearGaussianSpec,
    kalman_rts,
    kalman_score_fd,
    lg_family,
    lg_model,
    simulate_lg,
)
from pmsmooth.models.lotka_volterra import LotkaVolterraSpec, lotka_volterra_model, simulate_lv
from pmsmooth.models.presets import Preset, build_preset, load_presets
from pmsmooth.models.rnn import RnnSsmSpec, rnn_model, simulate_rnn_ssm
from pmsmooth.models.sine import SineSpec, simulate_sine, sine_family, sine_gpe_config, sine_model

__all__ = [
    "KalmanResult",
    "LinearGaussianSpec",
    "LotkaVolterraSpec",
    "Preset",
    "RnnSsmSpec",
    "SineSpec",
    "build_preset",
    "kalman_rts",
    "kalman_score_fd",
    "lg_family",
    "lg_model",
    "load_presets",
    "lotka_volterra_model",
    "rnn_model",
    "simulate_lg",
    "simulate_lv",
    "simulate_rnn_ssm",
    "simulate_sine",
    "sine_family",
    "sine_gpe_config",
    "sine_model",
]
