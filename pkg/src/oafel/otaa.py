"""Over-the-air analog aggregation: power alignment, the noisy received sum,
and the server-side model update."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

POWER_MODES = ("paper", "snr_consistent")


class ZeroNormEstimate(ValueError):
    """Power alignment needs strictly positive gradient-norm estimates."""


class EmptySchedule(ValueError):
    """Aggregation requires at least one transmitting device."""


@dataclass(frozen=True)
class AggregationOutcome:
    """Received superposition, resulting iterate, realized SNR, and the
    per-device transmit energies at the true gains."""

    y: np.ndarray
    w_next: np.ndarray
    snr: float
    E_tr: dict[int, float]


def power_scalar(
    norm_sq_estimates: np.ndarray,
    gamma0: float,
    sigma0_sq: float,
    s: int,
    mode: str = "paper",
) -> float:
    """Common power scalar sigma_t from all devices' squared-norm estimates.

    ``paper`` scales with the full noise variance (sigma_t =
    gamma0 * sigma0_sq * sqrt(s) / min ||g||); ``snr_consistent`` scales with
    the noise standard deviation (sigma_t = sqrt(gamma0 * sigma0_sq * s) /
    min ||g||) so the received SNR lands near gamma0 instead of
    gamma0^2 * sigma0_sq * |B|^2.
    """
    if mode not in POWER_MODES:
        raise ValueError(f"mode must be one of {POWER_MODES}, got {mode!r}")
    if gamma0 <= 0 or sigma0_sq <= 0 or s < 1:
        raise ValueError("gamma0, sigma0_sq must be > 0 and s >= 1")
    est = np.asarray(norm_sq_estimates, dtype=float)
    min_sq = float(est.min())
    if min_sq <= 0.0:
        raise ZeroNormEstimate("all squared-norm estimates must be > 0")
    min_norm = np.sqrt(min_sq)
    if mode == "paper":
        return float(gamma0 * sigma0_sq * np.sqrt(s) / min_norm)
    return float(np.sqrt(gamma0 * sigma0_sq * s) / min_norm)


def transmit_energy(sigma_t: float, h: float, norm_sq: float) -> float:
    """Energy a device spends sending its gradient: sigma_t^2 ||g||^2 / h^2."""
    if h <= 0:
        raise ValueError("channel gain must be > 0")
    if sigma_t < 0 or norm_sq < 0:
        raise ValueError("sigma_t and norm_sq must be >= 0")
    return sigma_t**2 * norm_sq / h**2


def aggregate(
    w_prev: np.ndarray,
    gradients: Mapping[int, np.ndarray],
    gains: np.ndarray,
    sigma_t: float,
    eta_t: float,
    noise: np.ndarray,
) -> AggregationOutcome:
    """Superpose the scheduled devices' aligned signals and take the step.

    Each device pre-scales by sigma_t / h_n, so the received vector is
    y = sigma_t * sum g_n + z and the server applies
    w_next = w_prev - eta_t * y / (sigma_t * |B|).
    """
    if not gradients:
        raise EmptySchedule("no devices transmitted")
    if sigma_t <= 0:
        raise ValueError("sigma_t must be > 0")
    devices = sorted(gradients)
    total = np.zeros_like(w_prev)
    for n in devices:
        total = total + gradients[n]
    y = sigma_t * total + noise
    w_next = w_prev - eta_t * y / (sigma_t * len(devices))
    noise_power = float(noise @ noise)
    signal_power = float(sigma_t**2 * (total @ total))
    snr = signal_power / noise_power if noise_power > 0 else float("inf")
    E_tr = {
        n: transmit_energy(sigma_t, float(gains[n]), float(gradients[n] @ gradients[n]))
        for n in devices
    }
    return AggregationOutcome(y=y, w_next=w_next, snr=snr, E_tr=E_tr)


def expected_update_noise_var(sigma_t: float, B_size: int, sigma0_sq: float) -> float:
    """Per-entry variance of the noise term in the averaged update:
    sigma0_sq / (sigma_t^2 * |B|^2)."""
    if sigma_t <= 0 or B_size < 1 or sigma0_sq <= 0:
        raise ValueError("sigma_t, B_size, sigma0_sq must be positive")
    return sigma0_sq / (sigma_t**2 * B_size**2)
