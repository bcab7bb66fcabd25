"""Fading channel, imperfect channel observation, and receiver noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ChannelRealization:
    """True gains and the (possibly erroneous) gains the scheduler sees."""

    h: np.ndarray
    h_obs: np.ndarray


def sample_channel(N: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Draw N strictly positive Rayleigh-distributed channel gains."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if scale <= 0:
        raise ValueError("scale must be > 0")
    gains = rng.rayleigh(scale, size=N)
    # exact zeros have probability zero but would break power alignment
    zero = gains <= 0.0
    while np.any(zero):
        gains[zero] = rng.rayleigh(scale, size=int(zero.sum()))
        zero = gains <= 0.0
    return gains


def observe_channel(
    h: np.ndarray, error_fraction: float, rng: np.random.Generator
) -> np.ndarray:
    """Gains as observed by the scheduler.

    Each gain is scaled by an independent uniform factor on
    [1 - error_fraction, 1 + error_fraction]. With error_fraction == 0 the
    observation is the exact truth (no RNG draw is consumed).
    """
    if not 0.0 <= error_fraction < 1.0:
        raise ValueError("error_fraction must lie in [0, 1)")
    h = np.asarray(h, dtype=float)
    if error_fraction == 0.0:
        return h.copy()
    factors = rng.uniform(1.0 - error_fraction, 1.0 + error_fraction, size=h.shape)
    return h * factors


def realize_channel(
    N: int,
    scale: float,
    error_fraction: float,
    rng_gain: np.random.Generator,
    rng_obs: np.random.Generator,
) -> ChannelRealization:
    h = sample_channel(N, scale, rng_gain)
    h_obs = observe_channel(h, error_fraction, rng_obs)
    return ChannelRealization(h=h, h_obs=h_obs)


def sample_noise(s: int, sigma0_sq: float, rng: np.random.Generator) -> np.ndarray:
    """Additive receiver noise: s iid Gaussian entries of variance sigma0_sq."""
    if s < 1:
        raise ValueError("s must be >= 1")
    if sigma0_sq <= 0:
        raise ValueError("sigma0_sq must be > 0")
    return rng.normal(0.0, np.sqrt(sigma0_sq), size=s)
