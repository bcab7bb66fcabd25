"""Shared value types, configuration validation, and deterministic RNG streams.

Every stochastic component of a run (channel draws, observation error, batch
sampling, receiver noise, model init) pulls from its own named substream so
that runs are reproducible and components stay decoupled from draw order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np


class ConfigError(Exception):
    """Base class for configuration rejection."""


class MissingKey(ConfigError):
    def __init__(self, name: str):
        super().__init__(f"missing required config key: {name!r}")
        self.name = name


class InvalidValue(ConfigError):
    def __init__(self, name: str, reason: str):
        super().__init__(f"invalid config value for {name!r}: {reason}")
        self.name = name
        self.reason = reason


@dataclass(frozen=True)
class Hyperparams:
    """Run-level constants. ``eta`` is always a length-``T`` tuple."""

    T: int
    N: int
    s: int
    L_b: int
    eta: tuple[float, ...]
    gamma0: float
    sigma0_sq: float
    V: float
    L_e: int
    q_min: float = 0.1
    momentum: float = 0.0
    K_local: int = 1
    delta_h: float = 0.5
    l_smooth: float | None = None
    mu: float | None = None
    G_sq: float | None = None

    def eta_at(self, t: int) -> float:
        """Learning rate for 1-based round index ``t``."""
        return self.eta[t - 1]


@dataclass(frozen=True)
class DeviceConfig:
    """Per-device energy model: Joules per processed sample and total budget."""

    e_n: float
    E_bar_n: float


@dataclass(frozen=True)
class RoundTrace:
    """Everything observable about one completed round.

    ``scheduled`` is the policy's selection; ``transmitted`` excludes devices
    that backed off after comparing realized against estimated energy.
    ``E_tr_full`` records the would-be transmit energy at the true gain for
    every device that computed, whether or not it transmitted.
    """

    t: int
    loss: float
    accuracy: float
    sigma_t: float
    k_star: int
    scheduled: tuple[int, ...]
    transmitted: tuple[int, ...]
    snr: float
    unified_energy: float
    q: tuple[float, ...]
    E_est: tuple[float, ...]
    E_cp: tuple[float, ...]
    E_tr: tuple[float, ...]
    E_tr_full: tuple[float, ...]
    backed_off: tuple[bool, ...]


CORE_KEYS = frozenset(
    {
        "T",
        "N",
        "s",
        "L_b",
        "L_e",
        "eta",
        "gamma0",
        "sigma0_sq",
        "V",
        "q_min",
        "momentum",
        "K_local",
        "delta_h",
        "l_smooth",
        "mu",
        "G_sq",
        "e_n",
        "E_cp_round",
        "E_bar_n",
    }
)

_REQUIRED = ("T", "N", "s", "L_b", "eta", "gamma0", "sigma0_sq", "V", "E_bar_n")


def _as_int(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise InvalidValue(name, f"expected an integer, got {value!r}")
    return int(value)


def _as_float(name: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float, np.floating)):
        raise InvalidValue(name, f"expected a number, got {value!r}")
    return float(value)


def _per_device(name: str, value, N: int) -> tuple[float, ...]:
    """Broadcast a scalar to N devices or validate a length-N list."""
    if isinstance(value, (list, tuple)):
        if len(value) != N:
            raise InvalidValue(name, f"expected {N} entries, got {len(value)}")
        return tuple(_as_float(f"{name}[{i}]", v) for i, v in enumerate(value))
    return (_as_float(name, value),) * N


def validate_config(raw: Mapping) -> tuple[Hyperparams, list[DeviceConfig]]:
    """Validate a flat config mapping into (Hyperparams, per-device configs).

    Unknown keys are rejected so typos fail loudly. ``eta`` may be a scalar
    (held constant) or a length-``T`` list. Exactly one of ``e_n`` and
    ``E_cp_round`` must be present; ``E_cp_round`` is converted via
    e_n = E_cp_round / (L_b * K_local).
    """
    for key in raw:
        if key not in CORE_KEYS:
            raise InvalidValue(key, "unknown key")
    for key in _REQUIRED:
        if key not in raw:
            raise MissingKey(key)
    if "e_n" not in raw and "E_cp_round" not in raw:
        raise MissingKey("e_n")
    if "e_n" in raw and "E_cp_round" in raw:
        raise InvalidValue("E_cp_round", "mutually exclusive with e_n")

    T = _as_int("T", raw["T"])
    N = _as_int("N", raw["N"])
    s = _as_int("s", raw["s"])
    L_b = _as_int("L_b", raw["L_b"])
    if T < 1:
        raise InvalidValue("T", "must be >= 1")
    if N < 1:
        raise InvalidValue("N", "must be >= 1")
    if s < 1:
        raise InvalidValue("s", "must be >= 1")
    if L_b < 1:
        raise InvalidValue("L_b", "must be >= 1")

    K_local = _as_int("K_local", raw.get("K_local", 1))
    if K_local < 1:
        raise InvalidValue("K_local", "must be >= 1")

    L_e = _as_int("L_e", raw.get("L_e", L_b))
    if not 1 <= L_e <= L_b:
        raise InvalidValue("L_e", "must satisfy 1 <= L_e <= L_b")

    eta_raw = raw["eta"]
    if isinstance(eta_raw, (list, tuple)):
        if len(eta_raw) != T:
            raise InvalidValue("eta", f"expected length {T}, got {len(eta_raw)}")
        eta = tuple(_as_float(f"eta[{i}]", v) for i, v in enumerate(eta_raw))
    else:
        eta = (_as_float("eta", eta_raw),) * T
    if any(v <= 0 for v in eta):
        raise InvalidValue("eta", "entries must be > 0")

    gamma0 = _as_float("gamma0", raw["gamma0"])
    if gamma0 <= 0:
        raise InvalidValue("gamma0", "must be > 0")
    sigma0_sq = _as_float("sigma0_sq", raw["sigma0_sq"])
    if sigma0_sq <= 0:
        raise InvalidValue("sigma0_sq", "must be > 0")
    V = _as_float("V", raw["V"])
    if V <= 0:
        raise InvalidValue("V", "must be > 0")
    q_min = _as_float("q_min", raw.get("q_min", 0.1))
    if q_min < 0:
        raise InvalidValue("q_min", "must be >= 0")
    momentum = _as_float("momentum", raw.get("momentum", 0.0))
    if not 0.0 <= momentum < 1.0:
        raise InvalidValue("momentum", "must lie in [0, 1)")
    delta_h = _as_float("delta_h", raw.get("delta_h", 0.5))
    if delta_h < 0:
        raise InvalidValue("delta_h", "must be >= 0")

    optional: dict[str, float | None] = {}
    for key, positive in (("l_smooth", True), ("mu", True), ("G_sq", False)):
        if raw.get(key) is None:
            optional[key] = None
            continue
        value = _as_float(key, raw[key])
        if positive and value <= 0:
            raise InvalidValue(key, "must be > 0")
        if not positive and value < 0:
            raise InvalidValue(key, "must be >= 0")
        optional[key] = value

    if "E_cp_round" in raw:
        per_round = _per_device("E_cp_round", raw["E_cp_round"], N)
        e_n = tuple(v / (L_b * K_local) for v in per_round)
    else:
        e_n = _per_device("e_n", raw["e_n"], N)
    E_bar = _per_device("E_bar_n", raw["E_bar_n"], N)
    for i, v in enumerate(e_n):
        if v <= 0:
            raise InvalidValue("e_n", f"device {i}: must be > 0")
    for i, v in enumerate(E_bar):
        if v <= 0:
            raise InvalidValue("E_bar_n", f"device {i}: must be > 0")

    hp = Hyperparams(
        T=T,
        N=N,
        s=s,
        L_b=L_b,
        eta=eta,
        gamma0=gamma0,
        sigma0_sq=sigma0_sq,
        V=V,
        L_e=L_e,
        q_min=q_min,
        momentum=momentum,
        K_local=K_local,
        delta_h=delta_h,
        l_smooth=optional["l_smooth"],
        mu=optional["mu"],
        G_sq=optional["G_sq"],
    )
    devices = [DeviceConfig(e_n=e_n[i], E_bar_n=E_bar[i]) for i in range(N)]
    return hp, devices


def derive_stream(
    master_seed: int, purpose: str, device: int = 0, round_index: int = 0
) -> np.random.Generator:
    """Independent generator keyed by (seed, purpose, device, round).

    The purpose string is hashed to a 64-bit tag so distinct purposes can
    never collide with (device, round) coordinates.
    """
    tag = int.from_bytes(
        hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest(), "big"
    )
    seq = np.random.SeedSequence(
        [int(master_seed) & 0xFFFFFFFFFFFFFFFF, tag, int(device), int(round_index)]
    )
    return np.random.default_rng(seq)
