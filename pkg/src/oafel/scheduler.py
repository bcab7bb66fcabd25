"""Energy-aware device scheduling: virtual energy queues, gradient-norm
estimators, the drift-plus-penalty selection rule with its brute-force
oracle, baseline policies, and the per-round simulation step."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import channel as channel_mod
from . import otaa
from .core import DeviceConfig, Hyperparams, RoundTrace, derive_stream
from .learner import Dataset, local_gradient, local_update_multi

POLICIES = ("dynamic", "myopic", "all")
ESTIMATORS = ("est_p", "est_c")


class MissingInitialReport(ValueError):
    """EST-P has no stored norm for at least one device."""


class TooManyDevices(ValueError):
    """Brute-force subset enumeration is capped to keep runtime sane."""


@dataclass(frozen=True)
class PenaltyCoeffs:
    """Constants of the per-round scheduling objective.

    u_t(k) is the optimality-gap penalty of scheduling k devices this round:
    (l * eta^2 / 2) * (G_sq / (L_b * k) + sigma0_sq * s / (sigma_t^2 * k^2)).
    """

    V: float
    l_smooth: float
    eta_t: float
    G_sq: float
    L_b: int
    sigma0_sq: float
    s: int
    sigma_t: float

    def u_t(self, k) -> np.ndarray | float:
        k = np.asarray(k, dtype=float)
        lead = self.l_smooth * self.eta_t**2 / 2.0
        val = lead * (
            self.G_sq / (self.L_b * k)
            + self.sigma0_sq * self.s / (self.sigma_t**2 * k**2)
        )
        return val if val.ndim else float(val)


@dataclass(frozen=True)
class RoundDecision:
    """A policy's output for one round. ``objective`` is the achieved
    V * u_t(k) + drift value for policies that minimize it, NaN otherwise."""

    beta: tuple[int, ...]
    B: tuple[int, ...]
    sigma_t: float
    E_est: tuple[float, ...]
    k_star: int
    objective: float
    v_values: tuple[float, ...] | None = None


@dataclass
class EnergyLedger:
    """Cumulative realized energy per device plus the per-round records."""

    budget: np.ndarray
    spent: np.ndarray = field(init=False)
    rounds: list[dict] = field(init=False, default_factory=list)

    def __post_init__(self):
        self.budget = np.asarray(self.budget, dtype=float)
        self.spent = np.zeros_like(self.budget)

    def charge(self, E_cp: np.ndarray, E_tr: np.ndarray, E_est: np.ndarray):
        E_cp = np.asarray(E_cp, dtype=float)
        E_tr = np.asarray(E_tr, dtype=float)
        self.spent = self.spent + E_cp + E_tr
        self.rounds.append(
            {
                "E_cp": E_cp.copy(),
                "E_tr": E_tr.copy(),
                "E_total": E_cp + E_tr,
                "E_est": np.asarray(E_est, dtype=float).copy(),
            }
        )

    def unified_usage(self, t: int, T: int) -> float:
        """Worst-case fraction of the pro-rata budget consumed by round t."""
        return float(np.max(self.spent / (t * self.budget / T)))

    def remaining(self) -> np.ndarray:
        return self.budget - self.spent


def queue_update(
    q: np.ndarray | float,
    beta: np.ndarray | int,
    E_actual: np.ndarray | float,
    E_bar_over_T: np.ndarray | float,
    q_min: float,
) -> np.ndarray | float:
    """Virtual queue recursion q' = max(q + beta * E - Ebar/T, q_min)."""
    q = np.asarray(q, dtype=float)
    updated = np.maximum(q + np.asarray(beta) * np.asarray(E_actual) - E_bar_over_T, q_min)
    return updated if updated.ndim else float(updated)


def est_p(last_norm_sq: np.ndarray) -> np.ndarray:
    """Previous-round estimator: reuse each device's last reported ||g||^2."""
    est = np.asarray(last_norm_sq, dtype=float)
    if np.any(np.isnan(est)):
        raise MissingInitialReport("EST-P requires a stored norm for every device")
    return est.copy()


def est_c(
    model,
    w: np.ndarray,
    shard: Dataset,
    L_e: int,
    e_n: float,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Current-round estimator: a small probe batch of size L_e computed
    before scheduling. Returns (||g_probe||^2, probe energy e_n * L_e)."""
    result = local_gradient(model, w, shard, L_e, rng)
    return result.norm_sq, e_n * L_e


def estimate_energy(
    sigma_t: float,
    h_obs: np.ndarray,
    norm_sq_est: np.ndarray,
    e_n: np.ndarray,
    L_b: int,
    K_local: int = 1,
) -> np.ndarray:
    """Pre-round energy estimate: sigma_t^2 * ||g_est||^2 / h_obs^2 plus the
    full local computation cost e_n * L_b * K_local."""
    h_obs = np.asarray(h_obs, dtype=float)
    if np.any(h_obs <= 0):
        raise ValueError("observed gains must be > 0")
    tr = sigma_t**2 * np.asarray(norm_sq_est, dtype=float) / h_obs**2
    cp = np.asarray(e_n, dtype=float) * L_b * K_local
    return tr + cp


def schedule_round(
    queues: np.ndarray, E_est: np.ndarray, coeffs: PenaltyCoeffs
) -> RoundDecision:
    """Drift-plus-penalty selection.

    Sort devices by drift cost C_n = q_n * E_est_n ascending (ties broken by
    device index), evaluate v(k) = V * u_t(k) + sum of the k smallest C, and
    schedule the k* = argmin v(k) cheapest devices. The first minimizing k
    wins ties, and the scheduled set is always a prefix of the sort order,
    which makes this the exact minimizer over nonempty subsets.
    """
    queues = np.asarray(queues, dtype=float)
    E_est = np.asarray(E_est, dtype=float)
    N = queues.shape[0]
    C = queues * E_est
    order = np.argsort(C, kind="stable")
    prefix = np.cumsum(C[order])
    ks = np.arange(1, N + 1)
    v = coeffs.V * coeffs.u_t(ks) + prefix
    k_star = int(np.argmin(v)) + 1
    chosen = np.sort(order[:k_star])
    beta = np.zeros(N, dtype=int)
    beta[chosen] = 1
    return RoundDecision(
        beta=tuple(int(b) for b in beta),
        B=tuple(int(n) for n in chosen),
        sigma_t=coeffs.sigma_t,
        E_est=tuple(float(x) for x in E_est),
        k_star=k_star,
        objective=float(v[k_star - 1]),
        v_values=tuple(float(x) for x in v),
    )


def brute_force_schedule(
    queues: np.ndarray, E_est: np.ndarray, coeffs: PenaltyCoeffs
) -> RoundDecision:
    """Exact oracle: enumerate every nonempty subset and minimize
    V * u_t(|S|) + sum_{n in S} q_n * E_est_n. Vectorized over bitmasks;
    refuses N > 20."""
    queues = np.asarray(queues, dtype=float)
    E_est = np.asarray(E_est, dtype=float)
    N = queues.shape[0]
    if N > 20:
        raise TooManyDevices(f"brute force over 2^{N} subsets refused")
    C = queues * E_est
    masks = np.arange(1, 2**N, dtype=np.int64)
    bits = (masks[:, None] >> np.arange(N)) & 1
    drift = bits @ C
    sizes = bits.sum(axis=1)
    objective = coeffs.V * coeffs.u_t(sizes) + drift
    best = int(np.argmin(objective))
    beta = bits[best]
    chosen = np.flatnonzero(beta)
    return RoundDecision(
        beta=tuple(int(b) for b in beta),
        B=tuple(int(n) for n in chosen),
        sigma_t=coeffs.sigma_t,
        E_est=tuple(float(x) for x in E_est),
        k_star=int(sizes[best]),
        objective=float(objective[best]),
        v_values=None,
    )


def myopic_schedule(
    ledger: EnergyLedger, E_est: np.ndarray, t: int, T: int, sigma_t: float
) -> RoundDecision:
    """Greedy baseline: schedule device n iff its estimated round energy
    fits the evenly split remaining budget, E_est <= remaining / (T - t + 1).
    The schedule may be empty."""
    E_est = np.asarray(E_est, dtype=float)
    cap = ledger.remaining() / (T - t + 1)
    beta = (E_est <= cap).astype(int)
    chosen = np.flatnonzero(beta)
    return RoundDecision(
        beta=tuple(int(b) for b in beta),
        B=tuple(int(n) for n in chosen),
        sigma_t=sigma_t,
        E_est=tuple(float(x) for x in E_est),
        k_star=int(beta.sum()),
        objective=float("nan"),
        v_values=None,
    )


def all_schedule(E_est: np.ndarray, sigma_t: float) -> RoundDecision:
    """Benchmark: every device participates every round."""
    E_est = np.asarray(E_est, dtype=float)
    N = E_est.shape[0]
    return RoundDecision(
        beta=(1,) * N,
        B=tuple(range(N)),
        sigma_t=sigma_t,
        E_est=tuple(float(x) for x in E_est),
        k_star=N,
        objective=float("nan"),
        v_values=None,
    )


def reschedule_filter(
    scheduled: Sequence[int],
    E_actual: Mapping[int, float],
    E_est: Mapping[int, float],
    threshold: float | Mapping[int, float],
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Post-compute back-off: a scheduled device withdraws from transmission
    when its realized energy exceeds the estimate by more than its threshold.
    Returns (kept, backed_off), both ascending."""
    kept, backed = [], []
    for n in sorted(scheduled):
        thr = threshold[n] if isinstance(threshold, Mapping) else threshold
        if E_actual[n] - E_est[n] > thr:
            backed.append(n)
        else:
            kept.append(n)
    return tuple(kept), tuple(backed)


@dataclass
class SimState:
    """Mutable state threaded through run_round."""

    hp: Hyperparams
    devices: list[DeviceConfig]
    model: object
    shards: list[Dataset]
    w: np.ndarray
    q: np.ndarray
    ledger: EnergyLedger
    last_norm_sq: np.ndarray
    master_seed: int
    t: int = 1
    obs_error: float = 0.0
    channel_scale: float = 1.0
    sigma_mode: str = "paper"
    sigma_fixed: float | None = None
    estimator: str = "est_p"
    train_X: np.ndarray | None = None
    train_y: np.ndarray | None = None
    test_X: np.ndarray | None = None
    test_y: np.ndarray | None = None

    @property
    def e_n(self) -> np.ndarray:
        return np.array([d.e_n for d in self.devices])

    @property
    def E_bar(self) -> np.ndarray:
        return np.array([d.E_bar_n for d in self.devices])


def _evaluate(state: SimState, t: int) -> tuple[float, float]:
    loss = float("nan")
    acc = float("nan")
    if state.train_X is not None:
        loss = float(state.model.loss(state.w, state.train_X, state.train_y))
    if state.test_X is not None:
        # long horizons score the test set every 10th round to bound cost
        every = 1 if state.hp.T <= 500 else 10
        if t % every == 0 or t == state.hp.T:
            acc = float(state.model.accuracy(state.w, state.test_X, state.test_y))
    return loss, acc


def run_round(state: SimState, policy: str) -> RoundTrace:
    """Advance the simulation by one round under the given policy.

    Order of operations: norm estimation, power scalar, channel draw and
    observation, energy estimation, scheduling, local computation, back-off
    filtering, aggregation, then ledger/queue updates. Mutates ``state`` in
    place and returns the round's trace.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
    hp, t = state.hp, state.t
    if t > hp.T:
        raise ValueError(f"round {t} exceeds horizon T={hp.T}")
    N = hp.N
    eta_t = hp.eta_at(t)
    e_n = state.e_n
    E_bar = state.E_bar

    probe_E = np.zeros(N)
    if state.estimator == "est_c":
        norm_est = np.empty(N)
        for n in range(N):
            rng = derive_stream(state.master_seed, "probe", n, t)
            norm_est[n], probe_E[n] = est_c(
                state.model, state.w, state.shards[n], hp.L_e, float(e_n[n]), rng
            )
    elif state.estimator == "est_p":
        norm_est = est_p(state.last_norm_sq)
    else:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")

    if state.sigma_fixed is not None:
        sigma_t = float(state.sigma_fixed)
    else:
        sigma_t = otaa.power_scalar(
            norm_est, hp.gamma0, hp.sigma0_sq, hp.s, mode=state.sigma_mode
        )

    real = channel_mod.realize_channel(
        N,
        state.channel_scale,
        state.obs_error,
        derive_stream(state.master_seed, "channel", 0, t),
        derive_stream(state.master_seed, "channel_obs", 0, t),
    )
    E_est = estimate_energy(sigma_t, real.h_obs, norm_est, e_n, hp.L_b, hp.K_local)

    if policy == "dynamic":
        if hp.l_smooth is None or hp.G_sq is None:
            raise ValueError("dynamic policy needs l_smooth and G_sq configured")
        coeffs = PenaltyCoeffs(
            V=hp.V,
            l_smooth=hp.l_smooth,
            eta_t=eta_t,
            G_sq=hp.G_sq,
            L_b=hp.L_b,
            sigma0_sq=hp.sigma0_sq,
            s=hp.s,
            sigma_t=sigma_t,
        )
        decision = schedule_round(state.q, E_est, coeffs)
    elif policy == "myopic":
        decision = myopic_schedule(state.ledger, E_est, t, hp.T, sigma_t)
    else:
        decision = all_schedule(E_est, sigma_t)

    E_cp = probe_E.copy()
    E_tr = np.zeros(N)
    E_tr_full = np.zeros(N)
    gradients: dict[int, np.ndarray] = {}
    for n in decision.B:
        rng = derive_stream(state.master_seed, "batch", n, t)
        result = local_update_multi(
            state.model,
            state.w,
            state.shards[n],
            hp.K_local,
            hp.L_b,
            eta_t,
            hp.momentum,
            rng,
        )
        gradients[n] = result.gradient
        state.last_norm_sq[n] = result.norm_sq
        # probe cost is part of the round's compute budget, not extra
        E_cp[n] = e_n[n] * hp.L_b * hp.K_local
        E_tr_full[n] = otaa.transmit_energy(sigma_t, float(real.h[n]), result.norm_sq)

    if policy == "all":
        kept, backed = tuple(decision.B), ()
    else:
        kept, backed = reschedule_filter(
            decision.B,
            {n: E_cp[n] + E_tr_full[n] for n in decision.B},
            {n: E_est[n] for n in decision.B},
            {n: hp.delta_h * E_est[n] for n in decision.B},
        )

    snr = float("nan")
    if kept:
        noise = channel_mod.sample_noise(
            hp.s, hp.sigma0_sq, derive_stream(state.master_seed, "noise", 0, t)
        )
        outcome = otaa.aggregate(
            state.w, {n: gradients[n] for n in kept}, real.h, sigma_t, eta_t, noise
        )
        state.w = outcome.w_next
        snr = outcome.snr
        for n in kept:
            E_tr[n] = outcome.E_tr[n]

    state.ledger.charge(E_cp, E_tr, E_est)
    beta = np.asarray(decision.beta)
    state.q = queue_update(state.q, beta, E_cp * beta + E_tr, E_bar / hp.T, hp.q_min)
    state.t = t + 1

    loss, acc = _evaluate(state, t)
    return RoundTrace(
        t=t,
        loss=loss,
        accuracy=acc,
        sigma_t=sigma_t,
        k_star=decision.k_star,
        scheduled=decision.B,
        transmitted=kept,
        snr=snr,
        unified_energy=state.ledger.unified_usage(t, hp.T),
        q=tuple(float(x) for x in state.q),
        E_est=tuple(float(x) for x in E_est),
        E_cp=tuple(float(x) for x in E_cp),
        E_tr=tuple(float(x) for x in E_tr),
        E_tr_full=tuple(float(x) for x in E_tr_full),
        backed_off=tuple(n in backed for n in range(N)),
    )
