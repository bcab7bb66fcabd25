"""Convergence and energy certificates: single-round descent bounds, the
multi-round optimality-gap bound, regret/energy-cap constants, and trace
consistency diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .core import RoundTrace
from .scheduler import PenaltyCoeffs


class LearningRateTooLarge(ValueError):
    """The gap bound requires eta_t <= min(1/l, 1) for every round."""


class SearchSpaceTooLarge(ValueError):
    """Offline exhaustive search is capped to keep runtime sane."""


@dataclass(frozen=True)
class BoundReport:
    """A predicted bound next to what a run realized."""

    name: str
    predicted: float
    realized: float
    violated: bool
    slack: float


@dataclass(frozen=True)
class Theorem2Constants:
    """Constants of the budget-overshoot cap extracted from a trace.

    delta_0   worst |estimated - realized| round energy over computing devices
    theta_n   per-device worst |queue increment| (charged energy minus the
              pro-rata drain)
    theta_0   sum of theta_n^2 / 2
    """

    delta_0: float
    theta_n: np.ndarray

    @property
    def theta_0(self) -> float:
        return float(np.sum(self.theta_n**2) / 2.0)


def lemma1_bound(
    eta_t: float,
    l_smooth: float,
    G_sq: float,
    L_b: int,
    B_size: int,
    sigma_t: float,
    sigma0_sq: float,
    s: int,
    g_norm_sq: float,
) -> float:
    """Expected one-round loss change bound:
    -eta (1 - l*eta/2) ||g||^2 + (l*eta^2/2)(G^2/(L_b*B) + sigma0^2*s/(sigma^2*B^2)).
    """
    if B_size < 1:
        raise ValueError("B_size must be >= 1")
    descent = -eta_t * (1.0 - l_smooth * eta_t / 2.0) * g_norm_sq
    penalty = (l_smooth * eta_t**2 / 2.0) * (
        G_sq / (L_b * B_size) + sigma0_sq * s / (sigma_t**2 * B_size**2)
    )
    return descent + penalty


def theorem1_A_t(
    eta_t: float,
    G_sq: float,
    L_b: int,
    B_size: int,
    sigma_t: float,
    sigma0_sq: float,
    s: int,
) -> float:
    """Per-round additive penalty of the T-round gap bound:
    (eta_t / 2)(G^2/(L_b*B) + sigma0^2*s/(sigma^2*B^2))."""
    if B_size < 1:
        raise ValueError("B_size must be >= 1")
    return (eta_t / 2.0) * (
        G_sq / (L_b * B_size) + sigma0_sq * s / (sigma_t**2 * B_size**2)
    )


def theorem1_bound(
    initial_gap: float,
    mu: float,
    eta: Sequence[float],
    A: Sequence[float],
    l_smooth: float,
) -> float:
    """T-round expected optimality-gap bound under strong convexity:

    gap_T <= initial_gap * prod_{j=1}^{T} (1 - mu*eta_j)
             + sum_{i=1}^{T-1} A_i * prod_{j=i+1}^{T} (1 - mu*eta_j) + A_T.

    Requires eta_t <= min(1/l, 1) so every contraction factor lies in [0, 1).
    """
    if mu <= 0 or l_smooth <= 0:
        raise ValueError("mu and l_smooth must be > 0")
    eta = np.asarray(eta, dtype=float)
    A = np.asarray(A, dtype=float)
    if eta.shape != A.shape or eta.ndim != 1 or eta.size < 1:
        raise ValueError("eta and A must be 1-D sequences of equal length")
    ceiling = min(1.0 / l_smooth, 1.0)
    if np.any(eta > ceiling + 1e-15):
        raise LearningRateTooLarge(f"every eta_t must be <= {ceiling}")
    factors = 1.0 - mu * eta
    # suffix[i] = prod_{j>i} factors[j], with suffix[T-1] = 1
    suffix = np.ones_like(factors)
    suffix[:-1] = np.cumprod(factors[::-1])[::-1][1:]
    total = initial_gap * float(factors.prod()) + float(np.sum(A * suffix))
    return total


def theorem2_constants(
    traces: Sequence[RoundTrace], E_bar: np.ndarray, T: int
) -> Theorem2Constants:
    """Extract delta_0 and theta_n from a realized trace.

    The realized energy of a scheduled device is E_cp + E_tr_full (the
    transmit part at the true gain even if the device backed off); devices
    outside the schedule never realize a gradient norm, so they contribute no
    estimation-error sample. Queue increments use the charged energy.
    """
    E_bar = np.asarray(E_bar, dtype=float)
    N = E_bar.shape[0]
    drain = E_bar / T
    delta_0 = 0.0
    theta_n = np.zeros(N)
    for tr in traces:
        E_cp = np.asarray(tr.E_cp)
        E_tr = np.asarray(tr.E_tr)
        E_full = E_cp + np.asarray(tr.E_tr_full)
        E_est = np.asarray(tr.E_est)
        sched = np.zeros(N, dtype=bool)
        sched[list(tr.scheduled)] = True
        if sched.any():
            delta_0 = max(delta_0, float(np.abs(E_est - E_full)[sched].max()))
        charged = np.where(sched, E_cp + E_tr, 0.0)
        theta_n = np.maximum(theta_n, np.abs(charged - drain))
    return Theorem2Constants(delta_0=delta_0, theta_n=theta_n)


def theorem2_energy_bound(
    constants: Theorem2Constants,
    V: float,
    U_star_sum: float,
    T: int,
    E_bar: np.ndarray,
) -> np.ndarray:
    """Per-device cap on total consumed energy:
    Ebar_n + sqrt(2*V*U_star_sum + 2*theta_0*T^2 + 2*T*(T-1)*delta_0*sum theta)."""
    E_bar = np.asarray(E_bar, dtype=float)
    radicand = (
        2.0 * V * U_star_sum
        + 2.0 * constants.theta_0 * T**2
        + 2.0 * T * (T - 1) * constants.delta_0 * float(constants.theta_n.sum())
    )
    if radicand < 0:
        raise ValueError("negative radicand; check the supplied constants")
    return E_bar + np.sqrt(radicand)


def cumulative_penalty(traces: Sequence[RoundTrace], coeffs_for) -> float:
    """Sum of the per-round scheduling penalties u_t(k) realized by a run.

    ``coeffs_for(trace)`` must return the round's PenaltyCoeffs; the count k
    is the policy's pre-back-off choice, matching the objective the
    scheduler actually minimized.
    """
    total = 0.0
    for tr in traces:
        if tr.k_star < 1:
            continue
        coeffs: PenaltyCoeffs = coeffs_for(tr)
        total += float(coeffs.u_t(tr.k_star))
    return total


def pl_check(g_norm_sq: float, mu: float, gap: float, tol: float = 1e-9) -> bool:
    """Gradient-domination inequality ||g||^2 >= 2*mu*(F - F*)."""
    return g_norm_sq >= 2.0 * mu * gap - tol


def smoothness_check(
    F_w: float,
    F_v: float,
    grad_w: np.ndarray,
    w: np.ndarray,
    v: np.ndarray,
    l_smooth: float,
    tol: float = 1e-9,
) -> bool:
    """Descent inequality F(v) <= F(w) + <g_w, v-w> + (l/2)||v-w||^2."""
    d = v - w
    rhs = F_w + float(grad_w @ d) + 0.5 * l_smooth * float(d @ d)
    return F_v <= rhs + tol


def queue_identity_report(
    traces: Sequence[RoundTrace],
    q_init: np.ndarray,
    E_bar: np.ndarray,
    T: int,
    q_min: float,
    tol: float = 1e-12,
) -> dict:
    """Replay the queue recursion against a trace and check the drift
    identities q'^2 <= (q + y)^2 and y <= q' - q that the regret analysis
    rests on (exact when q_min == 0). Returns max violations observed."""
    q = np.asarray(q_init, dtype=float).copy()
    drain = np.asarray(E_bar, dtype=float) / T
    worst_recursion = 0.0
    worst_square = -np.inf
    worst_increment = -np.inf
    for tr in traces:
        beta = np.zeros_like(q)
        beta[list(tr.scheduled)] = 1.0
        charged = beta * (np.asarray(tr.E_cp) + np.asarray(tr.E_tr))
        y = charged - drain
        q_next = np.maximum(q + y, q_min)
        worst_recursion = max(
            worst_recursion, float(np.abs(q_next - np.asarray(tr.q)).max())
        )
        worst_square = max(worst_square, float((q_next**2 - (q + y) ** 2).max()))
        worst_increment = max(worst_increment, float((y - (q_next - q)).max()))
        q = q_next
    return {
        "max_recursion_mismatch": worst_recursion,
        "max_square_excess": worst_square,
        "max_increment_excess": worst_increment,
        "ok": worst_recursion <= tol
        and worst_square <= tol
        and worst_increment <= tol,
    }


def ledger_reconciliation(traces: Sequence[RoundTrace], spent: np.ndarray) -> float:
    """Max absolute gap between the trace's summed energies and the ledger."""
    total = np.zeros_like(np.asarray(spent, dtype=float))
    for tr in traces:
        total += np.asarray(tr.E_cp) + np.asarray(tr.E_tr)
    return float(np.abs(total - np.asarray(spent)).max())


def offline_optimal_penalty(
    E_full: np.ndarray,
    E_bar: np.ndarray,
    coeffs_per_round: Sequence[PenaltyCoeffs],
) -> tuple[float, list[tuple[int, ...]]]:
    """Exhaustive offline benchmark: the schedule minimizing the summed
    penalty sum_t u_t(k_t) over all per-round nonempty subsets that respect
    every device's total energy budget, with full knowledge of realized
    energies E_full[t, n]. Exponential; intended for T*N <= ~24.

    Returns (best penalty, chosen subsets); (inf, []) when infeasible.
    """
    E_full = np.asarray(E_full, dtype=float)
    T, N = E_full.shape
    if T * N > 24:
        raise SearchSpaceTooLarge(f"search space 2^{T * N} refused")
    subsets = []
    for k in range(1, N + 1):
        subsets.extend(combinations(range(N), k))
    best = [float("inf"), []]

    def recurse(t: int, spent: np.ndarray, penalty: float, chosen: list):
        if penalty >= best[0]:
            return
        if t == T:
            best[0] = penalty
            best[1] = list(chosen)
            return
        for S in subsets:
            cost = E_full[t, list(S)]
            nxt = spent.copy()
            nxt[list(S)] += cost
            if np.any(nxt > E_bar + 1e-12):
                continue
            chosen.append(S)
            recurse(t + 1, nxt, penalty + float(coeffs_per_round[t].u_t(len(S))), chosen)
            chosen.pop()

    recurse(0, np.zeros(N), 0.0, [])
    return best[0], best[1]
