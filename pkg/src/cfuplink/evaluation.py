"""True SINR and spectral efficiency of a finished allocation.

Centralized evaluation decodes every scheduled user with a joint MMSE
receiver over all the APs of its cluster. Distributed evaluation lets
each processing group (an AP or a CPU) form a local MMSE estimate on its
share of the cluster; the group estimates are then combined with the
SINR-optimal weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fp_centralized import effective_channels, initial_vectors
from .model import SimConfig, ap_rows, group_by_length, hermitian_solve

CENTRAL_MODES = ("centralized", "round-robin")
AP_MODES = ("distributed", "dist-decentralized")
CPU_MODES = ("semi", "semi-decentralized")
ALL_MODES = ("centralized", "distributed", "semi", "dist-decentralized", "semi-decentralized", "round-robin")

RBAR_FLOOR = 1e-6


@dataclass
class TimeSlotResult:
    sinr: np.ndarray
    se: np.ndarray
    scheduled: np.ndarray
    mode: str = ""
    timeslot: int = 0
    converged: bool = True

    @property
    def sum_se(self) -> float:
        return float(np.sum(self.se))

    @property
    def jain(self) -> float:
        return jains_index(self.se)


def spectral_efficiency(sinr) -> np.ndarray:
    return np.log2(1.0 + np.maximum(np.asarray(sinr, dtype=float), 0.0))


def _masked(V, scheduled):
    return np.where(np.asarray(scheduled, bool)[:, None], V, 0.0)


# -- centralized --------------------------------------------------------------

def mmse_receiver_centralized(u: int, V, channels, topo, scheduled=None) -> np.ndarray:
    """``(sigma^2 I + sum_u' H_u' v_u' v_u'^H H_u'^H)^{-1} H_u v_u`` on the rows of ``C_u``.

    The sum runs over the scheduled users (all users when ``scheduled`` is None).
    """
    V = np.asarray(V)
    if scheduled is not None:
        V = _masked(V, scheduled)
    rows = ap_rows(topo.cluster(u), channels.M)
    e = effective_channels(channels.stacked()[rows], V)
    B = channels.sigma2 * np.eye(len(rows)) + e @ e.conj().T
    return np.linalg.solve(B, e[:, u])


def sinr_with_receiver(u: int, w, V, channels, topo, scheduled=None) -> float:
    """SINR of user ``u`` for an arbitrary receiver ``w`` on the rows of ``C_u``."""
    V = np.asarray(V)
    if scheduled is not None:
        if not scheduled[u]:
            return 0.0
        V = _masked(V, scheduled)
    rows = ap_rows(topo.cluster(u), channels.M)
    e = effective_channels(channels.stacked()[rows], V)
    z = np.abs(np.conj(w) @ e) ** 2
    den = channels.sigma2 * np.real(np.vdot(w, w)) + z.sum() - z[u]
    return float(z[u] / den)


def true_sinr_centralized(V, scheduled, channels, topo) -> np.ndarray:
    """Per-user SINR with joint MMSE detection; unscheduled users get 0.

    ``s^H (sigma^2 I + sum_{u' != u} e_u' e_u'^H)^{-1} s`` with ``s`` the
    received signature of ``u`` on the rows of its cluster.
    """
    scheduled = np.asarray(scheduled, bool)
    U = topo.n_users
    out = np.zeros(U)
    users = np.flatnonzero(scheduled)
    if len(users) == 0:
        return out
    Hs = channels.stacked()
    e = effective_channels(Hs, _masked(V, scheduled))
    K = e @ e.conj().T
    rows = [ap_rows(topo.cluster(u), channels.M) for u in users]
    for pos, idx in group_by_length(rows):
        uu = users[pos]
        s = e[idx, uu[:, None]]
        d = idx.shape[1]
        B = channels.sigma2 * np.eye(d) + K[idx[:, :, None], idx[:, None, :]] - s[:, :, None] * s.conj()[:, None, :]
        out[uu] = np.real(np.einsum("ki,ki->k", s.conj(), hermitian_solve(B, s)))
    return np.maximum(out, 0.0)


# -- distributed / semi-distributed -------------------------------------------

@dataclass
class CombiningResult:
    """Local receivers and combining weights of one user.

    ``groups`` lists the processing groups that decode the user, ``W`` the
    matching local receivers (each on its own rows), ``g`` the matrix of
    combined signatures ``g[:, u']`` and ``a`` the combining weights.
    """

    groups: list
    rows: list
    W: list
    g: np.ndarray
    noise: np.ndarray
    a: np.ndarray
    sinr: float = 0.0


def _local_pairs(topo, processors, assignment, M):
    pg, pu, rows = [], [], []
    for gi, group in enumerate(processors):
        group = np.sort(np.asarray(group, int))
        for u in np.flatnonzero(assignment[gi]):
            aps = group[topo.serving[u, group]]
            if len(aps) == 0:
                continue
            pg.append(gi)
            pu.append(u)
            rows.append(ap_rows(aps, M))
    return np.array(pg, dtype=int), np.array(pu, dtype=int), rows


def _combine(G, u, noise):
    """SINR-optimal combining of the group estimates of user ``u``."""
    g = G[:, u]
    C = np.diag(noise).astype(complex) + G @ G.conj().T - np.outer(g, g.conj())
    a = np.linalg.solve(C, g)
    return a, float(max(np.real(np.vdot(g, a)), 0.0))


def distributed_sinr(a, G, u, noise) -> float:
    """``|a^H g_uu|^2 / (a^H F a + sum_{u' != u} |a^H g_uu'|^2)`` for any weights ``a``."""
    z = np.abs(np.conj(a) @ G) ** 2
    den = np.real(np.sum(noise * np.abs(a) ** 2)) + z.sum() - z[u]
    return float(z[u] / den) if den > 0 else 0.0


def _all_combining(V, scheduled, channels, topo, processors, assignment):
    scheduled = np.asarray(scheduled, bool)
    assignment = np.asarray(assignment, bool) & scheduled[None, :]
    Hs = channels.stacked()
    e = effective_channels(Hs, _masked(V, scheduled))
    K = e @ e.conj().T
    pg, pu, rows = _local_pairs(topo, processors, assignment, channels.M)
    W = np.zeros((Hs.shape[0], len(pu)), complex)
    for pos, idx in group_by_length(rows):
        d = idx.shape[1]
        B = channels.sigma2 * np.eye(d) + K[idx[:, :, None], idx[:, None, :]]
        W[idx, pos[:, None]] = hermitian_solve(B, e[idx, pu[pos][:, None]])
    Z = W.conj().T @ e  # (pairs, U): w_gu^H H_gu' v_u'
    noise = channels.sigma2 * np.sum(np.abs(W) ** 2, axis=0)
    return pg, pu, rows, W, Z, noise


def local_receivers_and_combining(u: int, V, scheduled, channels, topo, processors, assignment) -> CombiningResult:
    """Local MMSE receivers of the groups decoding ``u`` and the combining weights."""
    pg, pu, rows, W, Z, noise = _all_combining(V, scheduled, channels, topo, processors, assignment)
    k = np.flatnonzero(pu == u)
    if len(k) == 0:
        return CombiningResult([], [], [], np.zeros((0, topo.n_users), complex), np.zeros(0), np.zeros(0, complex))
    a, sinr = _combine(Z[k], u, noise[k])
    return CombiningResult(list(pg[k]), [rows[i] for i in k], [W[rows[i], i] for i in k], Z[k], noise[k], a, sinr)


def true_sinr_distributed(V, scheduled, channels, topo, processors, assignment) -> np.ndarray:
    """Per-user SINR after SINR-optimal combining of the local group estimates."""
    out = np.zeros(topo.n_users)
    pg, pu, rows, W, Z, noise = _all_combining(V, scheduled, channels, topo, processors, assignment)
    if len(pu) == 0:
        return out
    order = np.argsort(pu, kind="stable")
    bounds = np.flatnonzero(np.diff(pu[order])) + 1
    for k in np.split(order, bounds):
        u = pu[k[0]]
        _, out[u] = _combine(Z[k], u, noise[k])
    return out


# -- metrics, weights and the baseline ----------------------------------------

def jains_index(values) -> float:
    x = np.asarray(values, dtype=float)
    s2 = np.sum(x**2)
    if x.size == 0 or s2 == 0:
        return 1.0
    return float(np.sum(x) ** 2 / (x.size * s2))


@dataclass
class FairnessState:
    rbar: np.ndarray
    eta: float = 0.2

    @classmethod
    def initial(cls, n_users: int, eta: float = 0.2) -> "FairnessState":
        return cls(np.ones(n_users), eta)

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / np.maximum(self.rbar, RBAR_FLOOR)


def pf_update(state: FairnessState, slot: TimeSlotResult):
    """Exponential average of the achieved SE; returns ``(next weights, next state)``."""
    if not 0.0 < state.eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    rbar = state.eta * np.asarray(slot.se, float) + (1.0 - state.eta) * state.rbar
    rbar = np.maximum(rbar, RBAR_FLOOR)
    nxt = FairnessState(rbar, state.eta)
    return nxt.weights, nxt


def round_robin_groups(n_users: int, group_count: int, slot: int) -> np.ndarray:
    if group_count < 1:
        raise ValueError("group_count must be at least 1")
    return np.arange(n_users) % group_count == slot % group_count


def round_robin_baseline(topo, channels, cfg: SimConfig, group_count: int = 2, slot: int = 0) -> TimeSlotResult:
    """Users ``u`` with ``u mod group_count == slot mod group_count`` transmit at full power."""
    sched = round_robin_groups(topo.n_users, group_count, slot)
    rows = [ap_rows(topo.cluster(u), cfg.M) for u in range(topo.n_users)]
    V = initial_vectors(channels.stacked(), rows, cfg)
    sinr = true_sinr_centralized(V, sched, channels, topo)
    return TimeSlotResult(sinr, np.where(sched, spectral_efficiency(sinr), 0.0), sched, "round-robin", slot)


def evaluate(result, channels, topo, mode: str = None, timeslot: int = 0) -> TimeSlotResult:
    """True SINR/SE of an allocator result under the physical model of its mode."""
    mode = mode or result.mode
    sched = np.asarray(result.scheduled, bool)
    if mode in CENTRAL_MODES:
        sinr = true_sinr_centralized(result.V, sched, channels, topo)
    elif mode in AP_MODES + CPU_MODES:
        sinr = true_sinr_distributed(result.V, sched, channels, topo, result.processors, result.assignment)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    se = np.where(sched, spectral_efficiency(sinr), 0.0)
    return TimeSlotResult(sinr, se, sched, mode, timeslot, bool(result.converged))
