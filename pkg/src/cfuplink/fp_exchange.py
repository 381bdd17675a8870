"""Allocation with information exchange: one processor per AP or per CPU.

Each processor ``p`` keeps a local decision ``tau_pu`` for every user in
its user set ``E_p`` and maximises the sum over processors of the local
weighted rates. The SINR seen by processor ``p`` uses its own decision in
the numerator and the exchanged transmit vectors of all other users as
interference. The user transmits with the strongest local decision.

Processors are described by their AP groups: singletons for the
distributed mode, ``B_q`` for the semi-distributed mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fp_centralized import (
    AllocationResult,
    converged_step,
    effective_channels,
    initial_vectors,
    keep_strongest,
    solve_multipliers,
    update_alpha,
    wsr,
)
from .model import SimConfig, ap_rows, group_by_length, hermitian_solve


@dataclass
class ProcessorLayout:
    """Flattened (processor, user) pairs with their receive rows.

    Pairs are ordered by processor index, then user index.
    """

    processors: list  # AP group per processor
    pair_proc: np.ndarray
    pair_user: np.ndarray
    pair_rows: list  # rows of C_pu in the stacked channel
    pair_aps: list
    capacity: np.ndarray  # M |B_p| per processor
    n_users: int

    @property
    def n_pairs(self) -> int:
        return len(self.pair_proc)

    @property
    def n_processors(self) -> int:
        return len(self.processors)

    def users_of(self, p: int) -> np.ndarray:
        return self.pair_user[self.pair_proc == p]


def build_layout(topo, processors, M: int) -> ProcessorLayout:
    serving = topo.serving
    if serving is None:
        raise ValueError("clusters not built")
    pp, pu, rows, aps = [], [], [], []
    for p, group in enumerate(processors):
        group = np.sort(np.asarray(group, dtype=int))
        for u in np.flatnonzero(serving[:, group].any(axis=1)):
            c = group[serving[u, group]]
            pp.append(p)
            pu.append(u)
            aps.append(c)
            rows.append(ap_rows(c, M))
    cap = np.array([M * len(g) for g in processors], dtype=float)
    return ProcessorLayout([np.sort(np.asarray(g, int)) for g in processors], np.array(pp, dtype=int),
                           np.array(pu, dtype=int), rows, aps, cap, topo.n_users)


def ap_processors(topo) -> list:
    return [np.array([r]) for r in range(topo.n_aps)]


def cpu_processors(topo) -> list:
    return [topo.aps_of_cpu(q) for q in range(topo.n_cpus)]


@dataclass
class LocalDecisionSet:
    Tau: np.ndarray  # (n_pairs, N)
    V: np.ndarray  # (U, N)
    Gamma: np.ndarray  # (n_pairs,)
    Y: np.ndarray  # (R*M, n_pairs), y_pu embedded on the rows of C_pu
    Alpha: np.ndarray  # (n_pairs,)
    Delta: np.ndarray  # (n_pairs,), inherited from the user weights
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))
    Mu: Optional[np.ndarray] = None
    iter: int = 0


@dataclass
class ExchangeProblem:
    Hs: np.ndarray
    layout: ProcessorLayout
    groups: list
    sigma2: float


def _pair_blocks(prob: ExchangeProblem, dec: LocalDecisionSet):
    """Yield per-bucket (pairs, rows, K_sub, e_self, s) with the global interference."""
    e = effective_channels(prob.Hs, dec.V)
    K = e @ e.conj().T
    lay = prob.layout
    for pairs, idx in prob.groups:
        users = lay.pair_user[pairs]
        Ksub = K[idx[:, :, None], idx[:, None, :]]
        ev = e[idx, users[:, None]]
        s = np.einsum("kdn,kn->kd", prob.Hs[idx, users[:, None], :], dec.Tau[pairs])
        yield pairs, idx, Ksub, ev, s


def update_gamma_local(dec: LocalDecisionSet, prob: ExchangeProblem) -> np.ndarray:
    """Local SINR of every pair; interference uses the exchanged ``V`` of all other users."""
    gamma = np.zeros(prob.layout.n_pairs)
    for pairs, idx, Ksub, ev, s in _pair_blocks(prob, dec):
        d = idx.shape[1]
        B = prob.sigma2 * np.eye(d) + Ksub - ev[:, :, None] * ev.conj()[:, None, :]
        gamma[pairs] = np.real(np.einsum("ki,ki->k", s.conj(), hermitian_solve(B, s)))
    return np.maximum(gamma, 0.0)


def update_y_local(dec: LocalDecisionSet, prob: ExchangeProblem) -> np.ndarray:
    Y = np.zeros((prob.Hs.shape[0], prob.layout.n_pairs), dtype=complex)
    c = np.sqrt(dec.Delta * (1.0 + dec.Gamma))
    for pairs, idx, Ksub, ev, s in _pair_blocks(prob, dec):
        d = idx.shape[1]
        B = (prob.sigma2 * np.eye(d) + Ksub - ev[:, :, None] * ev.conj()[:, None, :]
             + s[:, :, None] * s.conj()[:, None, :])
        Y[idx, pairs[:, None]] = c[pairs, None] * hermitian_solve(B, s)
    return Y


def tau_terms(dec: LocalDecisionSet, prob: ExchangeProblem):
    """Return ``(A, b)`` of the tau update for every pair.

    ``A`` sums ``H^H y y^H H`` over the receivers of all processors (the
    exchanged quantities); it only depends on the user, so it is computed
    once per user and shared by that user's pairs.
    """
    RM, U, N = prob.Hs.shape
    lay = prob.layout
    Z = (dec.Y.conj().T @ prob.Hs.reshape(RM, U * N)).reshape(-1, U, N)
    if N == 1:
        A_user = np.sum(np.abs(Z[:, :, 0]) ** 2, axis=0)[:, None, None].astype(complex)
    else:
        A_user = np.einsum("kui,kuj->uij", Z.conj(), Z)
    A = A_user[lay.pair_user]
    b = Z[np.arange(lay.n_pairs), lay.pair_user, :].conj()
    return A, b


def update_tau_local(dec: LocalDecisionSet, prob: ExchangeProblem, cfg: SimConfig):
    """Closed-form local decisions with per-processor multipliers; returns ``(Tau, lam, Mu)``."""
    A, b = tau_terms(dec, prob)
    c = np.sqrt(dec.Delta * (1.0 + dec.Gamma))
    lam, mu, tau = solve_multipliers(A, b, c, dec.Alpha, cfg, prob.layout.capacity, prob.layout.pair_proc)
    return tau, lam, mu


def select_v_max(Tau: np.ndarray, pair_proc: np.ndarray, pair_user: np.ndarray, n_users: int,
                 mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Each user transmits its strongest local decision; ties go to the lowest processor.

    Only pairs in ``mask`` compete when given; users without such a pair
    fall back to all their pairs.
    """
    N = Tau.shape[1] if Tau.ndim == 2 else 1
    V = np.zeros((n_users, N), dtype=complex)
    norms = np.sum(np.abs(Tau) ** 2, axis=1)
    eligible = np.ones(len(Tau), bool) if mask is None else np.asarray(mask, bool)
    # Sort by user, eligibility, descending power, then processor index.
    order = np.lexsort((pair_proc, -norms, ~eligible, pair_user))
    first = np.ones(len(order), bool)
    first[1:] = pair_user[order][1:] != pair_user[order][:-1]
    pick = order[first]
    V[pair_user[pick]] = Tau[pick]
    return V


def extract_assignment(Tau, layout: ProcessorLayout, cfg: SimConfig) -> np.ndarray:
    """Per processor: pairs above the power threshold, capped at ``M |B_p|``."""
    p = np.sum(np.abs(Tau) ** 2, axis=1)
    assign = np.zeros((layout.n_processors, layout.n_users), bool)
    for q in range(layout.n_processors):
        sel = np.flatnonzero(layout.pair_proc == q)
        keep = keep_strongest(p[sel], p[sel] > cfg.power_threshold, layout.capacity[q])
        assign[q, layout.pair_user[sel[keep]]] = True
    return assign


def pair_mask(assign: np.ndarray, layout: ProcessorLayout) -> np.ndarray:
    return assign[layout.pair_proc, layout.pair_user]


def run_exchange(topo, channels, delta, cfg: SimConfig, processors, mode: str = "",
                 *, freeze_alpha: bool = False, record_states: bool = False) -> AllocationResult:
    """Shared loop of the distributed and semi-distributed algorithms."""
    layout = build_layout(topo, processors, cfg.M)
    Hs = channels.stacked()
    U = topo.n_users
    if layout.n_pairs == 0:
        return AllocationResult(np.zeros((U, cfg.N), complex), np.zeros(U, bool),
                                np.zeros((layout.n_processors, U), bool), layout.processors,
                                converged=True, mode=mode)
    prob = ExchangeProblem(Hs, layout, group_by_length(layout.pair_rows), channels.sigma2)
    delta = np.asarray(delta, dtype=float)
    user_rows = [ap_rows(topo.cluster(u), cfg.M) for u in range(U)]
    V0 = initial_vectors(Hs, user_rows, cfg)
    dec = LocalDecisionSet(
        Tau=V0[layout.pair_user].copy(),
        V=V0,
        Gamma=np.zeros(layout.n_pairs),
        Y=np.zeros((Hs.shape[0], layout.n_pairs), complex),
        Alpha=np.full(layout.n_pairs, 1.0 / cfg.p_t),
        Delta=delta[layout.pair_user],
    )
    objective, trace, lambdas, states = [], [], [], []
    prev = None
    converged = False
    for it in range(1, cfg.fp_max_iters + 1):
        dec.Gamma = update_gamma_local(dec, prob)
        cur = wsr(dec.Delta, dec.Gamma)
        objective.append(cur)
        trace.append(cur)
        if converged_step(prev, cur, cfg.fp_rel_tol):
            converged = True
            break
        prev = cur
        dec.Y = update_y_local(dec, prob)
        dec.Tau, dec.lam, dec.Mu = update_tau_local(dec, prob, cfg)
        dec.V = select_v_max(dec.Tau, layout.pair_proc, layout.pair_user, U)
        lambdas.append(dec.lam.copy())
        if not freeze_alpha:
            dec.Alpha = update_alpha(dec.Tau, cfg)
        dec.iter = it
        if record_states:
            states.append(LocalDecisionSet(dec.Tau.copy(), dec.V.copy(), dec.Gamma.copy(), dec.Y.copy(),
                                           dec.Alpha.copy(), dec.Delta, dec.lam.copy(), dec.Mu.copy(), it))

    assign = extract_assignment(dec.Tau, layout, cfg)
    V = select_v_max(dec.Tau, layout.pair_proc, layout.pair_user, U, pair_mask(assign, layout))
    res = AllocationResult(V, assign.any(axis=0), assign, layout.processors, trace, objective,
                           converged, dec.iter, mode, lambdas)
    res.tau = dec.Tau.copy()
    res.layout = layout
    if record_states:
        res.states = states
        res.problem = prob
    return res


def run_distributed(topo, channels, delta, cfg: SimConfig, **kw) -> AllocationResult:
    """Processors are the APs; per-AP capacity is ``M``."""
    return run_exchange(topo, channels, delta, cfg, ap_processors(topo), "distributed", **kw)


def run_semi_distributed(topo, channels, delta, cfg: SimConfig, **kw) -> AllocationResult:
    """Processors are the CPUs; per-CPU capacity is ``M |B_q|``."""
    return run_exchange(topo, channels, delta, cfg, cpu_processors(topo), "semi", **kw)
