"""Decentralized allocation without information exchange.

Every processor (AP or CPU) solves its own weighted-rate problem on a
pseudo-SINR that keeps only the interference of its local users and
replaces everything else by a static noise term built from large-scale
gains and a heuristic scheduling probability. Processors never read each
other's state; the per-user transmit vector is picked once at the end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fp_centralized import (
    AllocationResult,
    converged_step,
    keep_strongest,
    solve_multipliers,
    update_alpha,
    wsr,
)
from .fp_exchange import ap_processors, build_layout, cpu_processors, select_v_max
from .model import SimConfig, group_by_length, hermitian_solve


def schedule_probability(p: int, u: int, topo, processors, M: int) -> float:
    """Heuristic chance that user ``u`` is served by a processor other than ``p``.

    ``sum over p' in the user's processors, p' != p, of M |B_p| / |E_p'|``;
    it is a weight, not a probability, and may exceed one.
    """
    serving = topo.serving
    num = M * len(processors[p])
    total = 0.0
    for q, group in enumerate(processors):
        if q == p or not serving[u, group].any():
            continue
        total += num / np.count_nonzero(serving[:, group].any(axis=1))
    return total


def schedule_probability_matrix(topo, processors, M: int) -> np.ndarray:
    """Vectorised :func:`schedule_probability`, shape (n_processors, n_users)."""
    serving = topo.serving
    member = np.array([serving[:, g].any(axis=1) for g in processors], dtype=float).reshape(len(processors), -1)
    load = member.sum(axis=1)
    inv = np.divide(member, load[:, None], out=np.zeros_like(member), where=load[:, None] > 0)
    num = M * np.array([len(g) for g in processors], dtype=float)
    return num[:, None] * (inv.sum(axis=0)[None, :] - inv)


@dataclass
class NonLocalApprox:
    """Equivalent noise per processor: ``coeff[p][i, k]`` for AP ``processors[p][i]``
    and local user ``users[p][k]``, noise floor excluded."""

    processors: list
    users: list
    coeff: list
    sigma2: float
    kappa: float

    def sigma_tilde2(self, p: int, u: int) -> np.ndarray:
        """Noise plus non-local interference on each AP of processor ``p`` for user ``u``."""
        k = int(np.searchsorted(self.users[p], u))
        if k >= len(self.users[p]) or self.users[p][k] != u:
            raise KeyError(f"user {u} is not local to processor {p}")
        return self.sigma2 + self.coeff[p][:, k]


def nonlocal_interference(p: int, u: int, topo, channels, cfg: SimConfig, processors, probs=None) -> np.ndarray:
    """``kappa * sum_{u' != u} P_T p_{p u'} gain[r, u']`` for every AP ``r`` of processor ``p``."""
    if probs is None:
        probs = schedule_probability_matrix(topo, processors, cfg.M)
    g = channels.large_scale[processors[p]]
    total = g @ probs[p] - g[:, u] * probs[p, u]
    return cfg.kappa * cfg.p_t * total


def build_nonlocal(topo, channels, cfg: SimConfig, processors) -> NonLocalApprox:
    probs = schedule_probability_matrix(topo, processors, cfg.M)
    users, coeff = [], []
    for p, group in enumerate(processors):
        loc = np.flatnonzero(topo.serving[:, group].any(axis=1))
        g = channels.large_scale[group]
        total = (g @ probs[p])[:, None] - g[:, loc] * probs[p, loc][None, :]
        users.append(loc)
        coeff.append(cfg.kappa * cfg.p_t * total)
    return NonLocalApprox(list(processors), users, coeff, channels.sigma2, cfg.kappa)


class LocalProblem:
    """Everything processor ``p`` knows: its APs, its users and their channels."""

    def __init__(self, p, topo, channels, cfg: SimConfig, processors, nonlocal_: NonLocalApprox, delta):
        M = cfg.M
        self.p = p
        self.aps = np.sort(np.asarray(processors[p], dtype=int))
        self.users = nonlocal_.users[p]
        self.capacity = float(M * len(self.aps))
        self.cfg = cfg
        H = channels.H[self.aps][:, self.users]  # (|B_p|, n, M, N)
        nb, n = len(self.aps), len(self.users)
        self.H = H.transpose(0, 2, 1, 3).reshape(nb * M, n, cfg.N)
        self.delta = np.asarray(delta, dtype=float)[self.users]
        serving = topo.serving[self.users][:, self.aps]  # (n, |B_p|)
        self.rows = [(np.flatnonzero(serving[k])[:, None] * M + np.arange(M)).ravel() for k in range(n)]
        noise = nonlocal_.sigma2 + nonlocal_.coeff[p]  # (|B_p|, n)
        self.noise = [np.repeat(noise[np.flatnonzero(serving[k]), k], M) for k in range(n)]
        self.groups = group_by_length(self.rows)
        self.noise_groups = [np.stack([self.noise[k] for k in pos]) for pos, _ in self.groups]

    @property
    def n(self) -> int:
        return len(self.users)

    def _blocks(self, tau):
        t = np.einsum("dkn,kn->dk", self.H, tau)
        K = t @ t.conj().T
        for (pos, idx), nz in zip(self.groups, self.noise_groups):
            Ksub = K[idx[:, :, None], idx[:, None, :]]
            s = t[idx, pos[:, None]]
            Nd = np.zeros_like(Ksub)
            d = idx.shape[1]
            Nd[:, np.arange(d), np.arange(d)] = nz
            yield pos, idx, Ksub + Nd, s

    def pseudo_sinr(self, tau) -> np.ndarray:
        gamma = np.zeros(self.n)
        for pos, idx, B, s in self._blocks(tau):
            B = B - s[:, :, None] * s.conj()[:, None, :]
            gamma[pos] = np.real(np.einsum("ki,ki->k", s.conj(), hermitian_solve(B, s)))
        return np.maximum(gamma, 0.0)

    def update_y(self, tau, gamma) -> np.ndarray:
        Y = np.zeros((self.H.shape[0], self.n), dtype=complex)
        c = np.sqrt(self.delta * (1.0 + gamma))
        for pos, idx, B, s in self._blocks(tau):
            Y[idx, pos[:, None]] = c[pos, None] * hermitian_solve(B, s)
        return Y

    def update_tau(self, Y, gamma, alpha):
        D, n, N = self.H.shape
        Z = (Y.conj().T @ self.H.reshape(D, n * N)).reshape(n, n, N)
        A = np.einsum("kui,kuj->uij", Z.conj(), Z)
        b = Z[np.arange(n), np.arange(n), :].conj()
        c = np.sqrt(self.delta * (1.0 + gamma))
        lam, mu, tau = solve_multipliers(A, b, c, alpha, self.cfg, [self.capacity])
        return tau, float(lam[0]), mu

    def surrogate(self, tau, gamma, Y) -> float:
        """Local quadratic-transform surrogate at (tau, gamma, Y)."""
        D, n, N = self.H.shape
        t = np.einsum("dkn,kn->dk", self.H, tau)
        c = np.sqrt(self.delta * (1.0 + gamma))
        lin = 2.0 * c * np.real(np.einsum("dk,dk->k", t.conj(), Y))
        quad = np.sum(np.abs(t.conj().T @ Y) ** 2, axis=0)
        for k in range(n):
            quad[k] += np.sum(self.noise[k] * np.abs(Y[self.rows[k], k]) ** 2)
        return float(np.sum(self.delta * (np.log1p(gamma) - gamma)) + np.sum(lin - quad))

    def solve(self, *, freeze_alpha=False):
        """Run the local loop; returns ``(tau, converged, iterations, trace, objective)``."""
        cfg = self.cfg
        tau = np.zeros((self.n, cfg.N), complex)
        if self.n == 0:
            return tau, True, 0, [], []
        tau[:] = _initial(self.H, self.rows, cfg)
        alpha = np.full(self.n, 1.0 / cfg.p_t)
        prev, converged, it = None, False, 0
        trace, objective = [], []
        for step in range(1, cfg.fp_max_iters + 1):
            gamma = self.pseudo_sinr(tau)
            cur = wsr(self.delta, gamma)
            objective.append(cur)
            if converged_step(prev, cur, cfg.fp_rel_tol):
                converged = True
                break
            prev = cur
            Y = self.update_y(tau, gamma)
            tau, _, _ = self.update_tau(Y, gamma, alpha)
            trace.append(self.surrogate(tau, gamma, Y))
            if not freeze_alpha:
                alpha = update_alpha(tau, cfg)
            it = step
        return tau, converged, it, trace, objective


def _initial(H, rows, cfg):
    if cfg.N == 1:
        return np.full((H.shape[1], 1), np.sqrt(cfg.p_t), dtype=complex)
    out = np.zeros((H.shape[1], cfg.N), complex)
    for k in range(H.shape[1]):
        _, _, vh = np.linalg.svd(H[rows[k], k, :])
        out[k] = np.sqrt(cfg.p_t) * vh[0].conj()
    return out


def pseudo_sinr(p: int, u: int, tau_local, topo, channels, cfg: SimConfig, processors, delta=None) -> float:
    """Pseudo-SINR of local user ``u`` at processor ``p`` for local decisions ``tau_local``.

    ``tau_local`` has one row per local user of ``p`` (ascending user index).
    """
    nl = build_nonlocal(topo, channels, cfg, processors)
    delta = np.ones(topo.n_users) if delta is None else delta
    lp = LocalProblem(p, topo, channels, cfg, processors, nl, delta)
    k = int(np.searchsorted(lp.users, u))
    return float(lp.pseudo_sinr(np.asarray(tau_local, complex).reshape(lp.n, cfg.N))[k])


def run_decentralized(topo, channels, delta, cfg: SimConfig, processors, mode: str = "", *,
                      order=None, freeze_alpha: bool = False) -> AllocationResult:
    """Independent local loops, then one global strongest-decision pick."""
    nl = build_nonlocal(topo, channels, cfg, processors)
    layout = build_layout(topo, processors, cfg.M)
    P, U = len(processors), topo.n_users
    order = range(P) if order is None else order
    taus, assign = {}, np.zeros((P, U), bool)
    conv, iters, traces, objectives = [], [], {}, {}
    for p in order:
        lp = LocalProblem(p, topo, channels, cfg, processors, nl, delta)
        tau, ok, it, tr, obj = lp.solve(freeze_alpha=freeze_alpha)
        taus[p] = tau
        conv.append(ok)
        iters.append(it)
        traces[p], objectives[p] = tr, obj
        pw = np.sum(np.abs(tau) ** 2, axis=1)
        keep = keep_strongest(pw, pw > cfg.power_threshold, lp.capacity)
        assign[p, lp.users[keep]] = True
    Tau = np.vstack([taus[p] for p in range(P)]) if P else np.zeros((0, cfg.N), complex)
    mask = assign[layout.pair_proc, layout.pair_user]
    V = select_v_max(Tau, layout.pair_proc, layout.pair_user, U, mask) if layout.n_pairs else np.zeros((U, cfg.N), complex)
    res = AllocationResult(V, assign.any(axis=0), assign, layout.processors,
                           trace=[traces[p] for p in range(P)], objective=[objectives[p] for p in range(P)],
                           converged=all(conv), iterations=max(iters, default=0), mode=mode)
    res.tau = Tau
    res.layout = layout
    res.processor_converged = [conv[list(order).index(p)] for p in range(P)]
    return res


def run_decentralized_distributed(topo, channels, delta, cfg: SimConfig, **kw) -> AllocationResult:
    return run_decentralized(topo, channels, delta, cfg, ap_processors(topo), "dist-decentralized", **kw)


def run_decentralized_semi(topo, channels, delta, cfg: SimConfig, **kw) -> AllocationResult:
    return run_decentralized(topo, channels, delta, cfg, cpu_processors(topo), "semi-decentralized", **kw)
