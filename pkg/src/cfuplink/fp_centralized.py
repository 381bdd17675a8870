"""Joint scheduling and power allocation for a single CPU.

Fractional-programming block ascent on the weighted sum rate, with the
binary scheduling constraint replaced by the reweighted power-norm
capacity constraint ``sum_u alpha_u ||v_u||^2 <= R M``. One sweep updates
the SINR auxiliaries, the quadratic-transform auxiliaries (scaled MMSE
receivers), the transmit vectors and finally the reweighting ``alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import SimConfig, ap_rows, group_by_length, hermitian_solve

_JITTER = 1e-12


class BisectionError(RuntimeError):
    """Power bisection could not bracket the multiplier."""


@dataclass
class AllocationResult:
    """Outcome of one allocator run.

    ``assignment[p, u]`` marks that processor ``p`` (an AP group in
    ``processors``) serves user ``u``; ``scheduled`` is its column-wise OR.
    ``V`` holds the raw transmit vectors; evaluation silences users that
    are not scheduled.
    """

    V: np.ndarray
    scheduled: np.ndarray
    assignment: np.ndarray
    processors: list
    trace: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    mode: str = ""
    lambdas: list = field(default_factory=list)

    @property
    def powers(self) -> np.ndarray:
        return np.sum(np.abs(self.V) ** 2, axis=1)


@dataclass
class CentralizedProblem:
    """Per-slot quantities shared by every update of the centralized loop."""

    Hs: np.ndarray  # (R*M, U, N) stacked channels
    rows: list  # rows of C_u in Hs, per user
    groups: list  # users bucketed by cluster size
    delta: np.ndarray
    sigma2: float
    capacity: float  # R*M

    @property
    def n_users(self) -> int:
        return self.Hs.shape[1]


@dataclass
class AllocationState:
    V: np.ndarray  # (U, N)
    Gamma: np.ndarray  # (U,)
    Y: np.ndarray  # (R*M, U); column u is y_u embedded on the rows of C_u
    Alpha: np.ndarray
    Delta: np.ndarray
    lam: float = 0.0
    Mu: Optional[np.ndarray] = None
    iter: int = 0

    def y(self, u: int, rows) -> np.ndarray:
        return self.Y[rows, u]


def build_problem(topo, channels, delta, cfg: SimConfig) -> CentralizedProblem:
    Hs = channels.stacked()
    rows = [ap_rows(topo.cluster(u), cfg.M) for u in range(topo.n_users)]
    return CentralizedProblem(
        Hs=Hs,
        rows=rows,
        groups=group_by_length(rows),
        delta=np.asarray(delta, dtype=float),
        sigma2=channels.sigma2,
        capacity=float(topo.n_aps * cfg.M),
    )


def effective_channels(Hs: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Received signature ``H_u v_u`` of every user on every row, shape (R*M, U)."""
    return np.einsum("aun,un->au", Hs, V)


def _blocks(K, e, idx, users):
    Ksub = K[idx[:, :, None], idx[:, None, :]]
    s = e[idx, users[:, None]]
    return Ksub, s


def update_gamma_cent(state: AllocationState, prob: CentralizedProblem) -> np.ndarray:
    """SINR of each user under its MMSE receiver for the current ``V``."""
    e = effective_channels(prob.Hs, state.V)
    K = e @ e.conj().T
    gamma = np.zeros(prob.n_users)
    for users, idx in prob.groups:
        Ksub, s = _blocks(K, e, idx, users)
        d = idx.shape[1]
        B = prob.sigma2 * np.eye(d) + Ksub - s[:, :, None] * s.conj()[:, None, :]
        gamma[users] = np.real(np.einsum("ni,ni->n", s.conj(), hermitian_solve(B, s)))
    return np.maximum(gamma, 0.0)


def update_y_cent(state: AllocationState, prob: CentralizedProblem) -> np.ndarray:
    """MMSE receivers scaled by ``sqrt(delta (1 + gamma))``, embedded in the stacked rows."""
    e = effective_channels(prob.Hs, state.V)
    K = e @ e.conj().T
    Y = np.zeros((prob.Hs.shape[0], prob.n_users), dtype=complex)
    c = np.sqrt(state.Delta * (1.0 + state.Gamma))
    for users, idx in prob.groups:
        Ksub, s = _blocks(K, e, idx, users)
        d = idx.shape[1]
        B = prob.sigma2 * np.eye(d) + Ksub
        Y[idx, users[:, None]] = c[users, None] * hermitian_solve(B, s)
    return Y


def receiver_gram(Hs: np.ndarray, Y: np.ndarray, cols=None) -> np.ndarray:
    """``sum_k H_u^H y_k y_k^H H_u`` for every user ``u``; shape (U, N, N).

    ``Y`` columns are receivers embedded in the stacked rows, so restricting
    the channel of ``u`` to the rows of each receiver is implicit.
    """
    if cols is not None:
        Y = Y[:, cols]
    RM, U, N = Hs.shape
    Z = (Y.conj().T @ Hs.reshape(RM, U * N)).reshape(-1, U, N)  # y_k^H H_u
    if N == 1:
        return np.sum(np.abs(Z[:, :, 0]) ** 2, axis=0)[:, None, None].astype(complex)
    return np.einsum("kui,kuj->uij", Z.conj(), Z)


def solve_multipliers(A, b, scale, alpha, cfg: SimConfig, capacity, group=None):
    """Pick the multipliers and the resulting transmit vectors.

    Each row ``k`` solves ``v_k = scale_k (nu_k I + A_k)^{-1} b_k`` with
    ``nu_k = lam_g alpha_k + mu_k``. First every group tries ``lam = 0``;
    ``mu_k`` stays zero when ``||v_k||^2 <= P_T`` and is otherwise found by
    bisection. A group whose reweighted capacity ``sum alpha ||v||^2``
    exceeds ``capacity[g]`` retries with ``lam = cfg.lambda_init``.

    Returns ``(lam, mu, V)`` with ``lam`` per group.
    """
    A = np.asarray(A)
    b = np.asarray(b)
    n = len(b)
    group = np.zeros(n, dtype=int) if group is None else np.asarray(group, dtype=int)
    capacity = np.atleast_1d(np.asarray(capacity, dtype=float))
    n_groups = len(capacity)
    evals, Q = np.linalg.eigh(A) if n else (np.zeros((0, b.shape[1])), np.zeros((0,) + A.shape[1:]))
    evals = np.maximum(evals, 0.0)
    z = np.einsum("kji,kj->ki", Q.conj(), b)
    w = (np.asarray(scale) ** 2)[:, None] * np.abs(z) ** 2

    def power(nu, k=slice(None)):
        den = nu[:, None] + evals[k]
        den = np.where(den <= _JITTER, den + _JITTER, den)
        return np.sum(w[k] / den**2, axis=1)

    def vectors(nu):
        den = nu[:, None] + evals
        den = np.where(den <= _JITTER, den + _JITTER, den)
        return np.asarray(scale)[:, None] * np.einsum("kij,kj->ki", Q, z / den)

    def per_user_mu(base):
        P = cfg.p_t
        mu = np.zeros(n)
        hot = power(base) > P
        if not np.any(hot):
            return mu
        k = np.flatnonzero(hot)
        # With A >= 0 the power never exceeds scale^2 ||b||^2 / mu^2.
        hi = np.sqrt(w[k].sum(axis=1) / P) * (1 + 1e-12) + 1e-300
        lo = np.zeros_like(hi)
        for _ in range(100):
            bad = power(base[k] + hi, k) > P
            if not np.any(bad):
                break
            hi = np.where(bad, 2 * hi, hi)
        else:
            raise BisectionError("multiplier upper bound not found after 100 doublings")
        for _ in range(2000):
            p_hi = power(base[k] + hi, k)
            if np.all(P - p_hi <= cfg.bisect_tol * P):
                break
            mid = 0.5 * (lo + hi)
            over = power(base[k] + mid, k) > P
            lo = np.where(over, mid, lo)
            hi = np.where(over, hi, mid)
        else:
            raise BisectionError("power bisection did not converge")
        mu[k] = hi
        return mu

    alpha = np.asarray(alpha, dtype=float)
    lam = np.zeros(n_groups)
    mu = per_user_mu(np.zeros(n))
    V = vectors(mu)
    load = np.bincount(group, weights=alpha * np.sum(np.abs(V) ** 2, axis=1), minlength=n_groups)
    over = load > capacity * (1 + 1e-12)
    if np.any(over) and cfg.lambda_init > 0:
        lam[over] = cfg.lambda_init
        base = lam[group] * alpha
        redo = over[group]
        mu_redo = per_user_mu(base)
        mu = np.where(redo, mu_redo, mu)
        V = vectors(lam[group] * alpha + mu)
    return lam, mu, V


def update_v_cent(state: AllocationState, prob: CentralizedProblem, cfg: SimConfig):
    """Closed-form transmit vectors; returns ``(V, lam, Mu)``."""
    A = receiver_gram(prob.Hs, state.Y)
    b = np.einsum("aun,au->un", prob.Hs.conj(), state.Y)
    c = np.sqrt(state.Delta * (1.0 + state.Gamma))
    lam, mu, V = solve_multipliers(A, b, c, state.Alpha, cfg, [prob.capacity])
    return V, float(lam[0]), mu


def update_alpha(V: np.ndarray, cfg: SimConfig) -> np.ndarray:
    return 1.0 / (np.sum(np.abs(V) ** 2, axis=-1) + cfg.epsilon)


def surrogate_value(state: AllocationState, prob: CentralizedProblem) -> float:
    """Quadratic-transform surrogate at the state's (V, Gamma, Y)."""
    e = effective_channels(prob.Hs, state.V)
    c = np.sqrt(state.Delta * (1.0 + state.Gamma))
    b = np.einsum("aun,au->un", prob.Hs.conj(), state.Y)
    lin = 2.0 * c * np.real(np.einsum("un,un->u", state.V.conj(), b))
    Z = e.conj().T @ state.Y  # e_{u'}^H y_u
    quad = prob.sigma2 * np.sum(np.abs(state.Y) ** 2, axis=0) + np.sum(np.abs(Z) ** 2, axis=0)
    g = state.Gamma
    return float(np.sum(state.Delta * (np.log1p(g) - g)) + np.sum(lin - quad))


def wsr(delta, gamma) -> float:
    return float(np.sum(np.asarray(delta) * np.log1p(gamma)))


def initial_vectors(Hs: np.ndarray, rows: list, cfg: SimConfig) -> np.ndarray:
    """Full-power start: ``sqrt(P_T)`` for one antenna, else the dominant right singular vector."""
    U = Hs.shape[1]
    if cfg.N == 1:
        return np.full((U, 1), np.sqrt(cfg.p_t), dtype=complex)
    V = np.zeros((U, cfg.N), dtype=complex)
    for u in range(U):
        _, _, vh = np.linalg.svd(Hs[rows[u], u, :])
        V[u] = np.sqrt(cfg.p_t) * vh[0].conj()
    return V


def keep_strongest(power: np.ndarray, mask: np.ndarray, cap: float) -> np.ndarray:
    """Restrict ``mask`` to its ``cap`` largest powers, ties to the lowest index."""
    idx = np.flatnonzero(mask)
    cap = int(np.floor(cap + 1e-9))
    if len(idx) <= cap:
        return mask.copy()
    order = idx[np.lexsort((idx, -power[idx]))]
    out = np.zeros_like(mask)
    out[order[:cap]] = True
    return out


def converged_step(prev: Optional[float], cur: float, tol: float) -> bool:
    if prev is None:
        return False
    return abs(cur - prev) <= tol * max(abs(prev), 1e-300)


def run_centralized(topo, channels, delta, cfg: SimConfig, *, freeze_alpha: bool = False,
                    record_states: bool = False) -> AllocationResult:
    """Algorithm loop for the single-CPU network.

    ``freeze_alpha`` keeps ``alpha = 1 / P_T`` for diagnostics. With
    ``record_states`` the per-sweep states are kept on the result as
    ``states`` (used by the property tests).
    """
    prob = build_problem(topo, channels, delta, cfg)
    U = prob.n_users
    R = topo.n_aps
    processors = [np.arange(R)]
    if U == 0:
        return AllocationResult(np.zeros((0, cfg.N), complex), np.zeros(0, bool), np.zeros((1, 0), bool),
                                processors, converged=True, mode="centralized")
    state = AllocationState(
        V=initial_vectors(prob.Hs, prob.rows, cfg),
        Gamma=np.zeros(U),
        Y=np.zeros((prob.Hs.shape[0], U), complex),
        Alpha=np.full(U, 1.0 / cfg.p_t),
        Delta=prob.delta,
    )
    trace, objective, lambdas, states = [], [], [], []
    prev = None
    converged = False
    for it in range(1, cfg.fp_max_iters + 1):
        state.Gamma = update_gamma_cent(state, prob)
        cur = wsr(state.Delta, state.Gamma)
        objective.append(cur)
        if converged_step(prev, cur, cfg.fp_rel_tol):
            converged = True
            break
        prev = cur
        state.Y = update_y_cent(state, prob)
        state.V, state.lam, state.Mu = update_v_cent(state, prob, cfg)
        trace.append(surrogate_value(state, prob))
        lambdas.append(state.lam)
        if not freeze_alpha:
            state.Alpha = update_alpha(state.V, cfg)
        state.iter = it
        if record_states:
            states.append(_snapshot(state))

    p = np.sum(np.abs(state.V) ** 2, axis=1)
    sched = keep_strongest(p, p > cfg.power_threshold, prob.capacity)
    res = AllocationResult(state.V.copy(), sched, sched[None, :].copy(), processors, trace, objective,
                           converged, state.iter, "centralized", lambdas)
    if record_states:
        res.states = states
        res.problem = prob
    return res


def _snapshot(state: AllocationState) -> AllocationState:
    return AllocationState(state.V.copy(), state.Gamma.copy(), state.Y.copy(), state.Alpha.copy(),
                           state.Delta, state.lam, None if state.Mu is None else state.Mu.copy(), state.iter)
