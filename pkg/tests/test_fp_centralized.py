import numpy as np
import pytest

from cfuplink.evaluation import mmse_receiver_centralized, true_sinr_centralized
from cfuplink.fp_centralized import (
    AllocationState,
    build_problem,
    keep_strongest,
    run_centralized,
    solve_multipliers,
    update_alpha,
    update_gamma_cent,
    update_v_cent,
    update_y_cent,
)
from cfuplink.model import SimConfig, ap_rows
from cfuplink.topology import NetworkTopology

from conftest import small_instance
from oracles import central_surrogate, dense_mmse, dense_sinr


def _random_state(topo, ch, cfg, seed, delta=None):
    rng = np.random.default_rng(seed)
    U = topo.n_users
    prob = build_problem(topo, ch, np.ones(U) if delta is None else delta, cfg)
    V = (rng.standard_normal((U, cfg.N)) + 1j * rng.standard_normal((U, cfg.N))) * np.sqrt(cfg.p_t / 4)
    st = AllocationState(V=V, Gamma=np.zeros(U), Y=np.zeros((prob.Hs.shape[0], U), complex),
                         Alpha=rng.uniform(0.5, 2.0, U) / cfg.p_t, Delta=prob.delta)
    return prob, st


@pytest.mark.parametrize("seed", range(3))
def test_gamma_matches_dense_oracle(seed):
    topo, ch, cfg = small_instance(seed, n_aps=3, n_users=5, M=2, N=2)
    prob, st = _random_state(topo, ch, cfg, seed)
    g = update_gamma_cent(st, prob)
    ref = [dense_sinr(ch, topo.cluster(u), u, st.V, range(topo.n_users)) for u in range(topo.n_users)]
    assert np.allclose(g, ref, rtol=1e-9)
    assert np.all(g >= 0)


def test_gamma_zero_power():
    topo, ch, cfg = small_instance(0)
    prob, st = _random_state(topo, ch, cfg, 0)
    st.V[:] = 0
    assert np.all(update_gamma_cent(st, prob) == 0)


def test_gamma_scalar_single_user():
    rng = np.random.default_rng(0)
    cfg = SimConfig(M=1, N=1)
    from cfuplink.channel import ChannelRealization
    topo = NetworkTopology(np.zeros((1, 2)), np.array([[0.1, 0.0]]), np.zeros(1, int), serving=np.ones((1, 1), bool))
    h = complex(rng.standard_normal(), rng.standard_normal()) * 1e-4
    ch = ChannelRealization(np.array([[[[h]]]]), np.array([[abs(h) ** 2]]), 1e-9)
    prob, st = _random_state(topo, ch, cfg, 0)
    st.V[:] = np.sqrt(3.0)
    assert update_gamma_cent(st, prob)[0] == pytest.approx(3.0 * abs(h) ** 2 / 1e-9, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_y_is_scaled_mmse(seed):
    topo, ch, cfg = small_instance(seed, n_aps=3, n_users=5, M=2, N=2)
    delta = np.random.default_rng(seed).uniform(0.5, 2, topo.n_users)
    prob, st = _random_state(topo, ch, cfg, seed, delta)
    st.Gamma = update_gamma_cent(st, prob)
    Y = update_y_cent(st, prob)
    for u in range(topo.n_users):
        rows = ap_rows(topo.cluster(u), cfg.M)
        w = dense_mmse(ch, topo.cluster(u), u, st.V, range(topo.n_users))
        assert np.allclose(Y[rows, u], np.sqrt(delta[u] * (1 + st.Gamma[u])) * w, rtol=1e-9)
        off = np.setdiff1d(np.arange(Y.shape[0]), rows)
        assert np.all(Y[off, u] == 0)
    st.V[1] = 0
    st.Gamma = update_gamma_cent(st, prob)
    assert np.allclose(update_y_cent(st, prob)[:, 1], 0)


@pytest.mark.parametrize("seed", range(10))
def test_v_update_stationary(seed):
    """Finite differences of the Lagrangian vanish at the closed-form update."""
    topo, ch, cfg = small_instance(seed, n_aps=2, n_users=4, M=2, N=2)
    prob, st = _random_state(topo, ch, cfg, seed)
    st.Gamma = update_gamma_cent(st, prob)
    st.Y = update_y_cent(st, prob)
    V, lam, mu = update_v_cent(st, prob, cfg)
    nu = lam * st.Alpha + mu
    Yl = [st.Y[ap_rows(topo.cluster(u), cfg.M), u] for u in range(topo.n_users)]

    def f(Vx):
        return central_surrogate(topo, ch, Vx, Yl, st.Gamma, prob.delta, nu)

    h = 1e-3 * np.sqrt(cfg.p_t)
    scale = abs(f(V)) + 1.0
    for u in range(topo.n_users):
        for n in range(cfg.N):
            for step in (h, 1j * h):
                Vp, Vm = V.copy(), V.copy()
                Vp[u, n] += step
                Vm[u, n] -= step
                d = (f(Vp) - f(Vm)) / (2 * h)
                assert abs(d) * np.sqrt(cfg.p_t) / scale < 1e-5
    pw = np.sum(np.abs(V) ** 2, axis=1)
    assert np.all(pw <= cfg.p_t * (1 + 1e-9))
    assert np.allclose(pw[mu > 0], cfg.p_t, rtol=1e-5)


def test_solve_multipliers_slack_and_active():
    cfg = SimConfig(N=1)
    A = np.ones((2, 1, 1), complex)
    # unconstrained power: (c b / a)^2 = 0.25 P_T and 2 P_T
    b = np.array([[0.5 * np.sqrt(cfg.p_t)], [np.sqrt(2 * cfg.p_t)]], complex)
    lam, mu, V = solve_multipliers(A, b, np.ones(2), np.full(2, 1.0 / cfg.p_t), cfg, [100.0])
    assert lam[0] == 0 and mu[0] == 0
    assert mu[1] > 0
    assert abs(np.abs(V[1, 0]) ** 2 - cfg.p_t) <= cfg.bisect_tol * cfg.p_t
    assert np.abs(V[0, 0]) ** 2 == pytest.approx(0.25 * cfg.p_t)


def test_solve_multipliers_capacity():
    cfg = SimConfig(N=1, lambda_init=0.1)
    rng = np.random.default_rng(0)
    A = rng.uniform(0.5, 1.0, (6, 1, 1)).astype(complex)
    b = rng.uniform(0.5, 1.0, (6, 1)).astype(complex) * np.sqrt(cfg.p_t)
    alpha = np.full(6, 1.0 / cfg.p_t)
    lam, mu, V = solve_multipliers(A, b, np.ones(6), alpha, cfg, [2.0])
    load = np.sum(alpha * np.abs(V[:, 0]) ** 2)
    _, _, V0 = solve_multipliers(A, b, np.ones(6), alpha, cfg.replace(lambda_init=0.0), [2.0])
    assert lam[0] == pytest.approx(0.1)
    assert load < np.sum(alpha * np.abs(V0[:, 0]) ** 2)


def test_zero_receivers_give_zero_vectors():
    cfg = SimConfig(N=2)
    A = np.zeros((3, 2, 2), complex)
    b = np.zeros((3, 2), complex)
    _, _, V = solve_multipliers(A, b, np.ones(3), np.ones(3), cfg, [10.0])
    assert np.all(V == 0)


def test_update_alpha():
    cfg = SimConfig()
    V = np.array([[0.0], [np.sqrt(cfg.p_t)], [1.0]], complex)
    a = update_alpha(V, cfg)
    assert a[0] == pytest.approx(1 / cfg.epsilon)
    assert a[1] == pytest.approx(1 / (cfg.p_t + cfg.epsilon))
    assert a[0] > a[2] > a[1]


def test_keep_strongest_ties():
    p = np.array([3.0, 5.0, 5.0, 1.0, 5.0])
    m = keep_strongest(p, p > 0, 2)
    assert list(np.flatnonzero(m)) == [1, 2]


def test_single_user_single_ap():
    topo, ch, cfg = small_instance(3, n_aps=1, n_users=1, M=2)
    res = run_centralized(topo, ch, np.ones(1), cfg)
    assert res.scheduled[0]
    assert res.powers[0] == pytest.approx(cfg.p_t, rel=1e-6)
    h = ch.H[0, 0, :, 0]
    sinr = true_sinr_centralized(res.V, res.scheduled, ch, topo)[0]
    assert sinr == pytest.approx(cfg.p_t * np.linalg.norm(h) ** 2 / ch.sigma2, rel=1e-6)


def test_duplicate_users_treated_alike():
    topo, ch, cfg = small_instance(4, n_aps=2, n_users=5, M=2)
    H = ch.H.copy()
    H[:, 1] = H[:, 0]
    serving = topo.serving.copy()
    serving[1] = serving[0]
    topo = NetworkTopology(topo.ap_positions, topo.user_positions, topo.cpu_of_ap, serving=serving)
    from cfuplink.channel import ChannelRealization
    ch = ChannelRealization(H, ch.large_scale, ch.sigma2)
    res = run_centralized(topo, ch, np.ones(5), cfg)
    assert res.powers[0] == pytest.approx(res.powers[1], rel=1e-6, abs=1e-9 * cfg.p_t)


def test_no_users():
    topo, ch, cfg = small_instance(0, n_users=0)
    res = run_centralized(topo, ch, np.ones(0), cfg)
    assert res.scheduled.size == 0 and res.converged


@pytest.mark.parametrize("seed", range(8))
def test_surrogate_monotone_with_fixed_weights(seed):
    topo, ch, cfg = small_instance(seed, n_aps=2, n_users=6, M=2, lambda_init=0.0)
    delta = np.random.default_rng(seed).uniform(0.5, 2.0, 6)
    res = run_centralized(topo, ch, delta, cfg, freeze_alpha=True)
    t = np.array(res.trace)
    assert np.all(np.diff(t) >= -1e-8 * np.abs(t[1:]))
    o = np.array(res.objective)
    # the rate itself moves within the power-bisection tolerance
    assert np.all(np.diff(o) >= -cfg.bisect_tol * np.abs(o[1:]))


@pytest.mark.parametrize("seed", range(5))
def test_feasible_and_collinear(seed):
    topo, ch, cfg = small_instance(seed, n_aps=3, n_users=10, M=2)
    res = run_centralized(topo, ch, np.ones(10), cfg, record_states=True)
    assert np.all(res.powers <= cfg.p_t * (1 + 1e-9))
    assert res.scheduled.sum() <= topo.n_aps * cfg.M
    above = res.powers > cfg.power_threshold
    assert not np.any(res.scheduled & ~above)
    if above.sum() <= topo.n_aps * cfg.M:
        assert np.array_equal(res.scheduled, above)
    prev_V = np.full((10, 1), np.sqrt(cfg.p_t), complex)
    for st in res.states:
        for u in range(10):
            if np.linalg.norm(prev_V[u]) ** 2 < 1e-12 * cfg.p_t:
                continue  # direction undefined for a silent user
            y = st.Y[ap_rows(topo.cluster(u), cfg.M), u]
            w = mmse_receiver_centralized(u, prev_V, ch, topo)
            cos = abs(np.vdot(y, w)) / (np.linalg.norm(y) * np.linalg.norm(w))
            assert np.arccos(min(cos, 1.0)) < 1e-6
        prev_V = st.V
