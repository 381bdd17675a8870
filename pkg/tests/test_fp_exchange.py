import numpy as np
import pytest

from cfuplink.fp_centralized import AllocationState, build_problem, run_centralized, update_v_cent
from cfuplink.fp_exchange import (
    ExchangeProblem,
    LocalDecisionSet,
    ap_processors,
    build_layout,
    cpu_processors,
    run_distributed,
    run_exchange,
    run_semi_distributed,
    select_v_max,
    update_gamma_local,
    update_tau_local,
    update_y_local,
)
from cfuplink.model import group_by_length
from cfuplink.topology import cpu_per_ap, single_cpu

from conftest import small_instance
from oracles import cluster_channel, dense_sinr


def _decisions(topo, ch, cfg, processors, seed):
    rng = np.random.default_rng(seed)
    lay = build_layout(topo, processors, cfg.M)
    prob = ExchangeProblem(ch.stacked(), lay, group_by_length(lay.pair_rows), ch.sigma2)
    n = lay.n_pairs
    Tau = (rng.standard_normal((n, cfg.N)) + 1j * rng.standard_normal((n, cfg.N))) * np.sqrt(cfg.p_t / 4)
    V = select_v_max(Tau, lay.pair_proc, lay.pair_user, topo.n_users)
    delta = rng.uniform(0.5, 2.0, topo.n_users)
    dec = LocalDecisionSet(Tau, V, np.zeros(n), np.zeros((prob.Hs.shape[0], n), complex),
                           rng.uniform(0.5, 2, n) / cfg.p_t, delta[lay.pair_user])
    return lay, prob, dec


@pytest.mark.parametrize("grouping", [ap_processors, cpu_processors])
@pytest.mark.parametrize("seed", range(3))
def test_gamma_and_y_match_oracle(seed, grouping):
    topo, ch, cfg = small_instance(seed, n_aps=4, n_users=6, M=2, N=2, cpu_of_ap=[0, 0, 1, 1])
    lay, prob, dec = _decisions(topo, ch, cfg, grouping(topo), seed)
    dec.Gamma = update_gamma_local(dec, prob)
    Y = update_y_local(dec, prob)
    for k in range(lay.n_pairs):
        u, aps = lay.pair_user[k], lay.pair_aps[k]
        g = dense_sinr(ch, aps, u, dec.V, range(topo.n_users), signal=dec.Tau[k])
        assert dec.Gamma[k] == pytest.approx(g, rel=1e-9)
        # receiver with the own local decision and everyone else's exchanged vector
        Hu = cluster_channel(ch, aps, u)
        s = Hu @ dec.Tau[k]
        B = ch.sigma2 * np.eye(len(s)) + np.outer(s, s.conj())
        for w in range(topo.n_users):
            if w != u:
                e = cluster_channel(ch, aps, w) @ dec.V[w]
                B += np.outer(e, e.conj())
        ref = np.sqrt(dec.Delta[k] * (1 + dec.Gamma[k])) * np.linalg.solve(B, s)
        assert np.allclose(Y[lay.pair_rows[k], k], ref, rtol=1e-9)


def test_zero_local_decision():
    topo, ch, cfg = small_instance(1, n_aps=2, n_users=5, M=2)
    lay, prob, dec = _decisions(topo, ch, cfg, ap_processors(topo), 1)
    dec.Tau[0] = 0
    dec.Gamma = update_gamma_local(dec, prob)
    assert dec.Gamma[0] == 0
    assert np.allclose(update_y_local(dec, prob)[:, 0], 0)


def test_user_scheduled_elsewhere_interferes():
    topo, ch, cfg = small_instance(2, n_aps=2, n_users=5, M=2, overlap=1.0)
    lay, prob, dec = _decisions(topo, ch, cfg, ap_processors(topo), 2)
    k = np.flatnonzero((lay.pair_proc == 1) & (lay.pair_user == 0))[0]
    with_u1 = update_gamma_local(dec, prob)[k]
    dec.V[1] = 0
    without_u1 = update_gamma_local(dec, prob)[k]
    assert without_u1 > with_u1


def test_select_v_max():
    Tau = np.array([[0.3], [0.7], [0.5], [0.5], [1.0]], complex)
    proc = np.array([0, 1, 0, 1, 0])
    user = np.array([0, 0, 1, 1, 2])
    V = select_v_max(Tau, proc, user, 3)
    assert V[0, 0] == 0.7
    # exact tie goes to the lower processor
    Tau2 = Tau.copy()
    Tau2[3] = 0.5j
    assert select_v_max(Tau2, proc, user, 3)[1, 0] == 0.5
    # single processor returns its own decision
    assert np.array_equal(select_v_max(Tau[[4]], proc[[4]], user[[4]], 3)[2], Tau[4])


def test_tau_update_reduces_to_centralized_on_one_ap():
    topo, ch, cfg = small_instance(3, n_aps=1, n_users=4, M=4, N=2)
    lay, prob, dec = _decisions(topo, ch, cfg, ap_processors(topo), 3)
    dec.Gamma = update_gamma_local(dec, prob)
    dec.Y = update_y_local(dec, prob)
    Tau, lam, mu = update_tau_local(dec, prob, cfg)
    cprob = build_problem(topo, ch, dec.Delta, cfg)
    st = AllocationState(dec.V, dec.Gamma, dec.Y, dec.Alpha, dec.Delta)
    V, clam, cmu = update_v_cent(st, cprob, cfg)
    assert np.allclose(Tau, V, rtol=1e-10, atol=1e-12)


def test_tau_power_and_zero_receivers():
    topo, ch, cfg = small_instance(4, n_aps=3, n_users=6, M=2, cpu_of_ap=[0, 0, 1])
    lay, prob, dec = _decisions(topo, ch, cfg, cpu_processors(topo), 4)
    dec.Gamma = update_gamma_local(dec, prob)
    dec.Y = update_y_local(dec, prob)
    Tau, _, _ = update_tau_local(dec, prob, cfg)
    assert np.all(np.sum(np.abs(Tau) ** 2, axis=1) <= cfg.p_t * (1 + 1e-9))
    dec.Y[:] = 0
    Tau, _, _ = update_tau_local(dec, prob, cfg)
    assert np.all(Tau == 0)


@pytest.mark.parametrize("seed", range(3))
def test_one_ap_network_matches_centralized(seed):
    topo, ch, cfg = small_instance(seed, n_aps=1, n_users=5, M=3)
    a = run_distributed(topo, ch, np.ones(5), cfg)
    b = run_centralized(topo, ch, np.ones(5), cfg)
    assert np.allclose(a.powers, b.powers, rtol=1e-6, atol=1e-6 * cfg.p_t)
    assert np.array_equal(a.scheduled, b.scheduled)


@pytest.mark.parametrize("seed", range(3))
def test_semi_degenerate_cases(seed):
    topo, ch, cfg = small_instance(seed, n_aps=3, n_users=6, M=2, cpu_of_ap=[0, 1, 1])
    delta = np.random.default_rng(seed).uniform(0.5, 2.0, 6)
    one = single_cpu(topo)
    assert np.allclose(run_semi_distributed(one, ch, delta, cfg).powers,
                       run_centralized(one, ch, delta, cfg).powers, rtol=1e-6, atol=1e-6 * cfg.p_t)
    each = cpu_per_ap(topo)
    assert np.allclose(run_semi_distributed(each, ch, delta, cfg).powers,
                       run_distributed(each, ch, delta, cfg).powers, rtol=1e-6, atol=1e-6 * cfg.p_t)


def test_no_users():
    topo, ch, cfg = small_instance(0, n_users=0)
    for f in (run_distributed, run_semi_distributed):
        res = f(topo, ch, np.ones(0), cfg)
        assert res.scheduled.size == 0


@pytest.mark.parametrize("seed", range(4))
def test_selection_and_capacity(seed):
    topo, ch, cfg = small_instance(seed, n_aps=3, n_users=12, M=2, cpu_of_ap=[0, 0, 1], overlap=0.7)
    for f in (run_distributed, run_semi_distributed):
        res = f(topo, ch, np.ones(12), cfg)
        lay = res.layout
        for u in range(12):
            taus = res.tau[lay.pair_user == u]
            assert any(np.array_equal(res.V[u], t) for t in taus)
        cap = lay.capacity
        assert np.all(res.assignment.sum(axis=1) <= cap)
        assert np.all(res.powers <= cfg.p_t * (1 + 1e-9))
        # a processor only serves its own users
        for p in range(lay.n_processors):
            assert set(np.flatnonzero(res.assignment[p])) <= set(lay.users_of(p))


def test_single_processor_objective_monotone():
    """With one processor the exchange loop is exact block ascent."""
    for seed in range(5):
        topo, ch, cfg = small_instance(seed, n_aps=2, n_users=6, M=2, lambda_init=0.0)
        res = run_exchange(topo, ch, np.ones(6), cfg, [np.arange(2)], "semi", freeze_alpha=True)
        o = np.array(res.objective)
        # the rate itself moves within the power-bisection tolerance
        assert np.all(np.diff(o) >= -cfg.bisect_tol * np.abs(o[1:]))
