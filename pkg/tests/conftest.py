import numpy as np
import pytest

from cfuplink.channel import ChannelRealization, draw_large_scale, draw_realization
from cfuplink.model import SimConfig, noise_power
from cfuplink.topology import NetworkTopology, build_clusters, generate_topology


def small_instance(seed, n_aps=2, n_users=6, M=2, N=1, cpu_of_ap=None, overlap=0.5, **cfg_kw):
    """Hand-built instance: APs and users inside the central cell, random clusters.

    Every user is served by its strongest AP and, with probability
    ``overlap``, by each other AP.
    """
    rng = np.random.default_rng(seed)
    cfg = SimConfig(M=M, N=N, **cfg_kw)
    ap = rng.uniform(-0.2, 0.2, size=(n_aps, 2))
    users = rng.uniform(-0.2, 0.2, size=(n_users, 2))
    cpu = np.zeros(n_aps, dtype=int) if cpu_of_ap is None else np.asarray(cpu_of_ap)
    topo = NetworkTopology(ap, users, cpu)
    d = np.maximum(topo.ap_user_distances(), 0.02)
    large = 10.0 ** ((-112.4271 - 38.0 * np.log10(d)) / 10.0)
    serving = rng.uniform(size=(n_users, n_aps)) < overlap
    serving[np.arange(n_users), np.argmax(large, axis=0)] = True
    topo = NetworkTopology(ap, users, cpu, serving=serving)
    shape = (n_aps, n_users, M, N)
    G = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
    H = np.sqrt(large)[:, :, None, None] * G
    return topo, ChannelRealization(H, large, noise_power(cfg)), cfg


def network_instance(seed, aps_per_cell=2, density=30.0, **cfg_kw):
    """Random 7-cell network with clusters and one fading draw."""
    cfg = SimConfig(**cfg_kw)
    rng = np.random.default_rng(seed)
    topo = generate_topology(aps_per_cell=aps_per_cell, user_density_per_km2=density, rng_seed=rng)
    large = draw_large_scale(topo, cfg, rng)
    topo = build_clusters(topo, large, cfg.rho_km)
    return topo, draw_realization(topo, cfg, rng, large), cfg


@pytest.fixture
def small():
    return small_instance(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
