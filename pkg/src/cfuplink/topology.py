"""Network layouts on a 7-cell wrap-around hexagonal region and user-centric clusters.

Hexagons are flat-topped with circumradius ``R``. The central cell sits at
the origin and its six neighbours at distance ``sqrt(3) R``. Virtual cell
``q`` is also CPU ``q``: it owns exactly the APs dropped inside it.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .channel import pathloss_db

SQRT3 = math.sqrt(3.0)


def hex_area(radius_km: float) -> float:
    return 1.5 * SQRT3 * radius_km**2


def cell_centers(radius_km: float, n_cells: int = 7) -> np.ndarray:
    if n_cells != 7:
        raise ValueError("only the 7-cell wrap-around layout is supported")
    ang = np.deg2rad(30.0 + 60.0 * np.arange(6))
    ring = SQRT3 * radius_km * np.column_stack([np.cos(ang), np.sin(ang)])
    return np.vstack([np.zeros((1, 2)), ring])


def wrap_shifts(radius_km: float) -> np.ndarray:
    """Identity plus the six translations tiling the plane with the 7-cell cluster."""
    d = SQRT3 * radius_km
    ang = np.deg2rad(30.0 + 60.0 * np.arange(6))
    u = np.column_stack([np.cos(ang), np.sin(ang)])
    shifts = d * (2.0 * u + np.roll(u, -1, axis=0))
    return np.vstack([np.zeros((1, 2)), shifts])


def in_hexagon(points: np.ndarray, center, radius_km: float) -> np.ndarray:
    p = np.atleast_2d(points) - np.asarray(center)
    ax, ay = np.abs(p[:, 0]), np.abs(p[:, 1])
    tol = 1e-12
    return (ay <= SQRT3 / 2 * radius_km + tol) & (SQRT3 * ax + ay <= SQRT3 * radius_km + tol)


def in_region(points: np.ndarray, radius_km: float) -> np.ndarray:
    pts = np.atleast_2d(points)
    return np.any([in_hexagon(pts, c, radius_km) for c in cell_centers(radius_km)], axis=0)


def wrap_distances(a: np.ndarray, b: np.ndarray, radius_km: float) -> np.ndarray:
    """Pairwise wrap-around distances, shape (len(a), len(b))."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    diff = a[:, None, None, :] - (b[None, :, None, :] + wrap_shifts(radius_km)[None, None, :, :])
    return np.sqrt(np.min(np.sum(diff**2, axis=-1), axis=-1))


@dataclass(frozen=True, eq=False)
class NetworkTopology:
    """AP/user positions, the CPU of each AP and (once built) the serving clusters.

    ``serving[u, r]`` is True when AP ``r`` belongs to the cluster of user
    ``u``. All cluster sets are derived from it.
    """

    ap_positions: np.ndarray
    user_positions: np.ndarray
    cpu_of_ap: np.ndarray
    cell_radius_km: float = 0.5
    n_cells: int = 7
    serving: Optional[np.ndarray] = None

    @property
    def n_aps(self) -> int:
        return len(self.ap_positions)

    @property
    def n_users(self) -> int:
        return len(self.user_positions)

    @property
    def n_cpus(self) -> int:
        return int(self.cpu_of_ap.max()) + 1 if self.n_aps else 0

    def _need_clusters(self):
        if self.serving is None:
            raise ValueError("clusters not built; call build_clusters first")
        return self.serving

    def aps_of_cpu(self, q: int) -> np.ndarray:
        """B_q."""
        return np.flatnonzero(self.cpu_of_ap == q)

    def cluster(self, u: int) -> np.ndarray:
        """C_u in ascending AP order."""
        return np.flatnonzero(self._need_clusters()[u])

    def users_of_ap(self, r: int) -> np.ndarray:
        """E_r."""
        return np.flatnonzero(self._need_clusters()[:, r])

    def users_of_cpu(self, q: int) -> np.ndarray:
        """E_q."""
        s = self._need_clusters()
        return np.flatnonzero(s[:, self.cpu_of_ap == q].any(axis=1))

    def cpus_of_user(self, u: int) -> np.ndarray:
        """D_u."""
        return np.unique(self.cpu_of_ap[self.cluster(u)])

    def cluster_at_cpu(self, q: int, u: int) -> np.ndarray:
        """C_qu = C_u intersected with B_q."""
        c = self.cluster(u)
        return c[self.cpu_of_ap[c] == q]

    def wrap_distance(self, a, b) -> float:
        return wrap_distance(a, b, self)

    def ap_user_distances(self) -> np.ndarray:
        """Wrap-around distance matrix, shape (n_aps, n_users)."""
        return wrap_distances(self.ap_positions, self.user_positions, self.cell_radius_km)

    def with_cpus(self, cpu_of_ap) -> "NetworkTopology":
        """Same layout and clusters with a different AP-to-CPU map."""
        return dataclasses.replace(self, cpu_of_ap=np.asarray(cpu_of_ap, dtype=int))


def wrap_distance(a, b, topo: NetworkTopology) -> float:
    """Shortest distance between two points over the 7 wrap-around images."""
    return float(wrap_distances(np.asarray(a, float), np.asarray(b, float), topo.cell_radius_km)[0, 0])


def _uniform_in_hex(rng, center, radius_km, n):
    out = np.empty((0, 2))
    while len(out) < n:
        k = 2 * (n - len(out)) + 8
        cand = rng.uniform([-radius_km, -SQRT3 / 2 * radius_km], [radius_km, SQRT3 / 2 * radius_km], size=(k, 2))
        cand = cand[in_hexagon(cand, (0.0, 0.0), radius_km)]
        out = np.vstack([out, cand])
    return out[:n] + np.asarray(center)


def generate_topology(
    n_cells: int = 7,
    cell_radius_km: float = 0.5,
    aps_per_cell: int = 4,
    user_density_per_km2: float = 100.0,
    rng_seed=None,
    min_distance_km: float = 0.02,
    max_retries: int = 10_000,
) -> NetworkTopology:
    """Drop APs and users uniformly in each hexagon.

    Each cell gets ``floor(density * hex_area)`` users. A user landing
    within ``min_distance_km`` of any AP (wrap-around) is redrawn inside
    its own cell; more than ``max_retries`` redraws for one user raises
    ``RuntimeError``.
    """
    if cell_radius_km <= 0:
        raise ValueError("cell radius must be positive")
    if user_density_per_km2 < 0 or aps_per_cell < 0:
        raise ValueError("density and AP count must be non-negative")
    rng = np.random.default_rng(rng_seed)
    centers = cell_centers(cell_radius_km, n_cells)
    users_per_cell = int(math.floor(user_density_per_km2 * hex_area(cell_radius_km) + 1e-9))

    aps = [_uniform_in_hex(rng, c, cell_radius_km, aps_per_cell) for c in centers]
    ap_pos = np.vstack(aps) if aps_per_cell else np.zeros((0, 2))
    cpu = np.repeat(np.arange(n_cells), aps_per_cell)

    users = []
    for c in centers:
        pts = _uniform_in_hex(rng, c, cell_radius_km, users_per_cell)
        for i in range(users_per_cell):
            tries = 0
            while len(ap_pos) and wrap_distances(pts[i], ap_pos, cell_radius_km).min() < min_distance_km:
                tries += 1
                if tries > max_retries:
                    raise RuntimeError("exclusion-zone sampling exceeded retry bound")
                pts[i] = _uniform_in_hex(rng, c, cell_radius_km, 1)[0]
        users.append(pts)
    user_pos = np.vstack(users) if users_per_cell else np.zeros((0, 2))
    return NetworkTopology(ap_pos, user_pos, cpu, float(cell_radius_km), n_cells)


def build_clusters(topo: NetworkTopology, large_scale: np.ndarray, rho_km: float) -> NetworkTopology:
    """Attach user-centric serving clusters.

    An AP serves user ``u`` when its shadowed large-scale gain reaches the
    unshadowed gain of a ``rho_km`` link; the strongest AP always serves.
    ``large_scale`` has shape (n_aps, n_users).
    """
    g = np.asarray(large_scale, dtype=float)
    if g.shape != (topo.n_aps, topo.n_users):
        raise ValueError(f"large_scale must have shape {(topo.n_aps, topo.n_users)}, got {g.shape}")
    threshold = 10.0 ** (pathloss_db(rho_km) / 10.0)
    serving = (g >= threshold).T
    if topo.n_users and topo.n_aps:
        serving[np.arange(topo.n_users), np.argmax(g, axis=0)] = True
    return dataclasses.replace(topo, serving=serving)


def single_cpu(topo: NetworkTopology) -> NetworkTopology:
    return topo.with_cpus(np.zeros(topo.n_aps, dtype=int))


def cpu_per_ap(topo: NetworkTopology) -> NetworkTopology:
    return topo.with_cpus(np.arange(topo.n_aps))


# -- text snapshot -------------------------------------------------------------

def dump_topology(topo: NetworkTopology) -> str:
    """Flat text form: one ``kind id x_km y_km cpu`` record per node."""
    lines = [f"# cell_radius_km={float(topo.cell_radius_km)!r} n_cells={topo.n_cells}"]
    for r, (x, y) in enumerate(topo.ap_positions):
        lines.append(f"ap {r} {float(x)!r} {float(y)!r} {int(topo.cpu_of_ap[r])}")
    for u, (x, y) in enumerate(topo.user_positions):
        lines.append(f"user {u} {float(x)!r} {float(y)!r} -1")
    return "\n".join(lines) + "\n"


def load_topology(text: str) -> NetworkTopology:
    radius, n_cells = 0.5, 7
    aps, users, cpus = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key == "cell_radius_km":
                    radius = float(val)
                elif key == "n_cells":
                    n_cells = int(val)
            continue
        parts = line.split()
        if len(parts) != 5 or parts[0] not in ("ap", "user"):
            raise ValueError(f"line {lineno}: malformed record {line!r}")
        kind, idx, x, y, cpu = parts
        if kind == "ap":
            aps[int(idx)] = (float(x), float(y))
            cpus[int(idx)] = int(cpu)
        else:
            users[int(idx)] = (float(x), float(y))
    ap_pos = np.array([aps[i] for i in range(len(aps))]).reshape(-1, 2)
    user_pos = np.array([users[i] for i in range(len(users))]).reshape(-1, 2)
    cpu = np.array([cpus[i] for i in range(len(cpus))], dtype=int)
    return NetworkTopology(ap_pos, user_pos, cpu, radius, n_cells)
