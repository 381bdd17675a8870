"""Large-scale and small-scale channel synthesis.

The channel from user ``u`` to AP ``r`` is ``sqrt(gain[r, u]) * G`` with
``G`` an M x N matrix of i.i.d. unit-variance circularly-symmetric complex
Gaussians. Shadowing is drawn once per topology; small-scale fading is
redrawn every time slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SimConfig, ap_rows, noise_power


def pathloss_db(d_km):
    """COST231 Walfisch-Ikegami pathloss at 1800 MHz, distance in km."""
    d = np.asarray(d_km, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    out = -112.4271 - 38.0 * np.log10(d)
    return float(out) if out.ndim == 0 else out


def draw_shadowing(rng, size=None, std_db: float = 4.0):
    """Lognormal shadowing as a linear gain (log-domain N(0, std_db^2))."""
    return 10.0 ** (rng.normal(0.0, std_db, size=size) / 10.0)


def draw_large_scale(topo, cfg: SimConfig, rng) -> np.ndarray:
    """Shadowed pathloss gain for every (AP, user) pair, shape (n_aps, n_users)."""
    d = topo.ap_user_distances()
    shadow = draw_shadowing(rng, size=d.shape, std_db=cfg.shadowing_std_db)
    return shadow * 10.0 ** (pathloss_db(d) / 10.0) if d.size else np.zeros(d.shape)


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """Channels ``H[r, u]`` (M x N), their large-scale gains and the noise power."""

    H: np.ndarray  # (n_aps, n_users, M, N)
    large_scale: np.ndarray  # (n_aps, n_users)
    sigma2: float

    @property
    def M(self) -> int:
        return self.H.shape[2]

    @property
    def N(self) -> int:
        return self.H.shape[3]

    def stacked(self) -> np.ndarray:
        """All AP channels stacked row-wise: shape (n_aps*M, n_users, N).

        Rows ``r*M .. r*M+M-1`` belong to AP ``r``.
        """
        R, U, M, N = self.H.shape
        return self.H.transpose(0, 2, 1, 3).reshape(R * M, U, N)


def draw_realization(topo, cfg: SimConfig, rng, large_scale=None) -> ChannelRealization:
    """Rayleigh small-scale fading on top of ``large_scale`` (drawn if not given)."""
    if large_scale is None:
        large_scale = draw_large_scale(topo, cfg, rng)
    R, U = large_scale.shape
    shape = (R, U, cfg.M, cfg.N)
    G = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    H = np.sqrt(large_scale)[:, :, None, None] * G
    return ChannelRealization(H, np.asarray(large_scale, dtype=float), noise_power(cfg))


def concat_cluster_channel(real: ChannelRealization, cluster, user: int) -> np.ndarray:
    """Stack ``H[r, user]`` for ``r`` in ``cluster`` (ascending AP index)."""
    cluster = np.asarray(cluster, dtype=int)
    if cluster.size == 0:
        raise ValueError("cluster is empty")
    return real.stacked()[ap_rows(cluster, real.M), user, :]
