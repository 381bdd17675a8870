"""Shared configuration, unit conversions and small linear-algebra helpers.

All powers are kept in linear milliwatt. Channel gains are dimensionless
linear power ratios, so ``gain * power_mw`` is a received power in mW.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


def dbm_to_mw(x):
    """Convert dBm (scalar or array) to milliwatt."""
    if np.ndim(x):
        return 10.0 ** (np.asarray(x, dtype=float) / 10.0)
    return 10.0 ** (x / 10.0)


def mw_to_dbm(x):
    if np.ndim(x):
        return 10.0 * np.log10(np.asarray(x, dtype=float))
    return 10.0 * math.log10(x)


def db_to_linear(x):
    return dbm_to_mw(x)


def linear_to_db(x):
    return mw_to_dbm(x)


@dataclass(frozen=True)
class SimConfig:
    """Physical and algorithmic parameters of one simulation.

    Defaults: 8 AP antennas, single-antenna users, 23 dBm user power,
    -174 dBm/Hz noise with an 8 dB noise figure over 20 MHz, forgetting
    factor 0.2 and a 0.4 km cluster boundary.
    """

    M: int = 8
    N: int = 1
    p_t: float = field(default_factory=lambda: dbm_to_mw(23.0))
    noise_psd_dbm_hz: float = -174.0
    noise_figure_db: float = 8.0
    bandwidth_hz: float = 20e6
    eta: float = 0.2
    rho_km: float = 0.4
    epsilon_cs: Optional[float] = None
    kappa: float = 1.0
    shadowing_std_db: float = 4.0
    cell_radius_km: float = 0.5
    min_distance_km: float = 0.02
    fp_max_iters: int = 100
    fp_rel_tol: float = 1e-4
    bisect_tol: float = 1e-6
    power_threshold_frac: float = 0.01
    lambda_init: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("M", "N", "fp_max_iters"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        for name in ("p_t", "bandwidth_hz", "cell_radius_km", "fp_rel_tol", "bisect_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta!r}")
        if self.epsilon_cs is not None and not self.epsilon_cs > 0:
            raise ValueError(f"epsilon_cs must be positive, got {self.epsilon_cs!r}")
        # kappa = 0 is accepted as a diagnostic switch that drops the
        # non-local interference estimate entirely.
        if self.kappa < 0:
            raise ValueError(f"kappa must be non-negative, got {self.kappa!r}")
        if self.rho_km <= 0 or self.min_distance_km < 0 or self.shadowing_std_db < 0:
            raise ValueError("rho_km must be positive; min_distance_km and shadowing_std_db non-negative")
        if not 0.0 <= self.power_threshold_frac < 1.0:
            raise ValueError("power_threshold_frac must lie in [0, 1)")
        if self.lambda_init < 0:
            raise ValueError("lambda_init must be non-negative")

    @property
    def epsilon(self) -> float:
        """Reweighting constant, M / (0.9 P_T) unless set explicitly."""
        if self.epsilon_cs is not None:
            return self.epsilon_cs
        return self.M / (0.9 * self.p_t)

    @property
    def power_threshold(self) -> float:
        return self.power_threshold_frac * self.p_t

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


def noise_power(cfg: SimConfig) -> float:
    """Thermal noise power per receive antenna in mW."""
    if cfg.bandwidth_hz <= 0:
        raise ValueError("bandwidth must be positive")
    return dbm_to_mw(cfg.noise_psd_dbm_hz + 10.0 * math.log10(cfg.bandwidth_hz) + cfg.noise_figure_db)


# -- batched Hermitian helpers -------------------------------------------------

def hermitian_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for a stack of Hermitian positive-definite ``A``.

    ``A`` has shape (..., d, d) and ``b`` shape (..., d).
    """
    return np.linalg.solve(A, b[..., None])[..., 0]


def quad_form(x: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Real part of x^H A x over a stack."""
    return np.real(np.einsum("...i,...ij,...j->...", np.conj(x), A, x))


def group_by_length(index_lists):
    """Bucket variable-length index arrays by length for batched work.

    Returns a list of ``(positions, idx)`` where ``positions`` are the
    indices into ``index_lists`` and ``idx`` stacks the equally long arrays
    row-wise.
    """
    buckets: dict[int, list[int]] = {}
    for i, rows in enumerate(index_lists):
        buckets.setdefault(len(rows), []).append(i)
    out = []
    for d in sorted(buckets):
        pos = np.asarray(buckets[d], dtype=int)
        if d == 0:
            idx = np.zeros((len(pos), 0), dtype=int)
        else:
            idx = np.stack([np.asarray(index_lists[i], dtype=int) for i in pos])
        out.append((pos, idx))
    return out


def ap_rows(aps, M: int) -> np.ndarray:
    """Row indices of the stacked channel that belong to the given APs."""
    aps = np.sort(np.asarray(aps, dtype=int))
    return (aps[:, None] * M + np.arange(M)[None, :]).ravel()
