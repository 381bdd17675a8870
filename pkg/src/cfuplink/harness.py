"""Monte Carlo driver, result files and the command line.

Every topology trial is self-contained: it derives its random streams
from ``(seed, density, APs per cell, topology index)``, so all modes and
all ``kappa`` values of one experiment see the same layouts and fading
draws, and results do not depend on how trials are spread over workers.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .channel import draw_large_scale, draw_realization
from .evaluation import ALL_MODES, FairnessState, TimeSlotResult, evaluate, pf_update, round_robin_baseline
from .fp_centralized import run_centralized
from .fp_decentralized import run_decentralized_distributed, run_decentralized_semi
from .fp_exchange import run_distributed, run_semi_distributed
from .model import SimConfig, dbm_to_mw
from .topology import build_clusters, generate_topology

log = logging.getLogger(__name__)

WORKERS_ENV = "CFUPLINK_WORKERS"

ALLOCATORS = {
    "centralized": run_centralized,
    "distributed": run_distributed,
    "semi": run_semi_distributed,
    "dist-decentralized": run_decentralized_distributed,
    "semi-decentralized": run_decentralized_semi,
}
KAPPA_MODES = ("dist-decentralized", "semi-decentralized")
DEFAULT_KAPPAS = (0.5, 1.0, 2.0, 5.0, 10.0)

CSV_HEADER = ["mode", "density", "aps", "kappa", "topology", "timeslot", "user", "sinr", "se", "scheduled"]
CDF_HEADER = ["mode", "se", "cum_prob"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    modes: tuple = ("centralized", "semi", "distributed")
    n_topologies: int = 20
    n_timeslots: int = 1
    densities: tuple = (50.0,)
    aps_per_cell: tuple = (2,)
    kappas: tuple = (1.0,)
    seed: int = 0
    out_dir: str = "results"
    rr_groups: int = 2

    def __post_init__(self):
        self.modes = tuple(self.modes)
        if not self.modes:
            raise ConfigError("at least one mode is required")
        bad = [m for m in self.modes if m not in ALL_MODES]
        if bad:
            raise ConfigError(f"unknown mode(s): {', '.join(bad)}")
        if self.n_topologies < 1 or self.n_timeslots < 1:
            raise ConfigError("n_topologies and n_timeslots must be at least 1")
        if self.rr_groups < 1:
            raise ConfigError("rr_groups must be at least 1")
        self.densities = tuple(float(d) for d in self.densities)
        self.aps_per_cell = tuple(int(a) for a in self.aps_per_cell)
        self.kappas = tuple(float(k) for k in self.kappas)
        if not (self.densities and self.aps_per_cell and self.kappas):
            raise ConfigError("densities, aps_per_cell and kappas must be non-empty")
        if any(k < 0 for k in self.kappas):
            raise ConfigError("kappa must be non-negative")


# -- configuration file -------------------------------------------------------

_LIST_KEYS = {"modes": str, "densities": float, "aps_per_cell": int, "kappas": float}
_SPEC_KEYS = {"n_topologies": int, "n_timeslots": int, "seed": int, "out_dir": str, "rr_groups": int}


def _cfg_types():
    out = {}
    for f in fields(SimConfig):
        if f.name == "p_t":
            continue
        out[f.name] = {"M": int, "N": int, "fp_max_iters": int, "seed": int}.get(f.name, float)
    out["p_t_dbm"] = float
    return out


def parse_config(text: str):
    """Parse ``key = value`` lines into ``(ExperimentSpec, SimConfig)``.

    Lists are comma separated. ``seed`` seeds both the experiment and the
    config. ``kappa`` sets the config value; ``kappas`` the sweep list
    (defaulting to the single config value).
    """
    cfg_types = _cfg_types()
    spec_kw, cfg_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = (s.strip() for s in line.partition("="))
        if not sep or not key or not val:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        try:
            if key in _LIST_KEYS:
                spec_kw[key] = tuple(_LIST_KEYS[key](v.strip()) for v in val.split(",") if v.strip())
            elif key in _SPEC_KEYS or key in cfg_types:
                if key in _SPEC_KEYS:
                    spec_kw[key] = _SPEC_KEYS[key](val)
                if key in cfg_types:
                    conv = cfg_types[key]
                    cfg_kw[key] = None if (key == "epsilon_cs" and val.lower() == "none") else conv(val)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    if "p_t_dbm" in cfg_kw:
        cfg_kw["p_t"] = dbm_to_mw(cfg_kw.pop("p_t_dbm"))
    try:
        cfg = SimConfig(**cfg_kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    spec_kw.setdefault("kappas", (cfg.kappa,))
    spec = ExperimentSpec(**spec_kw)
    return spec, cfg


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


# -- running ------------------------------------------------------------------

@dataclass
class SlotRecord:
    mode: str
    density: float
    aps: int
    kappa: float
    topology: int
    timeslot: int
    result: TimeSlotResult


@dataclass
class AggregateResult:
    records: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def keys(self) -> list:
        seen = {}
        for r in self.records:
            seen.setdefault((r.mode, r.density, r.aps, r.kappa), None)
        return list(seen)

    def select(self, mode=None, density=None, aps=None, kappa=None) -> list:
        out = []
        for r in self.records:
            if mode is not None and r.mode != mode:
                continue
            if density is not None and r.density != density:
                continue
            if aps is not None and r.aps != aps:
                continue
            if kappa is not None and r.kappa != kappa:
                continue
            out.append(r)
        return out

    def sum_se(self, mode, **kw) -> np.ndarray:
        """Sum SE per (topology, timeslot) in trial order."""
        return np.array([r.result.sum_se for r in self.select(mode, **kw)])

    def mean_sum_se(self, mode, **kw):
        """``(mean, standard error)`` of the sum SE."""
        x = self.sum_se(mode, **kw)
        if len(x) == 0:
            return float("nan"), float("nan")
        se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
        return float(np.mean(x)), se

    def user_se(self, mode, **kw) -> np.ndarray:
        recs = self.select(mode, **kw)
        return np.concatenate([r.result.se for r in recs]) if recs else np.zeros(0)

    def jain(self, mode, **kw) -> np.ndarray:
        return np.array([r.result.jain for r in self.select(mode, **kw)])

    def summary(self) -> list:
        rows = []
        for mode, density, aps, kappa in self.keys():
            m, s = self.mean_sum_se(mode, density=density, aps=aps, kappa=kappa)
            j = self.jain(mode, density=density, aps=aps, kappa=kappa)
            rows.append(dict(mode=mode, density=density, aps=aps, kappa=kappa, mean_sum_se=m, stderr=s,
                             mean_jain=float(np.mean(j)), samples=len(j)))
        return rows


def trial_streams(seed: int, density: float, aps_per_cell: int, topology: int, n_timeslots: int):
    """Independent generators for layout, shadowing and each slot's fading."""
    ss = np.random.SeedSequence([int(seed), int(round(density * 1000)), int(aps_per_cell), int(topology)])
    kids = ss.spawn(2 + n_timeslots)
    return [np.random.default_rng(k) for k in kids]


def run_trial(spec: ExperimentSpec, cfg: SimConfig, density: float, aps_per_cell: int, topology: int):
    """One topology: all timeslots, all modes, all kappas. Returns ``(records, warnings)``."""
    streams = trial_streams(spec.seed, density, aps_per_cell, topology, spec.n_timeslots)
    topo = generate_topology(7, cfg.cell_radius_km, aps_per_cell, density,
                             rng_seed=streams[0], min_distance_km=cfg.min_distance_km)
    large = draw_large_scale(topo, cfg, streams[1])
    topo = build_clusters(topo, large, cfg.rho_km)
    n_aps = topo.n_aps
    U = topo.n_users
    runs = []  # (mode, kappa, cfg)
    for mode in spec.modes:
        if mode in KAPPA_MODES:
            runs += [(mode, k, cfg.replace(kappa=k)) for k in spec.kappas]
        else:
            runs.append((mode, None, cfg))
    pf = {(m, k): FairnessState.initial(U, cfg.eta) for m, k, _ in runs}
    records, warnings = [], []
    for t in range(spec.n_timeslots):
        channels = draw_realization(topo, cfg, streams[2 + t], large)
        for mode, kappa, c in runs:
            state = pf[(mode, kappa)]
            if mode == "round-robin":
                res = round_robin_baseline(topo, channels, c, spec.rr_groups, t)
            else:
                alloc = ALLOCATORS[mode](topo, channels, state.weights, c)
                res = evaluate(alloc, channels, topo, mode, t)
                if not alloc.converged:
                    warnings.append(f"{mode} did not converge: density={density} aps={n_aps} "
                                    f"topology={topology} timeslot={t}")
            _, pf[(mode, kappa)] = pf_update(state, res)
            for k in (spec.kappas if kappa is None else (kappa,)):
                records.append(SlotRecord(mode, density, n_aps, k, topology, t, res))
    return records, warnings


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def _trial_job(args):
    return run_trial(*args)


def run_experiment(spec: ExperimentSpec, cfg: SimConfig, workers: int = None) -> AggregateResult:
    """Monte Carlo over densities, AP counts and topologies.

    Trials run in a process pool when more than one worker is requested
    (argument or ``CFUPLINK_WORKERS``); results are reduced in trial order.
    """
    jobs = [(spec, cfg, d, a, t) for d in spec.densities for a in spec.aps_per_cell
            for t in range(spec.n_topologies)]
    workers = _worker_count() if workers is None else max(1, int(workers))
    if workers == 1 or len(jobs) == 1:
        outs = [run_trial(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_trial_job, jobs))
    agg = AggregateResult()
    for recs, warns in outs:
        agg.records.extend(recs)
        agg.warnings.extend(warns)
    order = {m: i for i, m in enumerate(spec.modes)}
    agg.records.sort(key=lambda r: (r.density, r.aps, r.kappa, order[r.mode], r.topology, r.timeslot))
    for w in agg.warnings:
        log.warning(w)
    return agg


def sweep_kappa(spec: ExperimentSpec, cfg: SimConfig, workers: int = None) -> AggregateResult:
    """Decentralized modes over ``spec.kappas`` with identical draws for every kappa."""
    bad = [m for m in spec.modes if m not in KAPPA_MODES]
    if bad:
        raise ConfigError(f"kappa sweep only applies to decentralized modes, got {', '.join(bad)}")
    return run_experiment(spec, cfg, workers)


# -- output files -------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def emit_csv(result: AggregateResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in result.records:
            s = r.result
            for u in range(len(s.se)):
                w.writerow([r.mode, _fmt(r.density), r.aps, _fmt(r.kappa), r.topology, r.timeslot, u,
                            _fmt(s.sinr[u]), _fmt(s.se[u]), int(bool(s.scheduled[u]))])


def empirical_cdf(values):
    """Distinct sorted values and the fraction of samples at or below each."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        return x, x
    vals, counts = np.unique(x, return_counts=True)
    return vals, np.cumsum(counts) / x.size


def emit_cdf(result: AggregateResult, path) -> None:
    """Per-user SE CDF of each mode, pooled over all trials."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CDF_HEADER)
        for mode in dict.fromkeys(k[0] for k in result.keys()):
            vals, cum = empirical_cdf(result.user_se(mode))
            for v, c in zip(vals, cum):
                w.writerow([mode, _fmt(v), _fmt(c)])


# -- overhead accounting ------------------------------------------------------

@dataclass
class OverheadReport:
    mode: str
    per_user_complexity: np.ndarray
    exchange: float
    n_iter: int

    @property
    def total_complexity(self) -> float:
        return float(np.sum(self.per_user_complexity))


def estimate_overhead(topo, cfg: SimConfig, mode: str, n_iter: int = None, result=None) -> OverheadReport:
    """Receiver complex-multiplication counts per user and the exchange volume.

    ``n_iter`` is the number of allocator iterations billed for the
    exchanged variables; it defaults to ``result.iterations`` when an
    allocator result is given and to ``cfg.fp_max_iters`` otherwise.
    """
    M, N = cfg.M, cfg.N
    B = topo.n_aps
    if n_iter is None:
        n_iter = result.iterations if result is not None else cfg.fp_max_iters
    n_iter = int(n_iter)
    c = topo.serving.sum(axis=1).astype(float)
    e_ap = topo.serving.sum(axis=0).astype(float)
    if mode in ("centralized", "round-robin"):
        return OverheadReport(mode, M**3 * c**2 * B + M**3 * c**3, 0.0, n_iter)
    if mode in ("distributed", "dist-decentralized"):
        comp = M**3 * c * B + M**3 * c
        if mode == "dist-decentralized":
            return OverheadReport(mode, comp, 0.0, 0)
        # sum over r and r' != r of M N |E_r| + N_iter (M+N) |E_r'|
        ex = (B - 1) * (M * N * e_ap.sum() + n_iter * (M + N) * e_ap.sum())
        return OverheadReport(mode, comp, float(ex), n_iter)
    if mode in ("semi", "semi-decentralized"):
        comp = np.zeros(topo.n_users)
        for q in range(topo.n_cpus):
            cq = topo.serving[:, topo.cpu_of_ap == q].sum(axis=1).astype(float)
            comp += M**3 * cq**2 * B + M**3 * cq**3
        if mode == "semi-decentralized":
            return OverheadReport(mode, comp, 0.0, 0)
        ex = 0.0
        for q in range(topo.n_cpus):
            others = topo.cpu_of_ap != q
            e_q = len(topo.users_of_cpu(q))
            ex += others.sum() * M * N * e_q + n_iter * (M + N) * e_ap[others].sum()
        return OverheadReport(mode, comp, float(ex), n_iter)
    raise ValueError(f"unknown mode {mode!r}")


# -- command line -------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="cfuplink", description="Cell-free uplink resource allocation experiments")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--mode", action="append", choices=ALL_MODES, help="mode to run (repeatable)")
        sp.add_argument("--topologies", type=int)
        sp.add_argument("--timeslots", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--workers", type=int)

    for name in ("run", "compare"):
        common(sub.add_parser(name))
    sk = sub.add_parser("sweep-kappa")
    common(sk)
    sk.add_argument("--kappa", type=float, action="append", help="kappa value (repeatable)")
    ov = sub.add_parser("overhead")
    common(ov)
    ov.add_argument("--iterations", type=int, help="iterations billed for exchanged variables")
    return p


def _spec_from_args(args):
    if args.config:
        spec, cfg = load_config(args.config)
    else:
        spec, cfg = parse_config("")
    kw = {}
    if args.mode:
        kw["modes"] = tuple(dict.fromkeys(args.mode))
    if args.topologies is not None:
        kw["n_topologies"] = args.topologies
    if args.timeslots is not None:
        kw["n_timeslots"] = args.timeslots
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out is not None:
        kw["out_dir"] = args.out
    if kw:
        base = {f.name: getattr(spec, f.name) for f in fields(ExperimentSpec)}
        base.update(kw)
        spec = ExperimentSpec(**base)
    return spec, cfg


def _print_summary(agg, out):
    for row in agg.summary():
        print(f"{row['mode']:20s} density={row['density']:g} aps={row['aps']} kappa={row['kappa']:g} "
              f"sum_se={row['mean_sum_se']:.3f} +/- {row['stderr']:.3f} jain={row['mean_jain']:.4f} "
              f"n={row['samples']}", file=out)


def cli_main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        spec, cfg = _spec_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.cmd == "overhead":
            for d in spec.densities:
                for a in spec.aps_per_cell:
                    for t in range(spec.n_topologies):
                        # realized iteration counts come from the first slot of the trial
                        rngs = trial_streams(spec.seed, d, a, t, 1)
                        topo = generate_topology(7, cfg.cell_radius_km, a, d, rng_seed=rngs[0],
                                                 min_distance_km=cfg.min_distance_km)
                        large = draw_large_scale(topo, cfg, rngs[1])
                        topo = build_clusters(topo, large, cfg.rho_km)
                        channels = None
                        for mode in spec.modes:
                            res = None
                            if args.iterations is None and mode in ("distributed", "semi"):
                                if channels is None:
                                    channels = draw_realization(topo, cfg, rngs[2], large)
                                res = ALLOCATORS[mode](topo, channels, np.ones(topo.n_users), cfg)
                            rep = estimate_overhead(topo, cfg, mode, args.iterations, res)
                            print(f"{mode:20s} density={d:g} aps={topo.n_aps} topology={t} "
                                  f"complexity={rep.total_complexity:.6g} "
                                  f"per_user_mean={np.mean(rep.per_user_complexity):.6g} "
                                  f"exchange={rep.exchange:.6g}", file=out)
            return 0
        if args.cmd == "sweep-kappa":
            if not args.mode:
                spec.modes = tuple(m for m in spec.modes if m in KAPPA_MODES) or KAPPA_MODES
            if args.kappa:
                spec.kappas = tuple(args.kappa)
            elif len(spec.kappas) == 1:
                spec.kappas = DEFAULT_KAPPAS
            agg = sweep_kappa(spec, cfg, args.workers)
        else:
            agg = run_experiment(spec, cfg, args.workers)
        _print_summary(agg, out)
        if args.cmd == "compare":
            base = spec.modes[0]
            for d in spec.densities:
                for a in spec.aps_per_cell:
                    n_aps = 7 * a
                    for k in spec.kappas:
                        ref, _ = agg.mean_sum_se(base, density=d, aps=n_aps, kappa=k)
                        for m in spec.modes[1:]:
                            val, _ = agg.mean_sum_se(m, density=d, aps=n_aps, kappa=k)
                            pct = 100.0 * (val - ref) / ref if ref else float("nan")
                            print(f"{m} vs {base}: density={d:g} aps={n_aps} kappa={k:g} "
                                  f"{val:.3f} vs {ref:.3f} delta={pct:+.2f}%", file=out)
        else:
            od = Path(spec.out_dir)
            od.mkdir(parents=True, exist_ok=True)
            stem = "sweep_kappa" if args.cmd == "sweep-kappa" else "run"
            emit_csv(agg, od / f"{stem}.csv")
            emit_cdf(agg, od / f"{stem}_cdf.csv")
            print(f"wrote {od / (stem + '.csv')} and {od / (stem + '_cdf.csv')}", file=out)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    sys.exit(cli_main())


__all__ = ["ExperimentSpec", "AggregateResult", "ConfigError", "load_config", "parse_config", "run_experiment",
           "sweep_kappa", "emit_csv", "emit_cdf", "estimate_overhead", "cli_main"]
