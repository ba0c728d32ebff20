"""Seeded Monte-Carlo experiments and CSV reports.

An :class:`ExperimentSpec` expands into a grid of :class:`Cell` objects; each
cell runs ``trials`` independent trials whose seeds derive from
``(master seed, cell index, trial index)``. A trial is fully determined by
its cell and its integer seed, and both are written to the CSV row.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import ica as _ica
from . import resolver as _res
from .constellation import Constellation, ber, demodulate, modulate
from .errors import DefyError
from .security import InfeasibleRotationError, duplicate_symbol_defense, randomize_switch_pattern, rotation_defense
from .tma import (
    Geometry,
    TmaParams,
    mixing_matrix,
    noise_for_snr,
    random_params,
    transmit_frames,
    transmit_frames_varying,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "scenario", "K", "N", "H", "snr_db", "k", "method",
    "ber_original", "ber_defied", "ber_defended", "failure_stage", "seed", "wall_ms",
)
EXTRA_COLUMNS = ("theta0_deg", "theta_e_deg", "delta_tau", "phi_known", "defense")
TRACE_COLUMNS = ("scenario", "method", "stage", "iteration", "total", "seed")

SCENARIOS = (
    "table1", "sweep_H", "trace_nongauss", "sweep_k_snr", "sweep_snr", "sweep_delta_tau", "custom",
)
METHODS = ("cmica", "fastica", "oracle", "original")
DEFENSES = ("none", "randomize", "duplicate", "rotate")

TABLE1_GEOMETRY = [
    (50, 90), (60, 30), (80, 40), (90, 50), (100, 80),
    (30, 70), (40, 90), (50, 130), (80, 150), (90, 140),
]


@dataclass
class ExperimentSpec:
    scenario: str = "custom"
    K: list = field(default_factory=lambda: [16])
    N: int = 7
    H: list = field(default_factory=lambda: [10_000])
    snr_db: list = field(default_factory=lambda: [20.0])
    geometry: list = field(default_factory=lambda: [(60, 40)])
    phi_known: list | bool = True
    on_slots: list | str = field(default_factory=lambda: [6])  # or "random"
    M: int = 2
    methods: list = field(default_factory=lambda: ["cmica"])
    k: list = field(default_factory=lambda: [3])
    trials: int = 1
    defense: str = "none"
    dup_fraction: float = 0.5
    seed: int = 0
    ica: dict = field(default_factory=dict)
    trace_iterations: int = 40

    def __post_init__(self):
        as_list = lambda v: list(v) if isinstance(v, (list, tuple)) else [v]
        self.K = [int(x) for x in as_list(self.K)]
        self.H = [int(x) for x in as_list(self.H)]
        self.snr_db = [float(x) for x in as_list(self.snr_db)]
        self.k = [int(x) for x in as_list(self.k)]
        self.methods = [str(x) for x in as_list(self.methods)]
        self.geometry = [tuple(float(a) for a in g) for g in self.geometry]
        if isinstance(self.phi_known, bool):
            self.phi_known = [self.phi_known] * len(self.geometry)
        self.phi_known = [bool(x) for x in self.phi_known]
        if self.on_slots != "random":
            self.on_slots = [int(x) for x in as_list(self.on_slots)]
        self.validate()

    def validate(self):
        bad = []
        if self.scenario not in SCENARIOS:
            bad.append(f"unknown scenario {self.scenario!r}")
        if any(m not in METHODS for m in self.methods):
            bad.append(f"methods must be among {METHODS}")
        if self.defense not in DEFENSES:
            bad.append(f"defense must be one of {DEFENSES}")
        if len(self.phi_known) != len(self.geometry):
            bad.append("phi_known needs one entry per geometry row")
        if self.N < 2:
            bad.append("N must be >= 2")
        if self.on_slots != "random" and any(not 1 <= h <= self.N - 1 for h in self.on_slots):
            bad.append("on_slots must lie in 1..N-1")
        if any(K < 2 for K in self.K) or any(H < 1 for H in self.H):
            bad.append("K must be >= 2 and H >= 1")
        if any(not 1 <= k for k in self.k):
            bad.append("k must be >= 1")
        if self.trials < 1:
            bad.append("trials must be >= 1")
        if bad:
            raise ValueError("invalid experiment spec: " + "; ".join(bad))

    @classmethod
    def from_dict(cls, d: dict, profile: str | None = None) -> "ExperimentSpec":
        d = dict(d)
        profiles = d.pop("profiles", {}) or {}
        if profile is not None:
            d.update(profiles.get(profile, {}))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_spec(path, profile: str | None = None, **overrides) -> ExperimentSpec:
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentSpec.from_dict(d, profile)


# Built-in experiment definitions; "ci" shrinks the grids to desk scale.
DEFAULTS = {
    "table1": {
        "scenario": "table1", "geometry": TABLE1_GEOMETRY,
        "phi_known": [True] * 5 + [False] * 5, "on_slots": [6], "H": [10_000],
        "snr_db": [20], "defense": "randomize", "seed": 1,
    },
    "sweep_H": {
        "scenario": "sweep_H", "on_slots": "random", "methods": ["cmica", "fastica"],
        "snr_db": [0, 15, 30], "H": [250, 500, 1000, 2000, 5000, 10_000], "trials": 30, "seed": 2,
        "profiles": {"ci": {"snr_db": [30], "H": [250, 500, 1000, 2000], "trials": 5},
                     "paper": {"K": [16, 64, 256], "H": [100, 300, 1000, 3000, 10_000, 30_000, 100_000]}},
    },
    "trace_nongauss": {
        "scenario": "trace_nongauss", "on_slots": [1], "H": [1000], "snr_db": [30],
        "methods": ["cmica", "fastica"], "seed": 3,
    },
    "sweep_k_snr": {
        "scenario": "sweep_k_snr", "on_slots": [1], "k": [1, 3], "snr_db": [10, 15, 20, 25, 30],
        "H": [1000, 3000, 10_000], "trials": 5, "seed": 4,
        "profiles": {"ci": {"snr_db": [15], "H": [10_000], "trials": 3}},
    },
    "sweep_snr": {
        "scenario": "sweep_snr", "on_slots": [6], "k": [1, 3], "H": [10_000],
        "snr_db": list(range(-50, 51, 10)), "methods": ["cmica", "fastica", "original", "oracle"],
        "trials": 3, "seed": 5,
        "profiles": {"ci": {"snr_db": [-10, 10, 30], "trials": 1, "H": [5000]}},
    },
    "sweep_delta_tau": {
        "scenario": "sweep_delta_tau", "on_slots": [1, 6], "snr_db": [30],
        "H": [500, 1000, 2000, 5000, 10_000], "trials": 5, "seed": 6,
        "profiles": {"ci": {"H": [1000, 5000], "trials": 2}},
    },
    "custom": {"scenario": "custom"},
}


def default_spec(scenario: str, profile: str | None = None, **overrides) -> ExperimentSpec:
    d = dict(DEFAULTS[scenario])
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentSpec.from_dict(d, profile)


@dataclass(frozen=True)
class Cell:
    scenario: str
    K: int
    N: int
    H: int
    snr_db: float
    k: int
    method: str
    theta0_deg: float
    theta_e_deg: float
    phi_known: bool
    on_slots: int | None  # None draws a random pattern per trial
    M: int = 2
    defense: str = "none"
    dup_fraction: float = 0.5
    ica: tuple = ()


def expand(spec: ExperimentSpec) -> list[Cell]:
    """Grid of cells in a fixed order; methods without a resolver get one k."""
    slots = [None] if spec.on_slots == "random" else spec.on_slots
    ica_items = tuple(sorted(spec.ica.items()))
    cells = []
    geo = list(zip(spec.geometry, spec.phi_known))
    for (g, known), K, h, H, snr, method in itertools.product(geo, spec.K, slots, spec.H, spec.snr_db, spec.methods):
        ks = spec.k if method in ("cmica", "fastica") else [spec.k[0]]
        for k in ks:
            cells.append(Cell(spec.scenario, K, spec.N, H, snr, k, method, g[0], g[1], known, h,
                              spec.M, spec.defense, spec.dup_fraction, ica_items))
    return cells


def trial_seed(master: int, cell_index: int, trial: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(cell_index, trial))
    return int(ss.generate_state(1, np.uint64)[0])


def _ica_options(cell: Cell, method: str) -> _ica.IcaOptions:
    c = Constellation(cell.M)
    opts = dict(cell.ica)
    if method == "fastica":
        opts.update(stage2=False, real_sources=False)
    else:
        opts.setdefault("real_sources", c.is_real)
    return _ica.IcaOptions(**opts)


def _attack_ber(y, bits, cell: Cell, phi: float, method: str, rng) -> tuple[float, str]:
    """BER after the attack and the failing stage ('' on success).

    A failed attack is scored on its best-effort matrix when one exists and
    as a coin flip (0.5) otherwise.
    """
    c = Constellation(cell.M)
    opts = _res.ResolverOptions(k=min(cell.k, cell.K - 1), phi_known=phi if cell.phi_known else None, constellation=c)
    try:
        out = _res.defy(y, _ica_options(cell, method), opts, rng=rng)
        return ber(bits, demodulate(out.symbols.ravel(), c)), ""
    except DefyError as e:
        if e.partial is not None:
            try:
                s = _res.recover_symbols(y, e.partial.F_final, c)
                return ber(bits, demodulate(s.ravel(), c)), e.stage
            except np.linalg.LinAlgError:
                pass
        return 0.5, e.stage


def run_trial(cell: Cell, seed: int) -> dict:
    """One Monte-Carlo trial; the returned row depends only on ``cell`` and ``seed``."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    c = Constellation(cell.M)
    h = cell.on_slots if cell.on_slots is not None else None
    p = TmaParams.linear(cell.N, h) if h is not None else random_params(rng, cell.N)
    g = Geometry.from_degrees(cell.theta0_deg, cell.theta_e_deg)
    bits = rng.integers(0, 2, cell.H * cell.K * c.bits_per_symbol)
    s = modulate(bits, c).reshape(cell.H, cell.K)
    V = mixing_matrix(p, cell.K, g).matrix
    noise = noise_for_snr(V, cell.snr_db)
    y = transmit_frames(s, p, cell.K, g, noise, rng)
    ber_original = ber(bits, demodulate(y.ravel(), c))
    ber_defied, ber_defended, stage = math.nan, math.nan, ""
    if cell.method == "oracle":
        ber_defied = ber(bits, demodulate(_res.recover_symbols(y, V, c).ravel(), c))
    elif cell.method in ("cmica", "fastica"):
        ber_defied, stage = _attack_ber(y, bits, cell, g.phi, cell.method, rng)
    if cell.defense != "none" and cell.method in ("cmica", "fastica"):
        gd = g
        if cell.defense == "randomize":
            stream = randomize_switch_pattern(rng, cell.N, p.common_delta_tau)
            yd = transmit_frames_varying(s, stream, cell.K, g, noise, rng)
            bits_d = bits
        elif cell.defense == "rotate":
            try:
                r = rotation_defense(g.theta0, g.theta, cell.N).theta_r
            except InfeasibleRotationError:
                r = 0.0
            gd = Geometry(g.theta0 + r, g.theta + r)
            yd = transmit_frames(s, p, cell.K, gd, noise, rng)
            bits_d = bits
        else:
            dup = duplicate_symbol_defense(s, rng, cell.dup_fraction)
            yd = transmit_frames(dup.symbols, p, cell.K, g, noise, rng)
            bits_d = demodulate(dup.symbols.ravel(), c)
        ber_defended, stage_d = _attack_ber(yd, bits_d, cell, gd.phi, cell.method, rng)
        if stage_d:
            stage = f"{stage}|defended:{stage_d}" if stage else f"defended:{stage_d}"
    row = {
        "scenario": cell.scenario, "K": cell.K, "N": cell.N, "H": cell.H, "snr_db": cell.snr_db,
        "k": cell.k, "method": cell.method, "ber_original": ber_original, "ber_defied": ber_defied,
        "ber_defended": ber_defended, "failure_stage": stage, "seed": seed,
        "wall_ms": (time.perf_counter() - t0) * 1e3,
        "theta0_deg": cell.theta0_deg, "theta_e_deg": cell.theta_e_deg,
        "delta_tau": f"{round(p.common_delta_tau * cell.N)}/{cell.N}",
        "phi_known": cell.phi_known, "defense": cell.defense,
    }
    return row


def _run_indexed(args):
    i, t, cell, seed = args
    return i, t, run_trial(cell, seed)


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> list[dict]:
    """Run every cell and trial; rows come back in grid order whatever ``workers`` is."""
    if spec.scenario == "trace_nongauss":
        raise ValueError("use trace_nongaussianity for the trace scenario")
    jobs = [
        (i, t, cell, trial_seed(spec.seed, i, t))
        for i, cell in enumerate(expand(spec))
        for t in range(spec.trials)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_run_indexed, jobs))
    else:
        out = [_run_indexed(j) for j in jobs]
    out.sort(key=lambda r: (r[0], r[1]))
    return [r for _, _, r in out]


def run_table1(spec: ExperimentSpec | None = None, workers: int = 1) -> list[dict]:
    return run_experiment(spec or default_spec("table1"), workers)


def sweep_samples(spec: ExperimentSpec | None = None, workers: int = 1) -> list[dict]:
    return run_experiment(spec or default_spec("sweep_H"), workers)


def sweep_k_snr(spec: ExperimentSpec | None = None, workers: int = 1) -> list[dict]:
    return run_experiment(spec or default_spec("sweep_k_snr"), workers)


def sweep_snr(spec: ExperimentSpec | None = None, workers: int = 1) -> list[dict]:
    return run_experiment(spec or default_spec("sweep_snr"), workers)


def sweep_delta_tau(spec: ExperimentSpec | None = None, workers: int = 1) -> list[dict]:
    return run_experiment(spec or default_spec("sweep_delta_tau"), workers)


def trace_nongaussianity(spec: ExperimentSpec | None = None) -> list[dict]:
    """Per-iteration total non-Gaussianity of the two-stage ICA and of stage 1 alone.

    The two-stage run splits ``trace_iterations`` evenly between the stages.
    """
    spec = spec or default_spec("trace_nongauss")
    rows = []
    for i, cell in enumerate(expand(spec)):
        seed = trial_seed(spec.seed, i, 0)
        rng = np.random.default_rng(seed)
        p = TmaParams.linear(cell.N, cell.on_slots) if cell.on_slots else random_params(rng, cell.N)
        g = Geometry.from_degrees(cell.theta0_deg, cell.theta_e_deg)
        c = Constellation(cell.M)
        s = c.random_symbols(rng, (cell.H, cell.K))
        V = mixing_matrix(p, cell.K, g).matrix
        y = transmit_frames(s, p, cell.K, g, noise_for_snr(V, cell.snr_db), rng)
        n = spec.trace_iterations
        if cell.method == "cmica":
            opts = _ica.IcaOptions(max_iter_stage1=n // 2, max_iter_stage2=n - n // 2, tol=1e-12)
        else:
            opts = _ica.IcaOptions(max_iter_stage1=n, stage2=False, tol=1e-12)
        res = _ica.cmica(y, opts, rng=rng)
        for j, t in enumerate(res.trace, start=1):
            rows.append({"scenario": cell.scenario, "method": cell.method, "stage": t.stage,
                         "iteration": j, "total": t.total, "seed": seed})
    return rows


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(round(float(v), 10))
    return str(v)


def rows_to_csv(rows: list[dict], columns=None, timing: bool = True) -> str:
    columns = columns or (CSV_COLUMNS + EXTRA_COLUMNS)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if (c == "wall_ms" and not timing) else _fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def write_csv(rows, path, columns=None, timing: bool = True) -> None:
    text = rows_to_csv(rows, columns, timing)
    if path in (None, "-"):
        print(text, end="")
    else:
        Path(path).write_text(text)


def summarize(rows: list[dict], keys=("scenario", "theta0_deg", "theta_e_deg", "K", "H", "snr_db", "k", "method")) -> list[dict]:
    """Mean BER per group of rows sharing ``keys``."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, rs in groups.items():
        d = dict(zip(keys, key))
        for col in ("ber_original", "ber_defied", "ber_defended"):
            vals = [r[col] for r in rs if not (isinstance(r[col], float) and math.isnan(r[col]))]
            d[col] = float(np.mean(vals)) if vals else math.nan
        d["trials"] = len(rs)
        d["failures"] = sum(1 for r in rs if r["failure_stage"])
        out.append(d)
    return out
