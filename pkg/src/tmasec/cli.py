"""Command-line entry point: ``tmasec <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import experiments as X
from . import resolver as R
from .constellation import Constellation
from .errors import DefyError, TmaSecError
from .frames import read_frames, write_frames
from .security import (
    InfeasibleRotationError,
    find_ambiguous_patterns,
    legit_snr,
    nonzero_spacing_check,
    rank_deficiency_check,
    rotation_defense,
)
from .tma import Geometry, TmaParams, mixing_matrix, noise_for_snr, transmit_frames

SWEEPS = ("sweep_H", "trace_nongauss", "sweep_k_snr", "sweep_snr", "sweep_delta_tau")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML experiment file")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("--profile", choices=("ci", "paper"), help="grid size preset")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--no-timing", action="store_true", help="leave wall_ms empty for byte-stable output")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _scenario_args(p: argparse.ArgumentParser):
    p.add_argument("--theta0", type=float, help="legitimate direction, degrees")
    p.add_argument("--theta-e", type=float, help="eavesdropper direction, degrees")
    p.add_argument("-K", type=int, help="subcarriers")
    p.add_argument("-N", type=int, help="antennas")
    p.add_argument("-H", type=int, help="frames")
    p.add_argument("--snr", type=float, help="eavesdropper SNR in dB")
    p.add_argument("--on-slots", type=int, help="ON duration in 1/N units")
    p.add_argument("--trials", type=int)
    p.add_argument("--phi-unknown", action="store_true", help="attack without knowing phi")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tmasec", description="TMA scrambling attack and defense simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="transmit-only BER at an angle")
    _common(p)
    _scenario_args(p)
    p.add_argument("--frames-out", help="also write the received frames of the first trial")

    p = sub.add_parser("attack", help="run the attack on generated or file-loaded frames")
    _common(p)
    _scenario_args(p)
    p.add_argument("--frames", help="frame file to attack instead of simulating")
    p.add_argument("-k", type=int, default=3, help="resolver candidate count")
    p.add_argument("--method", choices=("cmica", "fastica"), default="cmica")
    p.add_argument("--antennas", type=int, help="known antenna count")

    p = sub.add_parser("audit", help="security verdicts for a switching pattern")
    _common(p)
    _scenario_args(p)
    p.add_argument("--phi", type=float, help="offset cos(theta_e) - cos(theta0); overrides the angles")
    p.add_argument("--search-budget", type=int, default=200_000)

    p = sub.add_parser("defend", help="attack a transmitter that applies a defense")
    _common(p)
    _scenario_args(p)
    p.add_argument("--defense", choices=("randomize", "duplicate", "rotate"), default="randomize")
    p.add_argument("--dup-fraction", type=float, default=0.5)

    p = sub.add_parser("sweep", help="figure reproductions")
    _common(p)
    _scenario_args(p)
    p.add_argument("scenario", nargs="?", choices=SWEEPS, help="built-in sweep (ignored with --config)")

    p = sub.add_parser("table1", help="BER table over ten geometries")
    _common(p)
    _scenario_args(p)
    return ap


def _overrides(a) -> dict:
    o = {"seed": a.seed}
    if getattr(a, "theta0", None) is not None or getattr(a, "theta_e", None) is not None:
        o["geometry"] = [(a.theta0 if a.theta0 is not None else 60.0, a.theta_e if a.theta_e is not None else 40.0)]
        o["phi_known"] = [not a.phi_unknown]
    elif getattr(a, "phi_unknown", False):
        o["phi_known"] = False
    for key, attr in (("K", "K"), ("N", "N"), ("H", "H"), ("snr_db", "snr"), ("on_slots", "on_slots"), ("trials", "trials")):
        v = getattr(a, attr, None)
        if v is not None:
            o[key] = v
    return o


def _spec(a, scenario: str, **fixed) -> X.ExperimentSpec:
    o = _overrides(a)
    o.update(fixed)
    if a.config:
        return X.load_spec(a.config, a.profile, **o)
    return X.default_spec(scenario, a.profile, **o)


def _emit(a, rows, columns=None):
    X.write_csv(rows, a.out, columns, timing=not a.no_timing)


def cmd_simulate(a):
    spec = _spec(a, "custom", methods=["original"])
    rows = X.run_experiment(spec, a.workers)
    if a.frames_out:
        cell = X.expand(spec)[0]
        rng = np.random.default_rng(X.trial_seed(spec.seed, 0, 0))
        p = TmaParams.linear(cell.N, cell.on_slots)
        g = Geometry.from_degrees(cell.theta0_deg, cell.theta_e_deg)
        c = Constellation(cell.M)
        s = c.random_symbols(rng, (cell.H, cell.K))
        V = mixing_matrix(p, cell.K, g).matrix
        write_frames(a.frames_out, transmit_frames(s, p, cell.K, g, noise_for_snr(V, cell.snr_db), rng))
    _emit(a, rows)
    return 0


def cmd_attack(a):
    if not a.frames:
        spec = _spec(a, "custom", methods=[a.method], k=[a.k])
        _emit(a, X.run_experiment(spec, a.workers))
        return 0
    y = read_frames(a.frames)
    phi = None
    if a.theta0 is not None and a.theta_e is not None and not a.phi_unknown:
        phi = Geometry.from_degrees(a.theta0, a.theta_e).phi
    opts = R.ResolverOptions(k=min(a.k, y.shape[1] - 1), phi_known=phi, n_elements=a.antennas)
    from .ica import IcaOptions

    ica_opts = IcaOptions(real_sources=True, stage2=a.method == "cmica", seed=a.seed)
    try:
        res = R.defy(y, ica_opts, opts)
    except DefyError as e:
        print(f"attack failed at {e.stage}: {e.cause}", file=sys.stderr)
        return 2
    print(f"N={res.est_N} delta_tau={res.est_delta_tau} phi={res.est_phi:.6f} tau_on={res.est_tau_on}")
    if a.out:
        write_frames(a.out, res.symbols)
    return 0


def cmd_audit(a):
    N = a.N or 7
    K = a.K or 16
    h = a.on_slots or 1
    if a.phi is not None:
        phi = a.phi
        geo = None
    else:
        geo = (a.theta0 if a.theta0 is not None else 60.0, a.theta_e if a.theta_e is not None else 40.0)
        phi = Geometry.from_degrees(*geo).phi
    p = TmaParams.linear(N, h)
    v = rank_deficiency_check(p, K, phi)
    rows = [
        ("N", N), ("K", K), ("delta_tau", f"{h}/{N}"), ("phi", phi),
        ("rank_deficient", v.rank_deficient), ("relative_singular_value", v.relative_singular_value),
        ("lemma_predicate", v.lemma_predicate),
        ("nonzero_spacing", nonzero_spacing_check(mixing_matrix(p, K, phi), N)),
    ]
    if N <= 5 and K <= 6:
        amb = find_ambiguous_patterns(N, K, phi, search_budget=a.search_budget)
        rows += [("ambiguous_groups", len(amb.groups)), ("search_exhausted", amb.exhausted)]
    if geo is not None:
        try:
            r = rotation_defense(np.deg2rad(geo[0]), np.deg2rad(geo[1]), N)
            rows += [("rotation_deg", float(np.rad2deg(r.theta_r))), ("rotation_target", r.target)]
        except (InfeasibleRotationError, ValueError) as e:
            rows.append(("rotation", f"infeasible: {e}"))
    snr = legit_snr(N, K, h / N, 1.0)
    rows += [("legit_snr_db_at_unit_noise", snr.db), ("power_efficiency", snr.efficiency)]
    dicts = [{"check": k, "value": val} for k, val in rows]
    X.write_csv(dicts, a.out, ("check", "value"))
    return 0


def cmd_defend(a):
    spec = _spec(a, "custom", defense=a.defense, dup_fraction=a.dup_fraction)
    _emit(a, X.run_experiment(spec, a.workers))
    return 0


def cmd_sweep(a):
    if a.config:
        spec = X.load_spec(a.config, a.profile, **_overrides(a))
    else:
        if not a.scenario:
            raise SystemExit("sweep needs a scenario or --config")
        spec = X.default_spec(a.scenario, a.profile, **_overrides(a))
    if spec.scenario == "trace_nongauss":
        X.write_csv(X.trace_nongaussianity(spec), a.out, X.TRACE_COLUMNS)
    else:
        _emit(a, X.run_experiment(spec, a.workers))
    return 0


def cmd_table1(a):
    spec = _spec(a, "table1")
    _emit(a, X.run_table1(spec, a.workers))
    return 0


COMMANDS = {
    "simulate": cmd_simulate, "attack": cmd_attack, "audit": cmd_audit,
    "defend": cmd_defend, "sweep": cmd_sweep, "table1": cmd_table1,
}


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(a.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except (TmaSecError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
