"""Security conditions of the switching pattern and transmitter-side defenses."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

from .constellation import BPSK, Constellation
from .errors import TmaSecError
from .tma import TmaParams, check_params, mixing_matrix

RANK_THRESHOLD = 1e-10
NONZERO_EPS = 1e-12
Y_QUANTUM = 1e-9


class InfeasibleRotationError(TmaSecError):
    """No array rotation reaches a rank-deficient offset."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


@dataclass
class SecurityVerdict:
    rank_deficient: bool
    smallest_singular_value: float
    relative_singular_value: float
    lemma_predicate: bool
    ambiguous_pattern: bool | None = None
    witnesses: list = field(default_factory=list)
    notes: str = ""


def _is_null_offset(phi: float, N: int) -> bool:
    x = phi * N / 2
    return abs(x - round(x)) < 1e-9 and round(x) != 0


def _linear_instants(p: TmaParams) -> bool:
    return bool(np.allclose(p.tau, np.arange(p.N) / p.N, atol=1e-12))


def rank_deficiency_check(p: TmaParams, K: int, phi: float) -> SecurityVerdict:
    """Numerical rank of ``V`` plus the analytic rank-loss predicate.

    The predicate holds when ``phi`` is a nonzero multiple of ``2/N``, the ON
    instants are ``(n-1)/N`` and no multiple of N equals K.
    """
    V = mixing_matrix(p, K, phi).matrix
    sv = np.linalg.svd(V, compute_uv=False)
    rel = float(sv[-1] / sv[0]) if sv[0] > 0 else 0.0
    predicate = _is_null_offset(phi, p.N) and _linear_instants(p) and K % p.N != 0
    notes = []
    if predicate and rel >= RANK_THRESHOLD:
        notes.append("predicate holds but V is numerically full rank")
    return SecurityVerdict(
        rank_deficient=rel < RANK_THRESHOLD,
        smallest_singular_value=float(sv[-1]),
        relative_singular_value=rel,
        lemma_predicate=predicate,
        notes="; ".join(notes),
    )


def nonzero_spacing_check(V, N: int) -> bool:
    """True iff nonzeros sit on one residue class of offsets modulo N.

    Equivalently every row and column has its consecutive nonzero entries
    exactly N indices apart.
    """
    V = np.asarray(getattr(V, "matrix", V))
    nz = np.abs(V) > NONZERO_EPS
    for line in itertools.chain(nz, nz.T):
        idx = np.flatnonzero(line)
        if idx.size > 1 and np.any(np.diff(idx) != N):
            return False
    i, l = np.nonzero(nz)
    return bool(np.unique((i - l) % N).size <= 1)


@dataclass
class AmbiguitySearch:
    groups: list  # each a list of (delta_tau, tau_on, symbols)
    exhausted: bool
    evaluated: int


def find_ambiguous_patterns(
    N: int,
    K: int,
    phi: float,
    constellation: Constellation = BPSK,
    search_budget: int | None = None,
) -> AmbiguitySearch:
    """Exhaustively look for distinct (delta_tau, tau, s) that give one ``y``.

    Configurations are hashed on ``y`` rounded to a 1e-9 grid and every
    reported group is re-verified entrywise. ``exhausted`` is False when the
    budget cut the enumeration short.
    """
    S = np.array(list(itertools.product(constellation.points, repeat=K)))
    buckets: dict = {}
    evaluated = 0
    exhausted = True
    for h in range(1, N):
        for perm in itertools.permutations(range(N)):
            if search_budget is not None and evaluated + len(S) > search_budget:
                exhausted = False
                break
            tau = tuple(Fraction(t, N) for t in perm)
            V = mixing_matrix(TmaParams(N, h / N, tuple(float(t) for t in tau)), K, phi).matrix
            Y = S @ V.T
            keys = np.round(np.hstack([Y.real, Y.imag]) / Y_QUANTUM).astype(np.int64)
            for key, y, s in zip(map(bytes, keys), Y, S):
                buckets.setdefault(key, []).append((Fraction(h, N), tau, tuple(s), y))
            evaluated += len(S)
        if not exhausted:
            break
    groups = []
    for members in buckets.values():
        if len(members) < 2:
            continue
        y0 = members[0][3]
        ok = [m[:3] for m in members if np.max(np.abs(m[3] - y0)) < Y_QUANTUM]
        if len(ok) > 1:
            groups.append(ok)
    return AmbiguitySearch(groups, exhausted, evaluated)


@dataclass
class Rotation:
    theta_r: float
    i: int
    target: float
    residual: float


def _offset(theta0, theta_e, r):
    return np.cos(theta_e + r) - np.cos(theta0 + r)


def rotation_defense(theta0: float, theta_e: float, N: int) -> Rotation:
    """Smallest array rotation that puts the eavesdropper on ``phi = +-2i/N``.

    Uses ``cos(te + r) - cos(t0 + r) = 2 sin((t0 - te)/2) sin((t0 + te)/2 + r)``
    and keeps both rotated angles inside (0, pi). Angles in radians.
    """
    if abs(theta0 - theta_e) < 1e-12:
        raise ValueError("degenerate geometry: theta0 equals theta_e")
    amp = 2 * np.sin((theta0 - theta_e) / 2)
    mid = (theta0 + theta_e) / 2
    best = None
    tried = []
    for i in range(1, N):
        for sign in (1, -1):
            target = sign * 2 * i / N
            q = target / amp
            if abs(q) > 1:
                tried.append((target, "unreachable"))
                continue
            a = np.arcsin(q)
            for x in (a, np.pi - a):
                for k in (-1, 0, 1):
                    r = x + 2 * np.pi * k - mid
                    if not (0 < theta0 + r < np.pi and 0 < theta_e + r < np.pi):
                        continue
                    res = abs(_offset(theta0, theta_e, r) - target)
                    if best is None or abs(r) < abs(best.theta_r) - 1e-15:
                        best = Rotation(float(r), i, float(target), float(res))
    if best is None:
        raise InfeasibleRotationError(
            "infeasible: no rotation keeps both directions in (0, pi)",
            {"theta0": theta0, "theta_e": theta_e, "N": N, "tried": tried},
        )
    if abs(best.theta_r) < 1e-12:
        best.theta_r = 0.0
    return best


def randomize_switch_pattern(rng: np.random.Generator, N: int, delta_tau: float) -> Iterator[TmaParams]:
    """Endless stream of patterns with a fresh random ON order per frame."""
    check_params(TmaParams(N, delta_tau, tuple(np.arange(N) / N)))
    while True:
        yield TmaParams(N, delta_tau, tuple(rng.permutation(N) / N))


@dataclass
class DuplicatedStream:
    symbols: np.ndarray
    positions: np.ndarray  # (H, n_dup) subcarriers carrying the copy
    rate: float  # fraction of subcarriers still carrying fresh data


def duplicate_symbol_defense(symbols, rng: np.random.Generator, dup_fraction: float) -> DuplicatedStream:
    """Copy one symbol onto ``ceil(dup_fraction K)`` random subcarriers per frame."""
    if not 0 < dup_fraction < 1:
        raise ValueError("dup_fraction must lie in (0, 1)")
    s = np.array(symbols, dtype=complex)
    H, K = s.shape
    n = int(np.ceil(dup_fraction * K))
    pos = np.argsort(rng.random((H, K)), axis=1)[:, :n]
    rows = np.arange(H)[:, None]
    s[rows, pos] = s[np.arange(H), pos[:, 0]][:, None]
    return DuplicatedStream(s, pos, (K - n + 1) / K)


@dataclass
class LegitSnr:
    linear: float
    db: float
    efficiency: float


def legit_snr(N: int, K: int, delta_tau: float, sigma2: float) -> LegitSnr:
    """SNR of the legitimate receiver, ``N dt^2 / (K sigma2)``, and ``dt^2``."""
    eff = float(delta_tau) ** 2
    if sigma2 == 0:
        return LegitSnr(float("inf"), float("inf"), eff)
    if sigma2 < 0:
        raise ValueError("sigma2 must be positive")
    lin = N * eff / (K * sigma2)
    return LegitSnr(lin, float(10 * np.log10(lin)), eff)
