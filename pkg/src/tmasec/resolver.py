"""Resolve the scaling and permutation ambiguities left by ICA.

The candidate mixing matrix ``F = (W^H A)^-1`` equals the Toeplitz matrix
``V`` only up to a column permutation and a complex scale per column. The
resolver fixes the amplitude from the unit-modulus constellation, restores
the Toeplitz column order with a nearest-neighbour search on ``|F|``, reads
the antenna count off the null diagonals and finally pins the global phase
(and the switching pattern) by matching the main diagonal against its
closed form.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import ica as _ica
from .constellation import BPSK, Constellation, decide
from .errors import (
    DefyError,
    DegenerateCovarianceError,
    IrreducibleAmbiguityError,
    NullDiagonalError,
    PhaseAmbiguityError,
    TmaSecError,
)
from .tma import TmaParams, validate_params

log = logging.getLogger(__name__)


@dataclass
class ResolverOptions:
    k: int = 3
    phi_known: float | None = None
    constellation: Constellation = BPSK
    angle_tol: float | None = None  # default 2*pi/(4M)
    amp_tol: float = 0.05
    null_ratio: float = 0.1
    n_elements: int | None = None  # skip antenna-count estimation
    max_antennas: int = 12
    tau_tol: float = 0.1
    chi_max: float = 5.0
    search_tau: bool = False
    tau_exhaustive_max: int = 40320  # larger N! switches to the assignment solver

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def angle_tolerance(self) -> float:
        if self.angle_tol is not None:
            return self.angle_tol
        return 2 * np.pi / (4 * self.constellation.M)


@dataclass
class Candidate:
    """A column ordering of ``F`` and its diagonal dispersion."""

    order: tuple
    sigma: float
    F: np.ndarray = field(repr=False)


@dataclass
class ResolvedAttack:
    F_final: np.ndarray
    est_N: int
    est_delta_tau: Fraction
    est_phi: float
    est_tau_on: tuple | None
    symbols: np.ndarray | None
    diagnostics: dict = field(default_factory=dict)


# -- amplitude and column phase ---------------------------------------------


def amplitude_rescale(F, y, constellation: Constellation = BPSK) -> np.ndarray:
    """Scale every column of ``F`` so the separated sources have unit mean modulus."""
    F = np.asarray(F, dtype=complex)
    norms = np.linalg.norm(F, axis=0)
    if np.any(norms == 0):
        raise ValueError("zero column in candidate mixing matrix")
    s = np.asarray(y) @ np.linalg.inv(F).T
    scale = np.abs(s).mean(axis=0)
    if np.any(scale == 0):
        raise ValueError("separated source is identically zero")
    return F * scale


def phase_snap(F, y, constellation: Constellation = BPSK) -> np.ndarray:
    """Rotate columns so every source sits on the constellation grid.

    Leaves a per-column ambiguity of a multiple of ``2*pi/M``.
    """
    F = np.asarray(F, dtype=complex)
    M = constellation.M
    s = np.asarray(y) @ np.linalg.inv(F).T
    alpha = np.angle(np.mean(s**M, axis=0)) / M
    return F * np.exp(1j * alpha)


def refine_mixing(F, y, constellation: Constellation = BPSK, iterations: int = 2) -> np.ndarray:
    """Decision-directed least-squares re-estimate of ``F``.

    Symbols are hard-decided with the current ``F`` and ``F`` is refitted to
    ``y ~ F s``. The fit removes the noise bias that ``(W^H A)^-1`` inherits
    from the unmixing, while keeping the column order and the per-column
    phase ambiguity of the input.
    """
    F = np.asarray(F, dtype=complex)
    y = np.asarray(y)
    for _ in range(iterations):
        S = recover_symbols(y, F, constellation)
        if np.linalg.matrix_rank(S) < F.shape[1]:
            break
        F = np.linalg.lstsq(S, y, rcond=None)[0].T
    return F


# -- reordering --------------------------------------------------------------


def diag_dispersion(F) -> float:
    """Standard deviation over mean of the main-diagonal moduli."""
    d = np.abs(np.diagonal(np.asarray(F)))
    mean = d.mean()
    if mean == 0:
        return float("inf")
    return float(d.std() / mean)


def _cosine(ref, block, scaled=True):
    """Cosine similarity of ``ref`` (k,) with every column of ``block`` (k, C).

    With ``scaled`` the cosine is multiplied by the ratio of the smaller to
    the larger norm, so near-null columns of the right shape do not win.
    """
    a = np.linalg.norm(ref)
    b = np.linalg.norm(block, axis=0)
    num = ref @ block
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(a * b > 0, num / (a * b), 0.0)
        if scaled:
            out = out * np.where(a * b > 0, np.minimum(a, b) / np.maximum(a, b), 0.0)
    return out


def _order_from_seed(Q, seed, k, scaled=True):
    K = Q.shape[0]
    order = [seed]
    left = [c for c in range(K) if c != seed]
    ref = Q[:k, seed]
    for d in range(1, K - k + 1):
        block = Q[d : d + k][:, left]
        cos = _cosine(ref, block, scaled)
        dist = np.linalg.norm(block - ref[:, None], axis=0)
        best = np.flatnonzero(cos >= cos.max() - 1e-12)
        pick = best[np.argmin(dist[best])]
        order.append(left.pop(int(pick)))
    for d in range(K - k + 1, K):
        b = np.mean([Q[i, order[i]] for i in range(d)])
        diag = np.array([Q[d, c] for c in left])
        order.append(left.pop(int(np.argmin(np.abs(diag - b)))))
    return tuple(order)


def toeplitz_reorder_knn(F, k: int = 3, scaled: bool = True) -> list[Candidate]:
    """Return the ``k`` lowest-dispersion column orderings, one per seed column.

    Ties in similarity (always the case for plain cosine with ``k = 1``) are
    broken by Euclidean distance between the modulus vectors.
    """
    F = np.asarray(F)
    K = F.shape[0]
    if not 1 <= k <= K - 1:
        raise ValueError(f"k must be in 1..{K - 1}")
    Q = np.abs(F)
    cands = []
    for seed in range(K):
        order = _order_from_seed(Q, seed, k, scaled)
        Fr = F[:, order]
        cands.append(Candidate(order, diag_dispersion(Fr), Fr))
    cands.sort(key=lambda c: c.sigma)
    return cands[:k]


# -- antenna count -----------------------------------------------------------


def diagonal_means(F, absolute: bool = True) -> np.ndarray:
    """Mean over every diagonal ``i - l = m``; index ``m + K - 1``."""
    F = np.asarray(F)
    K = F.shape[0]
    G = np.abs(F) if absolute else F
    return np.array([np.diagonal(G, offset=-m).mean() for m in range(-(K - 1), K)])


def estimate_N(F, null_ratio: float = 0.1) -> int:
    """Smallest offset whose two diagonals are null, confirmed at its multiples."""
    F = np.asarray(F)
    K = F.shape[0]
    d = diagonal_means(F)
    thr = null_ratio * np.median(d)
    null = lambda m: max(d[m + K - 1], d[-m + K - 1]) < thr
    for m in range(1, K):
        if null(m) and all(null(j) for j in range(2 * m, K, m)):
            return m
    raise NullDiagonalError("N exceeds K-1 or pattern absent")


def periodic_fit(F, max_antennas: int = 12) -> dict[int, float]:
    """Reduced chi-square of the switching model for each antenna count.

    For a common ON duration on the ``1/N`` grid, ``m V_m`` is N-periodic in
    the offset ``m`` and ``V_m`` vanishes at nonzero multiples of N, whatever
    the ON instants and ``phi``. ``F`` must be phase-aligned. Each diagonal
    mean is fitted by that model; residuals are scaled by the spread of the
    entries around their diagonal mean.
    """
    F = np.asarray(F)
    K = F.shape[0]
    m = np.arange(-(K - 1), K)
    w = (K - np.abs(m)).astype(float)
    gen = diagonal_means(F, absolute=False)
    spread = sum(np.sum(np.abs(np.diagonal(F, -mm) - gen[mm + K - 1]) ** 2) for mm in m)
    s2 = max(spread / np.sum(w - 1), 1e-30)
    out = {}
    for N in range(2, max_antennas + 1):
        r = m % N
        res = 0.0
        npar = 1  # V_0 is free
        for q in range(N):
            sel = (r == q) & (m != 0)
            if q == 0:
                res += np.sum(w[sel] * np.abs(gen[sel]) ** 2)
                continue
            a = 1.0 / m[sel]
            S = np.sum(w[sel] * a * gen[sel]) / np.sum(w[sel] * a * a)
            res += np.sum(w[sel] * np.abs(gen[sel] - a * S) ** 2)
            npar += 1
        dof = m.size - npar
        if dof > 0:
            out[N] = float(res / s2 / dof)
    return out


# -- phase -------------------------------------------------------------------


def align_column_phases(F, constellation: Constellation = BPSK) -> np.ndarray:
    """Rotate columns by multiples of ``2*pi/M`` to restore the Toeplitz phase.

    Column ``j`` shifted down by one row must equal column ``j - 1``; the
    phase offset of each adjacent pair is rounded to the constellation grid.
    """
    F = np.array(F, dtype=complex)
    step = 2 * np.pi / constellation.M
    for j in range(1, F.shape[1]):
        c = np.vdot(F[1:, j], F[:-1, j - 1])
        F[:, j] *= np.exp(1j * step * np.round(np.angle(c) / step))
    return F


def dirichlet(N: int, phi: float) -> float:
    """``sin(N pi phi / 2) / sin(pi phi / 2)`` with its limit at the poles."""
    den = np.sin(np.pi * phi / 2)
    if abs(den) < 1e-12:
        return float(N * np.cos(np.pi * phi / 2 * (N - 1)))
    return float(np.sin(N * np.pi * phi / 2) / den)


def expected_v0(N: int, phi: float) -> tuple[float, float]:
    """Phase of ``V_0`` and ``|V_0| / delta_tau`` (before the ``1/sqrt(NK)`` scale)."""
    D = dirichlet(N, phi)
    angle = (N - 1) / 2 * np.pi * phi + (np.pi if D < 0 else 0.0)
    return float(np.angle(np.exp(1j * angle))), abs(D)


def _wrap(a):
    return np.angle(np.exp(1j * a))


def _check_v0(f0, N, K, phi, opts: ResolverOptions):
    """Return the matching ``h`` (``delta_tau = h/N``) or None."""
    ang, mag = expected_v0(N, phi)
    if mag < 1e-9:
        return None
    if abs(_wrap(np.angle(f0) - ang)) >= opts.angle_tolerance:
        return None
    scale = mag / np.sqrt(N * K)
    rel = np.abs(np.arange(1, N) / N * scale - abs(f0)) / (np.arange(1, N) / N * scale)
    h = int(np.argmin(rel)) + 1
    return h if rel[h - 1] < opts.amp_tol else None


def phase_versions(F, M):
    return [F * np.exp(2j * np.pi * u / M) for u in range(M)]


def _params_ok(N, h, tau=None):
    tau = tau if tau is not None else tuple(np.arange(N) / N)
    return not validate_params(TmaParams(N, h / N, tau))


def resolve_phase_known_phi(candidates, phi, constellation=BPSK, n_elements=None, opts=None, y=None):
    """Pick the global phase with a known ``phi``.

    Candidates are tried in order of increasing dispersion; the first
    ``(candidate, u)`` that matches both the phase and the amplitude of
    ``V_0`` wins.
    """
    opts = opts or ResolverOptions(constellation=constellation, phi_known=phi)
    counted = False
    for ci, cand in enumerate(candidates):
        Fc = align_column_phases(cand.F, constellation)
        K = Fc.shape[0]
        try:
            Ns = _antenna_counts(Fc, opts, n_elements)
        except NullDiagonalError:
            continue
        counted = True
        for N in Ns:
            for u, Fu in enumerate(phase_versions(Fc, constellation.M)):
                f0 = np.mean(np.diagonal(Fu))
                h = _check_v0(f0, N, K, phi, opts)
                if h is not None and _params_ok(N, h):
                    tau = None
                    if opts.search_tau:
                        tau = _search_tau(Fu, N, h, phi, opts)[0]
                    return _finish(Fu, N, h, phi, tau, y, constellation, {"candidate": ci, "u": u, "sigma": cand.sigma})
    if not counted:
        raise NullDiagonalError("N exceeds K-1 or pattern absent")
    raise PhaseAmbiguityError("phase ambiguity unresolved", survivors=[])


def _antenna_counts(F, opts, n_elements):
    """Antenna counts to try, smallest first."""
    if n_elements is not None:
        return [int(n_elements)]
    if opts.n_elements is not None:
        return [int(opts.n_elements)]
    fit = periodic_fit(F, opts.max_antennas)
    counts = [N for N, chi in fit.items() if chi <= opts.chi_max]
    return counts or [estimate_N(F, opts.null_ratio)]


def phi_roots(psi: float, N: int) -> list[float]:
    """All ``phi`` in (-1, 1] with ``(N-1) pi phi / 2 = psi`` modulo ``pi``.

    ``V`` is 2-periodic in ``phi``, so roots outside (-1, 1] describe the
    same matrix.
    """
    if N < 2:
        return []
    out = []
    lim = N + 1
    for i in range(-lim, lim + 1):
        phi = 2 * (psi + i * np.pi) / ((N - 1) * np.pi)
        if -1 < phi <= 1:
            out.append(float(phi))
    return out


def _is_null_phi(phi, N):
    x = phi * N / 2
    return abs(x - round(x)) < 1e-9 and round(x) != 0


def _generators_for_perms(N, h, phi, K, perms):
    """Harmonic sums ``V_m`` (m = -(K-1)..K-1) for each ON-slot permutation."""
    m = np.arange(-(K - 1), K)[:, None]
    dt = h / N
    base = dt * np.sinc(m * dt) * np.exp(-1j * m * np.pi * dt)  # (2K-1, 1)
    slots = np.exp(-2j * np.pi * m * np.arange(N)[None, :] / N)  # (2K-1, N)
    steer = np.exp(1j * np.arange(N) * np.pi * phi)
    P = np.asarray(perms)  # (P, N) slot of antenna n
    S = slots[:, P]  # (2K-1, P, N)
    return (base[:, :, None] * S) @ steer / np.sqrt(N * K)  # (2K-1, P)


def _search_tau(F, N, h, phi, opts, chunk=40320):
    """Best ON-slot permutation for ``F`` and its relative residual."""
    if math.factorial(N) > opts.tau_exhaustive_max:
        return _assign_tau(F, N, h, phi)
    K = F.shape[0]
    target = diagonal_means(F, absolute=False)
    scale = np.abs(target).max()
    best_res, best_perm = np.inf, None
    perms = itertools.permutations(range(N))
    while True:
        block = list(itertools.islice(perms, chunk))
        if not block:
            break
        G = _generators_for_perms(N, h, phi, K, block)
        res = np.abs(G - target[:, None]).max(axis=0) / scale
        i = int(np.argmin(res))
        if res[i] < best_res:
            best_res, best_perm = float(res[i]), block[i]
    tau = tuple(t / N for t in best_perm)
    return tau, best_res


def _assign_tau(F, N, h, phi):
    """Permutation search through a DFT fit and a linear assignment.

    ``V_m`` is ``base_m`` times the length-N DFT of the steering phases
    placed at their ON slots, so least squares recovers the per-slot phases
    and a minimum-cost assignment maps them back to antennas.
    """
    K = F.shape[0]
    target = diagonal_means(F, absolute=False)
    m = np.arange(-(K - 1), K)
    dt = h / N
    base = dt * np.sinc(m * dt) * np.exp(-1j * np.pi * m * dt) / np.sqrt(N * K)
    A = base[:, None] * np.exp(-2j * np.pi * np.outer(m, np.arange(N)) / N)
    x = np.linalg.lstsq(A, target, rcond=None)[0]  # phase at each slot
    steer = np.exp(1j * np.arange(N) * np.pi * phi)
    cost = np.abs(x[:, None] - steer[None, :]) ** 2  # slot x antenna
    slots, ants = linear_sum_assignment(cost)
    perm = np.empty(N, dtype=int)
    perm[ants] = slots
    G = _generators_for_perms(N, h, phi, K, [tuple(perm)])[:, 0]
    res = float(np.abs(G - target).max() / np.abs(target).max())
    return tuple(int(p) / N for p in perm), res


def resolve_phase_unknown_phi(candidates, constellation=BPSK, n_elements=None, opts=None, y=None):
    """Recover ``phi`` from the phase of ``V_0`` and then the global phase.

    Every ``phi`` branch consistent with the diagonal phase is checked
    against the amplitude of ``V_0``. Several survivors are separated by an
    exhaustive search over ON-slot permutations; if they still disagree on
    the recovered symbols the attack cannot decide and raises
    :class:`IrreducibleAmbiguityError`.
    """
    opts = opts or ResolverOptions(constellation=constellation)
    M = constellation.M
    survivors = []
    counted = False
    for ci, cand in enumerate(candidates):
        Fc = align_column_phases(cand.F, constellation)
        K = Fc.shape[0]
        try:
            Ns = _antenna_counts(Fc, opts, n_elements)
        except NullDiagonalError:
            continue
        counted = True
        f0_all = np.mean(np.diagonal(Fc))
        null_diag = abs(f0_all) < opts.null_ratio * np.abs(diagonal_means(Fc)).max()
        for N in Ns:
            for u, Fu in enumerate(phase_versions(Fc, M)):
                f0 = np.mean(np.diagonal(Fu))
                if null_diag:
                    phis = [2 * i / N for i in range(-N + 1, N) if i != 0 and -1 < 2 * i / N <= 1]
                    for phi in phis:
                        for h in range(1, N):
                            survivors.append((ci, u, N, h, phi, Fu))
                    continue
                for phi in phi_roots(float(np.angle(f0)), N):
                    if _is_null_phi(phi, N):
                        continue
                    h = _check_v0(f0, N, K, phi, opts)
                    if h is not None and _params_ok(N, h):
                        survivors.append((ci, u, N, h, phi, Fu))
        if survivors and not null_diag:
            break  # candidates are ordered by dispersion
    if not counted:
        raise NullDiagonalError("N exceeds K-1 or pattern absent")
    if not survivors:
        raise PhaseAmbiguityError("phase ambiguity unresolved: no survivors")
    if len(survivors) == 1 and not opts.search_tau:
        ci, u, N, h, phi, Fu = survivors[0]
        return _finish(Fu, N, h, phi, None, y, constellation, {"candidate": ci, "u": u, "survivors": 1})
    scored = []
    for ci, u, N, h, phi, Fu in survivors:
        tau, res = _search_tau(Fu, N, h, phi, opts)
        scored.append((res, ci, u, N, h, phi, tau, Fu))
    good = [s for s in scored if s[0] < opts.tau_tol]
    if not good:
        raise PhaseAmbiguityError(
            "phase ambiguity unresolved: no switching pattern reproduces F",
            survivors=[s[1:7] for s in scored],
        )
    groups = {}
    for s in good:
        groups.setdefault((candidates[s[1]].order, s[2]), []).append(s)
    if len(groups) > 1:
        raise IrreducibleAmbiguityError(
            "irreducible ambiguity", survivors=[s[1:7] for s in sorted(good, key=lambda s: s[0])]
        )
    res, ci, u, N, h, phi, tau, Fu = min(good, key=lambda s: s[0])
    return _finish(Fu, N, h, phi, tau, y, constellation, {"candidate": ci, "u": u, "survivors": len(survivors), "tau_residual": res})


def _finish(F, N, h, phi, tau, y, constellation, diag):
    symbols = recover_symbols(y, F, constellation) if y is not None else None
    return ResolvedAttack(F, N, Fraction(h, N), float(phi), tau, symbols, diag)


def recover_symbols(y, F_final, constellation: Constellation = BPSK) -> np.ndarray:
    """Hard-decided symbols for ``y = F s`` per frame, shape (H, K).

    Real constellations are solved by least squares on the stacked real and
    imaginary parts; otherwise ``F^-1 y``. Both equal ``F^-1 y`` without noise.
    """
    F = np.asarray(F_final)
    y = np.asarray(y)
    if np.linalg.cond(F) > 1e12:
        raise np.linalg.LinAlgError("singular F_final")
    if constellation.is_real:
        A = np.vstack([F.real, F.imag])
        s = np.linalg.lstsq(A, np.hstack([y.real, y.imag]).T, rcond=None)[0].T
    else:
        s = y @ np.linalg.inv(F).T
    return constellation.points[decide(s, constellation)].reshape(s.shape)


def defy(y, ica_opts: _ica.IcaOptions | None = None, opts: ResolverOptions | None = None, rng=None) -> ResolvedAttack:
    """Full attack: ICA, rescale, reorder, phase resolution, symbol recovery.

    Raises :class:`DefyError` naming the failing stage; ``partial`` then
    holds the best-effort result when one exists.
    """
    opts = opts or ResolverOptions()
    c = opts.constellation
    if ica_opts is None:
        ica_opts = _ica.IcaOptions(real_sources=c.is_real)
    y = np.asarray(y)
    try:
        sol = _ica.cmica(y, ica_opts, rng=rng)
    except DegenerateCovarianceError as e:
        raise DefyError("whitening", e) from e
    except (TmaSecError, ArithmeticError, np.linalg.LinAlgError) as e:
        raise DefyError("ica", e) from e
    try:
        F = amplitude_rescale(sol.mixing_estimate, y, c)
        F = phase_snap(F, y, c)
        F = refine_mixing(F, y, c)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise DefyError("rescale", e) from e
    K = F.shape[0]
    cands = toeplitz_reorder_knn(F, min(opts.k, K - 1))
    diag = {"sigmas": [cd.sigma for cd in cands], "ica_converged": sol.converged}
    best = cands[0]
    partial = ResolvedAttack(best.F, 0, Fraction(0), float("nan"), None, None, dict(diag))
    try:
        if opts.phi_known is not None:
            out = resolve_phase_known_phi(cands, opts.phi_known, c, opts=opts, y=y)
        else:
            out = resolve_phase_unknown_phi(cands, c, opts=opts, y=y)
    except NullDiagonalError as e:
        raise DefyError("estimate_N", e, partial) from e
    except PhaseAmbiguityError as e:
        partial.diagnostics["survivors"] = e.survivors
        raise DefyError("phase", e, partial) from e
    except np.linalg.LinAlgError as e:
        raise DefyError("recover", e, partial) from e
    out.diagnostics.update(diag)
    return out
