"""Time-modulated array OFDM transmitter at the subcarrier-symbol level.

Every antenna ``n`` is switched on for a normalized duration ``delta_tau``
starting at the normalized instant ``tau_on[n]``. The Fourier coefficients of
the switching waveform spill each subcarrier into its neighbours, so the
vector received on the K subcarriers at angle ``theta`` is ``y = V s + z``
with ``V`` a K x K Toeplitz matrix built from the harmonic sums ``V_m``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import toeplitz

from .errors import InvalidParamsError

_GRID_TOL = 1e-9


@dataclass(frozen=True)
class Violation:
    rule: str
    indices: tuple
    message: str

    def __str__(self):
        return f"({self.rule}) {self.message}"


@dataclass(frozen=True)
class TmaParams:
    """ON-OFF switching pattern of an N-element TMA.

    ``delta_tau`` may be a scalar (the usual case) or one value per antenna,
    so that rule violations can be represented and reported.
    """

    N: int
    delta_tau: float | Sequence[float]
    tau_on: Sequence[float]

    def __post_init__(self):
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "tau_on", tuple(float(t) for t in self.tau_on))
        if np.ndim(self.delta_tau) == 0:
            object.__setattr__(self, "delta_tau", float(self.delta_tau))
        else:
            object.__setattr__(self, "delta_tau", tuple(float(d) for d in self.delta_tau))

    @classmethod
    def linear(cls, N: int, on_slots: int) -> "TmaParams":
        """``delta_tau = on_slots/N`` and ``tau_on[n] = n/N`` (0-based n)."""
        return cls(N, on_slots / N, tuple(np.arange(N) / N))

    @property
    def delta_taus(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.delta_tau, dtype=float), (self.N,)).copy()

    @property
    def tau(self) -> np.ndarray:
        return np.asarray(self.tau_on, dtype=float)

    @property
    def common_delta_tau(self) -> float:
        d = self.delta_taus
        return float(d[0])

    def slots(self) -> tuple[int, tuple[int, ...]]:
        """Integer form ``(h, (t_1..t_N))`` with ``delta_tau = h/N``, ``tau_n = t_n/N``."""
        h = int(round(self.common_delta_tau * self.N))
        return h, tuple(int(round(t * self.N)) for t in self.tau_on)


@dataclass(frozen=True)
class Geometry:
    """Legitimate direction ``theta0`` and observation direction ``theta`` (radians)."""

    theta0: float
    theta: float

    @classmethod
    def from_degrees(cls, theta0_deg: float, theta_deg: float) -> "Geometry":
        return cls(np.deg2rad(theta0_deg), np.deg2rad(theta_deg))

    @property
    def phi(self) -> float:
        return float(np.cos(self.theta) - np.cos(self.theta0))


def _phi(g) -> float:
    return g.phi if isinstance(g, Geometry) else float(g)


@dataclass(frozen=True)
class MixingMatrix:
    """Toeplitz mixing matrix; ``generator[m + K - 1]`` holds ``V_m``."""

    N: int
    K: int
    generator: np.ndarray = field(repr=False)
    matrix: np.ndarray = field(repr=False)

    def v(self, m: int) -> complex:
        return complex(self.generator[m + self.K - 1])


@dataclass(frozen=True)
class NoiseModel:
    """Circular complex Gaussian noise, variance ``sigma2`` per subcarrier."""

    sigma2: float = 0.0

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")


def _on_grid(x: np.ndarray, N: int) -> np.ndarray:
    return np.abs(x * N - np.round(x * N)) < _GRID_TOL * max(N, 1)


def validate_params(p: TmaParams) -> list[Violation]:
    """Return every violated rule; an empty list means the pattern is valid."""
    out: list[Violation] = []
    N = p.N
    if N < 1:
        return [Violation("C1", (), f"N must be positive, got {N}")]
    d = p.delta_taus
    t = p.tau
    if t.size != N:
        return [Violation("C1", (), f"tau_on has {t.size} entries, expected {N}")]
    in_range = lambda x: (x > -_GRID_TOL) & (x < (N - 1) / N + _GRID_TOL)
    bad_d = np.flatnonzero(~(_on_grid(d, N) & in_range(d)))
    bad_t = np.flatnonzero(~(_on_grid(t, N) & in_range(t)))
    if bad_d.size:
        out.append(Violation("C1", tuple(int(i) + 1 for i in bad_d), "delta_tau not in {(h-1)/N}"))
    if bad_t.size:
        out.append(Violation("C1", tuple(int(i) + 1 for i in bad_t), "tau_on not in {(h-1)/N}"))
    dup = [
        (i + 1, j + 1)
        for i in range(N)
        for j in range(i + 1, N)
        if abs(t[i] - t[j]) < _GRID_TOL
    ]
    if dup:
        out.append(Violation("C2", tuple(dup), "ON instants not pairwise distinct"))
    if np.ptp(d) > _GRID_TOL:
        out.append(Violation("C2", tuple(range(1, N + 1)), "ON durations differ across antennas"))
    if abs(d.sum()) < _GRID_TOL:
        out.append(Violation("C3", (), "sum of ON durations is zero"))
    return out


def check_params(p: TmaParams) -> None:
    violations = validate_params(p)
    if violations:
        raise InvalidParamsError(violations)


def _sinc(x):
    # unnormalized sin(x)/x; numpy's sinc is sin(pi x)/(pi x)
    return np.sinc(np.asarray(x) / np.pi)


def harmonic_coefficient(m: int, n: int, p: TmaParams) -> complex:
    """Fourier coefficient ``a_mn`` of antenna ``n`` (1-based)."""
    if not 1 <= n <= p.N:
        raise IndexError(f"antenna index {n} outside 1..{p.N}")
    dt = p.delta_taus[n - 1]
    to = p.tau[n - 1]
    return complex(dt * _sinc(m * np.pi * dt) * np.exp(-1j * m * np.pi * (2 * to + dt)))


def harmonic_sums(ms, p: TmaParams, g) -> np.ndarray:
    """Vectorised ``V_m`` for an array of harmonic indices."""
    ms = np.atleast_1d(np.asarray(ms, dtype=float))
    phi = _phi(g)
    dt = p.delta_taus[None, :]
    to = p.tau[None, :]
    m = ms[:, None]
    a = dt * _sinc(m * np.pi * dt) * np.exp(-1j * m * np.pi * (2 * to + dt))
    steer = np.exp(1j * np.arange(p.N) * np.pi * phi)
    return a @ steer


def vm(m: int, p: TmaParams, g) -> complex:
    """Harmonic sum ``V_m`` seen at the geometry ``g`` (or a bare ``phi``)."""
    return complex(harmonic_sums([m], p, g)[0])


def toeplitz_from_generator(gen: np.ndarray, K: int, N: int) -> np.ndarray:
    """Entry (i, l) = gen[i - l + K - 1] / sqrt(N K)."""
    col = gen[K - 1 :]
    row = gen[K - 1 :: -1]
    return toeplitz(col, row) / np.sqrt(N * K)


def mixing_matrix(p: TmaParams, K: int, g) -> MixingMatrix:
    if K < 2:
        raise ValueError("K must be >= 2")
    gen = harmonic_sums(np.arange(-(K - 1), K), p, g)
    return MixingMatrix(p.N, K, gen, toeplitz_from_generator(gen, K, p.N))


def signal_power(V: np.ndarray) -> float:
    """Average per-subcarrier power of ``V s`` for unit-power i.i.d. symbols."""
    V = np.asarray(V)
    return float(np.real(np.vdot(V, V))) / V.shape[0]


def noise_for_snr(V: np.ndarray, snr_db: float) -> NoiseModel:
    """Noise whose variance gives the requested SNR at the observer of ``V``."""
    return NoiseModel(signal_power(V) / 10 ** (snr_db / 10))


def _frames(symbols, K: int) -> np.ndarray:
    s = np.asarray(symbols, dtype=complex)
    if s.ndim == 1:
        if s.size % K:
            raise ValueError(f"symbol count {s.size} not divisible by K={K}")
        s = s.reshape(-1, K)
    if s.shape[1] != K:
        raise ValueError(f"frames have {s.shape[1]} subcarriers, expected {K}")
    return s


def add_noise(y: np.ndarray, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    if noise.sigma2 == 0:
        return y
    z = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
    return y + np.sqrt(noise.sigma2 / 2) * z


def transmit_frames(
    symbols,
    p: TmaParams,
    K: int,
    g,
    noise: NoiseModel = NoiseModel(),
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Received frames, shape (H, K): each row is ``V s + z``."""
    check_params(p)
    s = _frames(symbols, K)
    V = mixing_matrix(p, K, g).matrix
    y = s @ V.T
    if noise.sigma2 > 0 and rng is None:
        raise ValueError("a random generator is required for noisy frames")
    return add_noise(y, noise, rng)


def transmit_frames_varying(
    symbols,
    params: Iterable[TmaParams],
    K: int,
    g,
    noise: NoiseModel = NoiseModel(),
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Like :func:`transmit_frames` but with a fresh switching pattern per frame."""
    s = _frames(symbols, K)
    y = np.empty_like(s)
    cache: dict = {}
    it = iter(params)
    for h in range(s.shape[0]):
        p = next(it)
        key = (p.N, p.delta_tau, p.tau_on)
        if key not in cache:
            check_params(p)
            cache[key] = mixing_matrix(p, K, g).matrix
        y[h] = cache[key] @ s[h]
    if noise.sigma2 > 0 and rng is None:
        raise ValueError("a random generator is required for noisy frames")
    return add_noise(y, noise, rng)


def random_params(rng: np.random.Generator, N: int) -> TmaParams:
    """Uniform draw over valid patterns: ``h`` in 1..N-1, random ON order."""
    if N < 2:
        raise ValueError("N must be >= 2")
    h = int(rng.integers(1, N))
    return TmaParams(N, h / N, tuple(rng.permutation(N) / N))
