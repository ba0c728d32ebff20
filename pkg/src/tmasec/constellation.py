"""M-PSK mapping, hard-decision demapping and bit error rate.

Points sit at angles ``2*pi*i/M`` (no offset, so BPSK is the real pair
``+1, -1``). Point ``i`` carries the Gray label ``i ^ (i >> 1)``, bits are
read most-significant first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Constellation:
    """Unit-modulus M-PSK constellation with a fixed Gray labeling."""

    M: int = 2
    points: np.ndarray = field(init=False, repr=False, compare=False)
    labels: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        M = int(self.M)
        if M < 2 or M & (M - 1):
            raise ValueError(f"M must be a power of two >= 2, got {self.M}")
        idx = np.arange(M)
        points = np.exp(2j * np.pi * idx / M)
        # exact values on the axes keep BPSK strictly real
        points = np.where(np.abs(points.real) < 1e-15, 1j * np.sign(points.imag), points)
        points = np.where(np.abs(points.imag) < 1e-15, np.sign(points.real) + 0j, points)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", idx ^ (idx >> 1))

    @property
    def bits_per_symbol(self) -> int:
        return int(np.log2(self.M))

    @property
    def is_real(self) -> bool:
        """True when every point lies on the real axis (BPSK)."""
        return bool(np.all(np.abs(self.points.imag) == 0))

    def random_symbols(self, rng: np.random.Generator, shape) -> np.ndarray:
        return self.points[rng.integers(0, self.M, size=shape)]


BPSK = Constellation(2)
QPSK = Constellation(4)


def _as_bits(bits) -> np.ndarray:
    b = np.asarray(bits).astype(np.int64).ravel()
    if np.any((b != 0) & (b != 1)):
        raise ValueError("bits must be 0 or 1")
    return b


def modulate(bits, c: Constellation = BPSK) -> np.ndarray:
    """Map a flat bit sequence to constellation points.

    Raises ``ValueError("ragged bitstream")`` when the length is not a
    multiple of ``log2(M)``.
    """
    b = _as_bits(bits)
    k = c.bits_per_symbol
    if b.size % k:
        raise ValueError("ragged bitstream")
    groups = b.reshape(-1, k)
    label = groups @ (1 << np.arange(k)[::-1])
    # invert the Gray labeling: label -> point index
    index_of_label = np.empty(c.M, dtype=np.int64)
    index_of_label[c.labels] = np.arange(c.M)
    return c.points[index_of_label[label]]


def decide(symbols, c: Constellation = BPSK) -> np.ndarray:
    """Nearest-point indices; ties go to the lowest index."""
    s = np.asarray(symbols, dtype=complex).ravel()
    d = np.abs(s[:, None] - c.points[None, :])
    return np.argmin(d, axis=1)


def demodulate(symbols, c: Constellation = BPSK) -> np.ndarray:
    """Hard-decision demapping back to a flat bit array (dtype int8)."""
    labels = c.labels[decide(symbols, c)]
    k = c.bits_per_symbol
    bits = (labels[:, None] >> np.arange(k)[::-1]) & 1
    return bits.astype(np.int8).ravel()


def ber(tx_bits, rx_bits) -> float:
    """Fraction of differing bits."""
    a = np.asarray(tx_bits).ravel()
    b = np.asarray(rx_bits).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        return 0.0
    return float(np.count_nonzero(a != b)) / a.size
