import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from tmasec.errors import InvalidParamsError
from tmasec.tma import (
    Geometry,
    NoiseModel,
    TmaParams,
    harmonic_coefficient,
    mixing_matrix,
    noise_for_snr,
    random_params,
    signal_power,
    transmit_frames,
    validate_params,
    vm,
)


def brute_force_frames(s, p, K, phi):
    """Direct triple sum over antennas, harmonics and source subcarriers."""
    N = p.N
    H = s.shape[0]
    y = np.zeros((H, K), dtype=complex)
    for i in range(K):
        for l in range(K):
            m = i - l
            v = 0j
            for n in range(N):
                dt = p.delta_taus[n]
                x = m * math.pi * dt
                sinc = 1.0 if m == 0 else math.sin(x) / x
                a = dt * sinc * complex(math.cos(-m * math.pi * (2 * p.tau[n] + dt)), math.sin(-m * math.pi * (2 * p.tau[n] + dt)))
                v += a * complex(math.cos(n * math.pi * phi), math.sin(n * math.pi * phi))
            y[:, i] += v / math.sqrt(N * K) * s[:, l]
    return y


def test_validate_reference_pattern():
    assert validate_params(TmaParams.linear(7, 6)) == []


def test_validate_zero_duration():
    rules = {v.rule for v in validate_params(TmaParams(7, 0.0, tuple(np.arange(7) / 7)))}
    assert "C3" in rules


def test_validate_repeated_instant():
    tau = list(np.arange(4) / 4)
    tau[1] = tau[0]
    v = validate_params(TmaParams(4, 0.25, tau))
    assert any(x.rule == "C2" and (1, 2) in x.indices for x in v)


def test_validate_off_grid_and_unequal():
    v = validate_params(TmaParams(4, (0.25, 0.25, 0.5, 0.25), (0, 0.25, 0.5, 0.3)))
    rules = [x.rule for x in v]
    assert "C1" in rules and "C2" in rules


def test_transmit_rejects_invalid():
    with pytest.raises(InvalidParamsError):
        transmit_frames(np.ones((2, 4)), TmaParams(4, 0.0, (0, 0.25, 0.5, 0.75)), 4, 0.3)


def test_harmonic_dc_and_zeros():
    p = TmaParams.linear(6, 2)
    for n in range(1, 7):
        assert harmonic_coefficient(0, n, p) == pytest.approx(p.delta_tau, abs=1e-15)
        assert abs(harmonic_coefficient(3, n, p)) < 1e-15  # m = N/h
        assert abs(harmonic_coefficient(6, n, p)) < 1e-15


def test_harmonic_high_precision():
    mpmath.mp.dps = 40
    p = TmaParams(4, 0.25, (0, 0.25, 0.5, 0.75))
    x = mpmath.pi / 4
    # phase -m*pi*(2*tau + dt) = -pi/4 for m = 1, tau = 0, dt = 1/4
    ref = mpmath.mpf(1) / 4 * mpmath.sin(x) / x * mpmath.exp(-1j * mpmath.pi / 4)
    got = harmonic_coefficient(1, 1, p)
    assert abs(got - complex(ref)) < 1e-12


@given(N=st.integers(2, 9), h=st.integers(1, 8), seed=st.integers(0, 2**32 - 1))
def test_vm_at_theta0(N, h, seed):
    h = 1 + (h - 1) % (N - 1)
    p = TmaParams(N, h / N, tuple(np.random.default_rng(seed).permutation(N) / N))
    assert vm(0, p, 0.0) == pytest.approx(N * h / N, abs=1e-12)
    for m in range(1, 20):
        assert abs(vm(m, p, 0.0)) < 1e-12
        assert abs(vm(-m, p, 0.0)) < 1e-12


@given(N=st.integers(2, 9), seed=st.integers(0, 2**32 - 1), phi=st.floats(-1.9, 1.9))
def test_vm_zero_at_multiples_of_N(N, seed, phi):
    p = random_params(np.random.default_rng(seed), N)
    for i in (1, 2, 3):
        assert abs(vm(i * N, p, phi)) < 1e-12
        assert abs(vm(-i * N, p, phi)) < 1e-12


def test_mixing_matrix_entries_by_index():
    p = random_params(np.random.default_rng(3), 5)
    mm = mixing_matrix(p, 9, 0.37)
    for i in range(9):
        for l in range(9):
            assert mm.matrix[i, l] == pytest.approx(vm(i - l, p, 0.37) / math.sqrt(5 * 9), abs=1e-14)
    for m in range(-8, 9):
        d = np.diagonal(mm.matrix, -m)
        assert np.ptp(np.abs(d - d[0])) < 1e-14


def test_mixing_matrix_diagonal_at_theta0():
    p = TmaParams.linear(7, 6)
    V = mixing_matrix(p, 16, Geometry.from_degrees(60, 60)).matrix
    off = V - np.diag(np.diagonal(V))
    assert np.abs(off).max() < 1e-12
    np.testing.assert_allclose(np.diagonal(V), 6 / 7 * math.sqrt(7 / 16), atol=1e-12)


def test_null_offset_support():
    p = TmaParams.linear(7, 6)
    mm = mixing_matrix(p, 16, 2 / 7)
    for m in range(-15, 16):
        nz = abs(mm.v(m)) > 1e-12
        assert nz == ((m - 1) % 7 == 0), m


@pytest.mark.parametrize("trial", range(20))
def test_transmit_matches_brute_force(trial):
    rng = np.random.default_rng(100 + trial)
    N = int(rng.integers(2, 9))
    K = int(rng.integers(2, 12))
    p = random_params(rng, N)
    phi = float(rng.uniform(-1.5, 1.5))
    s = rng.choice([-1.0, 1.0], size=(3, K)) + 0j
    y = transmit_frames(s, p, K, phi)
    ref = brute_force_frames(s, p, K, phi)
    assert np.abs(y - ref).max() <= 1e-10 * np.abs(ref).max()


def test_transmit_at_theta0_is_scaled_identity():
    p = TmaParams.linear(7, 6)
    s = np.random.default_rng(0).choice([-1, 1], size=(5, 16))
    y = transmit_frames(s, p, 16, 0.0)
    np.testing.assert_allclose(y, 6 / 7 * math.sqrt(7 / 16) * s, atol=1e-13)


def test_transmit_deterministic():
    p = TmaParams.linear(7, 6)
    s = np.ones((10, 16))
    noise = NoiseModel(0.1)
    a = transmit_frames(s, p, 16, 0.3, noise, np.random.default_rng(5))
    b = transmit_frames(s, p, 16, 0.3, noise, np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()


def test_noise_for_snr():
    p = TmaParams.linear(7, 6)
    V = mixing_matrix(p, 16, 0.3).matrix
    n = noise_for_snr(V, 20)
    assert signal_power(V) / n.sigma2 == pytest.approx(100)
    rng = np.random.default_rng(1)
    s = rng.choice([-1.0, 1.0], size=(20_000, 16))
    y = transmit_frames(s, p, 16, 0.3, n, rng)
    z = y - s @ V.T
    assert np.mean(np.abs(z) ** 2) == pytest.approx(n.sigma2, rel=0.02)


def test_random_params_valid_and_n2():
    rng = np.random.default_rng(0)
    for N in range(2, 9):
        for _ in range(50):
            assert validate_params(random_params(rng, N)) == []
    assert all(random_params(rng, 2).delta_tau == 0.5 for _ in range(20))


def test_random_params_uniform_chi_square():
    rng = np.random.default_rng(7)
    N, n = 7, 10_000
    h = [round(random_params(rng, N).delta_tau * N) for _ in range(n)]
    counts = np.bincount(h, minlength=N)[1:]
    expected = n / (N - 1)
    assert np.all(np.abs(counts - expected) < 5 * math.sqrt(expected))
    assert stats.chisquare(counts).pvalue > 1e-4


def test_slots():
    p = TmaParams(4, 0.75, (0, 0.5, 0.75, 0.25))
    assert p.slots() == (3, (0, 2, 3, 1))
    assert Fraction(p.slots()[0], 4) == Fraction(3, 4)
