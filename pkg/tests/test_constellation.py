import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tmasec.constellation import BPSK, QPSK, Constellation, ber, demodulate, modulate


def test_bpsk_labeling():
    assert modulate([0], BPSK)[0] == 1
    assert modulate([1], BPSK)[0] == -1
    np.testing.assert_array_equal(modulate([0, 1, 0, 0], BPSK), [1, -1, 1, 1])


def test_qpsk_unit_modulus():
    bits = np.random.default_rng(0).integers(0, 2, 4000)
    np.testing.assert_allclose(np.abs(modulate(bits, QPSK)), 1.0, atol=1e-15)


def test_qpsk_gray_neighbours_differ_by_one_bit():
    pts = QPSK.points
    for i in range(4):
        j = (i + 1) % 4
        b_i = demodulate([pts[i]], QPSK)
        b_j = demodulate([pts[j]], QPSK)
        assert np.sum(b_i != b_j) == 1


def test_ragged_bitstream():
    with pytest.raises(ValueError, match="ragged bitstream"):
        modulate([0, 1, 1], QPSK)


def test_demodulate_examples():
    assert demodulate([0.9 + 0.1j], BPSK)[0] == 0
    assert demodulate([0.0], BPSK)[0] == 0  # tie goes to the lowest index


@pytest.mark.parametrize("M", [2, 4, 8, 16])
@given(data=st.data())
def test_round_trip(M, data):
    c = Constellation(M)
    n = data.draw(st.integers(0, 40)) * c.bits_per_symbol
    bits = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)), dtype=int)
    np.testing.assert_array_equal(demodulate(modulate(bits, c), c), bits)


@pytest.mark.parametrize("M", [2, 4, 8])
def test_mean_power_exactly_one(M):
    c = Constellation(M)
    s = c.random_symbols(np.random.default_rng(1), 10_000)
    assert abs(np.mean(np.abs(s) ** 2) - 1) < 1e-12


def test_ber_examples():
    a = np.array([0, 1, 1, 0, 1, 0, 0, 1])
    assert ber(a, a) == 0
    assert ber(a, 1 - a) == 1
    b = a.copy()
    b[3] ^= 1
    assert ber(a, b) == 0.125
    with pytest.raises(ValueError):
        ber(a, a[:-1])


def test_invalid_M():
    with pytest.raises(ValueError):
        Constellation(3)
