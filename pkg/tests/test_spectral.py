import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nightatlas import spectral as sp
from oracles import naive_dft2

pow2 = st.sampled_from([1, 2, 4, 8, 16])
finite = st.floats(-10, 10, allow_nan=False)


def grids():
    return st.tuples(pow2, pow2).flatmap(lambda hw: arrays(np.float64, hw, elements=finite))


def test_zero_grid_has_zero_spectrum():
    assert not sp.fft2d(np.zeros((8, 8))).any()
    assert not sp.ifft2d(np.zeros((4, 8), dtype=complex)).any()


def test_constant_grid_concentrates_in_dc():
    g = sp.fft2d(np.full((8, 8), 0.3))
    assert g[0, 0] == pytest.approx(0.3 * 64, abs=1e-9)
    g[0, 0] = 0
    assert np.abs(g).max() < 1e-9


def test_random_8x8_matches_naive_dft():
    x = np.random.default_rng(1).random((8, 8))
    assert np.abs(sp.fft2d(x) - naive_dft2(x)).max() < 1e-9


def test_rectangular_grid_matches_naive_dft():
    x = np.random.default_rng(2).standard_normal((4, 8))
    assert np.abs(sp.fft2d(x) - naive_dft2(x)).max() < 1e-9


def test_impulse_round_trip_and_closed_form():
    x = np.zeros((4, 8))
    x[0, 0] = 1.0
    spec = sp.fft2d(x)
    assert np.allclose(spec, 1.0)
    # the inverse of an all-ones spectrum is the impulse; of the impulse, a flat 1/(W*H) grid
    assert np.allclose(sp.ifft2d(spec), x, atol=1e-12)
    assert np.allclose(sp.ifft2d(x.astype(complex)), 1 / 32, atol=1e-15)


def test_non_power_of_two_rejected():
    with pytest.raises(ValueError):
        sp.fft2d(np.zeros((6, 8)))
    with pytest.raises(ValueError):
        sp.fft2d(np.zeros(8))


@given(grids())
def test_round_trip(x):
    assert np.abs(sp.ifft2d(sp.fft2d(x)) - x).max() < 1e-9


@given(grids())
def test_parseval(x):
    lhs = np.sum(x ** 2)
    rhs = np.sum(np.abs(sp.fft2d(x)) ** 2) / x.size
    assert rhs == pytest.approx(lhs, rel=1e-9, abs=1e-12)


@given(grids(), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_linearity(x, a, b, seed):
    y = np.random.default_rng(seed).standard_normal(x.shape)
    lhs = sp.fft2d(a * x + b * y)
    rhs = a * sp.fft2d(x) + b * sp.fft2d(y)
    assert np.abs(lhs - rhs).max() < 1e-9


def test_modulus():
    assert sp.magnitude_spectrum(np.array([[3 + 4j]]))[0, 0] == 5.0
    g = np.random.default_rng(4).standard_normal((8, 8)) + 1j * np.random.default_rng(5).standard_normal((8, 8))
    oracle = np.array([[abs(complex(v)) for v in row] for row in g])
    assert np.allclose(sp.magnitude_spectrum(g), oracle, atol=1e-15)


@given(grids(), st.integers(-20, 20), st.integers(-20, 20))
def test_magnitude_invariant_to_circular_shift(x, dy, dx):
    a = sp.magnitude_spectrum(sp.fft2d(x))
    b = sp.magnitude_spectrum(sp.fft2d(np.roll(x, (dy, dx), axis=(0, 1))))
    assert np.abs(a - b).max() < 1e-9


def test_shift_and_log_flags():
    g = sp.fft2d(np.random.default_rng(6).random((8, 8)))
    plain = sp.magnitude_spectrum(g)
    shifted = sp.magnitude_spectrum(g, shift=True)
    assert shifted[4, 4] == plain[0, 0]
    assert np.allclose(sp.magnitude_spectrum(g, log=True), np.log1p(plain))


def test_padding_and_feature_length():
    img = np.random.default_rng(7).random((224, 224))
    padded = sp.pad_to_pow2(img)
    assert padded.shape == (256, 256)
    assert np.array_equal(padded[:224, :224], img) and not padded[224:].any() and not padded[:, 224:].any()
    feats = sp.spectral_features(img)
    assert feats.shape == (65536,)
    assert np.allclose(feats, np.abs(np.fft.fft2(padded)).ravel(), atol=1e-9)
    assert sp.next_power_of_two(224) == 256 and sp.is_power_of_two(256) and not sp.is_power_of_two(0)
