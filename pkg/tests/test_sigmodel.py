import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import line_basis
from mrsquant.sigmodel import (SpectralParams, add_complex_noise, evaluate_model, fft,
                               flatten_for_network, frequency_axis, ifft, unflatten)


def test_identity_parameters_reproduce_the_basis_signal():
    b = line_basis([100.0])
    out = evaluate_model(b, SpectralParams([1.0], [0.0], [0.0]))
    np.testing.assert_array_equal(out, b.signals[0])


def test_zero_amplitudes_give_zero(fixture_basis):
    out = evaluate_model(fixture_basis, SpectralParams.zeros(6))
    assert np.all(out == 0)


def test_shift_moves_the_spectral_peak():
    b = line_basis([100.0], damping=5.0)
    n, dt = b.n_points, b.dwell_time_s
    before = evaluate_model(b, SpectralParams([1.0], [0.0], [0.0]))
    after = evaluate_model(b, SpectralParams([1.0], [0.0], [10.0]))
    assert np.argmax(np.abs(fft(before))) == round(100.0 * n * dt)
    assert np.argmax(np.abs(fft(after))) == round(110.0 * n * dt)


def test_positive_damping_term_slows_decay():
    b = line_basis([0.0], damping=20.0)
    base = np.abs(evaluate_model(b, SpectralParams([1.0], [0.0], [0.0])))
    narrowed = np.abs(evaluate_model(b, SpectralParams([1.0], [5.0], [0.0])))
    t = b.time
    np.testing.assert_allclose(narrowed, base * np.exp(5.0 * t), rtol=1e-12)


def test_background_term_enters_like_a_metabolite(fixture_basis):
    p = SpectralParams(np.zeros(6), np.zeros(6), np.zeros(6), bg_scale=0.5,
                       bg_damping_hz=-3.0, bg_shift_hz=2.0)
    t = fixture_basis.time
    want = 0.5 * fixture_basis.background_signal() * np.exp(-3.0 * t + 2j * np.pi * 2.0 * t)
    np.testing.assert_allclose(evaluate_model(fixture_basis, p), want, rtol=1e-13, atol=1e-15)


def test_weighted_sum_and_linearity(fixture_basis, rng):
    a = rng.uniform(0, 1, 6)
    p = SpectralParams(a, np.zeros(6), np.zeros(6))
    want = a @ fixture_basis.metabolite_signals()
    got = evaluate_model(fixture_basis, p)
    assert np.max(np.abs(got - want)) <= 1e-12 * np.max(np.abs(want))

    d, f = rng.uniform(-10, 10, 6), rng.uniform(-10, 10, 6)
    p1 = SpectralParams(a, d, f, 0.3, 2.0, -1.0)
    p2 = SpectralParams(2 * a, d, f, 0.6, 2.0, -1.0)
    np.testing.assert_allclose(evaluate_model(fixture_basis, p2),
                               2 * evaluate_model(fixture_basis, p1), rtol=1e-13, atol=1e-14)


def test_dimension_mismatch(fixture_basis):
    with pytest.raises(ValueError):
        evaluate_model(fixture_basis, SpectralParams.zeros(3))
    with pytest.raises(ValueError):
        SpectralParams([1.0, 2.0], [0.0], [0.0, 0.0])


def test_params_vector_roundtrip(rng):
    p = SpectralParams(rng.uniform(size=4), rng.normal(size=4), rng.normal(size=4), 0.2, 1.0, -2.0)
    assert SpectralParams.from_vectors(p.linear(), p.nonlinear()) == p


def test_infinite_snr_is_a_copy():
    x = np.arange(8) + 1j
    y = add_complex_noise(x, float("inf"), np.random.default_rng(0))
    np.testing.assert_array_equal(x, y)
    assert y is not x


def test_noise_level_follows_first_point():
    x = np.zeros(2048, complex)
    x[0] = 8.0
    noisy = add_complex_noise(x, 10.0, np.random.default_rng(5))
    assert abs(np.std((noisy - x).real) - 0.8) < 0.08
    assert abs(np.std((noisy - x).imag) - 0.8) < 0.08


def test_noise_statistics_over_many_draws():
    x = np.full(100_000, 3.0 + 4.0j)
    d = add_complex_noise(x, 5.0, np.random.default_rng(11)) - x
    for comp in (d.real, d.imag):
        assert abs(comp.mean()) < 0.02
        assert abs(comp.std() - 1.0) < 0.02


def test_noise_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        add_complex_noise(np.zeros(8, complex), 10.0, rng)
    with pytest.raises(ValueError):
        add_complex_noise(np.ones(8, complex), 0.0, rng)
    with pytest.raises(ValueError):
        add_complex_noise(np.ones(8, complex), -3.0, rng)


def test_noise_is_deterministic_given_rng_state():
    x = np.ones(64, complex)
    a = add_complex_noise(x, 10.0, np.random.default_rng(9))
    b = add_complex_noise(x, 10.0, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_fft_small_cases():
    np.testing.assert_allclose(fft([1, 0, 0, 0]), [1, 1, 1, 1], atol=1e-15)
    np.testing.assert_allclose(fft([1, 1, 1, 1]), [4, 0, 0, 0], atol=1e-15)
    with pytest.raises(ValueError):
        fft(np.ones(6))


def test_fft_matches_direct_dft(rng):
    n = 64
    x = rng.normal(size=n) + 1j * rng.normal(size=n)
    k = np.arange(n)
    dft = np.exp(-2j * np.pi * np.outer(k, k) / n) @ x
    np.testing.assert_allclose(fft(x), dft, atol=1e-11)


def test_fft_matches_library_and_roundtrips(rng):
    x = rng.normal(size=(3, 2048)) + 1j * rng.normal(size=(3, 2048))
    np.testing.assert_allclose(fft(x), np.fft.fft(x, axis=-1), atol=1e-9)
    assert np.max(np.abs(ifft(fft(x)) - x)) < 1e-9
    for row in x:
        lhs = np.sum(np.abs(row) ** 2)
        rhs = np.sum(np.abs(fft(row)) ** 2) / row.size
        assert abs(lhs - rhs) <= 1e-9 * lhs


def test_frequency_axis():
    f = frequency_axis(8, 0.125)
    np.testing.assert_array_equal(f, [0, 1, 2, 3, -4, -3, -2, -1])


def test_flatten_examples():
    np.testing.assert_array_equal(flatten_for_network(np.array([1 + 2j, 3 - 4j])),
                                  [[1, 3], [2, -4]])
    assert not np.any(flatten_for_network(np.zeros(4, complex)))


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.just(2), st.integers(1, 32)),
              elements=finite))
def test_pack_unpack_is_bit_exact(packed):
    z = unflatten(packed)
    np.testing.assert_array_equal(flatten_for_network(z), packed)
    np.testing.assert_array_equal(unflatten(flatten_for_network(z)), z)
