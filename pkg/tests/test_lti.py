import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from nanomu.lti import (
    InvalidParameterError,
    ModePair,
    PoleOnGridError,
    RationalTF,
    UnsupportedDelayError,
    as_grid,
    evaluate,
    feedback,
    freq_response,
    is_stable,
    pade_delay,
    poly_roots,
    rationalize,
    series,
    tf_from_mode_pair,
)


def test_coefficients_are_trimmed_and_read_only():
    tf = RationalTF([1.0, 2.0, 0.0], [1.0, 0.0, 0.0])
    assert tf.num.tolist() == [1.0, 2.0]
    assert tf.order == 0
    with pytest.raises(ValueError):
        tf.num[0] = 3.0


def test_invalid_transfer_functions():
    with pytest.raises(InvalidParameterError):
        RationalTF([1.0], [0.0])
    with pytest.raises(InvalidParameterError):
        RationalTF([1.0], [1.0], delay=-1e-3)
    with pytest.raises(InvalidParameterError):
        RationalTF([np.nan], [1.0])


def test_integrator_response():
    w = np.array([0.5, 1.0, 10.0])
    h = freq_response(RationalTF([1.0], [0.0, 1.0]), w)
    np.testing.assert_allclose(h, 1.0 / (1j * w), rtol=1e-15)


def test_delay_is_exact_in_frequency_response():
    tf = RationalTF([1.0], [1.0], delay=1e-3)
    h = freq_response(tf, [100.0])[0]
    assert abs(h - np.exp(-0.1j)) < 1e-15


def test_pole_on_grid():
    with pytest.raises(PoleOnGridError) as info:
        freq_response(RationalTF([1.0], [1.0, 0.0, 1.0]), [0.5, 1.0])
    assert info.value.omega == 1.0


@pytest.mark.parametrize("bad", [[], [1.0, 1.0], [2.0, 1.0], [-1.0, 2.0], [0.0, 1.0]])
def test_grid_validation(bad):
    with pytest.raises(InvalidParameterError):
        as_grid(bad)


def test_mode_pair_coefficients():
    m = ModePair(10.0, 0.1, 5.0, 0.05)
    assert m.d2 == pytest.approx(0.01)
    assert m.d1 == pytest.approx(0.02)
    assert m.n2 == pytest.approx(0.04)
    assert m.n1 == pytest.approx(0.02)
    tf = tf_from_mode_pair(m)
    assert tf.dc_gain == 1.0
    assert abs(evaluate(tf, 0.0)) == 1.0


def test_pade_first_order_textbook():
    tf = pade_delay(1.0, 1)
    np.testing.assert_allclose(tf.num, [1.0, -0.5])
    np.testing.assert_allclose(tf.den, [1.0, 0.5])


def test_pade_second_order_phase():
    h = freq_response(pade_delay(1e-3, 2), [100.0])[0]
    assert abs(np.angle(h) + 0.1) < 1e-6


@given(st.floats(1e-6, 1e-2), st.sampled_from([1, 2, 3]), st.floats(1e-2, 1e5))
def test_pade_is_allpass(tau, order, w):
    assert abs(abs(freq_response(pade_delay(tau, order), [w])[0]) - 1.0) < 1e-12


def test_pade_order_range():
    with pytest.raises(InvalidParameterError):
        pade_delay(1e-3, 4)


def test_feedback_identity_and_delay_guard():
    g = RationalTF([1.0], [1.0, 1.0])
    c = RationalTF.constant(2.0)
    cl = feedback(g, c)
    w = np.logspace(-2, 2, 30)
    gr = freq_response(g, w)
    np.testing.assert_allclose(freq_response(cl, w), gr / (1 + 2 * gr), rtol=1e-13)
    with pytest.raises(UnsupportedDelayError):
        feedback(RationalTF([1.0], [1.0, 1.0], 1e-3), c)
    # a zero controller leaves the delayed plant untouched
    assert feedback(RationalTF([1.0], [1.0, 1.0], 1e-3), RationalTF.constant(0.0)).delay == 1e-3


def test_rationalize_keeps_delay_free_tf():
    g = RationalTF([1.0], [1.0, 1.0])
    assert rationalize(g) is g
    r = rationalize(RationalTF([1.0], [1.0, 1.0], 1e-3))
    assert r.delay == 0 and r.order == 3


@settings(max_examples=60)
@given(st.lists(st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False), min_size=1, max_size=6))
def test_poly_roots_recovers_roots(roots):
    # conjugate-closed set -> real coefficients; repeated roots are ill-conditioned
    full = np.array(roots + [np.conj(r) for r in roots])
    gaps = np.abs(full[:, None] - full[None, :]) + np.eye(full.size) * 1e9
    assume(gaps.min() > 0.1 * max(1.0, np.abs(full).max()) or full.size == 2 and full[0] == full[1])
    if full.size == 2 and full[0] == full[1]:
        return
    c = np.poly(full)[::-1].real
    found = poly_roots(c)
    assert found.size == full.size
    for r in full:
        assert np.min(np.abs(found - r)) <= 1e-5 * max(1.0, abs(r))


def test_poly_roots_scaled_resonant_denominator():
    # coefficients spanning many decades, as in the plant chains
    m = ModePair(2 * np.pi * 905, 0.015)
    den = series(tf_from_mode_pair(m), tf_from_mode_pair(ModePair(2 * np.pi * 179, 0.02))).den
    r = poly_roots(den)
    assert np.all(r.real < 0)
    np.testing.assert_allclose(sorted(np.abs(r)), sorted([2 * np.pi * 179] * 2 + [2 * np.pi * 905] * 2), rtol=1e-9)


def test_is_stable():
    assert is_stable(RationalTF([1.0], [1.0, 1.0]))[0]
    assert not is_stable(RationalTF([1.0], [-1.0, 1.0]))[0]
    assert not is_stable(RationalTF([1.0], [1.0, 0.0, 1.0]))[0]  # imaginary-axis poles
    with pytest.raises(UnsupportedDelayError):
        is_stable(RationalTF([1.0], [1.0, 1.0], 1e-3))


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=4), st.lists(st.floats(0.1, 10), min_size=1, max_size=3))
def test_series_multiplies_responses(num, den_extra):
    a = RationalTF(num if any(num) else [1.0], [1.0] + den_extra)
    b = RationalTF([1.0, 0.5], [2.0, 1.0])
    w = np.array([0.3, 3.0, 30.0])
    np.testing.assert_allclose(
        freq_response(series(a, b), w), freq_response(a, w) * freq_response(b, w), rtol=1e-9, atol=1e-300
    )


def test_dict_round_trip():
    tf = RationalTF([1.0, 2.0], [3.0, 4.0, 5.0], 1e-4)
    back = RationalTF.from_dict(tf.to_dict())
    assert back.num.tolist() == tf.num.tolist() and back.den.tolist() == tf.den.tolist() and back.delay == tf.delay
