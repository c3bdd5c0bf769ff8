import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanomu.lti import RationalTF, freq_response
from nanomu.mu import (
    Block,
    BlockStructure,
    MuError,
    NominalInstabilityError,
    interconnection,
    mu_lower_sampling,
    mu_upper_complex,
    mu_upper_mixed,
    mu_upper_mixed_batch,
    robust_performance_profile,
    rp_structure,
)
from nanomu.plant_family import extract_mode_stats, nanopositioner_family
from nanomu.uncertainty import assemble_uncertain_plant, sample_uncertain


def _random_case(rng, n_blocks):
    kinds = rng.choice(["real", "complex"], size=n_blocks)
    s = BlockStructure.of(*kinds)
    m = rng.normal(size=(n_blocks, n_blocks)) + 1j * rng.normal(size=(n_blocks, n_blocks))
    return m, s


def test_scalar_examples():
    assert mu_upper_complex(np.array([[3 + 4j]]), BlockStructure.of("complex")) == pytest.approx(5.0, abs=1e-10)
    assert mu_upper_mixed(np.array([[3 + 4j]]), BlockStructure.of("complex")) == pytest.approx(5.0, abs=1e-10)
    assert mu_upper_mixed(np.array([[-2.0 + 0j]]), BlockStructure.of("real")) == pytest.approx(2.0, abs=1e-10)
    assert mu_lower_sampling(np.array([[-2.0 + 0j]]), BlockStructure.of("real"), n=10) == pytest.approx(2.0, abs=1e-10)


def test_real_scalar_with_imaginary_gain_is_zero():
    # 1 - 2j * delta never vanishes for real delta
    assert mu_upper_mixed(np.array([[2j]]), BlockStructure.of("real")) < 1e-3
    assert mu_lower_sampling(np.array([[2j]]), BlockStructure.of("real"), n=10) == 0.0


def test_off_diagonal_example():
    m = np.array([[0, 2], [0.5, 0]], dtype=complex)
    s = BlockStructure.of("complex", "complex")
    assert mu_upper_complex(m, s) == pytest.approx(1.0, abs=1e-8)
    assert mu_lower_sampling(m, s, n=20) == pytest.approx(1.0, abs=1e-6)
    # a single full block gives the largest singular value
    full = BlockStructure((Block("full", 2, 2),))
    assert mu_upper_complex(m, full) == pytest.approx(2.0, abs=1e-8)


def test_zero_matrix_and_all_complex_agreement():
    s = BlockStructure.of("complex", "complex")
    assert mu_upper_complex(np.zeros((2, 2), complex), s) == pytest.approx(0.0, abs=1e-12)
    assert mu_lower_sampling(np.zeros((2, 2), complex), s, n=5) == 0.0
    rng = np.random.default_rng(11)
    m = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    s3 = BlockStructure.of("complex", "complex", "complex")
    assert mu_upper_mixed(m, s3) == pytest.approx(mu_upper_complex(m, s3), rel=1e-6)


def test_mixed_two_by_two_against_brute_force():
    # real delta1 on a fine grid, complex delta2 = exp(j phi): smallest destabilizing scale
    rng = np.random.default_rng(2)
    s = BlockStructure.of("real", "complex")
    for _ in range(3):
        m = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        d1 = np.linspace(-1, 1, 401)
        phi = np.linspace(0, 2 * np.pi, 250, endpoint=False)
        D1, P = np.meshgrid(d1, np.exp(1j * phi))
        # det(I - k M diag(d1, p)) = 0 is quadratic in k; mu >= 1 / min |k| over real-admissible roots
        a = D1 * P * (m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])
        b = -(m[0, 0] * D1 + m[1, 1] * P)
        best = 0.0
        for aa, bb in zip(a.ravel(), b.ravel()):
            for k in np.roots([aa, bb, 1.0]):
                if abs(k.imag) < 1e-2 * abs(k) and k.real > 0:
                    best = max(best, 1.0 / k.real)
        assert mu_upper_mixed(m, s) >= best * (1 - 1e-2)


def test_lower_bound_off_diagonal_dense():
    m = np.array([[0, 2], [0.5, 0]], dtype=complex)
    assert mu_lower_sampling(m, BlockStructure.of("complex", "complex"), n=200) >= 0.99


def test_structure_validation():
    with pytest.raises(MuError):
        Block("real", 2, 2)
    with pytest.raises(MuError):
        Block("weird")
    with pytest.raises(MuError):
        BlockStructure(())
    with pytest.raises(MuError):
        mu_upper_mixed(np.eye(3, dtype=complex), BlockStructure.of("real", "complex"))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.floats(0.1, 10.0))
def test_scaling_homogeneity(seed, n, alpha):
    m, s = _random_case(np.random.default_rng(seed), n)
    a = mu_upper_mixed(m, s)
    b = mu_upper_mixed(alpha * m, s)
    assert b == pytest.approx(alpha * a, rel=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_diagonal_scaling_invariance(seed, n):
    rng = np.random.default_rng(seed)
    m, _ = _random_case(rng, n)
    s = BlockStructure.of(*["complex"] * n)
    d = np.diag(np.exp(rng.normal(size=n)))
    scaled = d @ m @ np.linalg.inv(d)
    assert mu_upper_complex(scaled, s) == pytest.approx(mu_upper_complex(m, s), rel=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_bound_ordering(seed, n):
    m, s = _random_case(np.random.default_rng(seed), n)
    up = mu_upper_mixed(m, s)
    assert up <= mu_upper_complex(m, s) * (1 + 1e-9) + 1e-12
    assert up >= mu_lower_sampling(m, s, n=10, seed=seed) - 1e-9
    assert up <= np.linalg.norm(m, 2) * (1 + 1e-9)


def test_batch_matches_single():
    rng = np.random.default_rng(5)
    s = BlockStructure.of("real", "complex", "complex")
    stack = rng.normal(size=(4, 3, 3)) + 1j * rng.normal(size=(4, 3, 3))
    batch = mu_upper_mixed_batch(stack, s).value
    single = [mu_upper_mixed(mk, s) for mk in stack]
    np.testing.assert_allclose(batch, single, rtol=1e-6)


# --------------------------------------------------------------------------
# interconnection


@pytest.fixture(scope="module")
def plant_m11():
    fam = nanopositioner_family()
    stats = extract_mode_stats(fam)
    grid = 2 * np.pi * np.logspace(1, 3.5, 120)
    return assemble_uncertain_plant(
        stats, fam[0].actuator, fam[0].delay, "M11", [s.response(grid) for s in fam], grid, order=4
    )


def _upper_lft(m, delta):
    n = m.shape[-1] - 1
    mww, mwp, mpw, mpp = m[:n, :n], m[:n, n:], m[n:, :n], m[n:, n:]
    return (mpp + mpw @ delta @ np.linalg.solve(np.eye(n) - mww @ delta, mwp))[0, 0]


def test_interconnection_matches_closed_loop(plant_m11):
    w = 2 * np.pi * np.array([50.0, 170.0, 400.0, 2000.0])
    comp = plant_m11.components(w)
    c = freq_response(RationalTF([0.0, 30.0], [1e5, 300.0, 1.0]), w)
    wp = freq_response(RationalTF([2.0, 1e-3], [1.0, 1e-2]), w)
    m = interconnection(comp, c, wp)
    rng = np.random.default_rng(0)
    for _ in range(5):
        delta = rng.uniform(-1, 1, plant_m11.n_real)
        du = 0.9 * np.exp(2j * np.pi * rng.uniform())
        gp = sample_uncertain(plant_m11, delta, du, w, comp)
        expected = wp * gp / (1 + gp * c)
        for k in range(w.size):
            d = np.diag(np.concatenate([delta, [du]]).astype(complex))
            assert _upper_lft(m[k], d) == pytest.approx(expected[k], rel=1e-9)


def test_rp_structure(plant_m11):
    s = rp_structure(plant_m11)
    assert [b.kind for b in s.blocks] == ["real", "real", "complex", "complex"]
    assert s.blocks[-1].label == "performance"


def test_profile_rejects_unstable_nominal_loop(plant_m11):
    c = RationalTF.constant(-10.0)  # positive feedback on a positive-DC plant
    with pytest.raises(NominalInstabilityError):
        robust_performance_profile(plant_m11, c, RationalTF.constant(0.1), [100.0, 1000.0])


def test_larger_weight_raises_peak(plant_m11):
    w = 2 * np.pi * np.logspace(1.5, 3, 25)
    c = RationalTF([0.0, 30.0], [1e5, 300.0, 1.0])
    a = robust_performance_profile(plant_m11, c, RationalTF.constant(0.5), w)
    b = robust_performance_profile(plant_m11, c, RationalTF.constant(1.0), w)
    assert b.peak_upper >= a.peak_upper * (1 - 1e-6)


def test_m11_matrix_dimension(plant_m11):
    comp = plant_m11.components([1000.0])
    m = interconnection(comp, np.array([0.0]), np.array([1.0]))
    assert m.shape == (1, 4, 4)  # two real channels, Delta_u, performance


def test_zero_controller_profile(plant_m11):
    # with C = 0 the performance channel is |W G| and the bound is at least that
    w = 2 * np.pi * np.logspace(1, 3, 20)
    wp = RationalTF.constant(1e3)
    prof = robust_performance_profile(plant_m11, RationalTF.constant(0.0), wp, w, n_lower=5)
    nominal = np.abs(plant_m11.components(w).nominal) * 1e3
    assert np.all(prof.upper >= nominal * (1 - 1e-6))
    assert np.all(prof.upper >= prof.lower - 1e-9)
