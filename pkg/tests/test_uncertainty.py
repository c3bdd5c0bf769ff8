import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from nanomu.lti import freq_response
from nanomu.plant_family import extract_mode_stats, nanopositioner_family
from nanomu.synthesis import analysis_grid
from nanomu.uncertainty import (
    ModePairStats,
    UncertainCoefficient,
    UncertainPlant,
    UncertaintyError,
    assemble_uncertain_plant,
    build_structured,
    envelope,
    envelope_over_set,
    fit_unstructured_weight,
    lft_mode_response,
    lft_mode_tf,
    perturbed_mode_tf,
    relative_error,
    relative_radii,
    sample_uncertain,
    structured_weights,
    vertex_and_random_deltas,
)


@pytest.fixture(scope="module")
def family():
    return nanopositioner_family()


@pytest.fixture(scope="module")
def grid():
    return 2 * np.pi * np.logspace(1, np.log10(3000), 300)


@pytest.fixture(scope="module")
def stats(family):
    return extract_mode_stats(family)


def test_relative_radii_examples():
    single = relative_radii([1.0e-6])
    assert single.mean == 1.0e-6 and single.radius == 0
    three = relative_radii([0.8e-6, 1.0e-6, 1.2e-6])
    assert three.mean == pytest.approx(1.0e-6, rel=1e-14)
    assert three.radius == pytest.approx(0.2, rel=1e-12)
    assert relative_radii([3.0, 3.0, 3.0]).radius == 0


@pytest.mark.parametrize("bad", [[], [1.0, -1.0], [0.0], [1.0, 1.0, 1.0, 100.0]])
def test_relative_radii_errors(bad):
    with pytest.raises(UncertaintyError):
        relative_radii(bad)


@given(st.lists(st.floats(0.1, 10.0), min_size=1, max_size=8), st.floats(1e-3, 1e3), st.randoms())
def test_relative_radii_scale_and_permutation(samples, k, rnd):
    assume(max(samples) - min(samples) < 1.9 * np.mean(samples))
    base = relative_radii(samples)
    shuffled = list(samples)
    rnd.shuffle(shuffled)
    assert relative_radii(shuffled).radius == pytest.approx(base.radius, rel=1e-12, abs=1e-15)
    scaled = relative_radii([k * x for x in samples])
    assert scaled.mean == pytest.approx(k * base.mean, rel=1e-12)
    assert scaled.radius == pytest.approx(base.radius, rel=1e-9, abs=1e-15)


def test_mode1_d2_radius(stats):
    # arithmetic mean over the eleven payloads, not the endpoint midpoint
    d2 = [1 / m.modes[0].pole_freq ** 2 for m in nanopositioner_family()]
    assert stats[0].d2.radius == pytest.approx((max(d2) - min(d2)) / (2 * np.mean(d2)), rel=1e-12)
    assert 0.13 < stats[0].d2.radius < 0.16


def _two_mode_stats():
    return ModePairStats(
        d2=UncertainCoefficient(1e-6, 0.1),
        d1=UncertainCoefficient(4e-5, 0.2),
        n2=UncertainCoefficient(1.3e-6, 0.05),
        n1=UncertainCoefficient(3e-5, 0.3),
    )


@settings(max_examples=50)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_lft_equals_direct_substitution(d):
    s = _two_mode_stats()
    delta = dict(zip(("n1", "n2", "d1", "d2"), d))
    w = np.logspace(1, 5, 60)
    direct = freq_response(perturbed_mode_tf(s, delta), w)
    lft = lft_mode_response(s, structured_weights(s), delta, w)
    np.testing.assert_allclose(lft, direct, rtol=1e-9)
    tf = lft_mode_tf(s, structured_weights(s), delta)
    np.testing.assert_allclose(freq_response(tf, w), direct, rtol=1e-9)


def test_zero_radius_channels_are_dropped():
    s = ModePairStats(d2=UncertainCoefficient(1e-6, 0.0), d1=UncertainCoefficient(1e-5, 0.0))
    assert structured_weights(s).is_empty


def test_delta_out_of_range():
    with pytest.raises(UncertaintyError):
        perturbed_mode_tf(_two_mode_stats(), {"d2": 1.5})


def test_weight_frequency_rescaling():
    # scaling the time constants by k maps W(jw) to W(jw/k): s^2 coefficients by k^2, s by k
    s = _two_mode_stats()
    k = 3.0
    s2 = ModePairStats(
        d2=UncertainCoefficient(s.d2.mean * k**2, s.d2.radius),
        d1=UncertainCoefficient(s.d1.mean * k, s.d1.radius),
        n2=UncertainCoefficient(s.n2.mean * k**2, s.n2.radius),
        n1=UncertainCoefficient(s.n1.mean * k, s.n1.radius),
    )
    w = np.logspace(1, 5, 40)
    for a, b in zip(structured_weights(s).w_i2, structured_weights(s2).w_i2):
        np.testing.assert_allclose(freq_response(b, w / k), freq_response(a, w), rtol=1e-12)


def test_relative_error_examples():
    np.testing.assert_allclose(relative_error([2.0], [1.0]), [1.0])
    np.testing.assert_allclose(relative_error([1j], [1.0]), [np.sqrt(2)])
    np.testing.assert_array_equal(relative_error([1.0 + 1j], [1.0 + 1j]), [0.0])
    with pytest.raises(ValueError):
        relative_error([1.0, 2.0], [1.0])
    with pytest.raises(ZeroDivisionError):
        relative_error([1.0], [0.0])


def test_envelope_over_set():
    np.testing.assert_array_equal(envelope_over_set([[1, 3], [2, 1]]), [2, 3])
    with pytest.raises(ValueError):
        envelope_over_set([])


@pytest.mark.parametrize("order", [0, 2, 4, 6])
def test_fitted_weight_covers_target(grid, order):
    target = 0.05 + 0.5 * np.exp(-((np.log(grid / (2 * np.pi * 200))) ** 2) / 0.02)
    wu = fit_unstructured_weight(target, grid, order=order)
    mag = np.abs(wu.response(grid))
    assert np.all(mag >= target * 1.05 * (1 - 1e-12))
    poles = np.roots(wu.weight.den[::-1])
    zeros = np.roots(wu.weight.num[::-1]) if wu.weight.num.size > 1 else np.array([])
    assert np.all(poles.real < 0) and np.all(zeros.real < 0)
    assert wu.weight.order == order


def test_fitted_weight_floor(grid):
    wu = fit_unstructured_weight(np.zeros_like(grid), grid, order=4)
    assert np.all(np.abs(wu.response(grid)) >= wu.floor * (1 - 1e-12))


def test_fit_rejects_odd_order(grid):
    with pytest.raises(ValueError):
        fit_unstructured_weight(np.ones_like(grid), grid, order=3)


def _assemble(family, stats, grid, variant):
    fam_resp = [s.response(grid) for s in family]
    return assemble_uncertain_plant(
        stats, family[0].actuator, family[0].delay, variant, measured_set=fam_resp, grid=grid, order=4
    )


def test_variant_channels(stats, family):
    a, d = family[0].actuator, family[0].delay
    assert build_structured(stats, a, d, "M01").n_real == 0
    m11 = build_structured(stats, a, d, "M11")
    assert m11.channel_labels == ["delta_d1_1", "delta_d2_1"]
    m31 = build_structured(stats, a, d, "M31")
    assert {c.block for c in m31.channels} == {"i1", "i3", "i4", "m3", "m4"}
    assert m31.n_real == 10
    with pytest.raises(UncertaintyError):
        build_structured(stats, a, d, "M99")
    with pytest.raises(UncertaintyError):
        build_structured(stats, a, d, "custom", blocks=["i7"])


def test_nominal_consistency(stats, family, grid):
    plant = build_structured(stats, family[0].actuator, family[0].delay, "M31")
    chain = np.prod([freq_response(s.nominal_tf(), grid) for s in stats], axis=0)
    chain = chain * freq_response(family[0].actuator, grid) * np.exp(-1j * grid * family[0].delay)
    np.testing.assert_allclose(plant.components(grid).nominal, chain, rtol=1e-12)
    np.testing.assert_allclose(freq_response(plant.nominal_tf(), grid), chain, rtol=1e-9)


def test_single_member_family_has_floor_weight(grid):
    fam = nanopositioner_family([0.0])
    st1 = extract_mode_stats(fam)
    plant = _assemble(fam, st1, grid, "M31")
    assert plant.n_real == 0
    assert np.max(np.abs(plant.unstructured.response(grid))) < 1e-3
    lo, hi = envelope(plant, grid, n_random=0)
    assert np.all(hi - lo < 0.02)


@pytest.mark.parametrize("variant", ["M01", "M11", "M31"])
def test_family_contained_in_envelope(family, stats, grid, variant):
    plant = _assemble(family, stats, grid, variant)
    lo, hi = envelope(plant, grid, n_random=256)
    for s in family:
        db = 20 * np.log10(np.abs(s.response(grid)))
        assert np.all(db <= hi + 1e-9) and np.all(db >= lo - 1e-9)


def test_envelope_extremes_of_unit_disk(stats, family, grid):
    plant = _assemble(family, stats, grid, "M01")
    comp = plant.components(grid)
    lo, hi = envelope(plant, grid, n_random=0)
    a = np.abs(comp.wu)
    np.testing.assert_allclose(hi, 20 * np.log10(np.abs(comp.nominal) * (1 + a)), rtol=1e-12)
    # any unit-disk sample lies inside
    rng = np.random.default_rng(0)
    for _ in range(20):
        du = np.sqrt(rng.uniform()) * np.exp(2j * np.pi * rng.uniform(size=grid.size))
        db = 20 * np.log10(np.abs(sample_uncertain(plant, [], du, grid, comp)))
        assert np.all(db <= hi + 1e-9) and np.all(db >= lo - 1e-9)


def test_conservatism_ordering(family, stats):
    # the pipeline grid: log-spaced plus dense bands around each mode
    grid = analysis_grid([m.nominal_mode().pole_freq for m in stats])
    widths = {}
    for v in ("M01", "M11", "M31"):
        plant = assemble_uncertain_plant(
            stats, family[0].actuator, family[0].delay, v, measured_set=[s.response(grid) for s in family], grid=grid
        )
        lo, hi = envelope(plant, grid, n_random=256)
        widths[v] = np.mean(hi - lo)
    assert widths["M01"] > widths["M11"] > widths["M31"]


def test_plant_round_trip(family, stats, grid):
    plant = _assemble(family, stats, grid, "M11")
    back = UncertainPlant.from_dict(plant.to_dict())
    assert back.channel_labels == plant.channel_labels
    np.testing.assert_allclose(back.components(grid).wu, plant.components(grid).wu, rtol=1e-14)
    np.testing.assert_allclose(back.components(grid).nominal, plant.components(grid).nominal, rtol=1e-14)


def test_sample_unstructured_scaling_and_vertices(family, stats, grid):
    plant = _assemble(family, stats, grid, "M11")
    comp = plant.components(grid)
    np.testing.assert_allclose(sample_uncertain(plant, [0.0, 0.0], 0.0, grid, comp), comp.nominal, rtol=1e-14)
    scaled = sample_uncertain(plant, [0.0, 0.0], 1.0, grid, comp)
    np.testing.assert_allclose(np.abs(scaled), np.abs(comp.nominal) * np.abs(1 + comp.wu), rtol=1e-12)
    # a vertex against direct substitution in mode 1
    vertex = sample_uncertain(plant, [1.0, -1.0], 0.0, grid, comp)
    direct = freq_response(perturbed_mode_tf(stats[0], {"d1": 1.0, "d2": -1.0}), grid)
    rest = comp.nominal / freq_response(stats[0].nominal_tf(), grid)
    np.testing.assert_allclose(vertex, direct * rest, rtol=1e-10)


def test_single_channel_vertices_attain_extremes(stats, family):
    plant = build_structured(stats, family[0].actuator, family[0].delay, "custom", blocks=["i1"])
    w = 2 * np.pi * np.array([20.0, 60.0, 400.0, 2000.0])  # away from the resonance, |g| is monotone in delta
    comp = plant.components(w)
    dense = np.linspace(-1, 1, 201)
    fine = np.abs(comp.structured(np.column_stack([dense, np.zeros_like(dense)])))
    verts = np.abs(comp.structured(np.array([[-1.0, 0.0], [1.0, 0.0]])))
    np.testing.assert_allclose(verts.max(0), fine.max(0), rtol=1e-12)
    np.testing.assert_allclose(verts.min(0), fine.min(0), rtol=1e-12)


def test_sample_rejects_large_unstructured(family, stats, grid):
    plant = build_structured(stats, family[0].actuator, family[0].delay, "M11")
    with pytest.raises(UncertaintyError):
        sample_uncertain(plant, [0.0, 0.0], 1.5, grid)


def test_vertex_sampling():
    d = vertex_and_random_deltas(3, 5, seed=1)
    assert d.shape == (1 + 8 + 5, 3)
    assert np.all(np.abs(d) <= 1)
    np.testing.assert_array_equal(d, vertex_and_random_deltas(3, 5, seed=1))
    assert vertex_and_random_deltas(0, 5).shape == (1, 0)

