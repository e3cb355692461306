import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaprism import BandPlan, MtpGeometry
from metaprism.ideal import (
    AngleFrequencyMap,
    MultipathSpec,
    OutOfBandError,
    QuadratureError,
    bandwidth,
    diffuse_fraction,
    effective_rician_factor,
    first_null,
    frequency_response_at_beam,
    gain_pattern,
    ideal_linear_coefficients,
    ideal_phase,
    ideal_reactance,
    multipath_channel_draw,
    reflection_coefficient,
    reflection_phase,
    user_count,
    wrap_phase,
)
from metaprism.scenario import SPEED_OF_LIGHT


def direct_response(geom, fmap, delta_f, phi):
    """Normalised beam response by explicit summation over every element."""
    lam0 = SPEED_OF_LIGHT / fmap.f0
    proj = geom.nu_index * geom.delta_nu * math.cos(phi) + geom.zeta_index * geom.delta_zeta * math.sin(phi)
    ph = -2j * np.pi * fmap.alpha * np.outer(np.atleast_1d(delta_f), proj) / lam0
    return np.exp(ph).sum(axis=1) / geom.N


def test_mapping_endpoints(fmap):
    t0 = time.perf_counter()
    lo, hi = fmap.angle(fmap.f0 - fmap.bandwidth / 2), fmap.angle(fmap.f0 + fmap.bandwidth / 2)
    assert time.perf_counter() - t0 < 1e-3
    assert abs(lo - math.pi / 6) < 1e-12 and abs(hi - math.pi / 3) < 1e-12


def test_mapping_inverse_and_out_of_band(fmap):
    f = np.linspace(fmap.f0 - 5e7, fmap.f0 + 5e7, 11)
    assert np.allclose(fmap.frequency(fmap.angle(f)), f, rtol=0, atol=1e-3)
    with pytest.raises(OutOfBandError):
        fmap.angle(fmap.f0 + 10 * fmap.bandwidth)


def test_ideal_phase_is_affine_and_matches_coefficients(table1, fmap):
    g = table1.geometry
    f = np.linspace(3.55e9, 3.65e9, 7)
    psi = ideal_phase(g, fmap, table1.theta_inc, 0.0, f)
    slope, offset = ideal_linear_coefficients(g, fmap, table1.theta_inc, 0.0)
    assert np.allclose(psi, slope * (f[:, None] - fmap.f0) + offset, atol=1e-9)
    # element at the origin of the index grid carries no phase
    assert np.allclose(psi[:, 0], 0)
    # nu_n = 7.5 lambda0 element along the mapped angular span
    n = 16
    assert slope[n - 1] * fmap.bandwidth == pytest.approx(
        -2 * np.pi * 7.5 * (math.sin(math.pi / 3) - math.sin(math.pi / 6)))


def test_reactance_and_reflection_are_inverse():
    psi = np.linspace(-3.0, 3.0, 61)
    X = ideal_reactance(psi)
    assert np.allclose(np.abs(reflection_coefficient(X)), 1)
    assert np.allclose(wrap_phase(reflection_phase(X) - psi), 0, atol=1e-12)


def _peaks(table1, fmap, exact_lambda):
    g = table1.geometry
    thetas = np.linspace(-np.pi / 2, np.pi / 2, 1001)
    fk = BandPlan(table1.band.f0, table1.band.bandwidth, 17).frequencies
    psi = ideal_phase(g, fmap, table1.theta_inc, 0.0, fk, exact_lambda=exact_lambda)
    h = gain_pattern(g, np.exp(1j * psi), table1.theta_inc, thetas, 0.0, fk)
    return thetas[np.argmax(np.abs(h) ** 2, axis=1)], fmap.angle(fk), thetas[1] - thetas[0]


def test_beam_placement_on_uniform_frequencies(table1, fmap):
    t0 = time.perf_counter()
    peaks, mapped, step = _peaks(table1, fmap, exact_lambda=True)
    assert time.perf_counter() - t0 < 1.0
    assert np.all(np.abs(peaks - mapped) <= step)


def test_carrier_wavelength_design_squints_slightly(table1, fmap):
    # the affine (carrier-wavelength) phase steers sin(theta) scaled by f0 / f
    peaks, mapped, step = _peaks(table1, fmap, exact_lambda=False)
    fk = BandPlan(table1.band.f0, table1.band.bandwidth, 17).frequencies
    expected = np.arcsin(np.sin(mapped) * fmap.f0 / fk)
    assert np.all(np.abs(peaks - expected) <= step)
    assert np.max(np.abs(peaks - mapped)) < math.radians(1.5)


def test_bandwidth_value_and_approximation(table1, fmap):
    bw = bandwidth(fmap, table1.geometry)
    assert bw.exact == pytest.approx(12e6, rel=0.10)
    assert bw.relative_gap < 0.15
    # defining property: the squared response drops to (1 - omega)^2 at the edge
    edge = frequency_response_at_beam(table1.geometry, fmap, bw.exact / 2)
    assert edge ** 2 == pytest.approx(0.95 ** 2, abs=1e-6)
    assert user_count(fmap, table1.geometry) == 9


def test_bandwidth_from_full_pattern(table1, fmap):
    """Beam at f_k observed at theta_k while frequency moves: independent of the closed form."""
    g = table1.geometry
    fk = fmap.f0
    theta_k = fmap.angle(fk)
    df = np.linspace(0, 2e7, 4001)
    f = fk + df
    psi = ideal_phase(g, fmap, table1.theta_inc, 0.0, f)
    lam0 = SPEED_OF_LIGHT / fmap.f0
    # frozen-lambda steering, matching the frozen-lambda phase design
    steer = np.exp(2j * np.pi * g.nu_index * g.delta_nu * math.sin(theta_k) / lam0)
    h = np.abs(np.exp(1j * psi) @ steer) / g.N
    edge = df[np.argmax(h < 0.95)]
    assert 2 * edge == pytest.approx(bandwidth(fmap, g).exact, abs=2 * (df[1] - df[0]))


@pytest.mark.parametrize("phi", [0.0, 0.3, math.pi / 2])
def test_closed_form_matches_direct_summation(table1, fmap, phi):
    g = table1.geometry
    df = np.linspace(-4e7, 4e7, 100)
    closed = frequency_response_at_beam(g, fmap, df, phi)
    direct = direct_response(g, fmap, df, phi)
    assert np.max(np.abs(np.abs(closed) - np.abs(direct)) / np.abs(direct).clip(1e-3)) < 1e-9


def test_first_null_is_a_zero(table1, fmap):
    d = first_null(table1.geometry, fmap)
    assert abs(direct_response(table1.geometry, fmap, d, 0.0)[0]) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 24), st.floats(0.3, 0.9), st.floats(0.01, 0.2))
def test_bandwidth_shrinks_with_aperture(I, dnu_wl, omega):
    band = BandPlan(3.6e9, 1e8)
    fmap = AngleFrequencyMap.from_band(band, math.pi / 6, math.pi / 3)
    lam0 = band.wavelength0
    small = MtpGeometry(I, 2, dnu_wl * lam0, 0.75 * lam0)
    big = MtpGeometry(2 * I, 2, dnu_wl * lam0, 0.75 * lam0)
    assert bandwidth(fmap, big, omega).exact < bandwidth(fmap, small, omega).exact


@settings(max_examples=40, deadline=None)
@given(st.floats(-50.0, 50.0))
def test_wrap_phase_range(x):
    w = wrap_phase(x)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(x), abs_tol=1e-9)


# multipath


def test_effective_rician_factor_isotropic(table1, fmap):
    spec = MultipathSpec.isotropic(kappa_R=3.0)
    ratio = effective_rician_factor(spec, table1.geometry, fmap, fmap.f0) / 3.0
    assert ratio > 10


def test_effective_rician_factor_concentrated(table1, fmap):
    theta_k = fmap.angle(fmap.f0)
    spec = MultipathSpec.von_mises(2.0, theta_k, 1e4)
    ratio = effective_rician_factor(spec, table1.geometry, fmap, fmap.f0) / 2.0
    assert 1.0 <= ratio <= 1.1


def test_diffuse_fraction_never_exceeds_one(table1, fmap):
    for center in (-1.0, 0.0, fmap.angle(fmap.f0), 1.2):
        spec = MultipathSpec.von_mises(1.0, center, 50.0)
        assert diffuse_fraction(spec, table1.geometry, fmap, fmap.f0) <= 1 + 1e-9


def test_monte_carlo_matches_quadrature(table1, fmap):
    spec = MultipathSpec.isotropic(kappa_R=0.0, n_grid=4001)
    draws = multipath_channel_draw(spec, table1.geometry, fmap, fmap.f0, seed=7, size=10_000)
    f = fmap.f0
    hm = multipath_channel_draw(MultipathSpec.isotropic(math.inf, 4001), table1.geometry, fmap, f)
    mc = np.mean(np.abs(draws) ** 2) / abs(hm) ** 2
    quad = diffuse_fraction(spec, table1.geometry, fmap, f)
    assert mc == pytest.approx(quad, rel=0.05)


def test_monte_carlo_is_seeded(table1, fmap):
    spec = MultipathSpec.isotropic(1.0, n_grid=401)
    a = multipath_channel_draw(spec, table1.geometry, fmap, fmap.f0, seed=3, size=5)
    b = multipath_channel_draw(spec, table1.geometry, fmap, fmap.f0, seed=3, size=5)
    assert np.array_equal(a, b)


def test_multipath_spec_validation():
    with pytest.raises(ValueError):
        MultipathSpec(1.0, lambda t: np.ones_like(t))
    with pytest.raises(ValueError):
        MultipathSpec.isotropic(-1.0)


def test_coarse_quadrature_is_reported(table1, fmap):
    spec = MultipathSpec.isotropic(1.0, n_grid=21)
    with pytest.raises(QuadratureError):
        diffuse_fraction(spec, table1.geometry, fmap, fmap.f0)
