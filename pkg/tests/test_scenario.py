import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaprism import BandPlan, Direction, MtpGeometry, ScenarioError, load_scenario
from metaprism.scenario import SPEED_OF_LIGHT, array_response, steering_matrix, wavenumber


def test_defaults_reproduce_reference_setup(table1):
    lam0 = SPEED_OF_LIGHT / 3.6e9
    g = table1.geometry
    assert (g.I, g.J, g.N) == (16, 4, 64)
    assert g.delta_nu == pytest.approx(lam0 / 2)
    assert g.delta_zeta == pytest.approx(0.75 * lam0)
    assert table1.D_b == 10 and table1.D_u == 20
    assert table1.N0 == pytest.approx(10 ** (-16.537) * 1e-3)
    assert table1.P_t == pytest.approx(1e-3)
    assert (table1.n_alpha, table1.n_gamma, table1.max_iter) == (300, 100, 50)


def test_constant_aperture_doubles_columns_at_quarter_wavelength():
    sc = load_scenario(overrides={"geometry": {"delta_nu_wl": 0.25}})
    assert sc.geometry.I == 32 and sc.geometry.N == 128


def test_element_indexing_is_column_major_in_nu():
    g = MtpGeometry(I=4, J=3, delta_nu=1.0, delta_zeta=2.0)
    assert list(g.nu_index[:6]) == [0, 1, 2, 3, 0, 1]
    assert list(g.zeta_index[:6]) == [0, 0, 0, 0, 1, 1]
    assert g.positions.shape == (12, 3)
    # centred on the origin, normal axis empty
    assert np.allclose(g.positions.mean(axis=0), 0)
    assert np.all(g.positions[:, g.normal_axis] == 0)


@pytest.mark.parametrize("overrides", [
    {"mapping": {"theta_min": 1.0, "theta_max": 0.5}},
    {"mapping": {"theta_min": 0.5, "theta_max": 0.5}},
    {"band": {"bandwidth": -1.0}},
    {"geometry": {"J": 0}},
    {"links": {"D_u": 0.0}},
    {"nonsense": {"a": 1}},
])
def test_invalid_scenarios_rejected(overrides):
    with pytest.raises(ScenarioError):
        load_scenario(overrides=overrides)


def test_wideband_warning():
    with pytest.warns(UserWarning):
        BandPlan(f0=1e9, bandwidth=2e8)


def test_toml_round_trip(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text('[band]\nf0 = 2.4e9\n[geometry]\ndelta_nu_wl = 0.25\nJ = 2\n')
    sc = load_scenario(p)
    assert sc.band.f0 == 2.4e9 and sc.geometry.J == 2 and sc.geometry.I == 32
    assert sc.digest() == load_scenario(p).digest()
    assert sc.digest() != load_scenario().digest()


def test_wavenumber_rejects_bad_frequency():
    with pytest.raises(ValueError):
        wavenumber(Direction(0.1), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(0, 6.28), st.floats(1e9, 1e10))
def test_array_response_unit_modulus_and_steering_consistency(theta, phi, f):
    g = MtpGeometry(I=5, J=2, delta_nu=0.04, delta_zeta=0.06)
    a = array_response(g, Direction(theta, phi), f)
    assert np.allclose(np.abs(a), 1)
    assert np.allclose(steering_matrix(g, np.array([theta]), phi, f)[0], a)
