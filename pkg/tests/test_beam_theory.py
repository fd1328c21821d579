import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.special import ellipe, ellipeinc, ellipk, ellipkinc

from mpmto.beam_theory import BeamSection, cantilever_tip, load_deflection_curve

BEAM = BeamSection(E=12e6, nu=0.2, length=10.0, depth=1.0)


def elliptic_tip(alpha):
    """Tip (u/L, v/L) of the inextensible elastica under a dead end load.

    ``alpha = P L^2 / EI``. With ``theta0`` the tip rotation, ``k^2 = (1 +
    sin theta0) / 2`` and ``sin phi1 = 1 / (k sqrt 2)``, the load fixes
    ``sqrt(alpha) = K(k) - F(phi1, k)``.
    """
    def parts(theta0):
        m = (1 + np.sin(theta0)) / 2
        phi1 = np.arcsin(1 / np.sqrt(2 * m))
        return m, phi1

    def gap(theta0):
        m, phi1 = parts(theta0)
        return ellipk(m) - ellipkinc(phi1, m) - np.sqrt(alpha)

    theta0 = brentq(gap, 1e-12, np.pi / 2 - 1e-12, xtol=1e-15)
    m, phi1 = parts(theta0)
    v = 1 - 2 / np.sqrt(alpha) * (ellipe(m) - ellipeinc(phi1, m))
    u = 1 - np.sqrt(2 * np.sin(theta0) / alpha)
    return u, v


def _P(alpha, sec=BEAM):
    return alpha * sec.EI / sec.length ** 2


@pytest.mark.parametrize("alpha", [0.25, 1.0, 3.0, 10.0])
def test_shooting_matches_elliptic_integrals(alpha):
    u, v = cantilever_tip(_P(alpha), BEAM, extensible=False)
    ue, ve = elliptic_tip(alpha)
    assert u / BEAM.length == pytest.approx(ue, abs=1e-7)
    assert v / BEAM.length == pytest.approx(ve, abs=1e-7)


def test_small_load_is_linear_beam_theory():
    alpha = 1e-4
    u, v = cantilever_tip(_P(alpha), BEAM, extensible=False)
    assert v / BEAM.length == pytest.approx(alpha / 3, rel=1e-4)
    assert u / BEAM.length == pytest.approx(0.0, abs=1e-8)


def test_section_properties():
    assert BEAM.EI == pytest.approx(12e6 / 12)
    assert BEAM.EA == pytest.approx(12e6)
    assert BEAM.GA == pytest.approx(5 / 6 * 12e6 / 2.4)


def test_validation_beam_full_load_reference():
    # frozen shooting result for the validation beam at 100 kN
    u, v = cantilever_tip(1e5, BEAM)
    assert v / BEAM.length == pytest.approx(0.8221, abs=5e-4)
    assert 0.55 < u / BEAM.length < 0.58
    ue, ve = elliptic_tip(10.0)
    # stretching and shear add deflection to the elastica
    assert v / BEAM.length > ve


def test_slender_extensible_beam_tends_to_elastica():
    thin = BeamSection(E=12e6, nu=0.2, length=10.0, depth=0.05)
    alpha = 3.0
    u, v = cantilever_tip(_P(alpha, thin), thin)
    ue, ve = elliptic_tip(alpha)
    assert v / thin.length == pytest.approx(ve, abs=1e-4)
    assert u / thin.length == pytest.approx(ue, abs=1e-4)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 12.0))
def test_deflection_grows_with_load(alpha):
    a = cantilever_tip(_P(alpha), BEAM)
    b = cantilever_tip(_P(1.05 * alpha), BEAM)
    assert b[0] > a[0] and b[1] > a[1]
    # the tip never passes under the root
    assert a[0] < BEAM.length and a[1] < BEAM.length


def test_curve_starts_at_rest():
    fr = np.linspace(0, 1, 6)
    curve = load_deflection_curve(1e5, BEAM, fr)
    arr = np.asarray(curve)
    assert arr.shape[0] == 6
    assert np.allclose(arr[0, -2:], 0.0)
