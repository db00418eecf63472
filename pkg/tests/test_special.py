import mpmath
import numpy as np
import pytest

from stochks.special import EULER_GAMMA, bessel_i0, bessel_i1, bessel_k0, bessel_k1

RADII = np.concatenate([np.geomspace(1e-6, 1.99, 40), [2.0], np.geomspace(2.01, 80.0, 60)])


@pytest.mark.parametrize("ours, ref", [(bessel_k0, mpmath.besselk), (bessel_k1, mpmath.besselk)])
def test_k_against_mpmath(ours, ref):
    order = 0 if ours is bessel_k0 else 1
    got = ours(RADII)
    want = np.array([float(ref(order, x)) for x in RADII])
    assert np.max(np.abs(got / want - 1)) <= 1e-10


def test_i_against_mpmath():
    x = np.linspace(0.0, 6.0, 31)[1:]
    assert np.allclose(bessel_i0(x), [float(mpmath.besseli(0, v)) for v in x], rtol=1e-13)
    assert np.allclose(bessel_i1(x), [float(mpmath.besseli(1, v)) for v in x], rtol=1e-13)


def test_k0_small_argument_series():
    r = np.geomspace(1e-9, 1e-3, 20)
    approx = -(np.log(r / 2) + EULER_GAMMA)
    assert np.max(np.abs(bessel_k0(r) / approx - 1)) <= 1e-6


def test_k_rejects_nonpositive():
    with pytest.raises(ValueError):
        bessel_k0(0.0)
    with pytest.raises(ValueError):
        bessel_k1(-1.0)
