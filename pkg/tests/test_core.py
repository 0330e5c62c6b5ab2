import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from safe_nmpc import _core_py, core

compiled = pytest.importorskip("safe_nmpc._core")

finite = st.floats(-3.0, 3.0, allow_nan=False)
MODELS = [1, 2, 3]


def test_backend_selected():
    assert core.BACKEND in ("cython", "python")
    assert core.fallback is _core_py


@pytest.mark.parametrize("mid", MODELS)
@given(data=st.data())
@settings(max_examples=30, deadline=None)
def test_backends_agree(mid, data):
    nx, nu = _core_py.model_dims(mid)
    x = data.draw(arrays(float, nx, elements=finite))
    u = data.draw(arrays(float, nu, elements=finite))
    d = data.draw(arrays(float, nx, elements=st.floats(-0.1, 0.1)))
    np.testing.assert_allclose(compiled.model_rhs(mid, x, u), _core_py.model_rhs(mid, x, u), rtol=0, atol=1e-14)
    for a, b in zip(compiled.model_jac(mid, x, u), _core_py.model_jac(mid, x, u)):
        np.testing.assert_allclose(a, b, atol=1e-14)
    np.testing.assert_allclose(compiled.flow(mid, x, u, d, 0.2, 4), _core_py.flow(mid, x, u, d, 0.2, 4), atol=1e-12)
    for a, b in zip(compiled.flow_sens(mid, x, u, d, 0.2, 4), _core_py.flow_sens(mid, x, u, d, 0.2, 4)):
        np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("mid", MODELS)
def test_jacobian_matches_finite_differences(mid):
    rng = np.random.default_rng(mid)
    nx, nu = core.model_dims(mid)
    x, u = rng.uniform(-1, 1, nx), rng.uniform(-1, 1, nu)
    A, B = core.model_jac(mid, x, u)
    h = 1e-6
    Afd = np.column_stack([(core.model_rhs(mid, x + h * e, u) - core.model_rhs(mid, x - h * e, u)) / (2 * h)
                           for e in np.eye(nx)])
    Bfd = np.column_stack([(core.model_rhs(mid, x, u + h * e) - core.model_rhs(mid, x, u - h * e)) / (2 * h)
                           for e in np.eye(nu)])
    np.testing.assert_allclose(A, Afd, atol=1e-8)
    np.testing.assert_allclose(B, Bfd, atol=1e-8)


@pytest.mark.parametrize("mid", MODELS)
def test_flow_sensitivity_matches_finite_differences(mid):
    rng = np.random.default_rng(10 + mid)
    nx, nu = core.model_dims(mid)
    x, u, d = rng.uniform(-1, 1, nx), rng.uniform(-1, 1, nu), np.zeros(nx)
    _, Sx, Su = core.flow_sens(mid, x, u, d, 0.3, 3)
    h = 1e-6
    Sx_fd = np.column_stack([(core.flow(mid, x + h * e, u, d, 0.3, 3) - core.flow(mid, x - h * e, u, d, 0.3, 3)) / (2 * h)
                             for e in np.eye(nx)])
    Su_fd = np.column_stack([(core.flow(mid, x, u + h * e, d, 0.3, 3) - core.flow(mid, x, u - h * e, d, 0.3, 3)) / (2 * h)
                             for e in np.eye(nu)])
    np.testing.assert_allclose(Sx, Sx_fd, atol=1e-7)
    np.testing.assert_allclose(Su, Su_fd, atol=1e-7)


def test_double_integrator_flow_is_exact_for_held_input():
    # RK4 integrates polynomial-in-time solutions of degree <= 4 exactly
    x = np.array([1.0, -2.0, 0.5, 0.3])
    u = np.array([0.2, -0.4])
    T = 0.7
    p = x[:2] + x[2:] * T + 0.5 * u * T**2
    v = x[2:] + u * T
    np.testing.assert_allclose(core.flow(2, x, u, np.zeros(4), T, 1), np.concatenate([p, v]), atol=1e-14)


@given(arrays(float, (5, 5), elements=st.floats(-10, 10)))
@settings(max_examples=40, deadline=None)
def test_jacobi_eigenvalues_match_lapack(a):
    s = 0.5 * (a + a.T)
    ref = np.linalg.eigvalsh(s)
    scale = 1.0 + np.abs(ref).max()
    np.testing.assert_allclose(core.jacobi_eigvalsh(s), ref, atol=1e-10 * scale)
    np.testing.assert_allclose(_core_py.jacobi_eigvalsh(s), ref, atol=1e-10 * scale)


def test_unknown_model_id_rejected():
    with pytest.raises(KeyError):
        _core_py.model_rhs(9, np.zeros(1), np.zeros(1))


def test_unicycle_rhs_closed_form():
    x = np.array([0.0, 0.0, math.pi / 6])
    np.testing.assert_allclose(core.model_rhs(3, x, np.array([2.0, 0.5])),
                               [2 * math.cos(math.pi / 6), 2 * math.sin(math.pi / 6), 0.5], atol=1e-15)
