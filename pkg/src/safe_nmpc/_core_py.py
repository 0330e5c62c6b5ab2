"""Pure-Python kernels. Same interface as the compiled ``_core`` extension.

Models are addressed by integer id so both backends can share call sites:
1 scalar integrator, 2 planar double integrator, 3 unicycle.
"""
import math

import numpy as np

BACKEND = "python"

_DIMS = {1: (1, 1), 2: (4, 2), 3: (3, 2)}


def model_dims(mid):
    return _DIMS[mid]


def model_rhs(mid, x, u):
    if mid == 1:
        return np.array([u[0]], dtype=float)
    if mid == 2:
        return np.array([x[2], x[3], u[0], u[1]], dtype=float)
    if mid == 3:
        th = x[2]
        return np.array([u[0] * math.cos(th), u[0] * math.sin(th), u[1]], dtype=float)
    raise KeyError(mid)


def model_jac(mid, x, u):
    nx, nu = _DIMS[mid]
    A = np.zeros((nx, nx))
    B = np.zeros((nx, nu))
    if mid == 1:
        B[0, 0] = 1.0
    elif mid == 2:
        A[0, 2] = A[1, 3] = 1.0
        B[2, 0] = B[3, 1] = 1.0
    elif mid == 3:
        c, s = math.cos(x[2]), math.sin(x[2])
        A[0, 2] = -u[0] * s
        A[1, 2] = u[0] * c
        B[0, 0], B[1, 0], B[2, 1] = c, s, 1.0
    else:
        raise KeyError(mid)
    return A, B


def flow(mid, x, u, d, dt, nsub):
    """RK4 over ``dt`` in ``nsub`` equal steps with held input ``u`` and drift ``d``."""
    x = np.array(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    h = dt / nsub
    for _ in range(nsub):
        k1 = model_rhs(mid, x, u) + d
        k2 = model_rhs(mid, x + 0.5 * h * k1, u) + d
        k3 = model_rhs(mid, x + 0.5 * h * k2, u) + d
        k4 = model_rhs(mid, x + h * k3, u) + d
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def flow_sens(mid, x, u, d, dt, nsub):
    """RK4 flow plus its Jacobians with respect to the initial state and held input."""
    x = np.array(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    nx, nu = _DIMS[mid]
    Sx = np.eye(nx)
    Su = np.zeros((nx, nu))
    h = dt / nsub
    for _ in range(nsub):
        A1, B1 = model_jac(mid, x, u)
        k1 = model_rhs(mid, x, u) + d
        k1x, k1u = A1 @ Sx, A1 @ Su + B1
        x2 = x + 0.5 * h * k1
        A2, B2 = model_jac(mid, x2, u)
        k2 = model_rhs(mid, x2, u) + d
        k2x = A2 @ (Sx + 0.5 * h * k1x)
        k2u = A2 @ (Su + 0.5 * h * k1u) + B2
        x3 = x + 0.5 * h * k2
        A3, B3 = model_jac(mid, x3, u)
        k3 = model_rhs(mid, x3, u) + d
        k3x = A3 @ (Sx + 0.5 * h * k2x)
        k3u = A3 @ (Su + 0.5 * h * k2u) + B3
        x4 = x + h * k3
        A4, B4 = model_jac(mid, x4, u)
        k4 = model_rhs(mid, x4, u) + d
        k4x = A4 @ (Sx + h * k3x)
        k4u = A4 @ (Su + h * k3u) + B4
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        Sx = Sx + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        Su = Su + (h / 6.0) * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
    return x, Sx, Su


def jacobi_eigvalsh(a, tol=1e-15, max_sweeps=60):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    if n == 1:
        return a.reshape(1).copy()
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
    return np.sort(np.diag(a).copy())
