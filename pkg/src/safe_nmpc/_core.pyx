# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: RK4 shooting with sensitivities and cyclic Jacobi eigenvalues.

Interface mirrors ``_core_py``; models are addressed by integer id.
"""
from libc.math cimport cos, sin, sqrt, fabs, copysign

import numpy as np

BACKEND = "cython"

cdef enum:
    MAXN = 8


cdef int _dims(int mid, int* nx, int* nu) except -1:
    if mid == 1:
        nx[0] = 1; nu[0] = 1
    elif mid == 2:
        nx[0] = 4; nu[0] = 2
    elif mid == 3:
        nx[0] = 3; nu[0] = 2
    else:
        raise KeyError(mid)
    return 0


def model_dims(int mid):
    cdef int nx, nu
    _dims(mid, &nx, &nu)
    return nx, nu


cdef inline void _rhs(int mid, double* x, double* u, double* d, double* out) noexcept nogil:
    if mid == 1:
        out[0] = u[0] + d[0]
    elif mid == 2:
        out[0] = x[2] + d[0]
        out[1] = x[3] + d[1]
        out[2] = u[0] + d[2]
        out[3] = u[1] + d[3]
    else:
        out[0] = u[0] * cos(x[2]) + d[0]
        out[1] = u[0] * sin(x[2]) + d[1]
        out[2] = u[1] + d[2]


cdef inline void _jac(int mid, double* x, double* u, double* A, double* B) noexcept nogil:
    # A is nx*nx row-major, B is nx*nu row-major; both pre-zeroed by caller
    cdef double c, s
    if mid == 1:
        B[0] = 1.0
    elif mid == 2:
        A[0 * 4 + 2] = 1.0
        A[1 * 4 + 3] = 1.0
        B[2 * 2 + 0] = 1.0
        B[3 * 2 + 1] = 1.0
    else:
        c = cos(x[2]); s = sin(x[2])
        A[0 * 3 + 2] = -u[0] * s
        A[1 * 3 + 2] = u[0] * c
        B[0 * 2 + 0] = c
        B[1 * 2 + 0] = s
        B[2 * 2 + 1] = 1.0


def model_rhs(int mid, x, u):
    cdef int nx, nu, i
    _dims(mid, &nx, &nu)
    cdef double xs[MAXN]
    cdef double us[MAXN]
    cdef double ds[MAXN]
    cdef double out[MAXN]
    for i in range(nx):
        xs[i] = x[i]; ds[i] = 0.0
    for i in range(nu):
        us[i] = u[i]
    _rhs(mid, xs, us, ds, out)
    return np.array([out[i] for i in range(nx)], dtype=float)


def model_jac(int mid, x, u):
    cdef int nx, nu, i, j
    _dims(mid, &nx, &nu)
    cdef double xs[MAXN]
    cdef double us[MAXN]
    cdef double A[MAXN * MAXN]
    cdef double B[MAXN * MAXN]
    for i in range(nx):
        xs[i] = x[i]
    for i in range(nu):
        us[i] = u[i]
    for i in range(MAXN * MAXN):
        A[i] = 0.0; B[i] = 0.0
    _jac(mid, xs, us, A, B)
    An = np.empty((nx, nx)); Bn = np.empty((nx, nu))
    for i in range(nx):
        for j in range(nx):
            An[i, j] = A[i * nx + j]
        for j in range(nu):
            Bn[i, j] = B[i * nu + j]
    return An, Bn


def flow(int mid, x, u, d, double dt, int nsub):
    cdef int nx, nu, i, k
    _dims(mid, &nx, &nu)
    cdef double xs[MAXN]
    cdef double us[MAXN]
    cdef double ds[MAXN]
    cdef double k1[MAXN]
    cdef double k2[MAXN]
    cdef double k3[MAXN]
    cdef double k4[MAXN]
    cdef double tmp[MAXN]
    cdef double h = dt / nsub
    for i in range(nx):
        xs[i] = x[i]; ds[i] = d[i]
    for i in range(nu):
        us[i] = u[i]
    with nogil:
        for k in range(nsub):
            _rhs(mid, xs, us, ds, k1)
            for i in range(nx):
                tmp[i] = xs[i] + 0.5 * h * k1[i]
            _rhs(mid, tmp, us, ds, k2)
            for i in range(nx):
                tmp[i] = xs[i] + 0.5 * h * k2[i]
            _rhs(mid, tmp, us, ds, k3)
            for i in range(nx):
                tmp[i] = xs[i] + h * k3[i]
            _rhs(mid, tmp, us, ds, k4)
            for i in range(nx):
                xs[i] = xs[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return np.array([xs[i] for i in range(nx)], dtype=float)


cdef void _stage(int mid, int nx, int nu, double* xe, double* us, double* ds,
                 double* Sx, double* Su, double* kxo, double* kuo, double* ko) noexcept nogil:
    # k = f(xe,u)+d ; kx = A Sx ; ku = A Su + B  (Sx, Su already include the stage offsets)
    cdef double A[MAXN * MAXN]
    cdef double B[MAXN * MAXN]
    cdef int i, j, l
    cdef double acc
    for i in range(MAXN * MAXN):
        A[i] = 0.0; B[i] = 0.0
    _jac(mid, xe, us, A, B)
    _rhs(mid, xe, us, ds, ko)
    for i in range(nx):
        for j in range(nx):
            acc = 0.0
            for l in range(nx):
                acc = acc + A[i * nx + l] * Sx[l * nx + j]
            kxo[i * nx + j] = acc
        for j in range(nu):
            acc = B[i * nu + j]
            for l in range(nx):
                acc = acc + A[i * nx + l] * Su[l * nu + j]
            kuo[i * nu + j] = acc


def flow_sens(int mid, x, u, d, double dt, int nsub):
    cdef int nx, nu, i, j, k
    _dims(mid, &nx, &nu)
    cdef double xs[MAXN]
    cdef double us[MAXN]
    cdef double ds[MAXN]
    cdef double xe[MAXN]
    cdef double Sx[MAXN * MAXN]
    cdef double Su[MAXN * MAXN]
    cdef double Tx[MAXN * MAXN]
    cdef double Tu[MAXN * MAXN]
    cdef double k1[MAXN]
    cdef double k2[MAXN]
    cdef double k3[MAXN]
    cdef double k4[MAXN]
    cdef double k1x[MAXN * MAXN]
    cdef double k2x[MAXN * MAXN]
    cdef double k3x[MAXN * MAXN]
    cdef double k4x[MAXN * MAXN]
    cdef double k1u[MAXN * MAXN]
    cdef double k2u[MAXN * MAXN]
    cdef double k3u[MAXN * MAXN]
    cdef double k4u[MAXN * MAXN]
    cdef double h = dt / nsub
    for i in range(nx):
        xs[i] = x[i]; ds[i] = d[i]
    for i in range(nu):
        us[i] = u[i]
    for i in range(nx):
        for j in range(nx):
            Sx[i * nx + j] = 1.0 if i == j else 0.0
        for j in range(nu):
            Su[i * nu + j] = 0.0
    with nogil:
        for k in range(nsub):
            _stage(mid, nx, nu, xs, us, ds, Sx, Su, k1x, k1u, k1)

            for i in range(nx):
                xe[i] = xs[i] + 0.5 * h * k1[i]
                for j in range(nx):
                    Tx[i * nx + j] = Sx[i * nx + j] + 0.5 * h * k1x[i * nx + j]
                for j in range(nu):
                    Tu[i * nu + j] = Su[i * nu + j] + 0.5 * h * k1u[i * nu + j]
            _stage(mid, nx, nu, xe, us, ds, Tx, Tu, k2x, k2u, k2)

            for i in range(nx):
                xe[i] = xs[i] + 0.5 * h * k2[i]
                for j in range(nx):
                    Tx[i * nx + j] = Sx[i * nx + j] + 0.5 * h * k2x[i * nx + j]
                for j in range(nu):
                    Tu[i * nu + j] = Su[i * nu + j] + 0.5 * h * k2u[i * nu + j]
            _stage(mid, nx, nu, xe, us, ds, Tx, Tu, k3x, k3u, k3)

            for i in range(nx):
                xe[i] = xs[i] + h * k3[i]
                for j in range(nx):
                    Tx[i * nx + j] = Sx[i * nx + j] + h * k3x[i * nx + j]
                for j in range(nu):
                    Tu[i * nu + j] = Su[i * nu + j] + h * k3u[i * nu + j]
            _stage(mid, nx, nu, xe, us, ds, Tx, Tu, k4x, k4u, k4)

            for i in range(nx):
                xs[i] = xs[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                for j in range(nx):
                    Sx[i * nx + j] = Sx[i * nx + j] + (h / 6.0) * (
                        k1x[i * nx + j] + 2.0 * k2x[i * nx + j] + 2.0 * k3x[i * nx + j] + k4x[i * nx + j])
                for j in range(nu):
                    Su[i * nu + j] = Su[i * nu + j] + (h / 6.0) * (
                        k1u[i * nu + j] + 2.0 * k2u[i * nu + j] + 2.0 * k3u[i * nu + j] + k4u[i * nu + j])
    xo = np.empty(nx)
    Ad = np.empty((nx, nx))
    Bd = np.empty((nx, nu))
    for i in range(nx):
        xo[i] = xs[i]
        for j in range(nx):
            Ad[i, j] = Sx[i * nx + j]
        for j in range(nu):
            Bd[i, j] = Su[i * nu + j]
    return xo, Ad, Bd


def jacobi_eigvalsh(a_in, double tol=1e-15, int max_sweeps=60):
    a_np = np.array(a_in, dtype=float, order="C")
    cdef double[:, ::1] a = a_np
    cdef int n = a.shape[0]
    cdef int sweep, p, q, r
    cdef double off, scale, apq, theta, t, c, s, x1, x2, diag2
    if n == 1:
        return a_np.reshape(1).copy()
    scale = 0.0
    for p in range(n):
        for q in range(n):
            if fabs(a[p, q]) > scale:
                scale = fabs(a[p, q])
    if scale < 1e-300:
        scale = 1e-300
    with nogil:
        for sweep in range(max_sweeps):
            off = 0.0
            for p in range(n):
                for q in range(n):
                    if p != q:
                        off = off + a[p, q] * a[p, q]
            if sqrt(off) <= tol * scale:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if fabs(apq) <= 1e-300:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if fabs(theta) > 1e150:
                        t = 0.5 / theta
                    else:
                        t = copysign(1.0, theta) / (fabs(theta) + sqrt(theta * theta + 1.0))
                    c = 1.0 / sqrt(t * t + 1.0)
                    s = t * c
                    for r in range(n):
                        x1 = a[r, p]; x2 = a[r, q]
                        a[r, p] = c * x1 - s * x2
                        a[r, q] = s * x1 + c * x2
                    for r in range(n):
                        x1 = a[p, r]; x2 = a[q, r]
                        a[p, r] = c * x1 - s * x2
                        a[q, r] = s * x1 + c * x2
                    a[p, q] = 0.0
                    a[q, p] = 0.0
    return np.sort(np.array([a[r, r] for r in range(n)], dtype=float))
