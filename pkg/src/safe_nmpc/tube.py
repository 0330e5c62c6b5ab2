"""Tube dynamics, the incremental Lyapunov function, and the geodesic feedback law."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .model import Polytope

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)
GL_NODES = 0.5 * (_GL_NODES + 1.0)
GL_WEIGHTS = 0.5 * _GL_WEIGHTS


def tube_size(rho, wbar, t):
    """Closed-form solution of ``s' = -rho s + wbar`` from ``s(0) = 0``."""
    if rho <= 0:
        raise ConfigurationError("rho must be positive")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ConfigurationError("t must be nonnegative")
    s = -np.expm1(-rho * t) * (wbar / rho)
    return float(s) if s.ndim == 0 else s


@dataclass(frozen=True)
class TubeProfile:
    rho: float
    wbar: float
    times: np.ndarray
    sizes: np.ndarray
    s0: float = 0.0

    @classmethod
    def over_horizon(cls, rho, wbar, Ts, N):
        times = Ts * np.arange(N + 1)
        return cls(rho, wbar, times, np.atleast_1d(tube_size(rho, wbar, times)))

    @property
    def limit(self):
        return self.wbar / self.rho

    def at(self, t):
        return tube_size(self.rho, self.wbar, t)


def vdelta(Pdelta, a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(d @ np.asarray(Pdelta, dtype=float) @ d)


def sqrt_vdelta(Pdelta, a, b):
    return math.sqrt(max(vdelta(Pdelta, a, b), 0.0))


@dataclass(frozen=True)
class GainTable:
    """State-dependent gain on a rectilinear grid of selected state coordinates,
    multilinearly interpolated and clamped at the grid edges."""

    dims: tuple
    axes: tuple
    gains: np.ndarray  # shape (*[len(a) for a in axes], n_u, n_x)

    @classmethod
    def constant(cls, K):
        return cls((), (), np.asarray(K, dtype=float))

    @property
    def is_constant(self):
        return len(self.dims) == 0

    def entries(self):
        """Every stored gain matrix."""
        k = self.gains.shape[-2:]
        return self.gains.reshape(-1, *k)

    def at(self, x):
        if self.is_constant:
            return self.gains
        x = np.asarray(x, dtype=float)
        idx, wts = [], []
        for d, ax in zip(self.dims, self.axes):
            if len(ax) == 1:
                idx.append((0, 0))
                wts.append((1.0, 0.0))
                continue
            v = min(max(x[d], ax[0]), ax[-1])
            i = min(int(np.searchsorted(ax, v, side="right") - 1), len(ax) - 2)
            f = (v - ax[i]) / (ax[i + 1] - ax[i])
            idx.append((i, i + 1))
            wts.append((1.0 - f, f))
        out = np.zeros(self.gains.shape[-2:])
        for corner in itertools.product((0, 1), repeat=len(self.dims)):
            w = 1.0
            for a, c in enumerate(corner):
                w *= wts[a][c]
            if w != 0.0:
                out += w * self.gains[tuple(idx[a][c] for a, c in enumerate(corner))]
        return out

    def to_dict(self):
        return {"dims": list(self.dims), "axes": [list(map(float, a)) for a in self.axes],
                "shape": list(self.gains.shape), "gains": self.gains.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, d):
        gains = np.asarray(d["gains"], dtype=float).reshape(d["shape"])
        return cls(tuple(d["dims"]), tuple(np.asarray(a, dtype=float) for a in d["axes"]), gains)


def mean_gain(table: GainTable, x, z):
    """``int_0^1 K(z + s (x - z)) ds`` by 8-point Gauss-Legendre."""
    if table.is_constant:
        return table.gains
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    d = x - z
    out = np.zeros(table.gains.shape[-2:])
    for s, w in zip(GL_NODES, GL_WEIGHTS):
        out += w * table.at(z + s * d)
    return out


def feedback_kappa(artifact, x, z, v):
    """``v + int_0^1 K(g(s)) ds (x - z)`` along the straight geodesic; TMPC uses its constant K."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    if artifact.variant == "tmpc":
        return v + artifact.K @ (x - z)
    return v + mean_gain(artifact.gain_table, x, z) @ (x - z)


def terminal_membership(artifact, z, x_ref, s_T=0.0, include_epsilon=False):
    """Signed terminal-set margin; nonnegative means the point is in the set."""
    if artifact.variant == "tmpc":
        d = np.asarray(z, dtype=float) - np.asarray(x_ref, dtype=float)
        return artifact.alpha ** 2 - float(d @ artifact.P @ d)
    margin = artifact.alpha - sqrt_vdelta(artifact.Pdelta, z, x_ref) - s_T
    if include_epsilon:
        margin -= artifact.epsilon
    return margin


def check_s_bound(rho, wbar, Ts, tau_grid, s_fn=None):
    """Minimum over ``tau`` of ``s(Ts + tau) - e^{-rho tau} s(Ts) - s(tau)``."""
    s = s_fn if s_fn is not None else (lambda t: tube_size(rho, wbar, t))
    tau = np.asarray(tau_grid, dtype=float)
    r = np.array([s(Ts + t) - math.exp(-rho * t) * s(Ts) - s(t) for t in tau])
    return float(np.min(r))


def tighten_rows(rows: Polytope, c, s, extra=None) -> Polytope:
    """Offsets ``l_j - c_j s - extra_j``; rows unchanged. Warns when a row pair empties the set."""
    c = np.broadcast_to(np.asarray(c, dtype=float), rows.b.shape)
    e = np.zeros(rows.b.shape) if extra is None else np.broadcast_to(np.asarray(extra, dtype=float), rows.b.shape)
    out = Polytope(rows.A.copy(), rows.b - c * s - e)
    empty = empty_row_pairs(out)
    if empty:
        warnings.warn(f"tightened set is empty along row pairs {empty}", RuntimeWarning, stacklevel=2)
    return out


def empty_row_pairs(poly: Polytope, tol=0.0):
    """Pairs of opposite rows whose offsets leave no room (``b_i + b_j < 0``)."""
    A, b = poly.A, poly.b
    opposite = np.all(A[:, None, :] == -A[None, :, :], axis=2)
    bad = opposite & (b[:, None] + b[None, :] < -tol)
    i, j = np.nonzero(np.triu(bad, 1))
    return list(zip(i.tolist(), j.tolist()))
