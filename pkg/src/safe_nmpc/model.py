"""Plant models, constraint sets, reference trajectories and RK4 integration."""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import core
from .errors import ConfigurationError, NumericError


def _vec(a, n=None, name="vector"):
    v = np.atleast_1d(np.asarray(a, dtype=float)).reshape(-1)
    if n is not None and v.shape[0] != n:
        raise ConfigurationError(f"{name} has length {v.shape[0]}, expected {n}")
    return v


@dataclass(frozen=True)
class BoxSet:
    """Axis-aligned box ``lower <= v <= upper``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _vec(self.lower, name="lower")
        hi = _vec(self.upper, lo.shape[0], name="upper")
        if np.any(lo > hi):
            raise ConfigurationError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half):
        h = _vec(half)
        return cls(-h, h)

    @property
    def dim(self):
        return self.lower.shape[0]

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    def vertices(self):
        """All 2^d corners, lexicographic in (lower, upper) per dimension."""
        corners = itertools.product(*zip(self.lower, self.upper))
        return np.array(list(corners), dtype=float).reshape(-1, self.dim)

    def contains(self, v, tol=0.0):
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))

    def scaled(self, c):
        return BoxSet(self.center + c * (self.lower - self.center), self.center + c * (self.upper - self.center))

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["lower"], d["upper"])


@dataclass(frozen=True)
class Polytope:
    """Half-space set ``A v <= b``; row ``j`` is ``(A[j], b[j])``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = _vec(self.b, A.shape[0], name="offsets")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_rows(cls, rows):
        rows = list(rows)
        return cls(np.array([r[0] for r in rows], dtype=float), np.array([r[1] for r in rows], dtype=float))

    @property
    def rows(self):
        return [(self.A[j], float(self.b[j])) for j in range(self.A.shape[0])]

    @property
    def n_rows(self):
        return self.A.shape[0]

    def margins(self, v):
        """``b - A v`` per row; nonnegative entries mean satisfied."""
        return self.b - self.A @ np.asarray(v, dtype=float)

    def contains(self, v, tol=0.0):
        return bool(np.all(self.margins(v) >= -tol))

    def is_normalized(self, tol=1e-12):
        return bool(np.all(np.abs(np.linalg.norm(self.A, axis=1) - 1.0) <= tol))

    def interior_seed(self):
        """Chebyshev-style seed: the box midpoint when rows come in +/- pairs, else least squares."""
        return np.linalg.lstsq(self.A, self.b, rcond=None)[0]

    def to_dict(self):
        return {"A": self.A.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["A"], d["b"])


def box_polytope(box: BoxSet) -> Polytope:
    """Unit-norm rows ``+e_i v <= hi_i`` and ``-e_i v <= -lo_i`` per dimension."""
    n = box.dim
    A = np.zeros((2 * n, n))
    b = np.zeros(2 * n)
    for i in range(n):
        A[2 * i, i], b[2 * i] = 1.0, box.upper[i]
        A[2 * i + 1, i], b[2 * i + 1] = -1.0, -box.lower[i]
    return Polytope(A, b)


def box_rows(u_box: BoxSet, x_box: BoxSet) -> Polytope:
    """System rows over the stacked vector ``[u; x]``; input rows come first."""
    return box_polytope(BoxSet(np.concatenate([u_box.lower, x_box.lower]), np.concatenate([u_box.upper, x_box.upper])))


@dataclass(frozen=True)
class ObstacleSchedule:
    """Per-stage free-space polytopes in position space, held constant over each interval."""

    stages: tuple

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        for k, poly in enumerate(self.stages):
            if not poly.is_normalized():
                raise ConfigurationError(f"obstacle stage {k} has rows without unit norm")

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, k):
        return self.stages[k]

    def to_dict(self):
        return {"stages": [p.to_dict() for p in self.stages]}


@dataclass(frozen=True)
class SystemModel:
    name: str
    n_x: int
    n_u: int
    n_w: int
    n_y: int
    n_eta: int
    n_p: int
    f: Callable
    jac: Callable
    E: np.ndarray
    C: np.ndarray
    F: np.ndarray
    M: np.ndarray
    w_bias: np.ndarray
    x_box: BoxSet
    u_box: BoxSet
    grid_box: BoxSet  # over [x; u], used for gridding Jacobians
    linear_dims: tuple = ()
    nonlinear_dims: tuple = ()
    kernel: Optional[int] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {
            "E": (self.E, (self.n_x, self.n_w)),
            "C": (self.C, (self.n_y, self.n_x)),
            "F": (self.F, (self.n_y, self.n_eta)),
            "M": (self.M, (self.n_p, self.n_x)),
        }
        for name, (mat, shp) in shapes.items():
            if np.asarray(mat).shape != shp:
                raise ConfigurationError(f"{name} has shape {np.asarray(mat).shape}, expected {shp}")
        if _vec(self.w_bias).shape[0] != self.n_w:
            raise ConfigurationError("w_bias length does not match n_w")
        if self.x_box.dim != self.n_x or self.u_box.dim != self.n_u:
            raise ConfigurationError("constraint boxes do not match state/input dimensions")
        if self.grid_box.dim != self.n_x + self.n_u:
            raise ConfigurationError("grid box must cover [x; u]")

    @functools.cached_property
    def bias_drift(self):
        return self.E @ self.w_bias

    def system_rows(self) -> Polytope:
        return box_rows(self.u_box, self.x_box)

    def position(self, x):
        return self.M @ np.asarray(x, dtype=float)

    def config(self):
        return {"name": self.name, **self.params}


# ---------------------------------------------------------------- registry

def _kernel_model(name, mid, *, E, C, F, M, x_box, u_box, grid_box, linear_dims, nonlinear_dims, w_bias, params):
    n_x, n_u = core.model_dims(mid)
    E, C, F, M = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (E, C, F, M))

    def f(x, u):
        return core.model_rhs(mid, np.asarray(x, dtype=float), np.asarray(u, dtype=float))

    def jac(x, u):
        return core.model_jac(mid, np.asarray(x, dtype=float), np.asarray(u, dtype=float))

    return SystemModel(
        name=name, n_x=n_x, n_u=n_u, n_w=E.shape[1], n_y=C.shape[0], n_eta=F.shape[1], n_p=M.shape[0],
        f=f, jac=jac, E=E, C=C, F=F, M=M, w_bias=_vec(w_bias, E.shape[1]),
        x_box=x_box, u_box=u_box, grid_box=grid_box,
        linear_dims=tuple(linear_dims), nonlinear_dims=tuple(nonlinear_dims), kernel=mid, params=dict(params),
    )


def scalar_integrator(x_max=1.0, u_max=1.0, w_bias=0.0):
    x_box, u_box = BoxSet([-x_max], [x_max]), BoxSet([-u_max], [u_max])
    return _kernel_model(
        "scalar_integrator", 1, E=[[1.0]], C=[[1.0]], F=[[1.0]], M=[[1.0]],
        x_box=x_box, u_box=u_box, grid_box=BoxSet([-x_max, -u_max], [x_max, u_max]),
        linear_dims=(), nonlinear_dims=(), w_bias=[w_bias],
        params={"x_max": x_max, "u_max": u_max, "w_bias": w_bias},
    )


def double_integrator_2d(p_max=10.0, v_max=1.0, a_max=1.0, w_bias=(0.0, 0.0), outputs="position"):
    # with positions only, contraction needs a negative position-velocity coupling in
    # the metric while the observer error needs a positive one: "full" measures everything
    if outputs not in ("position", "full"):
        raise ConfigurationError(f"outputs must be 'position' or 'full', got {outputs!r}")
    x_box = BoxSet([-p_max, -p_max, -v_max, -v_max], [p_max, p_max, v_max, v_max])
    u_box = BoxSet([-a_max, -a_max], [a_max, a_max])
    E = np.vstack([np.zeros((2, 2)), np.eye(2)])
    S = np.hstack([np.eye(2), np.zeros((2, 2))])
    return _kernel_model(
        "double_integrator_2d", 2, E=E, C=S if outputs == "position" else np.eye(4),
        F=np.eye(2 if outputs == "position" else 4), M=S,
        x_box=x_box, u_box=u_box,
        grid_box=BoxSet(np.concatenate([x_box.lower, u_box.lower]), np.concatenate([x_box.upper, u_box.upper])),
        linear_dims=(), nonlinear_dims=(), w_bias=list(w_bias),
        params={"p_max": p_max, "v_max": v_max, "a_max": a_max, "w_bias": list(w_bias), "outputs": outputs},
    )


def unicycle(p_max=10.0, v_min=0.2, v_max=1.0, omega_max=1.5, heading_range=(-math.pi / 4, math.pi / 4),
             w_bias=(0.0, 0.0, 0.0)):
    # a constant metric cannot contract the lateral error at v = 0 or over a full turn,
    # so forward speed and heading are both boxed
    x_box = BoxSet([-p_max, -p_max, heading_range[0]], [p_max, p_max, heading_range[1]])
    u_box = BoxSet([v_min, -omega_max], [v_max, omega_max])
    grid_box = BoxSet([-p_max, -p_max, heading_range[0], v_min, -omega_max],
                      [p_max, p_max, heading_range[1], v_max, omega_max])
    S = np.hstack([np.eye(2), np.zeros((2, 1))])
    return _kernel_model(
        "unicycle", 3, E=np.eye(3), C=np.eye(3), F=np.eye(3), M=S,
        x_box=x_box, u_box=u_box, grid_box=grid_box,
        linear_dims=(3,), nonlinear_dims=(2,), w_bias=list(w_bias),
        params={"p_max": p_max, "v_min": v_min, "v_max": v_max, "omega_max": omega_max,
                "heading_range": list(heading_range), "w_bias": list(w_bias)},
    )


REGISTRY = {
    "scalar_integrator": scalar_integrator,
    "double_integrator_2d": double_integrator_2d,
    "unicycle": unicycle,
}


def make_model(name, **params) -> SystemModel:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; registered: {sorted(REGISTRY)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for model {name!r}: {exc}") from None


def model_from_config(cfg) -> SystemModel:
    cfg = dict(cfg)
    name = cfg.pop("name")
    return make_model(name, **cfg)


# ---------------------------------------------------------------- dynamics

def eval_dynamics(model: SystemModel, x, u, w=None):
    x = _vec(x, model.n_x, "state")
    u = _vec(u, model.n_u, "input")
    dx = np.asarray(model.f(x, u), dtype=float)
    if w is None:
        return dx
    return dx + model.E @ _vec(w, model.n_w, "disturbance")


def output_measure(model: SystemModel, x, eta):
    x = _vec(x, model.n_x, "state")
    eta = _vec(eta, model.n_eta, "noise")
    return model.C @ x + model.F @ eta


def _check_finite(x):
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        raise NumericError(f"non-finite state component {int(bad[0])}", index=int(bad[0]))
    return x


def rk4(rhs, y, t0, dt, substeps=1):
    """Classical RK4 for ``y' = rhs(t, y)`` over ``dt`` in equal sub-steps."""
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    y = np.array(y, dtype=float)
    h = dt / substeps
    t = t0
    for _ in range(substeps):
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = t0 + (_ + 1) * h
    return _check_finite(y)


def integrate_step(model: SystemModel, x, u, w, dt, substeps=1, t0=0.0):
    """One RK4 interval. ``u`` is a vector held over the step or a callable ``u(t, x)``;
    ``w`` is ``None``, a held vector, or a callable ``w(t)``."""
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    x = _vec(x, model.n_x, "state")
    if not callable(u) and not callable(w):
        u = _vec(u, model.n_u, "input")
        d = np.zeros(model.n_x) if w is None else model.E @ _vec(w, model.n_w, "disturbance")
        if model.kernel is not None:
            return _check_finite(core.flow(model.kernel, x, u, d, float(dt), int(substeps)))
        return rk4(lambda t, y: np.asarray(model.f(y, u), dtype=float) + d, x, t0, dt, substeps)

    def ufun(t, y):
        return _vec(u(t, y) if callable(u) else u, model.n_u, "input")

    def dfun(t):
        if w is None:
            return 0.0
        return model.E @ _vec(w(t) if callable(w) else w, model.n_w, "disturbance")

    return rk4(lambda t, y: np.asarray(model.f(y, ufun(t, y)), dtype=float) + dfun(t), x, t0, dt, substeps)


def shooting_flow(model: SystemModel, x, u, dt, substeps, with_sensitivity=False):
    """Nominal prediction flow over one interval with the bias drift ``E w^b`` included."""
    d = model.bias_drift
    if model.kernel is not None:
        if with_sensitivity:
            return core.flow_sens(model.kernel, np.asarray(x, float), np.asarray(u, float), d, float(dt), int(substeps))
        return core.flow(model.kernel, np.asarray(x, float), np.asarray(u, float), d, float(dt), int(substeps))
    return _generic_flow(model, x, u, d, dt, substeps, with_sensitivity)


def _generic_flow(model, x, u, d, dt, nsub, sens):
    x = np.array(x, dtype=float)
    u = np.asarray(u, dtype=float)
    Sx, Su = np.eye(model.n_x), np.zeros((model.n_x, model.n_u))
    h = dt / nsub

    def stage(xe, Tx, Tu):
        A, B = model.jac(xe, u)
        return np.asarray(model.f(xe, u)) + d, A @ Tx, A @ Tu + B

    for _ in range(nsub):
        k1, k1x, k1u = stage(x, Sx, Su)
        k2, k2x, k2u = stage(x + 0.5 * h * k1, Sx + 0.5 * h * k1x, Su + 0.5 * h * k1u)
        k3, k3x, k3u = stage(x + 0.5 * h * k2, Sx + 0.5 * h * k2x, Su + 0.5 * h * k2u)
        k4, k4x, k4u = stage(x + h * k3, Sx + h * k3x, Su + h * k3u)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        Sx = Sx + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
        Su = Su + (h / 6.0) * (k1u + 2 * k2u + 2 * k3u + k4u)
    return (x, Sx, Su) if sens else x


# ---------------------------------------------------------------- gridding

def grid_domain(box: BoxSet, points_per_nonlinear_dim: int, nonlinear_dims: Sequence[int], linear_dims: Sequence[int] = ()):
    """Synthesis grid over ``box``: uniform values on nonlinear dims, the two bounds on
    linear dims, zero elsewhere. Ordering is a lexicographic Cartesian product."""
    if box.dim == 0:
        raise ConfigurationError("empty box")
    nonlinear_dims, linear_dims = set(nonlinear_dims), set(linear_dims)
    if nonlinear_dims & linear_dims:
        raise ConfigurationError("a dimension cannot be both linear and nonlinear")
    if nonlinear_dims and points_per_nonlinear_dim < 2:
        raise ConfigurationError("gridded dimensions need at least two points")
    axes = []
    for i in range(box.dim):
        if i in nonlinear_dims:
            axes.append(np.linspace(box.lower[i], box.upper[i], points_per_nonlinear_dim))
        elif i in linear_dims:
            axes.append(np.array([box.lower[i], box.upper[i]]) if box.upper[i] > box.lower[i] else np.array([box.lower[i]]))
        else:
            axes.append(np.array([0.0]))
    return [np.array(p, dtype=float) for p in itertools.product(*axes)]


def model_grid(model: SystemModel, points_per_nonlinear_dim: int):
    return grid_domain(model.grid_box, points_per_nonlinear_dim, model.nonlinear_dims, model.linear_dims)


# ---------------------------------------------------------------- corridors

def build_corridor(path, half_width: float, N: int, bounds: Optional[BoxSet] = None) -> ObstacleSchedule:
    """Axis-aligned stage boxes around consecutive path segments.

    Stage ``k`` covers ``path[k]`` and ``path[k+1]`` inflated by ``half_width``; the last
    stage also covers any points past index ``N``. ``bounds`` clips every box to a fixed
    world region.
    """
    path = np.atleast_2d(np.asarray(path, dtype=float))
    if path.shape[0] < N + 1:
        raise ConfigurationError(f"path has {path.shape[0]} points, need at least {N + 1}")
    if half_width <= 0:
        raise ConfigurationError("half_width must be positive")
    stages = []
    for k in range(N):
        seg = path[k:k + 2] if k < N - 1 else path[k:]
        lo = seg.min(axis=0) - half_width
        hi = seg.max(axis=0) + half_width
        if bounds is not None:
            lo = np.maximum(lo, bounds.lower)
            hi = np.minimum(hi, bounds.upper)
            if np.any(lo > hi):
                raise ConfigurationError(f"corridor stage {k} is empty after clipping to the world bounds")
        stages.append(box_polytope(BoxSet(lo, hi)))
    return ObstacleSchedule(tuple(stages))


def corridor_contains(schedule: ObstacleSchedule, positions, tol=0.0) -> bool:
    """True when ``positions[k+1]`` lies in stage ``k`` for every stage (the shifted-plan test)."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    for k, poly in enumerate(schedule.stages):
        if k + 1 >= positions.shape[0]:
            break
        if not poly.contains(positions[k + 1], tol):
            return False
    return True


# ---------------------------------------------------------------- references

class ReferenceTrajectory:
    """Sampled reference with Hermite state and linear input interpolation.

    Analytic generators also attach ``exact(t) -> (x, u, xdot)`` which then takes
    precedence over interpolation. Times past the last sample hold the final sample.
    """

    def __init__(self, times, x, u, xdot, exact=None, meta=None):
        self.times = np.asarray(times, dtype=float)
        self.x = np.atleast_2d(np.asarray(x, dtype=float))
        self.u = np.atleast_2d(np.asarray(u, dtype=float))
        self.xdot = np.atleast_2d(np.asarray(xdot, dtype=float))
        if not (self.x.shape[0] == self.u.shape[0] == self.xdot.shape[0] == self.times.shape[0]):
            raise ConfigurationError("reference arrays must share the sample count")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("reference times must be strictly increasing")
        self.exact = exact
        self.meta = dict(meta or {})

    @property
    def t_end(self):
        return float(self.times[-1])

    def _locate(self, t):
        k = int(np.searchsorted(self.times, t, side="right") - 1)
        return min(max(k, 0), self.times.shape[0] - 2)

    def at(self, t):
        """Reference ``(x^r, u^r)`` at time ``t``."""
        if self.exact is not None:
            x, u, _ = self.exact(t)
            return np.asarray(x, float), np.asarray(u, float)
        if t >= self.times[-1]:
            return self.x[-1].copy(), self.u[-1].copy()
        if t <= self.times[0]:
            return self.x[0].copy(), self.u[0].copy()
        k = self._locate(t)
        h = self.times[k + 1] - self.times[k]
        s = (t - self.times[k]) / h
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        x = h00 * self.x[k] + h10 * h * self.xdot[k] + h01 * self.x[k + 1] + h11 * h * self.xdot[k + 1]
        u = (1 - s) * self.u[k] + s * self.u[k + 1]
        return x, u

    def derivative(self, t):
        if self.exact is not None:
            return np.asarray(self.exact(t)[2], float)
        if t >= self.times[-1] or t <= self.times[0]:
            k = -1 if t >= self.times[-1] else 0
            return self.xdot[k].copy()
        k = self._locate(t)
        h = self.times[k + 1] - self.times[k]
        s = (t - self.times[k]) / h
        d00 = (6 * s**2 - 6 * s) / h
        d10 = 3 * s**2 - 4 * s + 1
        d01 = (-6 * s**2 + 6 * s) / h
        d11 = 3 * s**2 - 2 * s
        return d00 * self.x[k] + d10 * self.xdot[k] + d01 * self.x[k + 1] + d11 * self.xdot[k + 1]

    def feasibility_residual(self, model: SystemModel):
        """Max over sample midpoints of ``|xdot^r - f(x^r, u^r) - E w^b|``."""
        worst = 0.0
        for a, b in zip(self.times[:-1], self.times[1:]):
            t = 0.5 * (a + b)
            x, u = self.at(t)
            r = self.derivative(t) - np.asarray(model.f(x, u)) - model.bias_drift
            worst = max(worst, float(np.max(np.abs(r))))
        return worst

    def min_margin(self, rows: Polytope, tightening=None):
        """Smallest ``l_j - tightening_j - L_j [u; x]`` over all samples."""
        tight = np.zeros(rows.n_rows) if tightening is None else _vec(tightening, rows.n_rows)
        worst = math.inf
        for x, u in zip(self.x, self.u):
            worst = min(worst, float(np.min(rows.b - tight - rows.A @ np.concatenate([u, x]))))
        return worst

    def window(self, t0, Ts, N):
        """Reference states and inputs at ``t0 + k Ts`` for ``k = 0..N``."""
        xs, us = zip(*(self.at(t0 + k * Ts) for k in range(N + 1)))
        return np.array(xs), np.array(us)

    def sampled(self):
        """Same samples without the analytic evaluator."""
        return ReferenceTrajectory(self.times, self.x, self.u, self.xdot, exact=None, meta=self.meta)

    def to_dict(self):
        return {"times": self.times.tolist(), "x": self.x.tolist(), "u": self.u.tolist(),
                "xdot": self.xdot.tolist(), "meta": self.meta}

    @classmethod
    def from_dict(cls, d):
        return cls(d["times"], d["x"], d["u"], d["xdot"], meta=d.get("meta"))


def _from_exact(exact, duration, dt, meta, constraints=None):
    n = int(round(duration / dt))
    times = np.linspace(0.0, n * dt, n + 1)
    xs, us, ds = zip(*(exact(t) for t in times))
    ref = ReferenceTrajectory(times, np.array(xs), np.array(us), np.array(ds), exact=exact, meta=meta)
    if constraints is not None:
        rows, tightening = constraints
        if ref.min_margin(rows, tightening) < 0:
            raise ConfigurationError("reference violates the supplied tightened constraints")
    return ref


def rest_to_rest_reference(model: SystemModel, start, goal, T, duration=None, dt=0.05, constraints=None):
    """Cubic rest-to-rest position profile for the planar double integrator.

    Acceleration is affine in time on ``[0, T]`` and zero afterwards; the bias
    disturbance is cancelled by the reference input.
    """
    if model.name != "double_integrator_2d":
        raise ConfigurationError("rest_to_rest_reference needs the planar double integrator")
    p0, p1 = _vec(start, 2), _vec(goal, 2)
    dp = p1 - p0
    bias = (model.E @ model.w_bias)[2:]
    duration = T if duration is None else duration

    def exact(t):
        if t <= 0.0:
            s, sd, sdd = 0.0, 0.0, 6.0 / T**2
        elif t > T:
            s, sd, sdd = 1.0, 0.0, 0.0
        else:
            tau = t / T
            s = 3 * tau**2 - 2 * tau**3
            sd = (6 * tau - 6 * tau**2) / T
            sdd = (6 - 12 * tau) / T**2
        p, v, a = p0 + s * dp, sd * dp, sdd * dp
        x = np.concatenate([p, v])
        u = a - bias
        return x, u, np.concatenate([v, a])

    meta = {"kind": "rest_to_rest", "start": p0.tolist(), "goal": p1.tolist(), "T": T, "duration": duration, "dt": dt}
    return _from_exact(exact, duration, dt, meta, constraints)


def circle_reference(model: SystemModel, radius, omega, duration, dt=0.05, center=(0.0, 0.0), phase=0.0, constraints=None):
    """Constant-speed circle for the unicycle (counter-clockwise for ``omega > 0``)."""
    if model.name != "unicycle":
        raise ConfigurationError("circle_reference needs the unicycle model")
    if np.any(model.w_bias != 0):
        raise ConfigurationError("circle_reference assumes a zero bias disturbance")
    cx, cy = center

    def exact(t):
        ang = omega * t + phase
        x = np.array([cx + radius * math.cos(ang), cy + radius * math.sin(ang), ang + math.copysign(math.pi / 2, omega)])
        u = np.array([radius * abs(omega), omega])
        xdot = np.array([-radius * omega * math.sin(ang), radius * omega * math.cos(ang), omega])
        return x, u, xdot

    meta = {"kind": "circle", "radius": radius, "omega": omega, "duration": duration, "dt": dt,
            "center": list(center), "phase": phase}
    return _from_exact(exact, duration, dt, meta, constraints)


def constant_reference(model: SystemModel, x_ref, duration, dt=0.05, constraints=None):
    """Equilibrium reference; the input cancels the bias where the model allows it."""
    x_ref = _vec(x_ref, model.n_x)
    # solve f(x,u) + E w^b = 0 for u by least squares on the input Jacobian
    _, B = model.jac(x_ref, np.zeros(model.n_u))
    resid = np.asarray(model.f(x_ref, np.zeros(model.n_u))) + model.bias_drift
    u_ref = -np.linalg.lstsq(B, resid, rcond=None)[0]

    def exact(t):
        return x_ref.copy(), u_ref.copy(), np.zeros(model.n_x)

    meta = {"kind": "constant", "x": x_ref.tolist(), "duration": duration, "dt": dt}
    return _from_exact(exact, duration, dt, meta, constraints)


def reference_from_config(model: SystemModel, cfg) -> ReferenceTrajectory:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == "rest_to_rest":
        return rest_to_rest_reference(model, cfg["start"], cfg["goal"], cfg["T"], cfg.get("duration"), cfg.get("dt", 0.05))
    if kind == "circle":
        return circle_reference(model, cfg["radius"], cfg["omega"], cfg["duration"], cfg.get("dt", 0.05),
                                tuple(cfg.get("center", (0.0, 0.0))), cfg.get("phase", 0.0))
    if kind == "constant":
        return constant_reference(model, cfg["x"], cfg["duration"], cfg.get("dt", 0.05))
    if kind == "samples":
        return ReferenceTrajectory.from_dict(cfg)
    raise ConfigurationError(f"unknown reference kind {kind!r}")
