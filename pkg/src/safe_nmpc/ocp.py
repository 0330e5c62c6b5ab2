"""Receding-horizon optimal control problems by direct multiple shooting.

Decision vector layout: ``[z_0, v_0, z_1, v_1, ..., z_{N-1}, v_{N-1}, z_N (, sigma)]``.
Inputs are piecewise constant; the stage cost is integrated per interval with the
trapezoidal rule on node values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import BuildError, ConfigurationError
from .model import ObstacleSchedule, Polytope, ReferenceTrajectory, SystemModel, rk4, shooting_flow
from .tube import empty_row_pairs, feedback_kappa, tube_size

VARIANTS = ("tmpc", "rmpc", "rompc")


# ---------------------------------------------------------------- problem data

@dataclass(frozen=True)
class OcpOptions:
    tol: float = 1e-6
    max_iter: int = 40
    defect_tol: float = 1e-8
    substeps: int = 4
    qp_tol: float = 1e-10
    qp_max_iter: int = 80
    soft_obstacle_penalty: Optional[float] = None


@dataclass
class OcpProblem:
    variant: str
    model: SystemModel
    N: int
    Ts: float
    t0: float
    x0: np.ndarray
    xr: np.ndarray  # (N+1, n_x)
    ur: np.ndarray  # (N+1, n_u)
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    term_metric: np.ndarray
    term_radius: float
    alpha: float
    s_T: float
    epsilon: float
    stage_rows: list  # N polytopes over [v_k; z_k]
    terminal_rows: Polytope  # state rows at node N
    obstacle_rows: list  # per node, stacked rows of the adjoining stages in position space (or None)
    tube: np.ndarray  # s at node times
    substeps: int = 4

    @property
    def T(self):
        return self.N * self.Ts

    @property
    def n_x(self):
        return self.model.n_x

    @property
    def n_u(self):
        return self.model.n_u

    @property
    def n_w(self):
        return self.N * (self.n_x + self.n_u) + self.n_x

    def iz(self, k):
        o = k * (self.n_x + self.n_u)
        return slice(o, o + self.n_x)

    def iv(self, k):
        o = k * (self.n_x + self.n_u) + self.n_x
        return slice(o, o + self.n_u)

    def pack(self, z, v):
        w = np.zeros(self.n_w)
        for k in range(self.N + 1):
            w[self.iz(k)] = z[k]
        for k in range(self.N):
            w[self.iv(k)] = v[k]
        return w

    def unpack(self, w):
        z = np.array([w[self.iz(k)] for k in range(self.N + 1)])
        v = np.array([w[self.iv(k)] for k in range(self.N)])
        return z, v

    def cold_start(self):
        return self.pack(np.vstack([self.x0[None, :], self.xr[1:]]), self.ur[:-1])


@dataclass
class OcpSolution:
    z: np.ndarray
    v: np.ndarray
    objective: float
    kkt: float
    margins: dict
    status: str
    iterations: int = 0
    construction: str = "piecewise"  # or "feedback" for candidates built with continuous feedback
    binding: tuple = ()
    soft_slack: float = 0.0
    t0: float = 0.0

    @property
    def ok(self):
        return self.status in ("optimal", "feasible_suboptimal")


# ---------------------------------------------------------------- building

def tube_profile(artifact, N, Ts):
    if artifact.variant == "tmpc":
        return np.zeros(N + 1)
    return np.atleast_1d(tube_size(artifact.rho, artifact.wbar, Ts * np.arange(N + 1)))


def stage_tightening(artifact, s):
    """Per-row offsets subtracted from the system rows at tube size ``s``."""
    if artifact.variant == "tmpc":
        return np.zeros(artifact.rows.n_rows)
    t = artifact.c_s * s
    if artifact.variant == "rompc":
        t = t + artifact.c_s_o * artifact.epsilon
    return t


def obstacle_tightening(artifact, s):
    if artifact.variant == "tmpc":
        return 0.0
    if artifact.variant == "rompc":
        return artifact.c_o * (s + artifact.epsilon)
    return artifact.c_o * s


def build_ocp(variant, model: SystemModel, artifact, reference: ReferenceTrajectory,
              obstacles: Optional[ObstacleSchedule], x0, N, Ts, t0=0.0, substeps=4) -> OcpProblem:
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    if artifact.variant != variant:
        raise ConfigurationError(f"artifact is {artifact.variant}, problem is {variant}")
    if N < 1 or Ts <= 0:
        raise ConfigurationError("need N >= 1 and Ts > 0")
    if obstacles is not None and len(obstacles) < N:
        raise ConfigurationError(f"obstacle schedule has {len(obstacles)} stages, need {N}")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n_x,):
        raise ConfigurationError("initial state has the wrong dimension")
    xr, ur = reference.window(t0, Ts, N)
    s = tube_profile(artifact, N, Ts)
    eps = artifact.epsilon if variant == "rompc" else 0.0
    rows = artifact.rows
    n_u = model.n_u
    stage_rows = []
    for k in range(N):
        poly = Polytope(rows.A.copy(), rows.b - stage_tightening(artifact, s[k]))
        empty = empty_row_pairs(poly)
        if empty:
            raise BuildError(f"tightened system rows are empty at stage {k}", stage=k, row=empty[0][0])
        stage_rows.append(poly)
    state_only = np.all(rows.A[:, :n_u] == 0.0, axis=1)
    tN = stage_tightening(artifact, s[N])
    terminal_rows = Polytope(rows.A[state_only][:, n_u:].copy(), (rows.b - tN)[state_only])
    empty = empty_row_pairs(terminal_rows)
    if empty:
        raise BuildError(f"tightened state rows are empty at stage {N}", stage=N, row=empty[0][0])
    obstacle_rows = []
    for k in range(N + 1):
        if obstacles is None:
            obstacle_rows.append(None)
            continue
        # stage j holds on the closed interval [j Ts, (j+1) Ts], so node k sees stages k-1 and k
        parts = [obstacles[j] for j in (k - 1, k) if 0 <= j < N]
        off = obstacle_tightening(artifact, s[k])
        poly = Polytope(np.vstack([p.A for p in parts]), np.concatenate([p.b for p in parts]) - off)
        empty = empty_row_pairs(poly)
        if empty:
            raise BuildError(f"tightened obstacle region is empty at stage {k}", stage=k, row=empty[0][0])
        obstacle_rows.append(poly)
    if variant == "tmpc":
        metric, radius = artifact.P, artifact.alpha
    else:
        metric, radius = artifact.Pdelta, artifact.alpha - s[N] - eps
    if radius < 0:
        raise BuildError(f"terminal radius alpha - s_T - eps = {radius:.3g} is negative", stage=N, row="terminal")
    return OcpProblem(variant=variant, model=model, N=int(N), Ts=float(Ts), t0=float(t0), x0=x0, xr=xr, ur=ur,
                      Q=artifact.Q, R=artifact.R, P=artifact.P, term_metric=metric, term_radius=float(radius),
                      alpha=artifact.alpha, s_T=float(s[N]), epsilon=eps, stage_rows=stage_rows,
                      terminal_rows=terminal_rows, obstacle_rows=obstacle_rows, tube=s, substeps=int(substeps))


# ---------------------------------------------------------------- objective

def objective_value(problem: OcpProblem, z, v):
    Q, R, P, Ts = problem.Q, problem.R, problem.P, problem.Ts
    J = 0.0
    for k in range(problem.N):
        a = z[k] - problem.xr[k]
        b = z[k + 1] - problem.xr[k + 1]
        ua = v[k] - problem.ur[k]
        ub = v[k] - problem.ur[k + 1]
        J += 0.5 * Ts * (a @ Q @ a + ua @ R @ ua + b @ Q @ b + ub @ R @ ub)
    e = z[-1] - problem.xr[-1]
    return float(J + e @ P @ e)


def stage_cost_integral(problem: OcpProblem, z, v, k=0):
    """Trapezoidal stage cost of interval ``k``."""
    a = z[k] - problem.xr[k]
    b = z[k + 1] - problem.xr[k + 1]
    ua = v[k] - problem.ur[k]
    ub = v[k] - problem.ur[k + 1]
    Q, R = problem.Q, problem.R
    return float(0.5 * problem.Ts * (a @ Q @ a + ua @ R @ ua + b @ Q @ b + ub @ R @ ub))


def _quadratic_cost(problem: OcpProblem):
    """``f(w) = 1/2 w^T H w + g^T w + c`` for the tracking objective."""
    n = problem.n_w
    H = np.zeros((n, n))
    g = np.zeros(n)
    Q, R, P, Ts = problem.Q, problem.R, problem.P, problem.Ts

    def add(sl, W, ref):
        H[sl, sl] += 2.0 * W
        g[sl] -= 2.0 * W @ ref

    for k in range(problem.N):
        add(problem.iz(k), 0.5 * Ts * Q, problem.xr[k])
        add(problem.iz(k + 1), 0.5 * Ts * Q, problem.xr[k + 1])
        add(problem.iv(k), 0.5 * Ts * R, problem.ur[k])
        add(problem.iv(k), 0.5 * Ts * R, problem.ur[k + 1])
    add(problem.iz(problem.N), P, problem.xr[-1])
    return H, g


# ---------------------------------------------------------------- constraints

@dataclass
class _Constraints:
    G: np.ndarray
    h: np.ndarray
    labels: list
    soft_cols: np.ndarray  # rows relaxed by the soft slack


def _linear_rows(problem: OcpProblem, n_cols, soft):
    """Stage, terminal-state and obstacle rows as ``G w <= h``."""
    rows, rhs, labels, soft_rows = [], [], [], []
    M = problem.model.M
    for k in range(problem.N):
        poly = problem.stage_rows[k]
        Au, Ax = poly.A[:, :problem.n_u], poly.A[:, problem.n_u:]
        for j in range(poly.n_rows):
            r = np.zeros(n_cols)
            r[problem.iv(k)] = Au[j]
            r[problem.iz(k)] = Ax[j]
            rows.append(r)
            rhs.append(poly.b[j])
            labels.append(("system", k, j))
            soft_rows.append(False)
    for j in range(problem.terminal_rows.n_rows):
        r = np.zeros(n_cols)
        r[problem.iz(problem.N)] = problem.terminal_rows.A[j]
        rows.append(r)
        rhs.append(problem.terminal_rows.b[j])
        labels.append(("system", problem.N, j))
        soft_rows.append(False)
    for k, poly in enumerate(problem.obstacle_rows):
        if poly is None:
            continue
        OM = poly.A @ M
        for j in range(poly.n_rows):
            r = np.zeros(n_cols)
            r[problem.iz(k)] = OM[j]
            if soft:
                r[-1] = -1.0
            rows.append(r)
            rhs.append(poly.b[j])
            labels.append(("obstacle", k, j))
            soft_rows.append(soft)
    if soft:
        r = np.zeros(n_cols)
        r[-1] = -1.0
        rows.append(r)
        rhs.append(0.0)
        labels.append(("slack", 0, 0))
        soft_rows.append(False)
    G = np.array(rows) if rows else np.zeros((0, n_cols))
    return _Constraints(G, np.array(rhs, dtype=float), labels, np.array(soft_rows, dtype=bool))


def _terminal_value(problem, zN):
    e = zN - problem.xr[-1]
    return float(e @ problem.term_metric @ e), 2.0 * problem.term_metric @ e


def _defects(problem, w, with_sens=False, substeps=None):
    nx, nu = problem.n_x, problem.n_u
    subs = substeps or problem.substeps
    c = np.zeros((problem.N + 1) * nx)
    c[:nx] = w[problem.iz(0)] - problem.x0
    J = np.zeros(((problem.N + 1) * nx, w.shape[0])) if with_sens else None
    if with_sens:
        J[:nx, problem.iz(0)] = np.eye(nx)
    for k in range(problem.N):
        zk, vk = w[problem.iz(k)], w[problem.iv(k)]
        r = slice((k + 1) * nx, (k + 2) * nx)
        if with_sens:
            phi, Ad, Bd = shooting_flow(problem.model, zk, vk, problem.Ts, subs, with_sensitivity=True)
            J[r, problem.iz(k)] = -Ad
            J[r, problem.iv(k)] = -Bd
            J[r, problem.iz(k + 1)] = np.eye(nx)
        else:
            phi = shooting_flow(problem.model, zk, vk, problem.Ts, subs)
        c[r] = w[problem.iz(k + 1)] - phi
    return c, J


# ---------------------------------------------------------------- dense QP interior point

@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str
    iterations: int


def solve_qp(H, g, A, b, G, h, tol=1e-10, max_iter=80):
    """Mehrotra predictor-corrector for ``min 1/2 x'Hx + g'x, Ax = b, Gx <= h`` (H positive definite)."""
    n, me, mi = H.shape[0], A.shape[0], G.shape[0]
    scale = 1.0 + max(np.max(np.abs(g)) if n else 0.0, np.max(np.abs(h)) if mi else 0.0,
                      np.max(np.abs(b)) if me else 0.0)
    x = np.zeros(n)
    y = np.zeros(me)
    if mi == 0:
        sol = _kkt_solve(H, A, -g, b)
        return QpResult(sol[0], sol[1], np.zeros(0), "optimal", 1)
    s = np.maximum(h - G @ x, 1.0)
    zl = np.ones(mi)
    it = 0
    for it in range(1, max_iter + 1):
        rd = H @ x + g + A.T @ y + G.T @ zl
        rp = A @ x - b
        ri = G @ x + s - h
        mu = float(s @ zl) / mi
        if (np.max(np.abs(rd)) <= tol * scale and (me == 0 or np.max(np.abs(rp)) <= tol * scale)
                and np.max(np.abs(ri)) <= tol * scale and mu <= tol * scale):
            return QpResult(x, y, zl, "optimal", it)
        if not np.all(np.isfinite(x)) or np.max(np.abs(zl)) > 1e14:
            return QpResult(x, y, zl, "infeasible", it)
        d = zl / s
        Hb = H + G.T @ (d[:, None] * G)
        try:
            fac = _KktFactor(Hb, A)
        except LinAlgError:
            return QpResult(x, y, zl, "infeasible", it)

        def direction(rc):
            r1 = -rd - G.T @ (d * ri - rc / s)
            dx, dy = fac.solve(r1, -rp)
            dz = d * (G @ dx + ri) - rc / s
            ds = -(rc + s * dz) / zl
            return dx, dy, dz, ds

        dx, dy, dz, ds = direction(s * zl)
        a_aff = min(_max_step(s, ds), _max_step(zl, dz))
        mu_aff = float((s + a_aff * ds) @ (zl + a_aff * dz)) / mi
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, dy, dz, ds = direction(s * zl + ds * dz - sigma * mu)
        a = 0.995 * min(_max_step(s, ds), _max_step(zl, dz))
        a = min(a, 1.0)
        x = x + a * dx
        y = y + a * dy
        zl = zl + a * dz
        s = s + a * ds
    return QpResult(x, y, zl, "max_iter", it)


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


class _KktFactor:
    """Factorization of ``[[H, A'], [A, 0]]`` by Cholesky of ``H`` and of the Schur complement."""

    def __init__(self, H, A):
        n = H.shape[0]
        reg = 1e-14 * max(1.0, float(np.max(np.abs(np.diag(H)))))
        self.cH = cho_factor(H + reg * np.eye(n))
        self.A = A
        if A.shape[0]:
            self.HiAt = cho_solve(self.cH, A.T)
            S = A @ self.HiAt
            self.cS = cho_factor(S + 1e-14 * max(1.0, float(np.max(np.abs(np.diag(S))))) * np.eye(S.shape[0]))

    def solve(self, r1, r2):
        if not self.A.shape[0]:
            return cho_solve(self.cH, r1), np.zeros(0)
        Hr = cho_solve(self.cH, r1)
        dy = cho_solve(self.cS, self.A @ Hr - r2)
        return Hr - self.HiAt @ dy, dy


def _kkt_solve(H, A, r1, r2):
    return _KktFactor(H, A).solve(r1, r2)


def _elastic_qp(H, g, A, b, G, h, penalty, tol, max_iter):
    """ℓ1-relaxed QP: every inequality gets a nonnegative slack priced at ``penalty``."""
    n, mi = H.shape[0], G.shape[0]
    He = np.zeros((n + mi, n + mi))
    He[:n, :n] = H
    He[n:, n:] = 1e-8 * np.eye(mi)
    ge = np.concatenate([g, penalty * np.ones(mi)])
    Ae = np.hstack([A, np.zeros((A.shape[0], mi))])
    Ge = np.block([[G, -np.eye(mi)], [np.zeros((mi, n)), -np.eye(mi)]])
    he = np.concatenate([h, np.zeros(mi)])
    res = solve_qp(He, ge, Ae, b, Ge, he, tol, max_iter)
    return QpResult(res.x[:n], res.y, res.z[:mi], res.status, res.iterations), res.x[n:]


# ---------------------------------------------------------------- SQP

def _evaluate(problem, w, cons, with_sens):
    ceq, Jeq = _defects(problem, w, with_sens)
    cin = cons.G @ w - cons.h
    V, dV = _terminal_value(problem, w[problem.iz(problem.N)])
    cterm = V - problem.term_radius ** 2
    cin = np.concatenate([cin, [cterm]])
    Jin = None
    if with_sens:
        row = np.zeros(w.shape[0])
        row[problem.iz(problem.N)] = dV
        Jin = np.vstack([cons.G, row[None, :]])
    return ceq, Jeq, cin, Jin


def solve_ocp(problem: OcpProblem, warm_start: Optional[OcpSolution] = None,
              options: Optional[OcpOptions] = None) -> OcpSolution:
    """Sequential quadratic programming with a Gauss-Newton Hessian and an ℓ1 merit line search."""
    opt = options or OcpOptions()
    soft = opt.soft_obstacle_penalty is not None and any(p is not None for p in problem.obstacle_rows)
    H, g = _quadratic_cost(problem)
    n = problem.n_w + (1 if soft else 0)
    if soft:
        H = np.pad(H, ((0, 1), (0, 1)))
        H[-1, -1] = 1e-8
        g = np.append(g, opt.soft_obstacle_penalty)
    cons = _linear_rows(problem, n, soft)
    labels = cons.labels + [("terminal", problem.N, 0)]

    if warm_start is not None:
        w = problem.pack(warm_start.z, warm_start.v)
        w[problem.iz(0)] = problem.x0
    else:
        w = problem.cold_start()
    if soft:
        w = np.append(w, 0.0)

    def f(wv):
        return 0.5 * wv @ H @ wv + g @ wv

    def merit(wv, mu):
        ceq, _, cin, _ = _evaluate(problem, wv, cons, False)
        return f(wv) + mu * (np.sum(np.abs(ceq)) + np.sum(np.maximum(cin, 0.0)))

    mu_m = 10.0
    status, kkt, it = "max_iter", math.inf, 0
    binding = ()
    for it in range(1, opt.max_iter + 1):
        ceq, Jeq, cin, Jin = _evaluate(problem, w, cons, True)
        grad = H @ w + g
        qp = solve_qp(H, grad, Jeq, -ceq, Jin, -cin, opt.qp_tol, opt.qp_max_iter)
        elastic = None
        if qp.status != "optimal":
            penalty = 1e3 * (1.0 + np.max(np.abs(grad)))
            qp, elastic = _elastic_qp(H, grad, Jeq, -ceq, Jin, -cin, penalty, opt.qp_tol, opt.qp_max_iter)
            mu_m = max(mu_m, 1.1 * penalty)
        d = qp.x
        lam_scale = max(np.max(np.abs(qp.y)) if qp.y.size else 0.0, np.max(qp.z) if qp.z.size else 0.0)
        stat = np.max(np.abs(H @ d)) / (1.0 + np.max(np.abs(grad)))
        prim = max(np.max(np.abs(ceq)), float(np.max(np.maximum(cin, 0.0))) if cin.size else 0.0)
        comp = float(np.max(np.abs(qp.z * np.minimum(cin, 0.0)))) if cin.size else 0.0
        kkt = max(stat, prim, comp / (1.0 + lam_scale))
        if kkt <= opt.tol and np.max(np.abs(ceq)) <= opt.defect_tol and elastic is None:
            status = "optimal"
            break
        if elastic is not None and np.max(np.abs(d)) <= 1e-12 and np.max(elastic) > opt.tol:
            status = "infeasible"
            binding = tuple(labels[i] for i in np.flatnonzero(elastic > opt.tol))
            break
        mu_m = max(mu_m, 1.1 * lam_scale + 1.0)
        phi0 = merit(w, mu_m)
        lin_viol = np.sum(np.abs(ceq)) + np.sum(np.maximum(cin, 0.0))
        D = grad @ d - mu_m * lin_viol
        if elastic is not None:
            D = min(D, -1e-12)
        a = 1.0
        while a > 1e-10:
            if merit(w + a * d, mu_m) <= phi0 + 1e-4 * a * D:
                break
            a *= 0.5
        else:
            if elastic is not None and np.max(elastic) > opt.tol:
                status = "infeasible"
                binding = tuple(labels[i] for i in np.flatnonzero(elastic > opt.tol))
            elif prim <= opt.tol:
                status = "feasible_suboptimal"
            break
        w = w + a * d
    z, v = problem.unpack(w[:problem.n_w])
    sol = OcpSolution(z=z, v=v, objective=objective_value(problem, z, v), kkt=float(kkt), margins={},
                      status=status, iterations=it, binding=binding,
                      soft_slack=float(w[-1]) if soft else 0.0, t0=problem.t0)
    sol.margins = evaluate_feasibility(sol, problem)
    if sol.status == "max_iter" and sol.margins["worst"] >= -1e-6:
        sol.status = "feasible_suboptimal"
    if sol.status == "optimal" and soft and sol.soft_slack > 1e-9:
        sol.status = "feasible_suboptimal"
    return sol


# ---------------------------------------------------------------- feasibility report

def evaluate_feasibility(solution: OcpSolution, problem: OcpProblem, tol=1e-6) -> dict:
    """Minimum margin per family; negative means violated. Candidates built with
    continuous feedback have no piecewise shooting defect, so that family is omitted."""
    z, v = solution.z, solution.v
    if z.shape != (problem.N + 1, problem.n_x) or v.shape != (problem.N, problem.n_u):
        raise ConfigurationError("solution dimensions do not match the problem")
    out = {}
    out["initial"] = -float(np.max(np.abs(z[0] - problem.x0)))
    if solution.construction == "piecewise":
        w = problem.pack(z, v)
        c, _ = _defects(problem, w)
        out["defect"] = -float(np.max(np.abs(c[problem.n_x:]))) if problem.N else 0.0
    sysm = math.inf
    for k in range(problem.N):
        sysm = min(sysm, float(np.min(problem.stage_rows[k].margins(np.concatenate([v[k], z[k]])))))
    if problem.terminal_rows.n_rows:
        sysm = min(sysm, float(np.min(problem.terminal_rows.margins(z[-1]))))
    out["system"] = sysm
    obs = math.inf
    for k, poly in enumerate(problem.obstacle_rows):
        if poly is not None:
            obs = min(obs, float(np.min(poly.margins(problem.model.position(z[k])))))
    out["obstacle"] = obs if math.isfinite(obs) else None
    V, _ = _terminal_value(problem, z[-1])
    out["terminal"] = problem.term_radius - math.sqrt(max(V, 0.0))
    vals = [m for m in out.values() if m is not None]
    out["worst"] = float(min(vals))
    out["flagged"] = sorted(k for k, m in out.items() if m is not None and k != "worst" and m < -tol)
    return out


# ---------------------------------------------------------------- candidates

def _nominal_rhs(model, z, u):
    return np.asarray(model.f(z, u), dtype=float) + model.bias_drift


def plan_trajectory(model, z0, v, Ts, substeps):
    """Fine samples of the nominal plan over one interval with input ``v`` held."""
    return rk4(lambda t, y: _nominal_rhs(model, y, v), np.asarray(z0, float), 0.0, Ts, substeps)


def make_candidate(prev: OcpSolution, problem: OcpProblem, artifact, reference: ReferenceTrajectory,
                   new_initial_state, substeps=10) -> OcpSolution:
    """Shifted plan for the next sampling instant.

    TMPC shifts the previous optimum by one interval. RMPC and ROMPC start from the new
    (measured or estimated) state and track the previous plan with ``kappa`` in
    continuous time. All variants close the horizon with the terminal law around the
    reference.
    """
    if not prev.ok:
        raise ConfigurationError(f"cannot shift a plan with status {prev.status}")
    model, N, Ts = problem.model, problem.N, problem.Ts
    t1 = problem.t0 + Ts
    nx = model.n_x
    zc = np.zeros((N + 1, nx))
    vc = np.zeros((N, model.n_u))
    if problem.variant == "tmpc":
        zc[:N] = prev.z[1:]
        vc[:N - 1] = prev.v[1:]
    else:
        zc[0] = np.asarray(new_initial_state, dtype=float)
        for k in range(N - 1):
            vk = prev.v[k + 1]

            def rhs(t, y, vk=vk):
                zt, zs = y[:nx], y[nx:]
                u = feedback_kappa(artifact, zt, zs, vk)
                return np.concatenate([_nominal_rhs(model, zt, u), _nominal_rhs(model, zs, vk)])

            vc[k] = feedback_kappa(artifact, zc[k], prev.z[k + 1], vk)
            y = rk4(rhs, np.concatenate([zc[k], prev.z[k + 1]]), 0.0, Ts, substeps)
            zc[k + 1] = y[:nx]

    # tail on the last interval: terminal law around the reference
    t_tail = t1 + (N - 1) * Ts

    def kf(t, zt):
        xr, ur = reference.at(t_tail + t)
        return feedback_kappa(artifact, zt, xr, ur)

    vc[N - 1] = kf(0.0, zc[N - 1])
    zc[N] = rk4(lambda t, y: _nominal_rhs(model, y, kf(t, y)), zc[N - 1], 0.0, Ts, substeps)
    return OcpSolution(z=zc, v=vc, objective=math.nan, kkt=math.nan, margins={}, status="feasible_suboptimal",
                       construction="feedback", t0=t1)


def score_candidate(candidate: OcpSolution, problem: OcpProblem, tol=1e-6) -> OcpSolution:
    """Attach the objective and margins of ``candidate`` under the next problem."""
    candidate.objective = objective_value(problem, candidate.z, candidate.v)
    candidate.margins = evaluate_feasibility(candidate, problem, tol)
    if candidate.margins["flagged"]:
        candidate.status = "infeasible"
    return candidate
