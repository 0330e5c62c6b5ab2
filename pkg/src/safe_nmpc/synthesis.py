"""Offline design: terminal ingredients, contraction metrics with tubes, observer-coupled
designs, and the serialized DesignArtifact."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import conic
from .conic import NSD, PSD, AffineExpr, DecisionLayout, SdpProblem, bmat, solve_sdp
from .errors import ArtifactError, ConfigurationError, SynthesisError
from .model import BoxSet, Polytope, SystemModel, grid_domain, model_from_config
from .tube import GainTable, mean_gain

SCHEMA = 1
LMI_TOL = 1e-7
VALIDATION_TOL = 1e-6


# ---------------------------------------------------------------- small linear algebra

def _sym_pow(P, power):
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    if np.min(w) <= 0:
        raise ConfigurationError("matrix is not positive definite")
    return (V * w ** power) @ V.T


def inv_sqrt(P):
    return _sym_pow(np.asarray(P, dtype=float), -0.5)


def sqrtm_pd(P):
    return _sym_pow(np.asarray(P, dtype=float), 0.5)


def weighted_norm(P, v):
    v = np.asarray(v, dtype=float)
    return math.sqrt(max(float(v @ P @ v), 0.0))


def _as_matrix(v, n, name):
    a = np.asarray(v, dtype=float)
    if a.ndim == 1:
        a = np.diag(a)
    if a.shape != (n, n):
        raise ConfigurationError(f"{name} must be {n}x{n}")
    if np.max(np.abs(a - a.T)) > 1e-12 or np.min(np.linalg.eigvalsh(a)) <= 0:
        raise ConfigurationError(f"{name} must be symmetric positive definite")
    return a


# ---------------------------------------------------------------- grid bookkeeping

@dataclass(frozen=True)
class SynthesisGrid:
    """Grid points over ``[x; u]`` plus the state coordinates that index the gain table."""

    points: tuple
    gain_dims: tuple
    axes: tuple

    @classmethod
    def from_model(cls, model: SystemModel, points_per_dim: int):
        pts = grid_domain(model.grid_box, points_per_dim, model.nonlinear_dims, model.linear_dims)
        return cls.from_points(model, pts)

    @classmethod
    def from_points(cls, model, pts):
        pts = tuple(np.asarray(p, dtype=float) for p in pts)
        cand = sorted(d for d in set(model.nonlinear_dims) | set(model.linear_dims) if d < model.n_x)
        dims, axes = [], []
        for d in cand:
            vals = np.unique([p[d] for p in pts])
            if len(vals) > 1:
                dims.append(d)
                axes.append(vals)
        return cls(pts, tuple(dims), tuple(axes))

    def key(self, point):
        return tuple(int(np.searchsorted(ax, point[d])) for d, ax in zip(self.gain_dims, self.axes))

    def keys(self):
        return sorted({self.key(p) for p in self.points})

    def table_shape(self):
        return tuple(len(a) for a in self.axes)


def _jac_at(model, zeta):
    return model.jac(zeta[:model.n_x], zeta[model.n_x:])


def _split_rows(rows: Polytope, n_u):
    return rows.A[:, :n_u], rows.A[:, n_u:]


def default_cost_weights(model: SystemModel, rows: Polytope):
    """Inverse squared constraint interval per row (box rows come in +/- pairs)."""
    w = np.zeros(rows.n_rows)
    for j in range(rows.n_rows):
        a = rows.A[j]
        partner = [k for k in range(rows.n_rows) if np.array_equal(rows.A[k], -a)]
        if partner:
            width = rows.b[j] + rows.b[partner[0]]
            w[j] = 1.0 / width ** 2 if width > 0 else 1.0
        else:
            w[j] = 1.0
    return w


# ---------------------------------------------------------------- artifact

@dataclass
class DesignArtifact:
    variant: str
    model_config: dict
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    alpha: float
    rows: Polytope
    c_s: np.ndarray
    c_o: float
    K: Optional[np.ndarray] = None
    Pdelta: Optional[np.ndarray] = None
    gain_table: Optional[GainTable] = None
    rho: float = 0.0
    wbar: float = 0.0
    c_s_o: Optional[np.ndarray] = None
    L: Optional[np.ndarray] = None
    epsilon: float = 0.0
    W: Optional[BoxSet] = None
    H: Optional[BoxSet] = None
    multipliers: dict = field(default_factory=dict)
    validation: dict = field(default_factory=dict)
    grid_points: int = 2
    n_input_rows: int = 0
    meta: dict = field(default_factory=dict)

    def kappa(self, x, z, v):
        from .tube import feedback_kappa

        return feedback_kappa(self, x, z, v)

    @property
    def metric(self):
        """Matrix defining the terminal-set distance (``P`` for TMPC, ``P^delta`` otherwise)."""
        return self.P if self.variant == "tmpc" else self.Pdelta

    @property
    def s_bar(self):
        return self.wbar / self.rho if self.rho > 0 else 0.0

    def model(self) -> SystemModel:
        return model_from_config(self.model_config)

    # -------- serialization

    def to_dict(self):
        def mat(a):
            if a is None:
                return None
            a = np.atleast_2d(np.asarray(a, dtype=float))
            return {"rows": a.shape[0], "cols": a.shape[1], "data": a.reshape(-1).tolist()}

        return {
            "schema": SCHEMA,
            "variant": self.variant,
            "model": self.model_config,
            "Q": mat(self.Q), "R": mat(self.R), "P": mat(self.P), "K": mat(self.K),
            "Pdelta": mat(self.Pdelta),
            "gain_table": None if self.gain_table is None else self.gain_table.to_dict(),
            "rho": self.rho, "wbar": self.wbar, "alpha": self.alpha, "epsilon": self.epsilon,
            "rows": self.rows.to_dict(),
            "c_s": list(map(float, self.c_s)),
            "c_s_o": None if self.c_s_o is None else list(map(float, self.c_s_o)),
            "c_o": self.c_o,
            "L": mat(self.L),
            "W": None if self.W is None else self.W.to_dict(),
            "H": None if self.H is None else self.H.to_dict(),
            "multipliers": self.multipliers,
            "validation": self.validation,
            "grid_points": self.grid_points,
            "n_input_rows": self.n_input_rows,
            "meta": self.meta,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_dict(cls, d, check=True):
        def mat(m):
            if m is None:
                return None
            return np.asarray(m["data"], dtype=float).reshape(m["rows"], m["cols"])

        try:
            if d.get("schema") != SCHEMA:
                raise ArtifactError(f"unsupported artifact schema {d.get('schema')!r}", invariant="schema")
            art = cls(
                variant=d["variant"], model_config=d["model"], Q=mat(d["Q"]), R=mat(d["R"]), P=mat(d["P"]),
                K=mat(d.get("K")), Pdelta=mat(d.get("Pdelta")),
                gain_table=None if d.get("gain_table") is None else GainTable.from_dict(d["gain_table"]),
                rho=float(d["rho"]), wbar=float(d["wbar"]), alpha=float(d["alpha"]), epsilon=float(d["epsilon"]),
                rows=Polytope.from_dict(d["rows"]), c_s=np.asarray(d["c_s"], dtype=float),
                c_s_o=None if d.get("c_s_o") is None else np.asarray(d["c_s_o"], dtype=float),
                c_o=float(d["c_o"]), L=mat(d.get("L")),
                W=None if d.get("W") is None else BoxSet.from_dict(d["W"]),
                H=None if d.get("H") is None else BoxSet.from_dict(d["H"]),
                multipliers=dict(d.get("multipliers", {})), validation=dict(d.get("validation", {})),
                grid_points=int(d.get("grid_points", 2)), n_input_rows=int(d.get("n_input_rows", 0)),
                meta=dict(d.get("meta", {})),
            )
        except ArtifactError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ArtifactError(f"malformed artifact: {exc}", invariant="structure") from None
        if check:
            art.check_invariants()
        return art

    @classmethod
    def load(cls, path, check=True):
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"artifact is not valid JSON: {exc}", invariant="structure") from None
        return cls.from_dict(d, check=check)

    def check_invariants(self):
        if self.variant not in ("tmpc", "rmpc", "rompc"):
            raise ArtifactError(f"unknown variant {self.variant!r}", invariant="variant")
        for name in ("P", "Pdelta"):
            m = getattr(self, name)
            if m is None:
                if name == "P" or self.variant != "tmpc":
                    raise ArtifactError(f"{name} missing", invariant=f"{name}_pd")
                continue
            if np.max(np.abs(m - m.T)) > 1e-9 or np.min(np.linalg.eigvalsh(0.5 * (m + m.T))) <= 0:
                raise ArtifactError(f"{name} is not symmetric positive definite", invariant=f"{name}_pd")
        if self.variant == "tmpc" and self.K is None:
            raise ArtifactError("TMPC artifact without K", invariant="K")
        if self.variant != "tmpc":
            if self.gain_table is None:
                raise ArtifactError("robust artifact without gain table", invariant="gain_table")
            if not self.rho > 0:
                raise ArtifactError("rho must be positive", invariant="rho")
        if self.alpha < 0 or self.wbar < 0 or self.c_o < 0 or np.any(self.c_s < 0):
            raise ArtifactError("negative scalar design constant", invariant="nonnegative")
        if self.variant == "rmpc" and self.alpha < self.wbar / self.rho - 1e-12:
            raise ArtifactError("alpha below wbar/rho", invariant="alpha_bound")
        if self.variant == "rompc":
            if self.L is None or self.c_s_o is None:
                raise ArtifactError("ROMPC artifact without observer gain", invariant="L")
            if self.alpha < self.wbar / self.rho + self.epsilon - 1e-12:
                raise ArtifactError("alpha below wbar/rho + epsilon", invariant="alpha_bound")
            if np.any(self.c_s_o[:self.n_input_rows] != 0):
                raise ArtifactError("input rows carry observer tightening", invariant="c_s_o_inputs")
        for fam, res in self.validation.get("families", {}).items():
            if res > VALIDATION_TOL:
                raise ArtifactError(f"validation family {fam} residual {res:.3g}", invariant=f"validation:{fam}")


# ---------------------------------------------------------------- TMPC

def _tracking_block(A, B, X, Y, Qh, Rh):
    n_x, n_u = B.shape
    AXBY = A @ X + B @ Y
    return bmat([
        [AXBY.sym(), (Qh @ X).T, (Rh @ Y).T],
        [Qh @ X, -np.eye(n_x), np.zeros((n_x, n_u))],
        [Rh @ Y, np.zeros((n_u, n_x)), -np.eye(n_u)],
    ])


def synth_tmpc_terminal(model: SystemModel, Q, R, epsilon_reg=0.0, grid=None, tol=LMI_TOL):
    """Constant ``(P, K)`` maximizing ``log det X`` subject to the tracking LMI on every grid point."""
    Q = _as_matrix(Q, model.n_x, "Q")
    R = _as_matrix(R, model.n_u, "R")
    grid = grid if grid is not None else SynthesisGrid.from_model(model, 2)
    if not grid.points:
        raise ConfigurationError("empty synthesis grid")
    Qh = sqrtm_pd(Q + epsilon_reg * np.eye(model.n_x))
    Rh = sqrtm_pd(R)
    lay = DecisionLayout()
    X = lay.sym("X", model.n_x)
    Y = lay.mat("Y", model.n_u, model.n_x)
    prob = SdpProblem(lay, [], logdet=[(1.0, X)])
    prob.x0 = lay.flatten({"X": np.eye(model.n_x), "Y": np.zeros((model.n_u, model.n_x))})
    for i, zeta in enumerate(grid.points):
        A, B = _jac_at(model, zeta)
        prob.add(_tracking_block(A, B, X, Y, Qh, Rh), NSD, f"tracking@{i}")
    sol = solve_sdp(prob, tol=tol)
    if sol.status not in ("optimal", "feasible"):
        raise SynthesisError(f"tracking SDP {sol.status}; first violated block {sol.worst_tag}", tag=sol.worst_tag)
    Xv, Yv = sol.values["X"], sol.values["Y"]
    P = np.linalg.inv(Xv)
    P = 0.5 * (P + P.T)
    return P, Yv @ P, sol


def compute_alpha_lp(P, K, reference_points, rows: Polytope):
    """Largest terminal scaling keeping ``u = u^r + K(x - x^r)`` inside ``rows`` over the reference points."""
    P = np.asarray(P, dtype=float)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    n_u = K.shape[0]
    Lu, Lx = _split_rows(rows, n_u)
    Pi = np.linalg.inv(P)
    coef = []
    for j in range(rows.n_rows):
        v = K.T @ Lu[j] + Lx[j]
        coef.append(math.sqrt(max(float(v @ Pi @ v), 0.0)))
    A, b = [], []
    for r in reference_points:
        r = np.asarray(r, dtype=float)
        slack = rows.b - rows.A @ r
        if np.any(slack < 0):
            j = int(np.argmin(slack))
            raise ConfigurationError(f"reference point violates row {j} (slack {slack[j]:.3g})")
        A.extend(coef)
        b.extend(slack)
    res = conic.solve_lp([1.0], np.array(A).reshape(-1, 1), np.array(b))
    if res.status == "unbounded":
        return math.inf
    return max(res.value, 0.0)


def compute_tightening_constants(P, gains, rows: Polytope, M):
    """Exact per-row Lipschitz constants under the metric ``P`` and the worst gain."""
    P = np.asarray(P, dtype=float)
    gains = [np.atleast_2d(np.asarray(K, dtype=float)) for K in (gains if isinstance(gains, (list, tuple)) else [gains])]
    n_u = gains[0].shape[0]
    Lu, Lx = _split_rows(rows, n_u)
    Pi = np.linalg.inv(P)
    c_s = np.zeros(rows.n_rows)
    for j in range(rows.n_rows):
        for K in gains:
            v = K.T @ Lu[j] + Lx[j]
            c_s[j] = max(c_s[j], math.sqrt(max(float(v @ Pi @ v), 0.0)))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    c_o = math.sqrt(max(float(np.max(np.linalg.eigvalsh(M @ Pi @ M.T))), 0.0))
    return c_s, c_o


# ---------------------------------------------------------------- robust (CCM) synthesis

def compute_wbar(Pdelta, E, W: BoxSet):
    Pdelta = np.asarray(Pdelta, dtype=float)
    E = np.atleast_2d(np.asarray(E, dtype=float))
    best = 0.0
    for w in W.vertices():
        val = weighted_norm(Pdelta, E @ w)
        if val > best:
            best = val
    return best


def worst_disturbance_vertex(Pdelta, E, W: BoxSet):
    """First vertex (lexicographic) attaining ``compute_wbar``."""
    verts = W.vertices()
    vals = [weighted_norm(Pdelta, np.atleast_2d(E) @ w) for w in verts]
    return verts[int(np.argmax(vals))]


def compute_wbar_o(Pdelta, L, C, F, H: BoxSet, epsilon):
    Pdelta = np.asarray(Pdelta, dtype=float)
    L = np.atleast_2d(np.asarray(L, dtype=float))
    LF = L @ np.atleast_2d(F)
    noise = max(weighted_norm(Pdelta, LF @ eta) for eta in H.vertices())
    S = sqrtm_pd(Pdelta) @ L @ np.atleast_2d(C) @ inv_sqrt(Pdelta)
    return noise + float(np.linalg.norm(S, 2)) * epsilon


class _CcmBuilder:
    """Shared decision variables and LMI families of the robust synthesis SDPs."""

    def __init__(self, model, grid, rows, cost_weights, obs_weight):
        self.model, self.grid, self.rows = model, grid, rows
        n_x, n_u = model.n_x, model.n_u
        self.lay = DecisionLayout()
        self.X = self.lay.sym("X", n_x)
        self.keys = grid.keys()
        self.Y = {k: self.lay.mat(f"Y{i}", n_u, n_x) for i, k in enumerate(self.keys)}
        self.c2 = [self.lay.scalar(f"c2_{j}") for j in range(rows.n_rows)]
        self.c2o = self.lay.scalar("c2o")
        self.weights = default_cost_weights(model, rows) if cost_weights is None else np.asarray(cost_weights, float)
        self.obs_weight = obs_weight
        self.prob = None

    def start(self, extra_sym):
        for name, n in extra_sym:
            setattr(self, name, self.lay.sym(name, n))
        self.prob = SdpProblem(self.lay, [])

    def objective(self, state_factor=1.0, n_input_rows=0):
        c = np.zeros(self.lay.size)
        for j in range(self.rows.n_rows):
            f = 1.0 if j < n_input_rows else state_factor
            c[self.lay.index(f"c2_{j}")] += f * self.weights[j]
        c[self.lay.index("c2o")] += state_factor * self.obs_weight
        self.prob.objective = c

    def closed_loop(self, zeta):
        A, B = _jac_at(self.model, zeta)
        return (A @ self.X + B @ self.Y[self.grid.key(zeta)]).sym(), A

    def add_contraction(self, rho):
        for i, z in enumerate(self.grid.points):
            S, _ = self.closed_loop(z)
            self.prob.add(S + 2.0 * rho * self.X, NSD, f"contraction@{i}")

    def add_lipschitz(self):
        n_u = self.model.n_u
        Lu, Lx = _split_rows(self.rows, n_u)
        for j in range(self.rows.n_rows):
            for i, k in enumerate(self.keys):
                row = Lu[j:j + 1] @ self.Y[k] + Lx[j:j + 1] @ self.X
                self.prob.add(bmat([[self.c2[j], row], [row.T, self.X]]), PSD, f"sys{j}@{i}")
        M = self.model.M
        n_p = M.shape[0]
        MX = M @ self.X
        self.prob.add(bmat([[_kron_scalar(self.c2o, np.eye(n_p)), MX], [MX.T, self.X]]), PSD, "obs")

    def add_vertex_bound(self, Vbar, vectors, tag):
        """``[[0, v],[v^T, 0]] <= Vbar`` with ``v`` placed in the first block column."""
        n = Vbar.shape[0]
        for k, v in enumerate(vectors):
            m = np.zeros((n, n))
            m[:len(v), n - 1] = v
            m[n - 1, :len(v)] = v
            self.prob.add(AffineExpr(m) - Vbar, NSD, f"{tag}@v{k}")

    def solve(self, tol, x0=None):
        if x0 is not None:
            self.prob.x0 = x0
        sol = solve_sdp(self.prob, tol=tol)
        if sol.status not in ("optimal", "feasible"):
            raise SynthesisError(f"robust synthesis SDP {sol.status}; first violated block {sol.worst_tag}",
                                 tag=sol.worst_tag)
        return sol

    def extract(self, sol):
        Xv = sol.values["X"]
        Pd = np.linalg.inv(Xv)
        Pd = 0.5 * (Pd + Pd.T)
        shape = self.grid.table_shape()
        n_u, n_x = self.model.n_u, self.model.n_x
        gains = np.zeros(shape + (n_u, n_x))
        for i, k in enumerate(self.keys):
            gains[k] = sol.values[f"Y{i}"] @ Pd
        table = GainTable(self.grid.gain_dims, self.grid.axes, gains if shape else gains.reshape(n_u, n_x))
        return Pd, table


def synth_ccm(model: SystemModel, rho, lam, grid: SynthesisGrid, W: BoxSet, rows: Optional[Polytope] = None,
              cost_weights=None, obs_weight=1.0, tol=LMI_TOL):
    """Constant metric and gridded gains satisfying contraction, split RPI and Lipschitz LMIs.

    Returns ``(Pdelta, gain_table, sdp_solution)``.
    """
    if rho <= 0:
        raise ConfigurationError("rho must be positive")
    if lam < 0:
        raise ConfigurationError("lambda must be nonnegative")
    rows = model.system_rows() if rows is None else rows
    n_x = model.n_x
    b = _CcmBuilder(model, grid, rows, cost_weights, obs_weight)
    b.start([("Wbar", n_x + 1)])
    b.objective()
    b.add_contraction(rho)
    Ew = [model.E @ w for w in W.vertices()]
    b.add_vertex_bound(b.Wbar, Ew, "wbar")
    for i, z in enumerate(grid.points):
        S, _ = b.closed_loop(z)
        core = bmat([[S + lam * b.X, np.zeros((n_x, 1))], [np.zeros((1, n_x)), -lam * np.ones((1, 1))]])
        b.prob.add(b.Wbar + core, NSD, f"rpi@{i}")
    b.add_lipschitz()
    sol = b.solve(tol)
    Pd, table = b.extract(sol)
    return Pd, table, sol


def synth_terminal_cost(model: SystemModel, gain_table: GainTable, Q, R, grid: SynthesisGrid, tol=LMI_TOL):
    """Minimum-trace ``P`` with ``(A+BK)^T P + P(A+BK) <= -Q - K^T R K`` on the grid."""
    Q = _as_matrix(Q, model.n_x, "Q")
    R = _as_matrix(R, model.n_u, "R")
    lay = DecisionLayout()
    P = lay.sym("P", model.n_x)
    prob = SdpProblem(lay, [], objective=lay.trace_objective("P"))
    for i, z in enumerate(grid.points):
        A, B = _jac_at(model, z)
        K = gain_table.at(z[:model.n_x])
        Acl = A + B @ K
        prob.add((P @ Acl).sym() + Q + K.T @ R @ K, NSD, f"terminal_cost@{i}")
    sol = solve_sdp(prob, tol=tol)
    if sol.status not in ("optimal", "feasible"):
        raise SynthesisError(f"terminal cost SDP {sol.status}; first violated block {sol.worst_tag}",
                             tag=sol.worst_tag)
    Pv = sol.values["P"]
    return 0.5 * (Pv + Pv.T), sol


def check_rompc_multipliers(multipliers, epsilon, delta=1.0):
    ld, lde = multipliers["lambda_delta"], multipliers["lambda_delta_eps"]
    if min(ld, lde, multipliers["lambda_eps"]) < 0:
        raise ConfigurationError("multipliers must be nonnegative")
    if ld * delta ** 2 < lde * epsilon ** 2:
        raise ConfigurationError(
            f"multiplier inequality violated: lambda_delta*delta^2 = {ld * delta ** 2:.6g} < "
            f"lambda_delta_eps*epsilon^2 = {lde * epsilon ** 2:.6g}")


def _rpi_delta_core(S, X, LC, ld, lde, eps, n_x, delta2=1.0):
    LCX = LC @ X
    z = np.zeros((n_x, 1))
    return bmat([
        [S + ld * X, LCX, z],
        [LCX.T, -lde * X, z],
        [z.T, z.T, (lde * eps ** 2 - ld * delta2) * np.ones((1, 1))],
    ])


def synth_rompc(model: SystemModel, L, rho, multipliers, epsilon, grid: SynthesisGrid, W: BoxSet, H: BoxSet,
                rows: Optional[Polytope] = None, cost_weights=None, obs_weight=1.0, tol=LMI_TOL):
    """Metric and gains for output feedback: contraction, split delta-RPI and eps-RPI, Lipschitz LMIs."""
    check_rompc_multipliers(multipliers, epsilon)
    if rho <= 0:
        raise ConfigurationError("rho must be positive")
    rows = model.system_rows() if rows is None else rows
    n_x, n_u = model.n_x, model.n_u
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if L.shape != (n_x, model.n_y):
        raise ConfigurationError(f"L must be {n_x}x{model.n_y}")
    LC, LF = L @ model.C, L @ model.F
    ld, lde, le = multipliers["lambda_delta"], multipliers["lambda_delta_eps"], multipliers["lambda_eps"]
    b = _CcmBuilder(model, grid, rows, cost_weights, obs_weight)
    b.start([("Hbar", 2 * n_x + 1), ("Wbar", n_x + 1), ("Hbar1", n_x + 1)])
    b.objective(state_factor=1.0 + epsilon ** 2, n_input_rows=2 * n_u)
    b.add_contraction(rho)
    eta_v = H.vertices()
    b.add_vertex_bound(b.Hbar, [LF @ e for e in eta_v], "hbar")
    b.add_vertex_bound(b.Wbar, [model.E @ w for w in W.vertices()], "wbar")
    b.add_vertex_bound(b.Hbar1, [-(LF @ e) for e in eta_v], "hbar1")
    for i, z in enumerate(grid.points):
        S, A = b.closed_loop(z)
        b.prob.add(b.Hbar + _rpi_delta_core(S, b.X, LC, ld, lde, epsilon, n_x), NSD, f"rpi_delta@{i}")
        Ao = A - LC
        core = bmat([[(Ao @ b.X).sym() + le * b.X, np.zeros((n_x, 1))],
                     [np.zeros((1, n_x)), -le * epsilon ** 2 * np.ones((1, 1))]])
        b.prob.add(b.Wbar + b.Hbar1 + core, NSD, f"rpi_eps@{i}")
    b.add_lipschitz()
    sol = b.solve(tol)
    Pd, table = b.extract(sol)
    return Pd, table, sol


def norm_bound_block(Pdelta, L, C, l2):
    Pdelta = np.atleast_2d(np.asarray(Pdelta, dtype=float))
    PLC = Pdelta @ np.atleast_2d(L) @ np.atleast_2d(C)
    return np.block([[Pdelta, PLC], [PLC.T, l2 * Pdelta]])


def optimize_observer_gain(Pdelta, gain_table: GainTable, model: SystemModel, multipliers, grid: SynthesisGrid,
                           W: BoxSet, H: BoxSet, penalty=1.0, tol=LMI_TOL):
    """Observer gain for a fixed metric: minimizes ``lde eps^2 + ld delta^2 + c_l l^2``.

    Returns ``(L, l, delta2, eps2, solution)``.
    """
    Pdelta = np.asarray(Pdelta, dtype=float)
    n_x, n_y = model.n_x, model.n_y
    Xv = np.linalg.inv(Pdelta)
    ld, lde, le = multipliers["lambda_delta"], multipliers["lambda_delta_eps"], multipliers["lambda_eps"]
    lay = DecisionLayout()
    Lv = lay.mat("L", n_x, n_y)
    d2 = lay.scalar("delta2")
    e2 = lay.scalar("eps2")
    l2 = lay.scalar("l2")
    Hbar = lay.sym("Hbar", 2 * n_x + 1)
    Wbar = lay.sym("Wbar", n_x + 1)
    Hbar1 = lay.sym("Hbar1", n_x + 1)
    c = np.zeros(lay.size)
    c[lay.index("eps2")] = lde
    c[lay.index("delta2")] = ld
    c[lay.index("l2")] = penalty
    prob = SdpProblem(lay, [], objective=c)
    one = np.ones((1, 1))
    zc = np.zeros((n_x, 1))
    for k, eta in enumerate(H.vertices()):
        v = Lv @ (model.F @ eta).reshape(-1, 1)
        n = 2 * n_x + 1
        top = bmat([[np.zeros((n_x, n_x)), np.zeros((n_x, n_x)), v],
                    [np.zeros((n_x, n_x)), np.zeros((n_x, n_x)), zc],
                    [v.T, zc.T, np.zeros((1, 1))]])
        prob.add(top - Hbar, NSD, f"hbar@v{k}")
        top1 = bmat([[np.zeros((n_x, n_x)), -1.0 * v], [-1.0 * v.T, np.zeros((1, 1))]])
        prob.add(top1 - Hbar1, NSD, f"hbar1@v{k}")
    for k, w in enumerate(W.vertices()):
        m = np.zeros((n_x + 1, n_x + 1))
        m[:n_x, n_x] = model.E @ w
        m[n_x, :n_x] = model.E @ w
        prob.add(AffineExpr(m) - Wbar, NSD, f"wbar@v{k}")
    for i, z in enumerate(grid.points):
        A, B = _jac_at(model, z)
        K = gain_table.at(z[:n_x])
        S = (A @ Xv + B @ K @ Xv)
        S = S + S.T
        LCX = Lv @ (model.C @ Xv)
        blk = bmat([[AffineExpr(S + ld * Xv), LCX, zc],
                    [LCX.T, AffineExpr(-lde * Xv), zc],
                    [zc.T, zc.T, lde * e2 - ld * d2]])
        prob.add(Hbar + blk, NSD, f"rpi_delta@{i}")
        AoX = AffineExpr(A @ Xv) - Lv @ (model.C @ Xv)
        blk = bmat([[AoX.sym() + le * Xv, zc], [zc.T, -le * e2]])
        prob.add(Wbar + Hbar1 + blk, NSD, f"rpi_eps@{i}")
    PLC = Pdelta @ Lv @ model.C
    prob.add(bmat([[Pdelta, PLC], [PLC.T, _kron_scalar(l2, Pdelta)]]), PSD, "norm_bound")
    sol = solve_sdp(prob, tol=tol)
    if sol.status not in ("optimal", "feasible"):
        raise SynthesisError(f"observer gain SDP {sol.status}; first violated block {sol.worst_tag}",
                             tag=sol.worst_tag)
    vals = sol.values
    return vals["L"], math.sqrt(max(vals["l2"], 0.0)), vals["delta2"], vals["eps2"], sol


def _kron_scalar(scalar_expr, M):
    """``s * M`` for a 1x1 affine expression ``s`` and constant matrix ``M``."""
    M = np.asarray(M, dtype=float)
    coef = {k: float(v[0, 0]) * M for k, v in scalar_expr.coef.items()}
    return AffineExpr(float(scalar_expr.const[0, 0]) * M, coef)


# ---------------------------------------------------------------- validation

def dense_grid(model: SystemModel, grid_points: int, factor: int) -> SynthesisGrid:
    pts = factor * (grid_points - 1) + 1 if model.nonlinear_dims else grid_points
    return SynthesisGrid.from_model(model, max(pts, 2))


def _max_eig(m):
    return float(np.max(np.linalg.eigvalsh(0.5 * (m + m.T))))


def validate_design(artifact: DesignArtifact, model: Optional[SystemModel] = None, dense_grid_factor: int = 10):
    """Worst residual per LMI family on a denser grid (positive means violated)."""
    model = model or artifact.model()
    grid = dense_grid(model, artifact.grid_points, dense_grid_factor)
    fam = {}
    n_x, n_u = model.n_x, model.n_u

    def upd(name, val):
        fam[name] = max(fam.get(name, -math.inf), val)

    if artifact.variant == "tmpc":
        X = np.linalg.inv(artifact.P)
        Y = artifact.K @ X
        eps = artifact.meta.get("epsilon_reg", 0.0)
        Qh = sqrtm_pd(artifact.Q + eps * np.eye(n_x))
        Rh = sqrtm_pd(artifact.R)
        for z in grid.points:
            A, B = _jac_at(model, z)
            blk = _tracking_block(A, B, AffineExpr(X), AffineExpr(Y), Qh, Rh).const
            upd("tracking", _max_eig(blk))
        return {"families": fam, "grid_points": len(grid.points)}

    Pd = artifact.Pdelta
    X = np.linalg.inv(Pd)
    mult = artifact.multipliers
    Lu, Lx = _split_rows(artifact.rows, n_u)
    Ws = [model.E @ w for w in artifact.W.vertices()] if artifact.W is not None else [np.zeros(n_x)]
    for z in grid.points:
        A, B = _jac_at(model, z)
        K = artifact.gain_table.at(z[:n_x])
        S = (A + B @ K) @ X
        S = S + S.T
        upd("contraction", _max_eig(S + 2 * artifact.rho * X))
        if artifact.variant == "rmpc":
            lam = mult["lambda"]
            for ew in Ws:
                blk = np.block([[S + lam * X, ew[:, None]], [ew[None, :], -lam * np.ones((1, 1))]])
                upd("rpi", _max_eig(blk))
        else:
            ld, lde, le = mult["lambda_delta"], mult["lambda_delta_eps"], mult["lambda_eps"]
            LC, LF = artifact.L @ model.C, artifact.L @ model.F
            eps = artifact.epsilon
            for eta in artifact.H.vertices():
                v = LF @ eta
                blk = np.block([
                    [S + ld * X, LC @ X, v[:, None]],
                    [(LC @ X).T, -lde * X, np.zeros((n_x, 1))],
                    [v[None, :], np.zeros((1, n_x)), (lde * eps ** 2 - ld) * np.ones((1, 1))],
                ])
                upd("rpi_delta", _max_eig(blk))
                Ao = A - LC
                So = Ao @ X + X @ Ao.T + le * X
                for ew in Ws:
                    g = ew - v
                    blk = np.block([[So, g[:, None]], [g[None, :], -le * eps ** 2 * np.ones((1, 1))]])
                    upd("rpi_eps", _max_eig(blk))
        for j in range(artifact.rows.n_rows):
            row = Lu[j] @ (K @ X) + Lx[j] @ X
            blk = np.block([[artifact.c_s[j] ** 2 * np.ones((1, 1)), row[None, :]], [row[:, None], X]])
            upd("sys", -float(np.min(np.linalg.eigvalsh(blk))))
        Acl = A + B @ K
        upd("terminal_cost", _max_eig(Acl.T @ artifact.P + artifact.P @ Acl + artifact.Q + K.T @ artifact.R @ K))
    MX = model.M @ X
    n_p = model.M.shape[0]
    blk = np.block([[artifact.c_o ** 2 * np.eye(n_p), MX], [MX.T, X]])
    upd("obs", -float(np.min(np.linalg.eigvalsh(blk))))
    return {"families": fam, "grid_points": len(grid.points)}


def validation_passes(report, tol=VALIDATION_TOL):
    return all(v <= tol for v in report["families"].values())


# ---------------------------------------------------------------- pipelines

def _box_from_cfg(cfg, n, name):
    if cfg is None:
        return BoxSet(np.zeros(n), np.zeros(n))
    if isinstance(cfg, dict):
        box = BoxSet(cfg["lower"], cfg["upper"])
    else:
        box = BoxSet.symmetric(np.broadcast_to(np.asarray(cfg, dtype=float), (n,)))
    if box.dim != n:
        raise ConfigurationError(f"{name} box has dimension {box.dim}, expected {n}")
    return box


def rho_sweep(model, rhos, lam_fraction, grid, W, **kw):
    """Feasibility of the robust synthesis over candidate contraction rates."""
    out = []
    for rho in rhos:
        try:
            synth_ccm(model, rho, lam_fraction * rho, grid, W, **kw)
            out.append((float(rho), True))
        except SynthesisError:
            out.append((float(rho), False))
    return out


def _reference_points(cfg, model):
    ref = cfg.get("reference_box")
    if ref is None:
        return [np.zeros(model.n_u + model.n_x)]
    return list(BoxSet(ref["lower"], ref["upper"]).vertices())


def run_synthesis(cfg: dict) -> DesignArtifact:
    """Full offline pipeline from a parsed JSON configuration."""
    variant = cfg.get("variant")
    if variant not in ("tmpc", "rmpc", "rompc"):
        raise ConfigurationError(f"unknown variant {variant!r}")
    model = model_from_config(cfg["model"])
    Q = _as_matrix(cfg.get("Q", np.ones(model.n_x)), model.n_x, "Q")
    R = _as_matrix(cfg.get("R", np.ones(model.n_u)), model.n_u, "R")
    gp = int(cfg.get("grid_points", 5))
    factor = int(cfg.get("validation_factor", 10))
    tol = float(cfg.get("solver", {}).get("tol", LMI_TOL))
    grid = SynthesisGrid.from_model(model, gp)
    rows = model.system_rows()
    alpha_cfg = cfg.get("alpha", {}) or {}
    n_input_rows = 2 * model.n_u

    if variant == "tmpc":
        eps = float(cfg.get("epsilon_reg", 0.0))
        P, K, sol = synth_tmpc_terminal(model, Q, R, eps, grid, tol)
        c_s, c_o = compute_tightening_constants(P, K, rows, model.M)
        if alpha_cfg.get("value") is not None:
            alpha = float(alpha_cfg["value"])
        else:
            alpha = compute_alpha_lp(P, K, _reference_points(alpha_cfg, model), rows)
            if alpha_cfg.get("d_max") is not None and c_o > 0:
                alpha = min(alpha, float(alpha_cfg["d_max"]) / c_o)
        art = DesignArtifact(variant="tmpc", model_config=model.config(), Q=Q, R=R, P=P, K=K, alpha=alpha,
                             rows=rows, c_s=c_s, c_o=c_o, grid_points=gp, n_input_rows=n_input_rows,
                             meta={"epsilon_reg": eps, "sdp_iterations": sol.iterations})
    else:
        rho = float(cfg["rho"])
        W = _box_from_cfg(cfg.get("W"), model.n_w, "W")
        obs_w = float(cfg.get("obstacle_weight", 1.0))
        weights = cfg.get("cost_weights")
        meta = {}
        if variant == "rmpc":
            lam = cfg.get("lambda")
            if lam is None:
                lam, meta = _search_lambda(model, rho, grid, W, rows, weights, obs_w, tol)
            lam = float(lam)
            Pd, table, sol = synth_ccm(model, rho, lam, grid, W, rows, weights, obs_w, tol)
            mult = {"lambda": lam}
            L = H = None
            eps = 0.0
            wbar = compute_wbar(Pd, model.E, W)
        else:
            H = _box_from_cfg(cfg.get("H"), model.n_eta, "H")
            mult = {k: float(cfg["multipliers"][k]) for k in ("lambda_delta", "lambda_delta_eps", "lambda_eps")}
            eps = float(cfg["epsilon"])
            obs_cfg = cfg.get("observer", {})
            if "L" not in obs_cfg:
                raise ConfigurationError("ROMPC config needs observer.L (initial or fixed gain)")
            L = np.atleast_2d(np.asarray(obs_cfg["L"], dtype=float))
            check_rompc_multipliers(mult, eps)
            Pd, table, sol = synth_rompc(model, L, rho, mult, eps, grid, W, H, rows, weights, obs_w, tol)
            for _ in range(int(obs_cfg.get("iterations", 0))):
                L_new, l_bound, _, eps2, _ = optimize_observer_gain(Pd, table, model, mult, grid, W, H,
                                                                    float(obs_cfg.get("penalty", 1.0)), tol)
                eps_new = math.sqrt(max(eps2, 0.0))
                try:
                    check_rompc_multipliers(mult, eps_new)
                    Pd_n, table_n, sol = synth_rompc(model, L_new, rho, mult, eps_new, grid, W, H, rows, weights,
                                                     obs_w, tol)
                except (SynthesisError, ConfigurationError):
                    break
                L, eps, Pd, table = L_new, eps_new, Pd_n, table_n
                meta["observer_norm_bound"] = l_bound
            wbar = compute_wbar_o(Pd, L, model.C, model.F, H, eps)
        gains = list(table.entries())
        c_s, c_o = compute_tightening_constants(Pd, gains, rows, model.M)
        P, _ = synth_terminal_cost(model, table, Q, R, grid, tol)
        floor = wbar / rho + (eps if variant == "rompc" else 0.0)
        alpha = floor if alpha_cfg.get("value") is None else float(alpha_cfg["value"])
        if alpha < floor - 1e-12:
            raise ConfigurationError(f"alpha {alpha} below the invariance floor {floor}")
        c_s_o = None
        if variant == "rompc":
            c_s_o = c_s.copy()
            c_s_o[:n_input_rows] = 0.0
        meta["sdp_iterations"] = sol.iterations
        art = DesignArtifact(variant=variant, model_config=model.config(), Q=Q, R=R, P=P, alpha=alpha, rows=rows,
                             c_s=c_s, c_o=c_o, Pdelta=Pd, gain_table=table, rho=rho, wbar=wbar, c_s_o=c_s_o,
                             L=L, epsilon=eps, W=W, H=H, multipliers=mult, grid_points=gp,
                             n_input_rows=n_input_rows, meta=meta)
    art.validation = validate_design(art, model, factor)
    return art


def _search_lambda(model, rho, grid, W, rows, weights, obs_w, tol):
    """Pick the RPI multiplier minimizing the tightening objective over ``(0, 2 rho]``."""

    def probe(lam):
        if lam <= 0:
            return -math.inf
        try:
            _, _, sol = synth_ccm(model, rho, lam, grid, W, rows, weights, obs_w, tol)
        except SynthesisError:
            return -math.inf
        return -sol.objective

    res = conic.bisect_multiplier(1e-3 * rho, 2.0 * rho, probe, iters=12, mode="argmax")
    if not res.feasible:
        raise SynthesisError("no RPI multiplier in (0, 2 rho] is feasible", tag="lambda")
    return res.value, {"lambda_search_evaluations": res.evaluations}
