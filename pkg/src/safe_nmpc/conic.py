"""Small dense LMI toolkit: affine matrix expressions, an interior-point SDP solver,
LP helpers and multiplier bisection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import core
from .errors import ConfigurationError

PSD = ">=0"
NSD = "<=0"


# ---------------------------------------------------------------- expressions

class AffineExpr:
    """Matrix-valued affine function of the decision vector: ``const + sum_k y_k coef[k]``."""

    __slots__ = ("const", "coef")
    __array_ufunc__ = None  # let ndarray @ expr dispatch to __rmatmul__

    def __init__(self, const, coef=None):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.coef = dict(coef or {})

    @property
    def shape(self):
        return self.const.shape

    @staticmethod
    def lift(other, shape=None):
        if isinstance(other, AffineExpr):
            return other
        arr = np.asarray(other, dtype=float)
        if arr.ndim == 0 and shape is not None:
            arr = np.full(shape, float(arr))
        return AffineExpr(arr)

    def _combine(self, other, sign):
        other = AffineExpr.lift(other, self.shape)
        if other.shape != self.shape:
            raise ConfigurationError(f"shape mismatch {self.shape} vs {other.shape}")
        coef = dict(self.coef)
        for k, m in other.coef.items():
            coef[k] = coef[k] + sign * m if k in coef else sign * m
        return AffineExpr(self.const + sign * other.const, coef)

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __rsub__(self, other):
        return (-self)._combine(other, 1.0)

    def __neg__(self):
        return AffineExpr(-self.const, {k: -m for k, m in self.coef.items()})

    def __mul__(self, a):
        a = float(a)
        return AffineExpr(a * self.const, {k: a * m for k, m in self.coef.items()})

    __rmul__ = __mul__

    def __matmul__(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return AffineExpr(self.const @ A, {k: m @ A for k, m in self.coef.items()})

    def __rmatmul__(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return AffineExpr(A @ self.const, {k: A @ m for k, m in self.coef.items()})

    @property
    def T(self):
        return AffineExpr(self.const.T.copy(), {k: m.T.copy() for k, m in self.coef.items()})

    def sym(self):
        """``self + self^T`` (exactly symmetric)."""
        return self + self.T

    def value(self, y):
        out = self.const.copy()
        for k, m in self.coef.items():
            out += y[k] * m
        return out


def bmat(blocks):
    """Block matrix from a nested list of expressions, arrays, or ``0`` placeholders."""
    nr, nc = len(blocks), len(blocks[0])
    heights, widths = [None] * nr, [None] * nc
    for i, row in enumerate(blocks):
        if len(row) != nc:
            raise ConfigurationError("ragged block matrix")
        for j, b in enumerate(row):
            if isinstance(b, (int, float)) and b == 0:
                continue
            shp = b.shape if isinstance(b, AffineExpr) else np.atleast_2d(np.asarray(b)).shape
            heights[i] = heights[i] or shp[0]
            widths[j] = widths[j] or shp[1]
            if heights[i] != shp[0] or widths[j] != shp[1]:
                raise ConfigurationError("inconsistent block sizes")
    if None in heights or None in widths:
        raise ConfigurationError("every block row and column needs one sized entry")
    r0 = np.concatenate([[0], np.cumsum(heights)])
    c0 = np.concatenate([[0], np.cumsum(widths)])
    const = np.zeros((r0[-1], c0[-1]))
    coef = {}
    for i, row in enumerate(blocks):
        for j, b in enumerate(row):
            if isinstance(b, (int, float)) and b == 0:
                continue
            e = AffineExpr.lift(b)
            const[r0[i]:r0[i + 1], c0[j]:c0[j + 1]] = e.const
            for k, m in e.coef.items():
                if k not in coef:
                    coef[k] = np.zeros_like(const)
                coef[k][r0[i]:r0[i + 1], c0[j]:c0[j + 1]] = m
    return AffineExpr(const, coef)


# ---------------------------------------------------------------- layout

@dataclass
class DecisionLayout:
    """Named decision blocks flattened into one vector. Symmetric blocks store the
    upper triangle row by row."""

    blocks: dict = field(default_factory=dict)
    size: int = 0

    def _add(self, name, kind, shape, count):
        if name in self.blocks:
            raise ConfigurationError(f"duplicate decision block {name!r}")
        self.blocks[name] = (kind, shape, self.size)
        self.size += count

    def sym(self, name, n):
        self._add(name, "sym", (n, n), n * (n + 1) // 2)
        return self.expr(name)

    def mat(self, name, r, c):
        self._add(name, "mat", (r, c), r * c)
        return self.expr(name)

    def scalar(self, name):
        self._add(name, "scalar", (1, 1), 1)
        return self.expr(name)

    def index(self, name, i=0, j=0):
        kind, (r, c), off = self.blocks[name]
        if kind == "sym":
            i, j = min(i, j), max(i, j)
            return off + i * r - i * (i - 1) // 2 + (j - i)
        if kind == "mat":
            return off + i * c + j
        return off

    def expr(self, name):
        kind, (r, c), off = self.blocks[name]
        coef = {}
        if kind == "sym":
            for i in range(r):
                for j in range(i, r):
                    m = np.zeros((r, r))
                    m[i, j] = m[j, i] = 1.0
                    coef[self.index(name, i, j)] = m
        else:
            for i in range(r):
                for j in range(c):
                    m = np.zeros((r, c))
                    m[i, j] = 1.0
                    coef[off + i * c + j] = m
        return AffineExpr(np.zeros((r, c)), coef)

    def trace_objective(self, name, weight=1.0, c=None):
        """Add ``weight * trace(name)`` (or ``weight * name`` for scalars) to objective vector ``c``."""
        c = np.zeros(self.size) if c is None else c
        kind, (r, _), _ = self.blocks[name]
        if kind == "scalar":
            c[self.index(name)] += weight
        else:
            for i in range(r):
                c[self.index(name, i, i)] += weight
        return c

    def unflatten(self, y):
        y = np.asarray(y, dtype=float)
        out = {}
        for name, (kind, (r, c), off) in self.blocks.items():
            if kind == "sym":
                m = np.zeros((r, r))
                iu = np.triu_indices(r)
                m[iu] = y[off:off + len(iu[0])]
                out[name] = m + np.triu(m, 1).T
            elif kind == "mat":
                out[name] = y[off:off + r * c].reshape(r, c).copy()
            else:
                out[name] = float(y[off])
        return out

    def flatten(self, values):
        y = np.zeros(self.size)
        for name, (kind, (r, c), off) in self.blocks.items():
            v = values[name]
            if kind == "sym":
                iu = np.triu_indices(r)
                y[off:off + len(iu[0])] = np.asarray(v, dtype=float)[iu]
            elif kind == "mat":
                y[off:off + r * c] = np.asarray(v, dtype=float).reshape(-1)
            else:
                y[off] = float(v)
        return y


@dataclass(frozen=True)
class LmiBlock:
    const: np.ndarray
    coeffs: tuple  # ((index, matrix), ...)
    sense: str
    tag: str = ""

    @classmethod
    def from_expr(cls, expr: AffineExpr, sense: str, tag: str = ""):
        if sense not in (PSD, NSD):
            raise ConfigurationError(f"unknown LMI sense {sense!r}")
        n, m = expr.shape
        if n != m:
            raise ConfigurationError(f"LMI {tag!r} is not square")
        for mat in [expr.const, *expr.coef.values()]:
            if np.max(np.abs(mat - mat.T), initial=0.0) > 1e-14:
                raise ConfigurationError(f"LMI {tag!r} has a non-symmetric coefficient")
        coeffs = tuple((k, v) for k, v in sorted(expr.coef.items()) if np.any(v))
        return cls(expr.const, coeffs, sense, tag)

    @property
    def dim(self):
        return self.const.shape[0]

    def evaluate(self, y):
        out = self.const.copy()
        for k, m in self.coeffs:
            out += y[k] * m
        return out


@dataclass
class SdpProblem:
    layout: DecisionLayout
    lmis: list
    objective: Optional[np.ndarray] = None  # linear cost vector
    logdet: list = field(default_factory=list)  # [(weight, AffineExpr)], adds -weight*log det
    x0: Optional[np.ndarray] = None

    def add(self, expr, sense, tag=""):
        self.lmis.append(LmiBlock.from_expr(expr, sense, tag))

    def cost(self):
        return np.zeros(self.layout.size) if self.objective is None else np.asarray(self.objective, float)


@dataclass
class SdpSolution:
    y: np.ndarray
    values: dict
    objective: float
    residual: float
    worst_tag: str
    iterations: int
    status: str
    gap: float = math.inf


# ---------------------------------------------------------------- checks

def lmi_margin(matrix, sense):
    """Violation measure via the Jacobi eigen-solver: max eigenvalue for ``<= 0``,
    minus the min eigenvalue for ``>= 0``."""
    ev = core.jacobi_eigvalsh(matrix)
    return float(ev[-1]) if sense == NSD else float(-ev[0])


def check_lmi(matrix, sense=NSD, tol=0.0):
    """Returns ``(feasible, margin)``; ``feasible`` iff ``margin <= tol``."""
    a = np.atleast_2d(np.asarray(matrix, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise ConfigurationError("LMI matrix must be square")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(a), initial=0.0)):
        raise ConfigurationError("LMI matrix is not symmetric")
    if sense not in (PSD, NSD):
        raise ConfigurationError(f"unknown LMI sense {sense!r}")
    margin = lmi_margin(0.5 * (a + a.T), sense)
    return margin <= tol, margin


def block_residuals(lmis, y):
    """Worst violation per block computed with LAPACK (the solver's own view)."""
    out = []
    for blk in lmis:
        ev = np.linalg.eigvalsh(blk.evaluate(y))
        out.append(float(ev[-1]) if blk.sense == NSD else float(-ev[0]))
    return out


# ---------------------------------------------------------------- barrier solver

class _Group:
    """Blocks of equal size stored densely in canonical ``F(y) >= 0`` form."""

    def __init__(self, C, A, w):
        self.C, self.A, self.w = C, A, w  # (B,d,d), (B,m,d,d), (B,)

    def matrices(self, y):
        return self.C + np.einsum("bmij,m->bij", self.A, y)

    def chol(self, y):
        try:
            return np.linalg.cholesky(self.matrices(y))
        except np.linalg.LinAlgError:
            return None


def _build_groups(blocks, m, weights=None, extra_identity=False):
    by_dim = {}
    for i, (C, coeffs) in enumerate(blocks):
        by_dim.setdefault(C.shape[0], []).append((C, coeffs, 1.0 if weights is None else weights[i]))
    groups = []
    for d, items in sorted(by_dim.items()):
        Cs = np.stack([it[0] for it in items])
        As = np.zeros((len(items), m, d, d))
        for b, (_, coeffs, _) in enumerate(items):
            for k, mat in coeffs:
                As[b, k] += mat
            if extra_identity:
                As[b, m - 1] = np.eye(d)
        groups.append(_Group(Cs, As, np.array([it[2] for it in items], dtype=float)))
    return groups


def _box_group(m, n, radius):
    """``radius -/+ y_i >= 0`` for the first ``n`` of ``m`` variables, as 1x1 blocks."""
    A = np.zeros((2 * n, m, 1, 1))
    idx = np.arange(n)
    A[2 * idx, idx, 0, 0] = -1.0
    A[2 * idx + 1, idx, 0, 0] = 1.0
    return _Group(np.full((2 * n, 1, 1), float(radius)), A, np.ones(2 * n))


def _canonical(lmis):
    out = []
    for blk in lmis:
        s = 1.0 if blk.sense == PSD else -1.0
        out.append((s * blk.const, [(k, s * mat) for k, mat in blk.coeffs]))
    return out


class _Barrier:
    def __init__(self, c, con, obj):
        self.c, self.con, self.obj = c, con, obj
        self.nu = sum(g.C.shape[0] * g.C.shape[1] for g in con)

    def value(self, y, t):
        v = t * float(self.c @ y)
        for groups, scale in ((self.con, 1.0), (self.obj, t)):
            for g in groups:
                L = g.chol(y)
                if L is None:
                    return math.inf
                ld = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
                v -= scale * float(g.w @ ld)
        return v

    def derivatives(self, y, t):
        m = y.shape[0]
        grad = t * self.c.copy()
        hess = np.zeros((m, m))
        for groups, scale in ((self.con, 1.0), (self.obj, t)):
            for g in groups:
                L = g.chol(y)
                if L is None:
                    return None, None
                Li = np.linalg.inv(L)
                U = np.matmul(np.matmul(Li[:, None], g.A), np.swapaxes(Li, 1, 2)[:, None])
                w = scale * g.w
                grad -= (w[:, None] * np.trace(U, axis1=2, axis2=3)).sum(axis=0)
                Uf = (U * np.sqrt(w)[:, None, None, None]).transpose(1, 0, 2, 3).reshape(m, -1)
                hess += Uf @ Uf.T
        return grad, hess


def _newton_center(bar, y, t, max_steps=80, stop=None):
    steps = 0
    f = bar.value(y, t)
    while steps < max_steps:
        g, H = bar.derivatives(y, t)
        if g is None:
            break
        reg = 1e-13 * max(1.0, float(np.max(np.abs(np.diag(H)))))
        try:
            Lh = np.linalg.cholesky(H + reg * np.eye(H.shape[0]))
            d = -np.linalg.solve(Lh.T, np.linalg.solve(Lh, g))
        except np.linalg.LinAlgError:
            d = -np.linalg.lstsq(H, g, rcond=None)[0]
        dec = float(-g @ d)
        steps += 1
        if dec <= 2e-12 or not np.isfinite(dec):
            break
        a = 1.0
        while a > 1e-12:
            fn = bar.value(y + a * d, t)
            if fn <= f - 0.25 * a * dec:
                break
            a *= 0.5
        else:
            break
        y = y + a * d
        f = fn
        if np.max(np.abs(y)) > 1e12 or (stop is not None and stop(y)):
            break
    return y, steps


def solve_sdp(problem: SdpProblem, tol: float = 1e-7, max_iter: int = 3000, gap_tol: float = 1e-9,
              mu: float = 20.0, bound: float = 1e6) -> SdpSolution:
    """Log-barrier interior-point method with a phase-I feasibility stage.

    Minimizes ``c^T y - sum w log det G(y)`` subject to every LMI block. Statuses:
    ``optimal`` (gap certified), ``feasible`` (a point with residual <= tol but no
    interior to optimize over), ``infeasible`` and ``max_iter``. Every decision
    variable is kept inside ``|y_i| < bound * max(1, |x0|_inf)``; homogeneous LMI
    families otherwise let phase I run off to ill-conditioned scales.
    """
    if not problem.lmis:
        raise ConfigurationError("an SDP needs at least one LMI")
    layout = problem.layout
    m = layout.size
    c = problem.cost()
    lmis = list(problem.lmis)
    for k, (w, expr) in enumerate(problem.logdet):
        lmis.append(LmiBlock.from_expr(expr, PSD, f"logdet-domain-{k}"))
    canon = _canonical(lmis)
    y = np.zeros(m) if problem.x0 is None else np.array(problem.x0, dtype=float)
    radius = bound * max(1.0, float(np.max(np.abs(y))) if m else 1.0)
    iters = 0

    # phase I: minimize s subject to F_i(y) + s I >= 0 and s >= -1, first inside a
    # modest box (homogeneous families otherwise centre at the box edge), then the full one
    res0 = max(block_residuals(lmis, y))
    if res0 >= -1e-9:
        for r in sorted({min(radius, 1e3 * max(1.0, float(np.max(np.abs(y))))), radius}):
            ys, n = _phase_one(canon, m, y, res0, r, mu, gap_tol, max_iter - iters)
            iters += n
            if ys[m] < 0.0:
                break
        y = ys[:m]
        if ys[m] >= 0.0:
            return _finish(problem, lmis, y, iters, tol, math.inf, phase_one=True)

    # phase II
    con = _build_groups(canon, m)
    con.append(_box_group(m, m, radius))
    obj = []
    if problem.logdet:
        obj = _build_groups(_canonical([LmiBlock.from_expr(e, PSD) for _, e in problem.logdet]), m,
                            weights=[w for w, _ in problem.logdet])
    if not np.any(c) and not obj:
        return _finish(problem, lmis, y, iters, tol, 0.0)
    bar = _Barrier(c, con, obj)
    # start where the duality-gap estimate matches the current objective scale
    t = min(max(1.0, bar.nu / max(abs(float(c @ y)), 1e-12)), 1e6) if not obj else 1.0
    gap = math.inf
    while iters < max_iter:
        y, n = _newton_center(bar, y, t)
        iters += n
        if np.max(np.abs(y)) > 1e12:
            return _finish(problem, lmis, y, iters, tol, math.inf, status="max_iter")
        gap = bar.nu / t
        val = float(c @ y)
        if gap <= gap_tol * max(1.0, abs(val)):
            break
        t *= mu
    return _finish(problem, lmis, y, iters, tol, gap, status=None if iters < max_iter else "max_iter")


def _phase_one(canon, m, y, res0, radius, mu, gap_tol, budget):
    groups = _build_groups(canon, m + 1, extra_identity=True)
    floor = np.zeros((1, m + 1, 1, 1))
    floor[0, m, 0, 0] = 1.0
    groups.append(_Group(np.ones((1, 1, 1)), floor, np.ones(1)))
    groups.append(_box_group(m + 1, m, radius))
    c1 = np.zeros(m + 1)
    c1[m] = 1.0
    bar = _Barrier(c1, groups, [])
    ys = np.concatenate([np.clip(y, -0.5 * radius, 0.5 * radius), [res0 + 1.0]])
    ys[m] = max(block_residuals_canon(canon, ys[:m])) + 1.0
    t, iters = 1.0, 0
    while True:
        ys, n = _newton_center(bar, ys, t, stop=lambda v: v[m] < -1e-6)
        iters += n
        if ys[m] < 0.0 or bar.nu / t < 1e-3 * gap_tol or iters >= budget:
            return ys, iters
        if ys[m] > 2.0 * bar.nu / t and t > 1e3:
            return ys, iters  # centred lower bound on min s is positive: infeasible in this box
        t *= mu


def block_residuals_canon(canon, y):
    out = []
    for C, coeffs in canon:
        F = C.copy()
        for k, mat in coeffs:
            F = F + y[k] * mat
        out.append(-float(np.linalg.eigvalsh(F)[0]))
    return out


def _objective_value(problem, y):
    v = float(problem.cost() @ y)
    for w, expr in problem.logdet:
        sign, ld = np.linalg.slogdet(expr.value(y))
        v -= w * (ld if sign > 0 else -math.inf)
    return v


def _finish(problem, lmis, y, iters, tol, gap, status=None, phase_one=False):
    res = block_residuals(lmis, y)
    k = int(np.argmax(res))
    worst = res[k]
    if status is None:
        if phase_one:
            status = "feasible" if worst <= tol else "infeasible"
        else:
            status = "optimal" if worst <= tol else "infeasible"
    elif worst > tol:
        status = "infeasible"
    elif status == "max_iter":
        status = "feasible"
    return SdpSolution(y=y, values=problem.layout.unflatten(y), objective=_objective_value(problem, y),
                       residual=worst, worst_tag=lmis[k].tag, iterations=iters, status=status, gap=gap)


# ---------------------------------------------------------------- LP

@dataclass(frozen=True)
class LpResult:
    value: float
    x: Optional[np.ndarray]
    status: str  # optimal, unbounded, infeasible


def solve_lp(objective, A, b) -> LpResult:
    """Maximize ``objective . x`` subject to ``A x <= b``.

    One-variable problems reduce to the tightest row ratio; larger ones go to HiGHS.
    """
    c = np.atleast_1d(np.asarray(objective, dtype=float))
    A = np.asarray(A, dtype=float).reshape(-1, c.shape[0])
    b = np.asarray(b, dtype=float).reshape(-1)
    if c.shape[0] == 1:
        return _solve_lp_1d(float(c[0]), A[:, 0], b)
    from scipy.optimize import linprog

    res = linprog(-c, A_ub=A, b_ub=b, bounds=[(None, None)] * c.shape[0], method="highs")
    if res.status == 3:
        return LpResult(math.inf, None, "unbounded")
    if res.status != 0:
        return LpResult(-math.inf, None, "infeasible")
    return LpResult(float(c @ res.x), res.x, "optimal")


def _solve_lp_1d(c, a, b):
    if np.any((a == 0) & (b < 0)):
        return LpResult(-math.inf, None, "infeasible")
    pos, neg = a > 0, a < 0
    hi = float(np.min(b[pos] / a[pos])) if np.any(pos) else math.inf
    lo = float(np.max(b[neg] / a[neg])) if np.any(neg) else -math.inf
    if lo > hi:
        return LpResult(-math.inf, None, "infeasible")
    if c == 0:
        x = hi if math.isfinite(hi) else (lo if math.isfinite(lo) else 0.0)
        return LpResult(0.0, np.array([x]), "optimal")
    x = hi if c > 0 else lo
    if not math.isfinite(x):
        return LpResult(math.inf, None, "unbounded")
    return LpResult(c * x, np.array([x]), "optimal")


# ---------------------------------------------------------------- multipliers

@dataclass(frozen=True)
class MultiplierResult:
    value: float
    feasible: bool
    width: float
    evaluations: int


def bisect_multiplier(lo: float, hi: float, probe: Callable, iters: int = 30, mode: str = "largest",
                      scan: int = 8) -> MultiplierResult:
    """Multiplier search over ``[lo, hi]``.

    ``largest``: ``probe(lam) -> bool`` with feasible values below infeasible ones; returns the
    largest feasible value found. ``argmax``: ``probe(lam) -> float`` assumed unimodal (use
    ``-inf`` for infeasible); a coarse scan brackets the peak and bisection on the slope sign
    refines it.
    """
    if not hi > lo:
        raise ConfigurationError("multiplier range must satisfy hi > lo")
    evals = 0
    if mode == "largest":
        if probe(hi):
            return MultiplierResult(hi, True, 0.0, 1)
        evals = 1
        good = None
        if probe(lo):
            good = lo
        evals += 1
        if good is None:
            # the feasible interval may not contain lo: look for an interior seed
            for k in range(1, scan + 1):
                lam = lo + (hi - lo) * k / (scan + 1)
                evals += 1
                if probe(lam):
                    good = lam
                    break
        if good is None:
            return MultiplierResult(math.nan, False, hi - lo, evals)
        a, b = good, hi
        for _ in range(iters):
            mid = 0.5 * (a + b)
            evals += 1
            if probe(mid):
                a = mid
            else:
                b = mid
        return MultiplierResult(a, True, b - a, evals)
    if mode != "argmax":
        raise ConfigurationError(f"unknown bisection mode {mode!r}")
    grid = np.linspace(lo, hi, scan + 1)
    vals = [probe(g) for g in grid]
    evals = len(grid)
    k = int(np.argmax(vals))
    if not np.isfinite(vals[k]):
        return MultiplierResult(math.nan, False, hi - lo, evals)
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, scan)]
    for _ in range(iters):
        mid = 0.5 * (a + b)
        h = 1e-3 * (b - a)
        fl, fr = probe(mid - h), probe(mid + h)
        evals += 2
        if fr > fl:
            a = mid - h
        else:
            b = mid + h
    best = 0.5 * (a + b)
    return MultiplierResult(best, bool(np.isfinite(probe(best))), b - a, evals + 1)
