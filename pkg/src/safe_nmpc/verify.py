"""Numerical checks of the closed-loop guarantees.

Every verifier returns a JSON-ready report with a ``passed`` flag; none raises on a
failed check. Randomness comes only from the ``seed`` argument.
"""
from __future__ import annotations

import math

import numpy as np

from .model import ReferenceTrajectory, SystemModel, rk4
from .synthesis import DesignArtifact, compute_wbar, compute_wbar_o, inv_sqrt, sqrtm_pd, worst_disturbance_vertex, _split_rows
from .tube import feedback_kappa, tube_size

SCHEMA = 1


def _report(check, passed, **details):
    return {"schema": SCHEMA, "check": check, "passed": bool(passed), **details}


def _unit_sphere(rng, n_samples, dim):
    d = rng.standard_normal((n_samples, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# ---------------------------------------------------------------- closed-loop traces

def verify_descent(trace, artifact: DesignArtifact, variant=None, tol=1e-4):
    """TMPC: ``J_{i+1} - J_i + int stage cost <= tol (1 + |J_i|)`` per step.
    Robust variants: tail-average of ``|x - x^r|_Q^2`` over the second half of the run."""
    variant = variant or artifact.variant
    if variant == "tmpc":
        residuals = []
        for a, b in zip(trace.steps[:-1], trace.steps[1:]):
            if a["status"] != "optimal" or b["status"] != "optimal" or a.get("action") or b.get("action"):
                continue
            r = b["objective"] - a["objective"] + a["stage_cost_0"]
            residuals.append({"index": a["index"], "residual": r, "bound": tol * (1.0 + abs(a["objective"]))})
        bad = [r for r in residuals if r["residual"] > r["bound"]]
        worst = max((r["residual"] - r["bound"] for r in residuals), default=None)
        return _report("descent", not bad and trace.outcome == "completed", variant=variant,
                       steps_checked=len(residuals), violations=len(bad), worst_excess=worst,
                       max_residual=max((r["residual"] for r in residuals), default=None))

    x = np.asarray(trace.x, dtype=float)
    xr = np.asarray(trace.x_ref, dtype=float)
    half = len(x) // 2
    d = x[half:] - xr[half:]
    tail = float(np.mean(np.einsum("ij,jk,ik->i", d, artifact.Q, d))) if len(d) else math.nan
    s_lim = artifact.s_bar
    const = math.sqrt(tail) / s_lim if s_lim > 0 and math.isfinite(tail) else math.nan
    return _report("descent", math.isfinite(tail) and trace.outcome == "completed", variant=variant,
                   tail_average=tail, tube_limit=s_lim, constant=const, tail_samples=len(d))


def verify_recursive_feasibility(trace, artifact: DesignArtifact, tol=1e-6):
    """Candidate margins at every MPC step, plus tube membership of each new initial condition."""
    cand, entry = [], []
    for st in trace.steps:
        cm = st.get("candidate_margins")
        if cm:
            cand.append((st["index"], cm["worst"]))
        if "entry_gap" in st:
            entry.append((st["index"], st["entry_gap"]))
    bad_c = [i for i, m in cand if m < -tol]
    bad_e = [i for i, g in entry if g > tol]
    return _report("recursive_feasibility", not bad_c and not bad_e and trace.outcome == "completed",
                   candidates=len(cand), candidate_violations=len(bad_c),
                   worst_candidate_margin=min((m for _, m in cand), default=None),
                   entry_violations=len(bad_e), worst_entry_gap=max((g for _, g in entry), default=None),
                   first_violation=min(bad_c + bad_e) if bad_c or bad_e else None)


# ---------------------------------------------------------------- terminal set

def _terminal_rhs(model, artifact, reference, t_base):
    def rhs(t, z):
        xr, ur = reference.at(t_base + t)
        if artifact.variant == "tmpc":
            u = ur + artifact.K @ (z - xr)
        else:
            u = feedback_kappa(artifact, z, xr, ur)
        return np.asarray(model.f(z, u), dtype=float) + model.bias_drift

    return rhs


def verify_terminal_invariance(artifact: DesignArtifact, reference: ReferenceTrajectory, n_samples=100, seed=0,
                               Ts=0.2, horizons=None, alpha=None, t0=0.0, substeps=20, tol=1e-6,
                               model: SystemModel = None):
    """Boundary points of the terminal set at prediction time ``T`` driven by the terminal
    law (with ``w = w^b``) for one ``Ts``; every point must stay a member at every substep.

    ``alpha`` overrides the artifact's terminal scaling (used for sensitivity tests).
    Horizons at which the tightened set is empty are reported, not sampled.
    """
    model = model or artifact.model()
    rng = np.random.default_rng(seed)
    alpha = artifact.alpha if alpha is None else float(alpha)
    robust = artifact.variant != "tmpc"
    eps = artifact.epsilon if artifact.variant == "rompc" else 0.0
    if horizons is None:
        horizons = [0.0] if not robust else [k * Ts for k in (0, 1, 2, 5, 10, 20)]
    metric = artifact.metric
    Pih = inv_sqrt(metric)
    h = Ts / substeps
    worst, violations, sampled, empty = math.inf, 0, 0, []
    for T in horizons:
        sT = tube_size(artifact.rho, artifact.wbar, T) if robust else 0.0
        radius = alpha - sT - eps if robust else alpha
        if radius <= 0:
            empty.append(T)
            continue
        t_base = t0 + T
        xr0 = reference.at(t_base)[0]
        pts = [xr0.copy()] + [xr0 + radius * (Pih @ d) for d in _unit_sphere(rng, n_samples, model.n_x)]
        rhs = _terminal_rhs(model, artifact, reference, t_base)
        for z in pts:
            sampled += 1
            low = math.inf
            for j in range(1, substeps + 1):
                z = rk4(rhs, z, (j - 1) * h, h, 1)
                xr = reference.at(t_base + j * h)[0]
                d = z - xr
                v = float(d @ metric @ d)
                if robust:
                    m = alpha - tube_size(artifact.rho, artifact.wbar, T + j * h) - eps - math.sqrt(max(v, 0.0))
                else:
                    m = alpha ** 2 - v
                low = min(low, m)
            worst = min(worst, low)
            violations += low < -tol
    return _report("terminal_invariance", violations == 0 and sampled > 0, alpha=alpha,
                   alpha_lower_bound=(artifact.s_bar + eps) if robust else 0.0, samples=sampled,
                   violations=int(violations), worst_margin=worst if sampled else None, empty_horizons=empty)


# ---------------------------------------------------------------- Lipschitz bounds and contraction

def _domain(model, rng, n):
    lo, hi = model.grid_box.lower, model.grid_box.upper
    pts = rng.uniform(lo, hi, size=(n, len(lo)))
    return pts[:, :model.n_x], pts[:, model.n_x:]


def _gain_rows(artifact, xs, zs):
    from .tube import mean_gain

    if artifact.gain_table.is_constant:
        return np.broadcast_to(artifact.gain_table.gains, (len(xs),) + artifact.gain_table.gains.shape)
    return np.array([mean_gain(artifact.gain_table, x, z) for x, z in zip(xs, zs)])


def sampled_lipschitz(artifact: DesignArtifact, model: SystemModel = None, n_samples=10_000, seed=0):
    """Worst ratio of the row change to ``c sqrt(V)`` over random pairs (at most 1 when the bounds hold)."""
    model = model or artifact.model()
    rng = np.random.default_rng(seed)
    xs, _ = _domain(model, rng, n_samples)
    zs, _ = _domain(model, rng, n_samples)
    P = artifact.Pdelta
    d = xs - zs
    sv = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", d, P, d), 0.0))
    Kbar = _gain_rows(artifact, xs, zs)
    du = np.einsum("nij,nj->ni", Kbar, d)
    Lu, Lx = _split_rows(artifact.rows, model.n_u)
    change = du @ Lu.T + d @ Lx.T  # (n, rows)
    keep = sv > 0
    ratio_s = change[keep] / (artifact.c_s[None, :] * sv[keep, None])
    pos = np.linalg.norm(d @ model.M.T, axis=1)
    ratio_o = pos[keep] / (artifact.c_o * sv[keep]) if artifact.c_o > 0 else np.zeros(int(keep.sum()))
    return float(np.max(ratio_s)) if ratio_s.size else 0.0, float(np.max(ratio_o)) if ratio_o.size else 0.0, int(keep.sum())


def _pair_rhs(model, artifact, v, dist):
    """Controlled state perturbed by ``dist`` on top of ``E w^b``; nominal state unperturbed."""
    n = model.n_x
    Ew = model.bias_drift + dist

    def rhs(t, y):
        x, z = y[:n], y[n:]
        u = feedback_kappa(artifact, x, z, v)
        return np.concatenate([np.asarray(model.f(x, u)) + Ew, np.asarray(model.f(z, v)) + model.bias_drift])

    return rhs


def contraction_ratios(artifact: DesignArtifact, model: SystemModel, xs, zs, vs, dt, substeps=10):
    """``sqrt(V)(dt) / sqrt(V)(0)`` under the feedback law with ``w = w^b``."""
    P = artifact.Pdelta
    out = []
    for x, z, v in zip(xs, zs, vs):
        d0 = x - z
        s0 = math.sqrt(max(float(d0 @ P @ d0), 0.0))
        if s0 == 0.0:
            out.append(0.0)
            continue
        y = rk4(_pair_rhs(model, artifact, v, np.zeros(model.n_x)), np.concatenate([x, z]), 0.0, dt, substeps)
        d1 = y[:model.n_x] - y[model.n_x:]
        out.append(math.sqrt(max(float(d1 @ P @ d1), 0.0)) / s0)
    return np.array(out)


def disturbed_decay_residuals(artifact: DesignArtifact, model: SystemModel, xs, zs, vs, dists, h=1e-6):
    """``d/dt sqrt(V) + rho sqrt(V) - wbar`` by forward differences along the vector field
    (one-sided, so the kink of ``sqrt(V)`` at ``x = z`` gives the right-derivative).

    ``dists`` are state-space perturbations beyond ``E w^b``: ``E w^0`` for the robust
    design, the output-injection term ``L (C e + F eta)`` for the output-feedback one.
    """
    P = artifact.Pdelta
    out = []
    for x, z, v, dw in zip(xs, zs, vs, dists):
        f = _pair_rhs(model, artifact, v, dw)(0.0, np.concatenate([x, z]))
        dx, dz = f[:model.n_x], f[model.n_x:]

        def sv(a, b):
            d = a - b
            return math.sqrt(max(float(d @ P @ d), 0.0))

        rate = (sv(x + h * dx, z + h * dz) - sv(x, z)) / h
        out.append(rate + artifact.rho * sv(x, z) - artifact.wbar)
    return np.array(out)


def _perturbations(artifact, model, rng, n):
    """Random admissible perturbations; the first one attains the disturbance bound."""
    if artifact.variant == "rompc":
        etas = artifact.H.vertices()
        e = _unit_sphere(rng, n, model.n_x) @ inv_sqrt(artifact.Pdelta).T * artifact.epsilon
        LF = artifact.L @ model.F
        out = (e @ model.C.T + etas[rng.integers(0, len(etas), n)] @ model.F.T) @ artifact.L.T
        # binding case: noise vertex and error direction aligned with the largest gains
        Ph, Pih = sqrtm_pd(artifact.Pdelta), inv_sqrt(artifact.Pdelta)
        S = Ph @ artifact.L @ model.C @ Pih
        _, _, vt = np.linalg.svd(S)
        eta = etas[int(np.argmax([np.linalg.norm(Ph @ LF @ q) for q in etas]))]
        a, b = Ph @ LF @ eta, S @ vt[0]
        sign = 1.0 if float(a @ b) >= 0 else -1.0
        out[0] = artifact.L @ (model.C @ (sign * artifact.epsilon * (Pih @ vt[0])) + model.F @ eta)
        return out
    if artifact.W is None:
        return np.zeros((n, model.n_x))
    verts = artifact.W.vertices()
    out = verts[rng.integers(0, len(verts), n)] @ model.E.T
    out[0] = model.E @ worst_disturbance_vertex(artifact.Pdelta, model.E, artifact.W)
    return out


def verify_lipschitz_and_contraction(artifact: DesignArtifact, model: SystemModel = None, n_samples=10_000, seed=0,
                                     n_dynamic=300, dt=0.05, tol=1e-4, slack=1e-6):
    """Sampled Lipschitz bounds, contraction decay over ``dt`` and the tube differential inequality."""
    model = model or artifact.model()
    if artifact.variant == "tmpc":
        return _report("lipschitz_contraction", False, reason="requires a robust design")
    ls, lo, n_pairs = sampled_lipschitz(artifact, model, n_samples, seed)
    rng = np.random.default_rng(seed + 1)
    xs, vs = _domain(model, rng, n_dynamic)
    zs, _ = _domain(model, rng, n_dynamic)
    # short separations keep the sampled flow inside the gridded domain
    zs = xs + 0.1 * (zs - xs)
    zs[0] = xs[0]  # paired with the bound-attaining perturbation
    ratios = contraction_ratios(artifact, model, xs, zs, vs, dt)
    bound = math.exp(-artifact.rho * dt) + 1e-6
    res = disturbed_decay_residuals(artifact, model, xs, zs, vs, _perturbations(artifact, model, rng, n_dynamic))
    scale = 1.0 + artifact.wbar + artifact.s_bar
    gap = _wbar_gap(artifact, model)
    passed = (ls <= 1 + slack and lo <= 1 + slack and float(np.max(ratios)) <= bound
              and float(np.max(res)) <= tol * scale and gap <= 1e-9 * (1.0 + artifact.wbar))
    return _report("lipschitz_contraction", passed, pairs=n_pairs, max_ratio_system=ls, max_ratio_obstacle=lo,
                   max_contraction_ratio=float(np.max(ratios)), contraction_bound=bound,
                   max_disturbed_decay_residual=float(np.max(res)), residual_tolerance=tol * scale,
                   wbar_gap=gap)


def _wbar_gap(artifact, model):
    """Recomputed disturbance bound minus the stored one."""
    if artifact.W is None:
        return 0.0
    if artifact.variant == "rompc":
        val = compute_wbar_o(artifact.Pdelta, artifact.L, model.C, model.F, artifact.H, artifact.epsilon)
    else:
        val = compute_wbar(artifact.Pdelta, model.E, artifact.W)
    return abs(val - artifact.wbar)


# ---------------------------------------------------------------- terminal scaling oracle

def brute_force_alpha(P, K, rows, n_samples=100_000, seed=0, reference_points=None):
    """Largest ``alpha`` such that sampled points of ``{d' P d <= alpha^2}`` keep
    ``[u^r + K d; x^r + d]`` inside ``rows`` for every reference point.

    Points are drawn uniformly on the ellipsoid boundary, where the linear rows bind.
    Since every sample scales linearly with ``alpha``, the bisection limit is the
    minimum ratio of slack to directional growth, computed exactly.
    """
    P = np.asarray(P, dtype=float)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    n_u, n_x = K.shape
    if rows is None or rows.n_rows == 0:
        return math.inf
    if reference_points is None:
        reference_points = [np.zeros(n_u + n_x)]
    rng = np.random.default_rng(seed)
    dirs = _unit_sphere(rng, n_samples, n_x) @ inv_sqrt(P).T  # d with d' P d = 1
    Lu, Lx = _split_rows(rows, n_u)
    growth = dirs @ (K.T @ Lu.T + Lx.T)  # (samples, rows)
    best = math.inf
    for r in reference_points:
        slack = rows.b - rows.A @ np.asarray(r, dtype=float)
        if np.any(slack < 0):
            return 0.0
        g = growth.max(axis=0)
        with np.errstate(divide="ignore"):
            lim = np.where(g > 0, slack / np.where(g > 0, g, 1.0), math.inf)
        best = min(best, float(np.min(lim)))
    return best
