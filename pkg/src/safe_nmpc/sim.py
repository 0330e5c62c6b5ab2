"""Closed-loop simulation of the three controllers under sampled disturbances and noise."""
from __future__ import annotations

import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .model import BoxSet, ReferenceTrajectory, build_corridor, reference_from_config, rk4
from .observer import observer_rhs
from .ocp import OcpOptions, build_ocp, make_candidate, score_candidate, solve_ocp, stage_cost_integral
from .synthesis import DesignArtifact, worst_disturbance_vertex
from .tube import feedback_kappa, sqrt_vdelta, tube_size

SCHEMA = 1
DISTURBANCE_MODES = ("zero", "uniform", "vertex_hold", "worst_case_probe")


# ---------------------------------------------------------------- scenarios

@dataclass
class Scenario:
    variant: str
    artifact_path: str
    reference: dict
    N: int
    Ts: float
    duration: float
    obstacles: Optional[dict] = None
    disturbance: str = "zero"
    noise: str = "zero"
    seed: int = 0
    substeps: int = 10
    dwell: Optional[float] = None
    x0: Optional[list] = None
    xhat0: Optional[list] = None
    on_infeasible: str = "halt"
    ocp: dict = field(default_factory=dict)
    artifact: Optional[DesignArtifact] = None  # preloaded artifact overrides the path

    def __post_init__(self):
        if self.variant not in ("tmpc", "rmpc", "rompc"):
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.disturbance not in DISTURBANCE_MODES or self.noise not in DISTURBANCE_MODES:
            raise ConfigurationError("unknown disturbance or noise mode")
        if self.Ts <= 0 or self.N < 1 or self.substeps < 1:
            raise ConfigurationError("need Ts > 0, N >= 1 and substeps >= 1")
        steps = self.duration / self.Ts
        if self.duration <= 0 or abs(steps - round(steps)) > 1e-9:
            raise ConfigurationError("duration must be a positive multiple of Ts")
        if self.on_infeasible not in ("halt", "continue"):
            raise ConfigurationError("on_infeasible must be 'halt' or 'continue'")

    @property
    def n_steps(self):
        return int(round(self.duration / self.Ts))

    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = dict(d)
        d.pop("schema", None)
        d.pop("seeds", None)
        path = d.pop("artifact", None)
        if path is None:
            raise ConfigurationError("scenario needs an 'artifact' path")
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        try:
            return cls(artifact_path=path, **d)
        except TypeError as exc:
            raise ConfigurationError(f"bad scenario field: {exc}") from None

    def load_artifact(self):
        if self.artifact is None:
            self.artifact = DesignArtifact.load(self.artifact_path)
        if self.artifact.variant != self.variant:
            raise ConfigurationError(f"artifact variant {self.artifact.variant} does not match {self.variant}")
        return self.artifact


# ---------------------------------------------------------------- disturbances

class DisturbanceStream:
    """Reproducible draws from ``w^b (+) W`` according to a sampling mode."""

    def __init__(self, mode, box: BoxSet, bias, rng: np.random.Generator, dwell=None, probe=None):
        if mode not in DISTURBANCE_MODES:
            raise ConfigurationError(f"unknown mode {mode!r}")
        self.mode, self.box, self.rng = mode, box, rng
        self.bias = np.asarray(bias, dtype=float)
        self.dwell = dwell
        self.probe = None if probe is None else np.asarray(probe, dtype=float)
        self._slot, self._vertex = None, None

    def draw(self, t):
        return sample_disturbance(self.mode, self.box, t, self)


def sample_disturbance(mode, W: BoxSet, t, stream: DisturbanceStream):
    if mode == "zero":
        return stream.bias.copy()
    if mode == "uniform":
        return stream.bias + stream.rng.uniform(W.lower, W.upper)
    if mode == "vertex_hold":
        if stream.dwell is None or stream.dwell <= 0:
            raise ConfigurationError("vertex_hold needs a positive dwell")
        slot = int(math.floor(t / stream.dwell + 1e-9))
        if slot != stream._slot:
            pick = stream.rng.integers(0, 2, size=W.dim)
            stream._vertex = np.where(pick == 1, W.upper, W.lower)
            stream._slot = slot
        return stream.bias + stream._vertex
    if mode == "worst_case_probe":
        if stream.probe is None:
            raise ConfigurationError("worst_case_probe needs the argmax vertex")
        return stream.bias + stream.probe
    raise ConfigurationError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------- traces

@dataclass
class SimTrace:
    variant: str
    seed: int
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    xhat: list = field(default_factory=list)
    u: list = field(default_factory=list)
    w: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    s: list = field(default_factory=list)
    margin_sys: list = field(default_factory=list)
    margin_obs: list = field(default_factory=list)
    margin_term: list = field(default_factory=list)
    status: list = field(default_factory=list)
    plan_index: list = field(default_factory=list)
    tube_gap: list = field(default_factory=list)  # sqrt(V(state, z*)) - s
    observer_gap: list = field(default_factory=list)  # sqrt(V(x, xhat)) - eps
    tracking_error: list = field(default_factory=list)
    x_ref: list = field(default_factory=list)
    steps: list = field(default_factory=list)  # per MPC instant
    outcome: str = "completed"

    def csv_text(self):
        n_x = len(self.x[0]) if self.x else 0
        n_u = len(self.u[0]) if self.u else 0
        n_w = len(self.w[0]) if self.w else 0
        n_e = len(self.eta[0]) if self.eta else 0
        head = (["t"] + [f"x{i}" for i in range(n_x)] + [f"xhat{i}" for i in range(n_x)]
                + [f"u{i}" for i in range(n_u)] + [f"w{i}" for i in range(n_w)] + [f"eta{i}" for i in range(n_e)]
                + ["s", "margin_sys", "margin_obs", "margin_term", "status"])
        buf = io.StringIO()
        buf.write(",".join(head) + "\n")
        for i in range(len(self.t)):
            vals = [self.t[i], *self.x[i], *self.xhat[i], *self.u[i], *self.w[i], *self.eta[i], self.s[i],
                    self.margin_sys[i], self.margin_obs[i], self.margin_term[i]]
            buf.write(",".join("%.17g" % v for v in vals) + "," + self.status[i] + "\n")
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.csv_text())

    def summary(self, tol=1e-6):
        def worst(vals):
            vals = [v for v in vals if v is not None and not math.isnan(v)]
            return min(vals) if vals else None

        cand = [m for st in self.steps if st.get("candidate_margins") for m in [st["candidate_margins"]["worst"]]]
        return {
            "schema": SCHEMA,
            "variant": self.variant,
            "seed": self.seed,
            "outcome": self.outcome,
            "mpc_steps": len(self.steps),
            "fine_steps": len(self.t),
            "violations": {
                "system": int(sum(m < -tol for m in self.margin_sys)),
                "obstacle": int(sum(m < -tol for m in self.margin_obs if not math.isnan(m))),
                "tube": int(sum(g > tol for g in self.tube_gap if not math.isnan(g))),
                "observer": int(sum(g > tol for g in self.observer_gap if not math.isnan(g))),
                "candidate": int(sum(m < -tol for m in cand)),
                "entry": int(sum(st.get("entry_gap", -1.0) > tol for st in self.steps)),
            },
            "worst": {
                "margin_sys": worst(self.margin_sys),
                "margin_obs": worst([m for m in self.margin_obs if not math.isnan(m)]),
                "tube_gap": max([g for g in self.tube_gap if not math.isnan(g)], default=None),
                "observer_gap": max([g for g in self.observer_gap if not math.isnan(g)], default=None),
                "candidate_margin": worst(cand),
            },
            "costs": [st["objective"] for st in self.steps],
            "final_tracking_error": self.tracking_error[-1] if self.tracking_error else None,
            "initial_tracking_error": self.tracking_error[0] if self.tracking_error else None,
        }

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["schema"] = SCHEMA
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA:
            raise ConfigurationError("trace schema mismatch")
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @property
    def hard_violation(self):
        v = self.summary()["violations"]
        return v["system"] > 0 or v["obstacle"] > 0


# ---------------------------------------------------------------- closed loop

def _corridor(scn, model, plan, reference, t, state, N, Ts):
    spec = scn.obstacles
    if not spec:
        return None
    if spec.get("kind", "corridor") != "corridor":
        raise ConfigurationError(f"unknown obstacle kind {spec.get('kind')!r}")
    if plan is None:
        pts = [model.position(state)] + [model.position(reference.at(t + k * Ts)[0]) for k in range(1, N + 1)]
    else:
        pts = [model.position(z) for z in plan.z[1:]] + [model.position(reference.at(t + N * Ts)[0])]
    bounds = spec.get("bounds")
    bounds = None if bounds is None else BoxSet(bounds["lower"], bounds["upper"])
    return build_corridor(np.array(pts), float(spec["half_width"]), N, bounds)


def run_closed_loop(scn: Scenario) -> SimTrace:
    art = scn.load_artifact()
    model = art.model()
    reference = reference_from_config(model, scn.reference)
    N, Ts, sub = scn.N, scn.Ts, scn.substeps
    h = Ts / sub
    if art.variant != "tmpc":
        tight = art.c_s * (tube_size(art.rho, art.wbar, N * Ts) + (art.epsilon if art.variant == "rompc" else 0.0))
        if reference.min_margin(art.rows, tight) < 0:
            warnings.warn("reference leaves the tightened constraints; candidate margins may go negative",
                          RuntimeWarning, stacklevel=2)
    rows = art.rows
    n_u = model.n_u
    opts = OcpOptions(**scn.ocp)
    ss = np.random.SeedSequence(scn.seed)
    rng_w, rng_eta = (np.random.Generator(np.random.PCG64(c)) for c in ss.spawn(2))
    W = art.W if art.W is not None else BoxSet(np.zeros(model.n_w), np.zeros(model.n_w))
    H = art.H if art.H is not None else BoxSet(np.zeros(model.n_eta), np.zeros(model.n_eta))
    dwell = scn.dwell if scn.dwell is not None else Ts
    probe_w = worst_disturbance_vertex(art.metric, model.E, W) if scn.disturbance == "worst_case_probe" else None
    probe_e = H.vertices()[0] if scn.noise == "worst_case_probe" else None
    wstream = DisturbanceStream(scn.disturbance, W, model.w_bias, rng_w, dwell, probe_w)
    estream = DisturbanceStream(scn.noise, H, np.zeros(model.n_eta), rng_eta, dwell, probe_e)

    x = np.asarray(scn.x0 if scn.x0 is not None else reference.at(0.0)[0], dtype=float)
    rompc = scn.variant == "rompc"
    xhat = np.asarray(scn.xhat0 if scn.xhat0 is not None else x, dtype=float) if rompc else None
    trace = SimTrace(variant=scn.variant, seed=scn.seed)
    prev_sol = prev_prob = None
    metric = art.metric

    for i in range(scn.n_steps):
        t = i * Ts
        state = xhat if rompc else x
        schedule = _corridor(scn, model, prev_sol, reference, t, state, N, Ts)
        prob = build_ocp(scn.variant, model, art, reference, schedule, state, N, Ts, t0=t, substeps=opts.substeps)
        cand = None
        if prev_sol is not None:
            cand = make_candidate(prev_sol, prev_prob, art, reference, state, substeps=sub)
            cand = score_candidate(cand, prob)
        sol = solve_ocp(prob, cand if cand is not None else None, opts)
        step = {"index": i, "t": t, "status": sol.status, "objective": sol.objective, "kkt": sol.kkt,
                "iterations": sol.iterations, "margins": _jsonable(sol.margins),
                "candidate_margins": None if cand is None else _jsonable(cand.margins),
                "candidate_objective": None if cand is None else cand.objective,
                "stage_cost_0": stage_cost_integral(prob, sol.z, sol.v, 0) if sol.ok else None,
                "z": sol.z.tolist(), "v": sol.v.tolist(), "tube": prob.tube.tolist(),
                "binding": [list(map(str, b)) for b in sol.binding]}
        plan, plan_status = sol, sol.status
        if not sol.ok:
            if scn.on_infeasible == "halt" or cand is None or cand.status == "infeasible":
                step["action"] = "halt"
                trace.steps.append(step)
                trace.outcome = "infeasible_halt"
                break
            plan, plan_status = cand, "candidate_fallback"
            step["action"] = "candidate_fallback"
        trace.steps.append(step)

        z0, v0 = plan.z[0].copy(), plan.v[0].copy()
        obs0 = schedule[0] if schedule is not None else None
        term_margin = plan.margins.get("terminal", math.nan) if plan.margins else math.nan
        z = z0.copy()
        for j in range(sub):
            tau = j * h
            w = wstream.draw(t + tau)
            eta = estream.draw(t + tau)
            y_meas = model.C @ x + model.F @ eta if rompc else None
            u_now = _law(art, scn.variant, x, xhat, z, v0)
            _log(trace, model, rows, n_u, art, reference, obs0, metric, t + tau, tau, x, xhat, z, u_now, w, eta,
                 term_margin, plan_status, i)
            yv = np.concatenate([x, z] + ([xhat] if rompc else []))
            yv = rk4(_joint_rhs(model, art, scn.variant, w, y_meas, v0), yv, 0.0, h, 1)
            x, z = yv[:model.n_x], yv[model.n_x:2 * model.n_x]
            if rompc:
                xhat = yv[2 * model.n_x:]
        if art.variant != "tmpc":
            # tube membership of the next initial condition, which the candidate relies on
            step["entry_gap"] = sqrt_vdelta(metric, xhat if rompc else x, z) - tube_size(art.rho, art.wbar, Ts)
        prev_sol, prev_prob = plan, prob
    else:
        t_end = scn.n_steps * Ts
        w = wstream.draw(t_end)
        eta = estream.draw(t_end)
        u_now = _law(art, scn.variant, x, xhat, z, v0) if trace.steps else np.zeros(n_u)
        _log(trace, model, rows, n_u, art, reference, obs0 if trace.steps else None, metric, t_end, Ts, x, xhat, z,
             u_now, w, eta, term_margin, plan_status, scn.n_steps - 1)
    return trace


def _law(art, variant, x, xhat, z, v):
    if variant == "tmpc":
        return v
    if variant == "rmpc":
        return feedback_kappa(art, x, z, v)
    return feedback_kappa(art, xhat, z, v)


def _joint_rhs(model, art, variant, w, y_meas, v):
    n = model.n_x
    Ew = model.E @ w

    def rhs(t, y):
        x, z = y[:n], y[n:2 * n]
        if variant == "rompc":
            xh = y[2 * n:]
            u = feedback_kappa(art, xh, z, v)
            dxh = observer_rhs(model, art.L, xh, u, y_meas)
        else:
            u = v if variant == "tmpc" else feedback_kappa(art, x, z, v)
        dx = np.asarray(model.f(x, u), dtype=float) + Ew
        dz = np.asarray(model.f(z, v), dtype=float) + model.bias_drift
        parts = [dx, dz] + ([dxh] if variant == "rompc" else [])
        return np.concatenate(parts)

    return rhs


def _log(trace, model, rows, n_u, art, reference, obs0, metric, t, tau, x, xhat, z, u, w, eta, term_margin,
         status, plan_index):
    trace.t.append(float(t))
    trace.x.append(x.tolist())
    trace.xhat.append((xhat if xhat is not None else x).tolist())
    trace.u.append(np.asarray(u, dtype=float).tolist())
    trace.w.append(np.asarray(w, dtype=float).tolist())
    trace.eta.append(np.asarray(eta, dtype=float).tolist())
    s = 0.0 if art.variant == "tmpc" else tube_size(art.rho, art.wbar, tau)
    trace.s.append(float(s))
    trace.margin_sys.append(float(np.min(rows.margins(np.concatenate([u, x])))))
    trace.margin_obs.append(float(np.min(obs0.margins(model.position(x)))) if obs0 is not None else math.nan)
    trace.margin_term.append(float(term_margin))
    trace.status.append(status)
    trace.plan_index.append(int(plan_index))
    if art.variant == "tmpc":
        trace.tube_gap.append(math.nan)
    else:
        ctrl = xhat if xhat is not None else x
        trace.tube_gap.append(sqrt_vdelta(metric, ctrl, z) - s)
    trace.observer_gap.append(sqrt_vdelta(metric, x, xhat) - art.epsilon if xhat is not None else math.nan)
    xr = reference.at(t)[0]
    trace.x_ref.append(xr.tolist())
    trace.tracking_error.append(float(np.linalg.norm(x - xr)))


def _jsonable(d):
    if d is None:
        return None
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.floating, float)):
            out[k] = float(v)
        elif isinstance(v, list):
            out[k] = list(v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------- batches

def worker_count(requested=None):
    cap = os.environ.get("SAFE_NMPC_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigurationError("SAFE_NMPC_THREADS must be an integer") from None
    return max(1, n)


def _run_seed(args):
    scn_dict, seed, out_dir = args
    scn = Scenario(**{**scn_dict, "seed": seed})
    trace = run_closed_loop(scn)
    if out_dir is not None:
        trace.write_csv(os.path.join(out_dir, f"trace_seed{seed}.csv"))
    return trace.summary()


def run_batch(scn: Scenario, seeds, out_dir=None, workers=None):
    """Independent runs per seed; returns the list of run summaries in seed order."""
    base = {k: getattr(scn, k) for k in scn.__dataclass_fields__ if k not in ("seed", "artifact")}
    base["artifact"] = scn.load_artifact()
    jobs = [(base, int(s), out_dir) for s in seeds]
    n = worker_count(workers)
    if n == 1 or len(jobs) == 1:
        return [_run_seed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(_run_seed, jobs))


def aggregate(summaries):
    keys = ("system", "obstacle", "tube", "observer", "candidate", "entry")
    agg = {"schema": SCHEMA, "runs": len(summaries),
           "violations": {k: int(sum(s["violations"][k] for s in summaries)) for k in keys},
           "outcomes": {}}
    for s in summaries:
        agg["outcomes"][s["outcome"]] = agg["outcomes"].get(s["outcome"], 0) + 1
    for k in ("margin_sys", "margin_obs", "candidate_margin"):
        vals = [s["worst"][k] for s in summaries if s["worst"][k] is not None]
        agg.setdefault("worst", {})[k] = min(vals) if vals else None
    for k in ("tube_gap", "observer_gap"):
        vals = [s["worst"][k] for s in summaries if s["worst"][k] is not None]
        agg["worst"][k] = max(vals) if vals else None
    return agg


def summary_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
