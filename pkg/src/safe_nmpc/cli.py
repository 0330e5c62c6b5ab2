"""Command line entry point: ``safe-nmpc {synth,simulate,verify,report}``.

Exit codes
    0  success
    1  a check failed (validation, hard violation, or verifier)
    2  bad input: unparsable config, multiplier inequality, missing or corrupted
       artifact, unknown or empty check list
    3  infeasible synthesis
    4  closed loop halted on an infeasible optimal control problem
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import sys

import click

from .errors import ArtifactError, BuildError, ConfigurationError, SynthesisError
from .model import reference_from_config
from .sim import Scenario, SimTrace, aggregate, run_batch, run_closed_loop, summary_json
from .synthesis import DesignArtifact, run_synthesis, validation_passes
from .verify import (verify_descent, verify_lipschitz_and_contraction, verify_recursive_feasibility,
                     verify_terminal_invariance)

SCHEMA = 1
EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_HALT = 0, 1, 2, 3, 4
CHECKS = ("descent", "recursive_feasibility", "terminal_invariance", "lipschitz_contraction")


class _Abort(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _fail(code, message):
    raise _Abort(code, message)


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        _fail(EXIT_INPUT, f"file not found: {path}")
    except json.JSONDecodeError as exc:
        _fail(EXIT_INPUT, f"cannot parse {path}: {exc}")


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _load_scenario(path, artifact_override=None):
    d = _read_json(path)
    if artifact_override:
        d["artifact"] = os.path.abspath(artifact_override)
    try:
        scn = Scenario.from_dict(d, base_dir=os.path.dirname(os.path.abspath(path)))
        scn.load_artifact()
    except FileNotFoundError:
        _fail(EXIT_INPUT, f"artifact not found: {d.get('artifact')}")
    except ArtifactError as exc:
        _fail(EXIT_INPUT, f"artifact invariant '{exc.invariant}' violated: {exc}")
    except ConfigurationError as exc:
        _fail(EXIT_INPUT, str(exc))
    return scn, d


def _run(fn):
    try:
        return fn()
    except _Abort as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)


@click.group()
def main():
    """Tube-based tracking MPC: offline synthesis, closed-loop simulation and verification."""


@main.command()
@click.argument("config_path", type=click.Path())
@click.option("--out", "out_path", type=click.Path(), default=None, help="Artifact path (default: <config>.artifact.json).")
@click.option("--validation", "val_path", type=click.Path(), default=None, help="Validation report path.")
def synth(config_path, out_path, val_path):
    """Solve the offline design problems and write a design artifact."""

    def go():
        cfg = _read_json(config_path)
        out = out_path or os.path.splitext(config_path)[0] + ".artifact.json"
        val = val_path or os.path.splitext(out)[0] + ".validation.json"
        try:
            art = run_synthesis(cfg)
        except SynthesisError as exc:
            _fail(EXIT_INFEASIBLE, f"synthesis infeasible ({exc.tag}): {exc}")
        except (ConfigurationError, KeyError, TypeError) as exc:
            _fail(EXIT_INPUT, str(exc) if isinstance(exc, ConfigurationError) else f"bad config: {exc!r}")
        _write(out, art.to_json())
        ok = validation_passes(art.validation)
        _write(val, _dump({"schema": SCHEMA, "artifact": os.path.basename(out), "passed": ok,
                           **art.validation}))
        click.echo(f"wrote {out} (alpha={art.alpha:.6g}, validation {'passed' if ok else 'FAILED'})")
        if not ok:
            sys.exit(EXIT_CHECK)

    _run(go)


@main.command()
@click.argument("scenario_path", type=click.Path())
@click.option("--out-dir", type=click.Path(), default=None, help="Output directory (default: next to the scenario).")
@click.option("--artifact", "artifact_path", type=click.Path(), default=None, help="Override the scenario's artifact.")
@click.option("--seeds", type=int, default=None, help="Run a batch over seeds first..first+N-1.")
@click.option("--first-seed", type=int, default=0)
@click.option("--workers", type=int, default=None, help="Worker processes (capped by SAFE_NMPC_THREADS).")
def simulate(scenario_path, out_dir, artifact_path, seeds, first_seed, workers):
    """Run the closed loop; writes trace CSV, full trace JSON and a summary."""

    def go():
        scn, raw = _load_scenario(scenario_path, artifact_path)
        out = out_dir or os.path.splitext(scenario_path)[0] + "_out"
        os.makedirs(out, exist_ok=True)
        n = seeds if seeds is not None else raw.get("seeds")
        if n is not None:
            seed_list = list(range(first_seed, first_seed + int(n)))
            try:
                summaries = run_batch(scn, seed_list, out_dir=out, workers=workers)
            except (ConfigurationError, BuildError) as exc:
                _fail(EXIT_INPUT, str(exc))
            agg = aggregate(summaries)
            agg["seeds"] = seed_list
            _write(os.path.join(out, "summaries.json"), _dump({"schema": SCHEMA, "runs": summaries}))
            _write(os.path.join(out, "aggregate.json"), summary_json(agg))
            click.echo(f"{len(seed_list)} runs -> {out}; violations {agg['violations']}")
            if agg["outcomes"].get("infeasible_halt"):
                sys.exit(EXIT_HALT)
            if agg["violations"]["system"] or agg["violations"]["obstacle"]:
                sys.exit(EXIT_CHECK)
            return
        try:
            trace = run_closed_loop(scn)
        except (ConfigurationError, BuildError) as exc:
            _fail(EXIT_INPUT, str(exc))
        trace.write_csv(os.path.join(out, "trace.csv"))
        _write(os.path.join(out, "trace.json"), trace.to_json())
        summary = trace.summary()
        _write(os.path.join(out, "summary.json"), summary_json(summary))
        click.echo(f"{trace.outcome}: {len(trace.steps)} MPC steps -> {out}; violations {summary['violations']}")
        if trace.outcome == "infeasible_halt":
            sys.exit(EXIT_HALT)
        if trace.hard_violation:
            sys.exit(EXIT_CHECK)

    _run(go)


def _parse_checks(checks):
    names = [c.strip() for c in (checks or "").split(",") if c.strip()]
    if not names:
        _fail(EXIT_INPUT, "no checks selected")
    unknown = [c for c in names if c not in CHECKS]
    if unknown:
        _fail(EXIT_INPUT, f"unknown check(s) {unknown}; available: {list(CHECKS)}")
    return names


@main.command()
@click.argument("scenario_path", type=click.Path())
@click.option("--checks", default=",".join(CHECKS), show_default=True, help="Comma-separated check names.")
@click.option("--trace", "trace_paths", multiple=True, type=click.Path(), help="trace.json from simulate (repeatable).")
@click.option("--artifact", "artifact_path", type=click.Path(), default=None, help="Override the scenario's artifact.")
@click.option("--samples", type=int, default=None, help="Sample count for the sampling checks.")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", type=click.Path(), default=None, help="Report path (default: stdout only).")
def verify(scenario_path, checks, trace_paths, artifact_path, samples, seed, out_path):
    """Run numerical checks against an artifact and simulated traces."""

    def go():
        names = _parse_checks(checks)
        scn, _ = _load_scenario(scenario_path, artifact_path)
        art = scn.artifact
        model = art.model()
        traces = []
        for p in trace_paths:
            try:
                traces.append(SimTrace.from_dict(_read_json(p)))
            except (ConfigurationError, TypeError) as exc:
                _fail(EXIT_INPUT, f"bad trace {p}: {exc}")
        if any(n in ("descent", "recursive_feasibility") for n in names) and not traces:
            _fail(EXIT_INPUT, "trace-based checks need at least one --trace")
        reports = []
        for name in names:
            if name == "descent":
                reports += [verify_descent(t, art) for t in traces]
            elif name == "recursive_feasibility":
                reports += [verify_recursive_feasibility(t, art) for t in traces]
            elif name == "terminal_invariance":
                ref = reference_from_config(model, scn.reference)
                reports.append(verify_terminal_invariance(art, ref, samples or 100, seed, Ts=scn.Ts, model=model))
            elif art.variant == "tmpc":
                reports.append({"schema": SCHEMA, "check": name, "passed": True, "skipped": "tmpc has no tube"})
            else:
                reports.append(verify_lipschitz_and_contraction(art, model, samples or 10_000, seed))
        passed = all(r["passed"] for r in reports)
        text = _dump({"schema": SCHEMA, "passed": passed, "checks": reports})
        if out_path:
            _write(out_path, text)
        click.echo(text, nl=False)
        for r in reports:
            click.echo(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']}", err=True)
        if not passed:
            sys.exit(EXIT_CHECK)

    _run(go)


_REPORT_FIELDS = ("seed", "outcome", "mpc_steps", "v_system", "v_obstacle", "v_tube", "v_observer", "v_candidate",
                  "worst_margin_sys", "worst_margin_obs", "worst_tube_gap", "worst_observer_gap",
                  "worst_candidate_margin", "initial_tracking_error", "final_tracking_error")


def _rows_from(obj):
    runs = obj["runs"] if isinstance(obj.get("runs"), list) else [obj]
    for s in runs:
        if "violations" not in s:
            continue
        v, w = s["violations"], s["worst"]
        yield {"seed": s.get("seed"), "outcome": s.get("outcome"), "mpc_steps": s.get("mpc_steps"),
               **{f"v_{k}": v.get(k) for k in ("system", "obstacle", "tube", "observer", "candidate")},
               "worst_margin_sys": w.get("margin_sys"), "worst_margin_obs": w.get("margin_obs"),
               "worst_tube_gap": w.get("tube_gap"), "worst_observer_gap": w.get("observer_gap"),
               "worst_candidate_margin": w.get("candidate_margin"),
               "initial_tracking_error": s.get("initial_tracking_error"),
               "final_tracking_error": s.get("final_tracking_error")}


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4g}"
    return str(v)


@main.command()
@click.argument("summary_paths", nargs=-1, type=click.Path())
@click.option("--csv", "csv_path", type=click.Path(), default=None, help="Write a plot-ready CSV of all runs.")
def report(summary_paths, csv_path):
    """Tabulate run summaries (summary.json or summaries.json from a batch)."""

    def go():
        if not summary_paths:
            _fail(EXIT_INPUT, "no summaries given")
        rows = []
        for p in summary_paths:
            obj = _read_json(p)
            if obj.get("schema") != SCHEMA:
                _fail(EXIT_INPUT, f"{p}: unsupported schema {obj.get('schema')!r}")
            rows.extend(_rows_from(obj))
        cols = ("seed", "outcome", "v_system", "v_obstacle", "v_tube", "v_candidate", "worst_margin_sys",
                "worst_tube_gap", "final_tracking_error")
        widths = [max(len(c), *(len(_fmt(r[c])) for r in rows)) if rows else len(c) for c in cols]
        click.echo("  ".join(c.rjust(w) for c, w in zip(cols, widths)))
        for r in rows:
            click.echo("  ".join(_fmt(r[c]).rjust(w) for c, w in zip(cols, widths)))
        total = {k: sum(r[k] or 0 for r in rows) for k in ("v_system", "v_obstacle", "v_tube", "v_candidate")}
        click.echo(f"runs={len(rows)} " + " ".join(f"{k}={v}" for k, v in total.items()))
        if csv_path:
            buf = io.StringIO()
            wr = csv.DictWriter(buf, fieldnames=_REPORT_FIELDS, lineterminator="\n")
            wr.writeheader()
            for r in rows:
                wr.writerow({k: ("" if r[k] is None else r[k]) for k in _REPORT_FIELDS})
            _write(csv_path, f"# schema={SCHEMA}\n" + buf.getvalue())

    _run(go)


if __name__ == "__main__":
    main()
