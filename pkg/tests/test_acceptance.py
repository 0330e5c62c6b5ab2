"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line."""
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import scipy.linalg

from conftest import ACCEPTANCE, load_config, scenario_dict
from safe_nmpc.model import BoxSet, reference_from_config, rk4
from safe_nmpc.sim import Scenario, aggregate, run_batch, run_closed_loop
from safe_nmpc.synthesis import compute_alpha_lp, compute_wbar, run_synthesis, validate_design
from safe_nmpc.tube import check_s_bound, tube_size
from safe_nmpc.verify import brute_force_alpha, sampled_lipschitz, verify_descent, verify_terminal_invariance

SEEDS = range(100)


@contextmanager
def criterion(n, title):
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        line = f"FAIL criterion {n:2d}: {title} [{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}]"
        ACCEPTANCE[n] = line
        print(line)
        raise
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}" for k, v in info.items())
    line = f"PASS criterion {n:2d}: {title} ({detail}; {elapsed:.1f} s)"
    ACCEPTANCE[n] = line
    print(line)


def _timed_below(t0, limit):
    elapsed = time.perf_counter() - t0
    assert elapsed < limit, f"runtime {elapsed:.1f} s exceeds {limit} s"
    return elapsed


def test_criterion_01_tube_closed_form():
    with criterion(1, "tube closed form vs RK4") as info:
        t0 = time.perf_counter()
        rho, wbar = 1.0, 0.5
        ts = np.linspace(0.0, 5.0, 501)
        s = np.zeros(1)
        worst = 0.0
        for a, b in zip(ts[:-1], ts[1:]):
            s = rk4(lambda t, y: -rho * y + wbar, s, a, b - a, substeps=1)
            worst = max(worst, abs(s[0] - tube_size(rho, wbar, b)))
        info["max_abs_error"] = worst
        info["runtime_s"] = _timed_below(t0, 1.0)
        assert worst <= 1e-8


def test_criterion_02_tube_recursion_identity():
    with criterion(2, "tube recursion identity") as info:
        t0 = time.perf_counter()
        tau = np.linspace(0.0, 5.0, 10_000)
        r = check_s_bound(1.0, 1.0, 0.1, tau)
        # the scan reports the minimum; the maximum gets the same treatment by flipping the sign
        r_max = -check_s_bound(1.0, 1.0, 0.1, tau, s_fn=lambda t: -tube_size(1.0, 1.0, t))
        info["min_residual"] = r
        info["max_residual"] = r_max
        info["runtime_s"] = _timed_below(t0, 1.0)
        assert abs(r) <= 1e-12 and abs(r_max) <= 1e-12


def test_criterion_03_scalar_synthesis_oracles():
    with criterion(3, "scalar synthesis vs Riccati and dense-grid contraction") as info:
        t0 = time.perf_counter()
        art = run_synthesis(load_config("scalar_tmpc"))
        Pare = scipy.linalg.solve_continuous_are(np.zeros((1, 1)), np.ones((1, 1)), np.eye(1), np.eye(1))
        info["P_error"] = abs(art.P[0, 0] - Pare[0, 0])
        info["K_error"] = abs(art.K[0, 0] + Pare[0, 0])
        robust = run_synthesis(load_config("scalar_rmpc"))
        rep = validate_design(robust, dense_grid_factor=10)
        info["contraction_residual"] = rep["families"]["contraction"]
        info["runtime_s"] = _timed_below(t0, 30.0)
        assert info["P_error"] <= 1e-4 and info["K_error"] <= 1e-4
        assert rep["families"]["contraction"] <= 1e-6


def test_criterion_04_alpha_lp_vs_sampling():
    with criterion(4, "terminal scaling LP vs ellipsoid sampling (double integrator)") as info:
        t0 = time.perf_counter()
        cfg = load_config("di_tmpc")
        art = run_synthesis(cfg)
        box = cfg["alpha"]["reference_box"]
        refs = BoxSet(box["lower"], box["upper"]).vertices()
        lp = compute_alpha_lp(art.P, art.K, refs, art.rows)
        est = brute_force_alpha(art.P, art.K, art.rows, n_samples=100_000, seed=0, reference_points=refs)
        info["alpha_lp"] = lp
        info["alpha_sampled"] = est
        info["rel_gap"] = abs(est - lp) / lp
        info["runtime_s"] = _timed_below(t0, 30.0)
        assert info["rel_gap"] <= 0.02


def test_criterion_05_wbar():
    with criterion(5, "disturbance bound on the unit metric") as info:
        w = compute_wbar(np.eye(2), np.eye(2), BoxSet.symmetric([0.1, 0.1]))
        info["error"] = abs(w - math.sqrt(0.02))
        assert info["error"] <= 1e-12


def _batch(name, path, **kw):
    scn = Scenario.from_dict(scenario_dict(name, path, **kw))
    return run_batch(scn, list(SEEDS), workers=1)


@pytest.mark.slow
def test_criterion_06_rmpc_closed_loop(di_rmpc):
    with criterion(6, "RMPC double integrator, 100 uniform-disturbance seeds") as info:
        t0 = time.perf_counter()
        sums = _batch("di_rmpc", di_rmpc[1])
        agg = aggregate(sums)
        v, w = agg["violations"], agg["worst"]
        info.update(runs=agg["runs"], system=v["system"], obstacle=v["obstacle"], tube=v["tube"],
                    candidate=v["candidate"], worst_tube_gap=w["tube_gap"], worst_candidate=w["candidate_margin"])
        info["runtime_s"] = _timed_below(t0, 300.0)
        assert agg["outcomes"] == {"completed": 100}
        assert v["system"] == 0 and v["obstacle"] == 0
        assert v["tube"] == 0 and w["tube_gap"] <= 1e-6
        assert v["candidate"] == 0 and w["candidate_margin"] >= -1e-6


def test_criterion_07_tmpc_convergence(di_tmpc):
    with criterion(7, "TMPC convergence and per-step descent") as info:
        tr = run_closed_loop(Scenario.from_dict(scenario_dict("di_tmpc", di_tmpc[1])))
        rep = verify_descent(tr, di_tmpc[0], tol=1e-4)
        ratio = tr.tracking_error[-1] / tr.tracking_error[0]
        info.update(error_ratio=ratio, steps_checked=rep["steps_checked"], descent_violations=rep["violations"],
                    max_residual=rep["max_residual"])
        assert tr.t[-1] <= 10.0 + 1e-9
        assert ratio <= 1e-3
        assert rep["passed"] and rep["steps_checked"] == len(tr.steps) - 1


def test_criterion_08_terminal_invariance(di_rmpc, di_rompc):
    with criterion(8, "terminal-set invariance at the floor, halved-alpha negative") as info:
        for tag, (art, path), name in (("rmpc", di_rmpc, "di_rmpc"), ("rompc", di_rompc, "di_rompc")):
            ref = reference_from_config(art.model(), scenario_dict(name, path)["reference"])
            floor = art.s_bar + (art.epsilon if tag == "rompc" else 0.0)
            good = verify_terminal_invariance(art, ref, n_samples=100, seed=0, alpha=floor)
            bad = verify_terminal_invariance(art, ref, n_samples=100, seed=0, alpha=0.5 * floor)
            info[f"{tag}_violations"] = good["violations"]
            info[f"{tag}_halved_violations"] = bad["violations"]
            assert good["passed"] and good["samples"] > 100
            assert bad["violations"] >= 1


@pytest.mark.slow
def test_criterion_09_rompc_observer(di_rompc):
    with criterion(9, "ROMPC observer containment, 100 seeds") as info:
        t0 = time.perf_counter()
        sums = _batch("di_rompc", di_rompc[1])
        agg = aggregate(sums)
        v, w = agg["violations"], agg["worst"]
        info.update(runs=agg["runs"], system=v["system"], obstacle=v["obstacle"], observer=v["observer"],
                    worst_observer_gap=w["observer_gap"])
        info["runtime_s"] = _timed_below(t0, 600.0)
        assert agg["outcomes"] == {"completed": 100}
        assert v["observer"] == 0 and w["observer_gap"] <= 1e-6
        assert v["system"] == 0 and v["obstacle"] == 0


def test_criterion_10_sampled_lipschitz(di_rmpc, di_rompc, unicycle_rmpc):
    with criterion(10, "sampled Lipschitz bounds, 1e4 pairs") as info:
        for tag, (art, _) in (("di_rmpc", di_rmpc), ("di_rompc", di_rompc), ("unicycle", unicycle_rmpc)):
            t0 = time.perf_counter()
            ls, lo, n = sampled_lipschitz(art, n_samples=10_000, seed=0)
            info[f"{tag}_sys"] = ls
            info[f"{tag}_obs"] = lo
            _timed_below(t0, 10.0)
            assert n == 10_000
            assert ls <= 1 + 1e-6 and lo <= 1 + 1e-6


def test_criterion_11_determinism(di_rompc, tmp_path):
    with criterion(11, "byte-identical CSV traces") as info:
        paths = []
        for k in range(2):
            tr = run_closed_loop(Scenario.from_dict(scenario_dict("di_rompc", di_rompc[1], seed=11)))
            p = tmp_path / f"run{k}.csv"
            tr.write_csv(p)
            paths.append(p)
        a, b = (p.read_bytes() for p in paths)
        info["bytes"] = len(a)
        assert a == b
