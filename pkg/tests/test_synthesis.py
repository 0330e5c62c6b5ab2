import json
import math
from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import load_config
from safe_nmpc.errors import ArtifactError, ConfigurationError
from safe_nmpc.model import BoxSet, Polytope, box_rows, double_integrator_2d, rk4, scalar_integrator
from safe_nmpc.synthesis import (DesignArtifact, SynthesisGrid, _rpi_delta_core, check_rompc_multipliers,
                                 compute_alpha_lp, compute_tightening_constants, compute_wbar, compute_wbar_o,
                                 norm_bound_block, optimize_observer_gain, rho_sweep, run_synthesis, synth_ccm,
                                 synth_rompc, synth_terminal_cost, synth_tmpc_terminal, validate_design,
                                 validation_passes)
from safe_nmpc.tube import GainTable, feedback_kappa, sqrt_vdelta
from safe_nmpc.verify import brute_force_alpha

SCALAR = scalar_integrator()
SCALAR_GRID = SynthesisGrid.from_model(SCALAR, 2)


def _min_eig(m):
    return float(np.min(np.linalg.eigvalsh(m)))


# ---------------------------------------------------------------- TMPC terminal ingredients

def test_scalar_tmpc_matches_riccati():
    P, K, _ = synth_tmpc_terminal(SCALAR, [1.0], [1.0], 0.0, SCALAR_GRID)
    Pare = scipy.linalg.solve_continuous_are(np.zeros((1, 1)), np.ones((1, 1)), np.eye(1), np.eye(1))
    assert P[0, 0] == pytest.approx(Pare[0, 0], abs=1e-6)
    assert P[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert K[0, 0] == pytest.approx(-1.0, abs=1e-6)


@pytest.mark.parametrize("q, r, eps", [(1.0, 1.0, 0.0), (10.0, 1.0, 0.5)])
def test_double_integrator_tmpc_matches_riccati(q, r, eps):
    m = double_integrator_2d()
    P, K, _ = synth_tmpc_terminal(m, [q] * 4, [r] * 2, eps, SynthesisGrid.from_model(m, 2))
    A, B = m.jac(np.zeros(4), np.zeros(2))
    Pare = scipy.linalg.solve_continuous_are(A, B, (q + eps) * np.eye(4), r * np.eye(2))
    assert np.linalg.norm(P - Pare) <= 1e-4
    np.testing.assert_allclose(K, -B.T @ Pare / r, atol=1e-4)


def test_tmpc_artifact_validates_on_dense_grid(di_tmpc):
    art, _ = di_tmpc
    rep = validate_design(art, dense_grid_factor=10)
    assert rep["families"]["tracking"] <= 1e-6


# ---------------------------------------------------------------- terminal scaling

def _scalar_rows():
    return box_rows(BoxSet.symmetric([1.0]), BoxSet.symmetric([1.0]))


def test_alpha_lp_scalar_examples():
    origin = [np.zeros(2)]
    assert compute_alpha_lp([[1.0]], [[-0.5]], origin, _scalar_rows()) == pytest.approx(1.0, abs=1e-12)
    state_only = Polytope(np.array([[0.0, 1.0], [0.0, -1.0]]), np.ones(2))
    assert compute_alpha_lp([[1.0]], [[0.0]], origin, state_only) == pytest.approx(1.0, abs=1e-12)
    assert compute_alpha_lp([[4.0]], [[0.0]], origin, state_only) == pytest.approx(2.0, abs=1e-12)


def test_alpha_lp_agrees_with_sampling():
    P, K = np.array([[1.0]]), np.array([[-0.5]])
    lp = compute_alpha_lp(P, K, [np.zeros(2)], _scalar_rows())
    brute = brute_force_alpha(P, K, _scalar_rows(), n_samples=2000, seed=1)
    assert brute == pytest.approx(lp, rel=1e-9)


def test_alpha_lp_rejects_inconsistent_reference():
    with pytest.raises(ConfigurationError, match="violates row"):
        compute_alpha_lp([[1.0]], [[0.0]], [np.array([0.0, 2.0])], _scalar_rows())


# ---------------------------------------------------------------- tightening constants

def test_tightening_constant_examples():
    state_row = Polytope(np.array([[0.0, 1.0, 0.0]]), np.ones(1))
    c_s, _ = compute_tightening_constants(np.eye(2), np.zeros((1, 2)), state_row, np.eye(2))
    assert c_s[0] == pytest.approx(1.0)
    input_row = Polytope(np.array([[1.0, 0.0, 0.0, 0.0]]), np.ones(1))
    c_s, _ = compute_tightening_constants(np.eye(2), -np.eye(2), input_row, np.eye(2))
    assert c_s[0] == pytest.approx(1.0)
    _, c_o = compute_tightening_constants(np.diag([4.0, 1.0]), np.zeros((1, 2)), state_row, [[1.0, 0.0]])
    assert c_o == pytest.approx(0.5)


def test_tightening_constant_takes_worst_gain():
    row = Polytope(np.array([[1.0, 0.0]]), np.ones(1))
    c_s, _ = compute_tightening_constants([[1.0]], [np.array([[-1.0]]), np.array([[-3.0]])], row, [[1.0]])
    assert c_s[0] == pytest.approx(3.0)


# ---------------------------------------------------------------- disturbance bounds

def test_wbar_examples():
    assert compute_wbar(np.eye(2), np.eye(2), BoxSet.symmetric([0.0, 0.0])) == 0.0
    assert compute_wbar(np.eye(2), np.eye(2), BoxSet.symmetric([0.1, 0.1])) == pytest.approx(math.sqrt(0.02), abs=1e-15)
    assert compute_wbar([[4.0]], [[1.0]], BoxSet.symmetric([0.5])) == pytest.approx(1.0, abs=1e-15)


@given(st.floats(0.0, 10.0), st.lists(st.floats(0.001, 1.0), min_size=2, max_size=2))
@settings(max_examples=100, deadline=None)
def test_wbar_is_homogeneous_in_the_disturbance_box(c, half):
    Pd = np.array([[2.0, 0.3], [0.3, 1.0]])
    E = np.array([[1.0, 0.5], [0.0, 1.0]])
    base = compute_wbar(Pd, E, BoxSet.symmetric(half))
    assert compute_wbar(Pd, E, BoxSet.symmetric(np.asarray(half) * c)) == pytest.approx(c * base, rel=1e-12, abs=1e-15)


def test_wbar_o_examples():
    I2 = np.eye(2)
    H = BoxSet.symmetric([0.1, 0.1])
    assert compute_wbar_o(I2, np.zeros((2, 2)), I2, I2, H, 0.5) == 0.0
    assert compute_wbar_o(I2, I2, np.zeros((2, 2)), I2, H, 0.5) == pytest.approx(math.sqrt(0.02), abs=1e-15)
    assert compute_wbar_o(I2, I2, I2, I2, BoxSet.symmetric([0.0, 0.0]), 0.3) == pytest.approx(0.3, abs=1e-15)


# ---------------------------------------------------------------- contraction metric synthesis

def test_scalar_ccm_gain_and_input_constant():
    Pd, table, sol = synth_ccm(SCALAR, 1.0, 1.0, SCALAR_GRID, BoxSet.symmetric([0.1]))
    k = -float(table.at([0.0])[0, 0])
    assert k >= 1.0 - 1e-6
    X = 1.0 / Pd[0, 0]
    assert 2 * (-k) * X + 2 * 1.0 * X <= 1e-6
    c_s, _ = compute_tightening_constants(Pd, list(table.entries()), SCALAR.system_rows(), SCALAR.M)
    # input rows come first
    assert c_s[0] == pytest.approx(k / math.sqrt(Pd[0, 0]), rel=1e-12)


@pytest.mark.parametrize("lam", [0.05, 0.5, 1.0, 2.0])
def test_zero_disturbance_rpi_is_feasible_for_any_multiplier(lam):
    _, _, sol = synth_ccm(SCALAR, 1.0, lam, SCALAR_GRID, BoxSet.symmetric([0.0]))
    assert sol.status in ("optimal", "feasible")


def test_ccm_rejects_bad_rates():
    with pytest.raises(ConfigurationError):
        synth_ccm(SCALAR, 0.0, 1.0, SCALAR_GRID, BoxSet.symmetric([0.1]))
    with pytest.raises(ConfigurationError):
        synth_ccm(SCALAR, 1.0, -1.0, SCALAR_GRID, BoxSet.symmetric([0.1]))


def test_robust_artifacts_validate_on_dense_grid(di_rmpc, di_rompc, unicycle_rmpc):
    for art, _ in (di_rmpc, di_rompc, unicycle_rmpc):
        rep = validate_design(art, dense_grid_factor=10)
        assert validation_passes(rep), rep
    assert set(validate_design(di_rmpc[0])["families"]) == {"contraction", "rpi", "sys", "obs", "terminal_cost"}


def test_rpi_set_holds_under_vertex_disturbances(di_rmpc):
    art, _ = di_rmpc
    m = art.model()
    rng = np.random.default_rng(0)
    verts = art.W.vertices()
    bound = art.wbar / art.rho
    worst = 0.0
    for _ in range(20):
        x = np.zeros(m.n_x)
        z = np.zeros(m.n_x)
        v = np.zeros(m.n_u)
        for _ in range(40):
            w = verts[rng.integers(len(verts))]

            def rhs(t, y, w=w):
                xx, zz = y[:m.n_x], y[m.n_x:]
                u = feedback_kappa(art, xx, zz, v)
                return np.concatenate([m.f(xx, u) + m.E @ w, m.f(zz, v)])

            y = rk4(rhs, np.concatenate([x, z]), 0.0, 0.2, substeps=10)
            x, z = y[:m.n_x], y[m.n_x:]
            worst = max(worst, sqrt_vdelta(art.Pdelta, x, z))
    assert worst <= bound + 1e-6


def test_alpha_floors(di_rmpc, di_rompc, unicycle_rmpc):
    for art, _ in (di_rmpc, unicycle_rmpc):
        assert art.alpha >= art.wbar / art.rho - 1e-12
    art = di_rompc[0]
    assert art.alpha >= art.wbar / art.rho + art.epsilon - 1e-12


# ---------------------------------------------------------------- terminal cost for robust designs

def test_terminal_cost_scalar_and_scaling():
    K = GainTable.constant(np.array([[-1.0]]))
    P, _ = synth_terminal_cost(SCALAR, K, [1.0], [1.0], SCALAR_GRID)
    assert P[0, 0] == pytest.approx(1.0, abs=1e-6)
    P4, _ = synth_terminal_cost(SCALAR, K, [4.0], [4.0], SCALAR_GRID)
    assert P4[0, 0] == pytest.approx(4.0 * P[0, 0], abs=1e-6)


# ---------------------------------------------------------------- output feedback

MULT = {"lambda_delta": 1.0, "lambda_delta_eps": 1.0, "lambda_eps": 1.0}


def test_multiplier_inequality_is_checked_before_solving():
    check_rompc_multipliers(MULT, 1.0)
    with pytest.raises(ConfigurationError, match="multiplier inequality"):
        check_rompc_multipliers({"lambda_delta": 1.0, "lambda_delta_eps": 10.0, "lambda_eps": 1.0}, 1.0)
    with pytest.raises(ConfigurationError, match="multiplier inequality"):
        synth_rompc(SCALAR, [[2.0]], 1.0, {"lambda_delta": 0.1, "lambda_delta_eps": 1.0, "lambda_eps": 1.0},
                    1.0, SCALAR_GRID, BoxSet.symmetric([0.05]), BoxSet.symmetric([0.01]))


def test_scalar_rompc_all_families_validate():
    cfg = {"schema": 1, "variant": "rompc", "model": {"name": "scalar_integrator"}, "Q": [1.0], "R": [1.0],
           "rho": 1.0, "grid_points": 2, "W": {"lower": [-0.05], "upper": [0.05]},
           "H": {"lower": [-0.01], "upper": [0.01]}, "epsilon": 0.5, "multipliers": MULT,
           "observer": {"L": [[2.0]]}}
    art = run_synthesis(cfg)
    fam = art.validation["families"]
    assert set(fam) == {"contraction", "rpi_delta", "rpi_eps", "sys", "obs", "terminal_cost"}
    assert max(fam.values()) <= 1e-6
    np.testing.assert_array_equal(art.c_s_o[:art.n_input_rows], 0.0)
    assert np.all(art.c_s_o[art.n_input_rows:] > 0)


def test_delta_rpi_without_observer_coupling_is_the_state_feedback_rpi():
    # With L = 0 and no noise the delta-RPI block is block-diagonal and its
    # top-left block is the state-feedback RPI block for a zero disturbance.
    Pd, table, _ = synth_ccm(SCALAR, 1.0, 1.0, SCALAR_GRID, BoxSet.symmetric([0.0]))
    X = np.linalg.inv(Pd)
    K = table.at([0.0])
    A, B = SCALAR.jac(np.zeros(1), np.zeros(1))
    S = (A + B @ K) @ X
    S = S + S.T
    for lam in (0.3, 1.0, 1.7):
        core = _rpi_delta_core(S, X, np.zeros((1, 1)), lam, 0.5, 0.4, 1).const
        rmpc = np.block([[S + lam * X, np.zeros((1, 1))], [np.zeros((1, 1)), -lam * np.ones((1, 1))]])
        assert np.max(np.linalg.eigvalsh(core[:1, :1])) == pytest.approx(np.max(np.linalg.eigvalsh(rmpc[:1, :1])),
                                                                         abs=1e-12)
        assert core[0, 1] == 0.0 and core[0, 2] == 0.0
        assert core[2, 2] == pytest.approx(0.5 * 0.16 - lam)


def test_norm_bound_block_examples():
    I = np.eye(2)
    assert _min_eig(norm_bound_block(I, I, I, 1.0)) == pytest.approx(0.0, abs=1e-14)
    Pd = np.diag([2.0, 0.5])
    L = np.array([[1.0, 0.3], [0.0, 2.0]])
    Ph = scipy.linalg.sqrtm(Pd).real
    nrm = np.linalg.norm(Ph @ L @ np.linalg.inv(Ph), 2)
    assert _min_eig(norm_bound_block(Pd, L, I, (0.99 * nrm) ** 2)) < 0
    assert _min_eig(norm_bound_block(Pd, L, I, (1.0001 * nrm) ** 2)) > -1e-12
    # scalar: [[1, 2], [2, l^2]] is PSD exactly when l >= 2
    assert _min_eig(norm_bound_block([[1.0]], [[2.0]], [[1.0]], 4.0)) == pytest.approx(0.0, abs=1e-12)
    assert _min_eig(norm_bound_block([[1.0]], [[2.0]], [[1.0]], 3.99)) < 0


def test_observer_gain_norm_bound_holds():
    W, H = BoxSet.symmetric([0.05]), BoxSet.symmetric([0.01])
    Pd, table, _ = synth_rompc(SCALAR, [[2.0]], 1.0, MULT, 0.5, SCALAR_GRID, W, H)
    L, l, d2, e2, _ = optimize_observer_gain(Pd, table, SCALAR, MULT, SCALAR_GRID, W, H)
    nrm = math.sqrt(Pd[0, 0]) * abs(L[0, 0]) / math.sqrt(Pd[0, 0])
    assert nrm <= l + 1e-8
    assert e2 >= 0 and d2 >= 0


# ---------------------------------------------------------------- validation and artifacts

def test_perturbed_metric_fails_validation(di_rmpc):
    art, _ = di_rmpc
    w, V = np.linalg.eigh(art.Pdelta)
    for i in range(len(w)):
        bumped = replace(art, Pdelta=art.Pdelta + 0.1 * w[i] * np.outer(V[:, i], V[:, i]))
        assert not validation_passes(validate_design(bumped))


def test_linear_model_dense_grid_equals_coarse(di_rmpc):
    art, _ = di_rmpc
    a = validate_design(art, dense_grid_factor=1)
    b = validate_design(art, dense_grid_factor=10)
    assert a == b


def test_artifact_round_trip(di_rompc, tmp_path):
    art, path = di_rompc
    back = DesignArtifact.load(path)
    assert back.to_json() == art.to_json()
    np.testing.assert_array_equal(back.Pdelta, art.Pdelta)
    np.testing.assert_array_equal(back.gain_table.gains, art.gain_table.gains)


@pytest.mark.parametrize("mutate, invariant", [
    (lambda d: d.update(alpha=0.5 * d["wbar"] / d["rho"]), "alpha_bound"),
    (lambda d: d["Pdelta"].update(data=[-x for x in d["Pdelta"]["data"]]), "Pdelta_pd"),
    (lambda d: d.update(variant="lqr"), "variant"),
    (lambda d: d.update(schema=99), "schema"),
    (lambda d: d.pop("rows"), "structure"),
    (lambda d: d["validation"]["families"].update(rpi=1e-3), "validation:rpi"),
])
def test_artifact_invariants_rejected_on_load(di_rmpc, mutate, invariant):
    art, _ = di_rmpc
    d = json.loads(art.to_json())
    mutate(d)
    with pytest.raises(ArtifactError) as exc:
        DesignArtifact.from_dict(d)
    assert exc.value.invariant == invariant


def test_rompc_input_rows_without_observer_constant(di_rompc):
    d = json.loads(di_rompc[0].to_json())
    d["c_s_o"][0] = 0.1
    with pytest.raises(ArtifactError) as exc:
        DesignArtifact.from_dict(d)
    assert exc.value.invariant == "c_s_o_inputs"


def test_synthesis_is_deterministic(scalar_rmpc):
    art, _ = scalar_rmpc
    assert run_synthesis(load_config("scalar_rmpc")).to_json() == art.to_json()


def test_shipped_scalar_designs(scalar_tmpc, scalar_rmpc):
    art = scalar_tmpc[0]
    assert art.P[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert art.K[0, 0] == pytest.approx(-1.0, abs=1e-6)
    assert art.alpha == pytest.approx(1.0, abs=1e-6)
    art = scalar_rmpc[0]
    assert art.wbar == pytest.approx(0.1 * math.sqrt(art.Pdelta[0, 0]), rel=1e-12)


def test_run_synthesis_rejects_bad_configs():
    with pytest.raises(ConfigurationError):
        run_synthesis({"variant": "lqr", "model": {"name": "scalar_integrator"}})
    cfg = load_config("scalar_rmpc")
    cfg["alpha"] = {"value": 0.01}
    with pytest.raises(ConfigurationError, match="floor"):
        run_synthesis(cfg)


def test_rho_sweep_reports_each_rate():
    out = rho_sweep(SCALAR, [0.5, 1.0, 2.0], 1.0, SCALAR_GRID, BoxSet.symmetric([0.1]))
    assert [r for r, _ in out] == [0.5, 1.0, 2.0]
    assert all(ok for _, ok in out)
