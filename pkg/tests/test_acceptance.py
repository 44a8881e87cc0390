"""Acceptance criteria. Each test records one PASS/FAIL line (see conftest)."""

import json
import os
import time

import numpy as np
import pytest

from conftest import record
from drtube.building import four_room_model
from drtube.cli import main
from drtube.config import RunConfig
from drtube.disturbance_data import ScenarioDisturbances
from drtube.dr_cvar import (
    AmbiguityConfig,
    HalfspaceChanceConstraint,
    build_cvar_block,
    dual_norm,
    evaluate_dr_cvar_margin,
    evaluate_empirical_cvar,
    worst_case_expectation_affine,
)
from drtube.experiment import build_dataset, build_setup
from drtube.harness import monte_carlo, sweep, write_runtime_csv
from drtube.mpc_core import CostConfig, MpcConfig, assemble_mpc_qp, solve_mpc
from drtube.qp_solver import OPTIMAL, QpStandardForm, check_feasibility, kkt_residuals, solve_qp
from drtube.tube_dynamics import (
    LtiSystem,
    TubeController,
    explicit_error_affine,
    propagate_error_scenarios,
    riccati_residual,
    solve_dare,
)
from oracles import active_set_qp, cvar_grid

TABLE_EPSILONS = [0.0, 1e-5, 1e-4, 1e-3]


@pytest.fixture(scope="module")
def default_setup():
    cfg = RunConfig.default()
    return cfg, build_setup(cfg, build_dataset(cfg))


def test_criterion_01_lp_feasibility_matches_margin_sign():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    bad, near = 0, 0
    for _ in range(500):
        n = int(rng.integers(1, 4))
        ns = int(rng.integers(1, 21))
        c = HalfspaceChanceConstraint(rng.normal(size=n), float(rng.normal()), alpha=float(rng.uniform(0.05, 0.5)))
        amb = AmbiguityConfig(float(rng.uniform(0, 0.1)), [1, 2, "inf"][int(rng.integers(0, 3))])
        E = 0.5 * rng.normal(size=(ns, n))
        z = rng.normal(size=n)
        margin = evaluate_dr_cvar_margin(c, amb, E, z)
        feasible = check_feasibility(build_cvar_block(c, amb, E).feasibility_problem(z)).feasible
        if feasible != (margin <= 0):
            if abs(margin) < 1e-7:
                near += 1
            else:
                bad += 1
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 60
    record(1, ok, f"500 instances, {bad} disagreements outside |margin|<1e-7 ({near} inside), {dt:.1f} s")
    assert ok


def test_criterion_02_cvar_sorted_formula_vs_grid():
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(1000):
        L = rng.normal(size=int(rng.integers(1, 40))) * rng.uniform(0.1, 3)
        alpha = float(rng.uniform(0.01, 0.99))
        worst = max(worst, abs(evaluate_empirical_cvar(L, alpha) - cvar_grid(L, alpha)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-8 and dt < 10
    record(2, ok, f"1000 loss vectors, max |diff| = {worst:.2e}, {dt:.1f} s")
    assert ok


def _random_qp(rng):
    d = int(rng.integers(1, 7))
    g = int(rng.integers(0, 9))
    pe = int(rng.integers(0, min(3, d - 1) + 1)) if d > 1 else 0
    M = rng.standard_normal((d, d))
    x0 = rng.standard_normal(d)
    A = rng.standard_normal((pe, d))
    G = rng.standard_normal((g, d))
    h = G @ x0 + rng.uniform(0, 1, g) * (rng.random(g) < 0.7)
    return M @ M.T + 0.1 * np.eye(d), rng.standard_normal(d), A, A @ x0, G, h


def test_criterion_03_qp_solver_vs_active_set():
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)
    dx = dobj = res = 0.0
    not_opt = 0
    for _ in range(200):
        P, q, A, b, G, h = _random_qp(rng)
        x_ref, obj_ref = active_set_qp(P, q, A, b, G, h)
        prob = QpStandardForm(P, q, A, b, G, h)
        sol = solve_qp(prob)
        if sol.status != OPTIMAL:
            not_opt += 1
            continue
        dx = max(dx, float(np.max(np.abs(sol.x - x_ref))))
        dobj = max(dobj, abs(sol.objective - obj_ref))
        res = max(res, kkt_residuals(prob, sol).max())
    dt = time.perf_counter() - t0
    ok = not_opt == 0 and dx <= 1e-6 and dobj <= 1e-8 and res <= 1e-8 and dt < 60
    record(3, ok, f"200 QPs, non-optimal {not_opt}, argmin err {dx:.1e}, objective err {dobj:.1e}, "
                  f"KKT residual {res:.1e}, {dt:.1f} s")
    assert ok


def test_criterion_04_affine_error_equivalence():
    rng = np.random.default_rng(104)
    rec_err = sup_err = 0.0
    for _ in range(100):
        n, m = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        N, ns = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        sys = LtiSystem(rng.normal(size=(n, n)) * 0.5, rng.normal(size=(n, m)), check_controllable=False)
        K = rng.normal(size=(m, n)) * 0.3
        ctrl = TubeController(K)
        e0 = rng.normal(size=n)
        w = rng.normal(size=(ns, N, n))
        rec = propagate_error_scenarios(sys, ctrl, e0, ScenarioDisturbances(w))
        exp = explicit_error_affine(sys, K, e0, ScenarioDisturbances(w))
        scale = 1.0 + np.abs(exp.errors).max()
        rec_err = max(rec_err, float(np.max(np.abs(rec.errors - exp.errors))) / scale,
                      float(np.max(np.abs(rec.input_errors - exp.input_errors))) / scale)
        free = propagate_error_scenarios(sys, ctrl, e0, ScenarioDisturbances(np.zeros_like(w))).errors
        forced = propagate_error_scenarios(sys, ctrl, np.zeros(n), ScenarioDisturbances(w)).errors
        sup_err = max(sup_err, float(np.max(np.abs(rec.errors - free - forced))) / scale)
    ok = rec_err <= 1e-12 and sup_err <= 1e-12
    record(4, ok, f"100 instances, recursive vs explicit {rec_err:.1e}, superposition {sup_err:.1e} (relative)")
    assert ok


def test_criterion_05_dare():
    model = four_room_model()
    Q, R = 1e3 * np.eye(4), np.eye(4)
    P, K = solve_dare(model.sys.A, model.sys.B, Q, R)
    res = riccati_residual(model.sys.A, model.sys.B, Q, R, P)
    rho = float(max(abs(np.linalg.eigvals(model.sys.A + model.sys.B @ K))))
    Ps, _ = solve_dare(np.array([[1.0]]), np.array([[1.0]]), np.eye(1), np.eye(1))
    gold = abs(float(Ps[0, 0]) - (1 + np.sqrt(5)) / 2)
    ok = res <= 1e-10 and rho < 1 and gold <= 1e-9
    record(5, ok, f"four-room residual {res:.1e}, spectral radius {rho:.2e}, golden-ratio error {gold:.1e}")
    assert ok


def test_criterion_06_closed_loop_guarantees(default_setup):
    cfg, setup = default_setup
    t0 = time.perf_counter()
    s = monte_carlo(setup.with_cell(1e-4, 10), 100, cfg["sim"]["seed"])
    dt = time.perf_counter() - t0
    ok = (s.infeasible_steps == 0 and s.violations == 0 and s.max_input <= 4.5 + 1e-9
          and s.candidate_checked == 100 * 20 and s.candidate_max_violation <= 1e-7 and dt < 15 * 60)
    record(6, ok, f"100 runs: infeasible steps {s.infeasible_steps}, input violations {s.violations}, "
                  f"max |u| {s.max_input:.4f}, candidate rows at {s.candidate_checked} steps max violation "
                  f"{s.candidate_max_violation:.1e} (theta lifted; unlifted {s.candidate_strict_max_violation:.1e}), "
                  f"{dt / 60:.1f} min")
    assert ok


def test_criterion_07_table_trend(default_setup):
    cfg, setup = default_setup
    cid = cfg["report"]["constraint"]
    t0 = time.perf_counter()
    cells = sweep(setup, TABLE_EPSILONS, [10], 200, cfg["sim"]["seed"])
    dt = time.perf_counter() - t0
    sat = [cells[(e, 10)].satisfaction[cid] for e in TABLE_EPSILONS]
    drops = [a - b for a, b in zip(sat, sat[1:]) if b < a]
    monotone = len(drops) == 0 or (len(drops) == 1 and drops[0] <= 0.01 + 1e-12)
    gain = sat[-1] - sat[0]
    clean = all(c.infeasible_steps == 0 and c.violations == 0 for c in cells.values())
    ok = monotone and gain >= 0.02 - 1e-12 and clean and dt < 45 * 60
    record(7, ok, f"{cid} satisfaction over eps {TABLE_EPSILONS}: "
                  + "/".join(f"{100 * v:.1f}%" for v in sat)
                  + f", gain {100 * gain:+.1f} pp, inversions {len(drops)}, {dt / 60:.1f} min")
    assert ok


def test_criterion_08_runtime_scaling(default_setup, tmp_path):
    cfg, setup = default_setup
    cells = sweep(setup, [1e-4], [10, 50], 3, cfg["sim"]["seed"])
    path = tmp_path / "runtime.csv"
    write_runtime_csv(cells, path, setup.config_hash)
    rows = [ln.split(",") for ln in path.read_text().splitlines()[2:]]
    ms = {int(r[0]): float(r[1]) for r in rows}
    ratio = ms[50] / ms[10]
    ok = ratio >= 2.0
    record(8, ok, f"mean solve {ms[10]:.1f} ms at N_s=10, {ms[50]:.1f} ms at N_s=50, ratio {ratio:.2f}")
    assert ok


def test_criterion_09_offset_and_argmin_invariance():
    rng = np.random.default_rng(109)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 5))
        a, b0 = rng.normal(size=d), float(rng.normal())
        X = rng.normal(size=(int(rng.integers(1, 30)), d))
        eps = float(rng.uniform(0, 1))
        q = [1, 2, "inf"][int(rng.integers(0, 3))]
        diff = worst_case_expectation_affine(a, b0, X, eps, q) - worst_case_expectation_affine(a, b0, X, 0.0, q)
        worst = max(worst, abs(diff - eps * dual_norm(a, q)))
    # two assembled problems that differ only in the radius, without CVaR blocks
    sys = LtiSystem(np.array([[0.9, 0.2], [0.0, 0.8]]), np.eye(2))
    ctrl = TubeController(-0.3 * np.eye(2), 0.5)
    errs = propagate_error_scenarios(sys, ctrl, np.zeros(2), ScenarioDisturbances(0.1 * rng.normal(size=(5, 6, 2))))
    cost = CostConfig(np.array([1.0, -1.0]), ("quadratic", np.eye(2)), ("l1", 0.5))
    c = HalfspaceChanceConstraint(np.array([1.0, 0.0]), 0.5, alpha=0.2)
    argmins = []
    for eps in (0.0, 0.5):
        mpc = MpcConfig(N=6, cost=cost, constraints=(c,), ambiguity=AmbiguityConfig(eps, 1), include_cvar=False)
        qp, idx = assemble_mpc_qp(sys, mpc, np.zeros(2), np.zeros(2), errs, np.zeros((6, 2)))
        argmins.append(solve_mpc(qp, idx).qp_solution.x)
    same = np.array_equal(argmins[0], argmins[1])
    ok = worst <= 1e-10 and same
    record(9, ok, f"100 affine losses, max offset error {worst:.1e}; argmin identical across eps: {same}")
    assert ok


def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def _strip_timing(files):
    """Trace and summary contents with the wall-clock columns removed."""
    out = {}
    for name, data in files.items():
        text = data.decode()
        if name.endswith(".json") and name != "config.json":
            d = json.loads(text)
            for cell in d.get("cells", [d]):
                cell.pop("solve_ms", None)
            out[name] = d
        elif name.startswith("traces"):
            out[name] = [ln.rsplit(",", 1)[0] for ln in text.splitlines()]
        elif name.endswith(".csv") and "runtime" not in name:
            out[name] = text
    return out


def test_criterion_10_thread_count_determinism(tmp_path):
    small = {
        "disturbance": {"trajectories": 60, "horizon": 20},
        "sim": {"N_T": 8, "runs": 8, "candidate_checks": 4},
        "sweep": {"epsilons": [0.0, 1e-3], "sample_sizes": [10]},
    }
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(small))
    strict, loose = [], []
    for threads in ("1", "8"):
        out = tmp_path / f"t{threads}"
        codes = [
            main(["--config", str(cfgp), "--out", str(out / "data"), "--threads", threads, "gen-data"]),
            main(["--config", str(cfgp), "--out", str(out / "run"), "--threads", threads, "--no-timing", "run",
                  "--dataset", str(out / "data" / "disturbances.csv")]),
            main(["--config", str(cfgp), "--out", str(out / "sweep"), "--threads", threads, "--no-timing", "sweep",
                  "--dataset", str(out / "data" / "disturbances.csv")]),
            main(["--config", str(cfgp), "--out", str(out / "timed"), "--threads", threads, "run",
                  "--dataset", str(out / "data" / "disturbances.csv")]),
        ]
        assert codes == [0, 0, 0, 0]
        strict.append({k: v for k, v in _tree(out).items() if not k.startswith("timed")})
        loose.append(_strip_timing(_tree(out / "timed")))
    same_strict = strict[0] == strict[1]
    same_loose = loose[0] == loose[1]
    ok = same_strict and same_loose
    record(10, ok, f"gen-data/run/sweep with --threads 1 vs 8: {len(strict[0])} files bit-identical: {same_strict}; "
                   f"with timing on, non-timing content identical: {same_loose}")
    assert ok
