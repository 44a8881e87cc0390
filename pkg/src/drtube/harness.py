"""Closed-loop Monte-Carlo simulation, satisfaction metrics and sweeps.

A run applies ``u(k) = v*(0|k) + pi(e(k))`` to the true plant for
``k = 0..N_T-1``. The nominal state follows the nominal dynamics and the
error is *defined* as ``e = x - z``, so ``x = z + e`` holds by construction.
True noise never comes from the scenario windows used by the controller:
it is either drawn fresh per run from the same kernel or taken from a
held-out dataset trajectory.
"""

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .disturbance_data import (
    cholesky_factor,
    extract_scenarios,
    gaussian_kernel_covariance,
    known_disturbance_at,
    known_disturbance_window,
)
from .dr_cvar import block_minimal_vars, dual_norm
from .errors import DataError, SolverError, StepFailure, WindowOverrun
from .mpc_core import assemble_mpc_qp, candidate_shift, control_input, solve_mpc
from .qp_solver import OPTIMAL
from .tube_dynamics import nominal_step, propagate_error_scenarios

INPUT_TOL = 1e-9
CANDIDATE_TOL = 1e-7


@dataclass(frozen=True)
class TrueNoise:
    """How the plant disturbance is produced.

    ``mode="resample"``: a fresh kernel draw per run, seeded by the run seed.
    ``mode="trajectory"``: trajectory ``(offset + run_index) % n_traj`` of
    ``dataset`` (which should be disjoint from the scenario dataset).
    """

    mode: str = "resample"
    dataset: object = None
    offset: int = 0


@dataclass(frozen=True)
class SimSetup:
    """Everything a closed-loop run needs; picklable for worker processes.

    ``selector`` picks the scenario trajectories: ``"per_run"`` draws a
    subset once per run from the run seed (then slides its window with k),
    ``"first"`` always uses trajectories 0..N_s-1, and
    ``("seeded_random", seed)`` uses one fixed random subset for every run.
    """

    model: object            # FourRoomModel
    ctrl: object             # TubeController
    mpc: object              # MpcConfig (input_box_v already tightened)
    dataset: object          # DisturbanceDataset of scenario windows
    n_samples: int
    N_T: int
    kernel: object = None    # GpKernelParams for resampled true noise
    true_noise: TrueNoise = field(default_factory=TrueNoise)
    selector: object = "per_run"
    solver_tol: float = 1e-8
    candidate_checks: int = 20
    record_timing: bool = True
    config_hash: str = ""

    def with_cell(self, epsilon=None, n_samples=None):
        mpc = self.mpc
        if epsilon is not None:
            mpc = replace(mpc, ambiguity=replace(mpc.ambiguity, epsilon=float(epsilon)))
        return replace(self, mpc=mpc, n_samples=self.n_samples if n_samples is None else int(n_samples))


@dataclass
class ClosedLoopTrace:
    """Per-step record of one run. ``x``/``z``/``e`` have ``N_T + 1`` rows.

    ``status`` holds one solver status per attempted step; a run that stops
    early has fewer than ``N_T`` entries and ``aborted`` set.
    """

    x: np.ndarray
    u: np.ndarray
    z: np.ndarray
    e: np.ndarray
    theta_max: np.ndarray
    status: list
    solve_ms: np.ndarray
    run_seed: int
    config_hash: str = ""
    run_index: int = 0
    aborted: bool = False
    failure: str = ""
    candidate_max_violation: float = 0.0
    candidate_strict_max_violation: float = 0.0
    candidate_checked: int = 0

    @property
    def steps(self):
        return len(self.status)

    @property
    def max_input(self):
        return float(np.max(np.abs(self.u))) if self.u.size else 0.0


@dataclass
class McSummary:
    runs: int
    satisfaction: dict
    per_step_rates: dict
    solve_ms_mean: float
    solve_ms_p95: float
    violations: int
    infeasible_steps: int
    max_input: float
    theta_max: float
    candidate_checked: int
    candidate_max_violation: float
    candidate_strict_max_violation: float
    epsilon: float = 0.0
    n_samples: int = 0
    config_hash: str = ""

    @property
    def worst_satisfaction(self):
        return min(self.satisfaction.values()) if self.satisfaction else 1.0

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "runs": self.runs,
            "epsilon": self.epsilon,
            "n_samples": self.n_samples,
            "satisfaction": self.satisfaction,
            "worst_satisfaction": self.worst_satisfaction,
            "per_step_rates": self.per_step_rates,
            "solve_ms": {"mean": self.solve_ms_mean, "p95": self.solve_ms_p95},
            "violations": self.violations,
            "infeasible_steps": self.infeasible_steps,
            "max_input": self.max_input,
            "theta_max": self.theta_max,
            "candidate": {
                "checked": self.candidate_checked,
                "max_violation": self.candidate_max_violation,
                "strict_max_violation": self.candidate_strict_max_violation,
            },
        }


# ----------------------------------------------------------------------------
# single run


_FACTOR_CACHE = {}


def _kernel_factor(kernel, length):
    key = (kernel.nugget, kernel.scale, kernel.length_sq, length)
    if key not in _FACTOR_CACHE:
        _FACTOR_CACHE[key] = cholesky_factor(gaussian_kernel_covariance(kernel, length))[0]
    return _FACTOR_CACHE[key]


def true_noise_sequence(setup, run_seed, run_index=0):
    """Plant disturbance ``w(k)``, k < N_T, in state coordinates."""
    n, N_T = setup.model.sys.n, setup.N_T
    tn = setup.true_noise
    if tn.mode == "resample":
        if setup.kernel is None:
            raise DataError("resampled true noise needs a kernel")
        L = _kernel_factor(setup.kernel, N_T)
        rng = np.random.Generator(np.random.PCG64(run_seed))
        raw = (L @ rng.standard_normal((N_T, n)))
    elif tn.mode == "trajectory":
        ds = tn.dataset
        if ds is None or ds.horizon < N_T or ds.n_dims != n:
            raise DataError("held-out noise dataset missing or too short")
        raw = ds.data[(tn.offset + run_index) % ds.n_traj, :N_T]
    elif tn.mode == "zero":
        raw = np.zeros((N_T, n))
    else:
        raise DataError(f"unknown true-noise mode {tn.mode!r}")
    return setup.model.noise_gain * np.asarray(raw, dtype=float)


def _candidate_vector(cand, qp, idx, sys, cfg, scenarios, lift):
    """Full decision vector for a shifted candidate on the new step's QP.

    ``tau``/``s`` take the values minimizing each budget row; with ``lift``
    the slack ``theta(t)`` is raised just enough to cover any remaining
    budget-row excess, otherwise the shifted ``theta`` is used unchanged.
    """
    N, n_s = cfg.N, scenarios.n_samples
    x = np.zeros(idx.n_var)
    x[idx.z:idx.v] = cand.z.ravel()
    x[idx.v:idx.tau] = cand.v.ravel()
    theta = np.array(cand.theta, dtype=float)
    if idx.r:
        for i, c in enumerate(cfg.constraints):
            for t in range(N):
                tau, s = block_minimal_vars(c, scenarios.errors[:, t], cand.z[t])
                x[idx.tau_idx(i, t)] = tau
                x[idx.s_idx(i, t)] = s
                if lift and cfg.soft:
                    need = -c.alpha * tau + s.mean() + cfg.ambiguity.epsilon * dual_norm(c.h, cfg.ambiguity.q_norm)
                    theta[t] = max(theta[t], need)
    x[idx.theta:idx.eta] = theta
    x[idx.eta] = max(float(np.max(theta)), 0.0) if theta.size else 0.0
    if cfg.cost.input_cost[0] == "l1":
        rho = np.abs(cand.v[None, :, :] + scenarios.input_errors)
        x[idx.rho:idx.rho + rho.size] = rho.ravel()
    if cfg.cost.state_cost[0] == "weighted_l1":
        xs = np.asarray(cfg.cost.setpoint, dtype=float)
        sig = np.abs(cand.z[None, :N, :] + scenarios.errors[:, :N] - xs)
        x[idx.sigma:idx.sigma + sig.size] = sig.ravel()
    return x


def constraint_violation(qp, x):
    """Largest violation of any equality or inequality row at ``x``."""
    viol = 0.0
    if qp.n_eq:
        viol = float(np.max(np.abs(qp.Aeq @ x - qp.beq)))
    if qp.n_ineq:
        viol = max(viol, float(np.max(qp.G @ x - qp.h)))
    return max(viol, 0.0)


def run_closed_loop(setup, run_seed, run_index=0, dump_qp_dir=None):
    """Simulate one closed-loop run.

    Args:
        setup: :class:`SimSetup`.
        run_seed: seed for the true noise and for choosing the candidate
            check steps.
        run_index: position of the run inside a Monte-Carlo batch.
        dump_qp_dir: if given, the step-0 QP is written there as JSON.

    Returns:
        ClosedLoopTrace. A step whose solve is not Optimal stops the run
        (``aborted``); the failing status is the last entry of ``status``.

    Raises:
        WindowOverrun: the scenario dataset does not cover ``N_T + N``.
    """
    model, ctrl, cfg = setup.model, setup.ctrl, setup.mpc
    sys = model.sys
    n, m, N, N_T = sys.n, sys.m, cfg.N, setup.N_T
    if setup.dataset.horizon < N_T + N:
        raise WindowOverrun(f"dataset horizon {setup.dataset.horizon} < N_T + N = {N_T + N}")
    if model.profile.horizon < N_T + N:
        raise WindowOverrun("known-disturbance profile shorter than N_T + N")
    w_true = true_noise_sequence(setup, run_seed, run_index)
    check_ss, select_ss = np.random.SeedSequence(run_seed).spawn(2)
    selector = setup.selector
    if selector == "per_run":
        selector = ("seeded_random", int(select_ss.generate_state(1, np.uint64)[0]))
    rng = np.random.Generator(np.random.PCG64(check_ss))
    n_checks = min(setup.candidate_checks, N_T - 1)
    check_steps = set(int(k) for k in rng.choice(np.arange(1, N_T), size=n_checks, replace=False)) if n_checks > 0 else set()

    x = np.zeros((N_T + 1, n))
    z = np.zeros((N_T + 1, n))
    e = np.zeros((N_T + 1, n))
    u = np.zeros((N_T, m))
    theta_max = np.zeros(N_T)
    solve_ms = np.zeros(N_T)
    status = []
    x[0] = model.x0
    z[0] = model.x0
    e[0] = x[0] - z[0]
    cand = None
    cand_max = 0.0
    cand_strict = 0.0
    checked = 0
    aborted = False
    failure = ""
    for k in range(N_T):
        scen = extract_scenarios(setup.dataset, k, N, setup.n_samples, selector).scaled(model.noise_gain)
        errs = propagate_error_scenarios(sys, ctrl, e[k], scen)
        wbar = known_disturbance_window(model.profile, k, N)
        qp, idx = assemble_mpc_qp(sys, cfg, z[k], e[k], errs, wbar)
        if dump_qp_dir is not None and k == 0:
            os.makedirs(dump_qp_dir, exist_ok=True)
            qp.dump(os.path.join(dump_qp_dir, f"qp_run{run_index:04d}_step{k:03d}.json"))
        if cand is not None and k in check_steps:
            cand_max = max(cand_max, constraint_violation(qp, _candidate_vector(cand, qp, idx, sys, cfg, errs, True)))
            cand_strict = max(cand_strict, constraint_violation(qp, _candidate_vector(cand, qp, idx, sys, cfg, errs, False)))
            checked += 1
        try:
            sol = solve_mpc(qp, idx, solver_tol=setup.solver_tol)
        except SolverError as exc:
            status.append(type(exc).__name__)
            aborted, failure = True, str(exc)
            break
        status.append(sol.status)
        solve_ms[k] = sol.solve_time * 1e3 if setup.record_timing else 0.0
        if sol.status != OPTIMAL:
            aborted, failure = True, f"step {k}: {sol.status}"
            break
        theta_max[k] = sol.theta_max
        u[k] = control_input(sol, ctrl, e[k])
        wk = known_disturbance_at(model.profile, k)
        x[k + 1] = sys.A @ x[k] + sys.B @ u[k] + wk + w_true[k]
        z[k + 1] = nominal_step(sys, z[k], sol.v_star[0], wk)
        e[k + 1] = x[k + 1] - z[k + 1]
        if k + 1 < N_T and (k + 1) in check_steps:
            cand = candidate_shift(sol, sys, cfg, known_disturbance_at(model.profile, k + N))
            cand.z[0] = z[k + 1]
        else:
            cand = None
    steps = len(status)
    if aborted:
        done = steps - 1
        x, z, e = x[:done + 1], z[:done + 1], e[:done + 1]
        u, theta_max, solve_ms = u[:done], theta_max[:done], solve_ms[:done]
    return ClosedLoopTrace(
        x=x, u=u, z=z, e=e, theta_max=theta_max, status=status, solve_ms=solve_ms,
        run_seed=int(run_seed), config_hash=setup.config_hash, run_index=run_index,
        aborted=aborted, failure=failure, candidate_max_violation=cand_max,
        candidate_strict_max_violation=cand_strict, candidate_checked=checked,
    )


# ----------------------------------------------------------------------------
# metrics


def satisfaction_rates(traces, c, N_T=None):
    """Per-step fraction of runs with ``h'x(k) <= b``, k < N_T.

    Steps a run never reached (aborted run) count as violations.
    """
    if not traces:
        raise ValueError("need at least one trace")
    if N_T is None:
        N_T = max(tr.x.shape[0] - 1 if not tr.aborted else len(tr.status) for tr in traces)
    ok = np.zeros(N_T)
    for tr in traces:
        vals = tr.x[:N_T] @ c.h
        sat = vals <= c.b
        ok[:sat.size] += sat
    return ok / len(traces)


def empirical_satisfaction(traces, c, N_T=None):
    """Worst-case in-time satisfaction: ``min_k`` of :func:`satisfaction_rates`."""
    return float(np.min(satisfaction_rates(traces, c, N_T)))


def run_seeds(master_seed, runs):
    """Per-run seeds derived from ``master_seed``; run ``r`` always gets the same seed."""
    return [int(np.random.SeedSequence(master_seed, spawn_key=(r,)).generate_state(1, np.uint64)[0]) for r in range(runs)]


def constraint_ids(cfg):
    return [c.name or f"c{i}" for i, c in enumerate(cfg.constraints)]


def summarize(setup, traces):
    """Aggregate traces (in run-index order) into an :class:`McSummary`."""
    cfg = setup.mpc
    sat, rates = {}, {}
    for cid, c in zip(constraint_ids(cfg), cfg.constraints):
        r = satisfaction_rates(traces, c, setup.N_T)
        rates[cid] = [float(v) for v in r]
        sat[cid] = float(np.min(r))
    times = np.concatenate([tr.solve_ms for tr in traces]) if traces else np.zeros(0)
    limit = setup.model.u_box
    violations = 0
    for tr in traces:
        if tr.u.size:
            over = np.any(tr.u > limit.upper + INPUT_TOL, axis=1) | np.any(tr.u < limit.lower - INPUT_TOL, axis=1)
            violations += int(np.sum(over))
    infeasible = sum(1 for tr in traces if tr.aborted)
    return McSummary(
        runs=len(traces),
        satisfaction=sat,
        per_step_rates=rates,
        solve_ms_mean=float(np.mean(times)) if times.size else 0.0,
        solve_ms_p95=float(np.percentile(times, 95)) if times.size else 0.0,
        violations=violations,
        infeasible_steps=infeasible,
        max_input=max((tr.max_input for tr in traces), default=0.0),
        theta_max=max((float(np.max(tr.theta_max)) if tr.theta_max.size else 0.0 for tr in traces), default=0.0),
        candidate_checked=sum(tr.candidate_checked for tr in traces),
        candidate_max_violation=max((tr.candidate_max_violation for tr in traces), default=0.0),
        candidate_strict_max_violation=max((tr.candidate_strict_max_violation for tr in traces), default=0.0),
        epsilon=float(cfg.ambiguity.epsilon),
        n_samples=int(setup.n_samples),
        config_hash=setup.config_hash,
    )


# ----------------------------------------------------------------------------
# batches

_WORKER_SETUP = None


def _init_worker(setup):
    global _WORKER_SETUP
    _WORKER_SETUP = setup


def _worker_run(args):
    run_index, seed = args
    return _safe_run(_WORKER_SETUP, seed, run_index)


def _safe_run(setup, seed, run_index, dump_qp_dir=None):
    try:
        return run_closed_loop(setup, seed, run_index, dump_qp_dir)
    except StepFailure:
        raise
    except SolverError as exc:
        raise StepFailure(str(exc), step=None, run=run_index) from exc


def run_batch(setup, runs, master_seed, parallelism=1, dump_qp_dir=None):
    """Run ``runs`` closed loops; traces come back in run-index order."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    seeds = run_seeds(master_seed, runs)
    jobs = list(enumerate(seeds))
    if parallelism is None or parallelism <= 1 or runs == 1:
        return [_safe_run(setup, s, r, dump_qp_dir if r == 0 else None) for r, s in jobs]
    traces = [_safe_run(setup, seeds[0], 0, dump_qp_dir)]
    with ProcessPoolExecutor(max_workers=parallelism, initializer=_init_worker, initargs=(setup,)) as pool:
        traces.extend(pool.map(_worker_run, jobs[1:], chunksize=max(1, (runs - 1) // (4 * parallelism))))
    return traces


def monte_carlo(setup, runs, master_seed, parallelism=1, dump_qp_dir=None, return_traces=False):
    """Monte-Carlo summary; bit-identical for any ``parallelism`` when timing is off."""
    traces = run_batch(setup, runs, master_seed, parallelism, dump_qp_dir)
    summary = summarize(setup, traces)
    return (summary, traces) if return_traces else summary


def sweep(setup, epsilons, sample_sizes, runs, master_seed, parallelism=1):
    """Grid of summaries keyed by ``(epsilon, n_samples)``; every cell reuses
    the same run seeds, so cells are paired run by run."""
    if not epsilons or not sample_sizes:
        raise ValueError("epsilons and sample_sizes must be nonempty")
    cells = {}
    for ns in sample_sizes:
        for eps in epsilons:
            cells[(float(eps), int(ns))] = monte_carlo(setup.with_cell(eps, ns), runs, master_seed, parallelism)
    return cells


# ----------------------------------------------------------------------------
# writers


def _fmt(v):
    return repr(float(v))


def write_trace_csv(trace, path):
    n, m = trace.x.shape[1], trace.u.shape[1] if trace.u.ndim == 2 else 0
    header = (["k"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + [f"z{i}" for i in range(n)]
              + [f"e{i}" for i in range(n)] + ["theta_max", "status", "solve_ms"])
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={trace.config_hash} run={trace.run_index} seed={trace.run_seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, st in enumerate(trace.status):
            if k < trace.u.shape[0]:
                row = ([k] + [_fmt(v) for v in trace.x[k]] + [_fmt(v) for v in trace.u[k]] + [_fmt(v) for v in trace.z[k]]
                       + [_fmt(v) for v in trace.e[k]] + [_fmt(trace.theta_max[k]), st, _fmt(trace.solve_ms[k])])
            else:
                blank = [""] * m
                row = ([k] + [_fmt(v) for v in trace.x[k]] + blank + [_fmt(v) for v in trace.z[k]]
                       + [_fmt(v) for v in trace.e[k]] + ["", st, ""])
            w.writerow(row)


def read_trace_csv(path):
    """Rows of a trace file as dicts (comment line skipped)."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_summary_json(summary, path, extra=None):
    d = summary.to_dict()
    if extra:
        d.update(extra)
    write_json(d, path)


def write_sweep_csv(cells, path, config_hash="", constraint=None):
    """Table layout: one row per epsilon, one column per N_s.

    Entries are the worst-case in-time satisfaction of ``constraint``, or the
    minimum over all constraints when ``constraint`` is ``None``.
    """
    eps = sorted({k[0] for k in cells})
    ns = sorted({k[1] for k in cells})

    def value(s):
        return s.worst_satisfaction if constraint is None else s.satisfaction[constraint]

    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash} constraint={constraint or 'all'}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon"] + [f"N_s={n}" for n in ns])
        for e_ in eps:
            w.writerow([repr(e_)] + [repr(value(cells[(e_, n)])) if (e_, n) in cells else "" for n in ns])


def write_runtime_csv(cells, path, config_hash=""):
    """One row per N_s: mean and 95th-percentile solve time over all epsilons."""
    ns = sorted({k[1] for k in cells})
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_samples", "mean_solve_ms", "p95_solve_ms"])
        for n in ns:
            sel = [s for (e_, k), s in sorted(cells.items()) if k == n]
            w.writerow([n, repr(float(np.mean([s.solve_ms_mean for s in sel]))), repr(float(np.max([s.solve_ms_p95 for s in sel])))])
