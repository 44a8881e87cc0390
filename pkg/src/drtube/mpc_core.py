"""Soft-constrained DR tube MPC: QP assembly, solve and closed-loop law.

Decision vector layout (see :class:`IndexMap`)::

    z(0..N)  v(0..N-1)  tau[i,t]  s[i,t,j]  theta(0..N-1)  eta  [rho]  [sigma]

``rho`` holds the epigraph variables of an L1 input cost (one per scenario,
step and input) and ``sigma`` those of a weighted-L1 state cost. Scenario
errors enter every cost and constraint as constants, so the problem is a QP
in the nominal trajectory only.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dr_cvar import AmbiguityConfig, dual_norm
from .errors import DimensionMismatch, InfeasibleHardTerminal, NoTerminalPolicy, NotSolved
from .qp_solver import DEFAULT_TOL, OPTIMAL, PRIMAL_INFEASIBLE, QpStandardForm, solve_qp
from .tube_dynamics import Box, apply_controller


@dataclass(frozen=True)
class CostConfig:
    """Stage, input and terminal cost.

    state_cost: ``("quadratic", Q)`` for ``(x - x_s)'Q(x - x_s)`` or
    ``("weighted_l1", qvec)`` for ``sum_i qvec_i |x_i - x_s,i|``.
    input_cost: ``("l1", R)`` for ``R ||u||_1`` or ``("quadratic", R)``.
    terminal_cost: ``None`` or ``P_f`` (quadratic about the setpoint).
    """

    setpoint: np.ndarray
    state_cost: tuple = ("quadratic", None)
    input_cost: tuple = ("l1", 1.0)
    terminal_cost: np.ndarray = None


@dataclass(frozen=True)
class TerminalSet:
    """``kind`` is ``"singleton"`` (x_f), ``"box"`` (box + optional gain) or ``"none"``."""

    kind: str = "none"
    x_f: np.ndarray = None
    box: Box = None
    policy_gain: np.ndarray = None

    def __post_init__(self):
        if self.kind not in ("singleton", "box", "none"):
            raise ValueError(f"unknown terminal kind {self.kind!r}")
        if self.kind == "singleton":
            if self.x_f is None:
                raise ValueError("a singleton terminal set needs x_f")
            object.__setattr__(self, "x_f", np.atleast_1d(np.asarray(self.x_f, dtype=float)))
        if self.kind == "box" and self.box is None:
            raise ValueError("a box terminal set needs box")


@dataclass(frozen=True)
class MpcConfig:
    N: int
    cost: CostConfig
    constraints: tuple = ()
    ambiguity: AmbiguityConfig = field(default_factory=AmbiguityConfig)
    terminal: TerminalSet = field(default_factory=TerminalSet)
    input_box_v: Box = None
    penalty_c: float = 1e3
    soft: bool = True
    include_cvar: bool = True

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.penalty_c > 0:
            raise ValueError("penalty_c must be > 0")
        object.__setattr__(self, "constraints", tuple(self.constraints))


@dataclass(frozen=True)
class IndexMap:
    n: int
    m: int
    N: int
    n_s: int
    r: int
    z: int
    v: int
    tau: int
    s: int
    theta: int
    eta: int
    rho: int
    sigma: int
    n_var: int
    eq_terminal: slice
    n_eq: int

    def z_idx(self, t):
        return self.z + t * self.n + np.arange(self.n)

    def v_idx(self, t):
        return self.v + t * self.m + np.arange(self.m)

    def tau_idx(self, i, t):
        return self.tau + i * self.N + t

    def s_idx(self, i, t):
        return self.s + (i * self.N + t) * self.n_s + np.arange(self.n_s)

    def unpack(self, x):
        out = {
            "z": x[self.z:self.v].reshape(self.N + 1, self.n),
            "v": x[self.v:self.tau].reshape(self.N, self.m),
            "tau": x[self.tau:self.s].reshape(self.r, self.N),
            "s": x[self.s:self.theta].reshape(self.r, self.N, self.n_s),
            "theta": x[self.theta:self.eta],
            "eta": float(x[self.eta]),
        }
        return out


@dataclass
class MpcSolution:
    v_star: np.ndarray
    z_star: np.ndarray
    theta_star: np.ndarray
    tau_star: np.ndarray
    s_star: np.ndarray
    objective: float
    status: str
    solve_time: float
    iterations: int = 0
    qp_solution: object = field(default=None, repr=False)

    @property
    def theta_max(self):
        return float(np.max(self.theta_star)) if self.theta_star.size else 0.0


class _Coo:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, r, c, v):
        r, c, v = np.broadcast_arrays(r, c, np.asarray(v, dtype=float))
        self.rows.append(r.ravel())
        self.cols.append(c.ravel())
        self.vals.append(v.ravel())

    def tocsr(self, shape):
        if not self.rows:
            return sp.csr_matrix(shape)
        return sp.csr_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))), shape=shape
        )


def build_index_map(sys, cfg, n_s):
    n, m, N = sys.n, sys.m, cfg.N
    r = len(cfg.constraints) if cfg.include_cvar else 0
    z = 0
    v = z + (N + 1) * n
    tau = v + N * m
    s = tau + r * N
    theta = s + r * N * n_s
    eta = theta + N
    rho = eta + 1
    n_rho = n_s * N * m if cfg.cost.input_cost[0] == "l1" else 0
    sigma = rho + n_rho
    n_sigma = n_s * N * n if cfg.cost.state_cost[0] == "weighted_l1" else 0
    n_var = sigma + n_sigma
    n_eq = (N + 1) * n
    eq_terminal = slice(n_eq, n_eq)
    if cfg.terminal.kind == "singleton":
        eq_terminal = slice(n_eq, n_eq + n)
        n_eq += n
    return IndexMap(n, m, N, n_s, r, z, v, tau, s, theta, eta, rho, sigma, n_var, eq_terminal, n_eq)


def assemble_mpc_qp(sys, cfg, z_k, e_k, scenarios, wbar_window):
    """Lower one MPC step to :class:`QpStandardForm`.

    Args:
        sys: nominal plant.
        cfg: MPC configuration (``input_box_v`` already tightened).
        z_k: current nominal state.
        e_k: current error; only used for a consistency check against the
            scenario tensor, whose first slice must equal it.
        scenarios: :class:`ErrorScenarios` propagated from ``e_k``.
        wbar_window: known disturbance in state coordinates, shape [N, n].

    Returns:
        ``(qp, index_map)``.
    """
    n, m, N = sys.n, sys.m, cfg.N
    E, Eu = scenarios.errors, scenarios.input_errors
    n_s = E.shape[0]
    wbar_window = np.asarray(wbar_window, dtype=float).reshape(-1, n) if np.size(wbar_window) else np.zeros((0, n))
    if E.shape[1] != N + 1 or E.shape[2] != n or Eu.shape[1] != N or Eu.shape[2] != m:
        raise DimensionMismatch(f"scenario tensors {E.shape}/{Eu.shape} do not match N={N}, n={n}, m={m}")
    if wbar_window.shape != (N, n):
        raise DimensionMismatch(f"known-disturbance window must be ({N}, {n}), got {wbar_window.shape}")
    if np.size(e_k) != n or np.size(z_k) != n:
        raise DimensionMismatch("z_k / e_k have the wrong dimension")
    idx = build_index_map(sys, cfg, n_s)
    cost = cfg.cost
    xs = np.broadcast_to(np.asarray(cost.setpoint, dtype=float), (n,))

    # objective
    Pc = _Coo()
    qv = np.zeros(idx.n_var)
    const = 0.0
    kind, W = cost.state_cost
    if kind == "quadratic":
        Q = np.atleast_2d(np.asarray(W, dtype=float))
        for t in range(N):
            zi = idx.z_idx(t)
            dev = E[:, t] - xs
            Pc.add(zi[:, None], zi[None, :], 2.0 * Q)
            qv[zi] += 2.0 * Q @ dev.mean(axis=0)
            const += float(np.mean(np.einsum("ji,ik,jk->j", dev, Q, dev)))
    elif kind == "weighted_l1":
        qvec = np.broadcast_to(np.asarray(W, dtype=float), (n,))
        qv[idx.sigma:idx.sigma + n_s * N * n] = np.tile(qvec, n_s * N) / n_s
    else:
        raise ValueError(f"unknown state cost {kind!r}")
    if cost.terminal_cost is not None:
        Pf = np.atleast_2d(np.asarray(cost.terminal_cost, dtype=float))
        zi = idx.z_idx(N)
        dev = E[:, N] - xs
        Pc.add(zi[:, None], zi[None, :], 2.0 * Pf)
        qv[zi] += 2.0 * Pf @ dev.mean(axis=0)
        const += float(np.mean(np.einsum("ji,ik,jk->j", dev, Pf, dev)))
    ikind, RW = cost.input_cost
    if ikind == "quadratic":
        R = np.atleast_2d(np.asarray(RW, dtype=float))
        for t in range(N):
            vi = idx.v_idx(t)
            Pc.add(vi[:, None], vi[None, :], 2.0 * R)
            qv[vi] += 2.0 * R @ Eu[:, t].mean(axis=0)
            const += float(np.mean(np.einsum("ji,ik,jk->j", Eu[:, t], R, Eu[:, t])))
    elif ikind == "l1":
        qv[idx.rho:idx.rho + n_s * N * m] = float(RW) / n_s
    else:
        raise ValueError(f"unknown input cost {ikind!r}")
    qv[idx.eta] = cfg.penalty_c
    P = Pc.tocsr((idx.n_var, idx.n_var))

    # equalities
    Ac = _Coo()
    beq = np.zeros(idx.n_eq)
    Ac.add(np.arange(n), idx.z_idx(0), 1.0)
    beq[:n] = z_k
    for t in range(N):
        rows = n + t * n + np.arange(n)
        Ac.add(rows, idx.z_idx(t + 1), 1.0)
        Ac.add(rows[:, None], idx.z_idx(t)[None, :], -sys.A)
        Ac.add(rows[:, None], idx.v_idx(t)[None, :], -sys.B)
        beq[rows] = wbar_window[t]
    if cfg.terminal.kind == "singleton":
        rows = np.arange(idx.eq_terminal.start, idx.eq_terminal.stop)
        Ac.add(rows, idx.z_idx(N), 1.0)
        beq[rows] = cfg.terminal.x_f
    Aeq = Ac.tocsr((idx.n_eq, idx.n_var))

    # inequalities
    Gc = _Coo()
    hs = []
    row = 0

    def new_rows(k):
        nonlocal row
        out = row + np.arange(k)
        row += k
        return out

    if idx.r:
        nb = 2 * n_s + 1
        tt = np.arange(N)
        jj = np.arange(n_s)
        for i, c in enumerate(cfg.constraints):
            if c.h.size != n:
                raise DimensionMismatch(f"constraint {i} has {c.h.size} coefficients, state has {n}")
            # one block of 2 N_s + 1 rows per step, see dr_cvar.build_cvar_block
            rr = new_rows(N * nb).reshape(N, nb)
            tcol = idx.tau_idx(i, tt)
            s_cols = idx.s + (i * N + tt)[:, None] * n_s + jj[None, :]
            Gc.add(rr[:, 0], tcol, -c.alpha)
            Gc.add(rr[:, :1], s_cols, 1.0 / n_s)
            if cfg.soft:
                Gc.add(rr[:, 0], idx.theta + tt, -1.0)
            nz = np.flatnonzero(c.h)
            z_cols = idx.z + tt[:, None] * n + nz[None, :]
            Gc.add(rr[:, 1:n_s + 1, None], z_cols[:, None, :], c.h[nz])
            Gc.add(rr[:, 1:n_s + 1], tcol[:, None], 1.0)
            Gc.add(rr[:, 1:n_s + 1], s_cols, -1.0)
            Gc.add(rr[:, n_s + 1:], s_cols, -1.0)
            rhs = np.zeros((N, nb))
            rhs[:, 0] = -cfg.ambiguity.epsilon * dual_norm(c.h, cfg.ambiguity.q_norm)
            rhs[:, 1:n_s + 1] = c.b - (E[:, :N] @ c.h).T
            hs.append(rhs.ravel())
    # theta >= 0 and eta >= theta
    rr = new_rows(N)
    Gc.add(rr, idx.theta + np.arange(N), -1.0)
    hs.append(np.zeros(N))
    rr = new_rows(N)
    Gc.add(rr, idx.theta + np.arange(N), 1.0)
    Gc.add(rr, idx.eta, -1.0)
    hs.append(np.zeros(N))
    # input box on v
    if cfg.input_box_v is not None:
        box = cfg.input_box_v
        vcols = idx.v + np.arange(N * m)
        rr = new_rows(N * m)
        Gc.add(rr, vcols, 1.0)
        hs.append(np.tile(box.upper, N))
        rr = new_rows(N * m)
        Gc.add(rr, vcols, -1.0)
        hs.append(-np.tile(box.lower, N))
    # L1 input epigraph: +-(v + e_u) <= rho
    if ikind == "l1":
        k = n_s * N * m
        rho_cols = idx.rho + np.arange(k)
        v_cols = np.tile(idx.v + np.arange(N * m), n_s)
        eu = Eu.reshape(-1)
        rr = new_rows(k)
        Gc.add(rr, v_cols, 1.0)
        Gc.add(rr, rho_cols, -1.0)
        hs.append(-eu)
        rr = new_rows(k)
        Gc.add(rr, v_cols, -1.0)
        Gc.add(rr, rho_cols, -1.0)
        hs.append(eu)
    # weighted L1 state epigraph: +-(z + e - x_s) <= sigma
    if kind == "weighted_l1":
        k = n_s * N * n
        sig_cols = idx.sigma + np.arange(k)
        z_cols = np.tile(idx.z + np.arange(N * n), n_s)
        dev = (E[:, :N] - xs).reshape(-1)
        rr = new_rows(k)
        Gc.add(rr, z_cols, 1.0)
        Gc.add(rr, sig_cols, -1.0)
        hs.append(-dev)
        rr = new_rows(k)
        Gc.add(rr, z_cols, -1.0)
        Gc.add(rr, sig_cols, -1.0)
        hs.append(dev)
    if cfg.terminal.kind == "box":
        zc = idx.z_idx(N)
        rr = new_rows(n)
        Gc.add(rr, zc, 1.0)
        hs.append(cfg.terminal.box.upper)
        rr = new_rows(n)
        Gc.add(rr, zc, -1.0)
        hs.append(-cfg.terminal.box.lower)
    G = Gc.tocsr((row, idx.n_var))
    h = np.concatenate(hs) if hs else np.zeros(0)
    qp = QpStandardForm(P, qv, Aeq, beq, G, h, objective_offset=const, check_psd=False)
    return qp, idx


def solve_mpc(qp, index_map, solver_tol=DEFAULT_TOL, max_iter=100):
    """Solve an assembled MPC QP and unpack it.

    Raises:
        InfeasibleHardTerminal: the problem is primal infeasible and
            dropping the terminal equality rows makes it solvable.
    """
    sol = solve_qp(qp, tol=solver_tol, max_iter=max_iter)
    if sol.status == PRIMAL_INFEASIBLE and index_map.eq_terminal.stop > index_map.eq_terminal.start:
        keep = np.ones(qp.n_eq, dtype=bool)
        keep[index_map.eq_terminal] = False
        relaxed = QpStandardForm(qp.P, qp.q, qp.Aeq[keep], qp.beq[keep], qp.G, qp.h, check_psd=False)
        if solve_qp(relaxed, tol=solver_tol, max_iter=max_iter).status == OPTIMAL:
            raise InfeasibleHardTerminal("terminal equality cannot be met within the horizon")
    parts = index_map.unpack(sol.x)
    return MpcSolution(
        v_star=parts["v"].copy(),
        z_star=parts["z"].copy(),
        theta_star=parts["theta"].copy(),
        tau_star=parts["tau"].copy(),
        s_star=parts["s"].copy(),
        objective=sol.objective,
        status=sol.status,
        solve_time=sol.solve_time,
        iterations=sol.iterations,
        qp_solution=sol,
    )


def control_input(sol, ctrl, e_k):
    """``u(k) = v*(0) + pi(e(k))``."""
    if sol.status != OPTIMAL:
        raise NotSolved(f"MPC status is {sol.status}")
    return sol.v_star[0] + apply_controller(ctrl, e_k)


def steady_input(sys, x_f, wbar):
    """Input holding ``x_f`` fixed under the known disturbance ``wbar``."""
    rhs = np.asarray(x_f, dtype=float) - sys.A @ x_f - wbar
    u, *_ = np.linalg.lstsq(sys.B, rhs, rcond=None)
    return u


@dataclass
class Candidate:
    v: np.ndarray
    z: np.ndarray
    theta: np.ndarray


def candidate_shift(prev, sys, cfg, wbar_next):
    """Shifted candidate ``(v, z, theta)`` for the next step.

    ``wbar_next`` is the known disturbance (state coordinates) acting at the
    last step of the shifted horizon.
    """
    term = cfg.terminal
    zN = prev.z_star[-1]
    if term.kind == "singleton":
        u_f = steady_input(sys, term.x_f, wbar_next)
    elif term.kind == "box" and term.policy_gain is not None:
        u_f = np.asarray(term.policy_gain, dtype=float) @ zN
    else:
        raise NoTerminalPolicy(f"no terminal policy for terminal kind {term.kind!r}")
    z_new = sys.A @ zN + sys.B @ u_f + wbar_next
    v = np.vstack([prev.v_star[1:], u_f[None, :]])
    z = np.vstack([prev.z_star[1:], z_new[None, :]])
    theta = np.concatenate([prev.theta_star[1:], [0.0]])
    return Candidate(v, z, theta)
