"""Convex QP solver: Mehrotra predictor-corrector interior point.

Solves::

    minimize    1/2 x'Px + q'x
    subject to  Aeq x = beq
                G x <= h

The Newton system is reduced to the quasi-definite form
``[[P + G'WG + reg I, Aeq'], [Aeq, -reg I]]`` and factored with a sparse LDL' (qdldl); the sparsity
pattern is analysed once per solve and only refactored numerically.
Static regularization is removed again by iterative refinement against the
unregularized matrix; a pivoting sparse LU takes over for the rare
factorization that refinement cannot repair.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import qdldl
import scipy.sparse.linalg as spla

OPTIMAL = "Optimal"
PRIMAL_INFEASIBLE = "PrimalInfeasible"
MAX_ITER = "MaxIter"
NUMERICAL_FAILURE = "NumericalFailure"

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
REGULARIZATION = 1e-6
EQ_REGULARIZATION = 1e-10
STEP_FRACTION = 0.99
MAX_REFINE = 8
REFINE_ACCEPT = 1e-10
REFINE_TARGET = 1e-12


def _as_csr(M, shape):
    if M is None:
        return sp.csr_matrix(shape)
    if sp.issparse(M):
        return M.tocsr().astype(float)
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return sp.csr_matrix(shape)
    return sp.csr_matrix(M.reshape(shape))


def _as_vec(v, size):
    if v is None:
        return np.zeros(size)
    return np.asarray(v, dtype=float).reshape(size)


@dataclass
class QpStandardForm:
    """QP data. Matrices may be dense arrays or scipy sparse matrices.

    ``objective_offset`` is a constant added to every reported objective
    value; it never influences the minimizer.
    """

    P: object
    q: np.ndarray
    Aeq: object = None
    beq: np.ndarray = None
    G: object = None
    h: np.ndarray = None
    objective_offset: float = 0.0
    check_psd: bool = True

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        d = self.q.size
        P = _as_csr(self.P, (d, d))
        self.P = ((P + P.T) * 0.5).tocsr()
        beq = np.asarray([] if self.beq is None else self.beq, dtype=float).ravel()
        h = np.asarray([] if self.h is None else self.h, dtype=float).ravel()
        self.Aeq = _as_csr(self.Aeq, (beq.size, d))
        self.G = _as_csr(self.G, (h.size, d))
        self.beq, self.h = beq, h
        if self.Aeq.shape != (beq.size, d) or self.G.shape != (h.size, d):
            raise ValueError("inconsistent QP dimensions")
        for name in ("q", "beq", "h"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")
        for name in ("P", "Aeq", "G"):
            if not np.all(np.isfinite(getattr(self, name).data)):
                raise ValueError(f"non-finite entries in {name}")
        if self.check_psd and 0 < d <= 400 and self.P.nnz:
            lam_min = np.linalg.eigvalsh(self.P.toarray())[0]
            if lam_min < -1e-10:
                raise ValueError(f"P is not PSD (min eigenvalue {lam_min:.3e})")

    @property
    def n_var(self):
        return self.q.size

    @property
    def n_eq(self):
        return self.beq.size

    @property
    def n_ineq(self):
        return self.h.size

    def objective(self, x):
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.objective_offset)

    def to_json_dict(self):
        """Dense row-major dump used by ``--dump-qp``."""
        return {
            "n_var": self.n_var,
            "n_eq": self.n_eq,
            "n_ineq": self.n_ineq,
            "P": self.P.toarray().tolist(),
            "q": self.q.tolist(),
            "Aeq": self.Aeq.toarray().tolist(),
            "beq": self.beq.tolist(),
            "G": self.G.toarray().tolist(),
            "h": self.h.tolist(),
            "objective_offset": self.objective_offset,
        }

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)


@dataclass
class KktResiduals:
    primal: float
    dual: float
    gap: float

    def max(self):
        return max(self.primal, self.dual, self.gap)


@dataclass
class QpSolution:
    x: np.ndarray
    y_eq: np.ndarray
    z_ineq: np.ndarray
    status: str
    residuals: KktResiduals
    iterations: int
    solve_time: float
    objective: float = float("nan")
    gap_history: list = field(default_factory=list, repr=False)

    @property
    def ok(self):
        return self.status == OPTIMAL


def kkt_residuals(p, sol):
    """Recompute primal, dual and complementarity residuals from scratch.

    primal: max of ``|Aeq x - beq|`` and the positive part of ``G x - h``.
    dual: stationarity ``|P x + q + Aeq'y + G'z|`` together with any negative
    multiplier. gap: the largest single product ``|z_i (h_i - G_i x)|``.
    All norms are infinity norms.
    """
    x, y, z = sol.x, sol.y_eq, sol.z_ineq
    primal = 0.0
    if p.n_eq:
        primal = float(np.max(np.abs(p.Aeq @ x - p.beq)))
    dual_vec = p.P @ x + p.q
    if p.n_eq:
        dual_vec = dual_vec + p.Aeq.T @ y
    gap = 0.0
    dual_neg = 0.0
    if p.n_ineq:
        slack = p.h - p.G @ x
        primal = max(primal, float(np.max(np.maximum(-slack, 0.0))))
        dual_vec = dual_vec + p.G.T @ z
        gap = float(np.max(np.abs(z * slack)))
        dual_neg = float(np.max(np.maximum(-z, 0.0)))
    dual = max(float(np.max(np.abs(dual_vec))) if dual_vec.size else 0.0, dual_neg)
    return KktResiduals(primal, dual, gap)


class _KktPattern:
    """Fixed sparsity pattern of the reduced Newton matrix.

    The upper triangle of ``[[P + G'WG + reg I, Aeq'], [Aeq, -reg I]]`` is
    stored in CSC form. Its values are an affine function of the weights
    ``w``; the map is precomputed so each iteration only needs one sparse
    matrix-vector product before the numeric LDL' refactorization.
    """

    def __init__(self, p, reg, reg_eq=EQ_REGULARIZATION):
        d, m = p.n_var, p.n_eq
        self.d, self.m, self.reg = d, m, reg
        n = d + m
        G = p.G.tocsr()
        G.sum_duplicates()
        # contributions w_k G_ka G_kb for a <= b, one triplet per pair
        lens = np.diff(G.indptr)
        pair_k, pair_a, pair_b = [], [], []
        for k_len in np.unique(lens):
            if k_len == 0:
                continue
            sel = np.flatnonzero(lens == k_len)
            ia, ib = np.triu_indices(k_len)
            base = G.indptr[sel][:, None]
            pair_k.append(np.repeat(sel, ia.size))
            pair_a.append((base + ia).ravel())
            pair_b.append((base + ib).ravel())
        if pair_k:
            pk = np.concatenate(pair_k)
            pa = np.concatenate(pair_a)
            pb = np.concatenate(pair_b)
        else:
            pk = pa = pb = np.zeros(0, dtype=int)
        ca, cb = G.indices[pa], G.indices[pb]
        r = np.minimum(ca, cb)
        c = np.maximum(ca, cb)
        gv = G.data[pa] * G.data[pb]

        Pu = sp.triu(p.P, format="coo")
        Au = p.Aeq.tocoo()
        diag = np.arange(n)
        pat_r = np.concatenate([Pu.row, r, Au.col, diag])
        pat_c = np.concatenate([Pu.col, c, Au.row + d, diag])
        keys = np.unique(pat_c.astype(np.int64) * n + pat_r)
        self.keys = keys
        nnz = keys.size
        self.indices = (keys % n).astype(np.int32)
        self.indptr = np.searchsorted(keys // n, np.arange(n + 1)).astype(np.int32)

        def pos(rr, cc):
            return np.searchsorted(keys, np.asarray(cc, dtype=np.int64) * n + rr)

        base = np.zeros(nnz)
        np.add.at(base, pos(Pu.row, Pu.col), Pu.data)
        np.add.at(base, pos(Au.col, Au.row + d), Au.data)
        self.base = base
        self.diag_pos = pos(diag, diag)
        self.reg_diag = np.concatenate([np.full(d, reg), np.full(m, -reg_eq)])
        self.wmap = sp.csr_matrix((gv, (pos(r, c), pk)), shape=(nnz, G.shape[0]))
        self.n = n
        self.solver = None

    def matrix(self, data):
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def factor(self, w):
        data = self.base + self.wmap @ w if w.size else self.base.copy()
        exact = data.copy()
        data[self.diag_pos] += self.reg_diag
        U = self.matrix(data)
        try:
            if self.solver is None:
                self.solver = qdldl.Solver(U, upper=True)
            else:
                self.solver.update(U, upper=True)
        except (ValueError, RuntimeError) as exc:
            raise RuntimeError(f"KKT factorization failed: {exc}") from exc
        return _KktFactor(self, self.matrix(exact))


class _KktFactor:
    """One numeric factorization; solves with iterative refinement.

    Refinement continues until the residual against the unregularized
    matrix stops improving. If the LDL' factor (no pivoting) is still too
    inaccurate, the matrix is refactored once with a pivoting sparse LU.
    """

    def __init__(self, pattern, upper_exact):
        self.pattern = pattern
        self.solver = pattern.solver
        self.U = upper_exact
        self.UT = upper_exact.T.tocsr()
        self.dvals = upper_exact.diagonal()
        self.lu = None

    def _mul(self, x):
        return self.U @ x + self.UT @ x - self.dvals * x

    def _pivoting_lu(self):
        if self.lu is None:
            n, pt = self.pattern.n, self.pattern
            K = (self.U + self.UT - sp.diags(self.dvals)).tocsc() + sp.diags(pt.reg_diag, format="csc")
            self.lu = spla.splu(K.tocsc(), permc_spec="COLAMD")
            self.solver = self.lu
        return self.lu

    def _error(self, res, scale):
        # blockwise relative error: the x-block rhs can be many orders of
        # magnitude larger than the equality block near convergence
        d = self.pattern.d
        ex = float(np.max(np.abs(res[:d]))) / scale[0] if d else 0.0
        ey = float(np.max(np.abs(res[d:]))) / scale[1] if res.size > d else 0.0
        return max(ex, ey)

    def _refined(self, rhs, refine, solve, scale):
        sol = solve(rhs)
        for _ in range(refine):
            sol = sol + solve(rhs - self._mul(sol))
        res = rhs - self._mul(sol)
        err = self._error(res, scale)
        for _ in range(MAX_REFINE - refine):
            if not err > REFINE_TARGET:
                break
            cand = sol + solve(res)
            res_c = rhs - self._mul(cand)
            err_c = self._error(res_c, scale)
            if not err_c < 0.5 * err:
                break
            sol, res, err = cand, res_c, err_c
        return sol, err

    def solve(self, r_x, r_y, refine=2):
        rhs = np.concatenate([r_x, r_y])
        scale = (1.0 + (float(np.max(np.abs(r_x))) if r_x.size else 0.0),
                 1.0 + (float(np.max(np.abs(r_y))) if r_y.size else 0.0))
        sol, err = self._refined(rhs, refine, self.solver.solve, scale)
        if not np.isfinite(err) or err > REFINE_ACCEPT:
            lu = self._pivoting_lu()
            sol2, err2 = self._refined(rhs, refine, lu.solve, scale)
            if err2 < err or not np.isfinite(err):
                sol = sol2
        d = self.pattern.d
        return sol[:d], sol[d:]


def _row_scale(M):
    if M.shape[0] == 0:
        return np.ones(0)
    norms = abs(M).max(axis=1).toarray().ravel()
    norms[norms == 0.0] = 1.0
    return 1.0 / norms


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _solve_equality_only(p, tol, t0):
    d, m = p.n_var, p.n_eq
    try:
        kkt = _KktPattern(p, REGULARIZATION).factor(np.zeros(0))
        x, y = kkt.solve(-p.q, p.beq, refine=3)
    except RuntimeError:
        x, y = np.zeros(d), np.zeros(m)
        sol = QpSolution(x, y, np.zeros(0), NUMERICAL_FAILURE, KktResiduals(np.inf, np.inf, 0.0), 1, time.perf_counter() - t0)
        return sol
    sol = QpSolution(x, y, np.zeros(0), OPTIMAL, None, 1, 0.0)
    sol.residuals = kkt_residuals(p, sol)
    if not np.all(np.isfinite(x)):
        sol.status = NUMERICAL_FAILURE
    elif sol.residuals.primal > max(tol, 1e-6):
        sol.status = PRIMAL_INFEASIBLE
    elif sol.residuals.max() > tol:
        sol.status = NUMERICAL_FAILURE
    sol.objective = p.objective(x)
    sol.solve_time = time.perf_counter() - t0
    return sol


def solve_qp(p, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Solve a convex QP with a primal-dual interior-point method.

    Args:
        p: the problem in standard form.
        tol: absolute tolerance on primal residual, stationarity and the
            largest complementarity product.
        max_iter: iteration cap.

    Returns:
        QpSolution. ``status`` is one of Optimal, PrimalInfeasible, MaxIter,
        NumericalFailure; the method never raises on valid input.
    """
    t0 = time.perf_counter()
    d, m, g = p.n_var, p.n_eq, p.n_ineq
    if g == 0:
        return _solve_equality_only(p, tol, t0)

    # row equilibration; iterates live in the scaled space, tests use the original one
    dg = _row_scale(p.G)
    de = _row_scale(p.Aeq)
    ps = QpStandardForm(p.P, p.q, sp.diags(de) @ p.Aeq, de * p.beq, sp.diags(dg) @ p.G, dg * p.h,
                        check_psd=False)
    P, q, A, b, G, h = ps.P, ps.q, ps.Aeq, ps.beq, ps.G, ps.h
    GT = G.T.tocsr()
    AT = A.T.tocsr()

    # Starting point: least-squares fit with unit scaling, then shift into the cone.
    pattern = _KktPattern(ps, REGULARIZATION)
    try:
        kkt = pattern.factor(np.ones(g))
        x, y = kkt.solve(-q + GT @ h, b)
    except RuntimeError:
        x, y = np.zeros(d), np.zeros(m)
    s = h - G @ x
    z = -s.copy()
    shift = -np.min(s)
    if shift >= 0:
        s = s + 1.0 + shift
    shift = -np.min(z)
    if shift >= 0:
        z = z + 1.0 + shift
    s = np.maximum(s, 1.0)
    z = np.maximum(z, 1.0)

    status = MAX_ITER
    gap_history = []
    it = 0
    best = None
    polish = 0
    for it in range(1, max_iter + 1):
        rd = P @ x + q + GT @ z
        if m:
            rd = rd + AT @ y
        rp = A @ x - b if m else np.zeros(0)
        rg = G @ x + s - h
        mu = float(s @ z) / g
        gap_history.append(mu)

        slack = (h - G @ x) / dg
        r_primal_eq = float(np.max(np.abs(rp / de))) if m else 0.0
        r_primal = max(r_primal_eq, float(np.max(np.maximum(-slack, 0.0))))
        r_dual = float(np.max(np.abs(rd))) if d else 0.0
        r_gap = float(np.max(np.abs(z * dg * slack)))
        if r_primal <= tol and r_dual <= tol and r_gap <= tol:
            status = OPTIMAL
            score = max(r_primal, r_dual, r_gap)
            if best is None or score < best[0]:
                best = (score, x.copy(), y.copy(), z.copy(), it)
            polish += 1
            # a few extra iterations shrink the objective error (sum of products)
            if r_gap <= 1e-3 * tol or polish > 3 or score > best[0]:
                break
        elif best is not None:
            break
        if not (np.isfinite(mu) and np.all(np.isfinite(x))):
            status = NUMERICAL_FAILURE
            break
        if _infeasibility_certificate(ps, y, z, GT, AT):
            status = PRIMAL_INFEASIBLE
            break
        if it >= 20 and r_primal > 1e-6 and mu < tol:
            status = PRIMAL_INFEASIBLE
            break

        w = z / s
        try:
            kkt = pattern.factor(w)
        except RuntimeError:
            status = NUMERICAL_FAILURE
            break

        # predictor
        rc = s * z
        dx, dy = kkt.solve(-rd - GT @ (w * rg - rc / s), -rp)
        Gdx = G @ dx
        ds = -rg - Gdx
        dz = w * (Gdx + rg) - rc / s
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / g
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # corrector
        rc = s * z + ds * dz - sigma * mu
        dx, dy = kkt.solve(-rd - GT @ (w * rg - rc / s), -rp)
        Gdx = G @ dx
        ds = -rg - Gdx
        dz = w * (Gdx + rg) - rc / s
        alpha = min(1.0, STEP_FRACTION * min(_max_step(s, ds), _max_step(z, dz)))
        if float((s + alpha * ds) @ (z + alpha * dz)) / g > mu:
            # corrector overshoot: try the plain centred direction with
            # backtracking so the gap does not grow; keep the corrector step
            # when that would stall progress on the residuals
            rc_c = s * z - min(sigma, 0.5) * mu
            cx, cy = kkt.solve(-rd - GT @ (w * rg - rc_c / s), -rp)
            Gcx = G @ cx
            cs = -rg - Gcx
            cz = w * (Gcx + rg) - rc_c / s
            beta = min(1.0, STEP_FRACTION * min(_max_step(s, cs), _max_step(z, cz)))
            while beta > 0.1 * alpha and float((s + beta * cs) @ (z + beta * cz)) / g > mu:
                beta *= 0.8
            if beta > 0.1 * alpha:
                dx, dy, ds, dz, alpha = cx, cy, cs, cz, beta
        x = x + alpha * dx
        y = y + alpha * dy if m else y
        s = s + alpha * ds
        z = z + alpha * dz
        s = np.maximum(s, 1e-300)
        z = np.maximum(z, 1e-300)
    else:
        it = max_iter
    if best is not None:
        status = OPTIMAL
        _, x, y, z, it = best
    y = de * y
    z = dg * z

    sol = QpSolution(x, y, z, status, None, it, 0.0, gap_history=gap_history)
    sol.residuals = kkt_residuals(p, sol)
    sol.objective = p.objective(x)
    sol.solve_time = time.perf_counter() - t0
    return sol


def _infeasibility_certificate(p, y, z, GT, AT, thresh=1e-7):
    """Farkas test on normalized duals: A'y + G'z ~ 0 with b'y + h'z < 0."""
    scale = max(float(np.max(np.abs(z))), float(np.max(np.abs(y))) if y.size else 0.0)
    if scale < 1e6:
        return False
    yn, zn = y / scale, z / scale
    lin = GT @ zn
    if y.size:
        lin = lin + AT @ yn
    # P x must not be driving the duals: for a pure feasibility certificate P'd = 0 too
    cost = float(p.h @ zn + (p.beq @ yn if y.size else 0.0))
    return float(np.max(np.abs(lin))) < thresh and cost < -thresh


@dataclass
class FeasibilityResult:
    feasible: bool
    x: np.ndarray
    max_violation: float
    status: str


def check_feasibility(p, tol=1e-10, solver_tol=1e-11, max_iter=DEFAULT_MAX_ITER):
    """Decide whether ``{Aeq x = beq, G x <= h}`` is nonempty.

    Solves the elastic phase-one problem ``min t s.t. G x - t <= h, t >= -1``
    and reports feasible when the optimal uniform violation ``t`` is at most
    ``tol``. Objective data of ``p`` are ignored.
    """
    d, g = p.n_var, p.n_ineq
    if g == 0:
        if p.n_eq == 0:
            return FeasibilityResult(True, np.zeros(d), 0.0, OPTIMAL)
        sol = solve_qp(QpStandardForm(sp.csr_matrix((d, d)), np.zeros(d), p.Aeq, p.beq, check_psd=False), tol=solver_tol)
        viol = sol.residuals.primal
        return FeasibilityResult(sol.ok and viol <= tol, sol.x, viol, sol.status)
    G1 = sp.hstack([p.G, -np.ones((g, 1))])
    row_t = sp.csr_matrix(([-1.0], ([0], [d])), shape=(1, d + 1))
    G1 = sp.vstack([G1, row_t]).tocsr()
    h1 = np.concatenate([p.h, [1.0]])
    A1 = sp.hstack([p.Aeq, sp.csr_matrix((p.n_eq, 1))]).tocsr()
    q1 = np.zeros(d + 1)
    q1[d] = 1.0
    phase1 = QpStandardForm(sp.csr_matrix((d + 1, d + 1)), q1, A1, p.beq, G1, h1, check_psd=False)
    sol = solve_qp(phase1, tol=solver_tol, max_iter=max_iter)
    x = sol.x[:d]
    t_star = float(sol.x[d])
    if sol.status == PRIMAL_INFEASIBLE:
        return FeasibilityResult(False, x, np.inf, sol.status)
    eq_viol = float(np.max(np.abs(p.Aeq @ x - p.beq))) if p.n_eq else 0.0
    feasible = t_star <= tol and eq_viol <= max(tol, 1e-8)
    return FeasibilityResult(feasible, x, t_star, sol.status)
