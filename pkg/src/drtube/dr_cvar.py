"""Wasserstein DR-CVaR halfspace constraints as linear inequality blocks.

For a constraint ``h'x <= b`` with loss ``h'x - b``, empirical error atoms
``e_j`` and a q-norm Wasserstein ball of radius eps, the worst-case CVaR at
level alpha is at most zero iff there are ``tau`` and ``s >= 0`` with

    -alpha tau + eps ||h||_p + mean(s) <= 0,
    h'(z + e_j) - b + tau <= s_j      for every j,

where p is the dual exponent of q. The multiplier of the norm term is fixed
at its optimal value ``||h||_p``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .qp_solver import QpStandardForm

_DUAL = {1: np.inf, 2: 2, np.inf: 1}


def _norm_key(q):
    if q in ("inf", "Inf", "infinity") or q == np.inf:
        return np.inf
    q = int(q)
    if q not in (1, 2):
        raise ValueError(f"unsupported transport norm {q!r}; use 1, 2 or inf")
    return q


def dual_exponent(q):
    return _DUAL[_norm_key(q)]


def dual_norm(a, q):
    """``||a||_p`` with ``1/p + 1/q = 1``."""
    return float(np.linalg.norm(np.atleast_1d(np.asarray(a, dtype=float)), ord=dual_exponent(q)))


@dataclass(frozen=True)
class HalfspaceChanceConstraint:
    """``P(h'x <= b) >= p_level``, handled through CVaR at level ``alpha``.

    ``alpha`` defaults to ``1 - p_level`` but may be set independently.
    """

    h: np.ndarray
    b: float = 1.0
    alpha: float = None
    p_level: float = None
    name: str = ""

    def __post_init__(self):
        h = np.atleast_1d(np.asarray(self.h, dtype=float))
        if not np.any(h):
            raise ValueError("h must be nonzero")
        object.__setattr__(self, "h", h)
        alpha, p = self.alpha, self.p_level
        if alpha is None and p is None:
            raise ValueError("give alpha or p_level")
        if alpha is None:
            alpha = 1.0 - p
        if p is None:
            p = 1.0 - alpha
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        object.__setattr__(self, "alpha", float(alpha))
        object.__setattr__(self, "p_level", float(p))
        object.__setattr__(self, "b", float(self.b))

    def loss(self, x):
        return np.asarray(x, dtype=float) @ self.h - self.b


@dataclass(frozen=True)
class AmbiguityConfig:
    epsilon: float = 0.0
    q_norm: object = 1
    beta: float = 0.1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        object.__setattr__(self, "q_norm", _norm_key(self.q_norm))
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")

    @property
    def p_norm(self):
        return dual_exponent(self.q_norm)


@dataclass(frozen=True)
class CvarLpBlock:
    """Rows ``Cz z + Ctau tau + Cs s + Ctheta theta <= rhs``.

    Row 0 is the budget row, rows 1..N_s the sample rows and rows
    N_s+1..2N_s the sign rows ``-s_j <= 0``.
    """

    Cz: np.ndarray
    Ctau: np.ndarray
    Cs: np.ndarray
    Ctheta: np.ndarray
    rhs: np.ndarray
    lambda_value: float
    soft: bool

    @property
    def n_samples(self):
        return self.Cs.shape[1]

    def row_values(self, z, tau, s, theta=0.0):
        return self.Cz @ z + self.Ctau * tau + self.Cs @ s + self.Ctheta * theta - self.rhs

    def feasibility_problem(self, z):
        """Feasibility QP over ``(tau, s)`` with ``z`` fixed (hard rows)."""
        n_s = self.n_samples
        G = np.hstack([self.Ctau[:, None], self.Cs])
        h = self.rhs - self.Cz @ np.asarray(z, dtype=float)
        return QpStandardForm(sp.csr_matrix((n_s + 1, n_s + 1)), np.zeros(n_s + 1), G=G, h=h, check_psd=False)


def build_cvar_block(c, amb, errors_at_t, soft=False):
    """Linear rows for one DR-CVaR constraint at one prediction step."""
    E = np.atleast_2d(np.asarray(errors_at_t, dtype=float))
    n_s, n = E.shape
    if n_s < 1:
        raise ValueError("need at least one scenario")
    lam = dual_norm(c.h, amb.q_norm)
    rows = 2 * n_s + 1
    Cz = np.zeros((rows, n))
    Ctau = np.zeros(rows)
    Cs = np.zeros((rows, n_s))
    Ctheta = np.zeros(rows)
    rhs = np.zeros(rows)
    # budget
    Ctau[0] = -c.alpha
    Cs[0, :] = 1.0 / n_s
    Ctheta[0] = -1.0 if soft else 0.0
    rhs[0] = -amb.epsilon * lam
    # sample rows, constants h'e_j precomputed
    he = E @ c.h
    idx = np.arange(n_s)
    Cz[1:n_s + 1] = c.h
    Ctau[1:n_s + 1] = 1.0
    Cs[1 + idx, idx] = -1.0
    rhs[1:n_s + 1] = c.b - he
    # sign rows
    Cs[n_s + 1 + idx, idx] = -1.0
    return CvarLpBlock(Cz, Ctau, Cs, Ctheta, rhs, lam, soft)


def evaluate_empirical_cvar(losses, alpha):
    """``inf_tau tau + mean((L - tau)_+) / alpha`` via the sorted upper tail."""
    L = np.sort(np.asarray(losses, dtype=float).ravel())[::-1]
    n = L.size
    start = np.arange(n) / n
    mass = np.clip(alpha - start, 0.0, 1.0 / n)
    return float(mass @ L / alpha)


def cvar_minimizer(losses, alpha):
    """A minimizing ``tau`` (the upper (1 - alpha) quantile atom)."""
    L = np.sort(np.asarray(losses, dtype=float).ravel())[::-1]
    k = int(np.ceil(alpha * L.size - 1e-12)) - 1
    return float(L[max(k, 0)])


def evaluate_dr_cvar_margin(c, amb, errors_at_t, z):
    """Worst-case CVaR of ``h'(z + e) - b``: empirical CVaR + eps ||h||_p / alpha."""
    E = np.atleast_2d(np.asarray(errors_at_t, dtype=float))
    losses = (np.asarray(z, dtype=float) + E) @ c.h - c.b
    return evaluate_empirical_cvar(losses, c.alpha) + amb.epsilon * dual_norm(c.h, amb.q_norm) / c.alpha


def block_minimal_vars(c, errors_at_t, z):
    """``(tau, s)`` minimizing the budget row of the block at fixed ``z``."""
    E = np.atleast_2d(np.asarray(errors_at_t, dtype=float))
    losses = (np.asarray(z, dtype=float) + E) @ c.h - c.b
    tau = -cvar_minimizer(losses, c.alpha)
    s = np.maximum(losses + tau, 0.0)
    return tau, s


def worst_case_expectation_affine(a, b0, samples, epsilon, q_norm):
    """``sup_Q E_Q[a'xi + b0]`` over the Wasserstein ball: mean + eps ||a||_*."""
    X = np.asarray(samples, dtype=float)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    X = X.reshape(-1, a.size)
    return float(np.mean(X @ a + b0) + epsilon * dual_norm(a, q_norm))
