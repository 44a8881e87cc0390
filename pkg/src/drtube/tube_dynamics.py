"""LTI plant, tube controller synthesis and scenario error propagation."""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyTightening, InvalidParams, NoConvergence, NotLinear

DARE_TOL = 1e-10
DARE_MAX_ITER = 100_000
POLISH_ITER = 200


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        up = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != up.shape:
            raise DimensionMismatch("box bounds differ in shape")
        if np.any(lo > up):
            raise EmptyTightening("box has lower > upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @classmethod
    def symmetric(cls, limit, dim=None):
        limit = np.asarray(limit, dtype=float)
        if dim is not None:
            limit = np.broadcast_to(limit, (dim,)).copy()
        return cls(-limit, limit)

    @property
    def dim(self):
        return self.lower.size

    def contains(self, v, tol=0.0):
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))


def controllability_rank(A, B):
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return int(np.linalg.matrix_rank(np.hstack(blocks)))


@dataclass(frozen=True)
class LtiSystem:
    """``x+ = A x + B u`` (known and random disturbances enter additively)."""

    A: np.ndarray
    B: np.ndarray
    check_controllable: bool = True

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        B = B.reshape(A.shape[0], -1) if B.ndim < 2 else B
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise DimensionMismatch(f"A {A.shape} and B {B.shape} are inconsistent")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self.check_controllable and controllability_rank(A, B) < A.shape[0]:
            raise InvalidParams("(A, B) is not controllable")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]


@dataclass(frozen=True)
class TubeController:
    """Error feedback ``pi(e) = K e``, optionally clamped to ``[-limit, limit]``."""

    K: np.ndarray
    limit: np.ndarray = None

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        object.__setattr__(self, "K", K)
        if self.limit is not None:
            lim = np.broadcast_to(np.asarray(self.limit, dtype=float), (K.shape[0],)).copy()
            if np.any(lim < 0):
                raise InvalidParams("saturation limit must be nonnegative")
            object.__setattr__(self, "limit", lim)

    @property
    def kind(self):
        return "linear" if self.limit is None else "saturated"

    @property
    def action_box(self):
        """E_u; ``None`` stands for the unbounded set of a linear controller."""
        return None if self.limit is None else Box(-self.limit, self.limit)


def solve_dare(A, B, Q, R, tol=DARE_TOL, max_iter=DARE_MAX_ITER):
    """Infinite-horizon LQR by fixed-point iteration of the Riccati recursion.

    Returns ``(P, K)`` with ``K = -(R + B'PB)^-1 B'PA``, so ``u = K x``.

    Raises:
        NoConvergence: (A, B) uncontrollable, the residual stays above
            ``tol * max(1, max|P|)`` after ``max_iter`` sweeps, or A + BK
            is not Schur.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if controllability_rank(A, B) < A.shape[0]:
        raise NoConvergence("(A, B) is not controllable")

    def riccati(P):
        BtPA = B.T @ P @ A
        Pn = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
        return 0.5 * (Pn + Pn.T)

    P = Q.copy()
    step = np.inf
    for _ in range(max_iter):
        P_next = riccati(P)
        step = np.max(np.abs(P_next - P))
        P = P_next
        if step <= tol * max(1.0, np.max(np.abs(P))):
            break
    else:
        raise NoConvergence(f"Riccati update {step:.3e} still above tolerance after {max_iter} sweeps")
    # keep iterating while the update still shrinks: the fixed point is
    # then accurate to rounding level rather than merely to ``tol``
    for _ in range(POLISH_ITER):
        P_next = riccati(P)
        nxt = np.max(np.abs(P_next - P))
        if not nxt < step:
            break
        P, step = P_next, nxt
    residual = np.max(np.abs(P - riccati(P)))
    if residual > tol * max(1.0, np.max(np.abs(P))):
        raise NoConvergence(f"Riccati residual {residual:.3e} > {tol:.1e} (relative to max |P|)")
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rho = np.max(np.abs(np.linalg.eigvals(A + B @ K)))
    if rho >= 1.0:
        raise NoConvergence(f"closed loop not stable (spectral radius {rho:.6f})")
    return P, K


def riccati_residual(A, B, Q, R, P):
    BtPA = B.T @ P @ A
    rhs = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
    return float(np.max(np.abs(P - rhs)))


def apply_controller(ctrl, e):
    """``pi(e)``; ``e`` may be a single vector or a stack of row vectors."""
    u = np.asarray(e, dtype=float) @ ctrl.K.T
    if ctrl.limit is not None:
        u = np.clip(u, -ctrl.limit, ctrl.limit)
    return u


@dataclass(frozen=True)
class ErrorScenarios:
    errors: np.ndarray        # [N_s, N+1, n]
    input_errors: np.ndarray  # [N_s, N, m]

    @property
    def n_samples(self):
        return self.errors.shape[0]

    @property
    def horizon(self):
        return self.input_errors.shape[1]


def propagate_error_scenarios(sys, ctrl, e0, w):
    """Roll ``e+ = A e + B pi(e) + w_j(t)`` forward for every scenario."""
    vals = np.asarray(w.values, dtype=float)
    n_s, N, n = vals.shape
    if n != sys.n or np.size(e0) != sys.n:
        raise DimensionMismatch("scenario dimension does not match the system")
    errors = np.empty((n_s, N + 1, n))
    inputs = np.empty((n_s, N, sys.m))
    errors[:, 0] = e0
    for t in range(N):
        inputs[:, t] = apply_controller(ctrl, errors[:, t])
        errors[:, t + 1] = errors[:, t] @ sys.A.T + inputs[:, t] @ sys.B.T + vals[:, t]
    return ErrorScenarios(errors, inputs)


def explicit_error_affine(sys, K, e0, w):
    """Closed-form errors for a linear tube controller.

    ``e_j(t) = A_K^t e0 + sum_{i<t} A_K^(t-1-i) w_j(i)`` with ``A_K = A + B K``.
    """
    if isinstance(K, TubeController):
        if K.kind != "linear":
            raise NotLinear("explicit error form needs a linear tube controller")
        K = K.K
    K = np.atleast_2d(np.asarray(K, dtype=float))
    vals = np.asarray(w.values, dtype=float)
    n_s, N, n = vals.shape
    AK = sys.A + sys.B @ K
    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(AK @ powers[-1])
    e0 = np.asarray(e0, dtype=float)
    errors = np.empty((n_s, N + 1, n))
    for t in range(N + 1):
        acc = np.broadcast_to(powers[t] @ e0, (n_s, n)).copy()
        for i in range(t):
            acc += vals[:, i] @ powers[t - 1 - i].T
        errors[:, t] = acc
    inputs = errors[:, :N] @ K.T
    return ErrorScenarios(errors, inputs)


def tighten_input_box(u_box, ctrl):
    """Pontryagin difference ``U - E_u`` for boxes."""
    if ctrl.limit is None:
        raise InvalidParams("input tightening needs a saturated tube controller")
    lower = u_box.lower + ctrl.limit
    upper = u_box.upper - ctrl.limit
    if np.any(lower > upper):
        raise EmptyTightening("tube controller authority exceeds the input budget")
    return Box(lower, upper)


def nominal_step(sys, z, v, wbar):
    return sys.A @ z + sys.B @ v + wbar
