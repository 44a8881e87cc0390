import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drtube.building import four_room_model
from drtube.disturbance_data import ScenarioDisturbances, known_disturbance_at
from drtube.errors import (
    DimensionMismatch,
    EmptyTightening,
    InvalidParams,
    NoConvergence,
    NotLinear,
)
from drtube.mpc_core import steady_input
from drtube.tube_dynamics import (
    Box,
    LtiSystem,
    TubeController,
    apply_controller,
    explicit_error_affine,
    nominal_step,
    propagate_error_scenarios,
    riccati_residual,
    solve_dare,
    tighten_input_box,
)

GOLDEN = (1 + np.sqrt(5)) / 2


def _fixed_point_oracle(a, b, q, r, iters=10_000):
    """Scalar Riccati recursion run to machine precision."""
    p = q
    for _ in range(iters):
        p = q + a * a * p - (a * p * b) ** 2 / (r + b * p * b)
    return p


# --- DARE ----------------------------------------------------------------------------

def test_scalar_dare_golden_ratio():
    P, K = solve_dare(1.0, 1.0, 1.0, 1.0)
    assert P[0, 0] == pytest.approx(GOLDEN, abs=1e-12)
    assert P[0, 0] == pytest.approx(_fixed_point_oracle(1.0, 1.0, 1.0, 1.0), abs=1e-12)
    assert K[0, 0] == pytest.approx(1 - GOLDEN, abs=1e-12)
    assert 1 + K[0, 0] == pytest.approx(0.381966, abs=1e-6)


def test_dare_zero_a_gives_q_and_zero_gain():
    P, K = solve_dare(np.zeros((2, 2)), np.eye(2), np.eye(2), np.eye(2))
    assert np.allclose(P, np.eye(2), atol=1e-14)
    assert np.allclose(K, 0, atol=1e-14)


def test_dare_uncontrollable_raises():
    A = np.diag([1.2, 0.5])
    B = np.array([[1.0], [0.0]])
    with pytest.raises(NoConvergence):
        solve_dare(np.array([[1.2, 0.0], [0.0, 1.5]]), B, np.eye(2), np.eye(1))
    with pytest.raises(NoConvergence):
        solve_dare(A, np.zeros((2, 1)), np.eye(2), np.eye(1))


def test_dare_iteration_cap_raises():
    with pytest.raises(NoConvergence):
        solve_dare(1.0, 1.0, 1.0, 1.0, tol=1e-14, max_iter=2)
    # near-marginal plant: the recursion needs many sweeps
    with pytest.raises(NoConvergence):
        solve_dare(1.0, 1e-3, 1e-6, 1.0, max_iter=5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_dare_residual_and_stability(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 4), rng.integers(1, 3)
    A = rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    P, K = solve_dare(A, B, np.eye(n), np.eye(m))
    assert riccati_residual(A, B, np.eye(n), np.eye(m), P) <= 1e-8 * max(1.0, np.abs(P).max())
    assert np.max(np.abs(np.linalg.eigvals(A + B @ K))) < 1
    assert np.allclose(P, P.T)


def test_four_room_lqr_is_stabilising():
    m = four_room_model()
    P, K = solve_dare(m.sys.A, m.sys.B, 1e3 * np.eye(4), np.eye(4))
    assert riccati_residual(m.sys.A, m.sys.B, 1e3 * np.eye(4), np.eye(4), P) <= 1e-10 * np.abs(P).max()
    assert np.max(np.abs(np.linalg.eigvals(m.sys.A + m.sys.B @ K))) < 1


# --- systems and boxes --------------------------------------------------------------

def test_lti_checks_dimensions_and_controllability():
    with pytest.raises(DimensionMismatch):
        LtiSystem(np.eye(2), np.ones((3, 1)))
    with pytest.raises(InvalidParams):
        LtiSystem(np.eye(2), np.array([[1.0], [0.0]]))
    s = LtiSystem(np.eye(2), np.eye(2))
    assert (s.n, s.m) == (2, 2)


def test_box_validation():
    with pytest.raises(EmptyTightening):
        Box(np.array([1.0]), np.array([0.0]))
    b = Box.symmetric(2.0, 3)
    assert b.contains(np.array([2.0, -2.0, 0.0]))
    assert not b.contains(np.array([2.1, 0.0, 0.0]))


# --- controller ------------------------------------------------------------------------

def test_controller_zero_error_gives_zero():
    K = np.array([[-0.618]])
    for ctrl in (TubeController(K), TubeController(K, 1.0)):
        assert np.array_equal(apply_controller(ctrl, np.zeros(1)), np.zeros(1))


def test_saturated_controller_clamps():
    ctrl = TubeController(np.array([[-0.618]]), 1.0)
    assert apply_controller(ctrl, np.array([3.0]))[0] == -1.0
    assert apply_controller(ctrl, np.array([0.5]))[0] == pytest.approx(-0.309, abs=1e-15)
    assert ctrl.kind == "saturated" and TubeController(np.eye(1)).kind == "linear"


@settings(max_examples=50)
@given(arrays(np.float64, (200, 3), elements=st.floats(-1e6, 1e6)))
def test_saturated_output_in_action_box(E):
    rng = np.random.default_rng(0)
    ctrl = TubeController(rng.normal(size=(2, 3)) * 10, np.array([1.0, 0.5]))
    U = apply_controller(ctrl, E)
    assert np.all(np.abs(U) <= ctrl.limit)


def test_saturated_output_in_action_box_many_random():
    rng = np.random.default_rng(1)
    ctrl = TubeController(rng.normal(size=(4, 4)) * 5, 1.0)
    U = apply_controller(ctrl, rng.normal(size=(10_000, 4)) * 3)
    assert np.max(np.abs(U)) <= 1.0


# --- error propagation ---------------------------------------------------------------------

def _scalar_sys():
    return LtiSystem(np.array([[1.0]]), np.array([[1.0]]))


def _w(values):
    return ScenarioDisturbances(np.asarray(values, dtype=float))


def test_zero_error_zero_noise_stays_zero():
    m = four_room_model()
    ctrl = TubeController(np.eye(4) * -0.3, 1.0)
    out = propagate_error_scenarios(m.sys, ctrl, np.zeros(4), _w(np.zeros((3, 5, 4))))
    assert not np.any(out.errors) and not np.any(out.input_errors)


def test_scalar_hand_recursion():
    ctrl = TubeController(np.array([[-0.5]]))
    w = _w(np.full((1, 2, 1), 0.1))
    rec = propagate_error_scenarios(_scalar_sys(), ctrl, np.array([1.0]), w)
    exp = explicit_error_affine(_scalar_sys(), ctrl, np.array([1.0]), w)
    assert np.allclose(rec.errors[0, :, 0], [1.0, 0.6, 0.4], atol=1e-15)
    assert np.allclose(exp.errors[0, :, 0], [1.0, 0.6, 0.4], atol=1e-15)
    assert np.allclose(rec.input_errors[0, :, 0], [-0.5, -0.3], atol=1e-15)


def test_explicit_form_rejects_saturated():
    with pytest.raises(NotLinear):
        explicit_error_affine(_scalar_sys(), TubeController(np.array([[-0.5]]), 1.0), np.zeros(1), _w(np.zeros((1, 1, 1))))


def test_explicit_form_t0_and_open_loop():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(3, 3)) * 0.5
    sys = LtiSystem(A, np.eye(3))
    e0 = rng.normal(size=3)
    w = _w(rng.normal(size=(2, 4, 3)))
    out = explicit_error_affine(sys, np.zeros((3, 3)), e0, w)
    assert np.array_equal(out.errors[:, 0], np.broadcast_to(e0, (2, 3)))
    assert not np.any(out.input_errors)
    e = e0.copy()
    for t in range(4):
        e = A @ e + w.values[1, t]
    assert np.allclose(out.errors[1, 4], e, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_recursive_matches_explicit_for_linear(seed):
    rng = np.random.default_rng(seed)
    n, m, N, ns = 3, 2, 6, 4
    sys = LtiSystem(rng.normal(size=(n, n)) * 0.6, rng.normal(size=(n, m)))
    K = rng.normal(size=(m, n)) * 0.3
    e0 = rng.normal(size=n)
    w = _w(rng.normal(size=(ns, N, n)))
    rec = propagate_error_scenarios(sys, TubeController(K), e0, w)
    exp = explicit_error_affine(sys, K, e0, w)
    scale = 1.0 + np.abs(exp.errors).max()
    assert np.max(np.abs(rec.errors - exp.errors)) <= 1e-12 * scale
    assert np.max(np.abs(rec.input_errors - exp.input_errors)) <= 1e-12 * scale


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_superposition_for_linear(seed):
    rng = np.random.default_rng(seed)
    sys = LtiSystem(rng.normal(size=(2, 2)) * 0.7, rng.normal(size=(2, 1)))
    ctrl = TubeController(rng.normal(size=(1, 2)) * 0.3)
    e0 = rng.normal(size=2)
    w = _w(rng.normal(size=(3, 5, 2)))
    full = propagate_error_scenarios(sys, ctrl, e0, w).errors
    free = propagate_error_scenarios(sys, ctrl, e0, _w(np.zeros((3, 5, 2)))).errors
    forced = propagate_error_scenarios(sys, ctrl, np.zeros(2), w).errors
    assert np.allclose(full - free, forced, rtol=0, atol=1e-12 * (1 + np.abs(full).max()))


def test_propagation_invariants_with_saturation():
    rng = np.random.default_rng(4)
    m = four_room_model()
    ctrl = TubeController(-np.eye(4) * 2.0, 1.0)
    e0 = rng.normal(size=4)
    out = propagate_error_scenarios(m.sys, ctrl, e0, _w(rng.normal(size=(5, 6, 4))))
    assert np.array_equal(out.errors[:, 0], np.broadcast_to(e0, (5, 4)))
    for t in range(6):
        assert np.array_equal(out.input_errors[:, t], apply_controller(ctrl, out.errors[:, t]))


def test_propagation_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        propagate_error_scenarios(_scalar_sys(), TubeController(np.eye(1)), np.zeros(2), _w(np.zeros((1, 1, 1))))


# --- tightening -----------------------------------------------------------------------------

def test_tightening_reference_values():
    U = Box.symmetric(4.5, 4)
    V = tighten_input_box(U, TubeController(np.eye(4), 1.0))
    assert np.array_equal(V.upper, np.full(4, 3.5)) and np.array_equal(V.lower, np.full(4, -3.5))
    V0 = tighten_input_box(U, TubeController(np.eye(4), 0.0))
    assert np.array_equal(V0.lower, U.lower) and np.array_equal(V0.upper, U.upper)
    with pytest.raises(EmptyTightening):
        tighten_input_box(U, TubeController(np.eye(4), 5.0))
    with pytest.raises(InvalidParams):
        tighten_input_box(U, TubeController(np.eye(4)))


@settings(max_examples=50)
@given(arrays(np.float64, 4, elements=st.floats(-1.0, 1.0)), arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)))
def test_tightened_input_plus_feedback_stays_admissible(frac, e):
    U = Box.symmetric(4.5, 4)
    ctrl = TubeController(np.ones((4, 4)) * -0.7, 1.0)
    V = tighten_input_box(U, ctrl)
    v = frac * V.upper
    assert U.contains(v + apply_controller(ctrl, e))


# --- nominal step -------------------------------------------------------------------------------

def test_nominal_step_trivial_cases():
    sys = LtiSystem(np.eye(2), np.eye(2))
    assert np.array_equal(nominal_step(sys, np.zeros(2), np.zeros(2), np.zeros(2)), np.zeros(2))
    assert np.array_equal(nominal_step(sys, np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.zeros(2)), np.ones(2))


def test_four_room_fixed_point_with_steady_input():
    m = four_room_model()
    wbar = known_disturbance_at(m.profile, 0)
    u_s = steady_input(m.sys, m.x_s, wbar)
    # independent oracle: (I - A) x_s = B u_s + wbar
    assert np.allclose((np.eye(4) - m.sys.A) @ m.x_s, m.sys.B @ u_s + wbar, atol=1e-10)
    assert np.max(np.abs(nominal_step(m.sys, m.x_s, u_s, wbar) - m.x_s)) <= 1e-10
