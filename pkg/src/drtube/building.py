"""Four-room thermal RC network used as the reference plant.

Rooms sit on a ring 1-2-3-4-1; neighbours exchange heat through a wall
resistance, every room leaks to ambient through its own resistance and has
a heater/cooler input. Units: temperature in degC, power in kW, capacitance
in kWh/K, resistance in K/kW, time step in hours.

The numbers below are in-repo defaults, not measured building data.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from .disturbance_data import KnownDisturbanceProfile
from .errors import InvalidParams
from .tube_dynamics import Box, LtiSystem

RING = ((0, 1), (1, 2), (2, 3), (3, 0))


@dataclass(frozen=True)
class RcParams:
    capacitance: tuple = (1.0, 1.0, 1.0, 1.0)
    r_ambient: tuple = (2.5, 2.5, 2.5, 2.5)
    r_coupling: tuple = (2.0, 2.0, 2.0, 2.0)  # one per RING edge
    dt: float = 1.0
    # scales the zero-mean disturbance samples before they hit the state
    noise_gain: float = 0.0025
    u_max: float = 4.5
    x0: tuple = (20.75, 20.50, 20.65, 20.60)
    x_s: tuple = (21.0, 21.0, 21.0, 21.0)
    ambient_amplitude: float = 5.0
    ambient_phase: float = 6.0
    ambient_rate: float = 4.0
    ambient_offset: float = 19.0


@dataclass(frozen=True)
class FourRoomModel:
    sys: LtiSystem
    B_w: np.ndarray
    profile: KnownDisturbanceProfile
    u_box: Box
    x_s: np.ndarray
    x0: np.ndarray
    noise_gain: float
    params: RcParams = field(default_factory=RcParams)
    A_c: np.ndarray = None
    B_c: np.ndarray = None
    Bw_c: np.ndarray = None


def continuous_rc(params):
    """Continuous-time ``(A_c, B_c, Bw_c)`` of the RC network."""
    C = np.asarray(params.capacitance, dtype=float)
    Ra = np.asarray(params.r_ambient, dtype=float)
    Rc = np.asarray(params.r_coupling, dtype=float)
    if C.shape != (4,) or Ra.shape != (4,) or Rc.shape != (len(RING),):
        raise InvalidParams("four capacitances, four ambient and four coupling resistances expected")
    if np.any(C <= 0):
        raise InvalidParams("capacitances must be positive")
    if np.any(Rc <= 0) or np.any(Ra <= 0):
        # an infinite resistance (np.inf) models a missing path; zero or negative is invalid
        raise InvalidParams("resistances must be positive")
    L = np.zeros((4, 4))
    for (a, b), r in zip(RING, Rc):
        g = 1.0 / r
        L[a, a] += g
        L[b, b] += g
        L[a, b] -= g
        L[b, a] -= g
    g_amb = 1.0 / Ra
    A_c = -(L + np.diag(g_amb)) / C[:, None]
    B_c = np.diag(1.0 / C)
    Bw_c = (g_amb / C)[:, None]
    return A_c, B_c, Bw_c


def discretize(A_c, B_c, Bw_c, dt):
    """Zero-order-hold discretization of ``[B_c | Bw_c]`` through one matrix exponential."""
    n, m, d = A_c.shape[0], B_c.shape[1], Bw_c.shape[1]
    M = np.zeros((n + m + d, n + m + d))
    M[:n, :n] = A_c
    M[:n, n:n + m] = B_c
    M[:n, n + m:] = Bw_c
    E = expm(M * dt)
    return E[:n, :n], E[:n, n:n + m], E[:n, n + m:]


def four_room_model(param_overrides=None, horizon=60):
    """Build the discrete four-room model.

    Args:
        param_overrides: mapping of :class:`RcParams` field overrides.
        horizon: number of steps the ambient profile must cover.
    """
    params = replace(RcParams(), **(param_overrides or {}))
    A_c, B_c, Bw_c = continuous_rc(params)
    A, B, B_w = discretize(A_c, B_c, Bw_c, params.dt)
    profile = KnownDisturbanceProfile(
        mode="sinusoidal",
        params={
            "amplitude": params.ambient_amplitude,
            "phase": params.ambient_phase,
            "rate": params.ambient_rate,
            "offset": params.ambient_offset,
        },
        injection=B_w,
        horizon=horizon,
    )
    return FourRoomModel(
        sys=LtiSystem(A, B),
        B_w=B_w,
        profile=profile,
        u_box=Box.symmetric(params.u_max, 4),
        x_s=np.asarray(params.x_s, dtype=float),
        x0=np.asarray(params.x0, dtype=float),
        noise_gain=float(params.noise_gain),
        params=params,
        A_c=A_c,
        B_c=B_c,
        Bw_c=Bw_c,
    )
