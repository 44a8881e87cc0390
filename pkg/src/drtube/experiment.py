"""Turn a :class:`RunConfig` into models, datasets and simulation setups."""

import numpy as np

from .building import four_room_model
from .config import config_hash, weight_matrix
from .disturbance_data import GpKernelParams, generate_dataset
from .dr_cvar import AmbiguityConfig, HalfspaceChanceConstraint
from .errors import InvalidConfig
from .harness import SimSetup, TrueNoise
from .mpc_core import CostConfig, MpcConfig, TerminalSet
from .tube_dynamics import TubeController, solve_dare, tighten_input_box


def _override_value(v):
    if isinstance(v, list):
        return tuple(np.inf if a == "inf" else float(a) for a in v)
    return float(v)


def build_model(cfg, horizon=None):
    """Four-room model; the ambient profile covers ``N_T + N`` steps at least."""
    overrides = {k: _override_value(v) for k, v in cfg["model"]["overrides"].items()}
    if horizon is None:
        horizon = max(cfg["disturbance"]["horizon"], cfg["sim"]["N_T"] + cfg["mpc"]["N"])
    try:
        return four_room_model(overrides, horizon=horizon)
    except TypeError as exc:
        raise InvalidConfig(f"model.overrides: {exc}") from exc


def build_kernel(cfg):
    k = cfg["disturbance"]["kernel"]
    return GpKernelParams(k["nugget"], k["scale"], k["length_sq"])


def build_dataset(cfg):
    d = cfg["disturbance"]
    return generate_dataset(build_kernel(cfg), d["n_dims"], d["trajectories"], d["horizon"], d["seed"])


def build_controller(cfg, model):
    c = cfg["controller"]
    n, m = model.sys.n, model.sys.m
    _, K = solve_dare(model.sys.A, model.sys.B, weight_matrix(c["lqr_Q"], n), weight_matrix(c["lqr_R"], m))
    return TubeController(K, c["saturation_limit"])


def build_constraints(cfg):
    return tuple(
        HalfspaceChanceConstraint(np.array(c["h"]), c["b"], alpha=c["alpha"], p_level=c["p_level"], name=c["name"])
        for c in cfg["constraints"]
    )


def build_mpc_config(cfg, model, ctrl):
    mp = cfg["mpc"]
    n, m = model.sys.n, model.sys.m
    sc = mp["state_cost"]
    if sc["kind"] == "quadratic":
        state_cost = ("quadratic", weight_matrix(sc["weight"], n))
    else:
        state_cost = ("weighted_l1", np.broadcast_to(np.asarray(sc["weight"], dtype=float), (n,)).copy())
    ic = mp["input_cost"]
    if ic["kind"] == "l1":
        if not np.isscalar(ic["weight"]):
            raise InvalidConfig("mpc.input_cost.weight: the L1 input cost takes a scalar weight")
        input_cost = ("l1", float(ic["weight"]))
    else:
        input_cost = ("quadratic", weight_matrix(ic["weight"], m))
    terminal_cost = None if mp["terminal_cost"] is None else weight_matrix(mp["terminal_cost"], n)
    if mp["terminal"]["kind"] == "singleton":
        terminal = TerminalSet("singleton", x_f=model.x_s)
    else:
        terminal = TerminalSet("none")
    amb = cfg["ambiguity"]
    q = amb["q_norm"]
    return MpcConfig(
        N=mp["N"],
        cost=CostConfig(model.x_s, state_cost, input_cost, terminal_cost),
        constraints=build_constraints(cfg),
        ambiguity=AmbiguityConfig(amb["epsilon"], q, amb["beta"]),
        terminal=terminal,
        input_box_v=tighten_input_box(model.u_box, ctrl),
        penalty_c=mp["penalty_c"],
        soft=mp["soft"],
    )


def build_setup(cfg, dataset, held_out=None):
    """Simulation setup for ``cfg`` using ``dataset`` for scenario windows.

    ``held_out`` is the dataset used when ``sim.true_noise == "trajectory"``.
    """
    model = build_model(cfg)
    ctrl = build_controller(cfg, model)
    mpc = build_mpc_config(cfg, model, ctrl)
    sim = cfg["sim"]
    selector = cfg["disturbance"]["selector"]
    selector = tuple(selector) if isinstance(selector, list) else selector
    if sim["true_noise"] == "trajectory" and held_out is None:
        raise InvalidConfig("sim.true_noise = \"trajectory\" needs a held-out dataset")
    return SimSetup(
        model=model,
        ctrl=ctrl,
        mpc=mpc,
        dataset=dataset,
        n_samples=cfg["mpc"]["n_samples"],
        N_T=sim["N_T"],
        kernel=build_kernel(cfg),
        true_noise=TrueNoise(sim["true_noise"], held_out),
        selector=selector,
        solver_tol=cfg["mpc"]["solver_tol"],
        candidate_checks=sim["candidate_checks"],
        record_timing=sim["record_timing"],
        config_hash=config_hash(cfg),
    )
