import json
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drtube.config import DEFAULTS, RunConfig, config_hash, load_config, weight_matrix
from drtube.errors import InvalidConfig


def test_defaults_match_reference_experiment():
    cfg = RunConfig.default()
    assert cfg["mpc"]["N"] == 12 and cfg["sim"]["N_T"] == 48
    assert cfg["mpc"]["state_cost"] == {"kind": "quadratic", "weight": 0.01}
    assert cfg["mpc"]["input_cost"] == {"kind": "l1", "weight": 1.0}
    assert cfg["controller"] == {"lqr_Q": 1000.0, "lqr_R": 1.0, "saturation_limit": 1.0}
    assert cfg["disturbance"]["trajectories"] == 1000 and cfg["disturbance"]["horizon"] == 60
    assert len(cfg["constraints"]) == 8
    assert all(c["alpha"] == 0.3 for c in cfg["constraints"])
    assert {c["b"] for c in cfg["constraints"]} == {-20.4, 21.6}


def test_round_trip_is_identity():
    cfg = RunConfig.default()
    again = RunConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg and again.to_json() == cfg.to_json()


@settings(max_examples=30, deadline=None)
@given(
    eps=st.floats(0, 1, allow_nan=False),
    N=st.integers(1, 30),
    runs=st.integers(1, 1000),
    soft=st.booleans(),
    weight=st.one_of(st.floats(0, 10, allow_nan=False), st.lists(st.floats(0, 10, allow_nan=False), min_size=4, max_size=4)),
)
def test_round_trip_random_configs(eps, N, runs, soft, weight):
    cfg = RunConfig.from_dict({
        "ambiguity": {"epsilon": eps},
        "mpc": {"N": N, "soft": soft, "state_cost": {"kind": "weighted_l1", "weight": weight}},
        "sim": {"runs": runs},
    })
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize("given,where", [
    ({"mpc": {"horizon": 3}}, "mpc.horizon"),
    ({"bogus": 1}, "bogus"),
    ({"disturbance": {"trajectories": 0}}, "disturbance.trajectories"),
    ({"mpc": {"N": "12"}}, "mpc.N"),
    ({"mpc": {"N": 0}}, "mpc.N"),
    ({"ambiguity": {"epsilon": -1.0}}, "ambiguity.epsilon"),
    ({"ambiguity": {"q_norm": 3}}, "ambiguity.q_norm"),
    ({"constraints": [{"h": [1, 0, 0, 0], "b": 1.0}]}, "constraints[0]"),
    ({"constraints": [{"h": [1, 0], "b": 1.0, "alpha": 0.3}]}, "constraints[0].h"),
    ({"report": {"constraint": "nope"}}, "report.constraint"),
    ({"model": {"overrides": {"mass": 1.0}}}, "model.overrides.mass"),
    ({"sim": {"record_timing": 1}}, "sim.record_timing"),
])
def test_invalid_configs_name_the_field(given, where):
    with pytest.raises(InvalidConfig, match="^" + re.escape(where)):
        RunConfig.from_dict(given)


def test_load_config_reports_json_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "mpc": {"N": 12,}\n}\n')
    with pytest.raises(InvalidConfig, match="line 2"):
        load_config(str(p))
    with pytest.raises(InvalidConfig):
        load_config(str(tmp_path / "missing.json"))
    assert load_config(None) == RunConfig.default()


def test_hash_ignores_parallelism_only():
    base = RunConfig.default()
    assert config_hash(base) == config_hash(base.with_overrides(sim={"parallelism": 8}))
    assert config_hash(base) != config_hash(base.with_overrides(sim={"seed": 1}))


def test_defaults_not_mutated_by_overrides():
    RunConfig.default().with_overrides(mpc={"N": 3})
    assert DEFAULTS["mpc"]["N"] == 12


def test_weight_matrix_forms():
    assert weight_matrix(2.0, 2).tolist() == [[2.0, 0.0], [0.0, 2.0]]
    assert weight_matrix([1.0, 3.0], 2).tolist() == [[1.0, 0.0], [0.0, 3.0]]
    assert weight_matrix([[1.0, 0.5], [0.5, 1.0]], 2).tolist() == [[1.0, 0.5], [0.5, 1.0]]
    with pytest.raises(InvalidConfig):
        weight_matrix([1.0, 2.0, 3.0], 2)
