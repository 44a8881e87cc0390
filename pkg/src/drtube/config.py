"""Run configuration: JSON schema, defaults, validation, hashing.

Every field has a default; a config file only lists what it changes.
Unknown keys anywhere are rejected. ``RunConfig.from_dict(cfg.to_dict())``
reproduces ``cfg`` exactly, and :func:`config_hash` is computed from the
canonical JSON of ``to_dict()`` with the parallelism degree removed (it
never changes results).
"""

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig


def _default_constraints():
    out = []
    for i in range(4):
        h = [0.0] * 4
        h[i] = -1.0
        out.append({"name": f"x{i + 1}_lo", "h": h, "b": -20.4, "alpha": 0.3, "p_level": 0.9})
    for i in range(4):
        h = [0.0] * 4
        h[i] = 1.0
        out.append({"name": f"x{i + 1}_hi", "h": h, "b": 21.6, "alpha": 0.3, "p_level": 0.9})
    return out


DEFAULTS = {
    "model": {"name": "four_room", "overrides": {}},
    "disturbance": {
        "kernel": {"nugget": 0.1, "scale": 2.0, "length_sq": 60.0},
        "n_dims": 4,
        "trajectories": 1000,
        "horizon": 60,
        "seed": 0,
        "selector": "per_run",
    },
    "ambiguity": {"epsilon": 1e-4, "beta": 0.1, "q_norm": 1},
    "constraints": _default_constraints(),
    "controller": {"lqr_Q": 1000.0, "lqr_R": 1.0, "saturation_limit": 1.0},
    "mpc": {
        "N": 12,
        "n_samples": 10,
        "penalty_c": 1000.0,
        "soft": True,
        "solver_tol": 1e-8,
        "state_cost": {"kind": "quadratic", "weight": 0.01},
        "input_cost": {"kind": "l1", "weight": 1.0},
        "terminal": {"kind": "singleton"},
        "terminal_cost": None,
    },
    "sim": {
        "N_T": 48,
        "runs": 200,
        "seed": 2024,
        "parallelism": None,
        "true_noise": "resample",
        "candidate_checks": 20,
        "record_timing": True,
        "trace_runs": None,
    },
    "sweep": {"epsilons": [0.0, 1e-5, 1e-4, 1e-3], "sample_sizes": [10, 20, 50]},
    "report": {"constraint": "x2_lo", "min_satisfaction": None, "max_solve_ms": None},
}

# leaf value kinds used by the validator
_NUM, _INT, _BOOL, _STR = "number", "integer", "boolean", "string"
_SCHEMA = {
    "model": {"name": ("enum", ("four_room",)), "overrides": "overrides"},
    "disturbance": {
        "kernel": {"nugget": _NUM, "scale": _NUM, "length_sq": _NUM},
        "n_dims": _INT,
        "trajectories": _INT,
        "horizon": _INT,
        "seed": _INT,
        "selector": "selector",
    },
    "ambiguity": {"epsilon": _NUM, "beta": _NUM, "q_norm": ("enum", (1, 2, "inf"))},
    "constraints": "constraints",
    "controller": {"lqr_Q": "weight", "lqr_R": "weight", "saturation_limit": _NUM},
    "mpc": {
        "N": _INT,
        "n_samples": _INT,
        "penalty_c": _NUM,
        "soft": _BOOL,
        "solver_tol": _NUM,
        "state_cost": {"kind": ("enum", ("quadratic", "weighted_l1")), "weight": "weight"},
        "input_cost": {"kind": ("enum", ("l1", "quadratic")), "weight": "weight"},
        "terminal": {"kind": ("enum", ("singleton", "none"))},
        "terminal_cost": ("nullable", "weight"),
    },
    "sim": {
        "N_T": _INT,
        "runs": _INT,
        "seed": _INT,
        "parallelism": ("nullable", _INT),
        "true_noise": ("enum", ("resample", "trajectory", "zero")),
        "candidate_checks": _INT,
        "record_timing": _BOOL,
        "trace_runs": ("nullable", _INT),
    },
    "sweep": {"epsilons": "num_list", "sample_sizes": "int_list"},
    "report": {
        "constraint": _STR,
        "min_satisfaction": ("nullable", _NUM),
        "max_solve_ms": ("nullable", _NUM),
    },
}

_OVERRIDE_KEYS = {
    "capacitance", "r_ambient", "r_coupling", "dt", "noise_gain", "u_max", "x0", "x_s",
    "ambient_amplitude", "ambient_phase", "ambient_rate", "ambient_offset",
}
_CONSTRAINT_KEYS = {"name", "h", "b", "alpha", "p_level"}


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _fail(path, msg):
    raise InvalidConfig(f"{path}: {msg}")


def _check_weight(v, path):
    if _is_num(v):
        return float(v)
    if isinstance(v, list) and v and all(_is_num(a) for a in v):
        return [float(a) for a in v]
    if isinstance(v, list) and v and all(isinstance(r, list) and len(r) == len(v) and all(_is_num(a) for a in r) for r in v):
        return [[float(a) for a in r] for r in v]
    _fail(path, "expected a number, a diagonal list or a square matrix")


def _check_leaf(kind, v, path):
    if isinstance(kind, tuple) and kind[0] == "nullable":
        return None if v is None else _check_leaf(kind[1], v, path)
    if isinstance(kind, tuple) and kind[0] == "enum":
        if v not in kind[1] or isinstance(v, bool):
            _fail(path, f"expected one of {list(kind[1])}, got {v!r}")
        return v
    if kind == _NUM:
        if not _is_num(v):
            _fail(path, f"expected a finite number, got {v!r}")
        return float(v)
    if kind == _INT:
        if not _is_int(v):
            _fail(path, f"expected an integer, got {v!r}")
        return v
    if kind == _BOOL:
        if not isinstance(v, bool):
            _fail(path, f"expected true/false, got {v!r}")
        return v
    if kind == _STR:
        if not isinstance(v, str):
            _fail(path, f"expected a string, got {v!r}")
        return v
    if kind == "weight":
        return _check_weight(v, path)
    if kind == "num_list":
        if not isinstance(v, list) or not v or not all(_is_num(a) for a in v):
            _fail(path, "expected a nonempty list of numbers")
        return [float(a) for a in v]
    if kind == "int_list":
        if not isinstance(v, list) or not v or not all(_is_int(a) for a in v):
            _fail(path, "expected a nonempty list of integers")
        return list(v)
    if kind == "selector":
        if v in ("first", "per_run"):
            return v
        if isinstance(v, list) and len(v) == 2 and v[0] == "seeded_random" and _is_int(v[1]):
            return list(v)
        _fail(path, "expected \"per_run\", \"first\" or [\"seeded_random\", seed]")
    if kind == "overrides":
        if not isinstance(v, dict):
            _fail(path, "expected an object")
        for key, val in v.items():
            if key not in _OVERRIDE_KEYS:
                _fail(f"{path}.{key}", "unknown model parameter")
            if isinstance(val, list):
                if not all(_is_num(a) or a == "inf" for a in val):
                    _fail(f"{path}.{key}", "expected numbers")
            elif not _is_num(val):
                _fail(f"{path}.{key}", "expected a number or list of numbers")
        return copy.deepcopy(v)
    if kind == "constraints":
        if not isinstance(v, list) or not v:
            _fail(path, "expected a nonempty list of constraints")
        out = []
        for i, c in enumerate(v):
            p = f"{path}[{i}]"
            if not isinstance(c, dict):
                _fail(p, "expected an object")
            for key in c:
                if key not in _CONSTRAINT_KEYS:
                    _fail(f"{p}.{key}", "unknown key")
            if "h" not in c or "b" not in c:
                _fail(p, "h and b are required")
            h = c["h"]
            if not isinstance(h, list) or not h or not all(_is_num(a) for a in h):
                _fail(f"{p}.h", "expected a list of numbers")
            if not _is_num(c["b"]):
                _fail(f"{p}.b", "expected a number")
            alpha, plev = c.get("alpha"), c.get("p_level")
            if alpha is None and plev is None:
                _fail(p, "give alpha or p_level")
            if alpha is not None and not (_is_num(alpha) and 0 < alpha < 1):
                _fail(f"{p}.alpha", "must lie in (0, 1)")
            if plev is not None and not (_is_num(plev) and 0 < plev < 1):
                _fail(f"{p}.p_level", "must lie in (0, 1)")
            out.append({
                "name": str(c.get("name", f"c{i}")),
                "h": [float(a) for a in h],
                "b": float(c["b"]),
                "alpha": None if alpha is None else float(alpha),
                "p_level": None if plev is None else float(plev),
            })
        return out
    raise AssertionError(kind)


def _merge(schema, defaults, given, path):
    if not isinstance(given, dict):
        _fail(path or "<root>", "expected an object")
    for key in given:
        if key not in schema:
            _fail(f"{path}.{key}" if path else key, "unknown key")
    out = {}
    for key, kind in schema.items():
        p = f"{path}.{key}" if path else key
        if isinstance(kind, dict):
            out[key] = _merge(kind, defaults[key], given.get(key, {}), p)
        else:
            out[key] = _check_leaf(kind, given[key] if key in given else copy.deepcopy(defaults[key]), p)
    return out


def _semantic_checks(d):
    dist, mpc, sim = d["disturbance"], d["mpc"], d["sim"]
    k = dist["kernel"]
    if not k["nugget"] > 0 or not k["scale"] >= 0 or not k["length_sq"] > 0:
        _fail("disturbance.kernel", "need nugget > 0, scale >= 0, length_sq > 0")
    if dist["trajectories"] < 1:
        _fail("disturbance.trajectories", "must be >= 1")
    if dist["n_dims"] != 4:
        _fail("disturbance.n_dims", "the four-room model has 4 states")
    if dist["horizon"] < 1:
        _fail("disturbance.horizon", "must be >= 1")
    if mpc["N"] < 1:
        _fail("mpc.N", "must be >= 1")
    if mpc["n_samples"] < 1:
        _fail("mpc.n_samples", "must be >= 1")
    if not mpc["penalty_c"] > 0:
        _fail("mpc.penalty_c", "must be > 0")
    if not mpc["solver_tol"] > 0:
        _fail("mpc.solver_tol", "must be > 0")
    if sim["N_T"] < 1 or sim["runs"] < 1:
        _fail("sim", "N_T and runs must be >= 1")
    if sim["parallelism"] is not None and sim["parallelism"] < 1:
        _fail("sim.parallelism", "must be >= 1")
    if sim["candidate_checks"] < 0:
        _fail("sim.candidate_checks", "must be >= 0")
    if d["ambiguity"]["epsilon"] < 0 or any(e < 0 for e in d["sweep"]["epsilons"]):
        _fail("ambiguity.epsilon", "must be >= 0")
    if not 0 < d["ambiguity"]["beta"] < 1:
        _fail("ambiguity.beta", "must lie in (0, 1)")
    if any(n < 1 for n in d["sweep"]["sample_sizes"]):
        _fail("sweep.sample_sizes", "must be >= 1")
    if d["controller"]["saturation_limit"] < 0:
        _fail("controller.saturation_limit", "must be >= 0")
    for i, c in enumerate(d["constraints"]):
        if len(c["h"]) != dist["n_dims"]:
            _fail(f"constraints[{i}].h", f"needs {dist['n_dims']} entries")
        if not any(c["h"]):
            _fail(f"constraints[{i}].h", "must be nonzero")
    names = [c["name"] for c in d["constraints"]]
    if len(set(names)) != len(names):
        _fail("constraints", "names must be unique")
    if d["report"]["constraint"] not in names:
        _fail("report.constraint", f"{d['report']['constraint']!r} is not a constraint name")


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration. ``data`` is the full, normalized JSON tree."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, given):
        d = _merge(_SCHEMA, DEFAULTS, given, "")
        _semantic_checks(d)
        return cls(d)

    @classmethod
    def default(cls):
        return cls.from_dict({})

    def to_dict(self):
        return copy.deepcopy(self.data)

    def to_json(self):
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def __getitem__(self, key):
        return self.data[key]

    def with_overrides(self, **sections):
        """New config with ``section={key: value}`` updates applied."""
        d = self.to_dict()
        for sec, vals in sections.items():
            if isinstance(d.get(sec), dict):
                d[sec].update(vals)
            else:
                d[sec] = vals
        return RunConfig.from_dict(d)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_json() == other.to_json()

    def __hash__(self):
        return hash(self.to_json())


def load_config(path):
    """Parse a JSON config file; ``None`` gives the defaults.

    Raises:
        InvalidConfig: bad JSON (with line/column) or schema violation.
    """
    if path is None:
        return RunConfig.default()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    try:
        given = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return RunConfig.from_dict(given)


def config_hash(cfg):
    d = cfg.to_dict()
    d["sim"].pop("parallelism", None)
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def weight_matrix(w, n):
    """Scalar -> w I, list -> diag, nested list -> matrix."""
    a = np.asarray(w, dtype=float)
    if a.ndim == 0:
        return float(a) * np.eye(n)
    if a.ndim == 1:
        if a.size != n:
            raise InvalidConfig(f"diagonal weight needs {n} entries")
        return np.diag(a)
    if a.shape != (n, n):
        raise InvalidConfig(f"weight matrix must be {n}x{n}")
    return a
