"""Disturbance datasets: Gaussian-process trajectories, windows, file I/O.

Trajectories are drawn with numpy's ``Generator(PCG64(seed))`` and its
``standard_normal`` (ziggurat) sampler; each state dimension gets its own
independent draw through the lower Cholesky factor of the temporal kernel.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CholeskyFailure,
    InsufficientTrajectories,
    OutOfRange,
    SchemaError,
    WindowOverrun,
)


@dataclass(frozen=True)
class GpKernelParams:
    """Stationary kernel ``nugget + scale * exp(-(i - j)^2 / length_sq)``."""

    nugget: float = 0.1
    scale: float = 2.0
    length_sq: float = 60.0

    def __post_init__(self):
        if not self.nugget > 0:
            raise ValueError("nugget must be > 0")
        if not self.scale >= 0:
            raise ValueError("scale must be >= 0")
        if not self.length_sq > 0:
            raise ValueError("length_sq must be > 0")

    def to_dict(self):
        return {"nugget": self.nugget, "scale": self.scale, "length_sq": self.length_sq}


def gaussian_kernel_covariance(params, length):
    """Temporal covariance matrix of size ``length x length``."""
    if length < 1:
        raise ValueError("length must be >= 1")
    idx = np.arange(length, dtype=float)
    diff_sq = (idx[:, None] - idx[None, :]) ** 2
    return params.nugget + params.scale * np.exp(-diff_sq / params.length_sq)


def _readonly(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DisturbanceDataset:
    """Stored trajectories, ``data[traj, step, dim]``."""

    data: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = _readonly(self.data)
        if data.ndim != 3:
            raise SchemaError("dataset tensor must be 3-D [n_traj, horizon, n_dims]")
        if data.shape[0] < 1:
            raise SchemaError("dataset needs at least one trajectory")
        if not np.all(np.isfinite(data)):
            raise SchemaError("dataset contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def n_traj(self):
        return self.data.shape[0]

    @property
    def horizon(self):
        return self.data.shape[1]

    @property
    def n_dims(self):
        return self.data.shape[2]

    def __eq__(self, other):
        return isinstance(other, DisturbanceDataset) and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class ScenarioDisturbances:
    """``values[j, t]`` = disturbance of scenario j at prediction step t."""

    values: np.ndarray
    base_time: int = 0
    indices: tuple = ()

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def length(self):
        return self.values.shape[1]

    def scaled(self, gain):
        """Scenario set mapped through a disturbance gain (scalar or matrix)."""
        gain = np.asarray(gain, dtype=float)
        vals = self.values * gain if gain.ndim == 0 else self.values @ gain.T
        return ScenarioDisturbances(vals, self.base_time, self.indices)


def cholesky_factor(cov, max_rel_jitter=1e-8):
    """Lower Cholesky factor, adding diagonal jitter only if the plain factorization fails.

    Smooth kernels on long grids are positive definite in exact arithmetic but
    lose that property in floating point; jitter starts at 1e-12 of the mean
    variance and grows tenfold up to ``max_rel_jitter``.

    Returns:
        ``(L, jitter)``.
    """
    cov = np.asarray(cov, dtype=float)
    if not np.any(cov):
        return np.zeros_like(cov), 0.0
    try:
        return np.linalg.cholesky(cov), 0.0
    except np.linalg.LinAlgError:
        pass
    base = float(np.mean(np.diag(cov)))
    rel = 1e-12
    while rel <= max_rel_jitter * (1 + 1e-9):
        jitter = rel * base
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0])), jitter
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise CholeskyFailure("covariance is not numerically positive definite")


def sample_trajectories(cov, n_dims, count, seed, kernel=None):
    """Draw ``count`` trajectories; every state dimension is an independent GP draw.

    Raises:
        CholeskyFailure: ``cov`` is not numerically positive definite even
            after the jitter allowed by :func:`cholesky_factor`. An all-zero
            matrix is accepted and yields an all-zero dataset.
    """
    cov = np.asarray(cov, dtype=float)
    length = cov.shape[0]
    factor, jitter = cholesky_factor(cov)
    rng = np.random.Generator(np.random.PCG64(seed))
    normals = rng.standard_normal((count, n_dims, length))
    data = np.einsum("tl,cdl->ctd", factor, normals)
    meta = {
        "n_dims": n_dims,
        "n_traj": count,
        "horizon": length,
        "seed": seed,
        "kernel": kernel.to_dict() if kernel is not None else "external",
        "jitter": jitter,
    }
    return DisturbanceDataset(data, meta)


def generate_dataset(kernel, n_dims, count, horizon, seed):
    cov = gaussian_kernel_covariance(kernel, horizon)
    return sample_trajectories(cov, n_dims, count, seed, kernel=kernel)


@dataclass(frozen=True)
class KnownDisturbanceProfile:
    """Deterministic disturbance ``injection @ output(k)``.

    mode is ``"sinusoidal"`` (params: amplitude, phase, rate, offset),
    ``"constant"`` (params: value vector) or ``"tabulated"`` (params: series
    of shape [horizon, d]).
    """

    mode: str
    params: dict
    injection: np.ndarray
    horizon: int

    def output(self, k):
        if not 0 <= k < self.horizon:
            raise OutOfRange(f"k={k} outside [0, {self.horizon})")
        if self.mode == "sinusoidal":
            p = self.params
            return np.array([p["amplitude"] * math.sin((k + p["phase"]) / p["rate"]) + p["offset"]])
        if self.mode == "constant":
            return np.atleast_1d(np.asarray(self.params["value"], dtype=float))
        if self.mode == "tabulated":
            series = np.asarray(self.params["series"], dtype=float)
            return np.atleast_1d(series[k])
        raise ValueError(f"unknown profile mode {self.mode!r}")

    def bounds(self):
        """Componentwise box containing every output over the horizon."""
        outs = np.array([self.output(k) for k in range(self.horizon)])
        return outs.min(axis=0), outs.max(axis=0)


def known_disturbance_at(profile, k):
    return np.asarray(profile.injection, dtype=float) @ profile.output(k)


def known_disturbance_window(profile, k, N):
    return np.array([known_disturbance_at(profile, k + t) for t in range(N)])


def extract_scenarios(ds, k, N, n_samples, selector="first"):
    """Slice ``n_samples`` windows ``[k, k+N)`` out of the dataset.

    ``selector`` is ``"first"`` or ``("seeded_random", seed)``. The returned
    array is a fresh copy.
    """
    if n_samples > ds.n_traj:
        raise InsufficientTrajectories(f"N_s={n_samples} > n_traj={ds.n_traj}")
    if k < 0 or k + N > ds.horizon:
        raise WindowOverrun(f"window [{k}, {k + N}) exceeds horizon {ds.horizon}")
    if selector == "first":
        idx = np.arange(n_samples)
    elif isinstance(selector, (tuple, list)) and selector[0] == "seeded_random":
        rng = np.random.Generator(np.random.PCG64(selector[1]))
        idx = np.sort(rng.choice(ds.n_traj, size=n_samples, replace=False))
    else:
        raise ValueError(f"unknown selector {selector!r}")
    values = np.array(ds.data[idx, k:k + N, :], copy=True)
    return ScenarioDisturbances(values, k, tuple(int(i) for i in idx))


def _meta_path(path):
    root, _ = os.path.splitext(path)
    return root + ".meta.json"


def save_dataset(ds, path):
    """Write ``path`` (CSV) and the ``<name>.meta.json`` sidecar."""
    n = ds.n_dims
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["traj", "step"] + [f"w{i}" for i in range(n)])
        for j in range(ds.n_traj):
            for t in range(ds.horizon):
                writer.writerow([j, t] + [repr(float(v)) for v in ds.data[j, t]])
    meta = dict(ds.meta)
    meta.update({"n_dims": n, "n_traj": ds.n_traj, "horizon": ds.horizon})
    meta.setdefault("seed", None)
    meta.setdefault("kernel", "external")
    with open(_meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path):
    """Read a dataset written by :func:`save_dataset`.

    Raises:
        SchemaError: malformed header, wrong column count, non-finite values,
            missing rows or a sidecar that disagrees with the CSV.
    """
    meta_file = _meta_path(path)
    try:
        with open(meta_file) as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"bad sidecar {meta_file}: {exc}") from exc
    try:
        n, n_traj, horizon = int(meta["n_dims"]), int(meta["n_traj"]), int(meta["horizon"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"sidecar missing n_dims/n_traj/horizon: {exc}") from exc
    data = np.full((n_traj, horizon, n), np.nan)
    seen = np.zeros((n_traj, horizon), dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["traj", "step"] + [f"w{i}" for i in range(n)]
        if header != expected:
            raise SchemaError(f"header {header} != {expected}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != n + 2:
                raise SchemaError(f"line {lineno}: expected {n + 2} columns, got {len(row)}")
            try:
                j, t = int(row[0]), int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise SchemaError(f"line {lineno}: {exc}") from exc
            if not (0 <= j < n_traj and 0 <= t < horizon):
                raise SchemaError(f"line {lineno}: index ({j}, {t}) out of range")
            if not all(math.isfinite(v) for v in vals):
                raise SchemaError(f"line {lineno}: non-finite value")
            data[j, t] = vals
            seen[j, t] = True
    if not seen.all():
        raise SchemaError("dataset file is missing rows")
    return DisturbanceDataset(data, meta)
