"""Ground-truth generation for stiff reaction kinetics.

Built-in mechanisms (the classic three-species Robertson benchmark and a
small Arrhenius toy-combustion system with temperature coupling) are
integrated with TR-BDF2: a one-step, L-stable, second-order implicit scheme
with damped Newton iterations on the analytic Jacobian and adaptive internal
sub-stepping between the uniform output points.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import storage
from .errors import ConfigError, DataValidationError, IntegrationFailureError
from .operator import StateSchema, compute_norm_params, NormalizationParams
from .seeding import stream

# -- mechanisms --------------------------------------------------------------


@dataclass
class Mechanism:
    """A reaction system: state schema, RHS f(Y) and analytic Jacobian df/dY.

    ``ic_from_params`` embeds a unit square (u, v) into the valid
    initial-condition set, which is how IC grids are parameterized.
    """

    name: str
    schema: StateSchema
    rhs: callable
    jac: callable
    ic_from_params: callable
    config: dict = field(default_factory=dict)
    clip_counter: int = 0

    def clipped_rhs(self, y: np.ndarray) -> np.ndarray:
        """RHS with negative mass fractions clipped to zero (counted, not hidden)."""
        if self.schema.mass_group:
            group = list(self.schema.mass_group)
            if np.any(y[group] < 0.0):
                y = y.copy()
                y[group] = np.maximum(y[group], 0.0)
                self.clip_counter += 1
        return self.rhs(y)


ROBER_K1 = 0.04
ROBER_K2 = 1.0e4
ROBER_K3 = 3.0e7


def _rober_rhs(y: np.ndarray) -> np.ndarray:
    r1 = ROBER_K1 * y[0]
    r2 = ROBER_K2 * y[1] * y[2]
    r3 = ROBER_K3 * y[1] * y[1]
    return np.array([-r1 + r2, r1 - r2 - r3, r3])


def _rober_jac(y: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [-ROBER_K1, ROBER_K2 * y[2], ROBER_K2 * y[1]],
            [ROBER_K1, -ROBER_K2 * y[2] - 2.0 * ROBER_K3 * y[1], -ROBER_K2 * y[1]],
            [0.0, 2.0 * ROBER_K3 * y[1], 0.0],
        ]
    )


def _rober_ic(u: float, v: float) -> np.ndarray:
    y1 = 0.85 + 0.1 * u
    y2 = 0.02 * v
    return np.array([y1, y2, 1.0 - y1 - y2])


def rober() -> Mechanism:
    schema = StateSchema(
        names=("y1", "y2", "y3"),
        temperature_index=None,
        mass_group=(0, 1, 2),
        log_flags=(True, True, True),
    )
    config = {"kind": "rober", "k1": ROBER_K1, "k2": ROBER_K2, "k3": ROBER_K3}
    return Mechanism("rober", schema, _rober_rhs, _rober_jac, _rober_ic, config)


# Constant-property toy combustion, version 1. Two Arrhenius reactions
# A -> B -> C with temperature feedback through constant enthalpies and c_p.
TOY_COMBUSTION_V1 = {
    "kind": "toy-combustion",
    "version": 1,
    "a1": 2.0e6,       # 1/s
    "e1": 8000.0,      # K
    "a2": 5.0e8,       # 1/s
    "e2": 10000.0,     # K
    "cp": 1200.0,      # J/(kg K)
    "h": [2.4e6, 1.2e6, 0.0],  # J/kg for A, B, C
}


def toy_combustion(config: dict | None = None) -> Mechanism:
    cfg = dict(TOY_COMBUSTION_V1)
    if config:
        cfg.update(config)
    a1, e1, a2, e2 = cfg["a1"], cfg["e1"], cfg["a2"], cfg["e2"]
    cp = cfg["cp"]
    h = np.asarray(cfg["h"], dtype=np.float64)

    def rhs(y: np.ndarray) -> np.ndarray:
        temp, ya, yb = y[0], y[1], y[2]
        k1 = a1 * np.exp(-e1 / temp)
        k2 = a2 * np.exp(-e2 / temp)
        fa = -k1 * ya
        fb = k1 * ya - k2 * yb
        fc = k2 * yb
        ft = -(h[0] * fa + h[1] * fb + h[2] * fc) / cp
        return np.array([ft, fa, fb, fc])

    def jac(y: np.ndarray) -> np.ndarray:
        temp, ya, yb = y[0], y[1], y[2]
        k1 = a1 * np.exp(-e1 / temp)
        k2 = a2 * np.exp(-e2 / temp)
        dk1 = k1 * e1 / temp**2
        dk2 = k2 * e2 / temp**2
        j = np.zeros((4, 4))
        # species rows
        j[1, 0] = -dk1 * ya
        j[1, 1] = -k1
        j[2, 0] = dk1 * ya - dk2 * yb
        j[2, 1] = k1
        j[2, 2] = -k2
        j[3, 0] = dk2 * yb
        j[3, 2] = k2
        # temperature row follows from the species rows
        j[0, :] = -(h[0] * j[1, :] + h[1] * j[2, :] + h[2] * j[3, :]) / cp
        return j

    def ic(u: float, v: float) -> np.ndarray:
        temp0 = 1000.0 + 500.0 * u
        ya = 0.55 + 0.3 * v
        yb = 0.02
        return np.array([temp0, ya, yb, 1.0 - ya - yb])

    schema = StateSchema(
        names=("T", "A", "B", "C"),
        temperature_index=0,
        mass_group=(1, 2, 3),
        log_flags=(True, True, True, True),
    )
    return Mechanism("toy-combustion", schema, rhs, jac, ic, cfg)


def custom_mechanism(name: str, schema: StateSchema, rhs, jac, ic_from_params=None,
                     config: dict | None = None) -> Mechanism:
    return Mechanism(name, schema, rhs, jac,
                     ic_from_params or (lambda u, v: None),
                     config or {"kind": "custom", "name": name})


_BUILTIN = {"rober": rober, "toy-combustion": toy_combustion}


def make_mechanism(kind: str, config: dict | None = None) -> Mechanism:
    if kind not in _BUILTIN:
        raise ConfigError(f"unknown mechanism {kind!r}; available: {sorted(_BUILTIN)}")
    if kind == "toy-combustion":
        return toy_combustion(config)
    return _BUILTIN[kind]()


# -- implicit integration -----------------------------------------------------

_GAMMA = 2.0 - np.sqrt(2.0)
_D = _GAMMA / 2.0  # shared implicit coefficient of both stages
_W = np.sqrt(2.0) / 4.0
# weights of the embedded third-order companion formula
_BHAT2 = 1.0 / (6.0 * (3.0 * np.sqrt(2.0) - 4.0))
_BHAT3 = _D / 3.0
_BHAT1 = 1.0 - _BHAT2 - _BHAT3
_ERR1, _ERR2, _ERR3 = _W - _BHAT1, _W - _BHAT2, _D - _BHAT3


def _newton_implicit(f, jac, y_guess, const, coeff, norm_scale):
    """Solve y - coeff * f(y) = const by damped Newton.

    Iterates to the numerical floor (residual <= 1e-13 * scale, or stalled
    below 1e-10 * scale), which keeps linear invariants of the RHS tight
    over long horizons. Returns (y, converged).
    """
    y = y_guess.copy()
    eye = np.eye(y.shape[0])
    residual = y - coeff * f(y) - const
    res_norm = np.linalg.norm(residual)
    for _ in range(20):
        if res_norm <= 1e-13 * norm_scale:
            return y, True
        a = eye - coeff * jac(y)
        try:
            step = np.linalg.solve(a, -residual)
        except np.linalg.LinAlgError:
            return y, False
        damping = 1.0
        for _ in range(8):
            y_new = y + damping * step
            new_residual = y_new - coeff * f(y_new) - const
            new_norm = np.linalg.norm(new_residual)
            if np.isfinite(new_norm) and new_norm < res_norm:
                break
            damping *= 0.5
        else:
            # stalled: fine if we already sit at the rounding floor
            return y, res_norm <= 1e-10 * norm_scale
        y, residual, res_norm = y_new, new_residual, new_norm
    return y, res_norm <= 1e-10 * norm_scale


def backward_euler_step(f, jac, y: np.ndarray, h: float):
    """One implicit-Euler step: solve y1 = y + h f(y1)."""
    scale = np.linalg.norm(y) + 1.0
    y1, ok = _newton_implicit(f, jac, y, y, h, scale)
    if not ok:
        raise IntegrationFailureError(0, "backward Euler Newton iteration failed")
    return y1


def _trbdf2_step(f, jac, y: np.ndarray, h: float):
    """One TR-BDF2 step; returns (y_next, error_estimate) or (None, None)."""
    g = _GAMMA
    d = _D * h
    scale = np.linalg.norm(y) + 1.0
    f0 = f(y)
    # trapezoidal stage to t + gamma*h
    const = y + d * f0
    yg, ok = _newton_implicit(f, jac, const + d * f0, const, d, scale)
    if not ok:
        return None, None
    # BDF2 stage to t + h (same implicit coefficient d)
    c1 = 1.0 / (g * (2.0 - g))
    c2 = (1.0 - g) ** 2 / (g * (2.0 - g))
    const = c1 * yg - c2 * y
    y1, ok = _newton_implicit(f, jac, yg, const, d, scale)
    if not ok:
        return None, None
    # difference to the embedded third-order result, filtered through the
    # stage matrix so the estimate stays meaningful in the stiff limit
    raw = h * (_ERR1 * f0 + _ERR2 * f(yg) + _ERR3 * f(y1))
    try:
        err = np.linalg.solve(np.eye(y.shape[0]) - d * jac(y1), raw)
    except np.linalg.LinAlgError:
        err = raw
    return y1, err


def integrate(mechanism: Mechanism, y0: np.ndarray, dt: float, n_steps: int,
              tol: float = 1e-10) -> np.ndarray:
    """Integrate to a uniform grid of ``n_steps`` intervals of width ``dt``.

    Internal sub-steps adapt until the local error estimate satisfies
    ``tol`` (mixed absolute/relative); outputs land exactly on the grid.
    """
    f, jac = mechanism.clipped_rhs, mechanism.jac
    y = np.asarray(y0, dtype=np.float64).copy()
    out = np.empty((n_steps + 1, y.shape[0]))
    out[0] = y
    h_prop = dt
    for i in range(n_steps):
        t_local = 0.0
        failures = 0
        while t_local < dt * (1.0 - 1e-14):
            remaining = dt - t_local
            h = min(h_prop, remaining)
            clipped = h < h_prop
            y_new, err = _trbdf2_step(f, jac, y, h)
            if y_new is None:
                h_prop = h * 0.25
                failures += 1
                if failures > 60 or h_prop < 1e-16 * dt:
                    raise IntegrationFailureError(i + 1)
                continue
            err_norm = np.max(np.abs(err) / (tol * (1.0 + np.abs(y_new))))
            if err_norm > 1.0:
                h_prop = h * max(0.2, 0.9 * err_norm ** (-1.0 / 3.0))
                failures += 1
                if failures > 60 or h_prop < 1e-16 * dt:
                    raise IntegrationFailureError(i + 1)
                continue
            t_local += h
            y = y_new
            failures = 0
            if not clipped:
                grow = 5.0 if err_norm == 0.0 else min(5.0, max(0.5, 0.9 * err_norm ** (-1.0 / 3.0)))
                h_prop = h * grow
        out[i + 1] = y
    return out


def integrate_fixed(mechanism: Mechanism, y0: np.ndarray, dt: float, n_steps: int,
                    substeps: int = 1) -> np.ndarray:
    """Fixed-substep TR-BDF2 driver (no error control); used for order studies."""
    f, jac = mechanism.clipped_rhs, mechanism.jac
    y = np.asarray(y0, dtype=np.float64).copy()
    out = np.empty((n_steps + 1, y.shape[0]))
    out[0] = y
    h = dt / substeps
    for i in range(n_steps):
        for _ in range(substeps):
            y_new, _ = _trbdf2_step(f, jac, y, h)
            if y_new is None:
                raise IntegrationFailureError(i + 1)
            y = y_new
        out[i + 1] = y
    return out


# -- datasets -----------------------------------------------------------------


@dataclass
class TrajectoryDataset:
    """Raw uniform-grid trajectories plus everything needed to reuse them."""

    raw: np.ndarray  # (bs, n_total+1, j)
    dt: float
    schema: StateSchema
    norm: NormalizationParams
    split: str  # "train" | "test"

    @property
    def n_total(self) -> int:
        return self.raw.shape[1] - 1


@dataclass
class SegmentedDataset:
    """Fixed-length segments with shared endpoints, each an independent sample."""

    segments: np.ndarray  # (bs*n_seg, n_t+1, j)
    branch_inputs: np.ndarray  # (bs*n_seg, j)
    seg_len: int  # n_t + 1
    dt: float
    schema: StateSchema
    norm: NormalizationParams
    n_originals: int  # bs of the underlying TrajectoryDataset

    @property
    def n_seg(self) -> int:
        return self.segments.shape[0] // self.n_originals


def generate_trajectories(mechanism: Mechanism, grid: tuple[int, int], dt: float,
                          n_steps: int, tol: float = 1e-10) -> np.ndarray:
    """Integrate a Cartesian IC grid; returns (n_ic, n_steps+1, j).

    The stored series starts one step after the nominal initial condition
    (origin shifted by dt), so states that begin exactly at zero have moved
    into the strictly positive range required by log normalization.
    """
    nu, nv = grid
    if nu < 1 or nv < 1:
        raise ConfigError(f"IC grid must be at least 1x1, got {grid}")
    us = np.linspace(0.0, 1.0, nu) if nu > 1 else np.array([0.0])
    vs = np.linspace(0.0, 1.0, nv) if nv > 1 else np.array([0.0])
    j = mechanism.schema.j
    out = np.empty((nu * nv, n_steps + 1, j))
    for a, u in enumerate(us):
        for b, v in enumerate(vs):
            y0 = mechanism.ic_from_params(u, v)
            try:
                traj = integrate(mechanism, y0, dt, n_steps + 1, tol=tol)
            except IntegrationFailureError as exc:
                raise IntegrationFailureError(
                    exc.time_index, f"integration failed for IC (u={u:.4f}, v={v:.4f})"
                ) from exc
            out[a * nv + b] = traj[1:]
    return out


def split_dataset(raw: np.ndarray, dt: float, schema: StateSchema, seed: int,
                  train_frac: float = 0.8):
    """Seeded permutation split; normalization params come from the train part."""
    n = raw.shape[0]
    order = stream(seed, "split").permutation(n)
    n_train = max(1, int(round(train_frac * n))) if n > 1 else 1
    train_idx = np.sort(order[:n_train])
    test_idx = np.sort(order[n_train:])
    norm = compute_norm_params(raw[train_idx], schema)
    train = TrajectoryDataset(raw[train_idx], dt, schema, norm, "train")
    test = TrajectoryDataset(raw[test_idx], dt, schema, norm, "test")
    return train, test, train_idx, test_idx


def time_decompose(ds: TrajectoryDataset, seg_len: int) -> SegmentedDataset:
    """Split each series into overlapping-endpoint segments of ``seg_len`` points."""
    n_t = seg_len - 1
    if n_t < 1:
        raise ConfigError("segments need at least two points")
    if ds.n_total % n_t != 0:
        nearest = (ds.n_total // n_t) * n_t
        raise ConfigError(
            f"horizon of {ds.n_total} steps is not divisible into segments of "
            f"{n_t} steps; nearest valid horizon is {nearest}"
        )
    n_seg = ds.n_total // n_t
    bs, _, j = ds.raw.shape
    # sample-major layout: segments of one original series stay contiguous
    segments = np.empty((bs * n_seg, seg_len, j))
    for s in range(n_seg):
        segments[s::n_seg] = ds.raw[:, s * n_t : s * n_t + seg_len, :]
    return SegmentedDataset(
        segments=segments,
        branch_inputs=segments[:, 0, :].copy(),
        seg_len=seg_len,
        dt=ds.dt,
        schema=ds.schema,
        norm=ds.norm,
        n_originals=bs,
    )


def reconstruct_series(segments: np.ndarray, n_originals: int) -> np.ndarray:
    """Flatten per-sample segments back to full series, keeping the duplicated
    shared endpoints (predictions exist at the common time points)."""
    total, seg_len, j = segments.shape
    n_seg = total // n_originals
    return segments.reshape(n_originals, n_seg * seg_len, j)


# -- dataset persistence -------------------------------------------------------

_FORMAT = "stiffonet-dataset-v1"


def save_dataset(directory, train: TrajectoryDataset, test: TrajectoryDataset,
                 mechanism: Mechanism, train_idx, test_idx, seg_len: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = {
        "train": storage.write_blob(directory / "train.bin", train.raw),
        "test": storage.write_blob(directory / "test.bin", test.raw),
    }
    manifest = {
        "format": _FORMAT,
        "dt": train.dt,
        "segment_len": seg_len,
        "schema": train.schema.to_dict(),
        "normalization": train.norm.to_dict(),
        "splits": blobs,
        "split_indices": {"train": [int(i) for i in train_idx],
                          "test": [int(i) for i in test_idx]},
        "mechanism": mechanism.config,
        "mechanism_hash": storage.config_hash(mechanism.config),
    }
    storage.write_manifest(directory / "manifest.json", manifest)


def load_dataset(directory) -> dict:
    """Returns {"train": TrajectoryDataset, "test": ..., "segment_len": int, ...}."""
    directory = Path(directory)
    manifest = storage.read_manifest(directory / "manifest.json")
    if manifest.get("format") != _FORMAT:
        raise DataValidationError(f"{directory} is not a dataset directory")
    schema = StateSchema.from_dict(manifest["schema"])
    norm = NormalizationParams.from_dict(manifest["normalization"])
    out = {"segment_len": manifest["segment_len"], "dt": manifest["dt"],
           "schema": schema, "norm": norm, "manifest": manifest}
    for split in ("train", "test"):
        entry = manifest["splits"][split]
        raw = storage.read_blob(directory / entry["file"], entry["shape"])
        out[split] = TrajectoryDataset(raw, manifest["dt"], schema, norm, split)
    return out
