"""Error metrics and statistical reporting, always in physical space.

The universal metric is the relative L2 error over the time axis. Reports
aggregate it per (sample, state) into per-state mean/std/median/q75/q90/max
plus a global mean (mean over states of the per-state means).
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, UndefinedMetricError
from .kinetics import reconstruct_series
from .operator import DeepONetModel, StateSchema, recursive_predict

SEGMENTED = "segmented"
RECONSTRUCTED = "reconstructed"


def relative_l2(y: np.ndarray, y_hat: np.ndarray) -> float:
    """||y - y_hat||_2 / ||y||_2 along the (single) time axis."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionError(f"series shapes differ: {y.shape} vs {y_hat.shape}")
    ref = np.linalg.norm(y)
    if ref == 0.0:
        raise UndefinedMetricError("reference series has zero norm")
    return float(np.linalg.norm(y - y_hat) / ref)


def relative_l2_per_sample_state(y: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    """Vectorized relative L2 over axis 1 of (bs, n_t1, j) arrays -> (bs, j)."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 3:
        raise DimensionError(f"expected matching (bs, n_t1, j) arrays, got "
                             f"{y.shape} and {y_hat.shape}")
    ref = np.linalg.norm(y, axis=1)
    if np.any(ref == 0.0):
        raise UndefinedMetricError("a reference series has zero norm")
    return np.linalg.norm(y - y_hat, axis=1) / ref


@dataclass
class ErrorReport:
    errors: np.ndarray        # (samples, j) relative L2 matrix
    state_names: tuple
    mean: np.ndarray          # per state
    std: np.ndarray
    median: np.ndarray
    q75: np.ndarray
    q90: np.ndarray
    max: np.ndarray
    global_mean: float


def build_report(errors: np.ndarray, names) -> ErrorReport:
    mean = errors.mean(axis=0)
    return ErrorReport(
        errors=errors,
        state_names=tuple(names),
        mean=mean,
        std=errors.std(axis=0),
        median=np.percentile(errors, 50, axis=0),
        q75=np.percentile(errors, 75, axis=0),
        q90=np.percentile(errors, 90, axis=0),
        max=errors.max(axis=0),
        global_mean=float(mean.mean()),
    )


def report(y_true: np.ndarray, y_pred: np.ndarray, schema: StateSchema,
           mode: str = SEGMENTED, n_originals: int | None = None) -> ErrorReport:
    """Error statistics for (bs, n_t1, j) physical-space arrays.

    ``segmented`` treats every segment as a sample; ``reconstructed``
    flattens each original sample's segments back into one long series
    (keeping the duplicated shared endpoints) before measuring.
    """
    if mode == RECONSTRUCTED:
        if n_originals is None:
            raise DimensionError("reconstructed mode needs n_originals")
        y_true = reconstruct_series(np.asarray(y_true), n_originals)
        y_pred = reconstruct_series(np.asarray(y_pred), n_originals)
    elif mode != SEGMENTED:
        raise DimensionError(f"unknown report mode {mode!r}")
    return build_report(relative_l2_per_sample_state(y_true, y_pred), schema.names)


def error_accumulation(model: DeepONetModel, raw_series: np.ndarray,
                       num_segments: int, collapse=None, expand=None) -> dict:
    """Rollout-error growth curves.

    ``raw_series``: (bs, num_segments*n_t + 1, j) true physical trajectories.
    For each autoregressive step s the relative L2 error is computed on the
    complete concatenated prediction up to s. Returns per-state mean, median,
    q75 and q90 across samples, each of shape (num_segments, j), plus the
    full rollout predictions.

    For models trained on mass-map coordinates pass ``collapse`` (applied to
    the initial conditions) and ``expand`` (applied to the rollout before
    comparing against the physical truth).
    """
    raw_series = np.asarray(raw_series, dtype=np.float64)
    n_t = model.n_t1 - 1
    expected = num_segments * n_t + 1
    if raw_series.shape[1] != expected:
        raise DimensionError(
            f"true series has {raw_series.shape[1]} points, rollout of "
            f"{num_segments} segments covers {expected}"
        )
    ics = raw_series[:, 0, :] if collapse is None else collapse(raw_series[:, 0, :])
    rollout = recursive_predict(model, ics, num_segments)
    if expand is not None:
        rollout = expand(rollout)
    bs, j = raw_series.shape[0], raw_series.shape[2]
    curves = {k: np.empty((num_segments, j)) for k in ("mean", "median", "q75", "q90")}
    for s in range(1, num_segments + 1):
        upto = s * n_t + 1
        errs = relative_l2_per_sample_state(raw_series[:, :upto], rollout[:, :upto])
        curves["mean"][s - 1] = errs.mean(axis=0)
        curves["median"][s - 1] = np.percentile(errs, 50, axis=0)
        curves["q75"][s - 1] = np.percentile(errs, 75, axis=0)
        curves["q90"][s - 1] = np.percentile(errs, 90, axis=0)
    curves["rollout"] = rollout
    return curves


# -- CSV outputs ----------------------------------------------------------------


def write_sample_errors_csv(path, rep: ErrorReport) -> None:
    """Raw per-(sample, state) errors; one row per pair."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "state", "relative_l2"])
        for i in range(rep.errors.shape[0]):
            for a, name in enumerate(rep.state_names):
                writer.writerow([i, name, repr(float(rep.errors[i, a]))])


def write_summary_csv(path, rep: ErrorReport) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state", "mean", "std", "median", "q75", "q90", "max"])
        for a, name in enumerate(rep.state_names):
            writer.writerow([name] + [repr(float(v)) for v in (
                rep.mean[a], rep.std[a], rep.median[a], rep.q75[a], rep.q90[a], rep.max[a]
            )])
        writer.writerow(["__global__", repr(rep.global_mean), "", "", "", "", ""])


def write_accumulation_csv(path, curves: dict, state_names) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment", "state", "mean", "median", "q75", "q90"])
        n_seg = curves["mean"].shape[0]
        for s in range(n_seg):
            for a, name in enumerate(state_names):
                writer.writerow([s + 1, name] + [
                    repr(float(curves[k][s, a])) for k in ("mean", "median", "q75", "q90")
                ])
