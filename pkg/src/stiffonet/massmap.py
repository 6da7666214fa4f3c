"""Invertible map between the n-species mass-fraction simplex and the
(n-1)-dimensional unit box.

Forward (collapse): z_k = y_k / (1 - sum_{j != k, j <= n-1} y_j) for
k <= n-2, and z_{n-1} = y_{n-1}. The inverse solves a small linear system
for the denominators d_k and reconstructs y with sum(y) = 1 exactly by
construction, which is what makes a surrogate trained in z-space conserve
mass to machine precision.
"""

import numpy as np

from .errors import CollapsedCoordinateError, ConfigError, DataValidationError
from .operator import StateSchema

DENOM_EPS = 1e-14
SIMPLEX_TOL = 1e-6

COLLAPSE = "collapse"
EXPAND = "expand"


def forward_map(y: np.ndarray) -> np.ndarray:
    """Collapse a simplex point (n,) to box coordinates (n-1,)."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n < 2:
        raise ConfigError("the simplex map needs at least two species")
    z = np.empty(n - 1)
    partial = np.sum(y[: n - 1])
    for k in range(n - 2):
        denom = 1.0 - (partial - y[k])
        if denom <= DENOM_EPS:
            raise CollapsedCoordinateError(
                f"vanishing denominator ({denom:.3e}) at coordinate {k}; "
                "point is (numerically) on a simplex vertex"
            )
        z[k] = y[k] / denom
    z[n - 2] = y[n - 2]
    return z


def inverse_map(z: np.ndarray) -> np.ndarray:
    """Expand box coordinates (n-1,) back to the simplex point (n,).

    Solves (I + off-diagonal z_j) d = (1 - z_{n-1}) by partial-pivot
    elimination, then y_k = z_k d_k, y_{n-1} = z_{n-1},
    y_n = 1 - sum(y_1..y_{n-1}).
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0] + 1
    y = np.empty(n)
    m = n - 2
    if m > 0:
        a = np.tile(z[:m], (m, 1))
        np.fill_diagonal(a, 1.0)
        b = np.full(m, 1.0 - z[n - 2])
        try:
            d = np.linalg.solve(a, b)
        except np.linalg.LinAlgError as exc:
            raise CollapsedCoordinateError(f"degenerate collapsed coordinates: {exc}") from exc
        y[:m] = z[:m] * d
    y[n - 2] = z[n - 2]
    y[n - 1] = 1.0 - np.sum(y[: n - 1])
    return y


def collapse_schema(schema: StateSchema) -> StateSchema:
    """Schema after replacing the mass group by n-1 box coordinates.

    The collapsed coordinates live in [0, 1] and are not log-transformed;
    the new schema has an empty mass group (nothing left to constrain).
    """
    if not schema.mass_group:
        raise ConfigError("schema has no mass group to collapse")
    group = list(schema.mass_group)
    keep = [i for i in range(schema.j) if i not in schema.mass_group]
    names = [schema.names[i] for i in keep]
    flags = [schema.log_flags[i] for i in keep]
    names += [f"z{k + 1}" for k in range(len(group) - 1)]
    flags += [False] * (len(group) - 1)
    temp = None
    if schema.temperature_index is not None:
        temp = keep.index(schema.temperature_index)
    return StateSchema(tuple(names), temp, (), tuple(flags))


def batch_transform(data: np.ndarray, schema: StateSchema, direction: str):
    """Collapse/expand the mass-group columns of a (..., j) state array.

    Returns ``(transformed_data, transformed_schema)``. Non-group states
    pass through in front of the group block. In the collapse direction every
    row must lie on the simplex to within ``SIMPLEX_TOL``.
    """
    if direction not in (COLLAPSE, EXPAND):
        raise ConfigError(f"direction must be '{COLLAPSE}' or '{EXPAND}'")
    data = np.asarray(data, dtype=np.float64)

    if direction == COLLAPSE:
        if not schema.mass_group:
            raise ConfigError("schema has no mass group to collapse")
        group = list(schema.mass_group)
        keep = [i for i in range(schema.j) if i not in schema.mass_group]
        rows = data.reshape(-1, schema.j)
        fractions = rows[:, group]
        bad = np.abs(fractions.sum(axis=1) - 1.0) > SIMPLEX_TOL
        if np.any(bad):
            idx = int(np.flatnonzero(bad)[0])
            raise DataValidationError(
                f"row {idx}: mass-group sum {fractions[idx].sum():.9f} is off the simplex"
            )
        n = len(group)
        partial = fractions[:, : n - 1].sum(axis=1, keepdims=True)
        denoms = 1.0 - partial + fractions[:, : n - 2]
        if np.any(denoms <= DENOM_EPS):
            idx = int(np.argwhere(denoms <= DENOM_EPS)[0, 0])
            raise CollapsedCoordinateError(
                f"row {idx}: vanishing denominator; point is on a simplex vertex"
            )
        collapsed = np.concatenate(
            [fractions[:, : n - 2] / denoms, fractions[:, n - 2 : n - 1]], axis=1
        )
        out = np.concatenate([rows[:, keep], collapsed], axis=1)
        new_schema = collapse_schema(schema)
        return out.reshape(data.shape[:-1] + (new_schema.j,)), new_schema

    # expand: data columns are [kept states..., z coordinates...]
    n_coords = data.shape[-1] - (schema.j - len(schema.mass_group))
    n = n_coords + 1
    rows = data.reshape(-1, data.shape[-1])
    kept = rows[:, : rows.shape[1] - n_coords]
    expanded = np.empty((rows.shape[0], n))
    for r in range(rows.shape[0]):
        expanded[r] = inverse_map(rows[r, rows.shape[1] - n_coords :])
    # reassemble in the original column order
    keep = [i for i in range(schema.j) if i not in schema.mass_group]
    out = np.empty((rows.shape[0], schema.j))
    out[:, keep] = kept
    out[:, list(schema.mass_group)] = expanded
    return out.reshape(data.shape[:-1] + (schema.j,)), schema
