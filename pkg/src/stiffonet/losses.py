"""Training objectives: MSE data loss, mass-conservation penalty, and the two
gradient-free adaptive weighting schemes.

Type-A carries one weight per state variable, Type-B one weight per
(sample, state) pair. Both renormalize to a fixed budget (j, respectively
j*bs) from relative L2 errors measured in physical space, so the update
needs no optimizer and no extra hyperparameters.
"""

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Var
from .errors import ConfigError, DegenerateUpdateError, DimensionError

NON_ADAPTIVE = "na"
TYPE_A = "ad-a"
TYPE_B = "ad-b"

LOSS_KINDS = (NON_ADAPTIVE, TYPE_A, TYPE_B)


@dataclass(frozen=True)
class AdaptiveWeights:
    """Weight state for one of the two adaptive schemes.

    ``values`` has shape (j,) for Type-A and (bs, j) for Type-B; entries are
    nonnegative and sum to ``budget`` after every update. Initialized to
    all-ones (whose sum defines the budget).
    """

    kind: str
    values: np.ndarray
    budget: float
    first_epoch: int = 100
    every: int = 50

    def due(self, epoch: int) -> bool:
        return epoch >= self.first_epoch and (epoch - self.first_epoch) % self.every == 0


def init_weights(kind: str, j: int, bs: int | None = None,
                 first_epoch: int = 100, every: int = 50) -> AdaptiveWeights:
    if kind == TYPE_A:
        values = np.ones(j)
    elif kind == TYPE_B:
        if bs is None:
            raise ConfigError("Type-B weights need the total sample count")
        values = np.ones((bs, j))
    else:
        raise ConfigError(f"no adaptive weights for loss kind {kind!r}")
    return AdaptiveWeights(kind, values, float(values.size), first_epoch, every)


def relative_l2_matrix(y_raw: np.ndarray, y_hat_raw: np.ndarray) -> np.ndarray:
    """Per-(sample, state) relative L2 error over the time axis, shape (bs, j)."""
    y_raw = np.asarray(y_raw, dtype=np.float64)
    y_hat_raw = np.asarray(y_hat_raw, dtype=np.float64)
    if y_raw.shape != y_hat_raw.shape or y_raw.ndim != 3:
        raise DimensionError(f"expected matching (bs, n_t1, j) arrays, got "
                             f"{y_raw.shape} and {y_hat_raw.shape}")
    num = np.linalg.norm(y_raw - y_hat_raw, axis=1)
    den = np.linalg.norm(y_raw, axis=1)
    return num / den


def update_weights(weights: AdaptiveWeights, y_raw: np.ndarray,
                   y_hat_raw: np.ndarray) -> AdaptiveWeights:
    """Gradient-free update from physical-space predictions.

    Type-A: X_a = mean over samples of the per-(sample, state) relative L2;
    Type-B: X_ba = the matrix itself. New weights are X / sum(X) * budget,
    which preserves the budget exactly and keeps every weight >= 0.
    """
    x = relative_l2_matrix(y_raw, y_hat_raw)
    if weights.kind == TYPE_A:
        x = x.mean(axis=0)
    total = x.sum()
    if total == 0.0:
        raise DegenerateUpdateError("all relative errors are zero; weights undefined")
    return replace(weights, values=x / total * weights.budget)


def mse_data_loss(y: np.ndarray, y_hat) -> Var:
    """Plain MSE over all of (samples, time, states)."""
    y_hat = Var.of(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != y_hat.value.shape:
        raise DimensionError(f"shape mismatch: {y.shape} vs {y_hat.value.shape}")
    diff = y_hat - y
    return (diff * diff).mean()


def weighted_loss_typeA(y: np.ndarray, y_hat, w: np.ndarray) -> Var:
    """sum_a W_a * (per-state MSE over samples and time)."""
    y_hat = Var.of(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != y_hat.value.shape:
        raise DimensionError(f"shape mismatch: {y.shape} vs {y_hat.value.shape}")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (y.shape[-1],):
        raise DimensionError(f"Type-A weights must have shape ({y.shape[-1]},), got {w.shape}")
    diff = y_hat - y
    per_state = (diff * diff).mean(axis=0).mean(axis=0)  # (j,)
    return (per_state * w).sum()


def weighted_loss_typeB(y: np.ndarray, y_hat, w: np.ndarray) -> Var:
    """sum_a sum_b W_ba * (per-(sample,state) MSE over time)."""
    y_hat = Var.of(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != y_hat.value.shape:
        raise DimensionError(f"shape mismatch: {y.shape} vs {y_hat.value.shape}")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (y.shape[0], y.shape[-1]):
        raise DimensionError(
            f"Type-B weights must have shape {(y.shape[0], y.shape[-1])}, got {w.shape}"
        )
    diff = y_hat - y
    per_sample_state = (diff * diff).mean(axis=1)  # (bs, j)
    return (per_sample_state * w).sum()


def com_loss(y_hat_raw, mass_group) -> Var:
    """Mean squared deviation of the mass-group sum from one.

    ``y_hat_raw`` must already be in physical (denormalized) space.
    """
    if not len(mass_group):
        raise ConfigError("conservation-of-mass loss needs a nonempty mass group")
    y_hat_raw = Var.of(y_hat_raw)
    group_sum = y_hat_raw.take_last(list(mass_group)).sum(axis=-1)
    dev = group_sum - 1.0
    return (dev * dev).mean()


@dataclass(frozen=True)
class LossConfig:
    kind: str = NON_ADAPTIVE
    com_enabled: bool = False
    com_multiplier: float = 0.1

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; choose from {LOSS_KINDS}")


def com_weight(cfg: LossConfig, active_weights: np.ndarray | None) -> float:
    """The multiplier on the conservation-of-mass penalty.

    Non-adaptive: the bare multiplier. Adaptive: multiplier times the sum of
    the currently active data-loss weights (for Type-B under minibatching,
    the rows belonging to the current minibatch).
    """
    if active_weights is None:
        return cfg.com_multiplier
    return cfg.com_multiplier * float(np.sum(active_weights))


def combined_loss(data_loss: Var, com_loss_value: Var | None, cfg: LossConfig,
                  active_weights: np.ndarray | None = None) -> Var:
    if not cfg.com_enabled or com_loss_value is None:
        return data_loss
    return data_loss + com_weight(cfg, active_weights) * com_loss_value


def data_loss(cfg: LossConfig, y: np.ndarray, y_hat,
              weights: AdaptiveWeights | None, rows=None) -> Var:
    """Dispatch to the configured data-loss flavor.

    ``rows`` selects the minibatch's rows of Type-B weights (indices into the
    full sample axis).
    """
    if cfg.kind == NON_ADAPTIVE:
        return mse_data_loss(y, y_hat)
    if weights is None or weights.kind != cfg.kind:
        raise ConfigError(f"loss kind {cfg.kind} needs matching adaptive weights")
    if cfg.kind == TYPE_A:
        return weighted_loss_typeA(y, y_hat, weights.values)
    w = weights.values if rows is None else weights.values[rows]
    return weighted_loss_typeB(y, y_hat, w)


def active_weight_values(cfg: LossConfig, weights: AdaptiveWeights | None, rows=None):
    if cfg.kind == NON_ADAPTIVE or weights is None:
        return None
    if cfg.kind == TYPE_B and rows is not None:
        return weights.values[rows]
    return weights.values
