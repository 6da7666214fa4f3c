"""Training loops for both paradigms.

One-step: branch and trunk parameters are optimized jointly against the
normalized segment targets (optionally with partition-of-unity trunk, output
bound, mass-conservation penalty and adaptive weights).

Two-step: the trunk plus a per-sample coefficient tensor A are trained
first; the per-state trunk blocks are then orthogonalized (thin QR) and the
branch is trained against the reconstructed targets U = R* A*, where A* is
recomputed by least squares. Partition of unity, output bounding and the
mass penalty are excluded in this paradigm by construction.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation, losses, networks, operator, tensor_ops
from .autodiff import AdamState, Var, adam_step, einsum, grad
from .errors import ConfigError, SingularBasisError, TrainingDivergedError
from .kinetics import SegmentedDataset
from .seeding import stream


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 1e-3
    halve_every: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr_at(self, epoch: int) -> float:
        """Exponential decay: halve the base rate every ``halve_every`` epochs."""
        return self.base_lr * 0.5 ** ((epoch - 1) // self.halve_every)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    minibatches_before: int = 60
    minibatches_after: int = 120
    switch_epoch: int = 5000
    seed: int = 0
    eval_every: int = 50
    weight_first_epoch: int = 100
    weight_every: int = 50

    def minibatches_at(self, epoch: int) -> int:
        return self.minibatches_before if epoch <= self.switch_epoch else self.minibatches_after


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_rel_l2: list = field(default_factory=list)
    test_rel_l2: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    # one row per adaptive-weight update: (epoch, sum, budget, min value)
    weight_updates: list = field(default_factory=list)

    def record(self, epoch, train_err, test_err, lr):
        self.epochs.append(epoch)
        self.train_rel_l2.append(train_err)
        self.test_rel_l2.append(test_err)
        self.lr.append(lr)

    def final_train_error(self) -> float:
        return self.train_rel_l2[-1]

    def final_test_error(self) -> float:
        return self.test_rel_l2[-1]


def write_history_csv(path, history: TrainHistory) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_rel_l2", "test_rel_l2", "lr"])
        for row in zip(history.epochs, history.train_rel_l2, history.test_rel_l2, history.lr):
            writer.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])


class _WeightLogger:
    """Optional CSV log of adaptive-weight snapshots (epoch, index, value)."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("epoch,index,value\n")

    def log(self, epoch: int, values: np.ndarray):
        if not self.path:
            return
        with self.path.open("a", newline="") as fh:
            writer = csv.writer(fh)
            for idx, v in enumerate(values.ravel()):
                writer.writerow([epoch, idx, repr(float(v))])


def _normalized_views(seg: SegmentedDataset):
    y0n = operator.normalize(seg.branch_inputs, seg.schema, seg.norm)
    targets = operator.normalize(seg.segments, seg.schema, seg.norm)
    return y0n, targets


def _global_error(y_true_raw, y_pred_norm, schema, norm) -> float:
    pred_raw = operator.denormalize(y_pred_norm, schema, norm)
    return evaluation.report(y_true_raw, pred_raw, schema).global_mean


def _check_finite(value: float, epoch: int):
    if not np.isfinite(value):
        raise TrainingDivergedError(epoch)


def _maybe_init_weights(cfg: TrainConfig, bs_total: int, j: int):
    if cfg.loss.kind == losses.NON_ADAPTIVE:
        return None
    return losses.init_weights(cfg.loss.kind, j, bs_total,
                               cfg.weight_first_epoch, cfg.weight_every)


def _update_weights(weights, y_true_raw, y_pred_norm, schema, norm, history, epoch, logger):
    pred_raw = operator.denormalize(y_pred_norm, schema, norm)
    weights = losses.update_weights(weights, y_true_raw, pred_raw)
    history.weight_updates.append(
        (epoch, float(weights.values.sum()), weights.budget, float(weights.values.min()))
    )
    logger.log(epoch, weights.values)
    return weights


# -- one-step (joint) training -------------------------------------------------


def train_one_step(model: operator.DeepONetModel, train_seg: SegmentedDataset,
                   test_seg: SegmentedDataset | None, cfg: TrainConfig,
                   weight_csv=None) -> TrainHistory:
    if model.mode != operator.ONE_STEP:
        raise ConfigError("train_one_step needs a one-step model")
    if cfg.loss.com_enabled and not model.schema.mass_group:
        raise ConfigError("mass-conservation loss needs a nonempty mass group")
    y0n, targets = _normalized_views(train_seg)
    test_views = _normalized_views(test_seg) if test_seg is not None else None
    bs_total = y0n.shape[0]
    params = list(model.branch_params.values()) + list(model.trunk_params.values())
    adam = AdamState(params, beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2,
                     eps=cfg.optimizer.eps)
    weights = _maybe_init_weights(cfg, bs_total, model.j)
    history = TrainHistory()
    logger = _WeightLogger(weight_csv)
    shuffle_rng = stream(cfg.seed, "shuffle")

    def full_prediction(inputs) -> np.ndarray:
        return operator.forward_one_step(model, inputs).value

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.optimizer.lr_at(epoch)
        if weights is not None and weights.due(epoch):
            weights = _update_weights(weights, train_seg.segments, full_prediction(y0n),
                                      model.schema, model.norm, history, epoch, logger)
        order = shuffle_rng.permutation(bs_total)
        for rows in np.array_split(order, cfg.minibatches_at(epoch)):
            pred = operator.forward_one_step(model, y0n[rows])
            data = losses.data_loss(cfg.loss, targets[rows], pred, weights, rows)
            if cfg.loss.com_enabled:
                raw_pred = operator.denormalize_var(pred, model.schema, model.norm)
                com = losses.com_loss(raw_pred, model.schema.mass_group)
                active = losses.active_weight_values(cfg.loss, weights, rows)
                loss = losses.combined_loss(data, com, cfg.loss, active)
            else:
                loss = data
            _check_finite(float(loss.value), epoch)
            adam_step(adam, params, grad(loss, params), lr)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            train_err = _global_error(train_seg.segments, full_prediction(y0n),
                                      model.schema, model.norm)
            test_err = (
                _global_error(test_seg.segments, full_prediction(test_views[0]),
                              model.schema, model.norm)
                if test_views is not None else float("nan")
            )
            _check_finite(train_err, epoch)
            history.record(epoch, train_err, test_err, lr)
    return history


# -- two-step training -----------------------------------------------------------


@dataclass
class TwoStepArtifacts:
    """Everything the branch stage needs from a trained trunk."""

    q_star: np.ndarray   # (j, n_t1, p) orthonormal bases
    r_star: np.ndarray   # (j, p, p) upper-triangular factors
    a_star: np.ndarray   # (j, p, bs) least-squares coefficients
    u: np.ndarray        # (bs, j, p) branch targets, U_m = R*_m A*_m


def train_trunk(trunk_cfg, trunk_params: dict, train_seg: SegmentedDataset,
                cfg: TrainConfig, weight_csv=None):
    """Stage one: optimize trunk parameters and the coefficient tensor A.

    Returns ``(a_value, history)``; the trunk parameters are updated in
    place. Minibatches slice the sample axis of both A and the targets.
    """
    j = train_seg.schema.j
    p = operator.net_output_dim(trunk_cfg) // j
    n_t = train_seg.seg_len - 1
    if p >= n_t:
        raise ConfigError(f"two-step training requires p < n_t, got p={p}, n_t={n_t}")
    _, targets = _normalized_views(train_seg)
    bs_total = targets.shape[0]
    t_norm = operator.time_grid(train_seg.seg_len)
    a = Var(stream(cfg.seed, "a_init").uniform(-1.0 / np.sqrt(p), 1.0 / np.sqrt(p),
                                               size=(j, p, bs_total)))
    params = list(trunk_params.values()) + [a]
    adam = AdamState(params, beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2,
                     eps=cfg.optimizer.eps)
    weights = _maybe_init_weights(cfg, bs_total, j)
    history = TrainHistory()
    logger = _WeightLogger(weight_csv)
    shuffle_rng = stream(cfg.seed, "shuffle")

    def trunk_c() -> Var:
        tr = operator.net_forward(trunk_cfg, trunk_params, Var(t_norm))
        return tr.reshape(train_seg.seg_len, j, p)

    def full_prediction() -> np.ndarray:
        return tensor_ops.contract_trunk_A(trunk_c().value, a.value)

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.optimizer.lr_at(epoch)
        if weights is not None and weights.due(epoch):
            weights = _update_weights(weights, train_seg.segments, full_prediction(),
                                      train_seg.schema, train_seg.norm, history, epoch, logger)
        order = shuffle_rng.permutation(bs_total)
        for rows in np.array_split(order, cfg.minibatches_at(epoch)):
            pred = einsum("ijk,jkl->lij", trunk_c(), a.take_last(rows))
            loss = losses.data_loss(cfg.loss, targets[rows], pred, weights, rows)
            _check_finite(float(loss.value), epoch)
            adam_step(adam, params, grad(loss, params), lr)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            train_err = _global_error(train_seg.segments, full_prediction(),
                                      train_seg.schema, train_seg.norm)
            _check_finite(train_err, epoch)
            history.record(epoch, train_err, float("nan"), lr)
    return a.value, history


def factorize_trunk(trunk_cfg, trunk_params: dict, train_seg: SegmentedDataset,
                    a_opt: np.ndarray | None = None) -> TwoStepArtifacts:
    """Orthogonalize the trained trunk and rebuild the branch targets.

    By default A* is recomputed per state by least squares against the data;
    pass ``a_opt`` to reuse the optimizer's A instead.
    """
    j = train_seg.schema.j
    p = operator.net_output_dim(trunk_cfg) // j
    t_norm = operator.time_grid(train_seg.seg_len)
    c = operator.net_forward(trunk_cfg, trunk_params, Var(t_norm)).value
    c = c.reshape(train_seg.seg_len, j, p)
    _, targets = _normalized_views(train_seg)
    q_all, r_all, a_all, u_all = [], [], [], []
    for m in range(j):
        block = c[:, m, :]
        try:
            q, r = tensor_ops.qr_thin(block)
        except SingularBasisError as exc:
            raise SingularBasisError(
                f"trunk block for state {train_seg.schema.names[m]!r} is rank "
                f"deficient: {exc}"
            ) from exc
        a_m = a_opt[m] if a_opt is not None else tensor_ops.least_squares(block, targets[:, :, m].T)
        q_all.append(q)
        r_all.append(r)
        a_all.append(a_m)
        u_all.append(r @ a_m)
    return TwoStepArtifacts(
        q_star=np.stack(q_all),
        r_star=np.stack(r_all),
        a_star=np.stack(a_all),
        u=np.stack(u_all).transpose(2, 0, 1),
    )


def train_branch(branch_cfg, branch_params: dict, artifacts: TwoStepArtifacts,
                 train_seg: SegmentedDataset, test_seg: SegmentedDataset | None,
                 cfg: TrainConfig, weight_csv=None) -> TrainHistory:
    """Stage two: fit the branch to the reconstructed targets U.

    The data loss runs over (bs, p, j); adaptive weights are computed from
    full physical-space predictions through the frozen orthogonal bases.
    """
    y0n, _ = _normalized_views(train_seg)
    test_views = _normalized_views(test_seg) if test_seg is not None else None
    bs_total = y0n.shape[0]
    j = train_seg.schema.j
    p = artifacts.q_star.shape[2]
    # state axis last so the per-state/per-sample reductions line up
    u_t = artifacts.u.transpose(0, 2, 1)  # (bs, p, j)
    params = list(branch_params.values())
    adam = AdamState(params, beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2,
                     eps=cfg.optimizer.eps)
    weights = _maybe_init_weights(cfg, bs_total, j)
    history = TrainHistory()
    logger = _WeightLogger(weight_csv)
    shuffle_rng = stream(cfg.seed, "shuffle")

    def coefficients(inputs) -> Var:
        br = operator.net_forward(branch_cfg, branch_params, Var.of(inputs))
        return br.reshape(inputs.shape[0], j, p)

    def full_prediction(inputs) -> np.ndarray:
        return tensor_ops.contract_predict_2step(coefficients(inputs).value, artifacts.q_star)

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.optimizer.lr_at(epoch)
        if weights is not None and weights.due(epoch):
            weights = _update_weights(weights, train_seg.segments, full_prediction(y0n),
                                      train_seg.schema, train_seg.norm, history, epoch, logger)
        order = shuffle_rng.permutation(bs_total)
        for rows in np.array_split(order, cfg.minibatches_at(epoch)):
            b = coefficients(y0n[rows]).swap_last2()  # (bs, p, j)
            loss = losses.data_loss(cfg.loss, u_t[rows], b, weights, rows)
            _check_finite(float(loss.value), epoch)
            adam_step(adam, params, grad(loss, params), lr)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            train_err = _global_error(train_seg.segments, full_prediction(y0n),
                                      train_seg.schema, train_seg.norm)
            test_err = (
                _global_error(test_seg.segments, full_prediction(test_views[0]),
                              train_seg.schema, train_seg.norm)
                if test_views is not None else float("nan")
            )
            _check_finite(train_err, epoch)
            history.record(epoch, train_err, test_err, lr)
    return history


def two_step_predict_via_inverse(model: operator.DeepONetModel,
                                 artifacts: TwoStepArtifacts, y0_norm) -> np.ndarray:
    """Prediction through the un-simplified path tr * R*^-1 * br^T.

    Algebraically identical to the stored-Q* path; kept as an independent
    route for verification.
    """
    from scipy.linalg import solve_triangular

    c = operator.net_forward(model.trunk_cfg, model.trunk_params, Var(model.t_norm)).value
    c = c.reshape(model.n_t1, model.j, model.p)
    b = operator.branch_coefficients(model, y0_norm).value
    out = np.empty((b.shape[0], model.n_t1, model.j))
    for m in range(model.j):
        t_m = solve_triangular(artifacts.r_star[m], np.eye(model.p), lower=False)
        out[:, :, m] = (c[:, m, :] @ t_m @ b[:, m, :].T).T
    return out


# -- paradigm orchestration -------------------------------------------------------


def build_networks(family: str, input_dim: int, output_dim: int, width: int,
                   hidden_layers: int, seed: int, stream_name: str,
                   order: int = 3, alpha: float = 1.0, beta: float = 1.0):
    """Construct (config, params) for one sub-network."""
    rng = stream(seed, stream_name)
    if family == "resnet":
        cfg = networks.ResNetConfig(input_dim, width, hidden_layers, output_dim)
        return cfg, networks.init_resnet(cfg, rng)
    if family == "kan":
        dims = (input_dim,) + (width,) * hidden_layers + (output_dim,)
        cfg = networks.KanConfig(dims, order=order, alpha=alpha, beta=beta)
        return cfg, networks.init_kan(cfg, rng)
    raise ConfigError(f"unknown network family {family!r}; choose resnet or kan")
