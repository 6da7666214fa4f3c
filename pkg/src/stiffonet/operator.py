"""Multi-output operator models: branch + trunk assembly, output-neuron
splitting per state variable, partition-of-unity trunk, output bounding,
the log/min-max normalization pipeline, and autoregressive rollout.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import networks, storage
from .autodiff import Var, einsum
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    InvalidModeError,
    RolloutDivergenceError,
)


@dataclass(frozen=True)
class StateSchema:
    """Names and roles of the j state variables.

    ``mass_group`` holds the indices whose physical values must sum to one;
    ``log_flags`` marks states normalized in log space.
    """

    names: tuple
    temperature_index: int | None = None
    mass_group: tuple = ()
    log_flags: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "mass_group", tuple(self.mass_group))
        flags = self.log_flags if len(self.log_flags) else (True,) * len(self.names)
        object.__setattr__(self, "log_flags", tuple(bool(f) for f in flags))
        if len(self.log_flags) != len(self.names):
            raise ConfigError("log_flags length must match the number of states")
        if self.temperature_index is not None and self.temperature_index in self.mass_group:
            raise ConfigError("temperature cannot be part of the mass-conserving group")
        if any(i < 0 or i >= len(self.names) for i in self.mass_group):
            raise ConfigError(f"mass_group indices out of range for j={len(self.names)}")

    @property
    def j(self) -> int:
        return len(self.names)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "temperature_index": self.temperature_index,
            "mass_group": list(self.mass_group),
            "log_flags": list(self.log_flags),
        }

    @staticmethod
    def from_dict(d: dict) -> "StateSchema":
        return StateSchema(
            names=tuple(d["names"]),
            temperature_index=d.get("temperature_index"),
            mass_group=tuple(d.get("mass_group", ())),
            log_flags=tuple(d.get("log_flags", ())),
        )


@dataclass(frozen=True)
class NormalizationParams:
    """Per-state min/max in transformed (possibly log) space."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mins", np.asarray(self.mins, dtype=np.float64))
        object.__setattr__(self, "maxs", np.asarray(self.maxs, dtype=np.float64))
        if np.any(self.maxs <= self.mins):
            raise DomainError("normalization requires max > min for every state")

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "NormalizationParams":
        return NormalizationParams(np.array(d["mins"]), np.array(d["maxs"]))


def _transform(raw: np.ndarray, schema: StateSchema) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    flags = np.array(schema.log_flags)
    if np.any(flags) and np.any(raw[..., flags] <= 0.0):
        bad = np.argwhere(raw <= 0.0)
        bad = bad[np.isin(bad[:, -1], np.flatnonzero(flags))][0]
        raise DomainError(
            f"log-normalized state {schema.names[bad[-1]]} is <= 0 at index {tuple(bad[:-1])}"
        )
    out = raw.copy()
    out[..., flags] = np.log(raw[..., flags])
    return out


def compute_norm_params(raw: np.ndarray, schema: StateSchema) -> NormalizationParams:
    """Min/max of the (log-)transformed values over all leading axes."""
    transformed = _transform(raw, schema)
    axes = tuple(range(transformed.ndim - 1))
    return NormalizationParams(transformed.min(axis=axes), transformed.max(axis=axes))


def normalize(raw: np.ndarray, schema: StateSchema, params: NormalizationParams) -> np.ndarray:
    """Log (where flagged) then min-max to [-1, 1], each state separately."""
    transformed = _transform(raw, schema)
    return 2.0 * (transformed - params.mins) / (params.maxs - params.mins) - 1.0


def denormalize(norm: np.ndarray, schema: StateSchema, params: NormalizationParams) -> np.ndarray:
    """Exact inverse of :func:`normalize`."""
    norm = np.asarray(norm, dtype=np.float64)
    lin = (norm + 1.0) / 2.0 * (params.maxs - params.mins) + params.mins
    flags = np.array(schema.log_flags)
    out = lin.copy()
    with np.errstate(over="ignore"):  # inf is the honest answer for wild inputs
        out[..., flags] = np.exp(lin[..., flags])
    return out


def denormalize_var(norm: Var, schema: StateSchema, params: NormalizationParams) -> Var:
    """Tape-differentiable denormalization (needed by physical-space losses)."""
    scale = (params.maxs - params.mins) / 2.0
    lin = norm * scale + (params.mins + scale)
    mask = np.array(schema.log_flags, dtype=np.float64)
    if not mask.any():
        return lin
    if mask.all():
        return lin.exp()
    # masking before exp keeps non-log states (which may be huge) out of exp()
    return (lin * mask).exp() * mask + lin * (1.0 - mask)


def time_grid(n_t1: int) -> np.ndarray:
    """The shared trunk input: n_t1 points normalized to [-1, 1], shape (n_t1, 1)."""
    return np.linspace(-1.0, 1.0, n_t1).reshape(-1, 1)


def net_forward(cfg, params: dict, x) -> Var:
    if isinstance(cfg, networks.ResNetConfig):
        return networks.resnet_forward(cfg, params, x)
    if isinstance(cfg, networks.KanConfig):
        return networks.kan_forward(cfg, params, x)
    raise ConfigError(f"unknown network config type {type(cfg).__name__}")


def net_output_dim(cfg) -> int:
    if isinstance(cfg, networks.ResNetConfig):
        return cfg.output_dim
    return cfg.layer_dims[-1]


ONE_STEP = "one-step"
TWO_STEP = "two-step"


@dataclass
class DeepONetModel:
    """Branch + trunk with p basis functions per state variable.

    In two-step mode the trunk's role is taken over by the stored orthogonal
    bases ``q_star`` (shape (j, n_t1, p)); partition of unity and output
    bounding apply to one-step mode only.
    """

    schema: StateSchema
    norm: NormalizationParams
    branch_cfg: object
    branch_params: dict
    trunk_cfg: object
    trunk_params: dict
    p: int
    t_norm: np.ndarray
    mode: str = ONE_STEP
    pou: bool = True
    bound_factor: float = 1.05
    q_star: np.ndarray | None = None
    # original (uncollapsed) schema when trained on mass-map coordinates
    collapsed_from: StateSchema | None = None

    def __post_init__(self):
        j = self.schema.j
        for label, cfg in (("branch", self.branch_cfg), ("trunk", self.trunk_cfg)):
            width = net_output_dim(cfg)
            if width != j * self.p:
                raise ConfigError(
                    f"{label} output width {width} != j*p = {j}*{self.p}"
                )
        if self.mode not in (ONE_STEP, TWO_STEP):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == TWO_STEP and (self.pou or self.bound_factor > 0):
            raise ConfigError("two-step mode excludes partition of unity and output bounding")
        self.t_norm = np.asarray(self.t_norm, dtype=np.float64).reshape(-1, 1)

    @property
    def j(self) -> int:
        return self.schema.j

    @property
    def n_t1(self) -> int:
        return self.t_norm.shape[0]


def branch_coefficients(model: DeepONetModel, y0_norm) -> Var:
    """Branch output reshaped to (bs, j, p): p coefficients per state."""
    y0_norm = Var.of(y0_norm)
    br = net_forward(model.branch_cfg, model.branch_params, y0_norm)
    return br.reshape(y0_norm.value.shape[0], model.j, model.p)


def trunk_bases(model: DeepONetModel, t_norm=None, apply_pou=None) -> Var:
    """Trunk output reshaped to (n_t1, j, p): p basis functions per state."""
    t = model.t_norm if t_norm is None else np.asarray(t_norm, dtype=np.float64)
    tr = net_forward(model.trunk_cfg, model.trunk_params, Var.of(t))
    c = tr.reshape(t.shape[0], model.j, model.p)
    if apply_pou is None:
        apply_pou = model.pou
    return c.softmax_last() if apply_pou else c


def forward_one_step(model: DeepONetModel, y0_norm) -> Var:
    """Normalized prediction (bs, n_t1, j) for one-step (joint) models."""
    if model.mode != ONE_STEP:
        raise InvalidModeError("forward_one_step requires a one-step model")
    b = branch_coefficients(model, y0_norm)
    c = trunk_bases(model)
    out = einsum("ijk,ljk->ilj", b, c)
    if model.bound_factor > 0:
        out = model.bound_factor * out.tanh()
    return out


def forward_two_step(model: DeepONetModel, y0_norm) -> Var:
    """Normalized prediction through the stored orthogonal bases."""
    if model.mode != TWO_STEP:
        raise InvalidModeError("forward_two_step requires a two-step model")
    if model.q_star is None:
        raise InvalidModeError("two-step model has no stored orthogonal bases")
    b = branch_coefficients(model, y0_norm)
    return einsum("ijk,jlk->ilj", b, Var(model.q_star))


def forward(model: DeepONetModel, y0_norm) -> Var:
    return forward_one_step(model, y0_norm) if model.mode == ONE_STEP else forward_two_step(model, y0_norm)


def predict_raw(model: DeepONetModel, y0_raw: np.ndarray) -> np.ndarray:
    """Physical-space prediction for physical-space initial conditions."""
    y0_raw = np.atleast_2d(np.asarray(y0_raw, dtype=np.float64))
    y0n = normalize(y0_raw, model.schema, model.norm)
    out = forward(model, y0n).value
    return denormalize(out, model.schema, model.norm)


def recursive_predict(model: DeepONetModel, y0_raw: np.ndarray, num_segments: int) -> np.ndarray:
    """Autoregressive rollout: each segment's final state seeds the next one.

    ``y0_raw``: (j,) or (bs, j) physical initial conditions. Returns
    (num_segments*n_t + 1, j) or (bs, num_segments*n_t + 1, j); the shared
    endpoint between consecutive segments appears once.
    """
    if num_segments < 1:
        raise ConfigError("num_segments must be >= 1")
    single = np.asarray(y0_raw).ndim == 1
    current = np.atleast_2d(np.asarray(y0_raw, dtype=np.float64))
    pieces = []
    flags = np.array(model.schema.log_flags)
    for s in range(num_segments):
        if np.any(~np.isfinite(current)) or np.any(current[:, flags] <= 0.0):
            raise RolloutDivergenceError(s)
        seg = predict_raw(model, current)  # (bs, n_t1, j)
        pieces.append(seg if s == 0 else seg[:, 1:, :])
        current = seg[:, -1, :]
    full = np.concatenate(pieces, axis=1)
    return full[0] if single else full


# -- checkpoint io ---------------------------------------------------------

_FORMAT = "stiffonet-checkpoint-v1"


def _cfg_to_dict(cfg) -> dict:
    if isinstance(cfg, networks.ResNetConfig):
        return {
            "family": "resnet",
            "input_dim": cfg.input_dim,
            "hidden_width": cfg.hidden_width,
            "num_hidden_layers": cfg.num_hidden_layers,
            "output_dim": cfg.output_dim,
            "activation": cfg.activation,
        }
    return {
        "family": "kan",
        "layer_dims": list(cfg.layer_dims),
        "order": cfg.order,
        "alpha": cfg.alpha,
        "beta": cfg.beta,
    }


def _cfg_from_dict(d: dict):
    if d["family"] == "resnet":
        return networks.ResNetConfig(
            input_dim=d["input_dim"],
            hidden_width=d["hidden_width"],
            num_hidden_layers=d["num_hidden_layers"],
            output_dim=d["output_dim"],
            activation=d["activation"],
        )
    if d["family"] == "kan":
        return networks.KanConfig(
            layer_dims=tuple(d["layer_dims"]), order=d["order"], alpha=d["alpha"], beta=d["beta"]
        )
    raise ConfigError(f"unknown network family {d.get('family')!r}")


def save_model(model: DeepONetModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for prefix, params in (("branch", model.branch_params), ("trunk", model.trunk_params)):
        for name, var in params.items():
            key = f"{prefix}.{name}"
            tensors[key] = storage.write_blob(directory / f"{key}.bin", var.value)
    tensors["t_norm"] = storage.write_blob(directory / "t_norm.bin", model.t_norm)
    if model.q_star is not None:
        tensors["q_star"] = storage.write_blob(directory / "q_star.bin", model.q_star)
    manifest = {
        "format": _FORMAT,
        "mode": model.mode,
        "p": model.p,
        "pou": model.pou,
        "bound_factor": model.bound_factor,
        "schema": model.schema.to_dict(),
        "normalization": model.norm.to_dict(),
        "branch": _cfg_to_dict(model.branch_cfg),
        "trunk": _cfg_to_dict(model.trunk_cfg),
        "collapsed_from": (model.collapsed_from.to_dict()
                           if model.collapsed_from is not None else None),
        "tensors": tensors,
    }
    storage.write_manifest(directory / "manifest.json", manifest)


def load_model(directory) -> DeepONetModel:
    directory = Path(directory)
    manifest = storage.read_manifest(directory / "manifest.json")
    if manifest.get("format") != _FORMAT:
        raise ConfigError(f"{directory} is not a model checkpoint")
    tensors = manifest["tensors"]

    def read(key):
        entry = tensors[key]
        return storage.read_blob(directory / entry["file"], entry["shape"])

    def params_for(prefix):
        out = {}
        for key in sorted(tensors):
            if key.startswith(prefix + "."):
                out[key[len(prefix) + 1 :]] = Var(read(key))
        return out

    return DeepONetModel(
        schema=StateSchema.from_dict(manifest["schema"]),
        norm=NormalizationParams.from_dict(manifest["normalization"]),
        branch_cfg=_cfg_from_dict(manifest["branch"]),
        branch_params=params_for("branch"),
        trunk_cfg=_cfg_from_dict(manifest["trunk"]),
        trunk_params=params_for("trunk"),
        p=manifest["p"],
        t_norm=read("t_norm"),
        mode=manifest["mode"],
        pou=manifest["pou"],
        bound_factor=manifest["bound_factor"],
        q_star=read("q_star") if "q_star" in tensors else None,
        collapsed_from=(StateSchema.from_dict(manifest["collapsed_from"])
                        if manifest.get("collapsed_from") else None),
    )
