"""The two sub-network families used inside the operator models.

* ResNet: an MLP with a residual (skip) connection after every two hidden
  layers; the first block carries an affine projection when the input width
  differs from the hidden width.
* KAN: layers of univariate Jacobi-polynomial edge functions, with a sin()
  squashing before each polynomial evaluation so the polynomial argument
  stays inside [-1, 1].

Forward passes run on autodiff ``Var`` nodes, so gradients come for free.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Var, einsum, stack_last
from .errors import ConfigError, DimensionError

_ACTIVATIONS = {"tanh": Var.tanh, "sin": Var.sin}


@dataclass(frozen=True)
class ResNetConfig:
    input_dim: int
    hidden_width: int
    num_hidden_layers: int
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.num_hidden_layers < 2 or self.num_hidden_layers % 2 != 0:
            raise ConfigError(
                f"num_hidden_layers must be a positive even number (two layers per "
                f"residual block), got {self.num_hidden_layers}"
            )
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def num_blocks(self) -> int:
        return self.num_hidden_layers // 2

    @property
    def has_projection(self) -> bool:
        return self.input_dim != self.hidden_width


@dataclass(frozen=True)
class KanConfig:
    layer_dims: tuple
    order: int = 3
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ConfigError("layer_dims needs at least an input and an output dim")
        if self.order < 1:
            raise ConfigError(f"polynomial order must be >= 1, got {self.order}")


def resnet_param_count(cfg: ResNetConfig) -> tuple[int, int]:
    """(main parameters, projection parameters) for the closed-form bookkeeping."""
    w, out = cfg.hidden_width, cfg.output_dim
    main = (cfg.input_dim * w + w) + (w * w + w)  # first block
    main += (cfg.num_blocks - 1) * 2 * (w * w + w)
    main += w * out + out
    proj = cfg.input_dim * w + w if cfg.has_projection else 0
    return main, proj


def kan_param_count(cfg: KanConfig) -> int:
    dims = cfg.layer_dims
    return sum(dims[i] * dims[i + 1] * (cfg.order + 1) for i in range(len(dims) - 1))


def init_resnet(cfg: ResNetConfig, rng: np.random.Generator) -> dict:
    """Fan-in scaled uniform init; returns an ordered name -> Var mapping."""

    def linear(name, fan_in, fan_out, params):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.w"] = Var(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params[f"{name}.b"] = Var(rng.uniform(-bound, bound, size=(fan_out,)))

    params: dict = {}
    w = cfg.hidden_width
    for i in range(cfg.num_blocks):
        fan_in = cfg.input_dim if i == 0 else w
        linear(f"block{i}.l1", fan_in, w, params)
        linear(f"block{i}.l2", w, w, params)
    if cfg.has_projection:
        linear("proj", cfg.input_dim, w, params)
    linear("out", w, cfg.output_dim, params)
    return params


def resnet_forward(cfg: ResNetConfig, params: dict, x) -> Var:
    """Forward pass; the final layer is affine (no activation)."""
    x = Var.of(x)
    if x.value.ndim != 2 or x.value.shape[1] != cfg.input_dim:
        raise DimensionError(
            f"expected input of shape (batch, {cfg.input_dim}), got {x.value.shape}"
        )
    act = _ACTIVATIONS[cfg.activation]
    for i in range(cfg.num_blocks):
        z1 = act(x @ params[f"block{i}.l1.w"] + params[f"block{i}.l1.b"])
        z2 = z1 @ params[f"block{i}.l2.w"] + params[f"block{i}.l2.b"]
        if i == 0 and cfg.has_projection:
            skip = x @ params["proj.w"] + params["proj.b"]
        else:
            skip = x
        x = act(z2 + skip)
    return x @ params["out.w"] + params["out.b"]


def jacobi_basis(x, order: int, alpha: float, beta: float):
    """Stacked Jacobi polynomials P_0..P_order of ``x`` on the trailing axis.

    Uses the classical three-term recurrence; accepts a ``Var`` (tape) or a
    plain ndarray, since the recurrence is nothing but mul/add. The caller
    must keep ``x`` within [-1, 1].
    """
    on_tape = isinstance(x, Var)
    raw = x.value if on_tape else np.asarray(x, dtype=np.float64)
    assert np.all(np.abs(raw) <= 1.0 + 1e-12), "Jacobi argument left [-1, 1]"
    a, b = float(alpha), float(beta)
    ones = np.ones_like(raw)
    polys = [Var(ones) if on_tape else ones]
    if order >= 1:
        polys.append(0.5 * ((a - b) + (a + b + 2.0) * x))
    for n in range(1, order):
        c1 = 2.0 * (n + 1) * (n + a + b + 1) * (2 * n + a + b)
        c2 = (2 * n + a + b + 1) * (a * a - b * b)
        c3 = (2 * n + a + b) * (2 * n + a + b + 1) * (2 * n + a + b + 2)
        c4 = 2.0 * (n + a) * (n + b) * (2 * n + a + b + 2)
        polys.append(((c2 + c3 * x) * polys[n] - c4 * polys[n - 1]) * (1.0 / c1))
    if on_tape:
        return stack_last(polys)
    return np.stack(polys, axis=-1)


def init_kan(cfg: KanConfig, rng: np.random.Generator) -> dict:
    """Coefficients uniform in [-r, r] with r = 1 / (in_dim * (order + 1))."""
    params: dict = {}
    for i in range(len(cfg.layer_dims) - 1):
        d_in, d_out = cfg.layer_dims[i], cfg.layer_dims[i + 1]
        r = 1.0 / (d_in * (cfg.order + 1))
        params[f"layer{i}.coeff"] = Var(
            rng.uniform(-r, r, size=(d_in, d_out, cfg.order + 1))
        )
    return params


def kan_forward(cfg: KanConfig, params: dict, x) -> Var:
    """Per layer: squash with sin, expand in Jacobi basis, contract with coeffs."""
    a = Var.of(x)
    if a.value.ndim != 2 or a.value.shape[1] != cfg.layer_dims[0]:
        raise DimensionError(
            f"expected input of shape (batch, {cfg.layer_dims[0]}), got {a.value.shape}"
        )
    for i in range(len(cfg.layer_dims) - 1):
        coeff = params[f"layer{i}.coeff"]
        if coeff.value.shape != (cfg.layer_dims[i], cfg.layer_dims[i + 1], cfg.order + 1):
            raise DimensionError(
                f"layer {i} coefficients have shape {coeff.value.shape}, expected "
                f"{(cfg.layer_dims[i], cfg.layer_dims[i + 1], cfg.order + 1)}"
            )
        a = a.sin()
        poly = jacobi_basis(a, cfg.order, cfg.alpha, cfg.beta)
        a = einsum("ijk,jlk->il", poly, coeff)
    return a
