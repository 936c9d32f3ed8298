"""Small differentiable models, reverse-mode gradients, SGD with cosine annealing,
and spectral-norm Lipschitz certificates.

Parameters live in an ordered ``name -> torch.Tensor`` mapping and are never
mutated in place: every update returns a new :class:`Model`. Gradients come
from ``torch.autograd``; models are evaluated functionally so several parties
(target, defense, attacker, generator) can share one graph without any of them
owning optimiser state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import GraphError, InvalidArgument, ShapeMismatch, Unsupported

KINDS = ("mlp", "cnn_small", "generator_mlp")
ACTIVATIONS = ("relu", "tanh")
CNN_CHANNELS = (8, 16)

_GAINS = {"relu": math.sqrt(2.0), "tanh": 5.0 / 3.0}


@dataclass(frozen=True)
class ArchitectureSpec:
    """Architecture descriptor.

    ``layer_sizes`` lists every dense layer width including the output layer
    (mlp / generator_mlp); for ``cnn_small`` it is fixed to
    ``(8, 16, output_dim)``. Generators additionally carry the data shape they
    emit and the value range their tanh output is rescaled to.
    """

    kind: str
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    input_shape: tuple[int, ...] = ()
    output_dim: int = 0
    output_shape: tuple[int, ...] | None = None
    output_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.output_shape is not None:
            object.__setattr__(self, "output_shape", tuple(int(s) for s in self.output_shape))
        object.__setattr__(self, "output_range", tuple(float(v) for v in self.output_range))
        if not self.output_dim and self.layer_sizes:
            object.__setattr__(self, "output_dim", self.layer_sizes[-1])
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown architecture kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        if not self.layer_sizes or min(self.layer_sizes) <= 0:
            raise InvalidArgument("layer_sizes must be non-empty and positive")
        if self.output_dim != self.layer_sizes[-1]:
            raise InvalidArgument("output_dim must equal the final layer width")
        if not self.input_shape or min(self.input_shape) <= 0:
            raise InvalidArgument("input_shape must be non-empty and positive")
        if self.kind == "cnn_small":
            if self.layer_sizes != (*CNN_CHANNELS, self.output_dim):
                raise InvalidArgument(f"cnn_small layer_sizes must be {CNN_CHANNELS + (self.output_dim,)}")
            if len(self.input_shape) != 3 or min(self.input_shape[1:]) < 4:
                raise InvalidArgument("cnn_small needs a c x h x w input with h, w >= 4")
        if self.kind == "generator_mlp":
            if self.output_shape is None or math.prod(self.output_shape) != self.output_dim:
                raise InvalidArgument("generator output_shape must multiply out to output_dim")
            lo, hi = self.output_range
            if not hi > lo:
                raise InvalidArgument("generator output_range must be increasing")

    # -- convenience constructors ---------------------------------------------

    @classmethod
    def mlp(cls, input_shape, hidden, num_classes: int, activation: str = "relu") -> "ArchitectureSpec":
        shape = (input_shape,) if isinstance(input_shape, int) else tuple(input_shape)
        return cls("mlp", (*hidden, num_classes), activation, shape, num_classes)

    @classmethod
    def cnn_small(cls, input_shape, num_classes: int, activation: str = "relu") -> "ArchitectureSpec":
        return cls("cnn_small", (*CNN_CHANNELS, num_classes), activation, tuple(input_shape), num_classes)

    @classmethod
    def generator_mlp(cls, latent_dim: int, output_shape, hidden=(64, 64),
                      output_range=(0.0, 1.0), activation: str = "relu") -> "ArchitectureSpec":
        shape = (output_shape,) if isinstance(output_shape, int) else tuple(output_shape)
        out = math.prod(shape)
        return cls("generator_mlp", (*hidden, out), activation, (latent_dim,), out, shape, output_range)

    # -- identity / serialisation ---------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "input_shape": list(self.input_shape),
            "output_dim": self.output_dim,
        }
        if self.kind == "generator_mlp":
            d["output_shape"] = list(self.output_shape)
            d["output_range"] = list(self.output_range)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureSpec":
        try:
            return cls(
                kind=d["kind"],
                layer_sizes=tuple(d["layer_sizes"]),
                activation=d.get("activation", "relu"),
                input_shape=tuple(d["input_shape"]),
                output_dim=int(d.get("output_dim", 0)),
                output_shape=tuple(d["output_shape"]) if d.get("output_shape") is not None else None,
                output_range=tuple(d.get("output_range", (0.0, 1.0))),
            )
        except KeyError as exc:
            raise InvalidArgument(f"architecture descriptor missing field {exc.args[0]!r}") from None

    @property
    def identifier(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def short_name(self) -> str:
        name = "cnn_small" if self.kind == "cnn_small" else f"{self.kind}[{','.join(map(str, self.layer_sizes[:-1]))}]"
        return name if self.activation == "relu" else f"{name}/{self.activation}"


def param_shapes(spec: ArchitectureSpec) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; weights use the (out, in) layout."""
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.kind == "cnn_small":
        c, h, w = spec.input_shape
        c0, c1 = CNN_CHANNELS
        shapes["conv0.weight"] = (c0, c, 3, 3)
        shapes["conv0.bias"] = (c0,)
        shapes["conv1.weight"] = (c1, c0, 3, 3)
        shapes["conv1.bias"] = (c1,)
        flat = c1 * (h // 2 // 2) * (w // 2 // 2)
        shapes["fc.weight"] = (spec.output_dim, flat)
        shapes["fc.bias"] = (spec.output_dim,)
        return shapes
    fan_in = math.prod(spec.input_shape)
    for i, width in enumerate(spec.layer_sizes):
        shapes[f"fc{i}.weight"] = (width, fan_in)
        shapes[f"fc{i}.bias"] = (width,)
        fan_in = width
    return shapes


@dataclass(frozen=True, eq=False)
class Model:
    spec: ArchitectureSpec
    params: dict[str, torch.Tensor]
    rng_seed: int = 0

    def __post_init__(self):
        expected = param_shapes(self.spec)
        if list(self.params) != list(expected):
            raise ShapeMismatch(f"parameter names {list(self.params)} do not match {list(expected)}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ShapeMismatch(f"{name}: shape {tuple(self.params[name].shape)}, expected {shape}")

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.params.values())).dtype

    def with_params(self, params: Mapping[str, torch.Tensor]) -> "Model":
        return replace(self, params=dict(params))

    def astype(self, dtype: torch.dtype) -> "Model":
        return self.with_params({k: v.detach().to(dtype) for k, v in self.params.items()})

    def numpy_params(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return sum(v.numel() for v in self.params.values())

    def same_params(self, other: "Model") -> bool:
        """Bitwise parameter equality."""
        if list(self.params) != list(other.params):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and torch.equal(a, b)
            for a, b in zip(self.params.values(), other.params.values())
        )


def build(spec: ArchitectureSpec, seed: int, dtype: torch.dtype = torch.float32) -> Model:
    """Kaiming-normal weights (fan-in mode, activation-matched gain), zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    gain = _GAINS[spec.activation]
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = torch.zeros(shape, dtype=dtype)
        else:
            fan_in = math.prod(shape[1:])
            w = rng.standard_normal(shape) * (gain / math.sqrt(fan_in))
            params[name] = torch.from_numpy(w).to(dtype)
    return Model(spec, params, int(seed))


def _activation(spec: ArchitectureSpec) -> Callable[[torch.Tensor], torch.Tensor]:
    return torch.relu if spec.activation == "relu" else torch.tanh


def as_batch(model: Model, batch) -> torch.Tensor:
    if isinstance(batch, np.ndarray) and not batch.flags.writeable:
        batch = np.array(batch)
    x = torch.as_tensor(batch)
    if not torch.is_floating_point(x) or x.dtype != model.dtype:
        x = x.to(model.dtype)
    if x.ndim != len(model.spec.input_shape) + 1 or tuple(x.shape[1:]) != model.spec.input_shape:
        raise ShapeMismatch(f"batch shape {tuple(x.shape)} does not match input {model.spec.input_shape}")
    return x


def forward(model: Model, batch) -> torch.Tensor:
    """Logits (or generated samples for ``generator_mlp``) for a batch."""
    x = as_batch(model, batch)
    p = model.params
    act = _activation(model.spec)
    spec = model.spec
    if spec.kind == "cnn_small":
        h = F.max_pool2d(act(F.conv2d(x, p["conv0.weight"], p["conv0.bias"], padding=1)), 2)
        h = F.max_pool2d(act(F.conv2d(h, p["conv1.weight"], p["conv1.bias"], padding=1)), 2)
        return F.linear(h.flatten(1), p["fc.weight"], p["fc.bias"])

    h = x.reshape(x.shape[0], -1)
    last = len(spec.layer_sizes) - 1
    for i in range(len(spec.layer_sizes)):
        h = F.linear(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
        if i < last:
            h = act(h)
    if spec.kind == "generator_mlp":
        lo, hi = spec.output_range
        h = lo + (hi - lo) * (torch.tanh(h) + 1.0) / 2.0
        h = h.reshape(x.shape[0], *spec.output_shape)
    return h


def predict_labels(model: Model, batch) -> np.ndarray:
    with torch.no_grad():
        return forward(model, batch).argmax(dim=1).numpy()


# -- gradients ---------------------------------------------------------------


def value_and_gradients(
    model: Model, loss_fn: Callable[[Model], torch.Tensor]
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Evaluate ``loss_fn`` on a differentiable copy of ``model`` and backpropagate.

    ``loss_fn`` receives the model whose parameters are graph leaves and must
    return a scalar tensor. Anything else the loss touches (other models,
    teacher outputs) is treated as constant.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in model.params.items()}
    loss = loss_fn(model.with_params(leaves))
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise GraphError("loss must be a scalar tensor")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on the model parameters")
    grads = torch.autograd.grad(loss.reshape(()), list(leaves.values()), allow_unused=True)
    if all(g is None for g in grads):
        raise GraphError("loss does not depend on the model parameters")
    out = {
        name: (g if g is not None else torch.zeros_like(leaves[name]))
        for name, g in zip(leaves, grads)
    }
    return loss.detach(), out


def gradients(model: Model, loss_fn: Callable[[Model], torch.Tensor]) -> dict[str, torch.Tensor]:
    return value_and_gradients(model, loss_fn)[1]


def clip_grad_norm(grads: Mapping[str, torch.Tensor], max_norm: float | None) -> dict[str, torch.Tensor]:
    """Rescale so the global L2 norm is at most ``max_norm`` (no-op when None)."""
    if max_norm is None:
        return dict(grads)
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
    if total <= max_norm:
        return dict(grads)
    scale = max_norm / float(total)
    return {k: g * scale for k, g in grads.items()}


# -- optimiser ---------------------------------------------------------------


def cosine_lr(base_lr: float, min_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass(frozen=True, eq=False)
class OptimizerState:
    momentum_buffers: dict[str, torch.Tensor]
    base_lr: float
    momentum: float = 0.0
    step: int = 0
    total_steps: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        # base_lr == 0 is allowed so a party can be explicitly frozen
        if self.base_lr < 0 or self.min_lr < 0:
            raise InvalidArgument("learning rates must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgument("momentum must lie in [0, 1)")
        if not 0 <= self.step <= self.total_steps:
            raise InvalidArgument(f"step {self.step} outside [0, {self.total_steps}]")

    @property
    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.min_lr, self.step, self.total_steps)


def init_optimizer(model: Model, lr: float, total_steps: int, momentum: float = 0.0,
                   min_lr: float = 0.0) -> OptimizerState:
    buffers = {k: torch.zeros_like(v) for k, v in model.params.items()}
    return OptimizerState(buffers, float(lr), float(momentum), 0, max(int(total_steps), 1), float(min_lr))


def sgd_step(model: Model, grads: Mapping[str, torch.Tensor],
             state: OptimizerState) -> tuple[Model, OptimizerState]:
    """v <- mu * v + g;  theta <- theta - lr(t) * v;  t <- t + 1."""
    if set(grads) != set(model.params):
        raise ShapeMismatch("gradients must cover exactly the model parameters")
    if state.step >= state.total_steps:
        raise InvalidArgument("optimizer schedule exhausted")
    lr = state.lr
    new_params, new_buffers = {}, {}
    with torch.no_grad():
        for name, theta in model.params.items():
            g = grads[name]
            if g.shape != theta.shape:
                raise ShapeMismatch(f"{name}: gradient shape {tuple(g.shape)} vs {tuple(theta.shape)}")
            v = state.momentum * state.momentum_buffers[name] + g.to(theta.dtype)
            new_buffers[name] = v
            new_params[name] = theta - lr * v
    return model.with_params(new_params), replace(state, momentum_buffers=new_buffers, step=state.step + 1)


# -- Lipschitz certificate -----------------------------------------------------


POWER_BLOCK = 8


def _power_iteration(apply, adjoint, shape, iters: int, seed: int = 0) -> float:
    """Largest singular value of a linear operator by block power iteration.

    ``apply``/``adjoint`` act on a batch of vectors of shape ``(k, *shape)``.
    A block of k vectors with a Rayleigh-Ritz step at the end converges at rate
    (sigma_{k+1}/sigma_1)^2 instead of (sigma_2/sigma_1)^2, which matters for
    convolutions whose top singular values nearly coincide.
    """
    n = math.prod(shape)
    k = min(POWER_BLOCK, n)
    gen = torch.Generator().manual_seed(seed)
    v = torch.randn(k, n, generator=gen, dtype=torch.float64)
    q, _ = torch.linalg.qr(v.T)
    v = q.T
    for _ in range(iters):
        u = apply(v.reshape(k, *shape))
        w = adjoint(u).reshape(k, n)
        if not torch.any(w):
            return 0.0
        q, _ = torch.linalg.qr(w.T)
        v = q.T
    ritz = apply(v.reshape(k, *shape)).reshape(k, -1)
    return float(torch.linalg.svdvals(ritz)[0])


def layer_spectral_norms(model: Model, power_iters: int = 100) -> list[float]:
    spec = model.spec
    if spec.kind == "generator_mlp":
        raise Unsupported("generator outputs pass through a rescaled tanh; no certificate provided")
    if power_iters < 50:
        raise InvalidArgument("power_iters must be at least 50")
    p = {k: v.detach().to(torch.float64) for k, v in model.params.items()}
    norms = []
    if spec.kind == "cnn_small":
        c, h, w = spec.input_shape
        shapes = [(c, h, w), (CNN_CHANNELS[0], h // 2, w // 2)]
        for i, shape in enumerate(shapes):
            W = p[f"conv{i}.weight"]
            norms.append(_power_iteration(
                lambda v, W=W: F.conv2d(v, W, padding=1),
                lambda u, W=W: F.conv_transpose2d(u, W, padding=1),
                shape, power_iters,
            ))
        names = ["fc.weight"]
    else:
        names = [f"fc{i}.weight" for i in range(len(spec.layer_sizes))]
    for name in names:
        W = p[name]
        norms.append(_power_iteration(lambda v, W=W: v @ W.T, lambda u, W=W: u @ W,
                                      (W.shape[1],), power_iters))
    return norms


def lipschitz_upper_bound(model: Model, power_iters: int = 100) -> float:
    """Product of per-layer spectral norms.

    relu/tanh and 2x2 max-pooling are 1-Lipschitz in the Euclidean norm, so they
    contribute a factor of 1.
    """
    return float(np.prod(layer_spectral_norms(model, power_iters)))
