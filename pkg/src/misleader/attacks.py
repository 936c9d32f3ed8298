"""Budgeted black-box oracles, the RandP output perturbation baseline, and
data-based (Knockoff-style) / data-free (generator-driven) extraction attacks.

Attack code only talks to a :class:`QueryOracle`. The data-free attacker is a
white-box proxy: the generator receives exact gradients through the oracle's
returned probabilities instead of a zeroth-order estimate, which makes it a
strictly stronger adversary than the black-box original.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import losses
from .data import Dataset
from .ensemble import predict
from .errors import BudgetExceeded, InvalidArgument
from .models import (
    ArchitectureSpec,
    Model,
    build,
    clip_grad_norm,
    forward,
    init_optimizer,
    sgd_step,
    value_and_gradients,
)

log = logging.getLogger(__name__)


# -- output perturbation ---------------------------------------------------------


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    k = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, k + 1)
    cond = u - css / ind > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(v.shape[0]), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


class RandPWrapper:
    """Random perturbation of each output row within an L1 ball, staying on the simplex."""

    def __init__(self, budget_l1: float, seed: int = 0):
        if budget_l1 < 0:
            raise InvalidArgument("budget_l1 must be non-negative")
        self.budget_l1 = float(budget_l1)
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)

    def __call__(self, probs: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        if self.budget_l1 == 0.0:
            return y.copy()
        b, k = y.shape
        direction = self._rng.standard_normal((b, k))
        direction -= direction.mean(axis=1, keepdims=True)
        norms = np.abs(direction).sum(axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        radius = self._rng.uniform(0.0, self.budget_l1, size=(b, 1))
        y_hat = project_to_simplex(y + radius * direction / norms)
        dist = np.abs(y_hat - y).sum(axis=1, keepdims=True)
        # shrink toward y; a convex combination of simplex points stays on the simplex
        over = dist > self.budget_l1
        shrink = np.where(over, self.budget_l1 / np.where(dist > 0, dist, 1.0), 1.0)
        y_hat = y + shrink * (y_hat - y)
        y_hat = np.maximum(y_hat, 0.0)
        return y_hat / y_hat.sum(axis=1, keepdims=True)


def randp_wrapper(budget_l1: float, seed: int = 0) -> RandPWrapper:
    return RandPWrapper(budget_l1, seed)


# -- oracle ----------------------------------------------------------------------


class QueryOracle:
    """Black-box view of a deployed model or ensemble with exact budget accounting."""

    def __init__(self, target, mode: str = "soft", budget: int = 10_000,
                 wrapper: Callable[[np.ndarray], np.ndarray] | None = None):
        if mode not in ("soft", "hard"):
            raise InvalidArgument("mode must be 'soft' or 'hard'")
        if budget <= 0:
            raise InvalidArgument("budget must be positive")
        self._target = target
        self.mode = mode
        self.budget = int(budget)
        self.used = 0
        self.wrapper = wrapper
        self.input_shape = tuple(target.spec.input_shape if isinstance(target, Model) else target.input_shape)
        self.num_classes = int(target.spec.output_dim if isinstance(target, Model) else target.output_dim)
        self.dtype = target.dtype

    @property
    def remaining(self) -> int:
        return self.budget - self.used

    def _charge(self, rows: int) -> None:
        if self.used + rows > self.budget:
            raise BudgetExceeded(f"query of {rows} rows exceeds remaining budget {self.remaining}")
        self.used += rows

    def _respond(self, probs: torch.Tensor) -> torch.Tensor:
        """Apply the wrapper and label mode; perturbations enter as constant offsets."""
        out = probs
        if self.wrapper is not None:
            with torch.no_grad():
                perturbed = torch.as_tensor(self.wrapper(probs.detach().double().numpy())).to(probs.dtype)
            out = probs + (perturbed - probs.detach())
        if self.mode == "hard":
            with torch.no_grad():
                labels = out.argmax(dim=1)
            return torch.nn.functional.one_hot(labels, self.num_classes).to(probs.dtype)
        return out

    def query(self, x) -> np.ndarray:
        x = torch.as_tensor(x)
        self._charge(int(x.shape[0]))
        with torch.no_grad():
            return self._respond(predict(self._target, x)).numpy()

    def query_differentiable(self, x: torch.Tensor) -> torch.Tensor:
        """Same answer as :meth:`query` but differentiable w.r.t. ``x`` (white-box proxy)."""
        self._charge(int(x.shape[0]))
        return self._respond(predict(self._target, x))


def make_oracle(model_or_ensemble, mode: str = "soft", budget: int = 10_000, wrapper=None) -> QueryOracle:
    return QueryOracle(model_or_ensemble, mode, budget, wrapper)


# -- attack configs and results ---------------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    clone_spec: ArchitectureSpec
    budget: int = 10_000
    lr: float = 0.05
    epochs: int = 30
    batch: int = 64
    momentum: float = 0.9
    seed: int = 0
    # dfme
    generator_spec: ArchitectureSpec | None = None
    latent_dim: int = 16
    generator_lr: float = 0.01
    gen_steps: int = 1
    student_steps: int = 5
    train_generator: bool = True

    def __post_init__(self):
        if self.kind not in ("dbme", "dfme"):
            raise InvalidArgument(f"unknown attack kind {self.kind!r}")
        if self.budget <= 0:
            raise InvalidArgument("budget must be positive")
        if self.batch < 1 or self.epochs < 0 or self.lr < 0:
            raise InvalidArgument("batch >= 1, epochs >= 0, lr >= 0 required")
        if self.kind == "dfme":
            if self.generator_spec is None:
                raise InvalidArgument("dfme needs generator_spec")
            if self.generator_spec.kind != "generator_mlp":
                raise InvalidArgument("generator_spec must be a generator_mlp")
            if self.generator_spec.input_shape != (self.latent_dim,):
                raise InvalidArgument("generator input must match latent_dim")
            if self.gen_steps < 0 or self.student_steps < 1:
                raise InvalidArgument("gen_steps >= 0 and student_steps >= 1 required")

    @property
    def rounds(self) -> int:
        return self.epochs

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["clone_spec"] = self.clone_spec.to_dict()
        d["generator_spec"] = self.generator_spec.to_dict() if self.generator_spec else None
        return d

    @classmethod
    def from_dict(cls, d) -> "AttackConfig":
        d = dict(d)
        d["clone_spec"] = ArchitectureSpec.from_dict(d["clone_spec"])
        if d.get("generator_spec") is not None:
            d["generator_spec"] = ArchitectureSpec.from_dict(d["generator_spec"])
        return cls(**d)


def default_generator_spec(latent_dim: int, data_shape, data_range=(0.0, 1.0)) -> ArchitectureSpec:
    return ArchitectureSpec.generator_mlp(latent_dim, data_shape, (64, 64), data_range)


@dataclass
class AttackResult:
    clone: Model
    queries_used: int
    clone_accuracy: float | None = None
    agreement: float | None = None
    rounds: list[dict] = field(default_factory=list)
    generator: Model | None = None
    truncated: bool = False


def _train_clone(clone: Model, xs: torch.Tensor, ys: torch.Tensor, hard: bool,
                 config: AttackConfig, rng: np.random.Generator) -> tuple[Model, list[dict]]:
    n = xs.shape[0]
    spe = math.ceil(n / config.batch)
    opt = init_optimizer(clone, config.lr, config.epochs * spe, config.momentum)
    history = []
    for epoch in range(config.epochs):
        perm = torch.as_tensor(rng.permutation(n))
        total = 0.0
        for start in range(0, n, config.batch):
            idx = perm[start:start + config.batch]
            xb, yb = xs[idx], ys[idx]
            if hard:
                fn = lambda m: losses.cross_entropy(forward(m, xb), yb.argmax(dim=1))
            else:
                fn = lambda m: losses.attacker_loss(forward(m, xb), yb, update="clone")
            loss, grads = value_and_gradients(clone, fn)
            clone, opt = sgd_step(clone, clip_grad_norm(grads, 5.0), opt)
            total += float(loss) * len(idx)
        history.append({"epoch": epoch + 1, "loss": total / n})
    return clone, history


def run_dbme(oracle: QueryOracle, surrogate: Dataset, config: AttackConfig) -> AttackResult:
    """Query the surrogate set once (in seeded order) under budget, then fit a clone."""
    if len(surrogate) == 0:
        raise InvalidArgument("surrogate dataset is empty")
    if config.kind != "dbme":
        raise InvalidArgument("run_dbme needs a dbme config")
    rng = np.random.default_rng(config.seed)
    clone = build(config.clone_spec, int(rng.integers(2**32)), dtype=oracle.dtype)
    order = rng.permutation(len(surrogate))
    start_used = oracle.used
    xs, ys = [], []
    truncated = False
    for start in range(0, len(surrogate), config.batch):
        xb = torch.tensor(surrogate.inputs[order[start:start + config.batch]]).to(oracle.dtype)
        try:
            yb = oracle.query(xb)
        except BudgetExceeded:
            truncated = True
            log.warning("dbme: budget exhausted after %d queries", oracle.used - start_used)
            break
        xs.append(xb)
        ys.append(torch.as_tensor(yb).to(oracle.dtype))
    used = oracle.used - start_used
    if not xs:
        log.warning("dbme: no queries answered; clone left at initialisation")
        return AttackResult(clone, 0, truncated=truncated)
    clone, history = _train_clone(clone, torch.cat(xs), torch.cat(ys), oracle.mode == "hard", config, rng)
    return AttackResult(clone, used, rounds=history, truncated=truncated)


def run_dfme(oracle: QueryOracle, config: AttackConfig) -> AttackResult:
    """Alternate generator ascent and student descent on the oracle/student disagreement."""
    if config.kind != "dfme":
        raise InvalidArgument("run_dfme needs a dfme config")
    gen_spec = config.generator_spec
    if gen_spec.output_shape != oracle.input_shape:
        raise InvalidArgument("generator output shape must match the oracle input shape")
    rng = np.random.default_rng(config.seed)
    dtype = oracle.dtype
    student = build(config.clone_spec, int(rng.integers(2**32)), dtype=dtype)
    generator = build(gen_spec, int(rng.integers(2**32)), dtype=dtype)
    hard = oracle.mode == "hard"
    b = config.batch
    per_round = (config.gen_steps + config.student_steps) * b
    s_opt = init_optimizer(student, config.lr, config.rounds * config.student_steps, config.momentum)
    g_opt = init_optimizer(generator, config.generator_lr, max(config.rounds * config.gen_steps, 1),
                           config.momentum)
    start_used = oracle.used
    history = []
    truncated = False

    def latent() -> torch.Tensor:
        return torch.as_tensor(rng.standard_normal((b, config.latent_dim))).to(dtype)

    def disagreement(y: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
        if hard:
            return losses.cross_entropy(student_logits, y.argmax(dim=1))
        return losses.attacker_loss(student_logits, y, update="both")

    for r in range(config.rounds):
        if oracle.remaining < per_round:
            truncated = True
            log.warning("dfme: budget exhausted after %d rounds", r)
            break
        g_loss = float("nan")
        for _ in range(config.gen_steps):
            z = latent()

            def gen_objective(g: Model) -> torch.Tensor:
                x = forward(g, z)
                return -disagreement(oracle.query_differentiable(x), forward(student, x))

            loss, grads = value_and_gradients(generator, gen_objective)
            g_loss = -float(loss)
            if config.train_generator and config.generator_lr > 0:
                generator, g_opt = sgd_step(generator, clip_grad_norm(grads, 5.0), g_opt)
        s_loss = float("nan")
        for _ in range(config.student_steps):
            with torch.no_grad():
                x = forward(generator, latent())
            y = torch.as_tensor(oracle.query(x)).to(dtype)
            loss, grads = value_and_gradients(student, lambda m: disagreement(y, forward(m, x)))
            s_loss = float(loss)
            student, s_opt = sgd_step(student, clip_grad_norm(grads, 5.0), s_opt)
        history.append({"round": r + 1, "generator_loss": g_loss, "student_loss": s_loss,
                        "queries": oracle.used - start_used})
    return AttackResult(student, oracle.used - start_used, rounds=history, generator=generator,
                        truncated=truncated)


def evaluate_attack(result: AttackResult, f_t, test: Dataset) -> dict:
    """Clone test accuracy and clone-vs-target JS agreement utility (K = ln 2)."""
    with torch.no_grad():
        x = torch.tensor(np.array(test.inputs))
        clone_probs = predict(result.clone, x)
        target_probs = predict(f_t, x)
    result.clone_accuracy = losses.accuracy(clone_probs, test.labels)
    result.agreement = losses.agreement_utility(clone_probs, target_probs)
    return {
        "clone_accuracy": result.clone_accuracy,
        "agreement": result.agreement,
        "queries_used": result.queries_used,
    }
