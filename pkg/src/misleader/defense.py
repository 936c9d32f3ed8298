"""Alternating min-max training of one defense model against an in-training attacker.

Each minibatch pairs a clean batch (x, y) with an augmented batch x~. The
attacker f_s takes ``a_iter`` descent steps on KL(d(x~) || f_s(x~)); then the
defense d takes one step on

    kd_loss(d(x), f_t(x), y) - lam * KL(d(x~) || f_s(x~))

with gradient reaching d through both terms and nothing reaching f_t or f_s.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import losses
from .augmentation import AugmentationPolicy, augment_dataset
from .data import Dataset
from .errors import InvalidArgument, ShapeMismatch
from .models import (
    ArchitectureSpec,
    Model,
    OptimizerState,
    build,
    clip_grad_norm,
    forward,
    init_optimizer,
    sgd_step,
    value_and_gradients,
)


@dataclass(frozen=True)
class DefenseConfig:
    lam: float = 0.01
    alpha: float = 0.5
    temperature: float = 4.0
    eta_d: float = 0.05
    eta_s: float = 0.05
    epochs: int = 30
    batch: int = 64
    a_iter: int = 1
    momentum: float = 0.0
    seed: int = 0
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    refresh_augmentation: bool = False
    aug_copies: int = 1
    grad_clip: float | None = 5.0
    fresh_attacker_batch: bool = False
    min_lr: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidArgument("lam must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidArgument("alpha must lie in [0, 1]")
        if not self.temperature > 0:
            raise InvalidArgument("temperature must be positive")
        if not (self.eta_d > 0 and self.eta_s > 0):
            raise InvalidArgument("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgument("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch < 1 or self.a_iter < 0 or self.aug_copies < 1:
            raise InvalidArgument("epochs >= 0, batch >= 1, a_iter >= 0 and aug_copies >= 1 required")
        if isinstance(self.augmentation, dict):
            object.__setattr__(self, "augmentation", AugmentationPolicy.from_dict(self.augmentation))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = self.augmentation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "DefenseConfig":
        d = dict(d)
        if "augmentation" in d:
            d["augmentation"] = AugmentationPolicy.from_dict(d["augmentation"])
        return cls(**d)


@dataclass(frozen=True)
class StepRecord:
    defense_loss: float
    attacker_loss: float
    total_loss: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    defense_loss: float
    attacker_loss: float
    total_loss: float
    clean_accuracy: float
    seconds: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    attacker: Model | None = None  # final state of the in-training attacker


class SeedStreams:
    """Independent RNG streams derived from one seed, one per use."""

    NAMES = ("defense_init", "attacker_init", "augment", "clean_order", "aug_order")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(int(seed)).spawn(len(self.NAMES))
        self._seqs = dict(zip(self.NAMES, children))

    def seed(self, name: str) -> int:
        return int(self._seqs[name].generate_state(1, dtype=np.uint32)[0])

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self._seqs[name])


def _defense_probs(d: Model, x) -> torch.Tensor:
    return losses.softmax_t(forward(d, x), 1.0)


def update_attacker(f_s: Model, d: Model, aug_batch, opt_state: OptimizerState, steps: int,
                    grad_clip: float | None = None) -> tuple[Model, OptimizerState, float]:
    """``steps`` SGD steps on KL(d(x~) || f_s(x~)) with d frozen.

    Returns the updated attacker, its optimiser state and the last loss value.
    """
    if steps < 1:
        raise InvalidArgument("steps must be at least 1")
    with torch.no_grad():
        target = _defense_probs(d, aug_batch)
    value = float("nan")
    for _ in range(steps):
        loss, grads = value_and_gradients(
            f_s, lambda m: losses.attacker_loss(forward(m, aug_batch), target, update="clone")
        )
        value = float(loss)
        f_s, opt_state = sgd_step(f_s, clip_grad_norm(grads, grad_clip), opt_state)
    return f_s, opt_state, value


def defense_losses(d: Model, f_t: Model, f_s: Model, clean_x, clean_y, aug_x,
                   config: DefenseConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(L_defense, L_attacker, L_total) with gradient flowing only into ``d``."""
    with torch.no_grad():
        teacher_logits = forward(f_t, clean_x)
        clone_logits = forward(f_s, aug_x)
    l_def = losses.kd_loss(forward(d, clean_x), teacher_logits, clean_y, config.alpha, config.temperature)
    l_att = losses.attacker_loss(clone_logits, _defense_probs(d, aug_x), update="defense")
    return l_def, l_att, losses.total_defense_loss(l_def, l_att, config.lam)


def defense_outer_step(d: Model, f_t: Model, f_s: Model, clean_batch, aug_batch,
                       config: DefenseConfig, opt_state: OptimizerState
                       ) -> tuple[Model, OptimizerState, StepRecord]:
    clean_x, clean_y = clean_batch
    parts = {}

    def objective(m: Model) -> torch.Tensor:
        l_def, l_att, total = defense_losses(m, f_t, f_s, clean_x, clean_y, aug_batch, config)
        parts["def"], parts["att"] = float(l_def.detach()), float(l_att.detach())
        return total

    total, grads = value_and_gradients(d, objective)
    d, opt_state = sgd_step(d, clip_grad_norm(grads, config.grad_clip), opt_state)
    record = StepRecord(parts["def"], parts["att"], parts["def"] - config.lam * parts["att"])
    return d, opt_state, record


def steps_per_epoch(n: int, batch: int) -> int:
    return math.ceil(n / batch)


def _batches(n_clean: int, n_aug: int, batch: int, clean_rng, aug_rng):
    """Pair a fresh clean permutation with an independently shuffled augmented stream."""
    clean_perm = clean_rng.permutation(n_clean)
    aug_perm = aug_rng.permutation(n_aug)
    for k, start in enumerate(range(0, n_clean, batch)):
        idx = clean_perm[start:start + batch]
        a0 = (k * batch) % n_aug
        aug_idx = np.take(aug_perm, np.arange(a0, a0 + len(idx)), mode="wrap")
        yield idx, aug_idx


def train_defense(train_set: Dataset, f_t: Model, defense_spec: ArchitectureSpec,
                  attacker_spec: ArchitectureSpec, config: DefenseConfig,
                  ) -> tuple[Model, TrainingLog]:
    """Train one defense model with the alternating procedure; deterministic in ``config.seed``."""
    if len(train_set) == 0:
        raise InvalidArgument("training set is empty")
    for spec in (defense_spec, attacker_spec):
        if spec.input_shape != train_set.input_shape or spec.output_dim != f_t.spec.output_dim:
            raise ShapeMismatch(f"{spec.short_name} does not fit the data/target shapes")
    if f_t.spec.input_shape != train_set.input_shape:
        raise ShapeMismatch("target model does not fit the training data")

    streams = SeedStreams(config.seed)
    d = build(defense_spec, streams.seed("defense_init"), dtype=f_t.dtype)
    f_s = build(attacker_spec, streams.seed("attacker_init"), dtype=f_t.dtype)
    aug_seed = streams.seed("augment")
    x_aug = augment_dataset(train_set, config.augmentation, aug_seed, config.aug_copies).inputs

    n = len(train_set)
    spe = steps_per_epoch(n, config.batch)
    d_opt = init_optimizer(d, config.eta_d, config.epochs * spe, config.momentum, config.min_lr)
    s_opt = init_optimizer(f_s, config.eta_s, config.epochs * spe * max(config.a_iter, 1),
                           config.momentum, config.min_lr)
    clean_rng, aug_rng = streams.rng("clean_order"), streams.rng("aug_order")
    x_all = torch.tensor(np.array(train_set.inputs)).to(f_t.dtype)
    y_all = torch.tensor(np.array(train_set.labels))
    x_aug_t = torch.tensor(np.array(x_aug)).to(f_t.dtype)

    log = TrainingLog()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if config.refresh_augmentation and epoch > 0:
            x_aug_t = torch.tensor(np.array(
                augment_dataset(train_set, config.augmentation, aug_seed + epoch, config.aug_copies).inputs
            )).to(f_t.dtype)
        records = []
        for idx, aug_idx in _batches(n, len(x_aug_t), config.batch, clean_rng, aug_rng):
            idx_t, aug_t = torch.as_tensor(idx), torch.as_tensor(aug_idx)
            xb, yb, xa = x_all[idx_t], y_all[idx_t], x_aug_t[aug_t]
            if config.a_iter > 0:
                f_s, s_opt, _ = update_attacker(f_s, d, xa, s_opt, config.a_iter, config.grad_clip)
            if config.fresh_attacker_batch:
                fresh = torch.as_tensor(aug_rng.integers(0, len(x_aug_t), size=len(aug_idx)))
                xa = x_aug_t[fresh]
            d, d_opt, rec = defense_outer_step(d, f_t, f_s, (xb, yb), xa, config, d_opt)
            records.append(rec)
        log.steps.extend(records)
        with torch.no_grad():
            acc = losses.accuracy(forward(d, x_all), y_all)
        log.epochs.append(EpochRecord(
            epoch=epoch + 1,
            defense_loss=float(np.mean([r.defense_loss for r in records])),
            attacker_loss=float(np.mean([r.attacker_loss for r in records])),
            total_loss=float(np.mean([r.total_loss for r in records])),
            clean_accuracy=acc,
            seconds=time.perf_counter() - t0,
        ))
    log.attacker = f_s
    return d, log


def reseeded(config: DefenseConfig, seed: int) -> DefenseConfig:
    return replace(config, seed=int(seed))
