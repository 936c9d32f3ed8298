"""Heterogeneous ensembles of independently trained defense models, served by soft voting."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .data import Dataset
from .defense import DefenseConfig, TrainingLog, train_defense
from .errors import InvalidArgument, ShapeMismatch
from .losses import softmax_t
from .models import ArchitectureSpec, Model, as_batch, forward


@dataclass(frozen=True, eq=False)
class Ensemble:
    members: tuple[Model, ...]
    member_configs: tuple[DefenseConfig, ...] = ()
    allow_homogeneous: bool = False

    def __post_init__(self):
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "member_configs", tuple(self.member_configs))
        if not members:
            raise InvalidArgument("an ensemble needs at least one member")
        first = members[0].spec
        for m in members[1:]:
            if m.spec.input_shape != first.input_shape or m.spec.output_dim != first.output_dim:
                raise ShapeMismatch("ensemble members must share input shape and output size")
        ids = [m.spec.identifier for m in members]
        if not self.allow_homogeneous and len(set(ids)) != len(ids):
            raise InvalidArgument("ensemble members must have distinct architectures")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.members[0].spec.input_shape

    @property
    def output_dim(self) -> int:
        return self.members[0].spec.output_dim

    @property
    def dtype(self) -> torch.dtype:
        return self.members[0].dtype


def train_ensemble(
    train_set: Dataset,
    f_t: Model,
    specs: Sequence[tuple[ArchitectureSpec, ArchitectureSpec]],
    base_config: DefenseConfig,
    overrides: Sequence[dict] | None = None,
    workers: int = 1,
    allow_homogeneous: bool = False,
) -> tuple[Ensemble, list[TrainingLog]]:
    """Member ``i`` is trained with seed ``base_config.seed + i`` and optional per-member overrides."""
    if not specs:
        raise InvalidArgument("need at least one (defense, attacker) spec pair")
    overrides = list(overrides or [{}] * len(specs))
    if len(overrides) != len(specs):
        raise InvalidArgument("one override dict per member is required")
    configs = [
        replace(base_config, **{**ov, "seed": ov.get("seed", base_config.seed + i)})
        for i, ov in enumerate(overrides)
    ]

    def run(i: int):
        d_spec, a_spec = specs[i]
        return train_defense(train_set, f_t, d_spec, a_spec, configs[i])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(specs))))
    else:
        results = [run(i) for i in range(len(specs))]
    ens = Ensemble(tuple(m for m, _ in results), tuple(configs), allow_homogeneous)
    return ens, [log for _, log in results]


def predict(model_or_ensemble, batch) -> torch.Tensor:
    """Soft-voted probabilities: the mean over members of each member's softmax."""
    if isinstance(model_or_ensemble, Model):
        return softmax_t(forward(model_or_ensemble, batch), 1.0)
    members = model_or_ensemble.members
    x = as_batch(members[0], batch)
    total = None
    for m in members:
        p = softmax_t(forward(m, x), 1.0)
        total = p if total is None else total + p
    return total / len(members)


def predict_label(model_or_ensemble, batch) -> np.ndarray:
    """Argmax of :func:`predict`; ties go to the smallest class index."""
    with torch.no_grad():
        return predict(model_or_ensemble, batch).argmax(dim=1).numpy()
