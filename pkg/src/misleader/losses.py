"""Scalar objectives: tempered softmax, CE, KL/JS, distillation, attacker and
combined defense losses, and the normalized agreement utility.

All functions accept tensors or array-likes and return tensors so they can sit
inside a gradient computation; call ``float()`` for plain values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import BoundViolation, InvalidArgument

Q_CLAMP = 1e-12
SIMPLEX_TOL = 1e-6
LN2 = math.log(2.0)


@dataclass(frozen=True)
class LossBound:
    """Uniform upper bound K on a loss."""

    K: float

    def __post_init__(self):
        if not (math.isfinite(self.K) and self.K > 0):
            raise InvalidArgument("loss bound must be finite and positive")


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, np.ndarray) and not x.flags.writeable:
        x = np.array(x)
    return torch.as_tensor(x, dtype=dtype)


def _t(x) -> torch.Tensor:
    x = _as_tensor(x)
    return x if torch.is_floating_point(x) else x.to(torch.float64)


def softmax_t(logits, T: float = 1.0) -> torch.Tensor:
    """Softmax of ``logits / T`` along the last axis."""
    if not T > 0:
        raise InvalidArgument("temperature must be positive")
    z = _t(logits) / T
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def log_softmax_t(logits, T: float = 1.0) -> torch.Tensor:
    if not T > 0:
        raise InvalidArgument("temperature must be positive")
    z = _t(logits) / T
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    return z - torch.log(torch.exp(z).sum(dim=-1, keepdim=True))


def cross_entropy(logits, labels) -> torch.Tensor:
    logits = _t(logits)
    labels = _as_tensor(labels, dtype=torch.long)
    k = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise InvalidArgument(f"labels must lie in [0, {k})")
    logp = log_softmax_t(logits, 1.0)
    return -logp.gather(-1, labels.reshape(-1, 1)).mean()


def _check_simplex(p: torch.Tensor, what: str) -> None:
    with torch.no_grad():
        if (p < -SIMPLEX_TOL).any() or ((p.sum(dim=-1) - 1.0).abs() > SIMPLEX_TOL).any():
            raise InvalidArgument(f"{what} is not on the probability simplex")


def kl_div(p, q) -> torch.Tensor:
    """KL(p || q) along the last axis; 0 log 0 = 0, q clamped at 1e-12."""
    p, q = _t(p), _t(q)
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    return (torch.xlogy(p, p) - p * torch.log(q.clamp_min(Q_CLAMP))).sum(dim=-1)


def js_div(p, q) -> torch.Tensor:
    p, q = _t(p), _t(q)
    m = 0.5 * (p + q)
    return 0.5 * kl_div(p, m) + 0.5 * kl_div(q, m)


def kd_loss(student_logits, teacher_logits, labels, alpha: float, T: float) -> torch.Tensor:
    """(1 - a) CE(student, y) + a T^2 KL(softmax(teacher/T) || softmax(student/T)).

    The teacher side is detached.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgument("alpha must lie in [0, 1]")
    student_logits = _t(student_logits)
    teacher_logits = _t(teacher_logits).detach()
    teacher = softmax_t(teacher_logits, T)
    ce = cross_entropy(student_logits, labels)
    # both log terms from the same routine so equal logits cancel exactly
    log_p = log_softmax_t(teacher_logits, T)
    log_q = log_softmax_t(student_logits, T)
    kl = (teacher * (log_p - log_q)).sum(dim=-1).mean()
    return (1.0 - alpha) * ce + alpha * T * T * kl


def attacker_loss(clone_logits, defense_probs, update: str = "clone") -> torch.Tensor:
    """Batch mean of KL(defense || softmax(clone)).

    ``update`` names the party receiving gradient; the other side is detached.
    """
    clone_logits, defense_probs = _t(clone_logits), _t(defense_probs)
    if update == "clone":
        defense_probs = defense_probs.detach()
    elif update == "defense":
        clone_logits = clone_logits.detach()
    elif update != "both":
        raise InvalidArgument(f"update must be 'clone', 'defense' or 'both', not {update!r}")
    return kl_div(defense_probs, softmax_t(clone_logits, 1.0)).mean()


def total_defense_loss(defense_loss, attacker_loss_value, lam: float):
    return defense_loss - lam * attacker_loss_value


def renormalize(p) -> torch.Tensor:
    """Float64 copy of probability rows rescaled to sum to exactly one (up to rounding)."""
    p = _t(p).double()
    _check_simplex(p, "probabilities")
    p = p.clamp_min(0.0)
    return p / p.sum(dim=-1, keepdim=True)


def pairwise_loss(p, q, loss: str = "js") -> torch.Tensor:
    if loss == "js":
        return js_div(p, q)
    if loss == "kl":
        return kl_div(p, q)
    raise InvalidArgument(f"unknown utility loss {loss!r}")


def agreement_utility(outputs_1, outputs_2, bound: LossBound | None = None, loss: str = "js") -> float:
    """1 - mean(loss)/K for two stacks of probability rows."""
    if bound is None:
        if loss != "js":
            raise InvalidArgument("a KL-based utility needs an explicit LossBound")
        bound = LossBound(LN2)
    with torch.no_grad():
        per_sample = pairwise_loss(renormalize(outputs_1), renormalize(outputs_2), loss)
    worst = float(per_sample.max()) if per_sample.numel() else 0.0
    if worst > bound.K + 1e-9:
        raise BoundViolation(f"sample loss {worst} exceeds bound {bound.K}")
    u = 1.0 - float(per_sample.mean()) / bound.K
    return min(1.0, max(0.0, u))


def accuracy(scores, labels) -> float:
    """Fraction of rows whose argmax equals the label (ties go to the lowest index)."""
    scores = _as_tensor(scores)
    labels = _as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        return 0.0
    return float((scores.argmax(dim=-1) == labels).double().mean())
