"""Numerical checks of the generalization and distribution-shift bounds.

* empirical Rademacher complexity of a finite function table (Monte Carlo or
  exact enumeration of sign vectors),
* exact 1-Wasserstein distance between equal-size empirical measures
  (assignment problem),
* empirical/reference risks of the defense objective, their minimax gap over
  finite model grids, and the uniform-convergence bound on that gap,
* sub-additivity of Rademacher complexity over the defense/attacker split,
* the Lipschitz/Wasserstein bound on the clone's loss shift between the data
  distribution and a query distribution.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import BoundViolation, InvalidArgument, SizeMismatch, TooLargeForExact, Unsupported
from .losses import LN2, pairwise_loss, renormalize, softmax_t
from .models import Model, forward, lipschitz_upper_bound

EXACT_MAX_N = 20
HOLDS_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class FunctionTable:
    """``values[g, i]``: candidate function g evaluated at sample point i."""

    values: np.ndarray
    descriptions: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("function table entries must be finite")
        object.__setattr__(self, "values", v)
        if not self.descriptions:
            object.__setattr__(self, "descriptions", tuple(f"g{i}" for i in range(v.shape[0])))
        if len(self.descriptions) != v.shape[0]:
            raise InvalidArgument("one description per row required")

    @property
    def n(self) -> int:
        return self.values.shape[1]


@dataclass
class BoundCheck:
    name: str
    lhs: float
    rhs: float
    holds: bool
    details: dict = field(default_factory=dict)


@dataclass
class TheoryReport:
    rademacher: float | None = None
    rademacher_stderr: float | None = None
    w1: float | None = None
    lipschitz_ft: float | None = None
    lipschitz_fs: float | None = None
    rho: float | None = None
    B: float | None = None
    delta: float | None = None
    n: int | None = None
    checks: list[BoundCheck] = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return all(c.holds for c in self.checks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["holds"] = self.holds
        return d


def _holds(lhs: float, rhs: float) -> bool:
    return bool(lhs <= rhs + HOLDS_TOL)


# -- Rademacher complexity -------------------------------------------------------


def rademacher_estimate(table: FunctionTable | np.ndarray, draws: int = 1000, seed: int = 0,
                        exact: bool = False) -> tuple[float, float]:
    """E_sigma sup_g (1/n) sum_i sigma_i g(x_i); returns (estimate, standard error)."""
    values = table.values if isinstance(table, FunctionTable) else FunctionTable(table).values
    n = values.shape[1]
    if exact:
        if n > EXACT_MAX_N:
            raise TooLargeForExact(f"exact enumeration needs n <= {EXACT_MAX_N}, got {n}")
        sups = np.empty(2 ** n)
        # chunk the 2^n sign vectors to bound memory
        chunk = 1 << min(n, 14)
        for lo in range(0, 2 ** n, chunk):
            ids = np.arange(lo, min(lo + chunk, 2 ** n))
            bits = (ids[:, None] >> np.arange(n - 1, -1, -1)) & 1
            sigma = 2.0 * bits - 1.0
            sups[lo:lo + len(ids)] = (sigma @ values.T / n).max(axis=1)
        return float(sups.mean()), 0.0
    if draws < 1:
        raise InvalidArgument("draws must be at least 1")
    rng = np.random.default_rng(seed)
    sigma = rng.choice((-1.0, 1.0), size=(draws, n))
    sups = (sigma @ values.T / n).max(axis=1)
    stderr = float(sups.std(ddof=1) / math.sqrt(draws)) if draws > 1 else float("inf")
    return float(sups.mean()), stderr


# -- Wasserstein -----------------------------------------------------------------


def _as_points(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    return P.reshape(P.shape[0], -1)


def wasserstein1(P, Q) -> float:
    """Exact W1 between two uniform empirical measures of equal size (Euclidean ground cost)."""
    P, Q = _as_points(P), _as_points(Q)
    if P.shape[0] != Q.shape[0]:
        raise SizeMismatch(f"|P| = {P.shape[0]} but |Q| = {Q.shape[0]}")
    if P.shape[1] != Q.shape[1]:
        raise SizeMismatch("point dimensions differ")
    if P.shape[0] == 0:
        return 0.0
    _, cols = linear_sum_assignment(cdist(P, Q))
    return _matching_cost(P, Q, cols)


def wasserstein1_bruteforce(P, Q) -> float:
    """Minimum over all n! matchings; only for tiny n."""
    P, Q = _as_points(P), _as_points(Q)
    if P.shape[0] != Q.shape[0]:
        raise SizeMismatch("sizes differ")
    if P.shape[0] == 0:
        return 0.0
    return min(_matching_cost(P, Q, perm) for perm in itertools.permutations(range(P.shape[0])))


def _matching_cost(P: np.ndarray, Q: np.ndarray, cols) -> float:
    """Mean matched distance. In 1-D the sum is done in exact rationals so tied optimal matchings agree."""
    cols = np.asarray(cols)
    n = P.shape[0]
    if P.shape[1] == 1:
        total = sum(abs(Fraction(float(a)) - Fraction(float(b))) for a, b in zip(P[:, 0], Q[cols, 0]))
        return float(total / n)
    return math.fsum(np.linalg.norm(P - Q[cols], axis=1)) / n


# -- risks -------------------------------------------------------------------------


def _probs(model, x) -> torch.Tensor:
    from .ensemble import predict

    with torch.no_grad():
        return renormalize(predict(model, x))


def risk_terms(f_t, f_s, d, x, loss: str = "js", B: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample L(f_t, d) and L(f_s, d)."""
    pt, ps, pd = _probs(f_t, x), _probs(f_s, x), _probs(d, x)
    a = pairwise_loss(pt, pd, loss).numpy()
    b = pairwise_loss(ps, pd, loss).numpy()
    if B is not None:
        worst = max(a.max(initial=0.0), b.max(initial=0.0))
        if worst > B + 1e-9:
            raise BoundViolation(f"sample loss {worst} exceeds declared bound {B}")
    return a, b


def emp_risk(f_t, f_s, d, x, lam: float, loss: str = "js", B: float | None = None) -> float:
    """(1/n) sum_i [L(f_t(x_i), d(x_i)) - lam L(f_s(x_i), d(x_i))]."""
    if lam < 0:
        raise InvalidArgument("lam must be non-negative")
    a, b = risk_terms(f_t, f_s, d, x, loss, B)
    return float(np.mean(a - lam * b))


def pop_risk(f_t, f_s, d, reference_x, lam: float, loss: str = "js", B: float | None = None) -> float:
    """Same mean on a large held-out reference sample standing in for the expectation."""
    return emp_risk(f_t, f_s, d, reference_x, lam, loss, B)


def _risk_matrix(f_t, defenses, attackers, x, lam, loss, B):
    """risk[i, j] for defense i and attacker j, plus the per-sample tables."""
    rows, rows_d, rows_s = [], [], []
    for d in defenses:
        for f_s in attackers:
            a, b = risk_terms(f_t, f_s, d, x, loss, B)
            rows.append(a - lam * b)
            rows_s.append(b)
        rows_d.append(a)
    per = np.array(rows)
    return per.mean(axis=1).reshape(len(defenses), len(attackers)), per, np.array(rows_d), np.array(rows_s)


def minimax_gap_check(defense_grid: Sequence, attacker_grid: Sequence, f_t, train_x, reference_x,
                      lam: float, loss: str = "js", B: float = LN2, delta: float = 0.05,
                      draws: int = 2000, seed: int = 0, exact: bool = False) -> TheoryReport:
    """|R_pop - R_emp| against 2B * Rad_n + B sqrt(ln(1/delta) / 2n) over finite grids.

    Rademacher complexity is taken of the loss-combination class scaled by 1/B,
    i.e. of the unit-range class the bound is stated for.
    """
    if not defense_grid or not attacker_grid:
        raise InvalidArgument("model grids must be non-empty")
    if not 0 < delta < 1:
        raise InvalidArgument("delta must lie in (0, 1)")
    n = int(np.asarray(train_x).shape[0])
    emp, per_sample, _, _ = _risk_matrix(f_t, defense_grid, attacker_grid, train_x, lam, loss, B)
    pop, _, _, _ = _risk_matrix(f_t, defense_grid, attacker_grid, reference_x, lam, loss, B)
    r_emp = float(emp.max(axis=1).min())
    r_pop = float(pop.max(axis=1).min())
    table = FunctionTable(per_sample / B)
    rad, se = rademacher_estimate(table, draws, seed, exact=exact)
    # the complexity is non-negative (Jensen); a Monte-Carlo mean can dip below zero
    rad = max(rad, 0.0)
    lhs = abs(r_pop - r_emp)
    uniform_dev = float(np.abs(pop - emp).max())
    conf = B * math.sqrt(math.log(1.0 / delta) / (2.0 * n))
    rhs = 2.0 * B * rad + conf
    check = BoundCheck("minimax_gap", lhs, rhs, _holds(lhs, rhs), {
        "r_emp": r_emp, "r_pop": r_pop, "sup_deviation": uniform_dev,
        "sup_deviation_holds": _holds(uniform_dev, rhs), "confidence_term": conf,
        "grid": [len(defense_grid), len(attacker_grid)],
    })
    return TheoryReport(rademacher=rad, rademacher_stderr=se, B=B, delta=delta, n=n, checks=[check])


def subadditivity_check(table_D, table_Fs, table_joint, lam: float, draws: int = 2000, seed: int = 0,
                        exact: bool = True) -> tuple[float, float, bool]:
    """Rad(joint) <= Rad(D) + lam Rad(Fs). In Monte-Carlo mode all three share the sign draws."""
    tD, tS, tJ = (t if isinstance(t, FunctionTable) else FunctionTable(t) for t in (table_D, table_Fs, table_joint))
    if not tD.n == tS.n == tJ.n:
        raise SizeMismatch("tables must be evaluated on the same sample points")
    lhs, se_j = rademacher_estimate(tJ, draws, seed, exact)
    rd, se_d = rademacher_estimate(tD, draws, seed, exact)
    rs, se_s = rademacher_estimate(tS, draws, seed, exact)
    rhs = rd + lam * rs
    if exact:
        return lhs, rhs, _holds(lhs, rhs)
    pooled = math.sqrt(se_j ** 2 + se_d ** 2 + (lam * se_s) ** 2)
    return lhs, rhs, bool(lhs <= rhs + 3.0 * pooled)


def joint_table(table_D: np.ndarray, table_Fs: np.ndarray, lam: float) -> np.ndarray:
    """Rows (row of L_D) - lam * (row of L_Fs) over all pairs."""
    D = np.atleast_2d(np.asarray(table_D, dtype=np.float64))
    S = np.atleast_2d(np.asarray(table_Fs, dtype=np.float64))
    return (D[:, None, :] - lam * S[None, :, :]).reshape(-1, D.shape[1])


# -- distribution shift --------------------------------------------------------------


def df_gap_check(f_t: Model, f_s: Model, P_sample, Pg_sample, loss_kind: str = "l2_probs",
                 power_iters: int = 100) -> TheoryReport:
    """|E_P L - E_Pg L| <= 2 rho L W1(P, Pg), all in the Euclidean norm.

    L(u, v) = ||softmax(u) - softmax(v)||_2 is jointly 1-Lipschitz in the
    probabilities and softmax is 1-Lipschitz, so rho = 1 and L is the larger of
    the two spectral-norm certificates.
    """
    if loss_kind != "l2_probs":
        raise Unsupported(f"loss kind {loss_kind!r} has no certified constant")
    P = np.asarray(P_sample)
    Pg = np.asarray(Pg_sample)
    if P.shape[0] != Pg.shape[0]:
        raise SizeMismatch(f"|P| = {P.shape[0]} but |Pg| = {Pg.shape[0]}")

    def mean_loss(x) -> float:
        with torch.no_grad():
            pt = softmax_t(forward(f_t.astype(torch.float64), x), 1.0)
            ps = softmax_t(forward(f_s.astype(torch.float64), x), 1.0)
        return float((pt - ps).norm(dim=1).mean())

    lhs = abs(mean_loss(P) - mean_loss(Pg))
    lip_t = lipschitz_upper_bound(f_t, power_iters)
    lip_s = lipschitz_upper_bound(f_s, power_iters)
    lip = max(lip_t, lip_s)
    rho = 1.0
    w1 = wasserstein1(P, Pg)
    rhs = 2.0 * rho * lip * w1
    check = BoundCheck("distribution_shift", lhs, rhs, _holds(lhs, rhs), {"n": int(P.shape[0])})
    return TheoryReport(w1=w1, lipschitz_ft=lip_t, lipschitz_fs=lip_s, rho=rho, n=int(P.shape[0]),
                        checks=[check])
