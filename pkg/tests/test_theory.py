import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from misleader.errors import BoundViolation, InvalidArgument, SizeMismatch, TooLargeForExact, Unsupported
from misleader.losses import LN2, pairwise_loss
from misleader.models import ArchitectureSpec, build, forward
from misleader.theory import (
    FunctionTable,
    df_gap_check,
    emp_risk,
    joint_table,
    minimax_gap_check,
    pop_risk,
    rademacher_estimate,
    subadditivity_check,
    wasserstein1,
    wasserstein1_bruteforce,
)

from oracles import rademacher_ref
from theory_instances import df_instance, gap_instance

SPEC = ArchitectureSpec.mlp(2, [8], 3)


# -- Rademacher ----------------------------------------------------------------------


def test_rademacher_analytic_values():
    assert rademacher_estimate(np.array([[0.3, -1.2, 5.0]]), exact=True) == (0.0, 0.0)
    assert rademacher_estimate(np.array([[1.0, 1.0], [-1.0, -1.0]]), exact=True)[0] == 0.5
    assert rademacher_estimate(np.array([[1.0], [-1.0]]), exact=True)[0] == 1.0


def test_rademacher_exact_limit():
    with pytest.raises(TooLargeForExact):
        rademacher_estimate(np.zeros((2, 21)), exact=True)
    with pytest.raises(InvalidArgument):
        rademacher_estimate(np.zeros((2, 3)), draws=0)


@given(st.integers(0, 2**16), st.integers(1, 4), st.integers(1, 8))
def test_rademacher_exact_matches_enumeration(seed, m, n):
    v = np.random.default_rng(seed).normal(size=(m, n))
    assert rademacher_estimate(v, exact=True)[0] == pytest.approx(rademacher_ref(v), abs=1e-12)


@given(st.integers(0, 2**16), st.integers(1, 4), st.integers(1, 10))
def test_rademacher_exact_invariances(seed, m, n):
    v = np.random.default_rng(seed).normal(size=(m, n))
    base = rademacher_estimate(v, exact=True)[0]
    assert rademacher_estimate(np.vstack([v, v[:1]]), exact=True)[0] == pytest.approx(base, abs=1e-12)
    assert rademacher_estimate(v[:, ::-1], exact=True)[0] == pytest.approx(base, abs=1e-12)


@settings(max_examples=20)
@given(st.integers(0, 2**16), st.integers(2, 12))
def test_rademacher_monte_carlo_within_three_se(seed, n):
    v = np.random.default_rng(seed).uniform(-1, 1, size=(4, n))
    exact, _ = rademacher_estimate(v, exact=True)
    est, se = rademacher_estimate(v, draws=4000, seed=seed)
    assert abs(est - exact) <= 3 * se + 1e-12


def test_function_table_checks():
    with pytest.raises(InvalidArgument):
        FunctionTable(np.array([[np.nan, 1.0]]))
    with pytest.raises(InvalidArgument):
        FunctionTable(np.zeros((2, 3)), ("only one",))
    assert FunctionTable(np.zeros((2, 3))).n == 3


# -- sub-additivity --------------------------------------------------------------------


def test_subadditivity_lambda_zero_equality():
    tD = np.random.default_rng(0).normal(size=(3, 6))
    lhs, rhs, holds = subadditivity_check(tD, np.ones((2, 6)), tD, 0.0)
    assert lhs == rhs and holds


@given(st.integers(0, 2**16), st.integers(1, 12), st.floats(0.0, 3.0))
def test_subadditivity_exact_always_holds(seed, n, lam):
    rng = np.random.default_rng(seed)
    tD, tS = rng.normal(size=(3, n)), rng.normal(size=(2, n))
    assert subadditivity_check(tD, tS, joint_table(tD, tS, lam), lam)[2]


@settings(max_examples=15)
@given(st.integers(0, 2**16), st.integers(2, 12))
def test_subadditivity_monte_carlo(seed, n):
    rng = np.random.default_rng(seed)
    tD, tS = rng.normal(size=(3, n)), rng.normal(size=(3, n))
    assert subadditivity_check(tD, tS, joint_table(tD, tS, 0.5), 0.5, draws=2000, seed=seed, exact=False)[2]


def test_joint_table_layout():
    tD, tS = np.array([[1.0, 2.0]]), np.array([[1.0, 0.0], [0.0, 1.0]])
    assert joint_table(tD, tS, 2.0).tolist() == [[-1.0, 2.0], [1.0, 0.0]]
    with pytest.raises(SizeMismatch):
        subadditivity_check(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 2)), 1.0)


# -- Wasserstein --------------------------------------------------------------------------


def test_wasserstein_examples():
    P = np.random.default_rng(0).normal(size=(5, 3))
    assert wasserstein1(P, P[::-1]) == 0.0
    assert wasserstein1([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0
    assert wasserstein1([0.0, 2.0], [1.0, 3.0]) == 1.0
    with pytest.raises(SizeMismatch):
        wasserstein1(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(SizeMismatch):
        wasserstein1(np.zeros((2, 2)), np.zeros((2, 3)))


@given(st.integers(0, 2**16), st.integers(1, 7), st.integers(1, 3))
def test_wasserstein_equals_bruteforce(seed, n, dim):
    rng = np.random.default_rng(seed)
    P, Q = rng.normal(size=(n, dim)), rng.normal(size=(n, dim))
    assert wasserstein1(P, Q) == wasserstein1_bruteforce(P, Q)


@given(st.integers(0, 2**16), st.integers(1, 6))
def test_wasserstein_metric_axioms(seed, n):
    rng = np.random.default_rng(seed)
    P, Q, R = (rng.normal(size=(n, 2)) for _ in range(3))
    assert wasserstein1(P, Q) == pytest.approx(wasserstein1(Q, P), abs=1e-12)
    assert wasserstein1(P, P) == 0.0 and wasserstein1(P, Q) > 0.0
    assert wasserstein1(P, R) <= wasserstein1(P, Q) + wasserstein1(Q, R) + 1e-12


# -- risks -------------------------------------------------------------------------------------


def _models():
    return build(SPEC, 0), build(SPEC, 1), build(SPEC, 2)


def test_emp_risk_limits_and_duplication():
    f_t, f_s, d = _models()
    x = torch.randn(40, 2)
    pt, pd = (torch.softmax(forward(m, x).double(), 1) for m in (f_t, d))
    base = float(pairwise_loss(pt, pd, "js").mean())
    assert emp_risk(f_t, f_s, d, x, 1e-12) == pytest.approx(base, abs=1e-9)
    assert emp_risk(f_t, d, d, x, 0.7, loss="kl") == pytest.approx(emp_risk(f_t, f_s, d, x, 0.0, loss="kl"), abs=1e-12)
    assert emp_risk(f_t, f_s, d, torch.cat([x, x]), 0.3) == pytest.approx(emp_risk(f_t, f_s, d, x, 0.3), abs=1e-12)
    assert pop_risk(f_t, f_s, d, x, 0.3) == emp_risk(f_t, f_s, d, x, 0.3)
    with pytest.raises(InvalidArgument):
        emp_risk(f_t, f_s, d, x, -1.0)


def test_declared_bound_enforced():
    f_t, f_s, d = _models()
    x = 50 * torch.randn(40, 2)
    with pytest.raises(BoundViolation):
        emp_risk(f_t, f_s, d, x, 0.5, loss="kl", B=1e-6)


def test_minimax_gap_single_pair_structure():
    f_t, f_s, d = _models()
    rng = np.random.default_rng(0)
    tr, ref = rng.normal(size=(50, 2)), rng.normal(size=(500, 2))
    rep = minimax_gap_check([d], [f_s], f_t, tr, ref, 0.5)
    c = rep.checks[0]
    assert c.lhs == pytest.approx(abs(pop_risk(f_t, f_s, d, ref, 0.5) - emp_risk(f_t, f_s, d, tr, 0.5)), abs=1e-12)
    assert c.rhs >= LN2 * math.sqrt(math.log(1 / 0.05) / 100) > 0
    same = minimax_gap_check([d], [f_s], f_t, tr, tr, 0.5)
    assert same.checks[0].lhs == 0.0 and same.holds
    assert set(rep.to_dict()) >= {"rademacher", "checks", "holds", "B", "delta", "n"}


def test_minimax_gap_argument_checks():
    f_t, f_s, d = _models()
    x = np.zeros((3, 2))
    with pytest.raises(InvalidArgument):
        minimax_gap_check([], [f_s], f_t, x, x, 0.5)
    with pytest.raises(InvalidArgument):
        minimax_gap_check([d], [f_s], f_t, x, x, 0.5, delta=1.0)


@pytest.mark.parametrize("seed", range(5))
def test_minimax_gap_toy_instances_hold(seed):
    rep = gap_instance(seed)
    assert rep.holds, rep.to_dict()


# -- distribution shift ---------------------------------------------------------------------


def test_df_gap_identical_samples():
    f_t, f_s, _ = _models()
    P = np.random.default_rng(0).normal(size=(16, 2))
    rep = df_gap_check(f_t, f_s, P, P)
    assert rep.checks[0].lhs == 0.0 and rep.checks[0].rhs == 0.0 and rep.holds


def test_df_gap_constant_models():
    zero = lambda m: m.with_params({k: torch.zeros_like(v) for k, v in m.params.items()})
    rng = np.random.default_rng(1)
    rep = df_gap_check(zero(build(SPEC, 0)), zero(build(SPEC, 1)), rng.normal(size=(8, 2)), rng.normal(size=(8, 2)))
    assert rep.checks[0].lhs == 0.0 and rep.holds


def test_df_gap_errors():
    f_t, f_s, _ = _models()
    with pytest.raises(SizeMismatch):
        df_gap_check(f_t, f_s, np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(Unsupported):
        df_gap_check(f_t, f_s, np.zeros((2, 2)), np.zeros((2, 2)), loss_kind="js")


@pytest.mark.parametrize("seed", range(10))
def test_df_gap_random_instances_hold(seed):
    rep = df_instance(seed)
    assert rep.holds and rep.w1 > 0
