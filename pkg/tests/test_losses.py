import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from misleader import losses
from misleader.errors import BoundViolation, InvalidArgument
from misleader.models import ArchitectureSpec, build, forward, gradients

LN2 = math.log(2.0)


def _simplex(rng, b, k):
    p = rng.random((b, k)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)


from oracles import js_ref, kl_ref, softmax_ref


# -- softmax ---------------------------------------------------------------------------


def test_softmax_examples():
    assert torch.equal(losses.softmax_t(torch.tensor([0.0, 0.0]), 3.0), torch.tensor([0.5, 0.5]))
    p = losses.softmax_t(torch.tensor([math.log(2.0), 0.0], dtype=torch.float64))
    torch.testing.assert_close(p, torch.tensor([2 / 3, 1 / 3], dtype=torch.float64), rtol=0, atol=1e-15)
    p = losses.softmax_t(torch.tensor([10.0, 0.0], dtype=torch.float64), 100.0)
    assert torch.all((p - 0.5).abs() < 0.03)


def test_softmax_rejects_non_positive_temperature():
    for T in (0.0, -1.0):
        with pytest.raises(InvalidArgument):
            losses.softmax_t(torch.zeros(2), T)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100), st.floats(0.1, 10))
def test_softmax_shift_invariance_and_normalisation(z, c, T):
    a = losses.softmax_t(torch.as_tensor(z), T)
    b = losses.softmax_t(torch.as_tensor(z + c), T)
    assert float((a - b).abs().max()) < 1e-12
    assert float((a.sum(dim=1) - 1).abs().max()) < 1e-9


# -- cross entropy ---------------------------------------------------------------------------


def test_cross_entropy_examples():
    assert float(losses.cross_entropy(torch.tensor([[1e6, 0.0]], dtype=torch.float64), [0])) < 1e-6
    assert math.isclose(float(losses.cross_entropy(torch.zeros(1, 2, dtype=torch.float64), [0])), LN2,
                        abs_tol=1e-15)
    row = torch.tensor([[0.3, -1.0, 2.0]], dtype=torch.float64)
    one = losses.cross_entropy(row, [2])
    two = losses.cross_entropy(row.repeat(2, 1), [2, 2])
    assert math.isclose(float(one), float(two), abs_tol=1e-15)


def test_cross_entropy_label_range():
    with pytest.raises(InvalidArgument):
        losses.cross_entropy(torch.zeros(1, 2), [2])
    with pytest.raises(InvalidArgument):
        losses.cross_entropy(torch.zeros(1, 2), [-1])


# -- KL / JS ---------------------------------------------------------------------------


def test_kl_examples():
    p = torch.tensor([0.3, 0.7], dtype=torch.float64)
    assert float(losses.kl_div(p, p)) == 0.0
    assert math.isclose(float(losses.kl_div(torch.tensor([1.0, 0.0]).double(), torch.tensor([0.5, 0.5]).double())),
                        LN2, abs_tol=1e-15)
    v = float(losses.kl_div(torch.tensor([0.7, 0.3], dtype=torch.float64), torch.tensor([0.4, 0.6], dtype=torch.float64)))
    assert math.isclose(v, 0.7 * math.log(0.7 / 0.4) + 0.3 * math.log(0.3 / 0.6), abs_tol=1e-15)
    # the rounded hand value 0.18384 agrees to four decimals; the exact sum is 0.1837869
    assert abs(v - 0.18384) < 1e-4


def test_kl_clamps_zero_q():
    v = float(losses.kl_div(torch.tensor([0.5, 0.5]).double(), torch.tensor([1.0, 0.0]).double()))
    assert math.isclose(v, 0.5 * math.log(0.5 / 1.0) + 0.5 * math.log(0.5 / 1e-12), rel_tol=1e-12)


def test_kl_rejects_off_simplex():
    with pytest.raises(InvalidArgument):
        losses.kl_div(torch.tensor([0.6, 0.6]), torch.tensor([0.5, 0.5]))
    with pytest.raises(InvalidArgument):
        losses.kl_div(torch.tensor([0.5, 0.5]), torch.tensor([1.1, -0.1]))


def test_js_examples():
    p = torch.tensor([0.2, 0.8], dtype=torch.float64)
    assert float(losses.js_div(p, p)) == 0.0
    assert math.isclose(float(losses.js_div(torch.tensor([1.0, 0.0]).double(), torch.tensor([0.0, 1.0]).double())),
                        LN2, abs_tol=1e-15)


@given(st.integers(0, 2**31), st.integers(2, 8))
def test_divergence_properties(seed, k):
    rng = np.random.default_rng(seed)
    p, q = _simplex(rng, 6, k), _simplex(rng, 6, k)
    kl = losses.kl_div(p, q).numpy()
    js_pq = losses.js_div(p, q).numpy()
    js_qp = losses.js_div(q, p).numpy()
    assert np.all(kl >= 0) and np.all(js_pq >= 0)
    assert np.all(js_pq <= LN2 + 1e-12)
    np.testing.assert_allclose(js_pq, js_qp, rtol=0, atol=1e-12)
    for i in range(6):
        assert math.isclose(kl[i], kl_ref(p[i], q[i]), abs_tol=1e-12)
        assert math.isclose(js_pq[i], js_ref(p[i], q[i]), abs_tol=1e-12)
    np.testing.assert_allclose(losses.kl_div(p, p).numpy(), 0.0, atol=1e-15)


# -- distillation / attacker / total ---------------------------------------------------------


def test_kd_alpha_zero_is_cross_entropy():
    rng = np.random.default_rng(0)
    s, t = torch.as_tensor(rng.standard_normal((5, 3))), torch.as_tensor(rng.standard_normal((5, 3)))
    y = rng.integers(0, 3, 5)
    assert float(losses.kd_loss(s, t, y, 0.0, 3.0)) == float(losses.cross_entropy(s, y))


@pytest.mark.parametrize("T", [0.5, 1.0, 4.0, 20.0])
def test_kd_alpha_one_equal_logits_is_zero(T):
    z = torch.as_tensor(np.random.default_rng(1).standard_normal((4, 5)))
    assert float(losses.kd_loss(z, z.clone(), [0, 1, 2, 3], 1.0, T)) == 0.0


def test_kd_worked_example():
    # teacher (2,0), student (0,0), label 0, alpha 0.5, T 2; KL(teacher || student) as in the objective
    pt = softmax_ref([2.0, 0.0], 2.0)
    expected = 0.5 * LN2 + 0.5 * 4.0 * kl_ref(pt, [0.5, 0.5])
    got = float(losses.kd_loss(torch.tensor([[0.0, 0.0]]).double(), torch.tensor([[2.0, 0.0]]).double(), [0], 0.5, 2.0))
    assert math.isclose(got, expected, abs_tol=1e-12)
    assert math.isclose(got, 0.5684617336234273, abs_tol=1e-12)


def test_kd_teacher_receives_no_gradient():
    s = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    t = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    losses.kd_loss(s, t, [0, 1, 2], 0.7, 3.0).backward()
    assert t.grad is None
    assert s.grad is not None


@given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0.5, 8))
def test_kd_matches_direct_summation(seed, alpha, T):
    rng = np.random.default_rng(seed)
    s, t = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    y = rng.integers(0, 3, 4)
    ce = np.mean([-math.log(softmax_ref(s[i])[y[i]]) for i in range(4)])
    kl = np.mean([kl_ref(softmax_ref(t[i], T), softmax_ref(s[i], T)) for i in range(4)])
    got = float(losses.kd_loss(torch.as_tensor(s), torch.as_tensor(t), y, alpha, T))
    assert math.isclose(got, (1 - alpha) * ce + alpha * T * T * kl, abs_tol=1e-9)


def test_kd_rejects_alpha():
    with pytest.raises(InvalidArgument):
        losses.kd_loss(torch.zeros(1, 2), torch.zeros(1, 2), [0], 1.5, 1.0)


def test_attacker_loss_examples():
    p = torch.tensor([[0.2, 0.3, 0.5]], dtype=torch.float64)
    assert abs(float(losses.attacker_loss(torch.log(p), p))) < 1e-15
    v = float(losses.attacker_loss(torch.zeros(1, 2, dtype=torch.float64), torch.tensor([[1.0, 0.0]]).double()))
    assert math.isclose(v, LN2, abs_tol=1e-15)


def test_attacker_loss_is_rowwise_mean():
    rng = np.random.default_rng(3)
    z, p = rng.standard_normal((7, 4)), _simplex(rng, 7, 4)
    ref = np.mean([kl_ref(p[i], softmax_ref(z[i])) for i in range(7)])
    assert math.isclose(float(losses.attacker_loss(torch.as_tensor(z), p)), ref, abs_tol=1e-12)


def test_attacker_loss_gradient_blocking():
    z = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
    logits_d = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
    losses.attacker_loss(z, torch.softmax(logits_d, 1), update="clone").backward()
    assert z.grad is not None and logits_d.grad is None
    z.grad = None
    losses.attacker_loss(z, torch.softmax(logits_d, 1), update="defense").backward()
    assert z.grad is None and logits_d.grad is not None
    with pytest.raises(InvalidArgument):
        losses.attacker_loss(z, torch.softmax(logits_d, 1), update="teacher")


def test_total_defense_loss():
    assert math.isclose(losses.total_defense_loss(0.5, 0.2, 1.0), 0.3)
    assert losses.total_defense_loss(0.7, 0.0, 0.5) == 0.7
    assert math.isclose(losses.total_defense_loss(1.0, 10.0, 0.01), 0.9)


# -- utility ---------------------------------------------------------------------------


def test_utility_examples():
    p = _simplex(np.random.default_rng(0), 5, 3)
    assert losses.agreement_utility(p, p) == 1.0
    a = np.array([[1.0, 0.0]] * 3)
    b = np.array([[0.0, 1.0]] * 3)
    assert losses.agreement_utility(a, b) == 0.0
    u = losses.agreement_utility(np.array([[0.7, 0.3]]), np.array([[0.4, 0.6]]))
    assert math.isclose(u, 1 - js_ref([0.7, 0.3], [0.4, 0.6]) / LN2, abs_tol=1e-12)


def test_utility_kl_needs_bound_and_checks_it():
    p = np.array([[0.9, 0.1]])
    q = np.array([[0.1, 0.9]])
    with pytest.raises(InvalidArgument):
        losses.agreement_utility(p, q, loss="kl")
    with pytest.raises(BoundViolation):
        losses.agreement_utility(p, q, losses.LossBound(0.5), loss="kl")
    u = losses.agreement_utility(p, q, losses.LossBound(5.0), loss="kl")
    assert math.isclose(u, 1 - kl_ref(p[0], q[0]) / 5.0, abs_tol=1e-12)


def test_utility_tolerates_float32_rounding():
    # float32 one-hot-ish rows can push JS a hair above ln 2 without renormalisation
    z = torch.tensor([[30.0, -30.0, 0.0], [-30.0, 30.0, 0.0]], dtype=torch.float32)
    p = torch.softmax(z, 1)
    assert losses.agreement_utility(p, p.flip(0)) >= 0.0


@given(st.integers(0, 2**31), st.integers(2, 6))
def test_utility_in_unit_interval(seed, k):
    rng = np.random.default_rng(seed)
    u = losses.agreement_utility(_simplex(rng, 8, k), _simplex(rng, 8, k))
    assert 0.0 <= u <= 1.0


def test_loss_bound_validation():
    for K in (0.0, -1.0, math.inf, math.nan):
        with pytest.raises(InvalidArgument):
            losses.LossBound(K)


def test_accuracy_ties_go_to_lowest_index():
    assert losses.accuracy(np.array([[0.5, 0.5], [0.2, 0.8]]), [0, 1]) == 1.0


# -- per-loss gradient checks through a model -------------------------------------------------


LOSS_FNS = {
    "cross_entropy": lambda z, y, p: losses.cross_entropy(z, y),
    "kd": lambda z, y, p: losses.kd_loss(z, torch.log(p), y, 0.4, 3.0),
    "attacker": lambda z, y, p: losses.attacker_loss(z, p),
    "kl": lambda z, y, p: losses.kl_div(p, losses.softmax_t(z, 2.0)).mean(),
    "js": lambda z, y, p: losses.js_div(losses.softmax_t(z, 1.0), p).mean(),
}


@pytest.mark.parametrize("name", sorted(LOSS_FNS))
def test_loss_gradients_match_finite_differences(name):
    rng = np.random.default_rng(5)
    m = build(ArchitectureSpec.mlp(3, [4], 3, "tanh"), 1, dtype=torch.float64)
    x = torch.as_tensor(rng.standard_normal((5, 3)))
    y = torch.as_tensor(rng.integers(0, 3, 5))
    p = torch.as_tensor(_simplex(rng, 5, 3))
    fn = lambda mm: LOSS_FNS[name](forward(mm, x), y, p)
    g = gradients(m, fn)
    h = 1e-5
    for key, theta in m.params.items():
        flat = theta.reshape(-1)
        for j in range(flat.numel()):
            up, dn = flat.clone(), flat.clone()
            up[j] += h
            dn[j] -= h
            fd = (float(fn(m.with_params({**m.params, key: up.reshape(theta.shape)})))
                  - float(fn(m.with_params({**m.params, key: dn.reshape(theta.shape)})))) / (2 * h)
            an = float(g[key].reshape(-1)[j])
            assert abs(an - fd) <= 1e-4 * max(1.0, abs(fd))
