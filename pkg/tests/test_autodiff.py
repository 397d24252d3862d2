import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linkforge import autodiff as ad
from linkforge import nn
from linkforge.autodiff import Tensor
from linkforge.checks import GRAD_TOLERANCE, MODEL_CASES, OP_CASES, gradient_suite
from linkforge.optim import ParamStore


@pytest.mark.parametrize("case", sorted(OP_CASES) + sorted(MODEL_CASES))
def test_gradients_match_finite_differences(case):
    build = {**OP_CASES, **MODEL_CASES}[case]
    err = gradient_suite(instances=5, seed=11, cases={case: build})[case]
    assert err <= GRAD_TOLERANCE


def test_sigmoid_value_and_slope():
    x = Tensor(np.array(0.0), requires_grad=True)
    y = ad.sigmoid(x)
    y.backward()
    assert float(y.data) == 0.5 and float(x.grad) == 0.25


def test_product_with_ones():
    x = Tensor(np.arange(4.0), requires_grad=True)
    ad.sum_(ad.mul(x, Tensor(np.ones(4)))).backward()
    assert np.array_equal(x.grad, np.ones(4))


def test_random_mlp_gradcheck():
    store = ParamStore(np.float64, seed=3)
    nn.init_mlp(store, "m", [10, 8, 8, 1])
    rng = np.random.default_rng(0)
    for name in store:
        store[name].data += 0.1 * rng.normal(size=store[name].shape)
    x = Tensor(rng.normal(size=(6, 10)), requires_grad=True)
    err = ad.gradcheck(lambda: ad.sum_(nn.mlp(store, "m", x)), [x] + [store[n] for n in store])
    assert err <= 1e-4


def test_shape_and_nonfinite_errors():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError, match="log"):
        ad.log(Tensor(np.array([0.0])))
    with pytest.raises(ValueError):
        ad.dropout(Tensor(np.zeros(3)), 1.0, np.random.default_rng(0), True)


def test_bce_examples():
    assert float(ad.bce_loss(np.array([0.0]), np.array([0.0])).data) == pytest.approx(np.log(2), abs=1e-12)
    assert float(ad.bce_loss(np.array([20.0]), np.array([-20.0])).data) < 1e-8
    with pytest.raises(ValueError):
        ad.bce_loss(np.array([]), None)


def test_bce_matches_naive():
    rng = np.random.default_rng(5)
    pos, neg = rng.normal(size=100), rng.normal(size=100)
    sig = lambda x: 1 / (1 + np.exp(-x))
    naive = -(np.log(sig(pos)).sum() + np.log(1 - sig(neg)).sum()) / 200
    assert float(ad.bce_loss(pos, neg).data) == pytest.approx(naive, abs=1e-10)


def test_dropout_identity_when_eval():
    x = Tensor(np.ones((3, 3)))
    assert ad.dropout(x, 0.5, None, train=False) is x


def test_gumbel_uniform_weights_noise_free():
    p, _ = ad.gumbel_softmax(Tensor(np.full(4, 2.5)), 0.7, noise=False)
    assert np.allclose(p.data, 0.25)


def test_gumbel_saturated_hard():
    w = Tensor(np.array([5.0, 0.0]), requires_grad=True)
    p, idx = ad.gumbel_softmax(w, 0.01, hard=True, noise=False)
    assert idx == 0 and p.data.tolist() == [1.0, 0.0]
    soft, _ = ad.gumbel_softmax(w, 0.01, noise=False)
    assert np.allclose(soft.data, [1.0, 0.0], atol=1e-6)


def test_gumbel_noise_free_is_softmax():
    rng = np.random.default_rng(0)
    for _ in range(50):
        w = rng.normal(size=5) * 3
        tau = float(rng.uniform(0.05, 3))
        p, _ = ad.gumbel_softmax(Tensor(w), tau, noise=False)
        e = np.exp((w - w.max()) / tau)
        assert np.max(np.abs(p.data - e / e.sum())) <= 1e-9


def test_gumbel_selection_frequency():
    rng = np.random.default_rng(42)
    _, idx = ad.gumbel_softmax(Tensor(np.zeros((20_000, 2))), 1.0, rng, hard=True)
    freq = np.mean(idx == 0)
    assert abs(freq - 0.5) <= 3 * np.sqrt(0.25 / 20_000)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), tau=st.floats(0.01, 10), k=st.integers(1, 8))
def test_gumbel_is_probability_vector(seed, tau, k):
    rng = np.random.default_rng(seed)
    p, _ = ad.gumbel_softmax(Tensor(rng.normal(size=(3, k)) * 4), tau, rng)
    assert np.all(p.data >= 0)
    assert np.allclose(p.data.sum(axis=-1), 1.0, atol=1e-6)


def test_gumbel_bad_temperature():
    with pytest.raises(ValueError):
        ad.gumbel_softmax(Tensor(np.zeros(2)), 0.0, noise=False)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_straight_through_gradient_equals_soft(seed):
    rng = np.random.default_rng(seed)
    w0 = rng.normal(size=(4, 3))
    c = rng.normal(size=(4, 3))
    grads = []
    for hard in (False, True):
        w = Tensor(w0.copy(), requires_grad=True)
        p, _ = ad.gumbel_softmax(w, 0.5, np.random.default_rng(seed), hard=hard)
        ad.sum_(p * Tensor(c)).backward()
        grads.append(w.grad)
    assert np.array_equal(grads[0], grads[1])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad.tolist() == [5.0]
