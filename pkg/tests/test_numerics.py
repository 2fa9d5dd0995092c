import numpy as np
import pytest
import scipy.special
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jointflow.errors import ContractError, NumericalError, ShapeError
from jointflow.numerics import check_finite, grad_check, init_weights, layer_norm, matmul, softmax

finite = st.floats(-5, 5, allow_nan=False, width=32)


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_matmul_identity_and_hand_case():
    m = torch.randn(3, 3)
    assert torch.equal(matmul(torch.eye(3), m), m)
    out = matmul(torch.tensor([[1.0, 2.0], [3.0, 4.0]]), torch.tensor([[1.0], [1.0]]))
    assert torch.equal(out, torch.tensor([[3.0], [7.0]]))


def test_matmul_matches_triple_loop():
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(4, 5, generator=g), torch.randn(5, 6, generator=g)
    ref = naive_matmul(a.double().numpy(), b.double().numpy())
    assert np.abs(matmul(a, b).numpy() - ref).max() < 1e-6


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(torch.ones(2, 3), torch.ones(2, 3))
    with pytest.raises(ShapeError):
        matmul(torch.ones(2, 2, 3), torch.ones(3, 3, 1))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_associative(n, k, m, p, seed):
    g = torch.Generator().manual_seed(seed)
    a, b, c = (torch.randn(s, generator=g) for s in ((n, k), (k, m), (m, p)))
    assert torch.allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-5)


def test_softmax_cases():
    assert torch.allclose(softmax(torch.zeros(3)), torch.full((3,), 1 / 3))
    out = softmax(torch.tensor([1000.0, 0.0]))
    assert torch.isfinite(out).all() and out[0] == 1.0 and out[1] < 1e-30


def test_softmax_matches_high_precision_reference():
    x = torch.randn(8, generator=torch.Generator().manual_seed(3))
    ref = scipy.special.softmax(x.double().numpy())
    assert np.abs(softmax(x).numpy() - ref).max() < 1e-6


@given(arrays(np.float32, (3, 7), elements=finite), st.sampled_from([0, 1, -1]))
def test_softmax_rows_sum_to_one(x, axis):
    out = softmax(torch.from_numpy(x), axis=axis)
    assert torch.allclose(out.sum(axis), torch.ones(1), atol=1e-6)
    assert ((out > 0) & (out <= 1)).all()


def test_layer_norm_cases():
    assert torch.equal(layer_norm(torch.full((5,), 3.0), torch.ones(5), torch.zeros(5)), torch.zeros(5))
    out = layer_norm(torch.tensor([1.0, 3.0]), torch.ones(2), torch.zeros(2))
    assert torch.allclose(out, torch.tensor([-1.0, 1.0]), atol=1e-4)


def _spread(a):
    return min(a.var(axis=0).min(), a.var(axis=1).min()) >= 1.0


@given(arrays(np.float32, (4, 6), elements=st.floats(-20, 20, width=32)).filter(_spread), st.sampled_from([0, 1]))
def test_layer_norm_statistics(x, axis):
    # the 1e-5 epsilon lowers the variance by eps/var, below 1e-5 once var >= 1
    out = layer_norm(torch.from_numpy(x).double(), None, None, axis=axis)
    assert out.mean(axis).abs().max() < 1e-5
    assert (out.var(axis, unbiased=False) - 1).abs().max() < 1e-5


def test_layer_norm_non_last_axis_matches_numpy():
    x = torch.randn(3, 5, 2)
    gain, bias = torch.randn(5), torch.randn(5)
    xn = x.double().numpy()
    mu, var = xn.mean(1, keepdims=True), xn.var(1, keepdims=True)
    ref = (xn - mu) / np.sqrt(var + 1e-5) * gain.numpy()[None, :, None] + bias.numpy()[None, :, None]
    assert np.abs(layer_norm(x, gain, bias, axis=1).numpy() - ref).max() < 1e-5


def test_grad_check_quadratic_and_constant():
    x = torch.randn(10)
    assert grad_check(lambda v: (v**2).sum(), x) < 1e-5
    assert grad_check(lambda v: v.sum() * 0 + 3.0, x) == 0.0


def test_grad_check_contract():
    with pytest.raises(ContractError):
        grad_check(lambda v: v * 2, torch.randn(3))
    with pytest.raises(ContractError):
        grad_check(lambda v: v.sum(), torch.randn(3), eps=1.0)


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x**2).sum()

        @staticmethod
        def backward(ctx, g):
            return torch.ones(3, dtype=torch.float64) * g

    assert grad_check(Bad.apply, torch.tensor([1.0, 2.0, 3.0])) > 0.5


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: softmax(x.reshape(4, 5), axis=1)[:, 0].sum(),
        lambda x: (layer_norm(x.reshape(4, 5), None, None) * torch.arange(5.0, dtype=x.dtype)).sum(),
        lambda x: matmul(x.reshape(4, 5), x.reshape(5, 4)).tanh().sum(),
        lambda x: torch.nn.functional.gelu(x, approximate="tanh").square().sum(),
    ],
    ids=["softmax", "layer_norm", "matmul", "gelu"],
)
def test_primitive_gradients_on_random_inputs(fn):
    g = torch.Generator().manual_seed(7)
    for _ in range(20):
        assert grad_check(fn, torch.randn(20, generator=g), eps=1e-5) < 1e-3


def test_check_finite():
    t = torch.ones(3)
    assert check_finite(t) is t
    with pytest.raises(NumericalError) as err:
        check_finite(torch.tensor([1.0, float("nan")]), "x", step=7)
    assert err.value.step == 7


def test_init_weights():
    torch.manual_seed(0)
    m = torch.nn.Sequential(torch.nn.Linear(200, 300), torch.nn.Embedding(50, 64))
    init_weights(m)
    assert abs(m[0].weight.std().item() - 0.02) < 1e-3
    assert torch.equal(m[0].bias, torch.zeros(300))
    assert abs(m[1].weight.std().item() - 0.02) < 2e-3
