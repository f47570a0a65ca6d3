import numpy as np
import pytest

from minisvs import autodiff as ad


def test_relu_subgradient_convention():
    x = ad.Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    y = x.relu().sum()
    y.backward()
    assert x.grad.tolist() == [0.0, 1.0]


def test_linear_identity_passthrough():
    x = ad.Tensor(np.eye(3)[0:2], requires_grad=True)
    w = ad.Tensor(np.eye(3))
    out = x @ w + ad.Tensor(np.zeros(3))
    assert np.array_equal(out.data, x.data)


def test_broadcast_add_backward():
    x = ad.Tensor(np.ones((4, 3)), requires_grad=True)
    b = ad.Tensor(np.ones(3), requires_grad=True)
    (x + b).sum().backward()
    assert np.array_equal(x.grad, np.ones((4, 3)))
    assert np.array_equal(b.grad, np.full(3, 4.0))


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_nan_raises_at_the_op():
    with pytest.raises(ad.NumericalError, match="log"):
        ad.Tensor(np.array([-1.0])).log()
    with np.errstate(all="ignore"), pytest.raises(ad.NumericalError, match="div"):
        ad.Tensor(np.array([1.0])) / ad.Tensor(np.array([0.0]))


def test_numpy_left_operands_defer_to_tensor():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    out = np.full((2, 2), 3.0) - x
    assert isinstance(out, ad.Tensor)
    out.sum().backward()
    assert np.array_equal(x.grad, -np.ones((2, 2)))


def test_straight_through_passes_gradient():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    st = ad.straight_through(x, np.array([5.0, 7.0]))
    assert np.array_equal(st.data, [5.0, 7.0])
    (st * st).sum().backward()
    assert np.allclose(x.grad, [10.0, 14.0])


def test_embedding_rejects_out_of_range():
    table = ad.Tensor(np.zeros((4, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.embedding(table, np.array([4]))


def test_log_softmax_normalizes():
    x = ad.Tensor(np.random.default_rng(0).standard_normal((5, 7)))
    out = ad.log_softmax(x, axis=-1)
    assert np.allclose(np.exp(out.data).sum(axis=-1), 1.0)


@pytest.mark.parametrize("seed", range(3))
def test_per_op_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    w = ad.Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    cw = ad.Tensor(rng.standard_normal((3, 3, 3)) * 0.3, requires_grad=True)
    cb = ad.Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    table = ad.Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    ids = rng.integers(0, 6, size=4)
    probe = rng.standard_normal((4, 3))
    probe_wide = rng.standard_normal((4, 5))

    cases = {
        "add_mul": lambda: ((x * 2.0 + 1.5) * x).mean(),
        "div_pow": lambda: ((x * x + 1.0) ** 0.5 / (x.abs() + 2.0)).sum(),
        "matmul": lambda: ((x @ w + b) * probe).sum(),
        "exp_log": lambda: ((x * 0.3).exp() + 1.0).log().mean(),
        "tanh_sigmoid": lambda: (x.tanh() * x.sigmoid()).sum(),
        "relu_abs": lambda: (x.relu() + x.abs()).mean(),
        "conv1d3": lambda: (ad.conv1d3(x @ w, cw, cb) * probe).sum(),
        "embedding": lambda: (ad.embedding(table, ids) * probe_wide).sum(),
        "log_softmax": lambda: (ad.log_softmax(x @ w, axis=-1) * probe).mean(),
        "sum_axis": lambda: ((x * x).sum(axis=-1) ** 2.0).mean(),
        "getitem": lambda: (x[np.array([0, 2, 2])] * 1.7).sum(),
        "reshape": lambda: (x.reshape(2, 10) ** 2.0).mean(axis=-1).sum(),
    }
    tensors = [x, w, b, cw, cb, table]
    for name, f in cases.items():
        err = ad.gradient_check(f, tensors, n_points=6, rng=np.random.default_rng(seed + 10))
        assert err < 1e-4, f"{name}: rel err {err:.2e}"


def test_gradient_accumulates_over_shared_subexpression():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = x * 3.0
    (y + y * x).sum().backward()  # d/dx (3x + 3x^2) = 3 + 6x = 15
    assert np.allclose(x.grad, [15.0])


def test_detach_cuts_the_graph():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    (x.detach() * x).sum().backward()
    assert np.allclose(x.grad, [2.0])
