import numpy as np
import pytest

from fewseg3d import autodiff as ad


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar-valued f at ndarray x."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def check_against_fd(build, x0, tol=1e-7):
    """build(tensor) -> scalar Tensor; compares backward() grads to central differences."""
    t = ad.parameter(x0)
    loss = build(t)
    loss.backward()
    num = numeric_grad(lambda x: build(ad.Tensor(x.copy())).item(), x0)
    assert t.grad is not None
    np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


rng = np.random.default_rng(42)


@pytest.mark.parametrize(
    "build",
    [
        lambda t: (t * t).sum(),
        lambda t: (t * 3.0 + 1.5).mean(),
        lambda t: ad.exp(t * 0.3).sum(),
        lambda t: ad.log(t * t + 1.0).sum(),
        lambda t: ad.sqrt(t * t + 0.5).sum(),
        lambda t: ad.leaky_relu(t, 0.2).sum(),
        lambda t: ad.relu(t * 2.0).mean(),
        lambda t: ad.softmax(t, axis=-1).reshape(-1).sum(),
        lambda t: (ad.softmax(t, axis=-1) * ad.log(ad.softmax(t, axis=-1))).sum(),
    ],
)
def test_elementwise_ops_match_fd(build):
    check_against_fd(build, rng.standard_normal((4, 5)))


def test_matmul_2d_grad():
    b = rng.standard_normal((5, 3))
    check_against_fd(lambda t: (ad.matmul(t, b) * 0.7).sum(), rng.standard_normal((4, 5)))
    a = rng.standard_normal((4, 5))
    check_against_fd(lambda t: ad.matmul(a, t).mean(), rng.standard_normal((5, 3)))


def test_matmul_batched_grad():
    b = rng.standard_normal((2, 5, 3))
    check_against_fd(lambda t: (ad.matmul(t, b)).sum(), rng.standard_normal((2, 4, 5)))
    # broadcast over the batch axis
    a = rng.standard_normal((2, 4, 5))
    check_against_fd(lambda t: (ad.matmul(a, t)).sum(), rng.standard_normal((5, 3)))


def test_transpose_reshape_concat_grad():
    check_against_fd(lambda t: (ad.transpose(t) * rng2).sum(), rng.standard_normal((3, 4)))
    check_against_fd(lambda t: ad.reshape(t, (2, 6)).sum(), rng.standard_normal((3, 4)))

    def cat(t):
        other = ad.Tensor(np.ones((3, 4)))
        return (ad.concat([t, other, t], axis=0) * 0.5).sum()

    check_against_fd(cat, rng.standard_normal((3, 4)))


rng2 = np.random.default_rng(7).standard_normal((4, 3))


def test_gather_grad_accumulates_duplicates():
    idx = np.array([0, 2, 2, 1])
    w = np.random.default_rng(0).standard_normal((4, 3))
    check_against_fd(lambda t: (ad.gather(t, idx) * w).sum(), rng.standard_normal((3, 3)))


def test_max_routes_gradient_to_first_argmax():
    x = np.array([[1.0, 3.0, 3.0], [2.0, 0.0, 5.0]])
    t = ad.parameter(x)
    ad.tmax(t, axis=1).sum().backward()
    np.testing.assert_array_equal(t.grad, [[0, 1, 0], [0, 0, 1]])


def test_max_grad_matches_fd_off_ties():
    check_against_fd(lambda t: ad.tmax(t, axis=1).sum(), rng.standard_normal((6, 4)))


def test_layer_norm_grad():
    g0 = rng.standard_normal(5)
    b0 = rng.standard_normal(5)
    check_against_fd(lambda t: ad.layer_norm(t, ad.Tensor(g0), ad.Tensor(b0)).sum(), rng.standard_normal((3, 5)))
    x0 = rng.standard_normal((3, 5))
    check_against_fd(lambda t: ad.layer_norm(ad.Tensor(x0), t, ad.Tensor(b0)).sum(), g0.copy())


def test_softmax_rows_sum_to_one():
    x = rng.standard_normal((8, 6)) * 50
    s = ad.softmax(ad.Tensor(x), axis=-1)
    np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.isfinite(s.data).all()


def test_shared_subgraph_accumulates():
    t = ad.parameter(np.array([2.0, -1.0]))
    y = t * t
    loss = (y + y).sum()
    loss.backward()
    np.testing.assert_allclose(t.grad, 4 * t.data)


def test_no_grad_builds_constants():
    t = ad.parameter(np.ones((2, 2)))
    with ad.no_grad():
        out = (t @ t + 1.0).sum()
    assert out._backward is None and not out.requires_grad


def test_broadcast_add_bias_grad():
    b0 = rng.standard_normal(3)
    check_against_fd(lambda t: (ad.add(ad.Tensor(rng2), t) * 2.0).sum(), b0.copy())


def test_adam_reduces_quadratic():
    p = ad.parameter(np.array([5.0, -3.0]))
    opt = ad.Adam({"p": p}, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        loss = (p * p).sum()
        loss.backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-2


def test_adam_zero_steps_keeps_init():
    init = np.array([1.0, 2.0])
    p = ad.parameter(init.copy())
    ad.Adam({"p": p}, lr=0.1)
    np.testing.assert_array_equal(p.data, init)
