import numpy as np
import pytest

from ript import autodiff as ad
from ript.autodiff import Tensor


def _fd_check(fn, arrays, rng, eps=1e-6, tol=1e-4, samples=40):
    """Compare analytic gradients of sum(fn(*ts) * C) with central differences."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    C = rng.normal(size=out.shape)
    ad.backward(ad.sum(ad.mul(out, C)))

    def value(vals):
        with ad.no_grad():
            return float(np.sum(fn(*[Tensor(v) for v in vals]).data * C))

    for k, t in enumerate(ts):
        assert t.grad is not None and t.grad.shape == t.shape
        flat = rng.choice(t.data.size, size=min(samples, t.data.size), replace=False)
        fd, an = [], []
        for j in flat:
            idx = np.unravel_index(j, t.shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k][idx] += eps
            minus[k][idx] -= eps
            fd.append((value(plus) - value(minus)) / (2 * eps))
            an.append(t.grad[idx])
        fd, an = np.array(fd), np.array(an)
        denom = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12)
        assert np.linalg.norm(fd - an) / denom < tol, (k, fd, an)


@pytest.fixture
def g(rng):
    return rng


def test_fd_add_sub_mul_broadcast(g):
    x, b = g.normal(size=(4, 3, 5)), g.normal(size=(5,))
    _fd_check(ad.add, [x, b], g)
    _fd_check(ad.sub, [x, g.normal(size=(4, 1, 5))], g)
    _fd_check(ad.mul, [x, g.normal(size=(3, 1))], g)


def test_fd_matmul(g):
    _fd_check(ad.matmul, [g.normal(size=(4, 6)), g.normal(size=(6, 3))], g)
    # leading axes folded against a 2-D weight
    _fd_check(ad.matmul, [g.normal(size=(2, 4, 6)), g.normal(size=(6, 3))], g)
    # batched on both sides
    _fd_check(ad.matmul, [g.normal(size=(2, 4, 6)), g.normal(size=(2, 6, 3))], g)


def test_fd_activations(g):
    x = g.normal(size=(5, 7))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the relu kink
    _fd_check(ad.relu, [x], g)
    _fd_check(ad.gelu, [x], g)
    _fd_check(ad.exp, [x], g)
    _fd_check(ad.log, [g.uniform(0.5, 2.0, (5, 7))], g)
    _fd_check(lambda t: ad.softmax(t, axis=-1), [x], g)
    _fd_check(lambda t: ad.softmax(t, axis=0), [x], g)


def test_fd_reductions_and_shape_ops(g):
    x = g.normal(size=(3, 4, 5))
    _fd_check(lambda t: ad.sum(t, axis=1), [x], g)
    _fd_check(lambda t: ad.mean(t, axis=(0, 2), keepdims=True), [x], g)
    _fd_check(lambda t: ad.mean(t), [x], g)
    _fd_check(lambda t: ad.l2_normalize(t), [x], g)
    _fd_check(lambda t: ad.reshape(t, (12, 5)), [x], g)
    _fd_check(lambda a, b: ad.concat([a, b], axis=1), [x, g.normal(size=(3, 2, 5))], g)
    _fd_check(lambda t: ad.gather(t, np.array([2, 0, 2])), [x], g)
    _fd_check(lambda t: ad.gather(t, (np.array([0, 1]), np.array([3, 3]))), [x], g)


def test_fd_batchnorm(g):
    x = g.normal(size=(6, 4, 3)) * 2 + 1
    gamma, beta = g.normal(size=3), g.normal(size=3)

    def train(t, ga, be):
        return ad.batchnorm(t, ga, be, np.zeros(3), np.ones(3), training=True)

    rm, rv = g.normal(size=3), g.uniform(0.5, 2, 3)

    def evaluate(t, ga, be):
        return ad.batchnorm(t, ga, be, rm.copy(), rv.copy(), training=False)

    _fd_check(train, [x, gamma, beta], g)
    _fd_check(evaluate, [x, gamma, beta], g)


def test_fd_cross_entropy(g):
    q = ad.softmax(Tensor(g.normal(size=(4, 6)))).data
    _fd_check(lambda p: ad.cross_entropy(q, ad.softmax(p)), [g.normal(size=(4, 6))], g)


def test_softmax_cross_entropy_gradient_closed_form(rng):
    # d/dz H(q, softmax(z)) = softmax(z) - q for a normalized target
    z = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    q = ad.softmax(Tensor(rng.normal(size=(3, 5)))).data
    ad.backward(ad.sum(ad.cross_entropy(q, ad.softmax(z))))
    np.testing.assert_allclose(z.grad, ad.softmax(Tensor(z.data)).data - q, atol=1e-12)


def test_batchnorm_running_stats():
    x = np.arange(8.0).reshape(4, 2)
    rm, rv = np.zeros(2), np.ones(2)
    ad.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, momentum=0.5)
    np.testing.assert_allclose(rm, 0.5 * x.mean(axis=0))
    np.testing.assert_allclose(rv, 0.5 + 0.5 * x.var(axis=0, ddof=1))
    with pytest.raises(ValueError):
        ad.batchnorm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)


def test_l2_normalize_zero_row():
    x = Tensor(np.array([[3.0, 4.0], [0.0, 0.0]]), requires_grad=True)
    y = ad.l2_normalize(x)
    np.testing.assert_allclose(y.data, [[0.6, 0.8], [0, 0]])
    ad.backward(ad.sum(y))
    assert np.all(np.isfinite(x.grad))
    np.testing.assert_array_equal(x.grad[1], 0)


def test_log_floor_blocks_gradient():
    x = Tensor(np.array([1e-20, 1.0]), requires_grad=True)
    y = ad.log(x, floor=-30.0)
    np.testing.assert_allclose(y.data, [-30.0, 0.0])
    ad.backward(ad.sum(y))
    np.testing.assert_allclose(x.grad, [0.0, 1.0])


def test_gather_repeats_accumulate():
    x = Tensor(np.arange(3.0), requires_grad=True)
    ad.backward(ad.sum(ad.gather(x, np.array([1, 1, 2]))))
    np.testing.assert_array_equal(x.grad, [0, 2, 1])
    with pytest.raises(ValueError):
        ad.gather(x, np.array([5]))


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x
    ad.backward(ad.sum(y))
    np.testing.assert_allclose(x.grad, [5.0])


def test_shape_errors():
    a = Tensor(np.ones((2, 3)))
    with pytest.raises(ValueError):
        ad.matmul(a, Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        ad.add(a, Tensor(np.ones((4,))))
    with pytest.raises(ValueError):
        ad.concat([a, Tensor(np.ones((2, 4)))], axis=0)
    with pytest.raises(ValueError):
        ad.reshape(a, (5,))
    with pytest.raises(TypeError):
        a / a


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(x * 2)
    with pytest.raises(ValueError):
        ad.backward(ad.sum(Tensor(np.ones(3))))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sum(x * 3)
        assert not ad.is_grad_enabled()
    assert ad.is_grad_enabled()
    assert not y.requires_grad and y._backward is None
    with pytest.raises(ValueError):
        ad.backward(y)


def test_graph_released_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.sum(ad.exp(x))
    ad.backward(y)
    assert y._parents == () and y._backward is None


def test_adam_first_step_by_hand():
    p, gr = np.array([1.0, -2.0]), np.array([0.5, -4.0])
    new, st = ad.adam_step(p, gr, {}, lr=0.1)
    # bias-corrected moments equal g and g^2 on the first step, so each entry moves by lr * sign(g)
    m_hat, v_hat = gr, gr**2
    np.testing.assert_allclose(new, p - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8))
    np.testing.assert_allclose(new, [0.9, -1.9], atol=1e-7)
    assert st["t"] == 1
    np.testing.assert_allclose(st["m"], 0.1 * gr)
    np.testing.assert_allclose(st["v"], 0.001 * gr**2)


def test_adam_optimizer_state_round_trip(rng):
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    opt = ad.Adam({"w": w})
    for _ in range(3):
        opt.zero_grad()
        ad.backward(ad.sum(ad.mul(w, w)))
        opt.step(0.01)
    w2 = Tensor(w.data.copy(), requires_grad=True)
    opt2 = ad.Adam({"w": w2})
    opt2.load_state_arrays(opt.state_arrays())
    for o, t in ((opt, w), (opt2, w2)):
        o.zero_grad()
        ad.backward(ad.sum(ad.mul(t, t)))
        o.step(0.01)
    np.testing.assert_array_equal(w.data, w2.data)


def test_float32_dtype_preserved():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((3, 2), dtype=np.float32), requires_grad=True)
    y = ad.sum(ad.gelu(x @ w))
    assert y.dtype == np.float32
    ad.backward(y)
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32
