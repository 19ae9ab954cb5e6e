# test_autodiff.py

import numpy as np

from services import autodiff as ad
from services.autodiff import ShapeError, Tensor


def _param(rng, *shape, positive=False):
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data.astype(np.float64), requires_grad=True)


def _check(name, f, params, tol=1e-5):
    err = ad.finite_diff_check(f, params, eps=1e-5, floor=1e-6)
    print(f"   {name:<14} max rel err {err:.2e}")
    assert err <= tol, (name, err)


def test_primitive_gradients():
    """Every primitive's adjoint against central differences (float64)"""
    print("🧪 Testing primitive gradients")
    rng = np.random.default_rng(0)
    with ad.precision(np.float64):
        a, b = _param(rng, 3, 4), _param(rng, 4)
        m, v = _param(rng, 4, 5), _param(rng, 5)
        pos = _param(rng, 3, 4, positive=True)
        batched_a, batched_b = _param(rng, 2, 3, 4), _param(rng, 2, 4, 3)
        gamma, beta = _param(rng, 4), _param(rng, 4)
        w = _param(rng, 6, 4)

        _check("add/mul bcast", lambda: ((a + b) * b).sum(), [a, b])
        _check("sub/div", lambda: ((a - b) / pos).sum(), [a, b, pos])
        _check("pow", lambda: (pos ** 2.5).sum(), [pos])
        _check("log/exp", lambda: (ad.log(pos) + ad.exp(a * 0.5)).sum(), [pos, a])
        _check("matmul 2d", lambda: ((a @ m) * (a @ m)).sum(), [a, m])
        _check("matmul vec", lambda: ((m @ v) * (m @ v)).sum() + (b @ m).sum(), [m, v, b])
        _check("matmul batch", lambda: ((batched_a @ batched_b) ** 2).sum(), [batched_a, batched_b])
        _check("transpose", lambda: (ad.transpose(batched_a, (1, 0, 2)) * ad.transpose(batched_a, (1, 0, 2))).sum(), [batched_a])
        _check("reshape", lambda: (a.reshape(2, 6) @ _fixed((6, 2))).sum(), [a])
        _check("softmax", lambda: (ad.softmax(a) * a).sum(), [a])
        _check("log_softmax", lambda: ad.log_softmax(a)[1, 2] + ad.log_softmax(a)[0].sum(), [a])
        _check("layer_norm", lambda: (ad.layer_norm(a, gamma, beta) * a).sum(), [a, gamma, beta])
        _check("gelu", lambda: (ad.gelu(a) * a).sum(), [a])
        _check("relu", lambda: (ad.relu(a + 0.3) * a).sum(), [a])
        _check("mean axis", lambda: (a.mean(axis=0) * b).sum() + a.mean(), [a, b])
        _check("sum axis", lambda: (a.sum(axis=1) ** 2).sum(), [a])
        _check("embedding", lambda: (ad.embedding(w, [0, 3, 3, 5]) ** 2).sum(), [w])
        _check("take slice", lambda: (w[1:4] * w[2:5]).sum(), [w])
        _check("concat", lambda: (ad.concat([a, w[0:2]], axis=0) ** 2).sum(), [a, w])
    print("✅ Primitive gradients OK\n")


def _fixed(shape):
    return Tensor(np.linspace(-1.0, 1.0, int(np.prod(shape))).reshape(shape))


def test_gradient_accumulates_over_shared_nodes():
    with ad.precision(np.float64):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        y = x * x
        loss = (y + y).sum()
        leaves = ad.backward(loss)
        assert np.allclose(x.grad, 4 * x.data)
        assert np.allclose(leaves[x], 4 * x.data)
        # a second backward accumulates into .grad
        ad.backward((x * 3.0).sum())
        assert np.allclose(x.grad, 4 * x.data + 3.0)
        ad.zero_grad([x])
        assert x.grad is None


def test_no_grad_and_constants():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad and y.ctx is None
    assert ad.backward(y) == {}
    assert x.grad is None
    z = (x * 2.0).sum()
    assert z.requires_grad


def test_precision_context():
    assert ad.default_dtype() == np.float32
    with ad.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_shape_errors():
    print("🧪 Testing shape errors")
    cases = [
        lambda: Tensor(np.ones((3, 4))) + Tensor(np.ones(3)),
        lambda: Tensor(np.ones((3, 4))) @ Tensor(np.ones((3, 4))),
        lambda: Tensor(np.ones((2, 3, 4))) @ Tensor(np.ones((4, 3))),
        lambda: ad.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3))),
        lambda: ad.embedding(Tensor(np.ones((5, 2))), [0, 5]),
        lambda: ad.backward(Tensor(np.ones(3), requires_grad=True) * 2.0),
        lambda: ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0),
    ]
    for i, case in enumerate(cases):
        try:
            case()
            assert False, f"case {i} should raise"
        except ShapeError as e:
            print(f"   {i}: {e}")
    print("✅ Shape errors OK\n")


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0 + 0.0
    ad.backward(y)
    assert np.isclose(x.grad, 1.0)
    assert len(ad.Graph.trace(y)) > 5000


def test_richardson_removes_truncation_error():
    with ad.precision(np.float64):
        a = Tensor(np.array([0.3, -0.2, 0.5, 0.1]), requires_grad=True)
        f = lambda: ad.exp(a * 3.0).sum()
        plain = ad.finite_diff_check(f, [a], eps=1e-2)
        extrapolated = ad.finite_diff_check(f, [a], eps=1e-2, richardson=True)
        sampled = ad.finite_diff_check(f, [a], eps=1e-2, richardson=True, max_elements=2, seed=1)
    print(f"   plain {plain:.2e}, extrapolated {extrapolated:.2e}")
    assert plain > 1e-5
    assert extrapolated < 1e-7 and sampled <= extrapolated


if __name__ == "__main__":
    test_primitive_gradients()
    test_gradient_accumulates_over_shared_nodes()
    test_no_grad_and_constants()
    test_precision_context()
    test_shape_errors()
    test_deep_chain_does_not_recurse()
    test_richardson_removes_truncation_error()
    print("✅ All autodiff tests passed!")
