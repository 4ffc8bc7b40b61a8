import numpy as np
import pytest

from ger import autodiff as ad
from ger import checkpoint
from ger.autodiff import GraphStateError, OpGraph, ShapeError, Tensor


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar f over every entry of array x (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check(build, *shapes, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    w = rng.normal(size=build(*ts).shape)

    def f():
        with ad.no_grad():
            return float(np.sum(build(*[Tensor(a) for a in arrays]).data * w))

    out = build(*ts)
    ad.backward(ad.sum_(ad.mul(out, w)))
    for t, a in zip(ts, arrays):
        num = numeric_grad(f, a)
        np.testing.assert_allclose(t.grad, num, rtol=1e-5, atol=1e-7)


PRIMITIVES = {
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (4,)], False),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 1)], False),
    "mul": (lambda a, b: ad.mul(a, b), [(2, 3, 4), (3, 4)], False),
    "exp": (lambda a: ad.exp(a), [(3, 5)], False),
    "log": (lambda a: ad.log(a), [(3, 5)], True),
    "relu": (lambda a: ad.relu(a), [(4, 6)], False),
    "leaky_relu": (lambda a: ad.leaky_relu(a, 0.01), [(4, 6)], False),
    "matmul": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)], False),
    "transpose": (lambda a: ad.transpose(a), [(3, 4)], False),
    "swapaxes": (lambda a: ad.swapaxes(a, 0, 2), [(2, 3, 4)], False),
    "reshape": (lambda a: ad.reshape(a, (4, 3)), [(2, 6)], False),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)], False),
    "getitem": (lambda a: a[1:, ::2], [(4, 5)], False),
    "take": (lambda a: ad.take(a, np.array([0, 2, 2, 1]), axis=0), [(3, 4)], False),
    "sum": (lambda a: ad.sum_(a, axis=1, keepdims=True), [(3, 4)], False),
    "mean": (lambda a: ad.mean(a, axis=0), [(3, 4)], False),
    "softmax": (lambda a: ad.softmax(a, axis=-1), [(3, 5)], False),
    "logsumexp": (lambda a: ad.logsumexp(a, axis=0), [(4, 3)], False),
    "layer_norm": (lambda x, g, b: ad.layer_norm(x, g, b), [(3, 6), (6,), (6,)], False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    build, shapes, positive = PRIMITIVES[name]
    for seed in range(100 if name in ("softmax", "matmul", "layer_norm") else 10):
        check(build, *shapes, seed=seed, positive=positive)


def test_masked_softmax_gradient_and_zeros():
    rng = np.random.default_rng(3)
    mask = rng.random((4, 6)) < 0.6
    mask[:, 0] = True
    check(lambda a: ad.softmax(a, mask=mask), (4, 6))
    p = ad.softmax(Tensor(rng.normal(size=(4, 6))), mask=mask).data
    assert np.all(p[~mask] == 0.0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_fully_masked_row_raises():
    with pytest.raises(ValueError):
        ad.softmax(Tensor(np.zeros((2, 3))), mask=np.array([[True, False, False], [False, False, False]]))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.normal(scale=20, size=(5, 7))
        np.testing.assert_allclose(ad.softmax(Tensor(x)).data.sum(-1), 1.0, atol=1e-12)


def test_gradient_is_linear_in_seed():
    rng = np.random.default_rng(1)
    W = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = rng.normal(size=(2, 4))
    s1, s2 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    grads = []
    for seed in (s1, s2, 2.0 * s1 - 3.0 * s2):
        W.grad = None
        ad.backward(ad.relu(ad.matmul(x, W)), seed)
        grads.append(W.grad.copy())
    np.testing.assert_allclose(grads[2], 2.0 * grads[0] - 3.0 * grads[1], atol=1e-12)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.mul(x, x)
    ad.backward(ad.sum_(ad.add(y, y)))
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_opgraph_backward_before_forward():
    g = OpGraph(lambda x: ad.sum_(x))
    with pytest.raises(GraphStateError):
        g.backward()
    x = Tensor(np.ones(3), requires_grad=True)
    ad.forward(g, [x])
    g.backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_shape_error_names_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.exp(x)
    assert not y.requires_grad and y.is_leaf


def test_grad_check_reports_pass_and_failure():
    rng = np.random.default_rng(0)
    W = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    x = rng.normal(size=(2, 3))
    report = ad.grad_check(lambda: ad.sum_(ad.exp(ad.matmul(x, W))), {"W": W})
    assert report.passed and report.checked["W"] == 9

    def wrong():
        out = ad.sum_(ad.matmul(x, W))
        return ad._make(out.data, "wrong", (W,), lambda g: (np.zeros_like(W.data),))

    assert not ad.grad_check(wrong, {"W": W}).passed
    with pytest.raises(TypeError):
        ad.grad_check(lambda: ad.sum_(W), {"W": Tensor(np.ones(2), requires_grad=True, dtype=np.float32)})


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 4)), "b.c": np.array(0.5), "f": rng.normal(size=5).astype(np.float32)}
    fp = checkpoint.save(tmp_path / "x.ckpt", tensors, {"k": [1, 2]})
    back, meta = checkpoint.load(tmp_path / "x.ckpt")
    assert meta["k"] == [1, 2]
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype
        assert back[k].tobytes() == v.tobytes()
    assert fp == checkpoint.fingerprint(tmp_path / "x.ckpt")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"not a checkpoint")


def test_grad_check_rounding_allowance_is_tight():
    c = np.array([1e-3, 0.0, 2.0])
    W = Tensor(np.array([0.3, -1.0, 0.7]), requires_grad=True)

    def scaled(factor):
        def fn():
            out = ad.sum_(ad.mul(W, c))
            return ad._make(out.data + 10.0, "scaled", (W,), lambda g: (g * c * factor,))

        return fn

    assert ad.grad_check(scaled(1.0), {"W": W}).passed
    report = ad.grad_check(scaled(1.0 + 1e-3), {"W": W})
    assert not report.passed and report.max_error == pytest.approx(1e-3, rel=0.01)
