"""Finite-difference verification of every tape primitive, plus tape
discipline (scalar roots, accumulation, no-tape behavior).
"""

import numpy as np
import pytest

import maskdet.autodiff as ad
from maskdet.autodiff import Tape, Tensor


def fd_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar fn over array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        k = it.multi_index
        orig = x[k]
        x[k] = orig + eps
        hi = fn(x)
        x[k] = orig - eps
        lo = fn(x)
        x[k] = orig
        g[k] = (hi - lo) / (2 * eps)
        it.iternext()
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check(build, arrays, tol=1e-5, seeds=range(3)):
    """Compare tape gradients of a scalar-valued builder against finite
    differences, for each input array, over a few random draws.
    """
    for seed in seeds:
        rng = np.random.default_rng(seed)
        xs = [a(rng).astype(np.float64) for a in arrays]
        with Tape() as tape:
            ts = [Tensor(x.copy()) for x in xs]
            out = build(*ts)
            tape.backward(out)
            grads = [t.grad for t in ts]
        for k, x in enumerate(xs):
            def scalar(v, k=k):
                probe = [q.copy() for q in xs]
                probe[k] = v
                with Tape() as tp:
                    ts2 = [Tensor(q) for q in probe]
                    o = build(*ts2)
                return float(o.data)
            num = fd_grad(scalar, x.copy())
            assert grads[k] is not None
            assert rel_err(np.asarray(grads[k]), num) <= tol, (
                f"input {k} seed {seed}"
            )


def box(lo, hi, shape):
    return lambda rng: rng.uniform(lo, hi, shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def test_add_mul_sub_div_grads():
    check(lambda a, b: ad.sum(a * b + a - b), [box(-2, 2, (3, 4)), box(-2, 2, (3, 4))])
    check(lambda a, b: ad.sum(a / b), [box(-2, 2, (5,)), box(0.5, 2, (5,))])


def test_scalar_and_reflected_ops():
    check(lambda a: ad.sum(2.0 * a + 3.0), [box(-2, 2, (4,))])
    check(lambda a: ad.sum(1.0 - a), [box(-2, 2, (4,))])
    check(lambda a: ad.sum(3.0 / a), [box(0.5, 2, (4,))])
    check(lambda a: ad.sum(-a), [box(-2, 2, (4,))])
    check(lambda a: ad.sum(a ** 3), [box(0.5, 2, (4,))])


def test_broadcasting_grads():
    # (3, 4) * (4,) exercises gradient unbroadcasting on the small operand
    check(lambda a, b: ad.sum(a * b), [box(-2, 2, (3, 4)), box(-2, 2, (4,))])
    check(lambda a, b: ad.sum(a + b), [box(-2, 2, (2, 3, 2)), box(-2, 2, (2,))])


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def test_exp_log_sqrt_grads():
    check(lambda a: ad.sum(ad.exp(a)), [box(-1, 1, (3, 3))])
    check(lambda a: ad.sum(ad.log(a)), [box(0.2, 3, (3, 3))])
    check(lambda a: ad.sum(ad.sqrt(a)), [box(0.2, 3, (3, 3))])


def test_abs_relu_away_from_kink():
    def signed(rng):
        m = rng.uniform(0.2, 2, (4, 4))
        return m * np.where(rng.uniform(size=(4, 4)) < 0.5, -1.0, 1.0)
    check(lambda a: ad.sum(ad.absolute(a)), [signed])
    check(lambda a: ad.sum(ad.relu(a)), [signed])


def test_relu_negative_zone_gradient_is_zero():
    with Tape() as tape:
        x = Tensor(np.array([-3.0, -0.5, 2.0]))
        tape.backward(ad.sum(ad.relu(x)))
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sigmoid_grad_and_value_at_zero():
    check(lambda a: ad.sum(ad.sigmoid(a)), [box(-3, 3, (3, 3))])
    with Tape() as tape:
        x = Tensor(np.array(0.0))
        y = ad.sigmoid(x)
        tape.backward(y)
    assert float(y.data) == pytest.approx(0.5)
    assert float(x.grad) == pytest.approx(0.25, abs=1e-12)


def test_softplus_grad_and_clip():
    check(lambda a: ad.sum(ad.softplus(a)), [box(-3, 3, (3, 3))])
    check(lambda a: ad.sum(ad.clip(a, -0.5, 0.5)),
          [lambda rng: rng.uniform(-2, 2, (4, 4)) + 0.01])
    with Tape() as tape:
        x = Tensor(np.array([-2.0, 0.0, 2.0]))
        tape.backward(ad.sum(ad.clip(x, -1.0, 1.0)))
    # clamped entries get zero gradient
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# reductions, indexing, structure
# ---------------------------------------------------------------------------

def test_sum_mean_axis_grads():
    check(lambda a: ad.sum(a), [box(-2, 2, (3, 4))])
    check(lambda a: ad.sum(ad.sum(a, axis=0) ** 2), [box(-2, 2, (3, 4))])
    check(lambda a: ad.sum(ad.sum(a, axis=1, keepdims=True) * a),
          [box(-2, 2, (3, 4))])
    check(lambda a: ad.mean(a) * 3.0, [box(-2, 2, (2, 5))])
    check(lambda a: ad.sum(ad.mean(a, axis=2) ** 2), [box(-2, 2, (2, 3, 4))])


def test_getitem_grads_and_repeated_index_accumulation():
    idx = (np.array([0, 2, 2]), np.array([1, 0, 0]))
    check(lambda a: ad.sum(a[idx] ** 2), [box(-2, 2, (3, 2))])
    with Tape() as tape:
        x = Tensor(np.ones((3, 2)))
        tape.backward(ad.sum(x[idx]))
    expect = np.zeros((3, 2))
    expect[0, 1] = 1.0
    expect[2, 0] = 2.0  # the repeated cell accumulates both contributions
    assert np.array_equal(x.grad, expect)


def test_flip_cols_and_concat_grads():
    check(lambda a: ad.sum(ad.flip_cols(a) * np.arange(12.0).reshape(3, 4)),
          [box(-2, 2, (3, 4))])
    check(lambda a, b: ad.sum(ad.concat([a, b], axis=2) ** 2),
          [box(-2, 2, (2, 2, 3)), box(-2, 2, (2, 2, 1))])


def test_dense_grads():
    check(lambda x, w, b: ad.sum(ad.dense(x, w, b) ** 2),
          [box(-2, 2, (5,)), box(-1, 1, (5, 3)), box(-1, 1, (3,))])


# ---------------------------------------------------------------------------
# pooling and channel reductions
# ---------------------------------------------------------------------------

def test_global_pools_grads():
    check(lambda a: ad.sum(ad.global_avg_pool(a) ** 2), [box(-2, 2, (3, 4, 2))])

    def distinct(rng):
        # well-separated values keep the argmax stable under FD probes
        v = rng.permutation(24).astype(np.float64).reshape(3, 4, 2)
        return v + rng.uniform(-0.1, 0.1, (3, 4, 2))
    check(lambda a: ad.sum(ad.global_max_pool(a) ** 2), [distinct])


def test_channel_reductions_grads():
    check(lambda a: ad.sum(ad.channel_mean(a) ** 2), [box(-2, 2, (3, 4, 3))])

    def distinct(rng):
        v = rng.permutation(36).astype(np.float64).reshape(3, 4, 3)
        return v + rng.uniform(-0.1, 0.1, (3, 4, 3))
    check(lambda a: ad.sum(ad.channel_max(a) ** 2), [distinct])


def test_global_max_pool_routes_to_argmax():
    with Tape() as tape:
        x = Tensor(np.arange(8.0).reshape(2, 2, 2))
        tape.backward(ad.sum(ad.global_max_pool(x)))
    expect = np.zeros((2, 2, 2))
    expect[1, 1, 0] = 1.0
    expect[1, 1, 1] = 1.0
    assert np.array_equal(x.grad, expect)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def test_conv2d_grad_single_channel_4x4():
    # one 3x3 filter over a single-channel 4x4 image, all three inputs
    check(lambda x, w, b: ad.sum(ad.conv2d(x, w, b) ** 2),
          [box(-1, 1, (4, 4, 1)), box(-1, 1, (3, 3, 1, 1)), box(-1, 1, (1,))],
          seeds=range(5))


def test_conv2d_grad_multichannel_and_strided():
    check(lambda x, w, b: ad.sum(ad.conv2d(x, w, b) ** 2),
          [box(-1, 1, (6, 6, 2)), box(-1, 1, (3, 3, 2, 3)), box(-1, 1, (3,))])
    check(lambda x, w, b: ad.sum(ad.conv2d(x, w, b, stride=2) ** 2),
          [box(-1, 1, (8, 8, 2)), box(-1, 1, (3, 3, 2, 3)), box(-1, 1, (3,))])
    check(lambda x, w: ad.sum(ad.conv2d(x, w) ** 2),
          [box(-1, 1, (5, 5, 1)), box(-1, 1, (1, 1, 1, 2))])


def test_conv2d_shapes_and_validation():
    x = np.zeros((7, 5, 2))
    w = np.zeros((3, 3, 2, 4))
    assert ad.conv2d(x, w).shape == (7, 5, 4)
    assert ad.conv2d(x, w, stride=2).shape == (4, 3, 4)
    with pytest.raises(ValueError):
        ad.conv2d(x, np.zeros((3, 2, 2, 4)))
    with pytest.raises(ValueError):
        ad.conv2d(np.zeros((7, 5, 3)), w)


# ---------------------------------------------------------------------------
# tape discipline
# ---------------------------------------------------------------------------

def test_backward_requires_scalar_root():
    with Tape() as tape:
        x = Tensor(np.ones(3))
        y = x * 2.0
        with pytest.raises(ValueError):
            tape.backward(y)


def test_tensor_ops_require_active_tape():
    x = Tensor(np.ones(3))
    with pytest.raises(RuntimeError):
        _ = x * 2.0


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(RuntimeError):
            with Tape():
                pass


def test_raw_arrays_pass_through_without_tape():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    assert np.array_equal(ad.relu(x), np.maximum(x, 0.0))
    assert float(ad.sum(x)) == pytest.approx(2.5)
    assert ad.value(x) is x


def test_gradient_accumulates_across_branches():
    with Tape() as tape:
        x = Tensor(np.array(2.0))
        y = x * 3.0 + x * x
        tape.backward(y)
    assert float(x.grad) == pytest.approx(3.0 + 2.0 * 2.0)
