import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgic import tensor as T
from pgic.errors import AutogradError, NumericalError, ShapeError
from pgic.tensor import Parameter, Tensor

from oracles import assert_grad_close, central_difference, naive_depthwise, naive_pointwise

F64 = np.float64


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


def weighted_sum(out, weights):
    return T.sum_all(T.mul(out, Tensor(weights, dtype=out.dtype)))


# ---------------------------------------------------------------------------
# pixel (un)shuffle


def test_unshuffle_block_order():
    t = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out = T.pixel_unshuffle(t, 2)
    assert out.shape == (4, 1, 1)
    np.testing.assert_array_equal(out.data.reshape(-1), [1, 2, 3, 4])


def test_shuffle_block_order():
    t = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
    np.testing.assert_array_equal(T.pixel_shuffle(t, 2).data, [[[1, 2], [3, 4]]])


def test_factor_one_is_identity(rng):
    x = Tensor(rng.normal(size=(3, 5, 7)))
    np.testing.assert_array_equal(T.pixel_unshuffle(x, 1).data, x.data)
    np.testing.assert_array_equal(T.pixel_shuffle(x, 1).data, x.data)


def test_round_trips(rng):
    x = Tensor(rng.normal(size=(3, 8, 8)))
    np.testing.assert_array_equal(T.pixel_shuffle(T.pixel_unshuffle(x, 2), 2).data, x.data)
    z = Tensor(rng.normal(size=(8, 4, 4)))
    np.testing.assert_array_equal(T.pixel_unshuffle(T.pixel_shuffle(z, 2), 2).data, z.data)


def test_unshuffle_channel_mapping(rng):
    x = rng.normal(size=(2, 6, 9)).astype(np.float32)
    f = 3
    out = T.pixel_unshuffle(Tensor(x), f).data
    for c in range(2):
        for dy in range(f):
            for dx in range(f):
                np.testing.assert_array_equal(out[c * f * f + dy * f + dx], x[c, dy::f, dx::f])


@settings(max_examples=40, deadline=None)
@given(f=st.sampled_from([2, 4, 8]), c=st.integers(1, 3), hb=st.integers(1, 3), wb=st.integers(1, 3),
       batch=st.booleans(), seed=st.integers(0, 2**31))
def test_round_trip_property(f, c, hb, wb, batch, seed):
    shape = (2, c, hb * f, wb * f) if batch else (c, hb * f, wb * f)
    x = Tensor(np.random.default_rng(seed).normal(size=shape))
    np.testing.assert_array_equal(T.pixel_shuffle(T.pixel_unshuffle(x, f), f).data, x.data)


def test_unshuffle_rejects_bad_axis():
    with pytest.raises(ShapeError, match="height"):
        T.pixel_unshuffle(Tensor(np.zeros((1, 3, 4))), 2)
    with pytest.raises(ShapeError, match="width"):
        T.pixel_unshuffle(Tensor(np.zeros((1, 4, 5))), 2)


def test_shuffle_rejects_channels():
    with pytest.raises(ShapeError):
        T.pixel_shuffle(Tensor(np.zeros((3, 2, 2))), 2)


# ---------------------------------------------------------------------------
# convolutions


def test_depthwise_zero_kernels_give_bias():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 4)))
    out = T.conv_depthwise(x, Tensor(np.zeros((2, 3, 3))), Tensor(np.array([0.5, -2.0])))
    np.testing.assert_array_equal(out.data[0], 0.5)
    np.testing.assert_array_equal(out.data[1], -2.0)


def test_depthwise_unit_kernel_is_identity(rng):
    x = Tensor(rng.normal(size=(3, 5, 5)))
    out = T.conv_depthwise(x, Tensor(np.ones((3, 1, 1))), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("shape,k", [((2, 5, 5), 3), ((8, 16, 16), 3), ((4, 7, 6), 5)])
def test_depthwise_matches_loops(rng, shape, k):
    x = rng.normal(size=shape).astype(np.float32)
    kern = rng.normal(size=(shape[0], k, k)).astype(np.float32)
    b = rng.normal(size=shape[0]).astype(np.float32)
    out = T.conv_depthwise(Tensor(x), Tensor(kern), Tensor(b)).data
    np.testing.assert_allclose(out, naive_depthwise(x, kern, b), atol=1e-6 if k == 3 else 2e-6)


def test_depthwise_small_case_tight(rng):
    x = rng.normal(size=(2, 5, 5)).astype(np.float32)
    kern = rng.normal(size=(2, 3, 3)).astype(np.float32)
    b = rng.normal(size=2).astype(np.float32)
    out = T.conv_depthwise(Tensor(x), Tensor(kern), Tensor(b)).data
    np.testing.assert_allclose(out, naive_depthwise(x, kern, b), atol=1e-6)


def test_depthwise_channels_independent(rng):
    x = rng.normal(size=(3, 6, 6))
    kern, b = Tensor(rng.normal(size=(3, 3, 3))), Tensor(np.zeros(3))
    base = T.conv_depthwise(Tensor(x), kern, b).data
    x2 = x.copy()
    x2[1] += 10
    moved = T.conv_depthwise(Tensor(x2), kern, b).data
    np.testing.assert_array_equal(base[0], moved[0])
    np.testing.assert_array_equal(base[2], moved[2])


def test_depthwise_errors():
    x = Tensor(np.zeros((2, 4, 4)))
    with pytest.raises(ShapeError):
        T.conv_depthwise(x, Tensor(np.zeros((3, 3, 3))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        T.conv_depthwise(x, Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros(2)))


def test_pointwise_identity_and_sum(rng):
    x = Tensor(rng.normal(size=(4, 3, 3)))
    np.testing.assert_array_equal(T.conv_pointwise(x, Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x.data)
    s = T.conv_pointwise(x, Tensor(np.ones((1, 4))), Tensor(np.zeros(1))).data
    np.testing.assert_allclose(s[0], x.data.sum(axis=0), atol=1e-6)


@pytest.mark.parametrize("shape,co", [((4, 3, 3), 6), ((8, 16, 16), 5)])
def test_pointwise_matches_matmul(rng, shape, co):
    x = rng.normal(size=shape).astype(np.float32)
    w = rng.normal(size=(co, shape[0])).astype(np.float32)
    b = rng.normal(size=co).astype(np.float32)
    out = T.conv_pointwise(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, naive_pointwise(x, w, b), atol=1e-6)


def test_pointwise_small_case_tight(rng):
    x = rng.normal(size=(4, 3, 3)).astype(np.float32)
    w = rng.normal(size=(6, 4)).astype(np.float32)
    b = rng.normal(size=6).astype(np.float32)
    np.testing.assert_allclose(T.conv_pointwise(Tensor(x), Tensor(w), Tensor(b)).data,
                               naive_pointwise(x, w, b), atol=1e-6)


def test_pointwise_errors():
    with pytest.raises(ShapeError):
        T.conv_pointwise(Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


def test_batched_ops_match_per_image(rng):
    x = rng.normal(size=(3, 4, 6, 6)).astype(np.float32)
    k, kb = Tensor(rng.normal(size=(4, 3, 3))), Tensor(rng.normal(size=4))
    w, wb = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=5))
    dw = T.conv_depthwise(Tensor(x), k, kb).data
    pw = T.conv_pointwise(Tensor(x), w, wb).data
    for i in range(3):
        np.testing.assert_allclose(dw[i], T.conv_depthwise(Tensor(x[i]), k, kb).data, atol=1e-6)
        np.testing.assert_allclose(pw[i], T.conv_pointwise(Tensor(x[i]), w, wb).data, atol=1e-6)


# ---------------------------------------------------------------------------
# elementwise


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor(np.array([-1.0, 0.0, 2.0]).reshape(3, 1, 1))).data.reshape(-1),
                                  [0, 0, 2])


def test_chunk2_halves():
    a, b = T.chunk2(Tensor(np.arange(4.0).reshape(4, 1, 1)))
    np.testing.assert_array_equal(a.data.reshape(-1), [0, 1])
    np.testing.assert_array_equal(b.data.reshape(-1), [2, 3])
    with pytest.raises(ShapeError):
        T.chunk2(Tensor(np.zeros((3, 1, 1))))


def test_add_zero_identity(rng):
    x = Tensor(rng.normal(size=(2, 3, 3)))
    np.testing.assert_array_equal(T.add(x, Tensor(np.zeros((2, 3, 3)))).data, x.data)
    with pytest.raises(ShapeError):
        T.add(x, Tensor(np.zeros((2, 3, 4))))
    with pytest.raises(ShapeError):
        T.mul(x, Tensor(np.zeros((1, 3, 3))))


def test_float32_default():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float32
    assert Tensor(np.zeros(3), dtype=np.float64).dtype == np.float64
    assert T.relu(Tensor(np.ones((1, 1, 1)))).dtype == np.float32


# ---------------------------------------------------------------------------
# backward


def test_relu_sum_gradient():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    T.backward(T.sum_all(T.relu(x)))
    np.testing.assert_array_equal(x.grad, [1.0, 0.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.relu(x))


def test_second_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_all(T.relu(x))
    T.backward(loss)
    with pytest.raises(AutogradError):
        T.backward(loss)


def test_multiple_uses_accumulate():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [4.0, 6.0])


def test_gradient_linearity(rng):
    xv = rng.normal(size=(3, 4, 4))
    w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    r1, r2 = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))

    def l1():
        return weighted_sum(T.conv_pointwise(Tensor(xv), w, b), r1)

    def l2():
        return weighted_sum(T.relu(T.conv_pointwise(Tensor(xv), w, b)), r2)

    T.backward(l1())
    T.backward(l2())
    separate = w.grad.copy()
    w.zero_grad()
    T.backward(T.add(l1(), l2()))
    np.testing.assert_allclose(w.grad, separate, rtol=1e-6, atol=1e-6)


def test_straight_through_passes_gradient(rng):
    y = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    q = np.round(y.data)
    r = rng.normal(size=(2, 3, 3)).astype(np.float32)
    out = T.straight_through(y, q)
    np.testing.assert_array_equal(out.data, q)
    T.backward(weighted_sum(out, r))
    with_st = y.grad.copy()
    y.zero_grad()
    T.backward(weighted_sum(T.scale(y, 1.0), r))
    np.testing.assert_array_equal(with_st, y.grad)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert not y.requires_grad


# finite-difference checks, float64, step 1e-3, 1e-3 relative


def _check_op(build, arrays, rtol=1e-3):
    tensors = [t64(a) for a in arrays]
    T.backward(build(*tensors))
    analytic = [t.grad for t in tensors]

    def f():
        with T.no_grad():
            return build(*[Tensor(a, dtype=F64) for a in arrays]).item()

    numeric = central_difference(f, arrays, h=1e-3)
    for a, n in zip(analytic, numeric):
        assert_grad_close(a, n, rtol=rtol)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


def test_grad_pointwise(rng):
    r = rng.normal(size=(6, 3, 3))
    _check_op(lambda x, w, b: weighted_sum(T.conv_pointwise(x, w, b), r),
              [rng.normal(size=(4, 3, 3)), rng.normal(size=(6, 4)), rng.normal(size=6)])


def test_grad_pointwise_plain_sum(rng):
    _check_op(lambda x, w, b: T.sum_all(T.conv_pointwise(x, w, b)),
              [rng.normal(size=(3, 2, 2)), rng.normal(size=(2, 3)), np.zeros(2)])


def test_grad_pointwise_batched(rng):
    r = rng.normal(size=(2, 3, 2, 3))
    _check_op(lambda x, w, b: weighted_sum(T.conv_pointwise(x, w, b), r),
              [rng.normal(size=(2, 4, 2, 3)), rng.normal(size=(3, 4)), rng.normal(size=3)])


def test_grad_depthwise(rng):
    r = rng.normal(size=(3, 5, 5))
    _check_op(lambda x, k, b: weighted_sum(T.conv_depthwise(x, k, b), r),
              [rng.normal(size=(3, 5, 5)), rng.normal(size=(3, 3, 3)), rng.normal(size=3)])


def test_grad_depthwise_batched(rng):
    r = rng.normal(size=(2, 2, 4, 4))
    _check_op(lambda x, k, b: weighted_sum(T.conv_depthwise(x, k, b), r),
              [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 3, 3)), rng.normal(size=2)])


def test_grad_shuffles(rng):
    r1 = rng.normal(size=(12, 2, 2))
    r2 = rng.normal(size=(1, 4, 4))
    _check_op(lambda x: weighted_sum(T.pixel_unshuffle(x, 2), r1), [rng.normal(size=(3, 4, 4))])
    _check_op(lambda x: weighted_sum(T.pixel_shuffle(x, 2), r2), [rng.normal(size=(4, 2, 2))])


def test_grad_relu_clamp_abs(rng):
    r = rng.normal(size=(2, 3, 3))
    _check_op(lambda x: weighted_sum(T.relu(x), r), [_away_from_zero(rng, (2, 3, 3))])
    _check_op(lambda x: weighted_sum(T.absolute(x), r), [_away_from_zero(rng, (2, 3, 3))])
    x = rng.uniform(-0.5, 1.5, size=(2, 3, 3))
    x = np.where(np.abs(x) < 0.05, 0.1, x)
    x = np.where(np.abs(x - 1) < 0.05, 0.9, x)
    _check_op(lambda t: weighted_sum(T.clamp(t, 0.0, 1.0), r), [x])


def test_grad_add_mul_sub_scale_square_mean(rng):
    r = rng.normal(size=(2, 2, 2))
    a, b = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))
    _check_op(lambda x, y: weighted_sum(T.add(x, y), r), [a.copy(), b.copy()])
    _check_op(lambda x, y: weighted_sum(T.sub(x, y), r), [a.copy(), b.copy()])
    _check_op(lambda x, y: weighted_sum(T.mul(x, y), r), [a.copy(), b.copy()])
    _check_op(lambda x: weighted_sum(T.scale(x, -1.7), r), [a.copy()])
    _check_op(lambda x: T.mean(T.square(x)), [a.copy()])


def test_grad_chunk2(rng):
    r1, r2 = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))

    def build(x):
        p, q = T.chunk2(x)
        return T.add(weighted_sum(p, r1), weighted_sum(q, r2))

    _check_op(build, [rng.normal(size=(4, 3, 3))])
    _check_op(lambda x: T.sum_all(T.mul(*T.chunk2(x))), [rng.normal(size=(2, 4, 3, 3))])


def test_grad_channel_affine(rng):
    r = rng.normal(size=(3, 2, 2))
    _check_op(lambda x, s, b: weighted_sum(T.channel_affine(x, s, b, 1), r),
              [rng.normal(size=(3, 2, 2)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))])


def test_channel_affine_touches_only_its_row(rng):
    s = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 2, 2)))
    T.backward(T.sum_all(T.channel_affine(x, s, b, 2)))
    assert not s.grad[:2].any() and not b.grad[:2].any()
    assert s.grad[2].any() and b.grad[2].any()


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_value():
    p = Parameter(np.array([1.5, -2.0], dtype=np.float32))
    before = p.data.copy()
    T.adam_step([p], [np.zeros(2)], lr=0.1)
    np.testing.assert_array_equal(p.data, before)
    assert not p.adam_m.any() and not p.adam_v.any()
    assert p.step_count == 1


def test_adam_first_step_magnitude_is_lr():
    p = Parameter(np.array([0.0], dtype=np.float32))
    T.adam_step([p], [np.array([3.7])], lr=0.01, beta1=0.5, beta2=0.9, eps=1e-12)
    np.testing.assert_allclose(p.data, [-0.01], rtol=1e-5)


def test_adam_descends_quadratic():
    # scalar simulation of the same update rule in float64
    w_ref, m, v = 1.0, 0.0, 0.0
    p = Parameter(np.array([1.0], dtype=np.float32))
    prev = 1.0
    for step in range(1, 4):
        g = 2 * float(p.data[0])
        T.adam_step([p], [np.array([g])], lr=0.1, beta1=0.5, beta2=0.9)
        gr = 2 * w_ref
        m = 0.5 * m + 0.5 * gr
        v = 0.9 * v + 0.1 * gr * gr
        w_ref -= 0.1 * (m / (1 - 0.5 ** step)) / (np.sqrt(v / (1 - 0.9 ** step)) + 1e-8)
        cur = float(p.data[0])
        assert 0 < cur < prev
        np.testing.assert_allclose(cur, w_ref, rtol=1e-5)
        prev = cur


def test_adam_rejects_non_finite():
    p = Parameter(np.zeros(2, dtype=np.float32), name="enc.w")
    with pytest.raises(NumericalError, match="enc.w"):
        T.adam_step([p], [np.array([1.0, np.nan])])


def test_adam_state_invariants(rng):
    p = Parameter(rng.normal(size=(3, 2)).astype(np.float32))
    for _ in range(5):
        T.adam_step([p], [rng.normal(size=6)], lr=1e-2)
    assert p.adam_m.size == p.adam_v.size == p.value.size
    assert (p.adam_v >= 0).all()
    assert np.isfinite(p.data).all()
