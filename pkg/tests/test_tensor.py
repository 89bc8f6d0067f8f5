import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refgroup import tensor as T
from refgroup.gradcheck import gradcheck, numerical_grad, rel_error
from refgroup.rng import Rng
from refgroup.tensor import ContractError, ShapeError, Tensor

from conftest import assert_gradcheck


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


# ---- matmul ------------------------------------------------------------------

def test_matmul_identity(nrng):
    A = nrng.normal(size=(3, 4))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)


def test_matmul_exact():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
    np.testing.assert_array_equal(out.data, [[2], [4]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradcheck(nrng):
    a, b = leaf(nrng.normal(size=(5, 4))), leaf(nrng.normal(size=(4, 3)))
    assert_gradcheck(gradcheck(lambda: T.matmul(a, b).sum(), {"a": a, "b": b}), 1e-6)


def test_matmul_batched_broadcast_grad(nrng):
    a, b = leaf(nrng.normal(size=(2, 5, 4))), leaf(nrng.normal(size=(4, 3)))
    assert_gradcheck(gradcheck(lambda: (T.matmul(a, b) ** 2).sum(), {"a": a, "b": b}), 1e-6)


# ---- softmax -------------------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_large_logits_stay_finite():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == 1.0 and out[1] == 0.0


def test_softmax_gradcheck(nrng):
    x = leaf(nrng.normal(size=(3, 4)))
    w = Tensor(nrng.normal(size=(3, 4)))
    assert_gradcheck(gradcheck(lambda: (T.softmax(x, axis=1) * w).sum(), {"x": x}), 1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(Tensor(x), axis=1).data
    assert np.all(s > 0) or np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


# ---- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_row_zero():
    out = T.layer_norm(Tensor(np.full((1, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)), 1e-5)
    np.testing.assert_array_equal(out.data, np.zeros((1, 5)))


def test_layer_norm_constant_row_beta():
    b = np.arange(5.0)
    out = T.layer_norm(Tensor(np.full((1, 5), -2.0)), Tensor(np.ones(5)), Tensor(b), 1e-5)
    np.testing.assert_array_equal(out.data, b[None])


def test_layer_norm_gradcheck(nrng):
    x, g, b = leaf(nrng.normal(size=(2, 6))), leaf(nrng.normal(size=6)), leaf(nrng.normal(size=6))
    w = Tensor(nrng.normal(size=(2, 6)))
    res = gradcheck(lambda: (T.layer_norm(x, g, b, 1e-5) * w).sum(), {"x": x, "gamma": g, "beta": b})
    assert_gradcheck(res, 1e-5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-1e3, 1e3)))
def test_layer_norm_row_mean_zero(x):
    out = T.layer_norm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7)), 1e-5).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-9)


# ---- l2 normalise --------------------------------------------------------------

def test_l2_normalize_exact():
    np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)


def test_l2_normalize_zero_vector():
    x = leaf([0.0, 0.0])
    out = T.l2_normalize(x)
    np.testing.assert_array_equal(out.data, [0.0, 0.0])
    out.sum().backward()
    assert np.all(np.isfinite(x.grad))


def test_l2_normalize_gradcheck(nrng):
    x = leaf(nrng.normal(size=(4, 8)))
    w = Tensor(nrng.normal(size=(4, 8)))
    assert_gradcheck(gradcheck(lambda: (T.l2_normalize(x, axis=1) * w).sum(), {"x": x}), 1e-5)


# ---- conv2d -------------------------------------------------------------------

def test_conv_identity_kernel(nrng):
    x = nrng.normal(size=(5, 6, 3))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0] = np.eye(3)
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv_all_ones_counts():
    out = T.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), stride=1, pad=1).data[..., 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


@pytest.mark.parametrize("h,k,s,p", [(7, 3, 2, 1), (16, 7, 4, 3), (5, 5, 1, 0), (9, 3, 3, 0)])
def test_conv_output_size_and_loop_oracle(nrng, h, k, s, p):
    x = nrng.normal(size=(h, h + 1, 2))
    w = nrng.normal(size=(k, k, 2, 3))
    out = T.conv2d(Tensor(x), Tensor(w), s, p).data
    ho, wo = (h + 2 * p - k) // s + 1, (h + 1 + 2 * p - k) // s + 1
    assert out.shape == (ho, wo, 3)
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    ref = np.zeros_like(out)
    for i in range(ho):
        for j in range(wo):
            patch = xp[i * s:i * s + k, j * s:j * s + k]
            for c in range(3):
                ref[i, j, c] = np.sum(patch * w[..., c])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_gradcheck(nrng):
    x, k = leaf(nrng.normal(size=(5, 5, 2))), leaf(nrng.normal(size=(3, 3, 2, 3)))
    w = Tensor(nrng.normal(size=(3, 3, 3)))
    assert_gradcheck(gradcheck(lambda: (T.conv2d(x, k, 2, 1) * w).sum(), {"x": x, "k": k}), 1e-5)


def test_conv_batched_matches_unbatched(nrng):
    x = nrng.normal(size=(3, 8, 8, 2))
    k = nrng.normal(size=(3, 3, 2, 4))
    batched = T.conv2d(Tensor(x), Tensor(k), 2, 1).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], T.conv2d(Tensor(x[b]), Tensor(k), 2, 1).data, atol=1e-13)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))))


def test_conv_even_kernel_rejected():
    with pytest.raises(ContractError):
        T.conv2d(Tensor(np.ones((4, 4, 1))), Tensor(np.ones((2, 2, 1, 1))))


# ---- upsample ------------------------------------------------------------------

def test_upsample_blocks():
    out = T.upsample2x(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])).data[..., 0]
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_upsample_then_meanpool_inverts(nrng):
    x = nrng.normal(size=(3, 5, 2))
    up = T.upsample2x(Tensor(x)).data
    pooled = up.reshape(3, 2, 5, 2, 2).mean(axis=(1, 3))
    np.testing.assert_array_equal(pooled, x)


def test_upsample_gradcheck(nrng):
    x = leaf(nrng.normal(size=(2, 2, 3)))
    w = Tensor(nrng.normal(size=(4, 4, 3)))
    assert_gradcheck(gradcheck(lambda: (T.upsample2x(x) * w).sum(), {"x": x}), 1e-6)


# ---- gumbel --------------------------------------------------------------------

def test_gumbel_fixed_point():
    assert T.gumbel_transform(np.array([math.exp(-1.0)]))[0] == pytest.approx(0.0, abs=1e-15)


def test_gumbel_deterministic():
    a = T.gumbel_sample(Rng(42, "noise"), [4]).data
    b = T.gumbel_sample(Rng(42, "noise"), [4]).data
    assert a.tobytes() == b.tobytes()


def test_gumbel_mean_is_euler_mascheroni():
    draws = T.gumbel_sample(Rng(7, "noise"), [100_000]).data
    assert abs(draws.mean() - 0.5772156649) < 0.01


def test_gumbel_clamped_finite():
    out = T.gumbel_transform(np.array([0.0, 1.0]))
    assert np.all(np.isfinite(out))


# ---- backward ------------------------------------------------------------------

def test_backward_square():
    x = leaf(3.0)
    (x * x).backward()
    assert x.grad == 6.0


def test_stop_gradient_semantics():
    x = leaf(3.0)
    (T.stop_gradient(x) * x).backward()
    assert x.grad == 3.0


def test_fan_out_accumulates_exactly():
    x = leaf([1.5, -2.0])
    (x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_non_scalar_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_grad_shape_matches_value(nrng):
    x = leaf(nrng.normal(size=(3, 1, 4)))
    y = Tensor(nrng.normal(size=(2, 3, 5, 4)))
    (x * y).sum().backward()
    assert x.grad.shape == x.shape


def test_deep_chain_no_recursion_limit():
    x = leaf(1.0)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.backward()
    assert x.grad == 1.0


def test_composite_gradcheck_with_all_smooth_ops(nrng):
    x = leaf(nrng.normal(size=(2, 4, 4, 2)))
    k = leaf(nrng.normal(size=(3, 3, 2, 3)) * 0.3)
    g, b = leaf(nrng.uniform(0.5, 1.5, 3)), leaf(nrng.normal(size=3))
    w = leaf(nrng.normal(size=(3, 5)))

    def f():
        h = T.layer_norm(T.conv2d(x, k, 1, 1), g, b)
        h = T.gelu(T.upsample2x(h))
        z = T.matmul(T.reshape(h, (2, 64, 3)), w)
        s = T.softmax(T.l2_normalize(z, axis=-1) * 3.0, axis=-2)
        return T.logsumexp(T.sigmoid(z) * s, axis=-1).sum() + T.softplus(z).mean()
    res = gradcheck(f, {"x": x, "k": k, "g": g, "b": b, "w": w})
    assert_gradcheck(res, 1e-4)


def test_determinism_bitwise(nrng):
    def run():
        r = Rng(5, "init")
        a = Tensor(r.normal((4, 3)), requires_grad=True)
        loss = T.softmax(T.matmul(a, Tensor(r.normal((3, 2)))), axis=0).sum() * T.gumbel_sample(r, [1]).sum()
        loss.backward()
        return loss.data.tobytes(), a.grad.tobytes()
    assert run() == run()


def test_numerical_grad_oracle_on_known_function():
    x = leaf([0.3, -1.2])
    num = numerical_grad(lambda: (x ** 3).sum(), x)
    np.testing.assert_allclose(num, 3 * x.data ** 2, rtol=1e-8)
    assert rel_error(1.0, 1.0) == 0.0
