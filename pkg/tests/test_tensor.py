import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from textspot import functional as F
from textspot.gradcheck import check_gradients
from textspot.tensor import (DimensionError, NumericError, Tensor, backward, concat, get_tape, getitem,
                            matmul, no_grad, reshape, stack, transpose)

from gradcases import PRIMITIVES, leaf, primitive_error
from oracles import central_diff, conv_loops, rel_err


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [101, 202])
def test_primitive_gradients_match_central_differences(name, seed):
    assert primitive_error(name, seed) < 1e-6


@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_matches_loop_reference(stride, k):
    rng = np.random.default_rng(stride * 10 + k)
    x = rng.standard_normal((2, 7, 6, 3))
    w = rng.standard_normal((k, k, 3, 4))
    out = F.conv2d(Tensor(x), Tensor(w), stride=stride).data
    assert out.shape == (2, -(-7 // stride), -(-6 // stride), 4)
    np.testing.assert_allclose(out, conv_loops(x, w, stride), atol=1e-12)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((3, 3, 2, 1))))


def test_gru_rejects_non_finite_input():
    p = {"w_x": leaf(np.zeros((2, 6))), "w_h": leaf(np.zeros((2, 6))), "b_x": leaf(np.zeros(6)),
         "b_h": leaf(np.zeros(6))}
    with pytest.raises(NumericError):
        F.gru_cell(Tensor(np.array([[np.nan, 0.0]])), Tensor(np.zeros((1, 2))), p)


def test_gru_zero_weights_blend_half_way():
    # all gates at sigmoid(0) = 0.5, candidate tanh(0) = 0
    p = {"w_x": leaf(np.zeros((2, 6))), "w_h": leaf(np.zeros((2, 6))), "b_x": leaf(np.zeros(6)),
         "b_h": leaf(np.zeros(6))}
    h = np.array([[0.4, -1.0]])
    out = F.gru_cell(Tensor(np.ones((1, 2))), Tensor(h), p).data
    np.testing.assert_allclose(out, 0.5 * h)


def test_softmax_rows_sum_to_one_even_for_large_logits():
    x = Tensor(np.array([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]]))
    p = F.softmax(x).data
    np.testing.assert_allclose(p.sum(-1), 1.0)
    np.testing.assert_allclose(p[0], [0.5, 0.5, 0.0])


def test_smooth_l1_values():
    x = Tensor(np.array([-2.0, -0.5, 0.0, 0.5, 1.0, 3.0]))
    np.testing.assert_allclose(F.smooth_l1(x).data, [1.5, 0.125, 0.0, 0.125, 0.5, 2.5])


def test_cross_entropy_uniform_logits():
    out = F.cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
    assert float(out.data) == pytest.approx(np.log(4))


def test_cross_entropy_masked_rows_do_not_count():
    logits = Tensor(np.array([[5.0, 0.0], [0.0, 5.0]]))
    full = F.cross_entropy(logits, np.array([0, 0]), np.array([1.0, 0.0]))
    assert float(full.data) == pytest.approx(np.log1p(np.exp(-5.0)))


def test_cross_entropy_rejects_bad_probabilities():
    with pytest.raises(ValueError):
        F.cross_entropy(Tensor(np.zeros((1, 2))), np.array([[1.5, -0.5]]))


def test_bce_with_logits_is_stable_and_weighted():
    z = Tensor(np.array([800.0, -800.0, 0.0]))
    out = F.binary_cross_entropy_with_logits(z, np.array([1.0, 0.0, 1.0]), np.array([1.0, 1.0, 2.0]))
    assert float(out.data) == pytest.approx(2 * np.log(2))


def test_batch_norm_training_output_is_normalized():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 5, 5, 3)) * 3 + 2)
    state = F.BatchNormState(3, np.float64)
    out = F.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, True).data
    np.testing.assert_allclose(out.reshape(-1, 3).mean(0), 0, atol=1e-10)
    np.testing.assert_allclose(out.reshape(-1, 3).var(0), 1, atol=1e-3)
    # running stats moved 10% of the way toward the batch statistics
    np.testing.assert_allclose(state.mean, 0.1 * x.data.reshape(-1, 3).mean(0))


def test_batch_norm_eval_uses_running_stats():
    state = F.BatchNormState(2, np.float64)
    state.mean[:] = [1.0, -1.0]
    state.var[:] = [4.0, 1.0]
    x = Tensor(np.array([[[[3.0, 0.0]]]]))
    out = F.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, False).data
    np.testing.assert_allclose(out.reshape(-1), [2 / np.sqrt(4 + 1e-5), 1 / np.sqrt(1 + 1e-5)])


def test_batch_norm_mask_excludes_positions_from_statistics():
    x = np.zeros((1, 1, 4, 1))
    x[0, 0, :, 0] = [1.0, 3.0, 100.0, -50.0]
    mask = np.array([[[1, 1, 0, 0]]], dtype=float)
    state = F.BatchNormState(1, np.float64)
    out = F.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, True, mask).data
    np.testing.assert_allclose(out[0, 0, :2, 0], [-1, 1], atol=1e-5)


def test_upsample_of_constant_is_constant_and_sizes_scale():
    x = Tensor(np.full((1, 3, 5, 2), 7.0))
    out = F.upsample_bilinear(x, 4).data
    assert out.shape == (1, 12, 20, 2)
    np.testing.assert_allclose(out, 7.0)


def test_upsample_interpolates_half_pixel_centres():
    x = Tensor(np.array([0.0, 4.0]).reshape(1, 1, 2, 1))
    out = F.upsample_bilinear(x, 2).data[0, 0, :, 0]
    np.testing.assert_allclose(out, [0.0, 1.0, 3.0, 4.0])


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_reused_tensor_accumulates_gradient():
    x = leaf(np.array([1.0, 2.0]))
    y = x * x + x * 3.0
    backward(y.sum())
    np.testing.assert_allclose(x.grad, 2 * x.data + 3)


def test_intermediate_gradients_are_released_unless_retained():
    x = leaf(np.array([1.0, 2.0]))
    mid = x * 2.0
    kept = (x * 3.0).retain_grad()
    backward((mid + kept).sum())
    assert mid.grad is None
    np.testing.assert_allclose(kept.grad, 1.0)
    assert len(get_tape()) == 0


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    with no_grad():
        y = (x * 2.0).sum()
    assert len(get_tape()) == 0
    assert not y.requires_grad


def test_getitem_advanced_index_scatters_repeats():
    x = leaf(np.arange(4.0))
    backward(getitem(x, np.array([0, 0, 3])).sum())
    np.testing.assert_allclose(x.grad, [2, 0, 0, 1])


def test_shape_ops_gradients():
    rng = np.random.default_rng(3)
    a = leaf(rng.standard_normal((2, 3, 4)))
    b = leaf(rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((4, 3, 2))

    def f():
        y = transpose(concat([a, b * 2.0], axis=1), (2, 1, 0))
        z = reshape(stack([y, y * y], axis=0), (2, 4, 6, 2))
        return (getitem(z, (slice(None), slice(None), slice(0, 3))) * w[None]).sum()

    assert check_gradients(f, [a, b]) < 1e-6


def test_batched_matmul_gradients():
    rng = np.random.default_rng(4)
    a = leaf(rng.standard_normal((3, 2, 4)))
    b = leaf(rng.standard_normal((4, 5)))
    assert check_gradients(lambda: (matmul(a, b) ** 2).sum(), [a, b]) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=40, deadline=None)
@given(shape_a=st.sampled_from([(3, 4), (1, 4), (4,), (3, 1), ()]),
       shape_b=st.sampled_from([(3, 4), (1, 4), (4,), (3, 1), ()]),
       op=st.sampled_from(["add", "sub", "mul", "div"]))
def test_broadcast_gradients_have_operand_shapes(shape_a, shape_b, op):
    rng = np.random.default_rng(0)
    a = leaf(rng.uniform(1, 2, shape_a))
    b = leaf(rng.uniform(1, 2, shape_b))
    fn = {"add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b, "div": lambda: a / b}[op]
    out = fn()
    weights = rng.standard_normal(out.shape)
    backward((fn() * weights).sum())
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    for t in (a, b):
        def value():
            with no_grad():
                return float((fn() * weights).sum().data)
        assert rel_err(t.grad, central_diff(value, t.data)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_a_distribution(values):
    p = F.softmax(Tensor(np.array(values))).data
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9
