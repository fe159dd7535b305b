import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases
import oracles
from camloss import tensor as T
from camloss.gradcheck import finite_difference_check


def leaf(values, name):
    return T.Tensor(values, requires_grad=True, name=name)


# ------------------------------------------------------------- conv2d


def test_conv2d_one_by_one_kernel_scales():
    x = T.Tensor([[[[1, 2], [3, 4]]]])
    out = T.conv2d(x, T.Tensor([[[[2]]]]), T.Tensor([0.0]), 1, 0)
    np.testing.assert_array_equal(out.data, [[[[2, 4], [6, 8]]]])


def test_conv2d_all_ones_kernel_sums_window():
    x = T.Tensor([[[[1, 2], [3, 4]]]])
    out = T.conv2d(x, T.Tensor(np.ones((1, 1, 2, 2))), T.Tensor([0.0]), 1, 0)
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 10


def test_conv2d_zero_input_gives_zero(rng):
    out = T.conv2d(T.Tensor(np.zeros((2, 3, 5, 5))), T.Tensor(rng.standard_normal((4, 3, 3, 3))),
                   T.Tensor(np.zeros(4)), 1, 1)
    assert not out.data.any()


def test_conv2d_rejects_inexact_output_size():
    with pytest.raises(ValueError, match="not exact"):
        T.conv2d(T.Tensor(np.zeros((1, 1, 4, 4))), T.Tensor(np.zeros((1, 1, 3, 3))), None, 2, 1)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))), None, 1, 1)


def test_conv2d_rejects_oversized_kernel():
    with pytest.raises(ValueError):
        T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 3))), None, 1, 0)


def test_conv2d_asymmetric_padding_matches_loops(double, rng):
    x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 2, (1, 0))
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(out.data, oracles.conv2d_loops(x, w, b, 2, (1, 0)), atol=1e-12)


def test_conv2d_channel_major_layout_matches(rng):
    x, w, b = rng.standard_normal((3, 2, 6, 6)), rng.standard_normal((4, 2, 3, 3)), rng.standard_normal(4)
    with T.precision("double"):
        nchw = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 2, (1, 0)).data
        cnhw = T.conv2d(T.Tensor(x.transpose(1, 0, 2, 3)), T.Tensor(w), T.Tensor(b), 2, (1, 0), layout="CNHW").data
    np.testing.assert_allclose(cnhw.transpose(1, 0, 2, 3), nchw, atol=1e-12)
    with pytest.raises(ValueError, match="layout"):
        T.conv2d(T.Tensor(x), T.Tensor(w), None, 1, 1, layout="NHWC")


def test_conv2d_chunking_does_not_change_results(rng, monkeypatch):
    x, w = rng.standard_normal((5, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
    with T.precision("double"):
        whole = T.conv2d(T.Tensor(x), T.Tensor(w), None, 1, 1).data
        monkeypatch.setattr(T, "CONV_CHUNK_BYTES", 1)
        pieces = T.conv2d(T.Tensor(x), T.Tensor(w), None, 1, 1).data
    np.testing.assert_allclose(pieces, whole, atol=1e-12)


def test_conv2d_gradients_across_chunks(monkeypatch):
    monkeypatch.setattr(T, "CONV_CHUNK_BYTES", 1)
    rng = np.random.default_rng(3)
    for _ in range(3):
        fn, point = gradcases.OPERATORS["conv2d"](rng)
        assert finite_difference_check(fn, point, 1e-5).max_rel_err < 1e-6


# ------------------------------------------------------------- elementwise


def test_relu_sign_boundaries():
    np.testing.assert_array_equal(T.relu(T.Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_relu_blocks_gradient_for_negative_input():
    x = leaf([-1.0, -2.0, -0.5], "x")
    with T.Tape() as tape:
        loss = T.sum(T.relu(x))
    grads = T.backward(tape, loss)
    assert not T.relu(T.Tensor([-3.0, -1.0])).data.any()
    np.testing.assert_array_equal(grads["x"], 0)


def test_relu_identity_on_positive():
    x = np.array([0.5, 1.0, 3.0], np.float32)
    np.testing.assert_array_equal(T.relu(T.Tensor(x)).data, x)


def test_gap_examples():
    x = T.Tensor([[[[1, 2], [3, 4]], [[5, 5], [5, 5]], [[0, 0], [0, 0]]]])
    np.testing.assert_allclose(T.global_average_pool(x).data, [[2.5, 5.0, 0.0]])


def test_linear_examples():
    assert T.linear(T.Tensor([[1, 1]]), T.Tensor([[2, -1]])).data[0, 0] == 1
    pooled = T.Tensor([[0.3, -1.2, 4.0]])
    np.testing.assert_allclose(T.linear(pooled, T.Tensor(np.eye(3))).data, pooled.data)
    assert not T.linear(pooled, T.Tensor(np.zeros((2, 3)))).data.any()
    with pytest.raises(ValueError):
        T.linear(pooled, T.Tensor(np.zeros((2, 4))))


def test_elementwise_examples():
    np.testing.assert_array_equal(T.elementwise("sub", T.Tensor([1, 2]), T.Tensor([1, 2])).data, [0, 0])
    np.testing.assert_array_equal(T.elementwise("abs", T.Tensor([-3, 2])).data, [3, 2])
    np.testing.assert_array_equal(T.elementwise("scale", T.Tensor([1, 2]), 3).data, [3, 6])
    with pytest.raises(ValueError):
        T.elementwise("add", T.Tensor([1, 2]), T.Tensor([1, 2, 3]))
    with pytest.raises(ZeroDivisionError):
        T.elementwise("div", T.Tensor([1, 2]), T.Tensor([1, 0]))


def test_abs_subgradient_at_zero_is_zero():
    x = leaf([0.0, -2.0, 3.0], "x")
    with T.Tape() as tape:
        loss = T.sum(T.abs(x))
    np.testing.assert_array_equal(T.backward(tape, loss)["x"], [0, -1, 1])


# ------------------------------------------------------------- reductions


def test_reduce_examples():
    assert T.reduce("sum", T.Tensor([[1, 2], [3, 4]])).item() == 10
    assert T.reduce("mean", T.Tensor(np.full((3, 2), 7.0))).item() == 7.0
    with pytest.raises(ValueError):
        T.reduce("sum", T.Tensor(np.zeros((0, 3))))


def test_min_routes_gradient_to_first_occurrence():
    x = leaf([3.0, 1.0, 1.0], "x")
    with T.Tape() as tape:
        m = T.reduce("min", x)
    assert m.item() == 1
    np.testing.assert_array_equal(T.backward(tape, m)["x"], [0, 1, 0])


def test_max_first_occurrence_is_row_major_over_reduced_axes():
    x = leaf([[[5.0, 1.0], [0.0, 5.0]], [[2.0, 2.0], [2.0, 2.0]]], "x")
    with T.Tape() as tape:
        m = T.sum(T.reduce("max", x, axes=(1, 2)))
    g = T.backward(tape, m)["x"]
    np.testing.assert_array_equal(g, [[[1, 0], [0, 0]], [[1, 0], [0, 0]]])


def test_expand_requires_singleton_axes():
    with pytest.raises(ValueError):
        T.expand(T.Tensor(np.zeros((2, 3))), (2, 4))


# ------------------------------------------------------------- backward


def test_backward_square():
    x = leaf([3.0], "x")
    with T.Tape() as tape:
        loss = T.sum(x * x)
    np.testing.assert_allclose(T.backward(tape, loss)["x"], [6.0])


def test_backward_masked_parameter_gets_zero():
    w = leaf([1.0, 2.0], "W")
    with T.Tape() as tape:
        loss = T.sum(w * w)
    grads = T.backward(tape, loss, mask={"W"})
    np.testing.assert_array_equal(grads["W"], 0)
    assert w.grad is None


def test_backward_independent_parameter_gets_zero():
    a, b = leaf([1.0], "a"), leaf([2.0], "b")
    with T.Tape() as tape:
        loss = T.sum(a * a) + T.sum(T.scale(b, 0.0))
    grads = T.backward(tape, loss)
    np.testing.assert_array_equal(grads["b"], 0)


def test_backward_rejects_non_scalar_and_foreign_loss():
    x = leaf([1.0, 2.0], "x")
    with T.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        T.backward(tape, y)
    with T.Tape():
        z = T.sum(x)
    with pytest.raises(ValueError, match="tape"):
        T.backward(tape, z)


def test_gradients_accumulate_until_cleared():
    x = leaf([2.0], "x")
    for _ in range(2):
        with T.Tape() as tape:
            loss = T.sum(x * x)
        T.backward(tape, loss)
    np.testing.assert_allclose(x.grad, [8.0])
    x.zero_grad()
    assert x.grad is None


def test_empty_then_full_mask_leaves_gradients_unchanged(rng):
    a, b = leaf(rng.standard_normal(3), "a"), leaf(rng.standard_normal(3), "b")
    with T.Tape() as tape:
        loss = T.sum(T.relu(a * b) + a)
    first = {k: v.copy() for k, v in T.backward(tape, loss).items()}
    second = T.backward(tape, loss, mask={"a", "b"})
    for k in first:
        np.testing.assert_array_equal(second[k], first[k])


def test_no_grad_tensor_never_accumulates():
    c = T.Tensor([1.0, 2.0])
    x = leaf([1.0, 1.0], "x")
    with T.Tape() as tape:
        loss = T.sum(c * x)
    grads = T.backward(tape, loss)
    assert c.grad is None and id(c) not in grads


def test_no_recording_without_tape():
    x = leaf([1.0], "x")
    y = x * 2.0
    assert not y.requires_grad and y._tape is None


def test_tape_order_is_topological(rng):
    x = leaf(rng.standard_normal((2, 3)), "x")
    with T.Tape() as tape:
        y = T.relu(x) * x
        T.sum(T.abs(y) + y)
    for i, node in enumerate(tape.nodes):
        for p in node.parents:
            assert p._index < i


def test_backward_terms_equals_separate_passes(double, rng):
    """A joint sweep with a different mask per term equals one backward pass per term."""
    kernels = leaf(rng.standard_normal((3, 2, 3, 3)), "conv.weight")
    head = leaf(rng.standard_normal((2, 3)), "head")
    x = T.Tensor(rng.standard_normal((2, 2, 6, 6)))

    def run(joint):
        kernels.zero_grad()
        head.zero_grad()
        with T.Tape() as tape:
            feats = T.relu(T.conv2d(x, kernels, None, 1, 1))
            logits = T.linear(T.global_average_pool(feats), head)
            first = T.sum(T.log_softmax(logits))
            second = T.scale(T.sum(T.abs(T.sum(feats, axes=1))), 0.3) + T.sum(logits * logits)
        if joint:
            T.backward_terms(tape, [(first, ()), (second, {"head"})])
        else:
            T.backward(tape, first)
            T.backward(tape, second, mask={"head"})
        return kernels.grad.copy(), head.grad.copy()

    joint, separate = run(True), run(False)
    for a, b in zip(joint, separate):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_replay_is_bitwise_deterministic(rng):
    x0 = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
    w0 = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)

    def once():
        w = leaf(w0, "w")
        with T.Tape() as tape:
            loss = T.sum(T.relu(T.conv2d(T.Tensor(x0), w, None, 2, (1, 0))))
        return T.backward(tape, loss)["w"]

    assert np.array_equal(once(), once())


# ------------------------------------------------------------- finite differences


def test_fd_quadratic_exact():
    rep = finite_difference_check(lambda x: T.sum(x * x), [np.array([3.0])], 1e-5)
    np.testing.assert_allclose(rep.numeric[0], [6.0], rtol=1e-9)
    assert rep.max_rel_err < 1e-9


def test_fd_constant_function():
    rep = finite_difference_check(lambda x: T.sum(T.scale(x, 0.0)) + 5.0, [np.array([1.0, 2.0])])
    assert rep.max_abs_err == 0.0
    np.testing.assert_array_equal(rep.numeric[0], 0)


def test_fd_two_class_cross_entropy(rng):
    from camloss import losses as L

    x, w = rng.standard_normal((4, 3)), rng.standard_normal((2, 3))
    t = np.array([0, 1, 1, 0])
    rep = finite_difference_check(lambda w: L.cross_entropy(T.linear(T.Tensor(x), w), t), [w])
    assert rep.max_rel_err < 1e-6


def test_fd_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        finite_difference_check(lambda x: T.sum(T.scale(x, float("inf"))), [np.array([1.0])])


@pytest.mark.parametrize("name", sorted(gradcases.OPERATORS))
def test_operator_gradients_few_trials(name):
    rng = np.random.default_rng(7)
    for _ in range(5):
        fn, point = gradcases.OPERATORS[name](rng)
        assert finite_difference_check(fn, point, 1e-5).max_rel_err < 1e-6


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 3), k=st.integers(1, 3), size=st.integers(3, 8),
    kernel=st.integers(1, 3), stride=st.integers(1, 2), seed=st.integers(0, 2**31 - 1),
)
def test_conv2d_matches_loop_oracle(n, c, k, size, kernel, stride, seed):
    rng = np.random.default_rng(seed)
    pad = (1, 1 + (size + 2 - kernel) % stride)
    x = rng.standard_normal((n, c, size, size))
    w = rng.standard_normal((k, c, kernel, kernel))
    b = rng.standard_normal(k)
    with T.precision("double"):
        out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, pad).data
    np.testing.assert_allclose(out, oracles.conv2d_loops(x, w, b, stride, pad), atol=1e-9)
