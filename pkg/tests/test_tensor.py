"""Autodiff engine: forward values, backward gradients, pruning, gradcheck."""

import math

import numpy as np
import pytest

from mslt_lab import tensor as T
from mslt_lab.errors import NumericsError, ShapeError


def numeric_grad(f, x, eps=1e-5):
    """Independent central-difference oracle over a numpy array input."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def check_op_grads(build_loss, arrays, eps=1e-5, tol=1e-6):
    """Compare engine grads of scalar build_loss(tensors...) against the oracle."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    T.backward(loss)
    for t, a in zip(tensors, arrays):
        num = numeric_grad(lambda: build_loss(*[T.Tensor(x) for x in arrays]).item(), a, eps)
        assert t.grad is not None
        assert max_rel_err(t.grad, num) < tol


def sum_of(t):
    # reduce to scalar through ops the engine already defines
    flat = T.reshape(t, (1, t.size))
    ones = T.Tensor(np.ones((t.size, 1)))
    return T.reshape(T.matmul(flat, ones), ())


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = T.Tensor(np.eye(2))
    b = T.Tensor([[2.0, 3.0], [4.0, 5.0]])
    assert np.array_equal(T.matmul(a, b).data, b.data)


def test_matmul_inner_product():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(T.Tensor(np.zeros((3, 4))), T.Tensor(np.zeros((3, 2))))
    assert "(3, 4)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_matmul_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    check_op_grads(lambda x, y: sum_of(T.matmul(x, y)), [a, b])


def test_matmul_batched_broadcast_backward():
    rng = np.random.default_rng(12)
    a = rng.normal(size=(2, 3, 4, 5))
    b = rng.normal(size=(5, 3))  # broadcast up the batch dims
    check_op_grads(lambda x, y: sum_of(T.matmul(x, y)), [a, b])


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_uniform():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0]), axis=-1)
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_overflow_guard():
    out = T.softmax(T.Tensor([1000.0, 0.0]), axis=-1)
    assert abs(out.data[0] - 1.0) < 1e-12
    assert abs(out.data[1]) < 1e-12


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    for scale in (1.0, 50.0, 1e4):
        x = rng.normal(size=(4, 7)) * scale
        out = T.softmax(T.Tensor(x), axis=-1)
        assert np.all(np.abs(out.data.sum(axis=-1) - 1.0) < 1e-12)


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(13)
    x = rng.normal(size=5)
    w = rng.normal(size=5)  # weight the outputs so the grad is non-trivial

    def loss(t):
        return sum_of(T.mul(T.softmax(t, axis=-1), T.Tensor(w)))

    check_op_grads(loss, [x])


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    x = T.Tensor([[5.0, 5.0, 5.0, 5.0]])
    out = T.layer_norm(x, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)), eps=1e-12)
    assert np.allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_unit_variance_pair():
    out = T.layer_norm(T.Tensor([[1.0, 3.0]]), T.Tensor(np.ones(2)),
                       T.Tensor(np.zeros(2)), eps=1e-14)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-6)


def test_layer_norm_backward_all_inputs():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(2, 8))
    gamma = rng.normal(size=8)
    beta = rng.normal(size=8)
    w = rng.normal(size=(2, 8))

    def loss(xx, gg, bb):
        return sum_of(T.mul(T.layer_norm(xx, gg, bb, eps=1e-5), T.Tensor(w)))

    check_op_grads(loss, [x, gamma, beta], tol=1e-5)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        T.layer_norm(T.Tensor([[1.0, 2.0]]), T.Tensor(np.ones(2)),
                     T.Tensor(np.zeros(2)), eps=0.0)


# ---------------------------------------------------------------------------
# gelu / tanh
# ---------------------------------------------------------------------------


def test_gelu_zero_and_asymptote():
    assert T.gelu(T.Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(T.Tensor([100.0])).data[0] - 100.0) < 1e-9


def test_gelu_backward_matches_finite_differences():
    rng = np.random.default_rng(15)
    x = rng.normal(size=9)
    check_op_grads(lambda t: sum_of(T.gelu(t)), [x])


def test_tanh_backward():
    rng = np.random.default_rng(16)
    check_op_grads(lambda t: sum_of(T.tanh(t)), [rng.normal(size=6)])


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    logits = T.Tensor(np.zeros((2, 4)))
    loss = T.cross_entropy(logits, [1, 3])
    assert abs(loss.item() - math.log(4)) < 1e-12


def test_cross_entropy_confident_logit_drives_loss_to_zero():
    prev = None
    for mag in (5.0, 20.0, 80.0):
        logits = np.zeros((1, 4))
        logits[0, 2] = mag
        loss = T.cross_entropy(T.Tensor(logits), [2]).item()
        if prev is not None:
            assert loss < prev
        prev = loss
    assert prev < 1e-30


def test_cross_entropy_matches_logsumexp_oracle():
    rng = np.random.default_rng(17)
    logits = rng.normal(size=(3, 5)) * 3.0
    targets = [4, 0, 2]
    # independent direct formula: -x[t] + log(sum(exp(x)))
    expected = np.mean([
        -logits[i, t] + math.log(np.exp(logits[i]).sum()) for i, t in enumerate(targets)
    ])
    got = T.cross_entropy(T.Tensor(logits), targets).item()
    assert abs(got - expected) < 1e-10


def test_cross_entropy_ignore_index():
    rng = np.random.default_rng(18)
    logits = rng.normal(size=(4, 6))
    all_ignored = T.cross_entropy(T.Tensor(logits), [-1, -1, -1, -1])
    assert all_ignored.item() == 0.0
    # ignored rows contribute nothing to the mean
    mixed = T.cross_entropy(T.Tensor(logits), [2, -1, -1, -1]).item()
    only = T.cross_entropy(T.Tensor(logits[:1]), [2]).item()
    assert abs(mixed - only) < 1e-12


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(T.Tensor(np.zeros((1, 4))), [4])


def test_cross_entropy_backward_matches_finite_differences():
    rng = np.random.default_rng(19)
    logits = rng.normal(size=(3, 5))
    check_op_grads(lambda t: T.cross_entropy(t, [1, -1, 4]), [logits])


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def test_add_mul_scale_broadcast_backward():
    rng = np.random.default_rng(20)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    check_op_grads(lambda x, y: sum_of(T.add(x, y)), [a, b])
    check_op_grads(lambda x, y: sum_of(T.mul(x, y)), [a, b])
    check_op_grads(lambda x: sum_of(T.scale(x, -2.5)), [a])


def test_transpose_reshape_select_backward():
    rng = np.random.default_rng(21)
    a = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(3, 2, 4))
    check_op_grads(lambda x: sum_of(T.mul(T.transpose(x, (1, 0, 2)), T.Tensor(w))), [a])
    check_op_grads(lambda x: sum_of(T.reshape(x, (6, 4))), [a])
    w2 = rng.normal(size=(2, 4))
    check_op_grads(lambda x: sum_of(T.mul(T.select(x, 1, 1), T.Tensor(w2))), [a])


def test_embedding_lookup_and_scatter_backward():
    rng = np.random.default_rng(22)
    weight = rng.normal(size=(7, 3))
    ids = np.array([[0, 2, 2], [6, 0, 1]])
    check_op_grads(lambda w: sum_of(T.embedding(w, ids)), [weight])
    with pytest.raises(IndexError):
        T.embedding(T.Tensor(weight), np.array([7]))


def test_dropout_identity_at_rate_zero():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    assert T.dropout(x, 0.0, None) is x


def test_dropout_scales_and_masks():
    rng = np.random.default_rng(23)
    x = T.Tensor(np.ones((1000,)), requires_grad=True)
    out = T.dropout(x, 0.25, rng)
    kept = out.data != 0
    assert abs(kept.mean() - 0.75) < 0.05
    assert np.allclose(out.data[kept], 1 / 0.75)
    T.backward(sum_of(out))
    assert np.allclose(x.grad[kept], 1 / 0.75) and np.allclose(x.grad[~kept], 0.0)


# ---------------------------------------------------------------------------
# backward traversal and pruning
# ---------------------------------------------------------------------------


def test_backward_square_gradient():
    w = T.Parameter("w", np.array(3.0))
    loss = T.mul(w.tensor, w.tensor)
    T.backward(loss)
    assert float(w.grad) == pytest.approx(6.0)


def test_backward_requires_scalar():
    x = T.Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.scale(x, 2.0))


def test_backward_accumulates_until_zeroed():
    w = T.Parameter("w", np.array(3.0))
    loss = T.mul(w.tensor, w.tensor)
    T.backward(loss)
    T.backward(loss)
    assert float(w.grad) == pytest.approx(12.0)
    w.zero_grad()
    assert w.grad is None


def test_all_frozen_graph_records_nothing():
    w = T.Parameter("w", np.array([1.0, 2.0]), trainable=False)
    out = T.scale(T.gelu(w.tensor), 3.0)
    loss = sum_of(out)
    assert loss.node is None and not loss.requires_grad
    trace = []
    T.backward(loss, trace=trace)
    assert trace == []
    assert w.grad is None


def test_frozen_parameter_never_allocates_grad():
    w = T.Parameter("w", np.ones((4, 4)), trainable=False)
    v = T.Parameter("v", np.ones((4, 4)), trainable=True)
    loss = sum_of(T.matmul(w.tensor, v.tensor))
    T.backward(loss)
    assert w.grad is None
    assert v.grad is not None


def test_no_grad_disables_recording():
    w = T.Parameter("w", np.array([2.0]))
    with T.no_grad():
        out = T.gelu(w.tensor)
    assert out.node is None and not out.requires_grad


def test_pruned_backward_equals_constant_input_graph():
    # frozen chain -> trainable chain must visit exactly the nodes of the
    # same trainable chain fed with precomputed constant activations
    rng = np.random.default_rng(24)
    frozen = [T.Parameter(f"f{i}", rng.normal(size=(4, 4)), trainable=False) for i in range(2)]
    live = [T.Parameter(f"l{i}", rng.normal(size=(4, 4))) for i in range(2)]
    x0 = T.Tensor(rng.normal(size=(4, 4)))

    def tail(x):
        for p in live:
            x = T.gelu(T.matmul(x, p.tensor))
        return sum_of(x)

    x = x0
    for p in frozen:
        x = T.gelu(T.matmul(x, p.tensor))
    trace_frozen = []
    T.backward(tail(x), trace=trace_frozen)

    with T.no_grad():
        const = x0
        for p in frozen:
            const = T.gelu(T.matmul(const, p.tensor))
    trace_const = []
    T.backward(tail(T.Tensor(const.data)), trace=trace_const)

    assert sorted(trace_frozen) == sorted(trace_const)
    assert trace_frozen  # sanity: the live part does record work


# ---------------------------------------------------------------------------
# finite_diff_check
# ---------------------------------------------------------------------------


def test_finite_diff_check_quadratic():
    rng = np.random.default_rng(25)
    params = [T.Parameter(f"p{i}", rng.normal(size=(3,))) for i in range(3)]

    def loss_fn():
        total = None
        for p in params:
            sq = sum_of(T.mul(p.tensor, p.tensor))
            total = sq if total is None else T.add(total, sq)
        return total

    report = T.finite_diff_check(loss_fn, params, eps=1e-4, richardson=False)
    assert report.global_max < 1e-8
    assert set(report.per_parameter) == {"p0", "p1", "p2"}


def test_finite_diff_check_skips_frozen_and_subsamples():
    rng = np.random.default_rng(26)
    a = T.Parameter("a", rng.normal(size=(10, 10)))
    b = T.Parameter("b", rng.normal(size=(10, 10)), trainable=False)

    def loss_fn():
        return sum_of(T.gelu(T.matmul(a.tensor, b.tensor)))

    report = T.finite_diff_check(loss_fn, [a, b], max_coords_per_param=7, seed=1)
    assert set(report.per_parameter) == {"a"}
    assert report.coords_checked == 7


def test_finite_diff_check_detects_corrupted_backward():
    rng = np.random.default_rng(27)
    p = T.Parameter("p", rng.normal(size=(5,)))

    def loss_fn():
        return sum_of(T.gelu(p.tensor))

    with T.corrupt_gelu_backward():
        report = T.finite_diff_check(loss_fn, [p])
    assert report.global_max > 1e-1


def test_finite_diff_check_rejects_nonfinite_loss():
    p = T.Parameter("p", np.array([1.0]))

    def loss_fn():
        return T.Tensor(np.float64("nan"))

    with pytest.raises(NumericsError):
        T.finite_diff_check(loss_fn, [p])


def test_finite_diff_check_eps_domain():
    p = T.Parameter("p", np.array([1.0]))
    with pytest.raises(ValueError):
        T.finite_diff_check(lambda: sum_of(p.tensor), [p], eps=0.02)
