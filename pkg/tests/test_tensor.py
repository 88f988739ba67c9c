import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rptlab import tensor as T
from rptlab.errors import ContractError, DimensionError, NumericError
from rptlab.tensor import Parameter, Tensor, grad_check


def central_diff(f, arr, eps=1e-5):
    """Numerical gradient of scalar f() with respect to arr (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def check_op(build, *arrays, tol=1e-6):
    """Compare backward() of sum(build(...) * w) with central differences for every input."""
    rng = np.random.default_rng(0)
    params = [Parameter(a, f"x{i}") for i, a in enumerate(arrays)]
    out_shape = build(*params).shape
    w = rng.normal(size=out_shape)

    def loss():
        return T.sum_(build(*params) * w)

    loss().backward()
    for p in params:
        num = central_diff(lambda: loss().item(), p.data)
        assert rel_err(p.grad, num) < tol, p.name


# -- matmul --------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)


def test_matmul_hand_product():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradients_match_finite_differences(rng):
    check_op(T.matmul, rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))


def test_batched_matmul_and_linear_gradients(rng):
    check_op(T.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))
    check_op(T.linear, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5))


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor(np.full((1, 5), 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_hand_example():
    out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5)
    expected = 1.0 / np.sqrt(1.0 + 1e-5)
    assert np.allclose(out.data, [[-expected, expected]], atol=1e-12)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_zero_vector():
    out = T.layer_norm(Tensor(np.zeros(4)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros(4))


def test_layer_norm_empty_last_axis():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((3, 0))), Tensor(np.ones(0)), Tensor(np.zeros(0)))


def test_layer_norm_gradients(rng):
    check_op(lambda x, g, b: T.layer_norm(x, g, b), rng.normal(size=(3, 5)), rng.normal(size=5),
             rng.normal(size=5))
    check_op(lambda x, g, b: T.layer_norm(x, g, b), rng.normal(size=(2, 3, 4)), rng.normal(size=4),
             rng.normal(size=4))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 9)),
                  elements=st.floats(-50, 50, allow_nan=False)))
def test_layer_norm_standardises_rows(x):
    spread = x.max(axis=1) - x.min(axis=1)
    x = x[spread > 1e-3]
    if not len(x):
        return
    out = T.layer_norm(Tensor(x), Tensor(np.ones(x.shape[1])), Tensor(np.zeros(x.shape[1])), eps=1e-12).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-10)
    assert np.allclose(out.var(axis=1), 1.0, atol=1e-6)


# -- probability ops -----------------------------------------------------------

def test_softmax_equal_logits_uniform():
    assert np.allclose(T.softmax(Tensor(np.full(7, 2.5))).data, 1 / 7)


def test_softmax_hand_example():
    assert np.allclose(T.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_invalid_axis():
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.zeros((2, 3))), axis=2)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                  elements=st.floats(-30, 30, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    s = T.softmax(Tensor(x), axis=-1).data
    assert np.all(s > 0)
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_cross_entropy_uniform_is_log_v():
    V = 64
    for target in (0, 17, 63):
        assert T.cross_entropy(Tensor(np.zeros((1, V))), [target]).item() == pytest.approx(np.log(V), abs=1e-12)


def test_cross_entropy_ignore_index_and_reductions(rng):
    logits = rng.normal(size=(2, 3, 5))
    targets = np.array([[1, -100, 4], [0, 2, -100]])
    per = T.cross_entropy(Tensor(logits), targets, reduction="none").data
    assert per[0, 1] == 0.0 and per[1, 2] == 0.0
    s = T.cross_entropy(Tensor(logits), targets, reduction="sum").item()
    m = T.cross_entropy(Tensor(logits), targets, reduction="mean").item()
    assert s == pytest.approx(per.sum()) and m == pytest.approx(per.sum() / 4)


def test_probability_op_gradients(rng):
    check_op(lambda x: T.softmax(x, axis=-1), rng.normal(size=(3, 4)))
    check_op(lambda x: T.softmax(x, axis=0), rng.normal(size=(3, 4)))
    check_op(lambda x: T.log_softmax(x), rng.normal(size=(2, 3, 4)))
    targets = np.array([[0, 3, -100], [2, 1, 1]])
    check_op(lambda x: T.cross_entropy(x, targets, reduction="mean"), rng.normal(size=(2, 3, 4)))
    check_op(lambda x: T.cross_entropy(x, targets, reduction="none"), rng.normal(size=(2, 3, 4)))


def test_attention_gradients(rng):
    bias = np.where(rng.random((1, 1, 4)) < 0.3, T.MASK_FILL, 0.0)
    bias[..., 0] = 0.0
    check_op(lambda q, k, v: T.attention(q, k, v, bias), rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 4, 3)),
             rng.normal(size=(2, 4, 3)))


def test_elementwise_and_shape_gradients(rng):
    x = rng.normal(size=(3, 4))
    check_op(T.relu, x + np.sign(x) * 0.1)
    check_op(T.tanh, x)
    check_op(T.sigmoid, x)
    check_op(T.exp, x)
    check_op(T.log, np.abs(x) + 0.5)
    check_op(lambda a, b: a * b, x, rng.normal(size=4))
    check_op(lambda a, b: a / b, x, rng.normal(size=(3, 1)) + 3.0)
    check_op(lambda a, b: a - b, x, rng.normal(size=(1, 4)))
    check_op(lambda a: T.mean(a, axis=1), x)
    check_op(lambda a: T.sum_(a, axis=0, keepdims=True), x)
    check_op(lambda a: T.transpose(T.reshape(a, (2, 6)), (1, 0)), x)
    check_op(lambda a: a[1:, ::2], x)
    check_op(lambda a: a[np.array([0, 2, 2])], x)
    check_op(lambda a, b: T.concat_seq(a, b), x, rng.normal(size=(2, 4)))
    check_op(lambda a: T.broadcast_to(a, (2, 3, 4)), x)


def test_embedding_lookup_gradients_and_range(rng):
    ids = np.array([[0, 2, 2], [4, 1, 0]])
    check_op(lambda t: T.embedding_lookup(t, ids), rng.normal(size=(5, 3)))
    with pytest.raises(IndexError):
        T.embedding_lookup(Tensor(np.zeros((5, 3))), [5])
    with pytest.raises(IndexError):
        T.embedding_lookup(Tensor(np.zeros((5, 3))), [-1])


def test_concat_seq_shape_check():
    with pytest.raises(DimensionError):
        T.concat_seq(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


# -- dropout -------------------------------------------------------------------

def test_dropout_eval_is_identity(rng):
    x = Tensor(rng.normal(size=(4, 5)))
    assert T.dropout(x, 0.5, training=False) is x


def test_dropout_scales_survivors(rng):
    x = Tensor(np.ones((200, 50)))
    y = T.dropout(x, 0.2, training=True, rng=rng).data
    kept = y[y != 0]
    assert np.allclose(kept, 1 / 0.8)
    assert abs((y == 0).mean() - 0.2) < 0.02


def test_dropout_rate_bounds():
    with pytest.raises(ContractError):
        T.dropout(Tensor(np.ones(3)), 1.0, training=True, rng=np.random.default_rng(0))


# -- backward semantics --------------------------------------------------------

def test_backward_of_sum_is_ones(rng):
    x = Parameter(rng.normal(size=(3, 2)), "x")
    T.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_backward_constant_loss_gives_zero():
    x = Parameter(np.ones(3), "x")
    loss = T.sum_(x * 0.0)
    loss.backward()
    assert np.array_equal(x.grad, np.zeros(3))


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        (Parameter(np.ones(3), "x") * 2.0).backward()


def test_backward_accumulates_until_zeroed():
    x = Parameter(np.ones(2), "x")
    T.sum_(x * 3.0).backward()
    T.sum_(x * 3.0).backward()
    assert np.array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    T.sum_(x * 3.0).backward()
    assert np.array_equal(x.grad, [3.0, 3.0])


def test_no_grad_for_non_requiring_tensors(rng):
    x = Parameter(rng.normal(size=3), "x")
    c = Tensor(rng.normal(size=3))
    T.sum_(x * c).backward()
    assert c.grad is None and x.grad is not None


def test_two_layer_mlp_gradients(rng):
    x = Tensor(rng.normal(size=(5, 4)))
    w1, b1 = Parameter(rng.normal(size=(4, 6)), "w1"), Parameter(rng.normal(size=6), "b1")
    w2, b2 = Parameter(rng.normal(size=(6, 3)), "w2"), Parameter(rng.normal(size=3), "b2")
    y = np.array([0, 2, 1, 1, 0])

    def f():
        h = T.relu(T.linear(x, w1, b1))
        return T.cross_entropy(T.linear(h, w2, b2), y)

    report = grad_check(f, [w1, b1, w2, b2])
    assert report.passed, report.errors
    assert report.max_error < 1e-6


def test_backward_is_deterministic(rng):
    data = rng.normal(size=(4, 6))

    def grads():
        w = Parameter(data, "w")
        x = Tensor(np.arange(12.0).reshape(3, 4) / 10)
        T.cross_entropy(T.matmul(x, w), [0, 5, 2]).backward()
        return w.grad

    assert np.array_equal(grads(), grads())


# -- grad_check utility --------------------------------------------------------

def test_grad_check_linear_function_exact(rng):
    w = Parameter(rng.normal(size=(3, 2)), "w")
    c = rng.normal(size=(3, 2))
    report = grad_check(lambda: T.sum_(w * c), [w])
    assert report.max_error < 1e-10


def test_grad_check_constant_function_passes():
    w = Parameter(np.ones(3), "w")
    report = grad_check(lambda: T.sum_(Tensor(np.ones(3))), [w])
    assert report.passed and report.max_error == 0.0


def test_grad_check_names_non_finite_parameter():
    w = Parameter(np.array([np.inf, 2.0]), "reparam.bad")
    with pytest.raises(NumericError, match="reparam.bad"):
        grad_check(lambda: T.sum_(w * 2.0), [w])
    # finite at the point, but the central difference steps outside log's domain
    v = Parameter(np.array([1e-6, 2.0]), "prompt.edge")
    with np.errstate(invalid="ignore"), pytest.raises(NumericError, match="prompt.edge"):
        grad_check(lambda: T.sum_(T.log(v)), [v])


def test_grad_check_detects_wrong_gradient():
    w = Parameter(np.array([0.3, -0.2]), "w")

    def broken():
        # forward is w^2 but backward claims 3w
        return T.sum_(T._make(w.data ** 2, (w,), lambda g: (3.0 * w.data * g,)))

    assert not grad_check(broken, [w]).passed


def test_parameter_trainable_flag_clears_grad():
    p = Parameter(np.ones(2), "p")
    T.sum_(p).backward()
    p.trainable = False
    assert p.grad is None and not p.requires_grad
