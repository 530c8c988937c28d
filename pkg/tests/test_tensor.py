import math
import zlib

import numpy as np
import pytest

from mixda import tensor as T
from mixda.gradcheck import grad_check
from mixda.tensor import DimensionError, Tensor, backward


def param(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def numeric_grad(f, x, eps=1e-5):
    """Independent central-difference oracle on a raw array."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        up = f(x)
        x[i] = old - eps
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-4):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    out = T.matmul(Tensor(np.eye(2)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_matmul_hand_example():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_finite_difference():
    rng = np.random.default_rng(0)
    a0, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a = param(a0.copy())
    backward(T.matmul(a, Tensor(b)).sum())
    num = numeric_grad(lambda x: (x @ b).sum(), a0.copy())
    assert rel_err(a.grad, num) < 1e-6
    # closed form: out-grad (ones) @ b^T
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.T)


# ------------------------------------------------------------- elementwise


def test_relu_sign_cases():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_sigmoid_zero_and_extremes():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    out = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_gelu_constant():
    assert T.GELU_C == pytest.approx(0.7978845608028654, abs=1e-15)


def test_gelu_gradient_at_half():
    x = param([0.5])
    backward(T.gelu(x).sum())

    def g(v):
        return float(0.5 * v[0] * (1 + math.tanh(T.GELU_C * (v[0] + 0.044715 * v[0] ** 3))))

    num = numeric_grad(g, np.array([0.5]))
    assert rel_err(x.grad, num) < 1e-6


def test_elementwise_dispatch():
    x = Tensor([1.0, -2.0])
    assert T.elementwise(x, "scale", 3.0).data.tolist() == [3.0, -6.0]
    assert T.elementwise(x, "add", Tensor([1.0, 1.0])).data.tolist() == [2.0, -1.0]
    with pytest.raises(ValueError):
        T.elementwise(x, "tanh")


def test_broadcast_row_vector_and_error():
    out = T.add(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
    assert out.data.tolist() == [[1, 2, 3], [1, 2, 3]]
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


# -------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_gives_bias():
    bias = np.array([0.1, -0.2, 0.3])
    out = T.layer_norm(Tensor(np.full((1, 3), 7.0)), Tensor(np.ones(3)), Tensor(bias))
    assert np.allclose(out.data[0], bias, atol=0, rtol=0)


def test_layer_norm_hand_example():
    out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
    expected = 1.0 / math.sqrt(1.0 + 1e-5)  # centred values +-1, variance 1
    assert out.data[0].tolist() == pytest.approx([-expected, expected], abs=1e-12)
    assert expected == pytest.approx(0.999995, abs=1e-6)


def test_layer_norm_zero_width_error():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


# ----------------------------------------------------------------- softmax


def test_softmax_cases():
    assert T.softmax_rows(Tensor([0.0, 0.0, 0.0])).data.tolist() == pytest.approx([1 / 3] * 3)
    big = T.softmax_rows(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)
    assert T.softmax_rows(Tensor([math.log(2), math.log(1)])).data.tolist() == pytest.approx([2 / 3, 1 / 3])


# ------------------------------------------------------------------ losses


def test_masked_ce_uniform():
    loss, m = T.masked_cross_entropy(Tensor(np.zeros((3, 4))), [-100, 2, -100])
    assert m == 1
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_masked_ce_certain():
    logits = np.full((2, 3), -1e4)
    logits[0, 1] = logits[1, 2] = 0.0
    loss, _ = T.masked_cross_entropy(Tensor(logits), [1, 2])
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_masked_ce_two_positions():
    # row 0: p(label)=0.5, row 1: p(label)=0.25
    rows = np.log(np.array([[0.5, 0.5, 1e-300, 1e-300], [0.25, 0.25, 0.25, 0.25]]))
    loss, m = T.masked_cross_entropy(Tensor(rows), [0, 3])
    assert m == 2
    assert loss.item() == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)
    assert loss.item() == pytest.approx(1.0397, abs=1e-4)


def test_masked_ce_no_positions():
    with pytest.raises(T.NoSupervisedPositions):
        T.masked_cross_entropy(Tensor(np.zeros((2, 3))), [-100, -100])


def test_l2_alignment_cases():
    f = Tensor([[1.0, 0.0]])
    assert T.l2_alignment([(f, Tensor([[1.0, 0.0]]))]).item() == 0.0
    assert T.l2_alignment([(f, Tensor([[0.0, 1.0]]))]).item() == 2.0
    two = T.l2_alignment([(f, Tensor([[0.0, 1.0]])), (Tensor([[2.0, 0.0]]), Tensor([[0.0, 0.0]]))])
    assert two.item() == 3.0
    with pytest.raises(ValueError):
        T.l2_alignment([])
    with pytest.raises(DimensionError):
        T.l2_alignment([(f, Tensor([[1.0, 0.0, 0.0]]))])


def test_l2_alignment_averages_tokens_and_blocks_ffn_grad():
    f = param([[1.0, 0.0], [0.0, 0.0]])
    k = param([[0.0, 1.0], [0.0, 2.0]])
    loss = T.l2_alignment([(f, k)])
    assert loss.item() == pytest.approx((2.0 + 4.0) / 2)
    backward(loss)
    assert f.grad is None
    assert np.allclose(k.grad, (k.data - f.data))  # 2 * diff / 2 tokens


# ---------------------------------------------------------------- backward


def test_backward_linear_and_square():
    x = param([1.0, 2.0, 3.0])
    backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = param([1.0, 2.0])
    backward((y * y).sum())
    assert y.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        backward(param([1.0, 2.0]) * 2.0)


def test_reuse_doubles_gradient_and_single_parent_edge():
    x = param([3.0])
    y = x + x
    assert y.parent_ids == (x.node_id,)
    backward(y.sum())
    assert x.grad.tolist() == [2.0]


def test_gradients_accumulate_across_calls():
    x = param([1.0, -1.0])
    backward((x * 3.0).sum())
    backward((x * 3.0).sum())
    assert x.grad.tolist() == [6.0, 6.0]


def test_linearity_of_composite_loss():
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=(3, 3))
    lam = 0.5

    def losses(w):
        a = (T.matmul(w, Tensor(rng_fixed)) * T.matmul(w, Tensor(rng_fixed))).sum()
        b = T.sigmoid(w).sum()
        return a, b

    rng_fixed = rng.normal(size=(3, 2))
    grads = []
    for which in ("a", "b", "both"):
        w = param(w0.copy())
        a, b = losses(w)
        loss = {"a": a, "b": b, "both": T.scale(a, lam) + b}[which]
        backward(loss)
        grads.append(w.grad)
    assert np.allclose(grads[2], lam * grads[0] + grads[1], rtol=1e-12, atol=1e-12)


# ------------------------------------------------- finite-difference sweep


def _rand_inputs(rng, shape):
    return rng.normal(size=shape)


OPS = {
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: T.matmul(a, b), [(2, 3, 2), (2, 2)]),
    "add_broadcast": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "mul": (lambda a, b: T.mul(a, b), [(2, 5), (2, 5)]),
    "scale": (lambda a: T.scale(a, -1.7), [(6,)]),
    "relu": (lambda a: T.relu(a), [(8,)]),
    "gelu": (lambda a: T.gelu(a), [(8,)]),
    "sigmoid": (lambda a: T.sigmoid(a), [(8,)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [(3, 4), (4,), (4,)]),
    "softmax": (lambda a: T.softmax_rows(a), [(4, 5)]),
    "transpose_reshape": (lambda a: a.transpose(1, 0).reshape(12), [(3, 4)]),
    "index": (lambda a: a[1:, ::2], [(3, 4)]),
    "mean": (lambda a: a.mean(axis=0), [(4, 3)]),
    "masked_ce": (lambda a: T.masked_cross_entropy(a, [1, -100, 0, 3])[0], [(4, 5)]),
    "mse": (lambda a: T.mse(a, np.arange(5.0)), [(5,)]),
    "l2_alignment": (lambda k: T.l2_alignment([(Tensor(np.ones((3, 2))), k)]), [(3, 2)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_finite_differences_100_trials(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        xs = [param(_rand_inputs(rng, s)) for s in shapes]
        out = fn(*xs)
        weights = Tensor(rng.normal(size=out.shape))

        def f():
            return (fn(*xs) * weights).sum()

        rep = grad_check(f, xs, eps=1e-5)
        worst = max(worst, rep.max_rel_err)
    assert worst < 1e-6, worst


def test_grad_check_quadratic_and_constant():
    x = param([3.0])
    rep = grad_check(lambda: (x * x).sum(), [x])
    assert rep.max_rel_err < 1e-9
    assert x.grad.tolist() == [6.0]
    y = param([1.0, 2.0])
    rep = grad_check(lambda: T.scale(y, 0.0).sum(), [y])
    assert rep.max_abs_err == 0.0
    assert y.grad.tolist() == [0.0, 0.0]
