"""Unit tests for the reverse-mode autodiff engine.

Hand-computed values pin down the easy cases; central finite differences
(grad_check, eps=1e-6) act as the oracle for every primitive's backward
rule on batches of seeded random inputs.
"""

import numpy as np
import pytest

from gram import autodiff as ad
from gram.autodiff import (
    GraphConsumedError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    add_n,
    backward,
    bce_loss,
    concat,
    gather,
    grad_check,
    matmul,
    mean_pool,
    mse_half,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    stack,
    sub,
    sum_all,
    tanh,
    tensor,
    track_activations,
    transpose,
)

FD_TOL = 1e-5
N_TRIALS = 100


def leaf(rng, shape):
    return tensor(rng.standard_normal(shape), grad=True)


# ---------------------------------------------------------------------------
# Hand-checked forward values
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = tensor(np.eye(2))
    b = tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(a, b)
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_projector():
    p = tensor([[1.0, 0.0], [0.0, 0.0]])
    b = tensor([[5.0, 6.0], [7.0, 8.0]])
    out = matmul(p, b)
    assert np.array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        matmul(tensor(np.ones(3)), tensor(np.ones((3, 2))))


def test_sigmoid_at_zero():
    x = tensor(0.0, grad=True)
    out = sigmoid(x)
    assert out.item() == pytest.approx(0.5)
    grads = backward(out)
    assert grads[x].item() == pytest.approx(0.25)


def test_sigmoid_extreme_inputs_stay_finite():
    out = sigmoid(tensor([-800.0, 800.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == pytest.approx(0.0, abs=1e-12)
    assert out.data[1] == pytest.approx(1.0, abs=1e-12)


def test_gather_repeated_ids_accumulate():
    table = tensor(np.arange(12.0).reshape(4, 3), grad=True)
    out = gather(table, [2, 2, 0])
    assert np.array_equal(out.data, table.data[[2, 2, 0]])
    # upstream grads: ones -> row 2 of table grad receives 1+1
    g = backward(sum_all(out))[table].data
    assert np.array_equal(g[2], [2.0, 2.0, 2.0])
    assert np.array_equal(g[0], [1.0, 1.0, 1.0])
    assert np.array_equal(g[1], [0.0, 0.0, 0.0])


def test_gather_out_of_range():
    table = tensor(np.zeros((4, 3)))
    with pytest.raises(IndexError):
        gather(table, [0, 4])
    with pytest.raises(IndexError):
        gather(table, [-1])


def test_bce_half_probability():
    p = tensor([0.5], grad=True)
    y = tensor([1.0])
    out = bce_loss(p, y)
    assert out.item() == pytest.approx(np.log(2.0), rel=1e-12)


def test_bce_perfect_prediction_near_zero():
    p = tensor([1.0, 0.0], grad=True)
    y = tensor([1.0, 0.0])
    out = bce_loss(p, y)
    assert out.item() < 1e-10


def test_bce_rejects_bad_labels():
    p = tensor([0.5])
    with pytest.raises(ValueError):
        bce_loss(p, tensor([0.5]))
    with pytest.raises(ValueError):
        bce_loss(p, tensor([2.0]))


def test_bce_sum_reduction():
    p = tensor([0.5, 0.5], grad=True)
    y = tensor([1.0, 0.0])
    assert bce_loss(p, y, reduction="sum").item() == pytest.approx(2.0 * np.log(2.0))
    assert bce_loss(p, y, reduction="mean").item() == pytest.approx(np.log(2.0))


def test_mse_half_values():
    a = tensor([1.0, 0.0])
    b = tensor([0.0, 0.0], grad=True)
    out = mse_half(a, b)
    assert out.item() == pytest.approx(0.5)
    g = backward(out)[b].data
    assert np.allclose(g, [-1.0, 0.0])

    same = tensor([3.0, -2.0], grad=True)
    out2 = mse_half(same.detach(), same)
    assert out2.item() == 0.0
    assert np.array_equal(backward(out2)[same].data, [0.0, 0.0])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    x = tensor(rng.standard_normal((5, 8)) * 30.0)
    out = softmax(x, axis=-1)
    assert np.allclose(out.data.sum(axis=-1), 1.0)
    assert np.all(out.data >= 0.0)


def test_mean_pool_value():
    x = tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    assert np.allclose(mean_pool(x, axis=0).data, [3.0, 4.0])
    assert np.allclose(mean_pool(x, axis=1).data, [1.5, 3.5, 5.5])


def test_add_bias_row_broadcast():
    x = tensor(np.zeros((3, 2)), grad=True)
    b = tensor([1.0, -1.0], grad=True)
    out = add(x, b)
    assert np.allclose(out.data, [[1.0, -1.0]] * 3)
    g = backward(sum_all(out))
    assert np.allclose(g[b].data, [3.0, 3.0])
    assert g[x].data.shape == (3, 2)


def test_add_rejects_general_broadcast():
    with pytest.raises(ShapeError):
        add(tensor(np.ones((3, 2))), tensor(np.ones((3, 1))))


# ---------------------------------------------------------------------------
# Finite-difference checks, one batch of random inputs per primitive
# ---------------------------------------------------------------------------


def run_trials(make_f, make_x, n=N_TRIALS, tol=FD_TOL):
    """Each trial builds a fresh scalar function (with its own random
    readout weights, so upstream gradients are non-uniform) and a fresh
    random input, then checks reverse-mode against central differences."""
    rng = np.random.default_rng(20240511)
    worst = 0.0
    for _ in range(n):
        x = make_x(rng)
        worst = max(worst, grad_check(make_f(rng), x))
    assert worst <= tol, f"worst relative error {worst:.3e}"


def test_fd_matmul():
    def make_f(rng):
        b = Tensor(rng.standard_normal((4, 2)))
        c = Tensor(rng.standard_normal((3, 2)))
        return lambda x: sum_all(mul(matmul(x, b), c))

    run_trials(make_f, lambda rng: leaf(rng, (3, 4)))


def test_fd_matmul_right_operand():
    def make_f(rng):
        a = Tensor(rng.standard_normal((3, 4)))
        c = Tensor(rng.standard_normal((3, 2)))
        return lambda x: sum_all(mul(matmul(a, x), c))

    run_trials(make_f, lambda rng: leaf(rng, (4, 2)))


def test_fd_add_sub_mul():
    def make_f(rng):
        other = Tensor(rng.standard_normal((3, 4)))
        c = Tensor(rng.standard_normal((3, 4)))
        return lambda x: sum_all(mul(mul(add(x, other), sub(x, other)), c))

    run_trials(make_f, lambda rng: leaf(rng, (3, 4)))


def test_fd_add_bias():
    def make_f(rng):
        m = Tensor(rng.standard_normal((5, 3)))
        c = Tensor(rng.standard_normal((5, 3)))
        return lambda x: sum_all(mul(add(m, x), c))

    run_trials(make_f, lambda rng: leaf(rng, (3,)))


def test_fd_scale_neg():
    def make_f(rng):
        c = Tensor(rng.standard_normal((4,)))
        return lambda x: sum_all(mul(neg(scale(x, 2.5)), c))

    run_trials(make_f, lambda rng: leaf(rng, (4,)))


def test_fd_scalar_broadcast():
    def make_f(rng):
        m = Tensor(rng.standard_normal((3, 3)))
        c = Tensor(rng.standard_normal((3, 3)))
        return lambda x: sum_all(mul(mul(m, x), c))

    run_trials(make_f, lambda rng: tensor(rng.standard_normal(()), grad=True))


def test_fd_sigmoid():
    def make_f(rng):
        c = Tensor(rng.standard_normal((6,)))
        return lambda x: sum_all(mul(sigmoid(x), c))

    run_trials(make_f, lambda rng: leaf(rng, (6,)))


def test_fd_tanh():
    def make_f(rng):
        c = Tensor(rng.standard_normal((6,)))
        return lambda x: sum_all(mul(tanh(x), c))

    run_trials(make_f, lambda rng: leaf(rng, (6,)))


def test_fd_relu():
    def make_f(rng):
        c = Tensor(rng.standard_normal((8,)))
        return lambda x: sum_all(mul(relu(x), c))

    def make_x(rng):
        # keep inputs away from the kink at 0, where the derivative jumps
        x = rng.standard_normal(8)
        x = np.where(np.abs(x) < 0.05, 0.5 * np.sign(x) + (x == 0), x)
        return tensor(x, grad=True)

    run_trials(make_f, make_x)


def test_fd_softmax():
    def make_f(rng):
        c = Tensor(rng.standard_normal((4, 5)))
        return lambda x: sum_all(mul(softmax(x, axis=-1), c))

    run_trials(make_f, lambda rng: leaf(rng, (4, 5)))


def test_fd_transpose_reshape():
    def make_f(rng):
        c = Tensor(rng.standard_normal((4, 3)))
        c2 = Tensor(rng.standard_normal((2, 6)))
        return lambda x: add(
            sum_all(mul(transpose(x), c)),
            sum_all(mul(reshape(x, (2, 6)), c2)),
        )

    run_trials(make_f, lambda rng: leaf(rng, (3, 4)))


def test_fd_concat_stack():
    def make_f(rng):
        other = Tensor(rng.standard_normal((2, 3)))
        c = Tensor(rng.standard_normal((4, 3)))
        c2 = Tensor(rng.standard_normal((2, 2, 3)))
        return lambda x: add(
            sum_all(mul(concat([x, other], axis=0), c)),
            sum_all(mul(stack([x, x]), c2)),
        )

    run_trials(make_f, lambda rng: leaf(rng, (2, 3)))


def test_stack_of_scalars_keeps_grad_shape():
    # scalar parents must get 0-d grads back, not (1,)
    b = tensor(np.zeros(()), grad=True)
    s = stack([add(b, Tensor(np.asarray(1.0))), add(b, Tensor(np.asarray(2.0)))])
    g = backward(sum_all(s))
    assert g[b].shape == ()
    assert float(g[b].data) == 2.0


def test_fd_gather():
    ids = [0, 2, 2, 4, 1]

    def make_f(rng):
        c = Tensor(rng.standard_normal((5, 3)))
        return lambda x: sum_all(mul(gather(x, ids), c))

    run_trials(make_f, lambda rng: leaf(rng, (5, 3)))


def test_fd_mean_pool():
    def make_f(rng):
        c = Tensor(rng.standard_normal((4,)))
        return lambda x: sum_all(mul(mean_pool(x, axis=0), c))

    run_trials(make_f, lambda rng: leaf(rng, (6, 4)))


def test_fd_add_n():
    def make_f(rng):
        o1 = Tensor(rng.standard_normal((3,)))
        o2 = Tensor(rng.standard_normal((3,)))
        c = Tensor(rng.standard_normal((3,)))
        return lambda x: sum_all(mul(add_n([x, o1, x, o2]), c))

    run_trials(make_f, lambda rng: leaf(rng, (3,)))


def test_fd_bce():
    def make_f(rng):
        y = Tensor((rng.random(6) < 0.5).astype(np.float64))
        return lambda x: bce_loss(sigmoid(x), y)

    run_trials(make_f, lambda rng: leaf(rng, (6,)))


def test_fd_bce_sum():
    def make_f(rng):
        y = Tensor((rng.random(6) < 0.5).astype(np.float64))
        return lambda x: bce_loss(sigmoid(x), y, reduction="sum")

    run_trials(make_f, lambda rng: leaf(rng, (6,)))


def test_fd_mse_half():
    def make_f(rng):
        a = Tensor(rng.standard_normal((7,)))
        return lambda x: mse_half(a, x)

    run_trials(make_f, lambda rng: leaf(rng, (7,)), tol=1e-6)


# ---------------------------------------------------------------------------
# Graph mechanics
# ---------------------------------------------------------------------------


def test_backward_returns_retained_intermediates():
    x = tensor([1.0, 2.0], grad=True)
    h = mul(x, x)
    loss = sum_all(sigmoid(h))
    grads = backward(loss, retain=[h])
    assert h in grads
    s = 1.0 / (1.0 + np.exp(-h.data))
    assert np.allclose(grads[h].data, s * (1.0 - s))
    assert np.allclose(grads[x].data, grads[h].data * 2.0 * x.data)


def test_backward_twice_raises():
    x = tensor([1.0, 2.0], grad=True)
    loss = sum_all(mul(x, x))
    backward(loss)
    with pytest.raises(GraphConsumedError):
        backward(loss)


def test_backward_on_shared_consumed_subgraph_raises():
    x = tensor([1.0, 2.0], grad=True)
    h = mul(x, x)
    backward(sum_all(h))
    with pytest.raises(GraphConsumedError):
        backward(sum_all(mul(h, h)))


def test_backward_requires_scalar():
    x = tensor([1.0, 2.0], grad=True)
    with pytest.raises(ShapeError):
        backward(mul(x, x))


def test_gather_gradient_mass_conservation():
    rng = np.random.default_rng(3)
    for _ in range(20):
        table = leaf(rng, (6, 4))
        ids = rng.integers(0, 6, size=9)
        w = Tensor(rng.standard_normal((9, 4)))
        g = backward(sum_all(mul(gather(table, ids), w)))[table].data
        assert np.isclose(g.sum(), w.data.sum())


def test_backward_linearity():
    rng = np.random.default_rng(11)
    for _ in range(20):
        xv = rng.standard_normal((3, 3))
        w = Tensor(rng.standard_normal((3, 3)))

        def l1(t):
            return sum_all(mul(sigmoid(t), w))

        def l2(t):
            return sum_all(mul(tanh(matmul(t, t)), w))

        xa = tensor(xv, grad=True)
        g_joint = backward(add(l1(xa), l2(xa)))[xa].data
        xb = tensor(xv, grad=True)
        xc = tensor(xv, grad=True)
        g_split = backward(l1(xb))[xb].data + backward(l2(xc))[xc].data
        assert np.allclose(g_joint, g_split, atol=1e-12)


def test_no_grad_blocks_taping():
    x = tensor([1.0], grad=True)
    with no_grad():
        out = sigmoid(mul(x, x))
    assert not out.grad_enabled
    assert out.is_leaf()


def test_grad_disabled_leaf_gets_no_entry():
    x = tensor([1.0, 2.0], grad=True)
    c = tensor([3.0, 4.0])  # plain data
    grads = backward(sum_all(mul(x, c)))
    assert x in grads
    assert c not in grads


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = tensor(rng.standard_normal((4, 4)), grad=True)
        w = tensor(rng.standard_normal((4, 4)), grad=True)
        loss = bce_loss(sigmoid(mean_pool(matmul(x, w), axis=0)),
                        Tensor(np.array([1.0, 0.0, 0.0, 1.0])))
        grads = backward(loss)
        return loss.data.copy(), grads[x].data.copy(), grads[w].data.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_nonfinite_op_raises():
    with pytest.raises(NonFiniteError):
        tensor([np.inf])
    big = tensor([1e308])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        mul(big, big)


def test_float32_mode():
    ad.set_default_dtype(np.float32)
    try:
        x = tensor([1.0, 2.0], grad=True)
        assert x.dtype == np.float32
        out = sigmoid(x)
        assert out.dtype == np.float32
        g = backward(sum_all(out))[x]
        assert g.dtype == np.float32
    finally:
        ad.set_default_dtype(np.float64)


class CountingAccountant:
    """Minimal stand-in for instrument.ActivationAccountant."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def acquire(self, n):
        self.current += n
        self.peak = max(self.peak, self.current)

    def release(self, n):
        self.current -= n


def test_activation_accounting_acquires_and_releases():
    acct = CountingAccountant()
    x = tensor(np.ones((4, 3)), grad=True)
    w = tensor(np.ones((3, 2)), grad=True)
    with track_activations(acct):
        h = matmul(x, w)        # saves only leaves -> 0
        s = sigmoid(h)          # saves its 4x2 output -> 8
        loss = sum_all(s)       # saves nothing
    assert acct.current == 8
    assert acct.peak == 8
    backward(loss)
    assert acct.current == 0
    assert acct.peak == 8


def test_activation_accounting_counts_nonleaf_operands():
    acct = CountingAccountant()
    x = tensor(np.ones((2, 3)), grad=True)
    with track_activations(acct):
        h = add(x, x)        # no saved values
        out = mul(h, h)      # saves h twice (both operands non-leaf) -> 12
        loss = sum_all(out)
    assert acct.peak == 12
    backward(loss)
    assert acct.current == 0


def test_leaf_data_not_counted_as_activation():
    acct = CountingAccountant()
    x = tensor(np.ones((5, 5)), grad=True)
    w = tensor(np.ones((5, 5)), grad=True)
    with track_activations(acct):
        loss = sum_all(mul(x, w))  # both operands are leaves
    assert acct.peak == 0
    backward(loss)
