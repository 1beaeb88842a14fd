import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrprog.autodiff import (
    SGD, Adam, Tape, Tensor, activation, backward, cosine_annealing_lr, log, matmul, no_grad,
)
from cxrprog.autodiff.gradcheck import check_gradients
from cxrprog.autodiff.nn import BatchNorm, Encoder
from cxrprog.autodiff.ops import BN_EPS, batch_norm, bce_with_logits, conv2d
from cxrprog.errors import ContractError, DimensionError, InvalidInputError, NonFiniteError

from gradcases import GRAD_CASES


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- matmul -----------------------------------------------------------------
def test_matmul_identity_and_hand_product():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(t64(np.eye(2)), t64(m)).data, m)
    assert matmul(t64([[1.0, 2.0]]), t64([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_zero_annihilates():
    a = np.random.default_rng(0).normal(size=(3, 4))
    assert not matmul(t64(a), t64(np.zeros((4, 2)))).data.any()


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


# -- conv2d -----------------------------------------------------------------
def test_conv2d_unit_kernel_is_identity():
    x = np.random.default_rng(1).normal(size=(2, 1, 5, 4))
    out = conv2d(t64(x), t64(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv2d_all_ones():
    out = conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3))))
    assert out.data.tolist() == [[[[9.0]]]]


def test_conv2d_zero_kernel_and_output_shape():
    x = t64(np.random.default_rng(2).normal(size=(2, 3, 7, 6)))
    out = conv2d(x, t64(np.zeros((4, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 4, (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1)
    assert not out.data.any()


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        conv2d(t64(np.ones((1, 1, 2, 2))), t64(np.ones((1, 1, 5, 5))), padding=1)


# -- batch norm --------------------------------------------------------------
def test_batch_norm_eval_identity():
    x = np.random.default_rng(3).normal(size=(4, 2, 3, 3))
    out = batch_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), np.zeros(2), np.ones(2), mode="eval_frozen")
    np.testing.assert_allclose(out.data, x / math.sqrt(1 + BN_EPS), rtol=1e-12)
    np.testing.assert_allclose(out.data, x, atol=1e-5 * np.abs(x).max())


def test_batch_norm_train_constant_input_gives_beta():
    beta = np.array([0.3, -1.2])
    out = batch_norm(t64(np.full((5, 2, 2, 2), 7.0)), t64(np.ones(2)), t64(beta), np.zeros(2), np.ones(2))
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], out.shape))


def test_batch_norm_eval_hand_value():
    out = batch_norm(t64([[4.0]]), t64([1.0]), t64([0.0]), np.array([2.0]), np.array([4.0]), mode="eval_frozen")
    assert out.data[0, 0] == pytest.approx(2.0 / math.sqrt(4.0 + BN_EPS))
    assert out.data[0, 0] == pytest.approx(1.0, abs=1e-5)


def test_batch_norm_eval_never_mutates_buffers():
    rm, rv = np.array([0.5, -1.0]), np.array([2.0, 0.7])
    before = rm.tobytes() + rv.tobytes()
    for _ in range(3):
        batch_norm(t64(np.random.default_rng(4).normal(size=(6, 2))), t64(np.ones(2)), t64(np.zeros(2)),
                   rm, rv, mode="eval_frozen")
    assert rm.tobytes() + rv.tobytes() == before


def test_batch_norm_train_updates_running_stats():
    x = np.random.default_rng(5).normal(size=(8, 3))
    rm, rv = np.zeros(3), np.ones(3)
    batch_norm(t64(x), t64(np.ones(3)), t64(np.zeros(3)), rm, rv, mode="train", momentum=0.1)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batch_norm_errors():
    with pytest.raises(InvalidInputError):
        batch_norm(t64(np.zeros((0, 2))), t64(np.ones(2)), t64(np.zeros(2)), np.zeros(2), np.ones(2))
    with pytest.raises(DimensionError):
        batch_norm(t64(np.zeros((3, 2))), t64(np.ones(3)), t64(np.zeros(3)), np.zeros(3), np.ones(3))


def test_frozen_batchnorm_module_keeps_statistics():
    bn = BatchNorm(3)
    bn.running_mean[:] = [1.0, 2.0, 3.0]
    bn.eval()
    before = bn.running_mean.tobytes() + bn.running_var.tobytes()
    bn(Tensor(np.random.default_rng(6).normal(size=(4, 3, 2, 2)).astype(np.float32)))
    assert bn.running_mean.tobytes() + bn.running_var.tobytes() == before


# -- activations --------------------------------------------------------------
def test_activation_values():
    assert activation(t64([-1.0, 2.0]), "relu").data.tolist() == [0.0, 2.0]
    assert activation(t64([0.0]), "sigmoid").data[0] == 0.5
    assert activation(t64([math.log(3.0)]), "sigmoid").data[0] == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(ContractError):
        activation(t64([0.0]), "swish")


# -- binary cross-entropy ---------------------------------------------------------
def test_bce_examples():
    assert bce_with_logits(t64([0.0]), [1.0]).item() == pytest.approx(math.log(2))
    assert bce_with_logits(t64([40.0]), [1.0]).item() == pytest.approx(0.0, abs=1e-15)
    assert bce_with_logits(t64([0.0, 0.0]), [1.0, 0.0]).item() == pytest.approx(math.log(2))


def test_bce_all_masked_is_an_error():
    with pytest.raises(InvalidInputError):
        bce_with_logits(t64([1.0, 2.0]), [1.0, 0.0], mask=[False, False])


def test_bce_masked_entries_get_zero_gradient():
    z = t64([0.3, -2.0, 5.0], grad=True)
    backward(bce_with_logits(z, [1.0, 0.0, 1.0], mask=[True, False, True]))
    assert z.grad[1] == 0.0 and z.grad[0] != 0.0


def _naive_bce(z, t):
    s = 1.0 / (1.0 + np.exp(-z))
    return float(np.mean(-(t * np.log(s) + (1 - t) * np.log(1 - s))))


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.data())
def test_bce_matches_naive_formula(zs, data):
    t = data.draw(st.lists(st.integers(0, 1), min_size=len(zs), max_size=len(zs)))
    z, t = np.array(zs), np.array(t, dtype=np.float64)
    assert bce_with_logits(t64(z), t).item() == pytest.approx(_naive_bce(z, t), abs=1e-6)


def test_bce_finite_for_huge_logits():
    loss = bce_with_logits(t64([1e4, -1e4, 1e4, -1e4]), [0.0, 1.0, 1.0, 0.0])
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(5e3)


# -- backward ----------------------------------------------------------------
def test_backward_examples():
    w = t64([1.0, 2.0, 3.0], grad=True)
    backward(w.sum())
    assert w.grad.tolist() == [1.0, 1.0, 1.0]
    w = t64([1.0, 2.0], grad=True)
    backward((w * w).sum())
    assert w.grad.tolist() == [2.0, 4.0]


def test_backward_skips_detached_tensors():
    w, c = t64([1.0, 2.0], grad=True), t64([3.0, 4.0])
    backward((w * c).sum())
    assert c.grad is None


def test_backward_needs_scalar():
    w = t64([1.0, 2.0], grad=True)
    with pytest.raises(ContractError):
        backward(w * 2.0)


def test_tape_is_topological():
    rng = np.random.default_rng(7)
    x = t64(rng.normal(size=(3, 4)), grad=True)
    w = t64(rng.normal(size=(4, 2)), grad=True)
    h = activation(x @ w, "relu")
    loss = (h * h).sum() + (x @ w).sum()
    tape = Tape.from_output(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]
    assert tape.nodes[-1] is loss


def test_shared_subexpression_accumulates():
    x = t64([1.0, 2.0], grad=True)
    c = t64([3.0, 5.0])
    backward((x * c).sum() + (x * c).sum())
    assert x.grad.tolist() == [6.0, 10.0]


def test_no_grad_records_nothing():
    x = t64([1.0], grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        log(t64([0.0, 1.0]))


def test_reductions_keep_float64():
    x = t64([1.0, 2.0], grad=True)
    assert (x * x).sum().dtype == np.float64


# -- optimisers -------------------------------------------------------------
def _param(value):
    p = t64(np.array([value]), grad=True)
    return p


def test_sgd_single_step():
    p = _param(1.0)
    opt = SGD([p], lr=0.1, momentum=0.9)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.9)
    assert opt.state.step == 1


def test_sgd_momentum_two_steps():
    p = _param(0.0)
    opt = SGD([p], lr=1.0, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    assert p.data[0] == pytest.approx(-2.9)


def test_sgd_weight_decay_enters_velocity():
    p = _param(2.0)
    opt = SGD([p], lr=0.5, momentum=0.9, weight_decay=0.1)
    p.grad = np.array([0.0])
    opt.step()
    assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_adam_first_step():
    p = _param(1.0)
    opt = Adam([p], lr=0.001)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.999, abs=1e-8)


def test_optimizer_requires_all_grads():
    p, q = _param(1.0), _param(2.0)
    opt = SGD([p, q], lr=0.1)
    p.grad = np.array([1.0])
    with pytest.raises(ContractError):
        opt.step()


def test_moment_buffers_match_parameter_shapes():
    params = Encoder((4, 8)).parameters()
    opt = Adam(params, lr=1e-3)
    for p, (_, buf) in zip(params + params, opt.named_buffers("o")):
        assert buf.shape == p.shape


def test_cosine_annealing():
    assert cosine_annealing_lr(0, 10, 0.1) == 0.1
    assert cosine_annealing_lr(10, 10, 0.1) == pytest.approx(0.0, abs=1e-18)
    assert cosine_annealing_lr(5, 10, 0.1) == pytest.approx(0.05)
    assert cosine_annealing_lr(5, 10, 0.1, 0.02) == pytest.approx(0.06)
    for bad in (-1, 11):
        with pytest.raises(ContractError):
            cosine_annealing_lr(bad, 10, 0.1)
    with pytest.raises(ContractError):
        cosine_annealing_lr(0, 0, 0.1)


# -- gradient checks ------------------------------------------------------
@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        fn, params = GRAD_CASES[name](rng)
        assert check_gradients(fn, params, max_coords=12, rng=rng) < 1e-4


# -- determinism ---------------------------------------------------------
def _train_step(seed):
    rng = np.random.default_rng(seed)
    enc = Encoder((4, 8), rng=rng)
    x = Tensor(rng.normal(size=(3, 1, 8, 8)).astype(np.float32))
    out = enc(x)
    loss = (out * out).sum()
    backward(loss)
    grads = [p.grad.copy() for p in enc.parameters()]
    SGD(enc.parameters(), lr=0.1, weight_decay=1e-4).step()
    return out.data, grads, [p.data.copy() for p in enc.parameters()]


def test_identical_seeds_are_bit_identical():
    a, b = _train_step(11), _train_step(11)
    assert a[0].tobytes() == b[0].tobytes()
    for ga, gb in zip(a[1], b[1]):
        assert ga.tobytes() == gb.tobytes()
    for pa, pb in zip(a[2], b[2]):
        assert pa.tobytes() == pb.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_matmul_gradient_rule(m, k, n):
    rng = np.random.default_rng(m * 100 + k * 10 + n)
    a, b = t64(rng.normal(size=(m, k)), grad=True), t64(rng.normal(size=(k, n)), grad=True)
    g = rng.normal(size=(m, n))
    backward((matmul(a, b) * t64(g)).sum())
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)
