import math

import numpy as np
import pytest

from clnet import autodiff as ad
from clnet.autodiff import DomainError, ShapeError, Tape, Tensor, backward, grad_check


def test_relu_values():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_tanh_of_relu():
    out = ad.tanh(ad.relu(Tensor([1.0])))
    assert out.data[0] == pytest.approx(0.7615941559557649, abs=1e-15)


def test_matmul_ones():
    out = ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_domain_errors():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.div(Tensor([1.0]), Tensor([0.0]))


def test_square_sum_grad():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(ad.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_gather_masks_gradient():
    x = Tensor([5.0, 7.0], requires_grad=True)
    backward(ad.sum(ad.gather(x, [0])))
    np.testing.assert_array_equal(x.grad, [1.0, 0.0])


def test_gather_rows_route_gradient_only_to_gathered_rows():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    backward(ad.sum(ad.gather(x, [4, 1, 4])))
    expected = np.zeros((6, 3))
    expected[1] = 1.0
    expected[4] = 2.0
    np.testing.assert_array_equal(x.grad, expected)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_unreached_leaf_gets_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    with Tape():
        unused = ad.sum(y * 2.0)  # noqa: F841  recorded but not part of the loss
        loss = ad.sum(x)
        backward(loss)
    np.testing.assert_array_equal(y.grad, [0.0])
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_accumulation_matches_single_path_doubling():
    rng = np.random.default_rng(0)
    data = rng.normal(size=5)
    x = Tensor(data, requires_grad=True)
    backward(ad.sum(ad.tanh(x)) + ad.sum(ad.tanh(x)))
    y = Tensor(data, requires_grad=True)
    backward(ad.sum(ad.tanh(y) * 2.0))
    np.testing.assert_allclose(x.grad, y.grad, rtol=0, atol=1e-15)


def test_grads_accumulate_across_backward_calls():
    x = Tensor([1.0, -2.0], requires_grad=True)
    backward(ad.sum(x * 3.0))
    backward(ad.sum(x * 3.0))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_tape_order_is_append_order():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        a = x * 2.0
        b = ad.exp(a)
        c = ad.sum(b + a)
    outs = [n.output for n in tape.nodes]
    assert outs[0] is a and outs[1] is b and outs[-1] is c
    for i, node in enumerate(tape.nodes):
        for inp in node.inputs:
            assert inp._tape is None or inp._index < i


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape, ad.no_grad():
        y = ad.exp(x)
    assert len(tape) == 0 and not y.requires_grad


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(11)
    a, w = rng.normal(size=(20, 7)), rng.normal(size=(7, 4))

    def run():
        return ad.standardize(ad.tanh(ad.matmul(Tensor(a), Tensor(w))), axis=0).data

    assert np.array_equal(run(), run())


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=10))
    assert grad_check(lambda t: ad.sum(t), x) < 1e-10


def test_grad_check_tanh():
    rng = np.random.default_rng(2)
    x = Tensor(rng.uniform(-1, 1, size=8))
    assert grad_check(lambda t: ad.sum(ad.tanh(t)), x, 1e-5) < 1e-4


def test_grad_check_relu_away_from_kink():
    rng = np.random.default_rng(4)
    v = rng.uniform(0.1, 1.0, size=8) * rng.choice([-1.0, 1.0], size=8)
    assert grad_check(lambda t: ad.sum(ad.relu(t)), Tensor(v), 1e-5) < 1e-4


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        grad_check(lambda t: t * 2.0, Tensor([1.0, 2.0]))


# each entry builds a scalar from one input tensor of the given shape
_COMPOSITES = {
    "add_sub_mul": ((4, 3), lambda t: ad.sum((t + 1.5) * (t - 0.5) * 0.3)),
    "div": ((5,), lambda t: ad.sum(ad.div(t, ad.exp(t) + 1.0))),
    "matmul": ((4, 3), lambda t: ad.sum(ad.tanh(ad.matmul(t, ad.transpose(t))))),
    "matmul_batched": ((2, 3, 4), lambda t: ad.sum(ad.sigmoid(ad.matmul(t, _W43)))),
    "matmul_vec": ((4, 3), lambda t: ad.sum(ad.tanh(ad.matmul(t, _V3)))),
    "relu_tanh": ((6,), lambda t: ad.sum(ad.tanh(ad.relu(t)) * t)),
    "sigmoid": ((6,), lambda t: ad.sum(ad.sigmoid(t * 3.0))),
    "exp_log": ((6,), lambda t: ad.sum(ad.log(ad.exp(t) + 1.0))),
    "sqrt": ((6,), lambda t: ad.sum(ad.sqrt(t * t + 1.0))),
    "mean_axis": ((4, 3), lambda t: ad.sum(ad.tanh(ad.mean(t, axis=0)))),
    "var": ((7, 2), lambda t: ad.sum(ad.var(t, axis=0) * ad.mean(t, axis=0))),
    "max": ((5, 4), lambda t: ad.sum(ad.max(t, axis=1))),
    "concat": ((3, 2), lambda t: ad.sum(ad.tanh(ad.concat([t, t * t], axis=-1)))),
    "gather": ((5, 2), lambda t: ad.sum(ad.tanh(ad.gather(t, [[0, 3], [3, 4]])))),
    "reshape": ((2, 6), lambda t: ad.sum(ad.tanh(ad.reshape(t, (3, 4))) * _W34)),
    "standardize": ((8, 3), lambda t: ad.sum(ad.standardize(t, axis=0) * _W83)),
    "bce": ((6,), lambda t: ad.bce_with_logits(t * 2.0, _Y6)),
    "eigh_smallest": ((5, 3), lambda t: ad.sum(ad.eigh_smallest(_scatter(t)) * _SIGN3)),
}
_rng = np.random.default_rng(1234)
_W43 = Tensor(_rng.normal(size=(4, 3)))
_V3 = Tensor(_rng.normal(size=3))
_W34 = Tensor(_rng.normal(size=(3, 4)))
_W83 = Tensor(_rng.normal(size=(8, 3)))
_Y6 = (_rng.uniform(size=6) > 0.5).astype(float)
_SIGN3 = Tensor([1.0, 2.0, -1.0])


def _scatter(t):
    return ad.matmul(ad.transpose(t), t)


@pytest.mark.parametrize("name", sorted(_COMPOSITES))
@pytest.mark.parametrize("seed", range(100))
def test_op_gradients_match_finite_differences(name, seed):
    shape, fn = _COMPOSITES[name]
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=shape)
    if name == "max":
        # separate entries so the argmax is stable under the probe
        x = np.round(x, 1) + rng.permutation(x.size).reshape(shape) * 1e-3
    if name == "relu_tanh":
        x = np.where(np.abs(x) < 0.1, 0.1 + np.abs(x), x)
    if name == "eigh_smallest":
        ref = ad.eigh_smallest(_scatter(Tensor(x))).data
        sign = 1.0 if ref @ _SIGN3.data >= 0 else -1.0

        def fn(t, sign=sign, ref=ref):
            v = ad.eigh_smallest(_scatter(t))
            # eigenvector sign is arbitrary; pin it to the reference orientation
            s = sign if (v.data @ ref) >= 0 else -sign
            return ad.sum(v * _SIGN3) * s

    err = grad_check(fn, Tensor(x), 1e-5)
    assert err < 1e-4, f"{name}: {err}"


def test_standardize_constant_channel_has_finite_grad():
    x = Tensor(np.full((4, 1), 5.0), requires_grad=True)
    y = ad.standardize(x, axis=0)
    np.testing.assert_array_equal(y.data, np.zeros((4, 1)))
    backward(ad.sum(y * Tensor(np.arange(4.0).reshape(4, 1))))
    assert np.all(np.isfinite(x.grad))


def test_bce_single_item_is_ln2():
    out = ad.bce_with_logits(Tensor([0.0]), [1.0])
    assert out.item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_bce_is_stable_for_large_logits():
    out = ad.bce_with_logits(Tensor([800.0, -800.0]), [1.0, 0.0])
    assert out.item() == pytest.approx(0.0, abs=1e-300)
