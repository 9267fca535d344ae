import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from restorevar.autodiff import ops
from restorevar.autodiff.gradcheck import OP_CASES, check_op
from restorevar.autodiff.io import FormatError, read_tensor, tensor_to_bytes
from restorevar.autodiff.nn import Conv2d, Linear, Module
from restorevar.autodiff.ops import ConfigError, ShapeError
from restorevar.autodiff.optim import AdamW, cosine_lr
from restorevar.autodiff.tensor import Tensor, backward, no_grad
from restorevar.oracles import conv2d_direct, cross_entropy64, resize_pixel


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradcheck(name):
    fn, make = OP_CASES[name]
    for seed in range(5):
        rng = np.random.default_rng(seed)
        assert check_op(fn, make(rng), eps=1e-3, rng=rng) < 1e-3


def test_op_registry_covers_layers():
    for name in ("conv2d", "matmul", "layernorm", "masked_softmax", "cross_entropy", "resize_up", "gelu"):
        assert name in OP_CASES


def test_gradients_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    ops.sum(ops.mul(x, x)).backward()
    ops.sum(ops.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_shared_subexpression_gradient():
    x = Tensor(np.array(3.0, np.float32), requires_grad=True)
    y = x * x
    (y + y * x).backward()           # d/dx (x^2 + x^3) = 2x + 3x^2
    assert float(x.grad) == pytest.approx(6 + 27)


def test_nonscalar_backward_requires_seed():
    x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    with pytest.raises(RuntimeError):
        (x * 2.0).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_backward_helper_zero_fills_unreachable_leaves():
    a = Tensor(np.ones(2, np.float32), requires_grad=True)
    b = Tensor(np.ones(3, np.float32), requires_grad=True)
    backward(ops.sum(a), [a, b])
    np.testing.assert_array_equal(b.grad, np.zeros(3))


def test_deep_chain_is_iterative():
    x = Tensor(np.array(1.0, np.float32), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.backward()
    assert float(x.grad) == 1.0


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_conv_non_integral_output_is_config_error():
    with pytest.raises(ConfigError):
        ops.conv2d(Tensor(np.zeros((1, 1, 32, 32))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, pad=1)


def test_embedding_index_error():
    with pytest.raises(IndexError):
        ops.embedding(Tensor(np.zeros((4, 2))), np.array([4]))


def test_cross_entropy_bad_target():
    with pytest.raises(IndexError, match="row 1"):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 7]))


def test_conv_matches_direct_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data
    for i in range(2):
        np.testing.assert_allclose(out[i], conv2d_direct(x[i], w, b, 1), atol=1e-5)


@pytest.mark.parametrize("size", [(1, 1), (2, 3), (8, 8), (5, 11)])
def test_resize_matches_pixel_oracle(size):
    x = np.random.default_rng(1).standard_normal((2, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(ops.resize_bilinear(Tensor(x), *size).data, resize_pixel(x, *size), atol=1e-6)


def test_resize_identity_is_exact():
    x = np.random.default_rng(2).standard_normal((1, 3, 5, 5)).astype(np.float32)
    assert np.array_equal(ops.resize_bilinear(Tensor(x), 5, 5).data, x)


def test_masked_softmax_gives_exact_zeros():
    mask = np.tril(np.ones((4, 4), bool))
    p = ops.softmax(Tensor(np.random.default_rng(0).standard_normal((4, 4))), mask=mask).data
    assert np.all(p[~mask] == 0.0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_cross_entropy_uniform_is_log_v():
    for V in (8, 512):
        ce = ops.cross_entropy(Tensor(np.zeros((5, V), np.float32)), np.zeros(5, int)).item()
        assert abs(ce - np.log(V)) <= 1e-4


def test_cross_entropy_matches_oracle():
    rng = np.random.default_rng(3)
    logits = (3 * rng.standard_normal((6, 10))).astype(np.float32)
    t = rng.integers(0, 10, 6)
    assert ops.cross_entropy(Tensor(logits), t).item() == pytest.approx(cross_entropy64(logits, t), abs=1e-5)


def test_layernorm_normalizes():
    x = np.random.default_rng(4).standard_normal((3, 16)).astype(np.float32) * 5 + 2
    y = ops.layernorm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-5)
    np.testing.assert_allclose(y.std(-1), 1, atol=1e-3)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_file_roundtrip(arr):
    raw = tensor_to_bytes(arr)
    back = read_tensor(io.BytesIO(raw))
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()
    assert tensor_to_bytes(back) == raw


def test_tensor_file_errors():
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(b"XXXX"))
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(tensor_to_bytes(np.zeros(4))[:-2]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 999), st.integers(1, 1000), st.integers(0, 50))
def test_cosine_lr_bounds(step, total, warmup):
    lr = cosine_lr(step, total, 1e-3, warmup=warmup)
    assert 0 <= lr <= 1e-3 + 1e-12


def test_adamw_decays_matrices_not_vectors():
    rng = np.random.default_rng(0)
    lin = Linear(3, 3, rng)
    w0, b0 = lin.weight.data.copy(), lin.bias.data.copy()
    lin.weight.grad = np.zeros_like(w0)
    lin.bias.grad = np.zeros_like(b0)
    AdamW(lin.parameters(), lr=0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(lin.weight.data, w0 * (1 - 0.05), rtol=1e-6)
    np.testing.assert_array_equal(lin.bias.data, b0)


def test_adamw_fits_linear_regression():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 4)).astype(np.float32)
    true = rng.standard_normal((4, 1)).astype(np.float32)
    y = x @ true
    lin = Linear(4, 1, rng)
    opt = AdamW(lin.parameters(), lr=0.05, weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        loss = ops.mse_loss(lin(Tensor(x)), Tensor(y))
        loss.backward()
        opt.step()
    assert loss.item() < 1e-3


class _Net(Module):
    def __init__(self, rng):
        self.a = Linear(2, 3, rng)
        self.convs = [Conv2d(1, 2, 3, rng), Conv2d(2, 1, 3, rng)]


def test_module_state_dict_roundtrip_and_order():
    net = _Net(np.random.default_rng(0))
    names = [n for n, _ in net.named_parameters()]
    assert names == ["a.weight", "a.bias", "convs.0.weight", "convs.0.bias", "convs.1.weight", "convs.1.bias"]
    other = _Net(np.random.default_rng(1))
    other.load_state_dict(net.state_dict())
    assert other.weight_hash() == net.weight_hash()
    with pytest.raises(KeyError):
        other.load_state_dict({"a.weight": net.a.weight.data})
