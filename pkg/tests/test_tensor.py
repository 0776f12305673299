import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from mirror_sat import tensor as T
from mirror_sat.tensor import ContractError, DimensionError, Tensor

from conftest import leaf


def test_matmul_identity_and_hand_case():
    b = Tensor(np.arange(12.0).reshape(3, 4))
    assert_array_equal(T.matmul(Tensor(np.eye(3)), b).data, b.data)
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_is_ones_times_b_transposed(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 5)
    T.tsum(T.matmul(a, b)).backward()
    assert_allclose(a.grad, np.ones((3, 5)) @ b.data.T)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_conv_delta_kernel_is_identity(rng):
    x = Tensor(rng.standard_normal((2, 3, 7, 6)))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    out = T.conv2d(x, Tensor(k), None, 1, 1, 1)
    assert_allclose(out.data, x.data, atol=1e-12)


def test_conv_constant_input_interior(rng):
    c = 0.7
    x = Tensor(np.full((1, 2, 8, 8), c))
    k = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    out = T.conv2d(x, Tensor(k), Tensor(bias), 1, 1, 1).data
    expect = k.sum(axis=(1, 2, 3)) * c + bias
    assert_allclose(out[0, :, 1:-1, 1:-1], np.broadcast_to(expect[:, None, None], (3, 6, 6)), rtol=1e-12)


def _direct_conv(x, k, dilation, padding):
    """Plain loop cross-correlation used as an independent oracle."""
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = H + 2 * padding - dilation * (kh - 1)
    Wo = W + 2 * padding - dilation * (kw - 1)
    out = np.zeros((B, O, Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            for u in range(kh):
                for v in range(kw):
                    out[:, :, i, j] += np.einsum("bc,oc->bo", xp[:, :, i + dilation * u, j + dilation * v], k[:, :, u, v])
    return out


def test_conv_dilation_two_impulse():
    x = np.zeros((1, 1, 8, 8))
    x[0, 0, 4, 4] = 1.0
    k = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(k), None, 1, 2, 2).data
    assert_allclose(out, _direct_conv(x, k, 2, 2), atol=1e-12)
    ys, xs = np.nonzero(out[0, 0])
    assert set(ys.tolist()) == {2, 4, 6} and set(xs.tolist()) == {2, 4, 6}


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 9, 7))
    k = rng.standard_normal((4, 3, 3, 3))
    for d in (1, 2, 3):
        assert_allclose(T.conv2d(Tensor(x), Tensor(k), None, 1, d, d).data, _direct_conv(x, k, d, d), atol=1e-10)


def test_conv_output_size_law():
    for H, k, s, d, p in [(16, 3, 1, 1, 1), (16, 3, 2, 1, 1), (9, 3, 1, 4, 4), (8, 1, 1, 1, 0), (7, 3, 2, 2, 0)]:
        x = Tensor(np.zeros((1, 1, H, H)))
        out = T.conv2d(x, Tensor(np.zeros((1, 1, k, k))), None, s, d, p)
        assert out.shape[2] == T.conv_output_size(H, k, s, d, p) == (H + 2 * p - d * (k - 1) - 1) // s + 1


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), None, 1, 1, 1)


def test_batchnorm_examples():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    x = Tensor(np.stack([np.full((3, 3), 5.0), np.full((3, 3), -2.0)])[None])
    out = T.batchnorm(x, g, b, np.zeros(2), np.ones(2), True)
    assert_allclose(out.data, 0.0, atol=1e-12)

    beta = np.array([0.3, -1.2])
    out = T.batchnorm(Tensor(np.random.default_rng(0).standard_normal((2, 2, 4, 4))), Tensor(np.zeros(2)),
                      Tensor(beta), np.zeros(2), np.ones(2), True)
    assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], out.shape))

    two = np.zeros((1, 1, 2, 2))
    two[0, 0, 0, :] = 2.0
    out = T.batchnorm(Tensor(two), Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1), True, eps=1e-12)
    assert_allclose(np.sort(out.data.ravel()), [-1, -1, 1, 1], atol=1e-6)


def test_batchnorm_running_stats_and_eval():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 5, 5)) * 2 + 1
    rm, rv = np.zeros(3), np.ones(3)
    T.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True)
    n = 4 * 25
    assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
    out = T.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, False)
    assert_allclose(out.data, (x - rm[:, None, None]) / np.sqrt(rv[:, None, None] + 1e-5))


def test_batchnorm_degenerate_statistics():
    with pytest.raises(ContractError, match="more than one value"):
        T.batchnorm(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                    np.zeros(2), np.ones(2), True)


def test_elementwise_and_shape_primitives(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 5)))
    assert_array_equal(T.hflip(T.hflip(x)).data, x.data)
    assert_array_equal(T.hflip(x).data, x.data[..., ::-1])
    assert_allclose(T.softmax_rows(Tensor(np.zeros((2, 4)))).data, 0.25)
    s = T.softmax_rows(Tensor(rng.standard_normal((5, 7)) * 10)).data
    assert (s >= 0).all()
    assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    up = T.bilinear_upsample2x(Tensor(np.full((1, 2, 3, 3), 0.37))).data
    assert up.shape == (1, 2, 6, 6)
    assert_allclose(up, 0.37)
    a, b = Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 5, 4, 4)))
    assert T.concat_channels([a, b]).shape == (1, 7, 4, 4)
    c = Tensor(np.zeros((1, 1, 4, 4)))
    assert T.concat_channels([T.concat_channels([a, b]), c]).shape == T.concat_channels([a, T.concat_channels([b, c])]).shape
    assert_array_equal(T.add(x, x * 2.0).data, T.add(x * 2.0, x).data)
    with pytest.raises(DimensionError):
        T.concat_channels([a, Tensor(np.zeros((1, 1, 3, 4)))])
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_bilinear_upsample_half_pixel_convention():
    # align_corners=False: output pixel centres map to (i + 0.5) / 2 - 0.5
    x = Tensor(np.array([[[[0.0, 4.0]]]]))
    out = T.bilinear_upsample2x(x).data[0, 0, 0]
    assert_allclose(out, [0.0, 1.0, 3.0, 4.0])


def test_backward_examples():
    x = Tensor(np.array([2.0]), requires_grad=True)
    T.tsum(T.relu(x)).backward()
    assert_array_equal(x.grad, [1.0])
    y = Tensor(np.array([1.5, -2.0, 3.0]), requires_grad=True)
    T.tsum(T.mul(y, y)).backward()
    assert_allclose(y.grad, 2 * y.data)


def test_backward_non_scalar_is_contract_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_populates_every_reachable_node(rng):
    a = leaf(rng, 3)
    h = T.mul(a, a)
    loss = T.tsum(T.sigmoid(h))
    loss.backward()
    assert h.grad is not None and h.grad.shape == h.shape
    assert a.grad.shape == a.shape


def test_gradients_accumulate_on_shared_leaves(rng):
    a = leaf(rng, 4)
    T.tsum(T.add(a, a)).backward()
    assert_allclose(a.grad, 2.0)


def test_no_grad_records_nothing(rng):
    a = leaf(rng, 3)
    with T.no_grad():
        out = T.mul(a, a)
    assert not out.requires_grad


def test_bce_closed_forms():
    mask = np.array([[[1, 0], [0, 1]]], dtype=float)
    half = Tensor(np.zeros((1, 2, 2, 2)))
    assert_allclose(T.bce_two_channel(half, mask).data, np.log(2), rtol=1e-12)
    ones = np.ones((1, 2, 2))
    z = np.log(9.0)  # sigmoid(z1 - z0) = 0.9
    logits = np.zeros((1, 2, 2, 2))
    logits[:, 1] = z
    assert_allclose(T.bce_two_channel(Tensor(logits), ones).data, -np.log(0.9), rtol=1e-10)
    perfect = np.zeros((1, 2, 2, 2))
    perfect[:, 1] = np.where(mask[0] == 1, 50.0, -50.0)
    assert_allclose(T.bce_two_channel(Tensor(perfect), mask).data, -np.log(1 - 1e-7), rtol=1e-6)


def test_bce_rejects_non_binary_mask():
    with pytest.raises(ValueError):
        T.bce_two_channel(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 0.5))


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(k), None, 1, 2, 2).data
    b = T.conv2d(Tensor(x), Tensor(k), None, 1, 2, 2).data
    assert a.tobytes() == b.tobytes()


def test_default_precision_is_32_bit():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float32)).dtype == np.float32
    assert Tensor(np.zeros(2), dtype=np.float64).dtype == np.float64
