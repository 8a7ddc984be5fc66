import itertools
import math

import numpy as np
import pytest

import gradsuite
from spreadcast.numerics import (
    AdamState,
    BatchNormStats,
    NonFiniteError,
    RngStream,
    Tensor,
    activation,
    adam_step,
    batch_norm,
    bce_with_logits,
    check_gradients,
    concat,
    conv3d,
    conv3d_transpose,
    conv_output_shape,
    crop_to,
    dropout,
    l1_loss,
    no_grad,
    pad_to,
    same_padding,
)
from spreadcast.numerics.conv import _adjoint, _col2im, _geometry


def direct_conv3d(x, k, strides):
    """Nested-loop 'same' convolution with the ceil-mode padding split."""
    n, d, h, w, cin = x.shape
    kd, kh, kw, _, cout = k.shape
    pads = [same_padding(e, kk, s) for e, kk, s in zip((d, h, w), (kd, kh, kw), strides)]
    out_ext = [p[0] for p in pads]
    xp = np.pad(x, [(0, 0), *((lo, hi) for _, lo, hi in pads), (0, 0)])
    out = np.zeros((n, *out_ext, cout))
    for b, i, j, l, o in itertools.product(range(n), range(out_ext[0]), range(out_ext[1]),
                                           range(out_ext[2]), range(cout)):
        acc = 0.0
        for a, c, e, ci in itertools.product(range(kd), range(kh), range(kw), range(cin)):
            acc += xp[b, i * strides[0] + a, j * strides[1] + c, l * strides[2] + e, ci] * k[a, c, e, ci, o]
        out[b, i, j, l, o] = acc
    return out


# -- gradient suite ------------------------------------------------------------

@pytest.mark.parametrize("op", sorted(gradsuite.CASES))
def test_gradient_matches_central_differences(op):
    errors = gradsuite.run_op(op)
    assert len(errors) >= 20
    assert max(errors) < gradsuite.TOL, errors


# -- conv3d ---------------------------------------------------------------------

def test_same_padding_matches_ceil_rule():
    for n, k, s in itertools.product(range(1, 12), range(1, 6), range(1, 4)):
        out, lo, hi = same_padding(n, k, s)
        assert out == math.ceil(n / s)
        assert lo + hi == max((out - 1) * s + k - n, 0)
        assert hi - lo in (0, 1)


def test_conv_output_shape_on_full_grid():
    x = Tensor(np.zeros((1, 16, 360, 720, 1), np.float32))
    assert conv_output_shape(x.shape[1:4], (4, 4, 4), (2, 2, 2)) == (8, 180, 360)


def test_conv_identity_kernel():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 5, 1)))
    out = conv3d(x, Tensor(np.ones((1, 1, 1, 1, 1))), (1, 1, 1), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_matches_direct_summation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 3, 4, 4, 2))
    k = rng.normal(size=(2, 2, 2, 2, 3))
    out = conv3d(Tensor(x), Tensor(k), (1, 1, 1))
    np.testing.assert_allclose(out.data, direct_conv3d(x, k, (1, 1, 1)), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_strided_conv_matches_direct_summation(seed):
    rng = np.random.default_rng(seed)
    spatial = tuple(rng.integers(1, 6, size=3))
    kernel = tuple(rng.integers(1, 5, size=3))
    strides = tuple(rng.integers(1, 4, size=3))
    x = rng.normal(size=(2, *spatial, 2))
    k = rng.normal(size=(*kernel, 2, 3))
    out = conv3d(Tensor(x), Tensor(k), strides)
    np.testing.assert_allclose(out.data, direct_conv3d(x, k, strides), rtol=0, atol=1e-12)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        conv3d(Tensor(np.zeros((1, 2, 2, 2, 2))), Tensor(np.zeros((1, 1, 1, 3, 1))))


def test_conv_rejects_zero_sized_input():
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 0, 2, 2, 1)))


def test_conv_nonfinite_output_raises():
    x = Tensor(np.full((1, 1, 1, 1, 1), np.inf))
    with pytest.raises(NonFiniteError):
        conv3d(x, Tensor(np.ones((1, 1, 1, 1, 1))))


# -- conv3d_transpose ----------------------------------------------------------

def test_transpose_output_shape_on_full_grid():
    x = Tensor(np.zeros((1, 8, 180, 360, 2), np.float32))
    k = Tensor(np.zeros((3, 4, 4, 1, 2), np.float32))
    assert conv3d_transpose(x, k, (1, 2, 2)).shape == (1, 8, 360, 720, 1)


def test_transpose_identity_kernel():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 4, 5, 1)))
    out = conv3d_transpose(x, Tensor(np.ones((1, 1, 1, 1, 1))), (1, 1, 1))
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("seed", range(10))
def test_transpose_equals_conv_input_gradient(seed):
    rng = np.random.default_rng(seed)
    small = tuple(int(v) for v in rng.integers(1, 4, size=3))
    strides = tuple(int(v) for v in rng.integers(1, 4, size=3))
    kernel = tuple(int(v) for v in rng.integers(1, 5, size=3))
    big = tuple(a * s for a, s in zip(small, strides))
    cin, cout = 2, 3
    k = rng.normal(size=(*kernel, cout, cin))
    g = rng.normal(size=(1, *small, cin))
    # autodiff input-gradient of conv3d(x_big, k) contracted with g
    x_big = Tensor(np.zeros((1, *big, cout)), requires_grad=True)
    (conv3d(x_big, Tensor(k), strides) * Tensor(g)).sum().backward()
    out = conv3d_transpose(Tensor(g), Tensor(k), strides)
    np.testing.assert_allclose(out.data, x_big.grad, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_phase_adjoint_matches_scatter_reference(seed):
    rng = np.random.default_rng(seed)
    spatial = tuple(int(v) for v in rng.integers(1, 7, size=3))
    kernel = tuple(int(v) for v in rng.integers(1, 5, size=3))
    strides = tuple(int(v) for v in rng.integers(1, 4, size=3))
    cin, cout = 2, 3
    out_ext, pads = _geometry(spatial, kernel, strides)
    kmat = rng.normal(size=(math.prod(kernel) * cin, cout))
    g = rng.normal(size=(2, *out_ext, cout))
    in_shape = (2, *spatial, cin)
    ref = _col2im(g.reshape(-1, cout), kmat, in_shape, kernel, strides, pads, out_ext)
    np.testing.assert_allclose(_adjoint(g, kmat, in_shape, kernel, strides, pads), ref, rtol=0, atol=1e-12)


# -- batch norm -----------------------------------------------------------------

def test_batch_norm_train_standardizes():
    x = Tensor(np.random.default_rng(0).normal(3.0, 5.0, size=(2, 3, 4, 5, 4)))
    out = batch_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), "train").data
    flat = out.reshape(-1, 4)
    assert np.abs(flat.mean(axis=0)).max() < 1e-6
    assert np.abs(flat.var(axis=0) - 1).max() < 1e-4


def test_batch_norm_constant_channel_maps_to_zero():
    x = Tensor(np.full((1, 2, 2, 2, 1), 7.0))
    out = batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), "train").data
    assert np.all(out == 0)


def test_batch_norm_infer_direct_formula():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 3, 3, 3))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    m, v = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
    out = batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), "infer", BatchNormStats(m, v), eps=1e-3)
    np.testing.assert_allclose(out.data, gamma * (x - m) / np.sqrt(v + 1e-3) + beta, rtol=1e-12)


def test_batch_norm_running_stats_update_only_in_train_mode():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(2.0, 1.0, size=(4, 2, 2, 2, 2)))
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    stats = BatchNormStats.fresh(2, np.float64)
    batch_norm(x, g, b, "batch", stats)
    batch_norm(x, g, b, "infer", stats)
    np.testing.assert_array_equal(stats.mean, 0)
    batch_norm(x, g, b, "train", stats, momentum=0.9)
    mu = x.data.reshape(-1, 2).mean(axis=0)
    np.testing.assert_allclose(stats.mean, 0.1 * mu, rtol=1e-12)


def test_batch_norm_errors():
    x = Tensor(np.zeros((1, 1, 1, 2, 3)))
    with pytest.raises(ValueError):
        batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
    with pytest.raises(ValueError):
        batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)


# -- dropout, activations --------------------------------------------------------

def test_dropout_rate_zero_is_identity():
    x = Tensor(np.arange(6.0))
    assert dropout(x, 0.0, RngStream(0)) is x


def test_dropout_same_stream_same_mask():
    x = Tensor(np.ones((4, 5)))
    a = dropout(x, 0.5, RngStream(7).split("d")).data
    b = dropout(x, 0.5, RngStream(7).split("d")).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}


def test_dropout_expectation():
    x = np.random.default_rng(0).uniform(0.5, 1.5, size=(3, 4))
    acc = np.zeros_like(x)
    root = RngStream(11)
    n = 10_000
    for i in range(n):
        acc += dropout(Tensor(x), 0.5, root.split(i)).data
    assert np.max(np.abs(acc / n - x) / x) < 0.03


def test_dropout_rejects_bad_rate():
    for rate in (-0.1, 1.0):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(2)), rate, RngStream(0))


def test_activation_values():
    t = lambda v: Tensor(np.array(v, dtype=np.float64))
    assert activation(t(-1.0), "relu").item() == 0.0
    assert activation(t(2.0), "relu").item() == 2.0
    assert activation(t(0.0), "tanh").item() == 0.0
    assert activation(t(0.0), "sigmoid").item() == 0.5
    assert activation(t(-10.0), "leaky_relu", 0.2).item() == pytest.approx(-2.0)


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise", invalid="raise"):
        out = activation(Tensor(np.array([-800.0, 800.0])), "sigmoid").data
    np.testing.assert_array_equal(out, [0.0, 1.0])


# -- concat, crop, pad --------------------------------------------------------------

def test_concat_shapes_and_identity():
    a = Tensor(np.zeros((1, 8, 6, 6, 128), np.float32))
    assert concat([a, a]).shape == (1, 8, 6, 6, 256)
    assert concat([a]) is a or np.array_equal(concat([a]).data, a.data)


def test_concat_backward_slices_upstream():
    rng = np.random.default_rng(0)
    parts = [Tensor(rng.normal(size=(2, 3, c)), requires_grad=True) for c in (1, 4, 2)]
    g = rng.normal(size=(2, 3, 7))
    concat(parts).backward(g)
    np.testing.assert_array_equal(parts[0].grad, g[..., :1])
    np.testing.assert_array_equal(parts[1].grad, g[..., 1:5])
    np.testing.assert_array_equal(parts[2].grad, g[..., 5:])


def test_concat_rejects_off_axis_mismatch():
    with pytest.raises(ValueError):
        concat([Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 3, 3)))])


def test_crop_and_pad_are_adjoint_centered():
    x = Tensor(np.arange(2 * 5 * 4 * 3 * 1, dtype=np.float64).reshape(1, 5, 4, 3, 2))
    back = crop_to(pad_to(x, (7, 6, 4)), (5, 4, 3))
    np.testing.assert_array_equal(back.data, x.data)


# -- losses -------------------------------------------------------------------------

def test_bce_closed_forms():
    assert bce_with_logits(Tensor(np.zeros(3)), 1.0).item() == pytest.approx(math.log(2), abs=1e-12)
    assert bce_with_logits(Tensor(np.array([50.0])), 1.0).item() == pytest.approx(0.0, abs=1e-20)
    assert math.isfinite(bce_with_logits(Tensor(np.array([-1000.0])), 1.0).item())


def test_bce_direct_formula():
    rng = np.random.default_rng(4)
    z, t = rng.normal(0, 3, size=(5, 7)), rng.uniform(size=(5, 7))
    s = 1 / (1 + np.exp(-z))
    ref = np.mean(-(t * np.log(s) + (1 - t) * np.log(1 - s)))
    assert bce_with_logits(Tensor(z), Tensor(t)).item() == pytest.approx(ref, rel=0, abs=1e-10)


def test_l1_values():
    a = np.random.default_rng(5).normal(size=(3, 4))
    assert l1_loss(Tensor(a), Tensor(a)).item() == 0.0
    assert l1_loss(Tensor(a + 3), Tensor(a)).item() == pytest.approx(3.0, abs=1e-12)
    b = np.random.default_rng(6).normal(size=(3, 4))
    assert l1_loss(Tensor(a), Tensor(b)).item() == pytest.approx(np.abs(a - b).mean(), abs=1e-12)


def test_losses_reject_shape_mismatch():
    with pytest.raises(ValueError):
        l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        bce_with_logits(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# -- backward ------------------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_of_l1_against_zero():
    x = Tensor(np.random.default_rng(0).uniform(0.1, 1, size=(3, 5)), requires_grad=True)
    l1_loss(x, 0.0).backward()
    np.testing.assert_allclose(x.grad, np.full((3, 5), 1 / 15), rtol=1e-15)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_inputs_restricts_gradients():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.full(3, 2.0), requires_grad=True)
    (a * b).sum().backward(inputs=[a])
    np.testing.assert_array_equal(a.grad, [2.0, 2.0, 2.0])
    assert b.grad is None


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = (a * 2.0).sum()
    assert not out.requires_grad


def test_chain_gradcheck():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(1, 3, 4, 4, 2)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 2, 2, 2, 3)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = Tensor(rng.normal(size=3), requires_grad=True)

    def loss():
        h = batch_norm(conv3d(x, k, (1, 2, 2)), gamma, beta, "batch")
        return bce_with_logits(activation(h, "leaky_relu"), 1.0)

    assert check_gradients(loss, [x, k, gamma, beta], max_coords=48) < 1e-4


# -- Adam ---------------------------------------------------------------------------

def test_adam_first_step_is_lr_times_sign():
    for g in (3.0, -0.01):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([g])
        adam_step({"p": p}, AdamState(lr=2e-4))
        assert p.data[0] - 1.0 == pytest.approx(-2e-4 * np.sign(g), rel=1e-4)


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adam_step({"p": p}, AdamState())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_matches_hand_iteration():
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    lr, b1, b2, eps = 1e-3, 0.5, 0.999, 1e-7
    w, m, v = 0.25, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = Tensor(np.array([0.25]), requires_grad=True)
    state = AdamState(lr=lr, beta1=b1, beta2=b2, epsilon=eps)
    for g in grads:
        p.grad = np.array([g])
        adam_step({"p": p}, state)
    assert p.data[0] == pytest.approx(w, abs=1e-12)


# -- RNG streams ------------------------------------------------------------------------

def test_rng_streams_are_reproducible_and_independent():
    a = RngStream(3).split("x", 1)
    np.testing.assert_array_equal(a.normal(5), RngStream(3).split("x", 1).normal(5))
    assert not np.array_equal(a.normal(5), RngStream(3).split("x", 2).normal(5))
    assert not np.array_equal(a.normal(5), RngStream(4).split("x", 1).normal(5))


def test_rng_advance_skips_draws():
    s = RngStream(1).split("y")
    full = s.generator().random(10)
    tail = s.advance(1).generator().random(8)
    # Philox advances in blocks of four 64-bit words, i.e. four doubles
    np.testing.assert_array_equal(full[4:], tail[:6])
