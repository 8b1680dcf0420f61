import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vidanomaly import layers as L
from vidanomaly.layers import (
    Conv2DSpec, ConvLSTMSpec, DenseSpec, LayerError, NormSpec, ParameterStore,
)

from fdcheck import check

TOL = 1e-3


def rand_params(spec, seed=0, dtype=torch.float64, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    store = ParameterStore()
    store.add_layer("layer", spec, dtype=dtype)
    out = {}
    for name, p in store.layers["layer"].items():
        if p.trainable:
            p.value.copy_(torch.randn(p.value.shape, generator=g, dtype=dtype) * scale)
            if name == "gamma":
                p.value.add_(1.0)
        out[name] = p.value
    return out


def rand(*shape, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def grad_errors(forward, params, x, seed=9):
    """Relative errors of autograd vs finite differences for sum(forward * R)."""
    x = x.clone()
    with torch.no_grad():
        r = rand(*forward(x, params).shape, seed=seed)

    def loss():
        return (forward(x, params) * r).sum()

    tensors = {k: v for k, v in params.items() if k not in ("moving_mean", "moving_variance")}
    leaves = {k: v.clone().requires_grad_(True) for k, v in tensors.items()}
    xl = x.clone().requires_grad_(True)
    out = (forward(xl, {**params, **leaves}) * r).sum()
    grads = L.backward(out, {**leaves, "input": xl})
    errors = check(loss, {**tensors, "input": x}, grads)
    return errors


# ---------------------------------------------------------------------------
# parameter counts (table rows)


@pytest.mark.parametrize("spec,expected", [
    (Conv2DSpec(1, 128, (11, 11), (4, 4)), 15616),
    (Conv2DSpec(128, 64, (5, 5), (2, 2)), 204864),
    (Conv2DSpec(16, 64, (5, 5), (4, 4), transposed=True), 25664),
    (Conv2DSpec(64, 1, (11, 11)), 7745),
    (Conv2DSpec(64, 128, (11, 11), (4, 4), transposed=True), 991360),
    (ConvLSTMSpec(64, 16), 46144),
    (ConvLSTMSpec(64, 64), 295168),
    (ConvLSTMSpec(64, 32), 110720),
    (ConvLSTMSpec(16, 16), 18496),
    (NormSpec("layer_norm", 128), 256),
    (DenseSpec(655360, 32), 20971552),
    (DenseSpec(32, 655360), 21626880),
    (DenseSpec(32, 32), 1056),
])
def test_param_count_matches_tables(spec, expected):
    assert L.param_count(spec)[0] == expected


def test_batch_norm_counts():
    assert L.param_count(NormSpec("batch_norm", 64)) == (256, 128, 128)
    assert L.param_count(NormSpec("layer_norm", 128)) == (256, 256, 0)


@pytest.mark.parametrize("spec", [
    Conv2DSpec(3, 5, (3, 2), (2, 1)), Conv2DSpec(3, 5, (3, 3), transposed=True),
    ConvLSTMSpec(2, 3, (3, 3)), NormSpec("batch_norm", 7), NormSpec("layer_norm", 7),
    DenseSpec(4, 6), L.FlattenSpec(),
])
def test_allocated_scalars_match_param_count(spec):
    store = ParameterStore()
    store.add_layer("x", spec)
    assert store.counts() == L.param_count(spec)


# ---------------------------------------------------------------------------
# shapes


def test_conv_shape_examples():
    spec = Conv2DSpec(1, 128, (11, 11), (4, 4))
    p = rand_params(spec, dtype=torch.float32)
    y = L.conv2d_forward(torch.zeros(1, 1, 256, 256), spec, p)
    assert tuple(y.shape) == (1, 128, 64, 64)
    spec = Conv2DSpec(16, 64, (5, 5), (4, 4), transposed=True)
    y = L.conv2d_forward(torch.zeros(1, 16, 64, 64), spec, rand_params(spec, dtype=torch.float32))
    assert tuple(y.shape) == (1, 64, 256, 256)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 20), k=st.integers(1, 7), s=st.sampled_from([1, 2, 4]),
       transposed=st.booleans())
def test_same_padding_shape_law(n, k, s, transposed):
    spec = Conv2DSpec(1, 2, (k, k), (s, s), transposed=transposed)
    p = rand_params(spec)
    y = L.conv2d_forward(torch.zeros(1, 1, n, n, dtype=torch.float64), spec, p)
    expected = n * s if transposed else math.ceil(n / s)
    assert tuple(y.shape[-2:]) == (expected, expected)
    assert L.output_shape(spec, (n, n, 1)) == (expected, expected, 2)


def test_same_padding_extra_on_the_right():
    assert L.same_padding(256, 11, 4) == (3, 4)
    assert L.same_padding(8, 3, 1) == (1, 1)
    assert L.same_padding(8, 4, 1) == (1, 2)


def test_identity_conv_and_dense():
    spec = Conv2DSpec(3, 3, (1, 1))
    p = {"kernel": torch.eye(3, dtype=torch.float64).view(3, 3, 1, 1),
         "bias": torch.zeros(3, dtype=torch.float64)}
    x = rand(2, 3, 5, 4)
    assert torch.equal(L.conv2d_forward(x, spec, p), x)
    dspec = DenseSpec(4, 4)
    dp = {"kernel": torch.eye(4, dtype=torch.float64), "bias": torch.zeros(4, dtype=torch.float64)}
    v = rand(3, 4)
    assert torch.equal(L.dense_forward(v, dspec, dp), v)


def test_transposed_conv_is_adjoint_of_conv():
    # <conv(x), y> == <deconv(y), x> when both use the same kernel tensor
    for n, k, s in [(8, 3, 2), (8, 5, 4), (12, 11, 4), (6, 2, 2)]:
        conv = Conv2DSpec(2, 3, (k, k), (s, s))
        kernel = rand(3, 2, k, k, seed=k)
        zero = torch.zeros(3, dtype=torch.float64)
        x = rand(1, 2, n, n, seed=2)
        y = rand(1, 3, math.ceil(n / s), math.ceil(n / s), seed=3)
        lhs = (L.conv2d_forward(x, conv, {"kernel": kernel, "bias": zero}) * y).sum()
        deconv = Conv2DSpec(3, 2, (k, k), (s, s), transposed=True)
        back = L.conv2d_forward(y, deconv, {"kernel": kernel, "bias": torch.zeros(2, dtype=torch.float64)})
        back = back[..., :n, :n]
        assert torch.allclose(lhs, (back * x).sum(), rtol=1e-12, atol=1e-12)


def test_shape_mismatch_names_layer():
    spec = Conv2DSpec(2, 3, (3, 3))
    with pytest.raises(LayerError, match="enc_conv"):
        L.conv2d_forward(torch.zeros(1, 4, 8, 8), spec, rand_params(spec, dtype=torch.float32),
                         layer="enc_conv")
    with pytest.raises(LayerError, match="kernel"):
        L.conv2d_forward(torch.zeros(1, 2, 8, 8), spec,
                         {"kernel": torch.zeros(1), "bias": torch.zeros(3)})


# ---------------------------------------------------------------------------
# time distribution


def test_time_distributed_shape_and_equivariance():
    spec = Conv2DSpec(1, 4, (11, 11), (4, 4))
    p = rand_params(spec)
    op = lambda f: L.conv2d_forward(f, spec, p)  # noqa: E731
    x = rand(1, 10, 1, 32, 32)
    y = L.time_distributed(op, x)
    assert tuple(y.shape) == (1, 10, 4, 8, 8)
    perm = torch.randperm(10, generator=torch.Generator().manual_seed(0))
    assert torch.allclose(L.time_distributed(op, x[:, perm]), y[:, perm])
    single = L.time_distributed(op, x[:, :1])
    assert torch.equal(single[:, 0], op(x[:, 0]))


def test_time_distributed_error_mentions_time():
    spec = Conv2DSpec(2, 4, (3, 3))
    op = lambda f: L.conv2d_forward(f, spec, rand_params(spec))  # noqa: E731
    with pytest.raises(LayerError, match="time"):
        L.time_distributed(op, rand(1, 3, 1, 8, 8))


# ---------------------------------------------------------------------------
# ConvLSTM


def test_convlstm_zero_weights_and_input_give_zero():
    spec = ConvLSTMSpec(2, 3)
    store = ParameterStore()
    store.add_layer("c", spec, torch.float64)
    y = L.convlstm_forward(torch.zeros(2, 4, 2, 6, 6, dtype=torch.float64), spec, store["c"])
    assert torch.count_nonzero(y) == 0


def test_convlstm_last_step_matches_return_sequences_false():
    seq = ConvLSTMSpec(2, 3, return_sequences=True)
    last = ConvLSTMSpec(2, 3, return_sequences=False)
    p = rand_params(seq)
    x = rand(2, 5, 2, 6, 6)
    assert torch.equal(L.convlstm_forward(x, seq, p)[:, -1], L.convlstm_forward(x, last, p))


def test_convlstm_matches_hand_written_step():
    # one step with 1x1 kernels reduces to an elementwise LSTM
    spec = ConvLSTMSpec(1, 1, (1, 1))
    p = rand_params(spec, scale=0.8)
    x = rand(1, 2, 1, 3, 3)
    y = L.convlstm_forward(x, spec, p)
    wx = p["kernel"].view(4)
    wh = p["recurrent_kernel"].view(4)
    b = p["bias"]
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    h = np.zeros((3, 3))
    c = np.zeros((3, 3))
    for t in range(2):
        xt = x[0, t, 0].numpy()
        z = [wx[g].item() * xt + wh[g].item() * h + b[g].item() for g in range(4)]
        c = sig(z[1]) * c + sig(z[0]) * np.tanh(z[2])
        h = sig(z[3]) * np.tanh(c)
        np.testing.assert_allclose(y[0, t, 0].numpy(), h, rtol=1e-12)


# ---------------------------------------------------------------------------
# normalisation


def test_layer_norm_constant_input_is_zero():
    spec = NormSpec("layer_norm", 4)
    store = ParameterStore()
    store.add_layer("n", spec, torch.float64)
    y = L.normalize_forward(torch.full((2, 3, 4, 5, 5), 7.0, dtype=torch.float64), spec,
                            store["n"])
    assert torch.count_nonzero(y) == 0


def test_layer_norm_standardises_each_sample():
    spec = NormSpec("layer_norm", 3, epsilon=1e-12)
    store = ParameterStore()
    store.add_layer("n", spec, torch.float64)
    y = L.normalize_forward(rand(4, 2, 3, 5, 5) * 3 + 1, spec, store["n"])
    flat = y.reshape(4, -1)
    assert torch.allclose(flat.mean(1), torch.zeros(4, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(flat.var(1, unbiased=False), torch.ones(4, dtype=torch.float64))


def test_batch_norm_train_and_infer():
    spec = NormSpec("batch_norm", 3, epsilon=1e-3, momentum=0.9)
    store = ParameterStore()
    store.add_layer("n", spec, torch.float64)
    p = store["n"]
    x = rand(8, 3) * 2 + 5
    y = L.normalize_forward(x, spec, p, "train")
    assert torch.allclose(y.mean(0), torch.zeros(3, dtype=torch.float64), atol=1e-12)
    mean, var = x.mean(0), x.var(0, unbiased=False)
    assert torch.allclose(p["moving_mean"], 0.1 * mean)
    assert torch.allclose(p["moving_variance"], 0.9 + 0.1 * var)
    yi = L.normalize_forward(x, spec, p, "infer")
    expected = (x - p["moving_mean"]) / torch.sqrt(p["moving_variance"] + 1e-3)
    assert torch.allclose(yi, expected)
    with pytest.raises(LayerError):
        L.normalize_forward(torch.zeros(0, 3, dtype=torch.float64), spec, p, "train")


# ---------------------------------------------------------------------------
# gradients vs finite differences (64-bit)


@pytest.mark.parametrize("spec", [
    Conv2DSpec(3, 4, (3, 3), (2, 2), activation="tanh"),
    Conv2DSpec(2, 3, (5, 5), (1, 1), activation="sigmoid"),
    Conv2DSpec(3, 2, (3, 3), (2, 2), transposed=True, activation="tanh"),
    Conv2DSpec(2, 2, (5, 5), (4, 4), transposed=True),
    Conv2DSpec(2, 1, (9, 9), (1, 1), activation="sigmoid"),  # FFT route
])
def test_conv_gradients(spec):
    x = rand(2, spec.in_channels, 8 if not spec.transposed else 4,
             8 if not spec.transposed else 4)
    errors = grad_errors(lambda v, p: L.conv2d_forward(v, spec, p), rand_params(spec), x)
    assert max(errors.values()) < TOL, errors


def test_fft_route_matches_direct_convolution():
    spec = Conv2DSpec(3, 2, (11, 9))
    params = rand_params(spec)
    x = rand(2, 3, 12, 10)
    pt, pb = L.same_padding(12, 11, 1)
    pl, pr = L.same_padding(10, 9, 1)
    direct = torch.nn.functional.conv2d(torch.nn.functional.pad(x, (pl, pr, pt, pb)),
                                        params["kernel"], params["bias"])
    torch.testing.assert_close(L.conv2d_forward(x, spec, params), direct, rtol=0, atol=1e-10)


def test_convlstm_gradients():
    spec = ConvLSTMSpec(2, 2, (3, 3))
    errors = grad_errors(lambda v, p: L.convlstm_forward(v, spec, p), rand_params(spec),
                         rand(1, 3, 2, 6, 6))
    assert max(errors.values()) < TOL, errors


@pytest.mark.parametrize("kind,shape", [("layer_norm", (2, 3, 4, 8, 8)), ("batch_norm", (3, 3, 4, 8, 8)),
                                        ("batch_norm", (5, 4))])
def test_norm_gradients(kind, shape):
    spec = NormSpec(kind, shape[2] if len(shape) == 5 else shape[1])
    errors = grad_errors(lambda v, p: L.normalize_forward(v, spec, p, "train"),
                         rand_params(spec), rand(*shape))
    assert max(errors.values()) < TOL, errors


def test_dense_gradients():
    spec = DenseSpec(6, 4, activation="tanh")
    errors = grad_errors(lambda v, p: L.dense_forward(v, spec, p), rand_params(spec), rand(3, 6))
    assert max(errors.values()) < TOL, errors


def test_conv_bias_gradient_counts_output_positions():
    spec = Conv2DSpec(2, 3, (3, 3), (2, 2))
    p = {k: v.clone().requires_grad_(True) for k, v in rand_params(spec).items()}
    y = L.conv2d_forward(rand(1, 2, 8, 8), spec, p)
    (g,) = L.backward(y.sum(), [p["bias"]])
    assert torch.equal(g, torch.full((3,), 16.0, dtype=torch.float64))


def test_zero_upstream_gives_zero_gradients():
    spec = ConvLSTMSpec(2, 2)
    p = {k: v.clone().requires_grad_(True) for k, v in rand_params(spec).items()}
    y = L.convlstm_forward(rand(1, 3, 2, 6, 6), spec, p)
    grads = L.backward(y, p, upstream=torch.zeros_like(y))
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_backward_before_forward():
    with pytest.raises(LayerError):
        L.backward(torch.zeros(()), [torch.zeros(1)])
