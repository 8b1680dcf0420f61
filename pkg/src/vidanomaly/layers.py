"""Differentiable layer primitives and parameter accounting.

Tensors use torch's channels-first layout: single frames are ``(N, C, H, W)``
and clips are ``(B, T, C, H, W)``. Shapes reported by :func:`output_shape`
follow the ``(T, H, W, C)`` convention of Keras model summaries so they can
be compared against published architecture tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

ACTIVATIONS = {
    "linear": lambda x: x,
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
}


class LayerError(ValueError):
    """Shape or configuration error raised by a layer forward pass."""


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class Conv2DSpec:
    in_channels: int
    filters: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: str = "same"
    transposed: bool = False
    activation: str = "linear"

    def __post_init__(self):
        if self.padding not in ("same", "valid"):
            raise LayerError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.activation not in ACTIVATIONS:
            raise LayerError(f"unknown activation {self.activation!r}")

    def param_shapes(self):
        kh, kw = self.kernel
        if self.transposed:
            wshape = (self.in_channels, self.filters, kh, kw)
        else:
            wshape = (self.filters, self.in_channels, kh, kw)
        return {"kernel": (wshape, True), "bias": ((self.filters,), True)}


@dataclass(frozen=True)
class ConvLSTMSpec:
    in_channels: int
    filters: int
    kernel: tuple[int, int] = (3, 3)
    return_sequences: bool = True

    def param_shapes(self):
        kh, kw = self.kernel
        f = self.filters
        return {
            "kernel": ((4 * f, self.in_channels, kh, kw), True),
            "recurrent_kernel": ((4 * f, f, kh, kw), True),
            "bias": ((4 * f,), True),
        }


@dataclass(frozen=True)
class NormSpec:
    kind: str
    normalized_channels: int
    epsilon: float = 1e-3
    momentum: float = 0.99

    def __post_init__(self):
        if self.kind not in ("layer_norm", "batch_norm"):
            raise LayerError(f"unknown normalization {self.kind!r}")

    def param_shapes(self):
        c = (self.normalized_channels,)
        shapes = {"gamma": (c, True), "beta": (c, True)}
        if self.kind == "batch_norm":
            shapes["moving_mean"] = (c, False)
            shapes["moving_variance"] = (c, False)
        return shapes


@dataclass(frozen=True)
class DenseSpec:
    in_dim: int
    out_dim: int
    activation: str = "linear"

    def param_shapes(self):
        return {"kernel": ((self.in_dim, self.out_dim), True), "bias": ((self.out_dim,), True)}


@dataclass(frozen=True)
class FlattenSpec:
    def param_shapes(self):
        return {}


@dataclass(frozen=True)
class ReshapeSpec:
    target: tuple[int, int, int, int]  # (T, H, W, C)

    def param_shapes(self):
        return {}


LayerSpec = Conv2DSpec | ConvLSTMSpec | NormSpec | DenseSpec | FlattenSpec | ReshapeSpec


def param_count(spec) -> tuple[int, int, int]:
    """Closed-form ``(total, trainable, non_trainable)`` counts for a spec."""
    trainable = non_trainable = 0
    if isinstance(spec, Conv2DSpec):
        kh, kw = spec.kernel
        trainable = kh * kw * spec.in_channels * spec.filters + spec.filters
    elif isinstance(spec, ConvLSTMSpec):
        kh, kw = spec.kernel
        f = spec.filters
        trainable = 4 * (kh * kw * (spec.in_channels + f) * f + f)
    elif isinstance(spec, NormSpec):
        trainable = 2 * spec.normalized_channels
        if spec.kind == "batch_norm":
            non_trainable = 2 * spec.normalized_channels
    elif isinstance(spec, DenseSpec):
        trainable = spec.in_dim * spec.out_dim + spec.out_dim
    return trainable + non_trainable, trainable, non_trainable


# ---------------------------------------------------------------------------
# shape inference, (T, H, W, C) convention


def _same_out(n: int, s: int) -> int:
    return -(-n // s)


def output_shape(spec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(spec, Conv2DSpec):
        *lead, h, w, c = in_shape
        if c != spec.in_channels:
            raise LayerError(f"expected {spec.in_channels} channels, got {c}")
        (kh, kw), (sh, sw) = spec.kernel, spec.stride
        if spec.transposed:
            if spec.padding == "same":
                h, w = h * sh, w * sw
            else:
                h, w = (h - 1) * sh + kh, (w - 1) * sw + kw
        elif spec.padding == "same":
            h, w = _same_out(h, sh), _same_out(w, sw)
        else:
            h, w = (h - kh) // sh + 1, (w - kw) // sw + 1
        return (*lead, h, w, spec.filters)
    if isinstance(spec, ConvLSTMSpec):
        t, h, w, c = in_shape
        if c != spec.in_channels:
            raise LayerError(f"expected {spec.in_channels} channels, got {c}")
        return (t, h, w, spec.filters) if spec.return_sequences else (h, w, spec.filters)
    if isinstance(spec, NormSpec):
        return tuple(in_shape)
    if isinstance(spec, FlattenSpec):
        return (math.prod(in_shape),)
    if isinstance(spec, DenseSpec):
        return (spec.out_dim,)
    if isinstance(spec, ReshapeSpec):
        if math.prod(spec.target) != math.prod(in_shape):
            raise LayerError(f"cannot reshape {in_shape} to {spec.target}")
        return tuple(spec.target)
    raise LayerError(f"unknown spec {spec!r}")


# ---------------------------------------------------------------------------
# parameter store


@dataclass
class Parameter:
    value: torch.Tensor
    trainable: bool


@dataclass
class ParameterStore:
    layers: dict[str, dict[str, Parameter]] = field(default_factory=dict)

    def add_layer(self, name: str, spec, dtype=torch.float32) -> None:
        if name in self.layers:
            raise LayerError(f"duplicate layer name {name!r}")
        entry = {}
        for pname, (shape, trainable) in spec.param_shapes().items():
            init = torch.ones if pname in ("gamma", "moving_variance") else torch.zeros
            entry[pname] = Parameter(init(shape, dtype=dtype), trainable)
        self.layers[name] = entry

    def __getitem__(self, layer: str) -> dict[str, torch.Tensor]:
        return {k: p.value for k, p in self.layers[layer].items()}

    def entries(self):
        """Yield ``(layer, name, Parameter)`` in insertion order."""
        for layer, params in self.layers.items():
            for name, p in params.items():
                yield layer, name, p

    def trainable(self) -> list[torch.Tensor]:
        return [p.value for _, _, p in self.entries() if p.trainable]

    def counts(self) -> tuple[int, int, int]:
        trainable = non_trainable = 0
        for _, _, p in self.entries():
            if p.trainable:
                trainable += p.value.numel()
            else:
                non_trainable += p.value.numel()
        return trainable + non_trainable, trainable, non_trainable

    def layer_counts(self, layer: str) -> tuple[int, int, int]:
        t = sum(p.value.numel() for p in self.layers[layer].values() if p.trainable)
        n = sum(p.value.numel() for p in self.layers[layer].values() if not p.trainable)
        return t + n, t, n

    def to(self, dtype) -> "ParameterStore":
        """Copy of the store with every tensor cast to ``dtype``."""
        out = ParameterStore()
        for layer, params in self.layers.items():
            out.layers[layer] = {
                k: Parameter(p.value.detach().to(dtype).clone(), p.trainable)
                for k, p in params.items()
            }
        return out

    def clone(self) -> "ParameterStore":
        return self.to(self.dtype)

    @property
    def dtype(self):
        for _, _, p in self.entries():
            return p.value.dtype
        return torch.float32

    def equal(self, other: "ParameterStore") -> bool:
        """Bitwise equality of names, flags, shapes and values."""
        a, b = list(self.entries()), list(other.entries())
        if [(l, n, p.trainable) for l, n, p in a] != [(l, n, p.trainable) for l, n, p in b]:
            return False
        return all(torch.equal(p.value, q.value) for (_, _, p), (_, _, q) in zip(a, b))


# ---------------------------------------------------------------------------
# forward ops


def same_padding(n: int, k: int, s: int) -> tuple[int, int]:
    """TF-style "same" padding: total split evenly, odd remainder on the right."""
    out = _same_out(n, s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def _check_params(params, spec, layer):
    for pname, (shape, _) in spec.param_shapes().items():
        if pname not in params:
            raise LayerError(f"{layer}: missing parameter {pname!r}")
        if tuple(params[pname].shape) != tuple(shape):
            raise LayerError(
                f"{layer}: parameter {pname!r} has shape {tuple(params[pname].shape)}, "
                f"expected {tuple(shape)}")


def conv2d_forward(x: torch.Tensor, spec: Conv2DSpec, params, layer: str = "conv2d"):
    """2-D convolution (or transposed convolution) of ``(N, C, H, W)`` input."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise LayerError(
            f"{layer}: expected (N, {spec.in_channels}, H, W) input, got {tuple(x.shape)}")
    _check_params(params, spec, layer)
    kernel, bias = params["kernel"], params["bias"]
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    h, w = x.shape[-2:]
    if not spec.transposed:
        if spec.padding == "same":
            pt, pb = same_padding(h, kh, sh)
            pl, pr = same_padding(w, kw, sw)
            x = F.pad(x, (pl, pr, pt, pb))
        if (sh, sw) == (1, 1) and kh * kw >= FFT_MIN_TAPS:
            y = _fft_correlate(x, kernel, bias)
        else:
            y = F.conv2d(x, kernel, bias, stride=(sh, sw))
    else:
        y = F.conv_transpose2d(x, kernel, bias, stride=(sh, sw))
        if spec.padding == "same":
            # adjoint of the "same" convolution mapping (h*sh, w*sw) -> (h, w)
            pt, _ = same_padding(h * sh, kh, sh)
            pl, _ = same_padding(w * sw, kw, sw)
            y = _crop_or_pad(y, pt, h * sh, pl, w * sw)
            if kh < sh or kw < sw:
                # bias must also cover positions no kernel tap reached
                y = _fill_bias(y, bias, h, w, spec)
    return ACTIVATIONS[spec.activation](y)


# Large stride-1 kernels (the 11x11 output layers) run several times faster
# through the FFT than through the direct CPU kernels, gradients included.
FFT_MIN_TAPS = 81


def _fft_correlate(x, kernel, bias):
    """Valid cross-correlation of padded ``x`` with ``kernel`` via circular FFT convolution.

    With transforms of the padded input's size, outputs from index k-1
    onwards never wrap around, so they equal the direct result.
    """
    kh, kw = kernel.shape[-2:]
    size = tuple(x.shape[-2:])
    xf = torch.fft.rfft2(x, s=size)
    kf = torch.fft.rfft2(kernel.flip(-2, -1), s=size)
    y = torch.fft.irfft2(torch.einsum("nchw,ochw->nohw", xf, kf), s=size)
    return y[..., kh - 1:, kw - 1:] + bias.view(1, -1, 1, 1)


def _crop_or_pad(y, top, height, left, width):
    full_h, full_w = y.shape[-2:]
    need_h = top + height - full_h
    need_w = left + width - full_w
    if need_h > 0 or need_w > 0:
        y = F.pad(y, (0, max(need_w, 0), 0, max(need_h, 0)))
    return y[..., top:top + height, left:left + width]


def _fill_bias(y, bias, h, w, spec):
    ones = torch.ones((1, spec.in_channels, h, w), dtype=y.dtype)
    cover = F.conv_transpose2d(ones, torch.ones((spec.in_channels, 1, *spec.kernel),
                                                dtype=y.dtype), stride=spec.stride)
    pt, _ = same_padding(h * spec.stride[0], spec.kernel[0], spec.stride[0])
    pl, _ = same_padding(w * spec.stride[1], spec.kernel[1], spec.stride[1])
    cover = _crop_or_pad(cover, pt, h * spec.stride[0], pl, w * spec.stride[1])
    return torch.where(cover > 0, y, bias.view(1, -1, 1, 1).expand_as(y))


def time_distributed(op, x: torch.Tensor) -> torch.Tensor:
    """Apply a per-frame ``op`` with shared parameters to each slice of ``(B, T, ...)``."""
    b, t = x.shape[:2]
    try:
        y = op(x.reshape(b * t, *x.shape[2:]))
    except LayerError as exc:
        raise LayerError(f"{exc} (time-distributed over {t} slices, failing at index 0)") from exc
    return y.reshape(b, t, *y.shape[1:])


def convlstm_forward(x: torch.Tensor, spec: ConvLSTMSpec, params, initial_state=None,
                     layer: str = "convlstm"):
    """Run a ConvLSTM over ``(B, T, C, H, W)``.

    Gates are ordered input, forget, cell, output; all use the logistic
    sigmoid except the cell candidate (tanh). No peephole connections.
    Returns ``(B, T, F, H, W)`` or ``(B, F, H, W)``.
    """
    if x.ndim != 5 or x.shape[2] != spec.in_channels:
        raise LayerError(
            f"{layer}: expected (B, T, {spec.in_channels}, H, W) input, got {tuple(x.shape)}")
    _check_params(params, spec, layer)
    b, t, _, h, w = x.shape
    f = spec.filters
    kh, kw = spec.kernel
    pt, pb = same_padding(h, kh, 1)
    pl, pr = same_padding(w, kw, 1)
    pad = (pl, pr, pt, pb)
    if initial_state is None:
        hidden = x.new_zeros((b, f, h, w))
        cell = x.new_zeros((b, f, h, w))
    else:
        hidden, cell = initial_state
    # the input contribution of every step in one batched convolution
    xs = F.conv2d(F.pad(x.reshape(b * t, *x.shape[2:]), pad), params["kernel"], params["bias"])
    xs = xs.reshape(b, t, 4 * f, h, w)
    rk = params["recurrent_kernel"]
    outputs = []
    for step in range(t):
        z = xs[:, step] + F.conv2d(F.pad(hidden, pad), rk)
        zi, zf, zc, zo = z.split(f, dim=1)
        cell = torch.sigmoid(zf) * cell + torch.sigmoid(zi) * torch.tanh(zc)
        hidden = torch.sigmoid(zo) * torch.tanh(cell)
        outputs.append(hidden)
    if spec.return_sequences:
        return torch.stack(outputs, dim=1)
    return hidden


def _channel_dim(x: torch.Tensor) -> int:
    if x.ndim == 5:
        return 2
    if x.ndim in (2, 4):
        return 1
    raise LayerError(f"cannot locate channel axis of a {x.ndim}-D tensor")


def _broadcast(v: torch.Tensor, x: torch.Tensor, dim: int) -> torch.Tensor:
    shape = [1] * x.ndim
    shape[dim] = -1
    return v.view(shape)


def normalize_forward(x: torch.Tensor, spec: NormSpec, params, mode: str = "train",
                      layer: str = "norm"):
    """Layer or batch normalisation.

    ``layer_norm`` standardises each sample over all of its features, then
    applies a per-channel scale and shift. ``batch_norm`` uses per-channel
    batch statistics in ``train`` mode (updating the moving averages in
    place) and the moving averages in ``infer`` mode.
    """
    dim = _channel_dim(x)
    if x.shape[dim] != spec.normalized_channels:
        raise LayerError(
            f"{layer}: expected {spec.normalized_channels} channels, got {x.shape[dim]}")
    _check_params(params, spec, layer)
    gamma = _broadcast(params["gamma"], x, dim)
    beta = _broadcast(params["beta"], x, dim)
    if spec.kind == "layer_norm":
        axes = tuple(range(1, x.ndim))
        mean = x.mean(dim=axes, keepdim=True)
        var = ((x - mean) ** 2).mean(dim=axes, keepdim=True)
        return (x - mean) / torch.sqrt(var + spec.epsilon) * gamma + beta

    axes = tuple(i for i in range(x.ndim) if i != dim)
    if mode == "train":
        if x.shape[0] == 0:
            raise LayerError(f"{layer}: batch normalisation of an empty batch")
        mean = x.mean(dim=axes)
        var = ((x - _broadcast(mean, x, dim)) ** 2).mean(dim=axes)
        with torch.no_grad():
            m = spec.momentum
            params["moving_mean"].mul_(m).add_((1 - m) * mean.detach())
            params["moving_variance"].mul_(m).add_((1 - m) * var.detach())
    elif mode == "infer":
        mean, var = params["moving_mean"], params["moving_variance"]
    else:
        raise LayerError(f"{layer}: mode must be 'train' or 'infer', got {mode!r}")
    mean, var = _broadcast(mean, x, dim), _broadcast(var, x, dim)
    return (x - mean) / torch.sqrt(var + spec.epsilon) * gamma + beta


def dense_forward(x: torch.Tensor, spec: DenseSpec, params, activation: str | None = None,
                  layer: str = "dense"):
    if x.shape[-1] != spec.in_dim:
        raise LayerError(f"{layer}: expected last dimension {spec.in_dim}, got {x.shape[-1]}")
    _check_params(params, spec, layer)
    y = x @ params["kernel"] + params["bias"]
    return ACTIVATIONS[activation or spec.activation](y)


def backward(output: torch.Tensor, wrt, upstream: torch.Tensor | None = None):
    """Gradients of ``output`` (contracted with ``upstream``) w.r.t. each tensor in ``wrt``.

    ``wrt`` may be a sequence or a mapping of tensors; the result mirrors it.
    Unused inputs get zero gradients.
    """
    if output.grad_fn is None and not output.requires_grad:
        raise LayerError("backward called before a differentiable forward pass")
    if upstream is None:
        if output.numel() != 1:
            raise LayerError("non-scalar output needs an upstream gradient")
        upstream = torch.ones_like(output)
    keys = list(wrt) if isinstance(wrt, dict) else None
    tensors = [wrt[k] for k in keys] if keys is not None else list(wrt)
    grads = torch.autograd.grad(output, tensors, grad_outputs=upstream,
                                allow_unused=True, retain_graph=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    return dict(zip(keys, grads)) if keys is not None else grads
