"""Convolutional-LSTM autoencoder and (beta-)VAE assembled from layer specs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import layers as L
from .layers import (
    Conv2DSpec, ConvLSTMSpec, DenseSpec, FlattenSpec, LayerError, NormSpec,
    ParameterStore, ReshapeSpec,
)

KINDS = ("baseline_ae", "vae", "beta_vae")
KIND_ALIASES = {"ae": "baseline_ae", "baseline": "baseline_ae", "beta-vae": "beta_vae",
                "betavae": "beta_vae"}
HIDDEN_ACTIVATION = "relu"
DEFAULT_BETA = 4.0


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelKind:
    name: str
    beta: float = 1.0

    def __post_init__(self):
        if self.name not in KINDS:
            raise ModelError(f"unknown model kind {self.name!r}; choose from {KINDS}")
        if self.beta <= 0:
            raise ModelError(f"beta must be positive, got {self.beta}")
        if self.name == "vae" and self.beta != 1.0:
            raise ModelError("kind 'vae' uses beta = 1; use 'beta_vae' for other weights")
        if self.name == "beta_vae" and not self.beta > 1.0:
            raise ModelError(f"kind 'beta_vae' requires beta > 1, got {self.beta}")

    @property
    def is_vae(self) -> bool:
        return self.name != "baseline_ae"

    @classmethod
    def parse(cls, name: str, beta: float | None = None) -> "ModelKind":
        name = KIND_ALIASES.get(name, name)
        if beta is None:
            beta = DEFAULT_BETA if name == "beta_vae" else 1.0
        elif name == "vae" and beta != 1.0:
            raise ModelError("kind 'vae' uses beta = 1; use 'beta_vae' for other weights")
        return cls(name, float(beta))


@dataclass
class LatentDistribution:
    mu: torch.Tensor
    logvar: torch.Tensor
    z: torch.Tensor


@dataclass(frozen=True)
class Layer:
    name: str
    spec: object
    kind: str  # td_conv | convlstm | norm | flatten | dense | reshape


@dataclass
class ModelInstance:
    kind: ModelKind
    input_shape: tuple[int, int, int, int]  # (T, H, W, 1)
    encoder: list[Layer]
    decoder: list[Layer] = field(default_factory=list)
    params: ParameterStore = field(default_factory=ParameterStore)
    latent_dim: int | None = None
    scale: float = 1.0

    @property
    def layers(self) -> list[Layer]:
        if not self.kind.is_vae:
            return list(self.encoder)
        return list(self.encoder) + self.heads + list(self.decoder)

    @property
    def heads(self) -> list[Layer]:
        if not self.kind.is_vae:
            return []
        in_dim = self.encoder[-1].spec.normalized_channels
        return [Layer("latent_mu", DenseSpec(in_dim, self.latent_dim), "dense"),
                Layer("latent_logvar", DenseSpec(in_dim, self.latent_dim), "dense")]

    def counts(self, part: str = "all") -> tuple[int, int, int]:
        """Parameter counts summed from the allocated store for ``all``, ``encoder`` or ``decoder``."""
        if part == "all":
            return self.params.counts()
        chosen = {"encoder": self.encoder + self.heads, "decoder": self.decoder}[part]
        total = [0, 0, 0]
        for layer in chosen:
            for i, v in enumerate(self.params.layer_counts(layer.name)):
                total[i] += v
        return tuple(total)

    def summary(self) -> list[tuple[str, str, tuple[int, ...], int]]:
        """Rows ``(name, kind, output_shape, n_params)`` with (T, H, W, C) shapes."""
        rows = []
        shape = tuple(self.input_shape)
        for layer in self.encoder:
            shape = L.output_shape(layer.spec, shape)
            rows.append((layer.name, layer.kind, shape, L.param_count(layer.spec)[0]))
        if self.kind.is_vae:
            for layer in self.heads:
                rows.append((layer.name, layer.kind, (self.latent_dim,),
                             L.param_count(layer.spec)[0]))
            shape = (self.latent_dim,)
            for layer in self.decoder:
                shape = L.output_shape(layer.spec, shape)
                rows.append((layer.name, layer.kind, shape, L.param_count(layer.spec)[0]))
        return rows

    def output_shape(self) -> tuple[int, ...]:
        return self.summary()[-1][2]

    # -- forward --------------------------------------------------------------

    def _run(self, layers, x, mode):
        for layer in layers:
            p = self.params[layer.name]
            spec = layer.spec
            if layer.kind == "td_conv":
                x = L.time_distributed(lambda f: L.conv2d_forward(f, spec, p, layer.name), x)
            elif layer.kind == "convlstm":
                x = L.convlstm_forward(x, spec, p, layer=layer.name)
            elif layer.kind == "norm":
                x = L.normalize_forward(x, spec, p, mode, layer=layer.name)
            elif layer.kind == "flatten":
                # (T, H, W, C) element order, matching the reported shapes
                x = x.permute(0, 1, 3, 4, 2).reshape(x.shape[0], -1)
            elif layer.kind == "dense":
                x = L.dense_forward(x, spec, p, layer=layer.name)
            elif layer.kind == "reshape":
                t, h, w, c = spec.target
                x = x.reshape(x.shape[0], t, h, w, c).permute(0, 1, 4, 2, 3)
            else:
                raise LayerError(f"unknown layer kind {layer.kind!r}")
        return x

    def encode(self, x: torch.Tensor, mode: str = "infer"):
        """``(B, T, 1, H, W)`` -> ``(mu, logvar)`` for VAEs."""
        h = self._run(self.encoder, x, mode)
        mu_layer, lv_layer = self.heads
        mu = L.dense_forward(h, mu_layer.spec, self.params[mu_layer.name], layer=mu_layer.name)
        logvar = L.dense_forward(h, lv_layer.spec, self.params[lv_layer.name],
                                 layer=lv_layer.name)
        return mu, logvar

    def decode(self, z: torch.Tensor, mode: str = "infer") -> torch.Tensor:
        return self._run(self.decoder, z, mode)

    def forward(self, x: torch.Tensor, mode: str = "infer", epsilon: torch.Tensor | None = None):
        """Reconstruct a ``(B, T, 1, H, W)`` batch.

        For VAEs, ``epsilon=None`` decodes the posterior mean; otherwise
        ``z = mu + exp(logvar / 2) * epsilon``. Returns ``(x_hat, latent)``.
        """
        t, h, w, c = self.input_shape
        if x.ndim != 5 or tuple(x.shape[1:]) != (t, c, h, w):
            raise ModelError(
                f"expected input (B, {t}, {c}, {h}, {w}), got {tuple(x.shape)}")
        if not self.kind.is_vae:
            return self._run(self.encoder, x, mode), None
        mu, logvar = self.encode(x, mode)
        z = mu if epsilon is None else sample_latent(mu, logvar, epsilon)
        return self.decode(z, mode), LatentDistribution(mu, logvar, z)


def sample_latent(mu, logvar, epsilon):
    """Reparameterised draw ``mu + exp(0.5 * logvar) * epsilon``."""
    if isinstance(mu, np.ndarray) or isinstance(epsilon, np.ndarray):
        mu, logvar, epsilon = (np.asarray(v, dtype=np.float64) for v in (mu, logvar, epsilon))
        if mu.shape != logvar.shape or mu.shape != epsilon.shape:
            raise ModelError("mu, logvar and epsilon must have equal shapes")
        return mu + np.exp(0.5 * logvar) * epsilon
    if mu.shape != logvar.shape or mu.shape != epsilon.shape:
        raise ModelError("mu, logvar and epsilon must have equal shapes")
    return mu + torch.exp(0.5 * logvar) * epsilon


def _scaled(filters: int, scale: float) -> int:
    return max(1, int(round(filters * scale)))


def _check_input(input_shape, divisor):
    t, h, w, c = input_shape
    if c != 1:
        raise ModelError(f"models take single-channel frames, got {c} channels")
    if h % divisor or w % divisor:
        raise ModelError(f"frame size {h}x{w} must be divisible by {divisor}")
    if t < 1:
        raise ModelError("window length must be positive")


def _init(model: ModelInstance, seed, dtype) -> ModelInstance:
    for layer in model.layers:
        model.params.add_layer(layer.name, layer.spec, dtype=dtype)
    if seed is not None:
        from .train import xavier_init
        xavier_init(model, seed)
    return model


def build_baseline_ae(input_shape=(10, 256, 256, 1), scale: float = 1.0, seed: int | None = 0,
                      dtype=torch.float32) -> ModelInstance:
    """Spatial conv encoder, three ConvLSTMs, mirrored transposed-conv decoder."""
    input_shape = tuple(input_shape)
    _check_input(input_shape, 8)
    f128, f64, f32 = (_scaled(f, scale) for f in (128, 64, 32))
    act = HIDDEN_ACTIVATION
    spec_list = [
        ("td_conv_1", Conv2DSpec(1, f128, (11, 11), (4, 4), activation=act), "td_conv"),
        ("layer_norm_1", NormSpec("layer_norm", f128), "norm"),
        ("td_conv_2", Conv2DSpec(f128, f64, (5, 5), (2, 2), activation=act), "td_conv"),
        ("layer_norm_2", NormSpec("layer_norm", f64), "norm"),
        ("convlstm_1", ConvLSTMSpec(f64, f64), "convlstm"),
        ("layer_norm_3", NormSpec("layer_norm", f64), "norm"),
        ("convlstm_2", ConvLSTMSpec(f64, f32), "convlstm"),
        ("layer_norm_4", NormSpec("layer_norm", f32), "norm"),
        ("convlstm_3", ConvLSTMSpec(f32, f64), "convlstm"),
        ("layer_norm_5", NormSpec("layer_norm", f64), "norm"),
        ("td_deconv_1", Conv2DSpec(f64, f64, (5, 5), (2, 2), transposed=True, activation=act),
         "td_conv"),
        ("layer_norm_6", NormSpec("layer_norm", f64), "norm"),
        ("td_deconv_2", Conv2DSpec(f64, f128, (11, 11), (4, 4), transposed=True,
                                   activation=act), "td_conv"),
        ("layer_norm_7", NormSpec("layer_norm", f128), "norm"),
        ("td_conv_out", Conv2DSpec(f128, 1, (11, 11), activation="sigmoid"), "td_conv"),
    ]
    encoder = [Layer(n, s, k) for n, s, k in spec_list]
    model = ModelInstance(ModelKind("baseline_ae"), input_shape, encoder, scale=scale)
    return _init(model, seed, dtype)


def build_vae(input_shape=(10, 256, 256, 1), latent_dim: int = 32, beta: float = 1.0,
              scale: float = 1.0, seed: int | None = 0, dtype=torch.float32) -> ModelInstance:
    """Clip-level VAE: one ``latent_dim`` Gaussian per window.

    ``beta == 1`` gives the plain VAE, ``beta > 1`` the beta-VAE; beta only
    enters the training loss.
    """
    input_shape = tuple(input_shape)
    _check_input(input_shape, 4)
    kind = ModelKind("vae" if beta == 1.0 else "beta_vae", float(beta))
    t, h, w, _ = input_shape
    f64, f16 = _scaled(64, scale), _scaled(16, scale)
    hq, wq = h // 4, w // 4
    flat = t * hq * wq * f16
    act = HIDDEN_ACTIVATION
    encoder = [
        Layer("enc_td_conv", Conv2DSpec(1, f64, (5, 5), (4, 4), activation=act), "td_conv"),
        Layer("enc_batch_norm_1", NormSpec("batch_norm", f64), "norm"),
        Layer("enc_convlstm", ConvLSTMSpec(f64, f16), "convlstm"),
        Layer("enc_batch_norm_2", NormSpec("batch_norm", f16), "norm"),
        Layer("enc_flatten", FlattenSpec(), "flatten"),
        Layer("enc_dense", DenseSpec(flat, latent_dim, act), "dense"),
        Layer("enc_batch_norm_3", NormSpec("batch_norm", latent_dim), "norm"),
    ]
    decoder = [
        Layer("dec_dense", DenseSpec(latent_dim, flat, act), "dense"),
        Layer("dec_batch_norm_1", NormSpec("batch_norm", flat), "norm"),
        Layer("dec_reshape", ReshapeSpec((t, hq, wq, f16)), "reshape"),
        Layer("dec_convlstm", ConvLSTMSpec(f16, f16), "convlstm"),
        Layer("dec_batch_norm_2", NormSpec("batch_norm", f16), "norm"),
        Layer("dec_td_deconv", Conv2DSpec(f16, f64, (5, 5), (4, 4), transposed=True,
                                          activation=act), "td_conv"),
        Layer("dec_batch_norm_3", NormSpec("batch_norm", f64), "norm"),
        Layer("dec_td_conv_out", Conv2DSpec(f64, 1, (11, 11), activation="sigmoid"), "td_conv"),
    ]
    model = ModelInstance(kind, input_shape, encoder, decoder, latent_dim=latent_dim, scale=scale)
    return _init(model, seed, dtype)


def build_model(kind: ModelKind | str, input_shape, latent_dim: int = 32, scale: float = 1.0,
                seed: int | None = 0, dtype=torch.float32, beta: float | None = None):
    if isinstance(kind, str):
        kind = ModelKind.parse(kind, beta)
    if kind.is_vae:
        return build_vae(input_shape, latent_dim, kind.beta, scale, seed, dtype)
    return build_baseline_ae(input_shape, scale, seed, dtype)


def _as_batch(clips, model: ModelInstance) -> torch.Tensor:
    if hasattr(clips, "frames"):
        clips = clips.frames
    arr = torch.as_tensor(np.asarray(clips), dtype=model.params.dtype)
    if arr.ndim == 3:
        arr = arr.unsqueeze(0)
    if arr.ndim != 4:
        raise ModelError(f"expected (T, H, W) or (B, T, H, W) clips, got {tuple(arr.shape)}")
    return arr.unsqueeze(2)


def reconstruct(model: ModelInstance, clip, rng_mode: str = "mean",
                generator: torch.Generator | None = None):
    """Reconstruct a clip (or ``(B, T, H, W)`` batch) in inference mode.

    Returns ``(reconstruction, latent)`` as numpy arrays shaped like the
    input; ``latent`` is None for the baseline autoencoder, which ignores
    ``rng_mode``. VAEs decode ``mu`` in ``mean`` mode and a fresh
    reparameterised sample in ``stochastic`` mode.
    """
    if rng_mode not in ("mean", "stochastic"):
        raise ModelError(f"rng_mode must be 'mean' or 'stochastic', got {rng_mode!r}")
    x = _as_batch(clip, model)
    single = np.asarray(getattr(clip, "frames", clip)).ndim == 3
    with torch.no_grad():
        eps = None
        if model.kind.is_vae and rng_mode == "stochastic":
            eps = torch.randn((x.shape[0], model.latent_dim), generator=generator,
                              dtype=x.dtype)
        y, latent = model.forward(x, "infer", eps)
    recon = y.squeeze(2).numpy()
    if latent is not None:
        latent = LatentDistribution(*(v.numpy() for v in (latent.mu, latent.logvar, latent.z)))
        if single:
            latent = LatentDistribution(latent.mu[0], latent.logvar[0], latent.z[0])
    return (recon[0] if single else recon), latent

