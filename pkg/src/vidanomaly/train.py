"""Initialisation, Adam training loop and checkpoint I/O."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataio import ClipDataset
from .loss import LossConfig, mse_loss, vae_loss
from .models import ModelInstance, ModelKind, build_model

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vidanomaly-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "params.bin"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossConfig | None = None  # None: MSE for the autoencoder, VAE loss with the model's beta
    shuffle: bool = True
    clip_norm: float | None = 5.0
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0 or self.adam_eps <= 0:
            raise TrainingError("learning_rate must be >= 0 and adam_eps > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise TrainingError("Adam betas must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise TrainingError("clip_norm must be positive or None")


@dataclass
class LossHistory:
    total: list[float] = field(default_factory=list)
    reconstruction: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    steps: int = 0

    def __len__(self):
        return len(self.total)


def xavier_init(model: ModelInstance, seed: int = 0) -> ModelInstance:
    """Glorot-uniform kernels, zero biases, unit scales, zero shifts.

    Kernels are drawn from U(-a, a) with ``a = sqrt(6 / (fan_in + fan_out))``
    where the fans include the kernel's receptive field. Draws happen in
    store order from one seeded stream.
    """
    rng = np.random.default_rng(seed)
    for _, name, p in model.params.entries():
        v = p.value
        with torch.no_grad():
            if name in ("kernel", "recurrent_kernel"):
                rf = math.prod(v.shape[2:]) if v.ndim > 2 else 1
                limit = math.sqrt(6.0 / ((v.shape[0] + v.shape[1]) * rf))
                draw = rng.random(tuple(v.shape), dtype=np.float64 if v.dtype == torch.float64
                                  else np.float32)
                draw = draw * (2 * limit) - limit
                v.copy_(torch.from_numpy(draw))
            elif name in ("gamma", "moving_variance"):
                v.fill_(1.0)
            else:
                v.zero_()
    return model


def _loss_config(model: ModelInstance, config: TrainConfig) -> LossConfig:
    if config.loss is not None:
        if config.loss.kind == "vae" and not model.kind.is_vae:
            raise TrainingError("VAE loss requires a latent-producing model")
        if config.loss.kind == "mse" and model.kind.is_vae:
            raise TrainingError("VAE models must be trained with the VAE loss")
        return config.loss
    if model.kind.is_vae:
        return LossConfig("vae", model.kind.beta)
    return LossConfig("mse")


def train(model: ModelInstance, dataset: ClipDataset | np.ndarray, config: TrainConfig,
          progress=None):
    """Train ``model`` in place; returns ``(model, LossHistory)``.

    ``progress``, if given, is called as ``progress(epoch, history)`` after
    each epoch.
    """
    data = dataset.as_array() if isinstance(dataset, ClipDataset) else np.asarray(dataset)
    if data.ndim != 4 or len(data) == 0:
        raise TrainingError(f"need a non-empty (N, T, H, W) dataset, got shape {data.shape}")
    t, h, w, _ = model.input_shape
    if data.shape[1:] != (t, h, w):
        raise TrainingError(f"clip shape {data.shape[1:]} does not match model {(t, h, w)}")
    loss_cfg = _loss_config(model, config)
    dtype = model.params.dtype
    data = torch.as_tensor(data, dtype=dtype)

    order_rng = np.random.default_rng(config.seed)
    eps_gen = torch.Generator().manual_seed(config.seed)
    params = model.params.trainable()
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=config.learning_rate,
                           betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps)
    history = LossHistory()
    try:
        for epoch in range(config.epochs):
            idx = order_rng.permutation(len(data)) if config.shuffle else np.arange(len(data))
            sums = [0.0, 0.0, 0.0]
            n_seen = 0
            for start in range(0, len(data), config.batch_size):
                if config.max_steps is not None and history.steps >= config.max_steps:
                    break
                batch = data[torch.as_tensor(idx[start:start + config.batch_size])].unsqueeze(2)
                eps = None
                if model.kind.is_vae:
                    eps = torch.randn((batch.shape[0], model.latent_dim), generator=eps_gen,
                                      dtype=dtype)
                x_hat, latent = model.forward(batch, "train", eps)
                if model.kind.is_vae:
                    total, rec, kl = vae_loss(batch, x_hat, latent.mu, latent.logvar,
                                              loss_cfg.beta, loss_cfg.reduction,
                                              return_parts=True)
                else:
                    total = rec = mse_loss(batch, x_hat, loss_cfg.reduction)
                    kl = torch.zeros((), dtype=dtype)
                if not torch.isfinite(total):
                    raise TrainingError(
                        f"non-finite loss {total.item()} at epoch {epoch} step {history.steps}")
                opt.zero_grad(set_to_none=True)
                total.backward()
                if config.clip_norm is not None:
                    torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
                opt.step()
                history.steps += 1
                n = batch.shape[0]
                n_seen += n
                sums[0] += total.item() * n
                sums[1] += rec.item() * n
                sums[2] += kl.item() * n
            if n_seen == 0:
                break
            history.total.append(sums[0] / n_seen)
            history.reconstruction.append(sums[1] / n_seen)
            history.kl.append(sums[2] / n_seen)
            log.info("epoch %d: loss %.6g (reconstruction %.6g, kl %.6g)", epoch,
                     history.total[-1], history.reconstruction[-1], history.kl[-1])
            if progress is not None:
                progress(epoch, history)
    finally:
        for p in params:
            p.requires_grad_(False)
            p.grad = None
    return model, history


# ---------------------------------------------------------------------------
# checkpoints


def _spec_record(layer) -> dict:
    return {"name": layer.name, "kind": layer.kind, "type": type(layer.spec).__name__,
            "spec": json.loads(json.dumps(dataclasses.asdict(layer.spec)))}


def save_checkpoint(model: ModelInstance, path, config: TrainConfig | None = None,
                    history: LossHistory | None = None, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus a float32 little-endian ``params.bin`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for layer, name, p in model.params.entries():
        arr = p.value.detach().cpu().numpy().astype("<f4", copy=False)
        entries.append({"layer": layer, "name": name, "shape": list(arr.shape),
                        "trainable": p.trainable, "offset": offset})
        offset += arr.size
        chunks.append(np.ascontiguousarray(arr).tobytes())
    payload = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": {"kind": model.kind.name, "beta": model.kind.beta,
                  "input_shape": list(model.input_shape), "latent_dim": model.latent_dim,
                  "scale": model.scale},
        "layers": [_spec_record(layer) for layer in model.layers],
        "parameters": entries,
        "payload": {"file": PAYLOAD_NAME, "dtype": "float32-le", "n_values": offset,
                    "sha256": hashlib.sha256(payload).hexdigest()},
        "train_config": None if config is None else json.loads(
            json.dumps(dataclasses.asdict(config))),
        "loss_history": None if history is None else dataclasses.asdict(history),
    }
    if extra:
        manifest["extra"] = extra
    (path / PAYLOAD_NAME).write_bytes(payload)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot read manifest ({exc})") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} directory")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_checkpoint(path, dtype=torch.float32) -> ModelInstance:
    path = Path(path)
    manifest = read_manifest(path)
    m = manifest["model"]
    kind = ModelKind(m["kind"], float(m["beta"]))
    model = build_model(kind, tuple(m["input_shape"]), m["latent_dim"] or 32, m["scale"],
                        seed=None, dtype=dtype)
    expected = [_spec_record(layer) for layer in model.layers]
    if expected != manifest["layers"]:
        raise CheckpointError(f"{path}: layer specs in manifest do not match the model kind")
    try:
        payload = (path / manifest["payload"]["file"]).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read payload ({exc})") from exc
    n_values = manifest["payload"]["n_values"]
    if len(payload) != 4 * n_values:
        raise CheckpointError(
            f"{path}: payload holds {len(payload)} bytes, manifest expects {4 * n_values}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload"]["sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f4")
    entries = manifest["parameters"]
    actual = list(model.params.entries())
    if len(entries) != len(actual):
        raise CheckpointError(f"{path}: manifest lists {len(entries)} tensors, "
                              f"model has {len(actual)}")
    for rec, (layer, name, p) in zip(entries, actual):
        if (rec["layer"], rec["name"], rec["trainable"]) != (layer, name, p.trainable):
            raise CheckpointError(f"{path}: unexpected tensor {rec['layer']}/{rec['name']}")
        if tuple(rec["shape"]) != tuple(p.value.shape):
            raise CheckpointError(f"{path}: shape mismatch for {layer}/{name}: "
                                  f"{rec['shape']} vs {list(p.value.shape)}")
        n = p.value.numel()
        chunk = flat[rec["offset"]:rec["offset"] + n].reshape(p.value.shape)
        with torch.no_grad():
            p.value.copy_(torch.from_numpy(chunk.astype(np.float32)))
    return model
