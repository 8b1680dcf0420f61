import json

import numpy as np
import pytest
import torch

from vidanomaly.dataio import SynthConfig, make_clips, synth_generate
from vidanomaly.loss import LossConfig
from vidanomaly.models import build_model, build_vae, reconstruct
from vidanomaly.train import (
    CheckpointError, TrainConfig, TrainingError, load_checkpoint, read_manifest,
    save_checkpoint, train, xavier_init,
)


def tiny_clips(n_videos=2, frames=12, window=4, seed=0):
    videos, _ = synth_generate(SynthConfig(n_videos=n_videos, frames_per_video=frames,
                                           frame_size=(16, 16), sprite_size=3,
                                           anomaly_fraction=0.0, seed=seed))
    ds = make_clips(videos[0], window, 2, "v0")
    for i, v in enumerate(videos[1:], 1):
        ds = ds + make_clips(v, window, 2, f"v{i}")
    return ds


def snapshot(model):
    return [p.value.clone() for _, _, p in model.params.entries()]


def test_xavier_is_deterministic_and_zeroes_biases():
    a = build_model("vae", (4, 16, 16, 1), scale=0.1, seed=3)
    b = build_model("vae", (4, 16, 16, 1), scale=0.1, seed=3)
    c = build_model("vae", (4, 16, 16, 1), scale=0.1, seed=4)
    assert a.params.equal(b.params)
    assert not a.params.equal(c.params)
    for _, name, p in a.params.entries():
        if name in ("bias", "beta", "moving_mean"):
            assert not p.value.any()
        if name in ("gamma", "moving_variance"):
            assert (p.value == 1).all()


def test_xavier_variance_of_the_wide_dense_kernel():
    model = build_vae((10, 256, 256, 1), seed=None)
    xavier_init(model, seed=0)
    w = model.params["enc_dense"]["kernel"]
    assert tuple(w.shape) == (655_360, 32)
    expected = 2.0 / (655_360 + 32)  # Var U(-a, a) = a^2 / 3 with a^2 = 6 / (fan_in + fan_out)
    assert w.double().var().item() == pytest.approx(expected, rel=0.1)


def test_history_has_one_entry_per_epoch():
    model = build_model("ae", (4, 16, 16, 1), scale=0.1, seed=0)
    _, history = train(model, tiny_clips(), TrainConfig(epochs=5, batch_size=2))
    assert len(history) == 5
    assert len(history.reconstruction) == len(history.kl) == 5
    assert all(k == 0 for k in history.kl)


def test_zero_learning_rate_leaves_trainable_parameters_unchanged():
    model = build_model("vae", (4, 16, 16, 1), latent_dim=4, scale=0.1, seed=0)
    before = snapshot(model)
    train(model, tiny_clips(), TrainConfig(epochs=1, batch_size=2, learning_rate=0.0))
    for (_, _, p), old in zip(model.params.entries(), before):
        if p.trainable:
            assert torch.equal(p.value, old)


def test_adam_step_with_zero_gradient_is_a_no_op():
    p = torch.tensor([0.3, -1.2], requires_grad=True)
    opt = torch.optim.Adam([p], lr=0.1)
    p.grad = torch.zeros(2)
    opt.step()
    assert torch.equal(p.detach(), torch.tensor([0.3, -1.2]))


@pytest.mark.parametrize("kind", ["baseline_ae", "beta_vae"])
def test_training_is_deterministic(kind):
    runs = []
    for _ in range(2):
        model = build_model(kind, (4, 16, 16, 1), latent_dim=4, scale=0.1, seed=1)
        _, history = train(model, tiny_clips(), TrainConfig(epochs=2, batch_size=3, seed=7))
        runs.append((history, snapshot(model)))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_history_components_add_up():
    model = build_model("beta_vae", (4, 16, 16, 1), latent_dim=4, scale=0.1, seed=0)
    _, h = train(model, tiny_clips(), TrainConfig(epochs=3, batch_size=2))
    for total, rec, kl in zip(h.total, h.reconstruction, h.kl):
        assert total == pytest.approx(rec + 4.0 * kl, abs=1e-6)


def test_short_training_reduces_the_loss():
    model = build_model("ae", (4, 16, 16, 1), scale=0.2, seed=0)
    _, h = train(model, tiny_clips(), TrainConfig(epochs=15, batch_size=2, learning_rate=1e-3))
    assert h.total[-1] < 0.5 * h.total[0]


def test_max_steps_caps_optimizer_updates():
    model = build_model("ae", (4, 16, 16, 1), scale=0.1, seed=0)
    _, h = train(model, tiny_clips(), TrainConfig(epochs=10, batch_size=2, max_steps=3))
    assert h.steps == 3


def test_non_finite_loss_raises():
    model = build_model("ae", (4, 16, 16, 1), scale=0.1, seed=0)
    clips = tiny_clips().as_array()
    clips[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 0"):
        train(model, clips, TrainConfig(epochs=1, batch_size=len(clips), shuffle=False))


def test_config_and_loss_validation():
    with pytest.raises(TrainingError):
        TrainConfig(epochs=0)
    with pytest.raises(TrainingError):
        TrainConfig(adam_beta1=1.0)
    model = build_model("ae", (4, 16, 16, 1), scale=0.1)
    with pytest.raises(TrainingError):
        train(model, tiny_clips(), TrainConfig(loss=LossConfig("vae", 1.0)))
    with pytest.raises(TrainingError):
        train(model, np.zeros((2, 5, 16, 16), np.float32), TrainConfig())


@pytest.fixture
def trained_vae():
    model = build_model("vae", (4, 16, 16, 1), latent_dim=4, scale=0.1, seed=2)
    config = TrainConfig(epochs=2, batch_size=2)
    _, history = train(model, tiny_clips(), config)
    return model, config, history


def test_checkpoint_round_trip_is_bitwise(trained_vae, tmp_path):
    model, config, history = trained_vae
    save_checkpoint(model, tmp_path / "ck", config, history)
    loaded = load_checkpoint(tmp_path / "ck")
    assert loaded.kind == model.kind and loaded.input_shape == model.input_shape
    assert loaded.params.equal(model.params)
    clip = tiny_clips().as_array()[0]
    np.testing.assert_array_equal(reconstruct(loaded, clip)[0], reconstruct(model, clip)[0])
    manifest = read_manifest(tmp_path / "ck")
    assert manifest["loss_history"]["total"] == history.total
    save_checkpoint(loaded, tmp_path / "ck2", config, history)
    assert (tmp_path / "ck2" / "params.bin").read_bytes() == \
        (tmp_path / "ck" / "params.bin").read_bytes()


def test_damaged_checkpoints_are_rejected(trained_vae, tmp_path):
    model, config, history = trained_vae
    path = save_checkpoint(model, tmp_path / "ck", config, history)
    payload = (path / "params.bin").read_bytes()
    (path / "params.bin").write_bytes(payload[:-4])
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(path)
    flipped = bytearray(payload)
    flipped[10] ^= 0xFF
    (path / "params.bin").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    (path / "params.bin").write_bytes(payload)
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["model"]["kind"] = "baseline_ae"
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
