"""Frame-level video anomaly detection with spatiotemporal autoencoders.

Modules:

- ``dataio``: frame directories, sliding-window clips, labels, synthetic sprite videos
- ``layers``: layer specs with exact parameter counts and their forward passes
- ``models``: the ConvLSTM autoencoder and the clip-level (beta-)VAE
- ``loss``, ``train``: objectives, Adam training loop and checkpoints
- ``score``, ``evaluate``: regularity scores, threshold sweeps and report figures
- ``cli``: the ``vidanomaly`` command
"""

from .dataio import FrameLabels, SynthConfig, load_frame_dir, make_clips, synth_generate
from .evaluate import best_f1, sweep
from .loss import LossConfig, kl_gaussian, mse_loss, vae_loss
from .models import ModelKind, build_baseline_ae, build_model, build_vae, reconstruct
from .score import score_video
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "FrameLabels", "LossConfig", "ModelKind", "SynthConfig", "TrainConfig", "best_f1",
    "build_baseline_ae", "build_model", "build_vae", "kl_gaussian", "load_checkpoint",
    "load_frame_dir", "make_clips", "mse_loss", "reconstruct", "save_checkpoint", "score_video",
    "sweep", "synth_generate", "train", "vae_loss",
]
