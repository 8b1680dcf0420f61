"""
A tour of the three architectures
=================================

Build the convolutional-LSTM autoencoder and the clip-level VAE at full size,
print their layer tables, then shrink them to desk scale.
"""

from vidanomaly.models import build_baseline_ae, build_vae

###############################################################################
# Full size: 10-frame clips of 256x256 grey frames. ``seed=None`` skips the
# random initialisation, which is all we need for counting.

ae = build_baseline_ae((10, 256, 256, 1), seed=None)
for name, kind, shape, n in ae.summary():
    print(f"{name:<22}{kind:<10}{str(shape):<24}{n:>12,}")
print("baseline total / trainable / frozen:", ae.counts())

###############################################################################
# The VAE squeezes a whole clip into one 32-dimensional Gaussian. Most of its
# weights sit in the two dense layers on either side of the latent code.

vae = build_vae((10, 256, 256, 1), seed=None)
print("encoder:", vae.counts("encoder"))
print("decoder:", vae.counts("decoder"))

###############################################################################
# Desk scale keeps the layer structure and multiplies every filter count by
# ``scale``. At 64x64 and scale 0.1 both models train on a laptop CPU.

small = build_vae((10, 64, 64, 1), scale=0.1, beta=4.0)
print(small.kind, small.counts())
