"""
Synthetic sprite videos with known anomalies
============================================

A bright square drifts to the right. In test videos one contiguous segment
misbehaves: it moves three times faster, doubles in size or turns around.
"""

import tempfile
from pathlib import Path

import numpy as np

from vidanomaly.dataio import SynthConfig, load_labels, load_frame_dir, synth_generate, write_dataset

config = SynthConfig(n_videos=3, frames_per_video=60, sprite_size=8, anomaly_fraction=0.25, seed=4)
videos, labels = synth_generate(config)

for frames, lab in zip(videos, labels):
    # horizontal centre of mass per frame shows the motion pattern
    cols = np.arange(frames.shape[2])
    x = (frames.sum(axis=1) * cols).sum(axis=1) / frames.sum(axis=(1, 2))
    steps = np.diff(x)
    print(lab.video, "anomalous frames", lab.anomalous_ranges,
          "| typical step %.2f px, extreme step %.2f px" % (np.median(steps), steps[np.abs(steps).argmax()]))

###############################################################################
# Written to disk, the frames reload bit for bit, and the labels file round
# trips through its JSON schema.

out = Path(tempfile.mkdtemp())
labels_path = write_dataset(videos, labels, out)
reloaded = load_frame_dir(out / "video_000")
assert np.array_equal(np.stack(reloaded), videos[0])
print(load_labels(labels_path)["video_000"])
