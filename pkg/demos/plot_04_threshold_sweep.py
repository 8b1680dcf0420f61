"""
Sweeping the regularity threshold
=================================

Frames whose regularity falls below a threshold are flagged. Sweeping the
threshold traces F1 and a precision-recall curve. The figures are always
drawn from tables on disk.
"""

import tempfile
from pathlib import Path

import numpy as np

from vidanomaly.evaluate import best_f1, plot_comparison, summarize, sweep, write_metrics

rng = np.random.default_rng(0)
truth = rng.random(400) < 0.25

###############################################################################
# Three made-up detectors with increasingly noisy regularity scores.

out = Path(tempfile.mkdtemp())
files = {}
for name, noise in [("sharp", 0.05), ("fair", 0.15), ("blurry", 0.3)]:
    s_r = np.clip(np.where(truth, 0.55, 0.85) + rng.normal(0, noise, truth.size), 0, 1)
    table = sweep(s_r, truth)
    theta, f1 = best_f1(table)
    print(f"{name:>7}: best F1 {f1:.3f} at threshold {theta:.2f}")
    files[name] = out / f"{name}.csv"
    write_metrics(table, files[name])

figures = plot_comparison(files, out / "report")
print(summarize(files))
print("figures:", *figures.values())
