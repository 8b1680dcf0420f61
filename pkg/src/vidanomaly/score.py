"""Reconstruction-error regularity scores for whole videos.

Per-pixel absolute error -> per-frame sum -> windowed cost over ``window``
consecutive frames -> per-video normalised anomaly score -> regularity
``1 - anomaly``. Windowed quantities are indexed by window start.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODES = ("minmax", "paper_literal")
SCORE_COLUMNS = ("index", "e", "cost", "s_a", "s_r")


class ScoreError(ValueError):
    pass


@dataclass
class ScoreSeries:
    video: str
    e: np.ndarray       # per frame
    cost: np.ndarray    # per window start
    s_a: np.ndarray
    s_r: np.ndarray
    window: int
    normalization_mode: str = "minmax"

    @property
    def n_frames(self) -> int:
        return len(self.e)


def pixel_error(frame, reconstruction) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    if frame.shape != reconstruction.shape:
        raise ScoreError(f"shape mismatch: {frame.shape} vs {reconstruction.shape}")
    return np.abs(frame - reconstruction)


def frame_error(error_map) -> float:
    return float(np.sum(error_map))


def sequence_cost(e, t: int, window: int = 10) -> float:
    """Sum of ``e`` over the ``window`` frames starting at ``t``."""
    e = np.asarray(e, dtype=np.float64)
    if window < 1 or t < 0 or t + window > len(e):
        raise ScoreError(f"window [{t}, {t + window}) outside series of length {len(e)}")
    return float(e[t:t + window].sum())


def sequence_costs(e, window: int = 10) -> np.ndarray:
    """Costs for every valid start ``0 .. len(e) - window``."""
    e = np.asarray(e, dtype=np.float64)
    if len(e) < window:
        raise ScoreError(f"series of length {len(e)} is shorter than window {window}")
    return np.lib.stride_tricks.sliding_window_view(e, window).sum(axis=1)


def anomaly_score(costs, mode: str = "minmax") -> np.ndarray:
    """Scale costs with per-series statistics.

    ``minmax`` maps to [0, 1] via ``(c - min) / (max - min)``;
    ``paper_literal`` uses ``(c - min) / max``. Degenerate series
    (``max == min``, or ``max == 0`` in literal mode) score all zeros.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.size == 0:
        raise ScoreError("anomaly_score needs at least one cost")
    lo, hi = c.min(), c.max()
    if mode == "minmax":
        denom = hi - lo
    elif mode == "paper_literal":
        denom = hi
    else:
        raise ScoreError(f"normalization mode must be one of {MODES}, got {mode!r}")
    if hi == lo or denom == 0:
        return np.zeros_like(c)
    return (c - lo) / denom


def regularity(s_a) -> np.ndarray:
    return 1.0 - np.asarray(s_a, dtype=np.float64)


def _reconstructor(model):
    if callable(model) and not hasattr(model, "params"):
        return model
    from .models import reconstruct

    def run(clips):
        return reconstruct(model, clips, "mean")[0]
    return run


def frame_errors(model, frames, window: int = 10, stride: int = 1,
                 batch_size: int = 16) -> np.ndarray:
    """Per-frame error averaged over every reconstructed clip covering the frame.

    Clips start at 0, stride, 2*stride, ...; if the last frames would be left
    uncovered an extra clip starting at ``n - window`` is added.
    """
    video = np.asarray(frames, dtype=np.float32)
    n = len(video)
    if n < window:
        raise ScoreError(f"video has {n} frames; at least {window} required")
    if stride < 1:
        raise ScoreError(f"stride must be >= 1, got {stride}")
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    run = _reconstructor(model)
    total = np.zeros(n, dtype=np.float64)
    count = np.zeros(n, dtype=np.int64)
    for b in range(0, len(starts), batch_size):
        chunk = starts[b:b + batch_size]
        clips = np.stack([video[s:s + window] for s in chunk])
        recon = np.asarray(run(clips), dtype=np.float64)
        if recon.shape != clips.shape:
            raise ScoreError(f"reconstruction shape {recon.shape} != clip shape {clips.shape}")
        errs = np.abs(clips.astype(np.float64) - recon).sum(axis=(2, 3))
        for s, row in zip(chunk, errs):
            total[s:s + window] += row
            count[s:s + window] += 1
    return total / count


def score_errors(e, window: int = 10, normalization_mode: str = "minmax",
                 video: str = "") -> ScoreSeries:
    costs = sequence_costs(e, window)
    s_a = anomaly_score(costs, normalization_mode)
    return ScoreSeries(video, np.asarray(e, dtype=np.float64), costs, s_a, regularity(s_a),
                       window, normalization_mode)


def score_video(model, frames, window: int = 10, stride: int = 1,
                normalization_mode: str = "minmax", video: str = "",
                batch_size: int = 16) -> ScoreSeries:
    """Score one video.

    ``model`` is a :class:`~vidanomaly.models.ModelInstance` (VAEs decode the
    posterior mean) or any callable mapping ``(B, T, H, W)`` clips to
    reconstructions of the same shape.
    """
    e = frame_errors(model, frames, window, stride, batch_size)
    return score_errors(e, window, normalization_mode, video)


# ---------------------------------------------------------------------------
# scores file


def _fmt(v) -> str:
    return repr(float(v))


def write_scores(series: ScoreSeries, path) -> None:
    """One row per frame; trailing frames without a full window have empty score fields."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# video={series.video} window={series.window} "
                 f"normalization={series.normalization_mode}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        n_starts = len(series.cost)
        for i in range(series.n_frames):
            if i < n_starts:
                w.writerow([i, _fmt(series.e[i]), _fmt(series.cost[i]), _fmt(series.s_a[i]),
                            _fmt(series.s_r[i])])
            else:
                w.writerow([i, _fmt(series.e[i]), "", "", ""])


def read_scores(path) -> ScoreSeries:
    path = Path(path)
    meta = {}
    rows = []
    with open(path, newline="") as fh:
        first = fh.readline()
        if first.startswith("#"):
            for item in first[1:].split():
                k, _, v = item.partition("=")
                meta[k] = v
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SCORE_COLUMNS:
            raise ScoreError(f"{path}: expected header {','.join(SCORE_COLUMNS)}")
        rows = list(reader)
    if not rows:
        raise ScoreError(f"{path}: no score rows")
    e = np.array([float(r[1]) for r in rows])
    full = [r for r in rows if r[2] != ""]
    cost = np.array([float(r[2]) for r in full])
    s_a = np.array([float(r[3]) for r in full])
    s_r = np.array([float(r[4]) for r in full])
    window = int(meta.get("window", len(rows) - len(full) + 1))
    return ScoreSeries(meta.get("video", path.stem), e, cost, s_a, s_r, window,
                       meta.get("normalization", "minmax"))
