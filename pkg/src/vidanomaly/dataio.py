"""Frame-directory videos, label files, sliding-window clips and synthetic data.

A frame is a 2-D float32 array of intensities in [0, 1]. A video is an
ordered list of frames (or an ``(n, H, W)`` array).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".gif", ".pgm", ".ppm"}
LABELS_FORMAT = "vidanomaly-labels"
LABELS_VERSION = 1
ANOMALY_KINDS = ("fast_sprite", "large_sprite", "reversed_direction")
LUMA = (0.299, 0.587, 0.114)


class DataError(ValueError):
    """Raised for unreadable frames, malformed label files and bad configs."""


def check_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise DataError(f"frame must be 2-D, got shape {frame.shape}")
    if min(frame.shape) < 8:
        raise DataError(f"frame must be at least 8x8, got {frame.shape}")
    if not np.all(np.isfinite(frame)) or frame.min() < 0 or frame.max() > 1:
        raise DataError("frame intensities must be finite and within [0, 1]")
    return frame


# ---------------------------------------------------------------------------
# loading frames


def _to_intensity(img: Image.Image, path: Path) -> np.ndarray:
    """Convert a decoded image to float32 gray intensities in [0, 1]."""
    mode = img.mode
    if mode == "P":
        img = img.convert("RGBA" if "transparency" in img.info else "RGB")
        mode = img.mode
    if mode in ("1", "L", "LA"):
        arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    elif mode in ("I;16", "I;16B", "I;16L"):
        arr = np.asarray(img, dtype=np.float32) / 65535.0
    elif mode in ("RGB", "RGBA", "RGBX"):
        rgb = np.asarray(img, dtype=np.float32)[..., :3] / 255.0
        arr = rgb @ np.asarray(LUMA, dtype=np.float32)
    elif mode == "I":
        raw = np.asarray(img)
        maxval = 65535.0 if raw.max(initial=0) > 255 else 255.0
        arr = raw.astype(np.float32) / maxval
    elif mode == "F":
        arr = np.asarray(img, dtype=np.float32)
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 1:
            raise DataError(f"{path}: float image outside [0, 1]")
    else:
        raise DataError(f"{path}: unsupported channel interpretation {mode!r}")
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def _resize(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if arr.shape == (h, w):
        return arr
    img = Image.fromarray(arr, mode="F").resize((w, h), Image.BILINEAR)
    return np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)


def list_frame_files(path) -> list[Path]:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path}: not a directory")
    files = sorted(
        (p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.name,
    )
    if not files:
        raise DataError(f"{path}: no image files found")
    return files


def load_frame_dir(path, resize_to: tuple[int, int] | None = None,
                   min_frames: int = 1) -> list[np.ndarray]:
    """Load every image in ``path`` in lexicographic filename order.

    Intensities are divided by the format's maximum value (255 for 8-bit,
    65535 for 16-bit); colour images are reduced with luma weights. When
    ``resize_to=(H, W)`` is given, frames are bilinearly resized without
    preserving aspect ratio.
    """
    files = list_frame_files(path)
    if len(files) < min_frames:
        raise DataError(f"{path}: {len(files)} frames, need at least {min_frames}")
    frames = []
    shape = None
    for f in files:
        try:
            with Image.open(f) as img:
                img.load()
                arr = _to_intensity(img, f)
        except (UnidentifiedImageError, OSError) as exc:
            raise DataError(f"{f}: cannot decode image ({exc})") from exc
        if resize_to is not None:
            arr = _resize(arr, tuple(resize_to))
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise DataError(f"{f}: frame shape {arr.shape} differs from {shape}")
        frames.append(arr)
    return frames


def save_frame_dir(frames, path, prefix: str = "frame") -> None:
    """Write frames as 8-bit PNGs named ``{prefix}_{index:05d}.png``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        check_frame(frame)
        q = np.rint(np.asarray(frame, dtype=np.float64) * 255.0).astype(np.uint8)
        Image.fromarray(q, mode="L").save(path / f"{prefix}_{i:05d}.png")


# ---------------------------------------------------------------------------
# clips


@dataclass
class Clip:
    frames: np.ndarray  # (T, H, W) float32
    start_index: int = 0

    @property
    def window(self) -> int:
        return self.frames.shape[0]


@dataclass
class ClipDataset:
    clips: list[Clip]
    source: str = ""
    window: int = 10
    stride: int = 1

    def __len__(self) -> int:
        return len(self.clips)

    def as_array(self) -> np.ndarray:
        """Stack clips into a ``(N, T, H, W)`` float32 array."""
        return np.stack([c.frames for c in self.clips]).astype(np.float32, copy=False)

    def __add__(self, other: "ClipDataset") -> "ClipDataset":
        if other.window != self.window:
            raise DataError("cannot concatenate datasets with different windows")
        source = ",".join(s for s in (self.source, other.source) if s)
        return ClipDataset(self.clips + other.clips, source, self.window, self.stride)


def clip_count(n_frames: int, window: int, stride: int) -> int:
    return (n_frames - window) // stride + 1


def make_clips(frames, window: int = 10, stride: int = 1, source: str = "") -> ClipDataset:
    """Cut a video into clips starting at 0, stride, 2*stride, ..."""
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    if window < 1:
        raise DataError(f"window must be >= 1, got {window}")
    video = np.asarray(frames, dtype=np.float32)
    n = video.shape[0] if video.ndim == 3 else 0
    if n < window:
        raise DataError(f"video {source!r} has {n} frames; at least {window} required")
    clips = [Clip(video[s:s + window], s)
             for s in range(0, clip_count(n, window, stride) * stride, stride)]
    return ClipDataset(clips, source, window, stride)


# ---------------------------------------------------------------------------
# labels


@dataclass
class FrameLabels:
    video: str
    anomalous_ranges: list[tuple[int, int]] = field(default_factory=list)
    n_frames: int | None = None

    def __post_init__(self):
        self.anomalous_ranges = [tuple(int(v) for v in r) for r in self.anomalous_ranges]
        self.validate()

    def validate(self) -> None:
        prev_end = -1
        for r in self.anomalous_ranges:
            if len(r) != 2:
                raise DataError(f"{self.video}: range {list(r)} must be a [start, end] pair")
            start, end = r
            if start < 0 or end < start:
                raise DataError(f"{self.video}: invalid range {list(r)}")
            if self.n_frames is not None and end >= self.n_frames:
                raise DataError(
                    f"{self.video}: range {list(r)} exceeds last frame {self.n_frames - 1}")
            if start <= prev_end:
                raise DataError(f"{self.video}: range {list(r)} overlaps or is out of order")
            prev_end = end

    def is_anomalous(self, index: int) -> bool:
        return any(s <= index <= e for s, e in self.anomalous_ranges)

    def mask(self, n_frames: int | None = None) -> np.ndarray:
        n = self.n_frames if n_frames is None else n_frames
        if n is None:
            raise DataError(f"{self.video}: frame count unknown")
        out = np.zeros(n, dtype=bool)
        for s, e in self.anomalous_ranges:
            out[s:e + 1] = True
        return out

    @classmethod
    def from_mask(cls, video: str, mask) -> "FrameLabels":
        mask = np.asarray(mask, dtype=bool)
        ranges = []
        padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
        edges = np.flatnonzero(np.diff(padded))
        for s, e in zip(edges[::2], edges[1::2]):
            ranges.append((int(s), int(e) - 1))
        return cls(video, ranges, len(mask))


def save_labels(labels, path) -> None:
    records = []
    for lab in labels:
        rec = {"video": lab.video, "anomalous_ranges": [list(r) for r in lab.anomalous_ranges]}
        if lab.n_frames is not None:
            rec["n_frames"] = lab.n_frames
        records.append(rec)
    doc = {"format": LABELS_FORMAT, "version": LABELS_VERSION, "videos": records}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_labels(path) -> dict[str, FrameLabels]:
    """Read a labels file into ``{video_id: FrameLabels}``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read labels ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != LABELS_FORMAT:
        raise DataError(f"{path}: not a {LABELS_FORMAT} file")
    if doc.get("version") != LABELS_VERSION:
        raise DataError(f"{path}: unsupported labels version {doc.get('version')!r}")
    out = {}
    for rec in doc.get("videos", []):
        unknown = set(rec) - {"video", "anomalous_ranges", "n_frames"}
        if unknown:
            raise DataError(f"{path}: unknown keys {sorted(unknown)}")
        video = str(rec["video"])
        if video in out:
            raise DataError(f"{path}: duplicate video {video!r}")
        out[video] = FrameLabels(video, rec.get("anomalous_ranges", []), rec.get("n_frames"))
    return out


# ---------------------------------------------------------------------------
# synthetic videos


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 4
    frames_per_video: int = 100
    frame_size: tuple[int, int] = (64, 64)
    normal_speed: float = 0.5
    sprite_size: int = 6
    anomaly_kinds: tuple[str, ...] = ANOMALY_KINDS
    anomaly_fraction: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.n_videos < 1 or self.frames_per_video < 1:
            raise DataError("n_videos and frames_per_video must be positive")
        h, w = self.frame_size
        if h < 16 or w < 16:
            raise DataError(f"frame_size must be at least 16x16, got {self.frame_size}")
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise DataError(f"anomaly_fraction must be in [0, 1], got {self.anomaly_fraction}")
        if self.normal_speed < 0:
            raise DataError("normal_speed must be non-negative")
        if not 1 <= 2 * self.sprite_size <= min(h, w):
            raise DataError("sprite_size must be positive and at most half the frame")
        bad = [k for k in self.anomaly_kinds if k not in ANOMALY_KINDS]
        if bad:
            raise DataError(f"anomaly_kinds: unknown kind(s) {bad}; choose from {ANOMALY_KINDS}")
        if self.anomaly_fraction > 0 and not self.anomaly_kinds:
            raise DataError("anomaly_kinds must be non-empty when anomaly_fraction > 0")


def _render(h: int, w: int, y: float, x: float, side: float) -> np.ndarray:
    """Anti-aliased bright square with top-left corner at (y, x), quantised to 1/255."""
    def coverage(n, lo, size):
        edges = np.arange(n, dtype=np.float64)
        return np.clip(np.minimum(edges + 1, lo + size) - np.maximum(edges, lo), 0.0, 1.0)

    img = np.outer(coverage(h, y, side), coverage(w, x, side))
    # same arithmetic as the 8-bit loader, so written frames reload bit-exactly
    return np.rint(img * 255.0).astype(np.uint8).astype(np.float32) / 255.0


def _synth_video(cfg: SynthConfig, rng: np.random.Generator, index: int):
    n = cfg.frames_per_video
    h, w = cfg.frame_size
    side = float(cfg.sprite_size)
    n_anom = int(round(cfg.anomaly_fraction * n))
    kind = None
    start = n
    if n_anom > 0:
        kind = cfg.anomaly_kinds[int(rng.integers(len(cfg.anomaly_kinds)))]
        start = int(rng.integers(0, n - n_anom + 1))
    speeds = np.full(n, cfg.normal_speed)
    sizes = np.full(n, side)
    mask = np.zeros(n, dtype=bool)
    mask[start:start + n_anom] = True
    if kind == "fast_sprite":
        speeds[mask] = 3.0 * cfg.normal_speed
    elif kind == "large_sprite":
        sizes[mask] = 2.0 * side
    elif kind == "reversed_direction":
        speeds[mask] = -cfg.normal_speed
    # offsets of the left edge relative to the first frame
    offsets = np.concatenate([[0.0], np.cumsum(speeds[:-1])])
    # choose a start that keeps the whole trajectory inside the frame when it
    # fits, so that border clamping never freezes the sprite mid-video
    lo = -offsets.min()
    hi = (w - sizes - offsets).min()
    x0 = float(rng.uniform(lo, hi)) if hi >= lo else max(lo, 0.0)
    y = float(rng.uniform(0.0, h - sizes.max()))

    frames = np.empty((n, h, w), dtype=np.float32)
    x = x0
    for t in range(n):
        size = sizes[t]
        xc = min(max(x, 0.0), w - size)
        yc = min(max(y, 0.0), h - size)
        frames[t] = _render(h, w, yc, xc, size)
        x = min(max(x + speeds[t], 0.0), w - side)
    video = f"video_{index:03d}"
    return frames, FrameLabels.from_mask(video, mask), kind


def synth_generate(config: SynthConfig):
    """Generate ``(videos, labels)``; a pure function of ``config``.

    Each video shows one square moving rightwards at ``normal_speed``.
    A single contiguous segment of ``round(anomaly_fraction * n)`` frames
    switches to one anomaly kind drawn from ``anomaly_kinds``: triple speed,
    doubled side length, or reversed velocity. Start positions keep the whole
    trajectory in frame when it fits; otherwise positions clamp at borders.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    videos, labels = [], []
    for i in range(config.n_videos):
        frames, lab, _ = _synth_video(config, rng, i)
        videos.append(frames)
        labels.append(lab)
    return videos, labels


def write_dataset(videos, labels, out_dir, labels_name: str = "labels.json") -> Path:
    """Write videos as frame directories plus one labels file; returns the labels path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for frames, lab in zip(videos, labels):
        save_frame_dir(frames, out_dir / lab.video)
    labels_path = out_dir / labels_name
    save_labels(labels, labels_path)
    return labels_path


def list_videos(data_dir) -> list[Path]:
    """Subdirectories of ``data_dir`` that hold frames, in sorted order."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"{data_dir}: not a directory")
    dirs = sorted((p for p in data_dir.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not dirs:
        raise DataError(f"{data_dir}: no video directories found")
    return dirs


def load_video_dataset(data_dir, window: int, stride: int,
                       resize_to: tuple[int, int] | None = None) -> ClipDataset:
    """Load every video under ``data_dir`` and concatenate their clips."""
    total = None
    for vdir in list_videos(data_dir):
        frames = load_frame_dir(vdir, resize_to, min_frames=window)
        ds = make_clips(frames, window, stride, source=vdir.name)
        total = ds if total is None else total + ds
    return total


__all__ = [
    "ANOMALY_KINDS", "Clip", "ClipDataset", "DataError", "FrameLabels", "SynthConfig",
    "check_frame", "clip_count", "list_videos", "load_frame_dir", "load_labels",
    "load_video_dataset", "make_clips", "save_frame_dir", "save_labels", "synth_generate",
    "write_dataset",
]
