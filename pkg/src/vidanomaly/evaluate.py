"""Frame-level threshold sweeps over regularity scores.

A frame is predicted anomalous (the positive class) iff its regularity is
strictly below the threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import FrameLabels
from .score import ScoreSeries

METRIC_COLUMNS = ("threshold", "tp", "fp", "tn", "fn", "fpr", "tpr", "precision", "f1")
PR_COLUMNS = ("recall", "precision")
HIGHLIGHT_THRESHOLD = 0.85


class EvalError(ValueError):
    pass


def default_grid(start: float = 0.0, stop: float = 1.0, step: float = 0.01) -> np.ndarray:
    n = int(round((stop - start) / step)) + 1
    return np.round(start + step * np.arange(n), 10)


def _mask(labels, n: int) -> np.ndarray:
    if isinstance(labels, FrameLabels):
        return labels.mask(n)
    mask = np.asarray(labels, dtype=bool)
    if mask.shape != (n,):
        raise EvalError(f"{len(mask)} labels for {n} scores")
    return mask


def confusion_at_threshold(s_r, labels, theta: float) -> tuple[int, int, int, int]:
    """``(TP, FP, TN, FN)`` for the rule ``s_r < theta``."""
    s_r = np.asarray(s_r, dtype=np.float64)
    truth = _mask(labels, len(s_r))
    pred = s_r < theta
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return tp, fp, tn, fn


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros(len(num), dtype=np.float64), where=den > 0)


@dataclass
class MetricsTable:
    threshold: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray
    excluded_frames: int = 0

    @property
    def fpr(self):
        return _ratio(self.fp, self.fp + self.tn)

    @property
    def tpr(self):
        return _ratio(self.tp, self.tp + self.fn)

    recall = tpr

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return _ratio(2 * p * r, p + r)

    def __len__(self):
        return len(self.threshold)

    def rows(self):
        cols = [self.threshold, self.tp, self.fp, self.tn, self.fn, self.fpr, self.tpr,
                self.precision, self.f1]
        for vals in zip(*cols):
            yield dict(zip(METRIC_COLUMNS, vals))

    def row_at(self, theta: float) -> dict | None:
        hits = np.flatnonzero(np.isclose(self.threshold, theta))
        if len(hits) == 0:
            return None
        return list(self.rows())[hits[0]]


def sweep(s_r, labels, grid=None, excluded_frames: int = 0) -> MetricsTable:
    s_r = np.asarray(s_r, dtype=np.float64)
    truth = _mask(labels, len(s_r))
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise EvalError("threshold grid is empty")
    # counts via sorted scores: predicted positives = #{s_r < theta}
    order = np.argsort(s_r, kind="stable")
    sorted_scores = s_r[order]
    cum_pos = np.concatenate([[0], np.cumsum(truth[order])])
    k = np.searchsorted(sorted_scores, grid, side="left")
    tp = cum_pos[k]
    fp = k - tp
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    return MetricsTable(grid, tp.astype(np.int64), fp.astype(np.int64),
                        (n_neg - fp).astype(np.int64), (n_pos - tp).astype(np.int64),
                        excluded_frames)


def pr_curve(table: MetricsTable) -> list[tuple[float, float]]:
    """Unique ``(recall, precision)`` points sorted by recall, then precision."""
    pts = {(float(r), float(p)) for r, p in zip(table.recall, table.precision)}
    return sorted(pts)


def best_f1(table: MetricsTable) -> tuple[float, float]:
    """``(theta, F1)`` of the best row; ties go to the smallest threshold."""
    if len(table) == 0:
        raise EvalError("empty metrics table")
    f1 = table.f1
    best = f1.max()
    idx = np.flatnonzero(f1 == best)
    i = idx[np.argmin(table.threshold[idx])]
    return float(table.threshold[i]), float(f1[i])


def evaluation_arrays(series: list[ScoreSeries], labels: dict[str, FrameLabels]):
    """Concatenate per-start regularity with the labels of each window's start frame.

    Returns ``(s_r, truth, excluded)``; ``excluded`` counts trailing frames
    that have no full window.
    """
    s_r, truth, excluded = [], [], 0
    for s in series:
        if s.video not in labels:
            raise EvalError(f"no labels for video {s.video!r}")
        lab = labels[s.video]
        n = lab.n_frames if lab.n_frames is not None else s.n_frames
        if n != s.n_frames:
            raise EvalError(f"{s.video}: {s.n_frames} scored frames, labels cover {n}")
        mask = lab.mask(n)
        k = len(s.s_r)
        s_r.append(s.s_r)
        truth.append(mask[:k])
        excluded += n - k
    return np.concatenate(s_r), np.concatenate(truth), excluded


# ---------------------------------------------------------------------------
# files


def _fmt(v) -> str:
    return repr(float(v))


def write_metrics(table: MetricsTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# excluded_frames={table.excluded_frames}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in table.rows():
            w.writerow([_fmt(row["threshold"]), int(row["tp"]), int(row["fp"]), int(row["tn"]),
                        int(row["fn"])] + [_fmt(row[c]) for c in METRIC_COLUMNS[5:]])


def read_metrics(path) -> MetricsTable:
    path = Path(path)
    excluded = 0
    with open(path, newline="") as fh:
        first = fh.readline()
        if first.startswith("#"):
            _, _, v = first.strip("# \n").partition("=")
            excluded = int(v) if v else 0
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise EvalError(f"{path}: expected header {','.join(METRIC_COLUMNS)}")
        rows = list(reader)
    if not rows:
        raise EvalError(f"{path}: no metric rows")
    cols = list(zip(*rows))
    return MetricsTable(np.array(cols[0], dtype=np.float64),
                        *(np.array(c, dtype=np.int64) for c in cols[1:5]),
                        excluded_frames=excluded)


def write_pr_curve(table: MetricsTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PR_COLUMNS)
        for r, p in pr_curve(table):
            w.writerow([_fmt(r), _fmt(p)])


def read_pr_curve(path) -> list[tuple[float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PR_COLUMNS:
            raise EvalError(f"{path}: expected header {','.join(PR_COLUMNS)}")
        return [(float(r), float(p)) for r, p in reader]


# ---------------------------------------------------------------------------
# report


def plot_comparison(metrics_files: dict[str, Path], out_dir) -> dict[str, Path]:
    """Render F1-vs-threshold and precision-recall figures from metrics files on disk."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = {name: read_metrics(p) for name, p in metrics_files.items()}

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, table in tables.items():
        ax.plot(table.threshold, table.f1, label=name)
    ax.axvline(HIGHLIGHT_THRESHOLD, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("regularity threshold")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.set_title("F1 vs regularity threshold")
    fig.tight_layout()
    f1_path = out_dir / "f1_vs_threshold.png"
    fig.savefig(f1_path, dpi=100, metadata={"Software": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 5))
    for name, table in tables.items():
        pts = pr_curve(table)
        ax.plot([r for r, _ in pts], [p for _, p in pts], marker=".", label=name)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.set_title("Precision-recall")
    fig.tight_layout()
    pr_path = out_dir / "pr_curves.png"
    fig.savefig(pr_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return {"f1": f1_path, "pr": pr_path}


def summarize(metrics_files: dict[str, Path]) -> str:
    lines = [f"{'model':<14} {'best_theta':>10} {'best_f1':>8} "
             f"{'f1@' + str(HIGHLIGHT_THRESHOLD):>8} {'excluded':>8}"]
    for name, p in metrics_files.items():
        table = read_metrics(p)
        theta, f1 = best_f1(table)
        row = table.row_at(HIGHLIGHT_THRESHOLD)
        hl = f"{row['f1']:.4f}" if row is not None else "n/a"
        lines.append(f"{name:<14} {theta:>10.2f} {f1:>8.4f} {hl:>8} {table.excluded_frames:>8}")
    return "\n".join(lines) + "\n"
