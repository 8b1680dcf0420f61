"""Command-line front end: ``vidanomaly synth | train | score | eval | report | pipeline``.

Every option lives in a sectioned run configuration. A YAML or JSON file
passed with ``--config`` supplies values and ``--section.key VALUE`` flags
override them. Unknown sections or keys are rejected.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dataio import (
    ANOMALY_KINDS, DataError, SynthConfig, list_videos, load_frame_dir, load_labels,
    load_video_dataset, synth_generate, write_dataset,
)
from .evaluate import (
    EvalError, best_f1, default_grid, evaluation_arrays, plot_comparison, read_metrics,
    summarize, sweep, write_metrics, write_pr_curve,
)
from .loss import REDUCTIONS, LossConfig, LossError
from .models import KINDS, ModelError, ModelKind, build_model
from .score import MODES, ScoreError, read_scores, score_video, write_scores
from .train import (
    CheckpointError, TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train,
)

log = logging.getLogger("vidanomaly")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


RUNTIME_ERRORS = (DataError, ScoreError, EvalError, TrainingError, CheckpointError, LossError,
                  ModelError, OSError)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DataSection:
    train_dir: str | None = None
    test_dir: str | None = None
    labels: str | None = None
    resize: tuple[int, int] | None = None
    window: int = 10
    stride: int = 1


@dataclass
class SynthSection:
    n_videos: int = 4
    frames_per_video: int = 100
    frame_size: tuple[int, int] = (64, 64)
    normal_speed: float = 0.5
    sprite_size: int = 6
    anomaly_kinds: tuple[str, ...] = ANOMALY_KINDS
    anomaly_fraction: float = 0.25
    seed: int = 0


@dataclass
class ModelSection:
    kind: str = "vae"
    beta: float | None = None
    latent_dim: int = 32
    scale: float = 0.1
    seed: int = 0


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    clip_norm: float | None = 5.0
    max_steps: int | None = None
    loss_reduction: str = "mean_per_pixel"


@dataclass
class ScoreSection:
    normalization_mode: str = "minmax"
    stride: int = 1
    batch_size: int = 16


@dataclass
class EvalSection:
    grid_start: float = 0.0
    grid_stop: float = 1.0
    grid_step: float = 0.01


@dataclass
class PipelineSection:
    models: tuple[str, ...] = KINDS
    n_train_videos: int = 8
    n_test_videos: int = 4
    train_seed: int = 0
    test_seed: int = 1
    # per-model replacements for keys of the train section, e.g.
    # {"baseline_ae": {"epochs": 12, "loss_reduction": "mean_per_pixel"}}
    train_overrides: dict[str, dict] = field(default_factory=dict)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    score: ScoreSection = field(default_factory=ScoreSection)
    eval: EvalSection = field(default_factory=EvalSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)

    def validate(self) -> "RunConfig":
        d = self.data
        if d.window < 1 or d.stride < 1:
            raise ConfigError("data.window and data.stride must be positive")
        if self.score.stride < 1 or self.score.batch_size < 1:
            raise ConfigError("score.stride and score.batch_size must be positive")
        if self.score.normalization_mode not in MODES:
            raise ConfigError(f"score.normalization_mode must be one of {MODES}")
        if self.train.loss_reduction not in REDUCTIONS:
            raise ConfigError(f"train.loss_reduction must be one of {REDUCTIONS}")
        e = self.eval
        if not (e.grid_step > 0 and e.grid_stop >= e.grid_start):
            raise ConfigError("eval grid needs grid_step > 0 and grid_stop >= grid_start")
        if self.model.scale <= 0 or self.model.latent_dim < 1:
            raise ConfigError("model.scale and model.latent_dim must be positive")
        for name in (self.model.kind, *self.pipeline.models):
            try:
                ModelKind.parse(name, self.model.beta if name == self.model.kind else None)
            except ModelError as exc:
                raise ConfigError(f"model.kind: {exc}") from None
        try:
            self.synth_config().validate()
            self.train_config("baseline_ae")
            for name in self.pipeline.train_overrides:
                self.for_model(name).train_config(name)
        except (DataError, TrainingError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def synth_config(self, **overrides) -> SynthConfig:
        values = dataclasses.asdict(self.synth)
        values.update(overrides)
        values["frame_size"] = tuple(values["frame_size"])
        values["anomaly_kinds"] = tuple(values["anomaly_kinds"])
        return SynthConfig(**values)

    def model_kind(self, name: str | None = None) -> ModelKind:
        name = name or self.model.kind
        beta = self.model.beta if name == self.model.kind else None
        return ModelKind.parse(name, beta)

    def train_config(self, kind: ModelKind | str) -> TrainConfig:
        kind = kind if isinstance(kind, ModelKind) else ModelKind.parse(kind)
        values = dataclasses.asdict(self.train)
        reduction = values.pop("loss_reduction")
        loss = LossConfig("vae", kind.beta, reduction) if kind.is_vae else LossConfig(
            "mse", 1.0, reduction)
        return TrainConfig(loss=loss, **values)

    def for_model(self, name: str) -> "RunConfig":
        """This config with the pipeline's train overrides for model ``name`` applied."""
        keys = self.pipeline.train_overrides.get(ModelKind.parse(name).name, {})
        if not keys:
            return self
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **keys))

    def grid(self) -> np.ndarray:
        e = self.eval
        return default_grid(e.grid_start, e.grid_stop, e.grid_step)

    def to_dict(self) -> dict:
        def plain(v):
            return list(v) if isinstance(v, tuple) else v
        return {s.name: {k: plain(v) for k, v in dataclasses.asdict(getattr(self, s.name)).items()}
                for s in dataclasses.fields(self)}


def _section_types(section_cls) -> dict[str, object]:
    return typing.get_type_hints(section_cls)


def _coerce(value, hint, where: str):
    """Convert a YAML value or a command-line string to the annotated field type."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
            return None
        return _coerce(value, inner[0], where)
    if origin is dict:
        return _coerce_overrides(value, where)
    if origin is tuple:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        item = args[0]
        if args[-1] is not Ellipsis and len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, item, where) for v in value)
    if hint is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "yes", "1", "false", "no", "0"):
            return value.lower() in ("true", "yes", "1")
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if hint in (int, float):
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        try:
            out = hint(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected {hint.__name__}, got {value!r}") from None
        if hint is int and isinstance(value, float) and value != out:
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return out
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported type {hint}")


def _coerce_overrides(value, where: str) -> dict[str, dict]:
    if isinstance(value, str):
        try:
            value = yaml.safe_load(value) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{where}: not valid YAML/JSON: {exc}") from None
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a mapping of model kind to train keys")
    hints = _section_types(TrainSection)
    out = {}
    for kind, keys in value.items():
        try:
            name = ModelKind.parse(str(kind)).name
        except ModelError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        if not isinstance(keys, dict):
            raise ConfigError(f"{where}.{kind}: expected a mapping of train keys")
        for key in keys:
            if key not in hints:
                raise ConfigError(f"unknown config key {where}.{kind}.{key}")
        out[name] = {k: _coerce(v, hints[k], f"{where}.{kind}.{k}") for k, v in keys.items()}
    return out


def _apply(config: RunConfig, section: str, key: str, value) -> None:
    sections = {f.name for f in dataclasses.fields(RunConfig)}
    if section not in sections:
        raise ConfigError(f"unknown config section {section!r}; expected one of {sorted(sections)}")
    target = getattr(config, section)
    hints = _section_types(type(target))
    if key not in hints:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(target, key, _coerce(value, hints[key], f"{section}.{key}"))


def load_run_config(path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``{"section.key": value}`` overrides."""
    config = RunConfig()
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping of sections")
        for section, values in raw.items():
            if not isinstance(values, dict):
                if section in {f.name for f in dataclasses.fields(RunConfig)}:
                    raise ConfigError(f"{path}: section {section!r} must be a mapping")
                raise ConfigError(f"unknown config section {section!r}")
            for key, value in values.items():
                _apply(config, section, key, value)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        _apply(config, section, key, value)
    return config.validate()


# ---------------------------------------------------------------------------
# commands

def cmd_synth(config: RunConfig, out_dir) -> Path:
    """Write one synthetic split from the ``synth`` section; returns the labels path."""
    videos, labels = synth_generate(config.synth_config())
    path = write_dataset(videos, labels, out_dir)
    log.info("wrote %d synthetic videos to %s", len(videos), out_dir)
    return path


def _write_loss_log(history, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "total", "reconstruction", "kl"])
        for i, row in enumerate(zip(history.total, history.reconstruction, history.kl), 1):
            writer.writerow([i, *(repr(float(v)) for v in row)])


def cmd_train(config: RunConfig, data_dir, out_checkpoint, kind: str | None = None):
    """Train one model on every video under ``data_dir``; returns ``(path, history, seconds)``."""
    d = config.data
    model_kind = config.model_kind(kind)
    clips = load_video_dataset(data_dir, d.window, d.stride, d.resize)
    h, w = clips.clips[0].frames.shape[1:]
    model = build_model(model_kind, (d.window, h, w, 1), latent_dim=config.model.latent_dim,
                        scale=config.model.scale, seed=config.model.seed)
    tcfg = config.train_config(model_kind)
    log.info("training %s on %d clips (%dx%d) for %d epochs", model_kind.name, len(clips), h, w,
             tcfg.epochs)

    start = time.perf_counter()
    model, history = train(model, clips, tcfg)
    seconds = time.perf_counter() - start
    out = save_checkpoint(model, out_checkpoint, tcfg, history)
    _write_loss_log(history, Path(out) / "loss.csv")
    log.info("saved %s checkpoint to %s after %.1f s", model_kind.name, out, seconds)
    return out, history, seconds


def cmd_score(config: RunConfig, checkpoint, data_dir, out_scores) -> list[Path]:
    """Score every video under ``data_dir``; one CSV per video in ``out_scores``."""
    model = load_checkpoint(checkpoint)
    t, h, w, _ = model.input_shape
    out_dir = Path(out_scores)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for vdir in list_videos(data_dir):
        frames = load_frame_dir(vdir, config.data.resize, min_frames=t)
        if frames[0].shape != (h, w):
            raise DataError(f"{vdir}: frames are {frames[0].shape}, model expects {(h, w)}")
        series = score_video(model, frames, window=t, stride=config.score.stride,
                             normalization_mode=config.score.normalization_mode,
                             video=vdir.name, batch_size=config.score.batch_size)
        path = out_dir / f"{vdir.name}.csv"
        write_scores(series, path)
        written.append(path)
    log.info("scored %d videos into %s", len(written), out_dir)
    return written


def _pr_path(metrics_path: Path) -> Path:
    return metrics_path.with_name(metrics_path.stem + "_pr.csv")


def cmd_eval(config: RunConfig, scores_dir, labels_path, out_metrics) -> dict:
    """Sweep thresholds over all score files; writes the metrics table and its PR curve."""
    score_files = sorted(Path(scores_dir).glob("*.csv"))
    if not score_files:
        raise EvalError(f"{scores_dir}: no score files found")
    series = [read_scores(p) for p in score_files]
    s_r, truth, excluded = evaluation_arrays(series, load_labels(labels_path))
    table = sweep(s_r, truth, config.grid(), excluded_frames=excluded)
    out = Path(out_metrics)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics(table, out)
    write_pr_curve(table, _pr_path(out))
    theta, f1 = best_f1(table)
    result = {
        "best_threshold": theta, "best_f1": f1, "excluded_frames": excluded,
        "evaluated_frames": int(len(s_r)), "anomalous_frames": int(truth.sum()),
        "mean_regularity_normal": float(s_r[~truth].mean()) if (~truth).any() else None,
        "mean_regularity_anomalous": float(s_r[truth].mean()) if truth.any() else None,
    }
    log.info("%s: best F1 %.4f at threshold %.2f", out.stem, f1, theta)
    return result


def cmd_report(metrics_files: dict[str, Path], out_dir) -> str:
    """Render the comparison figures from metrics files on disk and write a text summary."""
    out_dir = Path(out_dir)
    for name, path in metrics_files.items():
        read_metrics(path)  # fail early with a clear message
    plot_comparison(metrics_files, out_dir)
    text = summarize(metrics_files)
    (out_dir / "summary.txt").write_text(text + "\n")
    return text


def run_pipeline(config: RunConfig, out_dir) -> dict:
    """synth -> train -> score -> eval -> report for every model in ``pipeline.models``.

    Returns a dict with per-model evaluation results and wall-clock training
    times. The times go to the log only, so the output tree stays byte-stable.
    """
    out = Path(out_dir)
    p = config.pipeline
    train_dir, test_dir = out / "data" / "train", out / "data" / "test"
    train_cfg = _replace_synth(config, n_videos=p.n_train_videos, anomaly_fraction=0.0,
                               seed=p.train_seed)
    test_cfg = _replace_synth(config, n_videos=p.n_test_videos, seed=p.test_seed)
    cmd_synth(train_cfg, train_dir)
    labels_path = cmd_synth(test_cfg, test_dir)
    (out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))

    results, metrics_files, timings = {}, {}, {}
    for name in p.models:
        kind = config.model_kind(name)
        _, _, seconds = cmd_train(config.for_model(kind.name), train_dir,
                                  out / "models" / kind.name, kind.name)
        timings[kind.name] = seconds
        cmd_score(config, out / "models" / kind.name, test_dir, out / "scores" / kind.name)
        metrics = out / "metrics" / f"{kind.name}.csv"
        results[kind.name] = cmd_eval(config, out / "scores" / kind.name, labels_path, metrics)
        metrics_files[kind.name] = metrics
    text = cmd_report(metrics_files, out / "report")
    (out / "report" / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True)
                                                  + "\n")
    log.info("report:\n%s", text)
    return {"results": results, "train_seconds": timings, "summary": text}


def _replace_synth(config: RunConfig, **values) -> RunConfig:
    synth = dataclasses.replace(config.synth, **values)
    return dataclasses.replace(config, synth=synth)


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML or JSON run configuration")
    for section in dataclasses.fields(RunConfig):
        group = parser.add_argument_group(f"{section.name} options")
        defaults = section.default_factory()
        for key, hint in _section_types(type(defaults)).items():
            default = getattr(defaults, key)
            if isinstance(default, tuple):
                default = ",".join(map(str, default))
            group.add_argument(f"--{section.name}.{key}", dest=f"{section.name}.{key}",
                               default=argparse.SUPPRESS, metavar="VALUE",
                               help=f"default: {default}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vidanomaly", description="Video anomaly detection with "
                     "spatiotemporal autoencoders.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset split")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", help="training video directory (default: data.train_dir)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_config_flags(p)

    p = sub.add_parser("score", help="score test videos with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="test video directory (default: data.test_dir)")
    p.add_argument("--out", required=True, help="directory for per-video score files")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="threshold sweep over score files")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", help="labels file (default: data.labels)")
    p.add_argument("--out", required=True, help="metrics CSV; the PR curve goes next to it")
    _add_config_flags(p)

    p = sub.add_parser("report", help="compare models from their metrics files")
    p.add_argument("metrics", nargs="+", help="NAME=PATH or PATH (name taken from file stem)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="synth, train, score, eval and report in one go")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    return parser


def _required(value, what: str):
    if value is None:
        raise ConfigError(f"missing {what}")
    return value


def _metrics_arg(items) -> dict[str, Path]:
    files = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        if name in files:
            raise ConfigError(f"duplicate model name {name!r} in report inputs")
        files[name] = Path(path)
    return files


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            print(cmd_report(_metrics_arg(args.metrics), args.out))
            return EXIT_OK
        overrides = {k: v for k, v in vars(args).items() if "." in k}
        config = load_run_config(args.config, overrides)
        if args.command == "synth":
            cmd_synth(config, args.out)
        elif args.command == "train":
            cmd_train(config, _required(args.data or config.data.train_dir, "--data"), args.out)
        elif args.command == "score":
            cmd_score(config, args.checkpoint,
                      _required(args.data or config.data.test_dir, "--data"), args.out)
        elif args.command == "eval":
            result = cmd_eval(config, args.scores,
                              _required(args.labels or config.data.labels, "--labels"), args.out)
            print(f"best F1 {result['best_f1']:.4f} at threshold {result['best_threshold']:.2f}")
        elif args.command == "pipeline":
            print(run_pipeline(config, args.out)["summary"])
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
