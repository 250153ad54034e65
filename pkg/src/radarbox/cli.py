"""Command-line entry point: simulate, fuse, train, predict, eval, sweep, snr-report.

Every command writes a self-contained output directory holding the resolved
configuration (``config.json``), a ``manifest.json`` with the seed, config
hash and per-file digests, and its artifacts. Outputs depend only on the
inputs, the configuration and the seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, dataio
from . import detect as det
from . import evaluation as ev
from .cppc import CppcConfig, HeadingTracker, TrackerConfig, fuse_record, snr, union_record
from .simrad import NoiseModel, SimulatorConfig, derive_seed, separation_sweep, simulate_dataset

log = logging.getLogger("radarbox")

FUSION_MODES = ("cppc", "union", "single")
SWEEP_GRID = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    thresholds: tuple[float, ...] = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    conf_floor: float = 0.5  # applied by predict and by recall / error reports
    iou_kind: str = "bev"
    snr_thresholds: tuple[float, ...] = (0.3, 0.5, 0.7, 0.9)
    noise_share: float = 0.25
    yaw_rate_threshold: float = 0.5


@dataclass
class SweepConfig:
    separations: tuple[float, ...] = SWEEP_GRID
    n_scenes: int = 2000
    hidden: tuple[int, ...] = (128,)
    max_iter: int = 300
    test_fraction: float = 0.2


def default_simulator() -> SimulatorConfig:
    # several jittered returns per scattering centre so per-radar clustering has material
    return SimulatorConfig(noise=NoiseModel(returns_per_center=4, position_jitter_sigma=0.2))


@dataclass
class RunConfig:
    simulator: SimulatorConfig = field(default_factory=default_simulator)
    cppc: CppcConfig = field(default_factory=CppcConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    network: det.NetworkConfig = field(default_factory=lambda: det.network_preset("desk"))
    training: det.TrainConfig = field(default_factory=det.TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seed: int = 0
    out_dir: str = "out"


# ---------------------------------------------------------------------------
# Config resolution: defaults < file < --set flags
# ---------------------------------------------------------------------------


def _plain(v):
    if dataclasses.is_dataclass(v):
        return {f.name: _plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def _tupled(v):
    return tuple(_tupled(x) for x in v) if isinstance(v, list) else v


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, float):
        if not value.is_integer():
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _build(cls, data: dict, where: str, base=None):
    """Instantiate ``cls`` from ``data`` layered over ``base`` (its defaults when omitted)."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    base = cls() if base is None else base
    kwargs = {}
    for name, value in data.items():
        default = getattr(base, name)
        if dataclasses.is_dataclass(hints[name]):
            kwargs[name] = _build(hints[name], value, f"{where}{name}.", default)
        else:
            kwargs[name] = _tupled(_coerce(value, default, where + name))
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        nxt = cur.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set {dotted}: {k} is not a section")
        cur = nxt
    cur[keys[-1]] = value


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path=None, overrides=(), seed=None, out_dir=None) -> RunConfig:
    """Resolve a RunConfig from defaults, an optional YAML/JSON file and ``key.path=value`` overrides."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML/JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    flags: dict = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(flags, key.strip(), yaml.safe_load(raw) if raw.strip() else "")
    data = _merge(data, flags)
    if seed is not None:
        data["seed"] = seed
    if out_dir is not None:
        data["out_dir"] = str(out_dir)
    return _build(RunConfig, data, "")


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(_canonical(config_to_dict(cfg)).encode("utf-8")).hexdigest()


def _json_safe(obj):
    """NaN and infinities become strings so manifests stay strict JSON."""
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


# ---------------------------------------------------------------------------
# Run directory bookkeeping
# ---------------------------------------------------------------------------


class Run:
    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output directory {self.out}: {e.strerror}") from None
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}
        (self.out / "config.json").write_text(
            json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def add_input(self, path) -> None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"input file not found: {p}")
        self.inputs[str(path)] = dataio.file_sha256(p)

    def finish(self) -> dict:
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg.seed,
            "config_hash": config_hash(self.cfg),
            "inputs": self.inputs,
            "outputs": {n: dataio.file_sha256(self.out / n) for n in sorted(set(self.outputs))},
            **self.extra,
        }
        (self.out / "manifest.json").write_text(json.dumps(_json_safe(manifest), indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")
        return manifest


def _map_ordered(fn, items, workers: int):
    """``map`` that keeps input order; fans out to processes when ``workers > 1``."""
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, workers: int = 1) -> dict:
    run = Run("simulate", cfg)
    records = simulate_dataset(cfg.simulator, derive_seed(cfg.seed, "simulate"))
    n = dataio.write_frames(run.path("frames.jsonl"), records)
    run.extra["frame_count"] = n
    return run.finish()


class _Fuser:
    """Picklable per-frame fusion for the worker pool."""

    def __init__(self, mode: str, cppc: CppcConfig):
        self.mode, self.cppc = mode, cppc

    def __call__(self, rec):
        if self.mode == "cppc":
            return fuse_record(rec, self.cppc)
        return union_record(rec, [rec.radars[0].radar_id] if self.mode == "single" and rec.radars else None)


def fuse_frames(records, mode: str, cppc: CppcConfig, tracker: TrackerConfig, workers: int = 1):
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}; choose from {', '.join(FUSION_MODES)}")
    clouds = _map_ordered(_Fuser(mode, cppc), records, workers)
    if mode == "cppc":
        ht = HeadingTracker(tracker)
        for fc in clouds:  # tracking is sequential within a sequence
            ht.update(fc)
    return clouds


def snr_table(records, cppc: CppcConfig, thresholds, workers: int = 1):
    """Per-threshold SNR of the fused cloud against the plain union on the same frames."""
    union = [union_record(r) for r in records]
    snr_union = np.array([snr(u.points, r.labels) for u, r in zip(union, records)])
    rows, per_frame = [], [snr_union]
    for t in thresholds:
        fused = _map_ordered(_Fuser("cppc", dataclasses.replace(cppc, potential_threshold=float(t))),
                             records, workers)
        s = np.array([snr(f.points, r.labels) for f, r in zip(fused, records)])
        per_frame.append(s)
        ok = ~np.isnan(s) & ~np.isnan(snr_union)
        rows.append([float(t), _median(snr_union), _median(s),
                     float(np.mean([len(u) for u in union])) if union else ev.UNDEFINED,
                     float(np.mean([len(f) for f in fused])) if fused else ev.UNDEFINED,
                     float(np.mean(s[ok] > snr_union[ok])) if ok.any() else ev.UNDEFINED])
    header = ["threshold", "median_snr_union", "median_snr_fused", "mean_points_union",
              "mean_points_fused", "fraction_frames_improved"]
    return header, rows, per_frame


def _median(x) -> float:
    x = np.asarray(x, dtype=float)
    x = x[~np.isnan(x)]
    return float(np.median(x)) if len(x) else ev.UNDEFINED


def _write_snr(run: Run, records, cfg: RunConfig, workers: int, per_frame_file: bool):
    header, rows, per_frame = snr_table(records, cfg.cppc, cfg.evaluation.snr_thresholds, workers)
    ev.write_table(run.path("snr.tsv"), header, rows)
    if per_frame_file:
        names = ["frame_id", "snr_union"] + [f"snr_fused_{t:g}" for t in cfg.evaluation.snr_thresholds]
        ev.write_columns(run.path("snr_frames.tsv"), names, [r.frame_id for r in records], *per_frame)
    return rows


def cmd_fuse(cfg: RunConfig, input_path, mode: str = "cppc", workers: int = 1) -> dict:
    run = Run("fuse", cfg)
    run.add_input(input_path)
    records = dataio.read_frames(input_path)
    clouds = fuse_frames(records, mode, cfg.cppc, cfg.tracker, workers)
    n = dataio.write_fused(run.path("fused.jsonl"), clouds)
    _write_snr(run, records, cfg, workers, per_frame_file=False)
    run.extra.update(frame_count=n, mode=mode)
    return run.finish()


def cmd_snr_report(cfg: RunConfig, input_path, workers: int = 1) -> dict:
    run = Run("snr-report", cfg)
    run.add_input(input_path)
    records = dataio.read_frames(input_path)
    rows = _write_snr(run, records, cfg, workers, per_frame_file=True)
    run.extra.update(frame_count=len(records),
                     median_snr={f"{r[0]:g}": {"union": r[1], "fused": r[2]} for r in rows})
    return run.finish()


def _has_priors(clouds) -> bool:
    return any(fc.heading_priors is not None for fc in clouds)


def cmd_train(cfg: RunConfig, input_path, workers: int = 1) -> dict:
    run = Run("train", cfg)
    run.add_input(input_path)
    clouds = dataio.read_fused(input_path)
    use_priors = _has_priors(clouds)
    ncfg = dataclasses.replace(cfg.network, seed=derive_seed(cfg.seed, "network") % (2 ** 32))
    tcfg = dataclasses.replace(cfg.training, seed=derive_seed(cfg.seed, "training") % (2 ** 32))
    try:
        res = det.train(clouds, tcfg, ncfg, use_priors=use_priors, dump_dir=cfg.out_dir,
                        progress=lambda e, loss: log.info("epoch %d loss %.5f", e, loss))
    except det.TrainingDiverged as e:
        run.extra["diverged"] = e.state
        run.finish()
        raise
    ckpt = run.path("model.ckpt")
    res.network.save(ckpt, {"training": _plain(tcfg), "use_priors": use_priors})
    epochs = np.arange(len(res.loss_trace))
    ev.write_columns(run.path("loss.tsv"), ["epoch", "loss", "cls_loss", "ref_loss"],
                     epochs, res.loss_trace, res.cls_trace, res.ref_trace)
    run.extra.update(frame_count=len(clouds), use_priors=use_priors,
                     input_channels=list(ncfg.input_channels), final_loss=res.loss_trace[-1])
    return run.finish()


class _Predictor:
    def __init__(self, net, tcfg, use_priors, floor, seed):
        self.net, self.tcfg, self.use_priors, self.floor, self.seed = net, tcfg, use_priors, floor, seed

    def __call__(self, fc):
        dets = det.predict(fc, self.net, self.floor, derive_seed(self.seed, "predict", fc.frame_id),
                           self.tcfg, self.use_priors)
        return dataio.FrameDetections(fc.frame_id, [d.box for d in dets], [d.confidence for d in dets])


def cmd_predict(cfg: RunConfig, input_path, checkpoint, workers: int = 1) -> dict:
    run = Run("predict", cfg)
    run.add_input(input_path)
    run.add_input(checkpoint)
    net, meta = det.RPNet.load(checkpoint)
    tcfg = det.TrainConfig(**{k: _tupled(v) for k, v in meta.get("training", {}).items()})
    clouds = dataio.read_fused(input_path)
    frames = _map_ordered(_Predictor(net, tcfg, bool(meta.get("use_priors", False)),
                                     cfg.evaluation.conf_floor, cfg.seed), clouds, workers)
    dataio.write_detections(run.path("detections.jsonl"), frames)
    run.extra.update(frame_count=len(frames), n_detections=sum(len(f.boxes) for f in frames))
    return run.finish()


def _aligned(labels: dict, frames) -> list:
    by_id = {f.frame_id: f for f in frames}
    unknown = sorted(set(by_id) - set(labels))
    if unknown:
        raise ConfigError(f"detections reference frame ids absent from the labels: {unknown[:5]}")
    return [by_id.get(fid, dataio.FrameDetections(fid, [], [])) for fid in sorted(labels)]


def cmd_eval(cfg: RunConfig, labels_path, detections: dict[str, str], workers: int = 1) -> dict:
    """Metric files per detector plus an ablation table comparing all of them."""
    if not detections:
        raise ConfigError("eval needs at least one --detections name=path")
    run = Run("eval", cfg)
    run.add_input(labels_path)
    labels = dataio.read_labels(labels_path)
    gts = [labels[fid] for fid in sorted(labels)]
    e = cfg.evaluation
    clouds = None
    try:
        clouds = dataio.read_fused(labels_path)
    except dataio.RecordError:
        clouds = None  # a frame file has no fused points; hard-example split is skipped
    hard = ev.hard_examples(sorted(clouds, key=lambda c: c.frame_id), e.noise_share, e.yaw_rate_threshold) \
        if clouds else None
    rows, summary = [], {}
    for name, path in detections.items():
        run.add_input(path)
        dets = _aligned(labels, dataio.read_detections(path))
        rep = ev.write_report(run.out, name, dets, gts, e.thresholds, e.conf_floor)
        run.outputs += [p.name for p in sorted(run.out.glob(f"{name}_*.tsv"))]
        row = [name] + [rep["map"][float(t)] for t in e.thresholds]
        if hard is not None:
            sel = np.flatnonzero(hard)
            sub = ev.map_at([dets[i] for i in sel], [gts[i] for i in sel], (0.5,))[0.5] if len(sel) else ev.UNDEFINED
            row.append(sub)
        rows.append(row)
        summary[name] = {"map": {f"{t:g}": v for t, v in rep["map"].items()},
                         "median_errors": rep["median_errors"]}
    header = ["detector"] + [f"map@{t:g}" for t in e.thresholds] + (["map@0.5_hard"] if hard is not None else [])
    ev.write_table(run.path("ablation.tsv"), header, rows)
    run.extra.update(frame_count=len(gts), metrics=summary)
    return run.finish()


def cmd_sweep(cfg: RunConfig, workers: int = 1) -> dict:
    run = Run("sweep", cfg)
    s = cfg.sweep
    res = separation_sweep(list(s.separations), s.n_scenes, derive_seed(cfg.seed, "sweep"),
                           test_fraction=s.test_fraction, hidden=s.hidden, max_iter=s.max_iter)
    ev.write_columns(run.path("sweep.tsv"), ["separation", "mean_error", "stderr", "n_used", "n_skipped"],
                     *map(list, zip(*res.rows())))
    err = dict(zip(res.separations, res.mean_error))
    trend = None
    if 0.0 in err:
        wide = [v for k, v in err.items() if k >= 1.5]
        trend = bool(wide) and all(v < err[0.0] for v in wide)
    run.extra.update(trend_wide_below_zero=trend, scenes=s.n_scenes)
    return run.finish()


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. training.epochs=5 (repeatable)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--workers", type=int, default=1, help="worker processes for per-frame stages")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="radarbox", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"radarbox {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="render a synthetic two-radar dataset")
    s.add_argument("--frames", type=int, help="shorthand for simulator.n_frames")

    f = sub.add_parser("fuse", parents=[common], help="fuse radar frames into one cloud per frame")
    f.add_argument("input")
    f.add_argument("--mode", choices=FUSION_MODES, default="cppc")
    f.add_argument("--potential-threshold", type=float)
    f.add_argument("--eps", type=float)
    f.add_argument("--min-points", type=int)

    t = sub.add_parser("train", parents=[common], help="train the detector on a fused file")
    t.add_argument("input")
    t.add_argument("--epochs", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--top-k-anchors", type=int)

    pr = sub.add_parser("predict", parents=[common], help="run a trained detector over a fused file")
    pr.add_argument("input")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--conf-floor", type=float)

    e = sub.add_parser("eval", parents=[common], help="score detection files against labels")
    e.add_argument("labels", help="frame or fused file carrying ground-truth labels")
    e.add_argument("--detections", action="append", default=[], metavar="NAME=PATH", required=True)

    w = sub.add_parser("sweep", parents=[common], help="orientation error versus radar separation")
    w.add_argument("--scenes", type=int)

    r = sub.add_parser("snr-report", parents=[common], help="SNR of fused clouds versus the union")
    r.add_argument("input")
    return p


_FLAG_KEYS = {
    "frames": "simulator.n_frames", "potential_threshold": "cppc.potential_threshold",
    "eps": "cppc.dbscan_eps", "min_points": "cppc.dbscan_min_points", "epochs": "training.epochs",
    "learning_rate": "training.learning_rate", "warmup_epochs": "training.warmup_epochs",
    "top_k_anchors": "training.top_k_anchors", "conf_floor": "evaluation.conf_floor", "scenes": "sweep.n_scenes",
}


def _named_paths(items) -> dict[str, str]:
    out = {}
    for it in items:
        name, sep, path = it.partition("=")
        if not sep:
            name, path = Path(it).stem, it
        if name in out:
            raise ConfigError(f"duplicate detector name {name!r}")
        out[name] = path
    return out


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        shorthand = [f"{key}={json.dumps(getattr(args, flag))}" for flag, key in _FLAG_KEYS.items()
                     if getattr(args, flag, None) is not None]
        cfg = load_config(args.config, list(args.overrides) + shorthand, args.seed, args.out)
        w = args.workers
        if args.command == "simulate":
            m = cmd_simulate(cfg, w)
        elif args.command == "fuse":
            m = cmd_fuse(cfg, args.input, args.mode, w)
        elif args.command == "train":
            m = cmd_train(cfg, args.input, w)
        elif args.command == "predict":
            m = cmd_predict(cfg, args.input, args.checkpoint, w)
        elif args.command == "eval":
            m = cmd_eval(cfg, args.labels, _named_paths(args.detections), w)
        elif args.command == "sweep":
            m = cmd_sweep(cfg, w)
        else:
            m = cmd_snr_report(cfg, args.input, w)
    except (ConfigError, dataio.RecordError, det.TrainingDiverged, FileNotFoundError, ValueError, OSError) as e:
        print(f"radarbox {args.command}: error: {e}", file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1
    print(json.dumps({k: m[k] for k in ("command", "seed", "config_hash") if k in m}, sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
