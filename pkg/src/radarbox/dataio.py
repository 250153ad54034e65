"""Line-delimited JSON interchange for frames, fused clouds and detections.

One record per line::

    {"frame_id": 0, "timestamp_s": 0.0, "ego_pose": {"tx":..,"ty":..,"yaw":..},
     "radars": [{"radar_id": 0, "pose": {...}, "points": [[x,y,z,v,intensity], ...]}],
     "labels": [{"cx":..,"cy":..,"cz":..,"w":..,"h":..,"l":..,"yaw":..,"object_id":..}]}

Fused-cloud records replace ``radars`` with ``points`` rows
``[x, y, z, v, intensity, potential, radar_id]`` in the world frame.
Detection records carry ``detections``: label-shaped dicts plus ``confidence``.
Floats are written with ``repr`` so a write/read/write cycle is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .core import BOX_FIELDS, Box3D, Pose2D, RadarFrame
from .simrad import FrameRecord


class RecordError(ValueError):
    """A malformed line in an interchange file."""

    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def _f(x) -> float:
    return float(x)


def _points_rows(pts: np.ndarray) -> list:
    return [[_f(v) for v in row] for row in np.asarray(pts, dtype=float)]


def dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def frame_to_dict(rec: FrameRecord) -> dict:
    d = {
        "frame_id": int(rec.frame_id),
        "timestamp_s": _f(rec.timestamp),
        "ego_pose": {k: _f(v) for k, v in rec.ego_pose.to_dict().items()},
        "radars": [{"radar_id": int(fr.radar_id),
                    "pose": {k: _f(v) for k, v in fr.sensor_pose.to_dict().items()},
                    "points": _points_rows(fr.points)} for fr in rec.radars],
        "labels": [dict({k: _f(v) for k, v in b.to_dict().items()}, object_id=int(oid))
                   for b, oid in zip(rec.labels, rec.object_ids)],
    }
    if rec.sequence_id:
        d["sequence_id"] = int(rec.sequence_id)
    return d


def _labels(d: dict) -> tuple[list[Box3D], list[int]]:
    boxes, ids = [], []
    for i, lab in enumerate(d.get("labels", [])):
        boxes.append(Box3D.from_dict(lab))
        ids.append(int(lab.get("object_id", i)))
    return boxes, ids


def frame_from_dict(d: dict) -> FrameRecord:
    ego = Pose2D.from_dict(d.get("ego_pose", {"tx": 0, "ty": 0, "yaw": 0}))
    ts = float(d["timestamp_s"])
    radars = []
    for r in d["radars"]:
        pts = np.array(r["points"], dtype=float).reshape(-1, 5)
        radars.append(RadarFrame(int(d["frame_id"]), ts, int(r["radar_id"]),
                                 Pose2D.from_dict(r["pose"]), pts))
    boxes, ids = _labels(d)
    return FrameRecord(int(d["frame_id"]), ts, ego, radars, boxes, ids, int(d.get("sequence_id", 0)))


def write_frames(path: str | Path, records: Iterable[FrameRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps(frame_to_dict(rec)) + "\n")
            n += 1
    return n


def iter_json_lines(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordError(path, lineno, f"invalid JSON ({e.msg})") from None


def read_frames(path: str | Path) -> list[FrameRecord]:
    out = []
    for lineno, d in iter_json_lines(path):
        try:
            out.append(frame_from_dict(d))
        except (KeyError, TypeError, ValueError) as e:
            raise RecordError(path, lineno, f"malformed frame record: {e!r}") from None
    return out


# ---------------------------------------------------------------------------
# Fused clouds
# ---------------------------------------------------------------------------


@dataclass
class FusedCloud:
    """World-frame union of radar points with a cross-potential per point.

    ``points`` columns: x, y, z, velocity, intensity, potential.
    """

    points: np.ndarray
    radar_ids: np.ndarray
    timestamp: float = 0.0
    frame_id: int = 0
    source_frames: list[tuple[int, int]] = field(default_factory=list)
    labels: list[Box3D] = field(default_factory=list)
    object_ids: list[int] = field(default_factory=list)
    sequence_id: int = 0
    ego_pose: Pose2D = field(default_factory=Pose2D)
    heading_priors: np.ndarray | None = None  # per point, NaN where unset

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 6)
        self.radar_ids = np.asarray(self.radar_ids, dtype=int).reshape(-1)
        if len(self.points) and (self.points[:, 5].min() < 0 or self.points[:, 5].max() > 1):
            raise ValueError("potentials must lie in [0, 1]")

    def __len__(self):
        return len(self.points)


def fused_to_dict(fc: FusedCloud) -> dict:
    rows = [[_f(v) for v in p] + [int(r)] for p, r in zip(fc.points, fc.radar_ids)]
    d = {
        "frame_id": int(fc.frame_id),
        "timestamp_s": _f(fc.timestamp),
        "ego_pose": {k: _f(v) for k, v in fc.ego_pose.to_dict().items()},
        "source_frames": [[int(a), int(b)] for a, b in fc.source_frames],
        "points": rows,
        "labels": [dict({k: _f(v) for k, v in b.to_dict().items()}, object_id=int(oid))
                   for b, oid in zip(fc.labels, fc.object_ids)],
    }
    if fc.heading_priors is not None:
        d["heading_priors"] = [None if not np.isfinite(h) else _f(h) for h in fc.heading_priors]
    if fc.sequence_id:
        d["sequence_id"] = int(fc.sequence_id)
    return d


def fused_from_dict(d: dict) -> FusedCloud:
    rows = np.array(d["points"], dtype=float).reshape(-1, 7)
    boxes, ids = _labels(d)
    hp = d.get("heading_priors")
    priors = None if hp is None else np.array([np.nan if h is None else h for h in hp], dtype=float)
    return FusedCloud(rows[:, :6], rows[:, 6].astype(int), float(d["timestamp_s"]),
                      int(d["frame_id"]), [tuple(x) for x in d.get("source_frames", [])],
                      boxes, ids, int(d.get("sequence_id", 0)),
                      Pose2D.from_dict(d.get("ego_pose", {"tx": 0, "ty": 0, "yaw": 0})), priors)


def write_fused(path, clouds: Iterable[FusedCloud]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for fc in clouds:
            fh.write(dumps(fused_to_dict(fc)) + "\n")
            n += 1
    return n


def read_fused(path) -> list[FusedCloud]:
    out = []
    for lineno, d in iter_json_lines(path):
        try:
            out.append(fused_from_dict(d))
        except (KeyError, TypeError, ValueError) as e:
            raise RecordError(path, lineno, f"malformed fused record: {e!r}") from None
    return out


# ---------------------------------------------------------------------------
# Detections / labels
# ---------------------------------------------------------------------------


@dataclass
class FrameDetections:
    frame_id: int
    boxes: list[Box3D]
    confidences: list[float]


def detections_to_dict(frame_id: int, boxes, confidences) -> dict:
    return {"frame_id": int(frame_id),
            "detections": [dict({k: _f(v) for k, v in b.to_dict().items()}, confidence=_f(c))
                           for b, c in zip(boxes, confidences)]}


def write_detections(path, frames: Iterable[FrameDetections]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for fd in frames:
            fh.write(dumps(detections_to_dict(fd.frame_id, fd.boxes, fd.confidences)) + "\n")
            n += 1
    return n


def read_detections(path) -> list[FrameDetections]:
    """Read a detection file; a label/frame file also works (confidence 1 per label)."""
    out = []
    for lineno, d in iter_json_lines(path):
        try:
            items = d["detections"] if "detections" in d else d["labels"]
            boxes = [Box3D(*(float(it[k]) for k in BOX_FIELDS)) for it in items]
            conf = [float(it.get("confidence", 1.0)) for it in items]
            out.append(FrameDetections(int(d["frame_id"]), boxes, conf))
        except (KeyError, TypeError, ValueError) as e:
            raise RecordError(path, lineno, f"malformed detection record: {e!r}") from None
    return out


def read_labels(path) -> dict[int, list[Box3D]]:
    """Ground-truth boxes keyed by frame id, from a frame or fused-cloud file."""
    out = {}
    for lineno, d in iter_json_lines(path):
        try:
            out[int(d["frame_id"])] = _labels(d)[0]
        except (KeyError, TypeError, ValueError) as e:
            raise RecordError(path, lineno, f"malformed label record: {e!r}") from None
    return out


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
