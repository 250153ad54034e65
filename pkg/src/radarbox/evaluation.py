"""Detection metrics: greedy matching, precision-recall, mAP, error CDFs, recall by count."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Box3D, angle_diff, as_box_array, bev_iou_matrix, points_in_box

UNDEFINED = float("nan")  # reported for metrics with an empty denominator


@dataclass
class MatchResult:
    tp: np.ndarray  # (D,) bool per detection, input order
    gt_index: np.ndarray  # (D,) matched gt or -1
    iou: np.ndarray  # (D,) IoU with the matched gt (best candidate IoU for FPs)
    gt_detected: np.ndarray  # (G,) bool

    @property
    def n_tp(self) -> int:
        return int(self.tp.sum())

    @property
    def n_fp(self) -> int:
        return int((~self.tp).sum())

    @property
    def n_fn(self) -> int:
        return int((~self.gt_detected).sum())


def confidence_order(confidences) -> np.ndarray:
    """Descending confidence, lower index first on ties."""
    c = np.asarray(confidences, dtype=float)
    return np.lexsort((np.arange(len(c)), -c))


def match(boxes, confidences, gt_boxes, iou_thresh: float = 0.5, iou_kind: str = "bev") -> MatchResult:
    """Greedy one-to-one matching in descending confidence.

    Each detection takes its highest-IoU still-unmatched gt; it is a true
    positive iff that IoU exceeds ``iou_thresh``.
    """
    det = as_box_array(boxes)
    gt = as_box_array(gt_boxes)
    conf = np.asarray(confidences, dtype=float)
    if len(det) != len(conf):
        raise ValueError("boxes and confidences differ in length")
    D, G = len(det), len(gt)
    tp = np.zeros(D, dtype=bool)
    gi = np.full(D, -1)
    ious = np.zeros(D)
    taken = np.zeros(G, dtype=bool)
    if D and G:
        iou = bev_iou_matrix(det, gt, kind=iou_kind)
        for d in confidence_order(conf):
            cand = np.where(taken, -1.0, iou[d])
            g = int(np.argmax(cand))
            ious[d] = max(cand[g], 0.0)
            if cand[g] > iou_thresh:
                tp[d] = True
                gi[d] = g
                taken[g] = True
    return MatchResult(tp, gi, ious, taken)


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    confidence: np.ndarray
    area: float
    n_gt: int
    n_det: int

    def envelope(self) -> np.ndarray:
        """Precision made monotone by taking the running max from the right."""
        return np.maximum.accumulate(self.precision[::-1])[::-1] if len(self.precision) else self.precision


def _as_frames(dets):
    """Normalise detections to a list of (boxes, confidences) per frame."""
    out = []
    for fd in dets:
        if hasattr(fd, "boxes"):
            out.append((fd.boxes, fd.confidences))
        elif isinstance(fd, (list, tuple)) and len(fd) == 2 and not hasattr(fd[0], "box"):
            out.append((fd[0], fd[1]))
        else:  # list of Detection
            out.append(([d.box for d in fd], [d.confidence for d in fd]))
    return out


def pr_area(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope with exact recall steps."""
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(np.asarray(precision)[::-1])[::-1]
    r = np.concatenate([[0.0], recall])
    return float(np.sum((r[1:] - r[:-1]) * env))


def pr_curve(dets, gts: Sequence[Sequence[Box3D]], iou_thresh: float = 0.5,
             iou_kind: str = "bev", conf_floor: float = 0.0) -> PrCurve:
    """Dataset-level precision/recall swept over every detection confidence.

    ``dets`` holds one entry per frame (``FrameDetections``, a list of
    ``Detection`` or a ``(boxes, confidences)`` pair) aligned with ``gts``.
    The area is ``nan`` when there are no ground-truth boxes.
    """
    frames = _as_frames(dets)
    if len(frames) != len(gts):
        raise ValueError("detections and ground truth cover different frame counts")
    confs, flags = [], []
    n_gt = 0
    for (boxes, conf), gt in zip(frames, gts):
        conf = np.asarray(conf, dtype=float)
        keep = conf >= conf_floor
        boxes = as_box_array(boxes)[keep]
        conf = conf[keep]
        m = match(boxes, conf, gt, iou_thresh, iou_kind)
        confs.append(conf)
        flags.append(m.tp)
        n_gt += len(gt)
    conf = np.concatenate(confs) if confs else np.zeros(0)
    tp = np.concatenate(flags) if flags else np.zeros(0, bool)
    order = np.argsort(-conf, kind="stable")
    tp, conf = tp[order], conf[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    precision = ctp / np.maximum(ctp + cfp, 1)
    if n_gt == 0:
        return PrCurve(np.zeros(len(tp)), precision, conf, UNDEFINED, 0, len(tp))
    recall = ctp / n_gt
    # integer recall steps with one final division keep a perfect curve at exactly 1
    env = np.maximum.accumulate(precision[::-1])[::-1]
    area = float(np.sum(tp * env)) / n_gt
    return PrCurve(recall, precision, conf, area, n_gt, len(tp))


def map_at(dets, gts, thresholds=(0.2, 0.5), iou_kind: str = "bev") -> dict[float, float]:
    """PR-curve area at each IoU threshold."""
    return {float(t): pr_curve(dets, gts, t, iou_kind).area for t in thresholds}


# ---------------------------------------------------------------------------
# Localisation and dimension errors
# ---------------------------------------------------------------------------


def align_dims(det: Box3D, gt: Box3D) -> tuple[float, float, float]:
    """Detection (w, l, yaw) re-expressed in the footprint-equivalent form closer to the gt heading.

    A box with (w, l, yaw) covers the same footprint as (l, w, yaw + pi/2);
    the form whose yaw is nearer the gt's (mod pi) is used for dimension errors.
    """
    straight = abs(angle_diff(det.yaw, gt.yaw, mod_pi=True))
    swapped = abs(angle_diff(det.yaw + math.pi / 2, gt.yaw, mod_pi=True))
    if swapped < straight:
        return det.l, det.w, det.yaw + math.pi / 2
    return det.w, det.l, det.yaw


@dataclass
class ErrorCdfs:
    values: dict[str, np.ndarray]  # sorted samples per error kind

    @property
    def medians(self) -> dict[str, float]:
        return {k: (float(np.median(v)) if len(v) else UNDEFINED) for k, v in self.values.items()}

    def cdf(self, key: str) -> tuple[np.ndarray, np.ndarray]:
        v = self.values[key]
        return v, np.arange(1, len(v) + 1) / max(len(v), 1)


ERROR_KEYS = ("cx", "cy", "w", "l", "h", "yaw")


def error_cdfs(pairs: Sequence[tuple[Box3D, Box3D]]) -> ErrorCdfs:
    """Empirical CDFs of |dcx|, |dcy| (m), |dw|/w, |dl|/l, |dh|/h and |dyaw| mod pi (rad)."""
    cols = {k: [] for k in ERROR_KEYS}
    for det, gt in pairs:
        w, l, yaw = align_dims(det, gt)
        cols["cx"].append(abs(det.cx - gt.cx))
        cols["cy"].append(abs(det.cy - gt.cy))
        cols["w"].append(abs(w - gt.w) / gt.w)
        cols["l"].append(abs(l - gt.l) / gt.l)
        cols["h"].append(abs(det.h - gt.h) / gt.h)
        cols["yaw"].append(abs(angle_diff(yaw, gt.yaw, mod_pi=True)))
    return ErrorCdfs({k: np.sort(np.array(v, dtype=float)) for k, v in cols.items()})


def matched_pairs(dets, gts, iou_thresh: float = 0.5, iou_kind: str = "bev",
                  conf_floor: float = 0.5) -> list[tuple[Box3D, Box3D]]:
    out = []
    for (boxes, conf), gt in zip(_as_frames(dets), gts):
        conf = np.asarray(conf, dtype=float)
        boxes = [b for b, c in zip(boxes, conf) if c >= conf_floor]
        conf = conf[conf >= conf_floor]
        m = match(boxes, conf, gt, iou_thresh, iou_kind)
        out.extend((boxes[d], gt[m.gt_index[d]]) for d in np.flatnonzero(m.tp))
    return out


# ---------------------------------------------------------------------------
# Recall by scene population, hard examples
# ---------------------------------------------------------------------------


def recall_by_count(dets, gts, iou_thresh: float = 0.5, conf_floor: float = 0.5,
                    buckets=(1, 2, 3, 4), iou_kind: str = "bev") -> dict[int, float]:
    """Recall per number of vehicles in the frame; ``nan`` for empty buckets."""
    tp = {b: 0 for b in buckets}
    total = {b: 0 for b in buckets}
    for (boxes, conf), gt in zip(_as_frames(dets), gts):
        n = len(gt)
        if n not in tp:
            continue
        conf = np.asarray(conf, dtype=float)
        keep = conf >= conf_floor
        m = match(as_box_array(boxes)[keep], conf[keep], gt, iou_thresh, iou_kind)
        tp[n] += m.n_tp
        total[n] += n
    return {b: (tp[b] / total[b] if total[b] else UNDEFINED) for b in buckets}


def noise_fraction(points: np.ndarray, gt_boxes) -> float:
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        return UNDEFINED
    inside = np.zeros(len(pts), dtype=bool)
    for b in gt_boxes:
        inside |= points_in_box(pts[:, :3], b)
    return float((~inside).mean())


def yaw_rates(clouds) -> list[float]:
    """Largest per-object |yaw rate| (rad/s) against the previous frame of the same sequence."""
    out, prev = [], None
    for fc in clouds:
        rate = 0.0
        if prev is not None and prev.sequence_id == fc.sequence_id and fc.timestamp > prev.timestamp:
            before = dict(zip(prev.object_ids, prev.labels))
            dt = fc.timestamp - prev.timestamp
            for oid, b in zip(fc.object_ids, fc.labels):
                if oid in before:
                    rate = max(rate, abs(angle_diff(b.yaw, before[oid].yaw, mod_pi=True)) / dt)
        out.append(rate)
        prev = fc
    return out


def hard_examples(clouds, noise_share: float = 0.25, yaw_rate_threshold: float = 0.5) -> np.ndarray:
    """Frames with more than ``noise_share`` of points outside gt boxes or a sharp turn."""
    rates = yaw_rates(clouds)
    flags = []
    for fc, rate in zip(clouds, rates):
        nf = noise_fraction(fc.points, fc.labels)
        flags.append((not math.isnan(nf) and nf > noise_share) or rate > yaw_rate_threshold)
    return np.array(flags, dtype=bool)


# ---------------------------------------------------------------------------
# Plot-ready output
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def write_columns(path, header: Sequence[str], *columns) -> None:
    """Tab-separated numeric columns under a ``#``-prefixed header line."""
    cols = [np.asarray(c) for c in columns]
    if len({len(c) for c in cols}) > 1:
        raise ValueError("columns differ in length")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# " + "\t".join(header) + "\n")
        for row in zip(*cols):
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def write_table(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(v if isinstance(v, str) else _fmt(v) for v in row) + "\n")


def write_report(out_dir, name: str, dets, gts, thresholds=(0.2, 0.3, 0.4, 0.5, 0.6, 0.7),
                 conf_floor: float = 0.5) -> dict:
    """mAP table, PR curves, error CDFs and recall-by-count files for one detector."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = map_at(dets, gts, thresholds)
    write_columns(out / f"{name}_map.tsv", ["iou_threshold", "map"], list(maps), list(maps.values()))
    for t in (0.2, 0.5):
        pc = pr_curve(dets, gts, t)
        write_columns(out / f"{name}_pr_{t:.1f}.tsv", ["recall", "precision"], pc.recall, pc.precision)
    cdfs = error_cdfs(matched_pairs(dets, gts, 0.5, conf_floor=conf_floor))
    for k in ERROR_KEYS:
        x, y = cdfs.cdf(k)
        write_columns(out / f"{name}_cdf_{k}.tsv", [k, "cdf"], x, y)
    rbc = recall_by_count(dets, gts, 0.5, conf_floor)
    write_columns(out / f"{name}_recall_by_count.tsv", ["vehicles", "recall"], list(rbc), list(rbc.values()))
    return {"map": maps, "median_errors": cdfs.medians, "recall_by_count": rbc}
