"""Cross-potential fusion of spatially separated radars.

Each radar's cloud is clustered on its own; a cluster earns a potential from
how close its centroid lies to the nearest cluster centroid of every *other*
radar.  Returns that several radars agree on are kept, single-radar noise and
multipath ghosts are scored low and filtered.  A constant-velocity Kalman
tracker over consecutive fused clouds supplies per-cluster heading priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Box3D, Pose2D, points_in_box, transform_points
from .dataio import FusedCloud
from .simrad import FrameRecord

NOISE = -1


@dataclass
class CppcConfig:
    dbscan_eps: float = 0.75
    dbscan_min_points: int = 3
    potential_threshold: float = 0.5
    reference_width: float = 2.0

    def __post_init__(self):
        if self.dbscan_eps <= 0:
            raise ValueError("dbscan_eps must be positive")
        if self.dbscan_min_points < 1:
            raise ValueError("dbscan_min_points must be >= 1")
        if not 0.0 <= self.potential_threshold <= 1.0:
            raise ValueError("potential_threshold must lie in [0, 1]")
        if self.reference_width <= 0:
            raise ValueError("reference_width must be positive")


@dataclass
class Cluster:
    radar_id: int
    member_indices: np.ndarray
    centroid: np.ndarray
    potential: float | None = None


def dbscan(points: np.ndarray, eps: float, min_points: int) -> np.ndarray:
    """Density-based cluster labels; ``-1`` marks noise.

    A point is core when at least ``min_points`` points (itself included) lie
    within Euclidean distance ``eps``.  Clusters are numbered in scan order and
    a border point reachable from several clusters joins the first one
    expanded.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=int)
    if n == 0:
        return labels
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    adj = d2 <= eps * eps
    core = adj.sum(axis=1) >= min_points
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        stack = [i]
        while stack:
            q = stack.pop()
            for nb in np.flatnonzero(adj[q]):
                if labels[nb] == NOISE:
                    labels[nb] = cluster
                if core[nb] and not visited[nb]:
                    visited[nb] = True
                    stack.append(nb)
        cluster += 1
    return labels


def cross_potential(r: float, reference_width: float = 2.0) -> float:
    """``1 / (1 + (r / reference_width)^2)``; equals 1/(1+(r/2)^2) at the default width."""
    if r < 0:
        raise ValueError("distance must be non-negative")
    return 1.0 / (1.0 + (r / reference_width) ** 2)


def _cross_potential_arr(r: np.ndarray, reference_width: float) -> np.ndarray:
    return 1.0 / (1.0 + (np.asarray(r) / reference_width) ** 2)


def cluster_radar(points: np.ndarray, cfg: CppcConfig, radar_id: int = 0):
    """DBSCAN labels and clusters for one radar's world-frame points."""
    labels = dbscan(points[:, :3], cfg.dbscan_eps, cfg.dbscan_min_points)
    clusters = []
    for c in range(labels.max() + 1 if len(labels) else 0):
        idx = np.flatnonzero(labels == c)
        clusters.append(Cluster(radar_id, idx, points[idx, :3].mean(axis=0)))
    return labels, clusters


@dataclass
class PotentialResult:
    clusters: list[list[Cluster]]  # per radar
    labels: list[np.ndarray]
    point_potentials: list[np.ndarray]


def assign_potentials(frames: list[tuple[int, np.ndarray]], cfg: CppcConfig) -> PotentialResult:
    """Score every cluster of every radar against the other radars.

    ``frames`` holds ``(radar_id, points)`` pairs, points already in a common
    frame.  A cluster's potential is the maximum over peer radars of the cross
    potential to that peer's nearest centroid; with no peer clusters at all it
    stays 1.  DBSCAN noise gets potential 0.
    """
    if not frames:
        raise ValueError("need at least one frame")
    labels, clusters = [], []
    for rid, pts in frames:
        lab, cl = cluster_radar(np.asarray(pts, dtype=float).reshape(-1, 5), cfg, rid)
        labels.append(lab)
        clusters.append(cl)
    centroids = [np.array([c.centroid for c in cl]).reshape(-1, 3) for cl in clusters]
    pot_points = []
    for j, cl in enumerate(clusters):
        peers = [centroids[k] for k in range(len(clusters)) if k != j and len(centroids[k])]
        for c in cl:
            if not peers:
                c.potential = 1.0
                continue
            best = 0.0
            for pc in peers:
                r = float(np.sqrt(np.min(np.sum((pc - c.centroid) ** 2, axis=1))))
                best = max(best, cross_potential(r, cfg.reference_width))
            c.potential = best
        pp = np.zeros(len(labels[j]))
        for c in cl:
            pp[c.member_indices] = c.potential
        pot_points.append(pp)
    return PotentialResult(clusters, labels, pot_points)


def fuse_cppc(frames: list[tuple[int, np.ndarray]], cfg: CppcConfig,
              threshold: float | None = None, timestamp: float = 0.0,
              frame_id: int = 0) -> FusedCloud:
    """Union of all radars with potentials, minus points below the threshold."""
    thr = cfg.potential_threshold if threshold is None else threshold
    res = assign_potentials(frames, cfg)
    pts, rids, src = [], [], []
    for (rid, p), pot in zip(frames, res.point_potentials):
        p = np.asarray(p, dtype=float).reshape(-1, 5)
        keep = pot >= thr
        pts.append(np.column_stack([p[keep], pot[keep]]))
        rids.append(np.full(int(keep.sum()), rid))
        src.append((frame_id, rid))
    return FusedCloud(np.vstack(pts) if pts else np.zeros((0, 6)),
                      np.concatenate(rids) if rids else np.zeros(0, int),
                      timestamp, frame_id, src)


def record_world_frames(rec: FrameRecord, radar_ids: list[int] | None = None):
    """Each radar's points moved through its mount and the ego pose into the world frame."""
    out = []
    for fr in rec.radars:
        if radar_ids is not None and fr.radar_id not in radar_ids:
            continue
        pose = rec.ego_pose.compose(fr.sensor_pose)
        out.append((fr.radar_id, transform_points(fr.points, pose)))
    return out


def fuse_record(rec: FrameRecord, cfg: CppcConfig, threshold: float | None = None,
                radar_ids: list[int] | None = None) -> FusedCloud:
    frames = record_world_frames(rec, radar_ids)
    fc = fuse_cppc(frames, cfg, threshold, rec.timestamp, rec.frame_id)
    return _attach(fc, rec)


def union_record(rec: FrameRecord, radar_ids: list[int] | None = None) -> FusedCloud:
    """Plain union of the selected radars; potentials set to 1 (no evidence used)."""
    frames = record_world_frames(rec, radar_ids)
    pts = [np.column_stack([p, np.ones(len(p))]) for _, p in frames]
    rids = [np.full(len(p), rid) for rid, p in frames]
    fc = FusedCloud(np.vstack(pts) if pts else np.zeros((0, 6)),
                    np.concatenate(rids) if rids else np.zeros(0, int),
                    rec.timestamp, rec.frame_id, [(rec.frame_id, rid) for rid, _ in frames])
    return _attach(fc, rec)


def _attach(fc: FusedCloud, rec: FrameRecord) -> FusedCloud:
    fc.labels = list(rec.labels)
    fc.object_ids = list(rec.object_ids)
    fc.sequence_id = rec.sequence_id
    fc.ego_pose = rec.ego_pose
    return fc


def snr(points: np.ndarray, gt_boxes: list[Box3D]) -> float:
    """Points inside any box over points outside.

    Returns ``inf`` for a clean cloud (no outside points) and ``nan`` for an
    empty one.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        return float("nan")
    inside = np.zeros(len(pts), dtype=bool)
    for b in gt_boxes:
        inside |= points_in_box(pts[:, :3], b)
    n_out = int((~inside).sum())
    if n_out == 0:
        return float("inf")
    return float(inside.sum()) / n_out


# ---------------------------------------------------------------------------
# Time coherence: constant-velocity Kalman tracking of fused clusters
# ---------------------------------------------------------------------------


@dataclass
class TrackerConfig:
    process_noise: float = 1.0  # white acceleration spectral density, m^2/s^3
    measurement_noise: float = 0.3  # m
    initial_velocity_sigma: float = 10.0
    gate_base: float = 2.0
    max_age: int = 3
    speed_floor: float = 0.5
    min_hits: int = 2
    cluster_eps: float = 1.5
    cluster_min_points: int = 2


@dataclass
class Track:
    track_id: int
    state: np.ndarray  # x, y, vx, vy
    covariance: np.ndarray
    last_update: float
    hit_count: int = 1
    misses: int = 0

    @property
    def speed(self) -> float:
        return float(math.hypot(self.state[2], self.state[3]))

    @property
    def heading(self) -> float:
        return float(math.atan2(self.state[3], self.state[2]))

    def heading_prior(self, cfg: TrackerConfig) -> float | None:
        if self.speed > cfg.speed_floor and self.hit_count >= cfg.min_hits:
            return self.heading
        return None


def _cv_matrices(dt: float, q: float):
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    Q = q * np.array([[dt ** 3 / 3, 0, dt ** 2 / 2, 0],
                      [0, dt ** 3 / 3, 0, dt ** 2 / 2],
                      [dt ** 2 / 2, 0, dt, 0],
                      [0, dt ** 2 / 2, 0, dt]])
    return F, Q


_H = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])


def tracking_clusters(fused: FusedCloud, cfg: TrackerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Object-scale BEV clusters of a fused cloud: labels and potential-weighted centroids."""
    if len(fused) == 0:
        return np.zeros(0, int), np.zeros((0, 2))
    xy = fused.points[:, :2]
    labels = dbscan(xy, cfg.cluster_eps, cfg.cluster_min_points)
    cents = []
    for c in range(labels.max() + 1):
        m = labels == c
        w = fused.points[m, 5] + 1e-9
        cents.append((xy[m] * w[:, None]).sum(axis=0) / w.sum())
    return labels, np.array(cents).reshape(-1, 2)


def update_tracks(tracks: list[Track], centroids: np.ndarray, dt: float, timestamp: float,
                  cfg: TrackerConfig | None = None, next_id: int = 0):
    """One predict/associate/update cycle.

    ``centroids`` are world-frame (ego-motion compensated) cluster positions.
    Returns ``(tracks, priors, next_id)`` with one heading prior (or ``None``)
    per centroid.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = cfg or TrackerConfig()
    F, Q = _cv_matrices(dt, cfg.process_noise)
    R = np.eye(2) * cfg.measurement_noise ** 2
    for t in tracks:
        t.state = F @ t.state
        t.covariance = F @ t.covariance @ F.T + Q

    centroids = np.asarray(centroids, dtype=float).reshape(-1, 2)
    pairs = []
    for ti, t in enumerate(tracks):
        gate = cfg.gate_base + t.speed * dt
        for ci, c in enumerate(centroids):
            d = float(np.hypot(*(c - t.state[:2])))
            if d <= gate:
                pairs.append((d, ti, ci))
    pairs.sort()
    used_t, used_c = set(), set()
    match: dict[int, int] = {}
    for d, ti, ci in pairs:
        if ti in used_t or ci in used_c:
            continue
        used_t.add(ti)
        used_c.add(ci)
        match[ci] = ti

    priors: list[float | None] = [None] * len(centroids)
    for ci, ti in match.items():
        t = tracks[ti]
        S = _H @ t.covariance @ _H.T + R
        K = t.covariance @ _H.T @ np.linalg.inv(S)
        t.state = t.state + K @ (centroids[ci] - _H @ t.state)
        I_KH = np.eye(4) - K @ _H
        t.covariance = I_KH @ t.covariance @ I_KH.T + K @ R @ K.T  # Joseph form keeps PSD
        t.covariance = 0.5 * (t.covariance + t.covariance.T)
        t.hit_count += 1
        t.misses = 0
        t.last_update = timestamp
        priors[ci] = t.heading_prior(cfg)
    for ti, t in enumerate(tracks):
        if ti not in used_t:
            t.misses += 1
    kept = [t for t in tracks if t.misses <= cfg.max_age]
    v0 = cfg.initial_velocity_sigma ** 2
    for ci, c in enumerate(centroids):
        if ci in used_c:
            continue
        kept.append(Track(next_id, np.array([c[0], c[1], 0.0, 0.0]),
                          np.diag([cfg.measurement_noise ** 2] * 2 + [v0, v0]), timestamp))
        next_id += 1
    return kept, priors, next_id


class HeadingTracker:
    """Sequential driver: annotates fused clouds of one sequence with heading priors."""

    def __init__(self, cfg: TrackerConfig | None = None):
        self.cfg = cfg or TrackerConfig()
        self.tracks: list[Track] = []
        self.next_id = 0
        self.last_time: float | None = None
        self.sequence_id: int | None = None

    def reset(self):
        self.tracks, self.next_id, self.last_time = [], 0, None

    def update(self, fused: FusedCloud) -> np.ndarray:
        if self.sequence_id != fused.sequence_id or (
                self.last_time is not None and fused.timestamp <= self.last_time):
            self.reset()
        self.sequence_id = fused.sequence_id
        labels, cents = tracking_clusters(fused, self.cfg)
        dt = (fused.timestamp - self.last_time) if self.last_time is not None else None
        priors_pt = np.full(len(fused), np.nan)
        if dt is None:
            # first frame: spawn tracks only
            self.tracks, _, self.next_id = update_tracks([], cents, 1.0, fused.timestamp,
                                                         self.cfg, self.next_id)
        else:
            self.tracks, pri, self.next_id = update_tracks(self.tracks, cents, dt, fused.timestamp,
                                                           self.cfg, self.next_id)
            for c, h in enumerate(pri):
                if h is not None:
                    priors_pt[labels == c] = h
        self.last_time = fused.timestamp
        fused.heading_priors = priors_pt
        return priors_pt
