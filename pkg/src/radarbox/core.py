"""Geometric primitives shared by every stage of the pipeline.

Conventions
-----------
* World frame is planar-rigid: (x, y, yaw) with z passed through.
* Yaw is measured counter-clockwise from +x and stored in (-pi, pi].
* A box's length ``l`` runs along its heading (local +x); width ``w`` along
  local +y; height ``h`` along z.  ``yaw`` and ``yaw + pi`` describe the
  same footprint.

Boxes are exchanged either as :class:`Box3D` instances or, in hot loops, as
``(n, 7)`` float arrays with columns ``BOX_FIELDS``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
BOX_FIELDS = ("cx", "cy", "cz", "w", "h", "l", "yaw")


def normalize_angle(a: float) -> float:
    """Wrap ``a`` into the half-open interval (-pi, pi]."""
    a = float(a)
    if not math.isfinite(a):
        raise ValueError(f"cannot normalize non-finite angle {a!r}")
    r = math.fmod(a + math.pi, TWO_PI)
    if r <= 0.0:
        r += TWO_PI
    return r - math.pi


def normalize_angles(a: np.ndarray) -> np.ndarray:
    """Vectorised :func:`normalize_angle`."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot normalize non-finite angles")
    r = np.fmod(a + math.pi, TWO_PI)
    r = np.where(r <= 0.0, r + TWO_PI, r)
    return r - math.pi


def wrap_half_pi(a):
    """Wrap an angle (or array) into (-pi/2, pi/2], i.e. modulo pi."""
    arr = np.asarray(a, dtype=float)
    r = np.fmod(arr + math.pi / 2, math.pi)
    r = np.where(r <= 0.0, r + math.pi, r) - math.pi / 2
    return float(r) if np.ndim(a) == 0 else r


def angle_diff(a: float, b: float, mod_pi: bool = False) -> float:
    """Absolute angular difference; with ``mod_pi`` the footprint-equivalent one."""
    if mod_pi:
        return abs(wrap_half_pi(a - b))
    return abs(normalize_angle(a - b))


@dataclass(frozen=True)
class Point:
    """One radar return."""

    x: float
    y: float
    z: float
    velocity: float = 0.0
    intensity: float = 0.0
    radar_id: int = 0
    potential: float | None = None

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError("point coordinates must be finite")
        if self.intensity < 0:
            raise ValueError("intensity must be >= 0")
        if self.potential is not None and not 0.0 <= self.potential <= 1.0:
            raise ValueError("potential must lie in [0, 1]")


@dataclass(frozen=True)
class Pose2D:
    tx: float = 0.0
    ty: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def compose(self, other: "Pose2D") -> "Pose2D":
        """Return ``self * other``: apply ``other`` first, then ``self``."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(
            self.tx + c * other.tx - s * other.ty,
            self.ty + s * other.tx + c * other.ty,
            self.yaw + other.yaw,
        )

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(-(c * self.tx + s * self.ty), s * self.tx - c * self.ty, -self.yaw)

    def to_dict(self) -> dict:
        return {"tx": self.tx, "ty": self.ty, "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose2D":
        return cls(float(d["tx"]), float(d["ty"]), float(d["yaw"]))


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    w: float
    h: float
    l: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.l > 0):
            raise ValueError(f"box dimensions must be positive, got w={self.w} h={self.h} l={self.l}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.w, self.h, self.l, self.yaw])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Box3D":
        return cls(*(float(v) for v in a[:7]))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in BOX_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(*(float(d[k]) for k in BOX_FIELDS))

    @property
    def volume(self) -> float:
        return self.w * self.h * self.l

    def translated(self, dx: float, dy: float, dz: float = 0.0) -> "Box3D":
        return replace(self, cx=self.cx + dx, cy=self.cy + dy, cz=self.cz + dz)


@dataclass
class RadarFrame:
    """Points of one radar at one timestamp, expressed in that radar's own frame.

    ``points`` is an ``(n, 5)`` array of ``x, y, z, velocity, intensity``.
    """

    frame_id: int
    timestamp: float
    radar_id: int
    sensor_pose: Pose2D
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    sources: np.ndarray | None = None  # simulator provenance, never serialized

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 5)

    def __len__(self) -> int:
        return len(self.points)


def as_box_array(boxes: Iterable[Box3D] | np.ndarray) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 7).astype(float, copy=False)
    rows = [b.as_array() for b in boxes]
    return np.array(rows).reshape(-1, 7)


# ---------------------------------------------------------------------------
# Footprints and overlap
# ---------------------------------------------------------------------------


def bev_corners(box: Box3D | Sequence[float]) -> np.ndarray:
    """Four footprint corners, counter-clockwise, as a ``(4, 2)`` array."""
    cx, cy, _, w, _, l, yaw = box.as_array() if isinstance(box, Box3D) else box
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = l / 2.0, w / 2.0
    local = ((-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw))
    return np.array([(cx + c * u - s * v, cy + s * u + c * v) for u, v in local])


def box_from_corners(corners: np.ndarray, cz: float, h: float) -> Box3D:
    """Inverse of :func:`bev_corners` for a CCW rectangle."""
    corners = np.asarray(corners, dtype=float)
    cx, cy = corners.mean(axis=0)
    e_len = corners[1] - corners[0]
    e_wid = corners[2] - corners[1]
    return Box3D(cx, cy, cz, float(np.hypot(*e_wid)), h, float(np.hypot(*e_len)),
                 math.atan2(e_len[1], e_len[0]))


def _corners_list(box) -> list[tuple[float, float]]:
    cx, cy, _, w, _, l, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = l / 2.0, w / 2.0
    return [(cx + c * u - s * v, cy + s * u + c * v)
            for u, v in ((-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw))]


def polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    """Signed shoelace area (positive for CCW)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def clip_convex(subject: list, clipper: list) -> list:
    """Sutherland-Hodgman: clip polygon ``subject`` by CCW convex ``clipper``."""
    out = subject
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        m = len(inp)
        for j in range(m):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            if dq >= 0.0:
                if dp < 0.0:
                    t = dp / (dp - dq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif dp >= 0.0:
                t = dp / (dp - dq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def _bev_inter_raw(a, b) -> float:
    # bounding-circle rejection
    ra = 0.5 * math.hypot(a[3], a[5])
    rb = 0.5 * math.hypot(b[3], b[5])
    if (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 >= (ra + rb) ** 2:
        return 0.0
    poly = clip_convex(_corners_list(a), _corners_list(b))
    return max(polygon_area(poly), 0.0)


def bev_intersection(a: Box3D, b: Box3D) -> float:
    """Area of the intersection of two rotated footprints."""
    return _bev_inter_raw(a.as_array(), b.as_array())


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Intersection over union of the two rotated footprints."""
    aa, ba = a.as_array(), b.as_array()
    inter = _bev_inter_raw(aa, ba)
    if inter <= 0.0:
        return 0.0
    union = aa[3] * aa[5] + ba[3] * ba[5] - inter
    return float(min(max(inter / union, 0.0), 1.0))


def _z_overlap(a, b) -> float:
    lo = max(a[2] - a[4] / 2, b[2] - b[4] / 2)
    hi = min(a[2] + a[4] / 2, b[2] + b[4] / 2)
    return max(hi - lo, 0.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU for yaw-only boxes (footprint area times vertical overlap)."""
    aa, ba = a.as_array(), b.as_array()
    dz = _z_overlap(aa, ba)
    if dz <= 0.0:
        return 0.0
    inter = _bev_inter_raw(aa, ba) * dz
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0))


def _corner_array(b: np.ndarray) -> np.ndarray:
    c, s = np.cos(b[:, 6]), np.sin(b[:, 6])
    u = np.array([-0.5, 0.5, 0.5, -0.5])[None, :] * b[:, 5:6]
    v = np.array([-0.5, -0.5, 0.5, 0.5])[None, :] * b[:, 3:4]
    return np.stack([b[:, 0:1] + c[:, None] * u - s[:, None] * v,
                     b[:, 1:2] + s[:, None] * u + c[:, None] * v], axis=-1)


def _inside_quad(pts: np.ndarray, quad: np.ndarray, tol: float) -> np.ndarray:
    # pts (n, m, 2), quad (n, 4, 2) CCW
    e = np.roll(quad, -1, axis=1) - quad
    d = pts[:, :, None, :] - quad[:, None, :, :]
    cross = e[:, None, :, 0] * d[..., 1] - e[:, None, :, 1] * d[..., 0]
    return np.all(cross >= -tol, axis=-1)


def bev_intersection_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Footprint intersection areas of row-paired boxes ``a[i]``, ``b[i]``.

    The intersection polygon's vertices are the corners of each box lying in
    the other plus all edge crossings; they are ordered by angle about their
    mean and summed with the shoelace formula.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 7)
    b = np.asarray(b, dtype=float).reshape(-1, 7)
    n = len(a)
    if n == 0:
        return np.zeros(0)
    ca, cb = _corner_array(a), _corner_array(b)
    scale = np.maximum(np.maximum(a[:, 3], a[:, 5]), np.maximum(b[:, 3], b[:, 5]))[:, None]
    tol = 1e-12 * scale ** 2
    in_a = _inside_quad(cb, ca, tol[:, :, None])
    in_b = _inside_quad(ca, cb, tol[:, :, None])
    # edge crossings: every edge of a against every edge of b
    p, r = ca[:, :, None, :], (np.roll(ca, -1, axis=1) - ca)[:, :, None, :]
    q, t = cb[:, None, :, :], (np.roll(cb, -1, axis=1) - cb)[:, None, :, :]
    den = r[..., 0] * t[..., 1] - r[..., 1] * t[..., 0]
    qp = q - p
    with np.errstate(divide="ignore", invalid="ignore"):
        ua = (qp[..., 0] * t[..., 1] - qp[..., 1] * t[..., 0]) / den
        ub = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / den
    hit = (den != 0) & (ua >= 0) & (ua <= 1) & (ub >= 0) & (ub <= 1)
    cross = (p + np.where(hit, ua, 0.0)[..., None] * r).reshape(n, 16, 2)
    pts = np.concatenate([ca, cb, cross], axis=1)
    ok = np.concatenate([in_b, in_a, hit.reshape(n, 16)], axis=1)
    cnt = ok.sum(axis=1)
    centre = (pts * ok[..., None]).sum(axis=1) / np.maximum(cnt, 1)[:, None]
    ang = np.arctan2(pts[..., 1] - centre[:, 1:2], pts[..., 0] - centre[:, 0:1])
    ang = np.where(ok, ang, np.inf)
    order = np.argsort(ang, axis=1)
    pts = np.take_along_axis(pts, order[..., None], axis=1)
    ok = np.take_along_axis(ok, order, axis=1)
    # invalid slots repeat the first vertex so they add nothing to the sum
    pts = np.where(ok[..., None], pts, pts[:, :1, :])
    x, y = pts[..., 0], pts[..., 1]
    area = 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)
    return np.where(cnt >= 3, np.maximum(area, 0.0), 0.0)


def bev_iou_one_to_many(box, boxes: np.ndarray) -> np.ndarray:
    """BEV IoU of one box against each row of ``boxes``."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 7)
    box = np.asarray(box, dtype=float).reshape(7)
    out = np.zeros(len(boxes))
    r = 0.5 * np.hypot(boxes[:, 3], boxes[:, 5])
    r0 = 0.5 * math.hypot(box[3], box[5])
    near = np.nonzero((boxes[:, 0] - box[0]) ** 2 + (boxes[:, 1] - box[1]) ** 2 < (r + r0) ** 2)[0]
    if len(near):
        nb = boxes[near]
        inter = bev_intersection_pairs(np.broadcast_to(box, nb.shape), nb)
        union = box[3] * box[5] + nb[:, 3] * nb[:, 5] - inter
        out[near] = np.clip(inter / union, 0.0, 1.0)
    return out


def bev_iou_matrix(a: np.ndarray, b: np.ndarray, kind: str = "bev") -> np.ndarray:
    """Pairwise IoU between box arrays ``(n, 7)`` and ``(m, 7)``."""
    a = as_box_array(a)
    b = as_box_array(b)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ra = 0.5 * np.hypot(a[:, 3], a[:, 5])
    rb = 0.5 * np.hypot(b[:, 3], b[:, 5])
    d2 = (a[:, None, 0] - b[None, :, 0]) ** 2 + (a[:, None, 1] - b[None, :, 1]) ** 2
    near = d2 < (ra[:, None] + rb[None, :]) ** 2
    ii, jj = np.nonzero(near)
    ai, bj = a[ii], b[jj]
    inter = bev_intersection_pairs(ai, bj)
    if kind == "3d":
        lo = np.maximum(ai[:, 2] - ai[:, 4] / 2, bj[:, 2] - bj[:, 4] / 2)
        hi = np.minimum(ai[:, 2] + ai[:, 4] / 2, bj[:, 2] + bj[:, 4] / 2)
        inter = inter * np.maximum(hi - lo, 0.0)
        union = ai[:, 3] * ai[:, 4] * ai[:, 5] + bj[:, 3] * bj[:, 4] * bj[:, 5] - inter
    else:
        union = ai[:, 3] * ai[:, 5] + bj[:, 3] * bj[:, 5] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out[ii, jj] = np.where(inter > 0.0, np.minimum(inter / union, 1.0), 0.0)
    return out


def points_in_box(xyz: np.ndarray, box, tol: float = 1e-9) -> np.ndarray:
    """Boolean mask of points inside a box (footprint and vertical extent)."""
    b = box.as_array() if isinstance(box, Box3D) else np.asarray(box, dtype=float)
    xyz = np.asarray(xyz, dtype=float)
    c, s = math.cos(b[6]), math.sin(b[6])
    dx = xyz[:, 0] - b[0]
    dy = xyz[:, 1] - b[1]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (np.abs(u) <= b[5] / 2 + tol) & (np.abs(v) <= b[3] / 2 + tol)
    if xyz.shape[1] > 2:
        inside &= np.abs(xyz[:, 2] - b[2]) <= b[4] / 2 + tol
    return inside


# ---------------------------------------------------------------------------
# Frame transforms
# ---------------------------------------------------------------------------


def transform_points(points: np.ndarray, pose: Pose2D) -> np.ndarray:
    """Apply a planar rigid transform to columns 0-1 of ``points``; other columns pass through."""
    pts = np.array(points, dtype=float, copy=True)
    if pts.size == 0:
        return pts
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y + pose.tx
    pts[:, 1] = s * x + c * y + pose.ty
    return pts


def transform_box(box: Box3D, pose: Pose2D) -> Box3D:
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    return replace(box, cx=c * box.cx - s * box.cy + pose.tx,
                   cy=s * box.cx + c * box.cy + pose.ty, yaw=box.yaw + pose.yaw)
