"""Point-anchored region-proposal network and the clustering baseline.

Pipeline per cloud: sample a fixed number of points, place five fixed-size
anchor boxes around every sampled point, pool per-anchor point features,
classify each anchor and regress additive box refinements, then suppress
overlapping boxes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import neural as nn
from .core import Box3D, as_box_array, bev_iou_matrix, bev_iou_one_to_many, wrap_half_pi
from .cppc import dbscan
from .dataio import FusedCloud
from .simrad import derive_seed

log = logging.getLogger(__name__)

CHANNELS = ("x", "y", "z", "velocity", "intensity", "potential")
N_PLACEMENTS = 5
PLACEMENT_NAMES = ("center", "front", "rear", "left", "right")
# refinement tuple order -> column in the (cx, cy, cz, w, h, l, yaw) box layout
REFINE_ORDER = ("h", "w", "l", "x", "y", "z", "yaw")
_REFINE_TO_BOX = np.array([4, 3, 5, 0, 1, 2, 6])
MIN_DIM = 0.05


@dataclass
class NetworkConfig:
    input_channels: tuple[str, ...] = CHANNELS
    encoder_widths: tuple[int, ...] = (64, 128)
    roi_widths: tuple[int, ...] = (128, 1024)
    head_hidden: int = 64
    batchnorm: bool = True
    seed: int = 0

    def __post_init__(self):
        self.input_channels = tuple(self.input_channels)
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.roi_widths = tuple(int(w) for w in self.roi_widths)
        bad = set(self.input_channels) - set(CHANNELS)
        if bad:
            raise ValueError(f"unknown input channels {sorted(bad)}")
        if not self.encoder_widths or not self.roi_widths:
            raise ValueError("encoder_widths and roi_widths must be non-empty")

    @property
    def representative_width(self) -> int:
        return self.roi_widths[-1]


PRESETS = {
    # representative-feature widths echo the model-size comparison (256 vs 1024)
    "rp256": dict(encoder_widths=(64, 128), roi_widths=(128, 256), head_hidden=64),
    "rp1024": dict(encoder_widths=(64, 128), roi_widths=(128, 1024), head_hidden=64),
    "desk": dict(encoder_widths=(32, 64), roi_widths=(64, 128), head_hidden=64),
}


def network_preset(name: str, **overrides) -> NetworkConfig:
    return NetworkConfig(**{**PRESETS[name], **overrides})


@dataclass
class TrainConfig:
    epochs: int = 50
    points_per_cloud: int = 70
    roi_points: int = 32
    top_k_anchors: int = 100
    positive_iou: float = 0.2
    nms_iou: float = 0.5
    warmup_epochs: int = 30
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    smooth_l1_delta: float = 1.0
    anchor_dims: tuple[float, float, float] = (2.0, 2.0, 5.0)  # w, h, l
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "points_per_cloud", "roi_points", "top_k_anchors"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("positive_iou", "nms_iou"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        self.anchor_dims = tuple(float(v) for v in self.anchor_dims)


@dataclass
class Detection:
    box: Box3D
    confidence: float
    anchor_id: int = -1


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, state: dict):
        super().__init__(msg)
        self.state = state


# ---------------------------------------------------------------------------
# Sampling, anchors, RoI pooling
# ---------------------------------------------------------------------------


@dataclass
class SampledCloud:
    features: np.ndarray  # (n, 6) x, y, z, velocity, intensity, potential
    priors: np.ndarray  # (n,) heading prior or NaN
    source_index: np.ndarray  # (n,) row in the fused cloud


def sample_indices(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if m == 0:
        return np.zeros(0, dtype=int)
    if m >= n:
        return rng.choice(m, size=n, replace=False)
    return np.tile(np.arange(m), -(-n // m))[:n]


def sample_cloud(fused: FusedCloud, n: int = 70, seed: int = 0) -> SampledCloud:
    """Exactly ``n`` points: a random subset, or repetitions of every point when short."""
    idx = sample_indices(len(fused), n, np.random.default_rng(seed))
    priors = fused.heading_priors if fused.heading_priors is not None else np.full(len(fused), np.nan)
    return SampledCloud(fused.points[idx].copy(), np.asarray(priors, dtype=float)[idx], idx)


def generate_anchors(xyz: np.ndarray, heading_priors: np.ndarray | None = None,
                     dims: tuple[float, float, float] = (2.0, 2.0, 5.0)):
    """Five anchors per point: centred, ahead, behind, left and right of it.

    Returns ``(boxes (5n, 7), point_index, placement_id, has_prior)``; anchor
    ``5 * i + p`` belongs to point ``i`` and placement ``p``.
    """
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    n = len(xyz)
    w, h, l = dims
    yaw = np.zeros(n) if heading_priors is None else np.asarray(heading_priors, dtype=float)
    has_prior = np.isfinite(yaw)
    yaw = np.where(has_prior, yaw, 0.0)
    yaw = wrap_half_pi(yaw) if n else yaw  # footprint-equivalent, keeps stored yaw small
    c, s = np.cos(yaw), np.sin(yaw)
    # local (along, across) offsets of the box centre from the point
    local = np.array([[0.0, 0.0], [l / 2, 0.0], [-l / 2, 0.0], [0.0, w / 2], [0.0, -w / 2]])
    boxes = np.zeros((n, N_PLACEMENTS, 7))
    boxes[:, :, 0] = xyz[:, None, 0] + c[:, None] * local[None, :, 0] - s[:, None] * local[None, :, 1]
    boxes[:, :, 1] = xyz[:, None, 1] + s[:, None] * local[None, :, 0] + c[:, None] * local[None, :, 1]
    boxes[:, :, 2] = xyz[:, None, 2]
    boxes[:, :, 3], boxes[:, :, 4], boxes[:, :, 5] = w, h, l
    boxes[:, :, 6] = yaw[:, None]
    point_index = np.repeat(np.arange(n), N_PLACEMENTS)
    placement = np.tile(np.arange(N_PLACEMENTS), n)
    return boxes.reshape(-1, 7), point_index, placement, np.repeat(has_prior, N_PLACEMENTS)


def anchor_local_coords(xyz: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Points expressed in every anchor's frame: ``(A, n, 3)``."""
    c, s = np.cos(anchors[:, 6]), np.sin(anchors[:, 6])
    dx = xyz[None, :, 0] - anchors[:, None, 0]
    dy = xyz[None, :, 1] - anchors[:, None, 1]
    u = c[:, None] * dx + s[:, None] * dy
    v = -s[:, None] * dx + c[:, None] * dy
    return np.stack([u, v, xyz[None, :, 2] - anchors[:, None, 2]], axis=-1)


def roi_membership(xyz: np.ndarray, anchors: np.ndarray, tol: float = 1e-9):
    loc = anchor_local_coords(xyz, anchors)
    inside = ((np.abs(loc[..., 0]) <= anchors[:, None, 5] / 2 + tol)
              & (np.abs(loc[..., 1]) <= anchors[:, None, 3] / 2 + tol)
              & (np.abs(loc[..., 2]) <= anchors[:, None, 4] / 2 + tol))
    return inside, loc


@dataclass
class RoiBatch:
    index: np.ndarray  # (A, k) rows into the sampled cloud
    local: np.ndarray  # (A, k, 3) anchor-frame coordinates
    empty: np.ndarray  # (A,) no member points
    counts: np.ndarray  # (A,) member count before resampling


def roi_pool(xyz: np.ndarray, anchors: np.ndarray, k: int = 32, seed: int = 0) -> RoiBatch:
    """Pick ``k`` member points per anchor (repeating members when fewer)."""
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    anchors = as_box_array(anchors)
    A, n = len(anchors), len(xyz)
    inside, loc = roi_membership(xyz, anchors)
    rng = np.random.default_rng(seed)
    keys = rng.random((A, n))
    keys[~inside] = np.inf
    order = np.argsort(keys, axis=1, kind="stable")
    counts = inside.sum(axis=1)
    j = np.arange(k)[None, :]
    pos = j % np.maximum(counts, 1)[:, None]
    index = np.take_along_axis(order, pos, axis=1) if n else np.zeros((A, k), dtype=int)
    empty = counts == 0
    index[empty] = 0
    local = np.take_along_axis(loc, index[..., None], axis=1) if n else np.zeros((A, k, 3))
    local[empty] = 0.0
    return RoiBatch(index, local, empty, counts)


@dataclass
class RoiRows:
    """Distinct (anchor, member) rows of a :class:`RoiBatch` with their repeat counts.

    Rows are grouped by anchor; ``starts[a]`` is the first row of anchor ``a``.
    An empty anchor keeps one zero row of weight ``k``.
    """

    anchor: np.ndarray
    point: np.ndarray
    local: np.ndarray
    weight: np.ndarray
    starts: np.ndarray
    empty: np.ndarray  # per row


def compact_rows(roi: RoiBatch) -> RoiRows:
    """Collapse repeated members; rows within an anchor are ordered by point index,
    so any reordering of an anchor's member slots gives identical rows."""
    A, k = roi.index.shape
    order = np.argsort(roi.index, axis=1, kind="stable")
    srt = np.take_along_axis(roi.index, order, axis=1)
    first = np.ones((A, k), dtype=bool)
    first[:, 1:] = srt[:, 1:] != srt[:, :-1]
    first[roi.empty, 1:] = False
    distinct = first.sum(axis=1)
    starts = np.concatenate([[0], np.cumsum(distinct)[:-1]]).astype(int)
    a_idx, slot = np.nonzero(first)
    # run length of each distinct member = multiplicity in the k slots
    flat = np.flatnonzero(first.ravel())
    weight = np.diff(np.append(flat, A * k)).astype(float)
    anchor = a_idx
    src = order[a_idx, slot]
    return RoiRows(anchor, roi.index[a_idx, src], roi.local[a_idx, src], weight, starts,
                   roi.empty[anchor])


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class RoiGatherDense(nn.Layer):
    """Dense layer over ``[gathered point feature, anchor-local xyz]`` rows.

    Equivalent to concatenating the two inputs and applying one dense layer,
    but the point-feature product is computed once per point before the gather.
    """

    kind = "roi_gather_dense"

    def __init__(self, feat_dim: int, out_dim: int, rng: np.random.Generator, local_dim: int = 3):
        super().__init__()
        self.feat_dim, self.out_dim, self.local_dim = feat_dim, out_dim, local_dim
        bound = math.sqrt(6.0 / (feat_dim + local_dim))
        self.params["Wf"] = rng.uniform(-bound, bound, size=(feat_dim, out_dim))
        self.params["Wl"] = rng.uniform(-bound, bound, size=(local_dim, out_dim))
        self.params["b"] = np.zeros(out_dim)
        self.zero_grad()

    def forward_roi(self, feats: np.ndarray, roi: RoiBatch) -> np.ndarray:
        proj = feats @ self.params["Wf"]
        z = proj[roi.index] + roi.local @ self.params["Wl"] + self.params["b"]
        if roi.empty.any():
            z[roi.empty] = self.params["b"]
        self._cache = (feats, roi)
        return z

    def forward_rows(self, feats: np.ndarray, rows: RoiRows) -> np.ndarray:
        z = (feats @ self.params["Wf"])[rows.point]
        z += rows.local @ self.params["Wl"]
        z += self.params["b"]
        if rows.empty.any():
            z[rows.empty] = self.params["b"]
        self._cache = (feats, rows)
        return z

    def backward(self, grad):
        feats, roi = self._need_cache()
        if isinstance(roi, RoiRows):
            return self._backward_rows(feats, roi, grad)
        A, k = roi.index.shape
        g = grad.reshape(A * k, self.out_dim)
        self.grads["b"] += g.sum(axis=0)
        live = np.repeat(~roi.empty, k)
        self.grads["Wl"] += roi.local.reshape(-1, self.local_dim).T @ g
        rows = roi.index.reshape(-1)[live]
        cols = np.flatnonzero(live)
        S = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(feats), A * k))
        gproj = S @ g
        self.grads["Wf"] += feats.T @ gproj
        return gproj @ self.params["Wf"].T

    def _backward_rows(self, feats, rows: RoiRows, g):
        self.grads["b"] += g.sum(axis=0)
        self.grads["Wl"] += rows.local.T @ g
        live = np.flatnonzero(~rows.empty)
        S = sparse.csr_matrix((np.ones(len(live)), (rows.point[live], live)),
                              shape=(len(feats), len(g)))
        gproj = S @ g
        self.grads["Wf"] += feats.T @ gproj
        return gproj @ self.params["Wf"].T

    def spec(self):
        return {"kind": self.kind, "feat_dim": self.feat_dim, "out_dim": self.out_dim}


def _segment_index(starts: np.ndarray, total: int) -> np.ndarray:
    """(segments, longest) row indices, short segments padded with their last row."""
    ends = np.append(starts[1:], total)
    width = int((ends - starts).max())
    return np.minimum(starts[:, None] + np.arange(width), ends[:, None] - 1)


class SegmentMaxPool(nn.Layer):
    """Max over each anchor's rows; same values and gradient routing as
    :class:`~radarbox.neural.MaxPoolPoints` on the tiled layout."""

    kind = "maxpool_points"

    def forward_rows(self, z: np.ndarray, starts: np.ndarray) -> np.ndarray:
        # pad every segment to the longest by repeating its last row
        R = len(z)
        idx = _segment_index(starts, R)
        blocks = z[idx]
        arg = blocks.argmax(axis=1)
        self._cache = (R, np.take_along_axis(idx, arg, axis=1))
        return np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :]

    def backward(self, grad):
        R, first = self._need_cache()
        g = np.zeros((R, grad.shape[1]))
        g[first, np.arange(grad.shape[1])] = grad
        return g


class RPNet:
    """Encoder, RoI pointnet with max pooling, confidence head and refinement head."""

    def __init__(self, cfg: NetworkConfig | None = None):
        self.cfg = cfg = cfg or NetworkConfig()
        rng = np.random.default_rng(cfg.seed)
        c_in = len(cfg.input_channels)
        self.channel_index = np.array([CHANNELS.index(c) for c in cfg.input_channels])
        self.encoder = nn.mlp([c_in, *cfg.encoder_widths], rng, pointwise=True, batchnorm=cfg.batchnorm)
        r = cfg.roi_widths
        self.roi_in = RoiGatherDense(cfg.encoder_widths[-1], r[0], rng)
        post = []
        if cfg.batchnorm:
            post.append(nn.BatchNorm(r[0]))
        post.append(nn.ReLU())
        post.extend(nn.mlp(list(r), rng, pointwise=True, batchnorm=cfg.batchnorm).layers)
        post.append(nn.MaxPoolPoints())
        self.roi_post = nn.Sequential(post)
        self.pool = SegmentMaxPool()
        self._rows = None
        rep, hh = cfg.representative_width, cfg.head_hidden
        self.cls_head = nn.Sequential(
            nn.mlp([rep, hh], rng, batchnorm=cfg.batchnorm).layers + [nn.Dense(hh, 1, rng)])
        self.ref_head = nn.Sequential(
            nn.mlp([rep, hh, hh], rng, batchnorm=cfg.batchnorm).layers + [nn.Dense(hh, 7, rng)])
        # final refinement layer starts at zero so fresh boxes equal their anchors
        self.ref_head.layers[-1].params["W"][:] = 0.0
        self._cache = None

    # parameter plumbing -------------------------------------------------
    def named_layers(self):
        yield from self.encoder.named_layers("encoder.")
        yield "roi_in", self.roi_in
        yield from self.roi_post.named_layers("roi_post.")
        yield from self.cls_head.named_layers("cls_head.")
        yield from self.ref_head.named_layers("ref_head.")

    def parameters(self) -> list[np.ndarray]:
        return [layer.params[k] for _, layer in self.named_layers() for k in sorted(layer.params)]

    def gradients(self) -> list[np.ndarray]:
        return [layer.grads[k] for _, layer in self.named_layers() for k in sorted(layer.params)]

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.named_layers():
            for k in sorted(layer.params):
                out[f"{name}.{k}"] = layer.params[k]
            for k in sorted(layer.buffers):
                out[f"{name}.{k}"] = layer.buffers[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, layer in self.named_layers():
            for store in (layer.params, layer.buffers):
                for k in store:
                    arr = state[f"{name}.{k}"]
                    if arr.shape != store[k].shape:
                        raise nn.ShapeError(f"{name}.{k}: checkpoint shape {arr.shape} != {store[k].shape}")
                    store[k] = np.array(arr, dtype=float)
        self.zero_grad()

    # forward / backward ---------------------------------------------------
    def forward(self, features: np.ndarray, roi: RoiBatch, train: bool = False, tiled: bool = False):
        """Per-anchor confidence ``(A,)`` and refinement deltas ``(A, 7)``.

        The RoI branch runs on distinct member rows (repeats enter batch-norm
        statistics through their weights); ``tiled=True`` runs the literal
        ``(A, k)`` layout instead, which gives the same numbers more slowly.
        """
        x = np.asarray(features, dtype=float)[:, self.channel_index]
        feats = self.encoder.forward(x, train)
        if tiled:
            z = self.roi_in.forward_roi(feats, roi)
            rep = self.roi_post.forward(z, train)
            self._rows = None
        else:
            rows = compact_rows(roi)
            folded = None if train else self._folded_roi()
            if folded is None:
                z = self.roi_in.forward_rows(feats, rows)
                for layer in self.roi_post.layers[:-1]:
                    if isinstance(layer, nn.BatchNorm):
                        z = layer.forward(z, train, weights=rows.weight)
                    else:
                        z = layer.forward(z, train)
                rep = self.pool.forward_rows(z, rows.starts)
            else:
                rep = _roi_eval(feats, rows, *folded)
            self._rows = rows
        logits = self.cls_head.forward(rep, train)[:, 0]
        conf = nn.sigmoid(logits)
        conf = np.where(roi.empty, 0.0, conf)
        deltas = self.ref_head.forward(rep, train)
        self._cache = (conf, roi.empty)
        return conf, deltas

    def _folded_roi(self):
        """Eval-mode RoI branch as (first affine, later affines) with BN folded in.

        Returns None unless the branch is a chain of affine layers each
        followed by ReLU and closed by the max pool.
        """
        Wf, Wl, b = (self.roi_in.params[k].copy() for k in ("Wf", "Wl", "b"))
        stages = [[Wf, Wl, b]]
        relu_after = [False]
        for layer in self.roi_post.layers:
            if isinstance(layer, nn.BatchNorm):
                if relu_after[-1]:
                    return None
                inv = 1.0 / np.sqrt(layer.buffers["running_var"] + layer.eps)
                scale = layer.params["gamma"] * inv
                shift = layer.params["beta"] - layer.buffers["running_mean"] * scale
                st = stages[-1]
                for j in range(len(st) - 1):
                    st[j] = st[j] * scale
                st[-1] = st[-1] * scale + shift
            elif isinstance(layer, nn.ReLU):
                relu_after[-1] = True
            elif isinstance(layer, nn.Dense):
                if not relu_after[-1]:
                    return None
                stages.append([layer.params["W"].copy(), layer.params["b"].copy()])
                relu_after.append(False)
            elif isinstance(layer, nn.MaxPoolPoints):
                break
            else:
                return None
        if not all(relu_after):
            return None
        return stages[0], stages[1:]

    def backward(self, grad_conf: np.ndarray, grad_deltas: np.ndarray):
        if self._cache is None:
            raise RuntimeError("backward called without forward")
        conf, empty = self._cache
        g_logit = np.where(empty, 0.0, grad_conf * conf * (1.0 - conf))[:, None]
        g_rep = self.cls_head.backward(g_logit) + self.ref_head.backward(grad_deltas)
        if self._rows is None:
            g_z = self.roi_post.backward(g_rep)
        else:
            g_z = self.pool.backward(g_rep)
            for layer in reversed(self.roi_post.layers[:-1]):
                g_z = layer.backward(g_z)
        g_feats = self.roi_in.backward(g_z)
        self.encoder.backward(g_feats)

    # persistence ----------------------------------------------------------
    def save(self, path, extra_meta: dict | None = None):
        meta = {"network": _jsonable(asdict(self.cfg)),
                "layers": {name: layer.spec() for name, layer in self.named_layers()}}
        if extra_meta:
            meta.update(extra_meta)
        nn.save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> tuple["RPNet", dict]:
        tensors, meta = nn.load_checkpoint(path)
        net = cls(NetworkConfig(**meta["network"]))
        net.load_state_dict(tensors)
        return net, meta


def _roi_eval(feats, rows: RoiRows, first, rest):
    Wf, Wl, b = first
    z = nn.matmul(feats, Wf)[rows.point]
    z += nn.matmul(rows.local, Wl)
    z += b
    if rows.empty.any():
        z[rows.empty] = b
    for W, bb in rest:
        np.maximum(z, 0.0, out=z)
        z = nn.matmul(z, W)
        z += bb
    # max pool then ReLU: the two commute
    return np.maximum(z[_segment_index(rows.starts, len(z))].max(axis=1), 0.0)


def _jsonable(d):
    return json.loads(json.dumps(d))


def apply_refinement(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Anchor parameters plus deltas (refinement order h, w, l, x, y, z, yaw)."""
    out = np.array(anchors, dtype=float, copy=True)
    out[:, _REFINE_TO_BOX] += deltas
    out[:, 3:6] = np.maximum(out[:, 3:6], MIN_DIM)
    return out


def refinement_targets(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """``gt - anchor`` in refinement order, yaw residual wrapped to (-pi/2, pi/2]."""
    d = gt - anchors
    d[:, 6] = wrap_half_pi(d[:, 6])
    return d[:, _REFINE_TO_BOX]


# ---------------------------------------------------------------------------
# Suppression and targets
# ---------------------------------------------------------------------------


def nms(boxes, confidences, iou_thresh: float = 0.5) -> list[int]:
    """Greedy suppression in descending confidence (ties: lower index first).

    A box is dropped when its BEV IoU with an already kept box exceeds
    ``iou_thresh``.
    """
    b = as_box_array(boxes)
    conf = np.asarray(confidences, dtype=float)
    if len(b) != len(conf):
        raise ValueError("boxes and confidences differ in length")
    order = np.lexsort((np.arange(len(conf)), -conf))
    alive = np.ones(len(order), dtype=bool)
    kept: list[int] = []
    ob = b[order]
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        kept.append(int(order[pos]))
        rest = pos + 1 + np.nonzero(alive[pos + 1:])[0]
        if len(rest):
            alive[rest[bev_iou_one_to_many(ob[pos], ob[rest]) > iou_thresh]] = False
    return kept


@dataclass
class Targets:
    score: np.ndarray  # (A,) best BEV IoU against any gt
    matched: np.ndarray  # (A,) argmax gt index, -1 without gt
    topk: np.ndarray  # indices entering the classification loss
    labels: np.ndarray  # (A,) 0/1
    refine: np.ndarray  # (A, 7) refinement targets (rows valid for positives)


def assign_targets(anchors: np.ndarray, gt_boxes, top_k: int = 100, positive_iou: float = 0.2,
                   empty: np.ndarray | None = None) -> Targets:
    anchors = as_box_array(anchors)
    gt = as_box_array(gt_boxes)
    A = len(anchors)
    if len(gt) == 0:
        score = np.zeros(A)
        matched = np.full(A, -1)
    else:
        iou = bev_iou_matrix(anchors, gt)
        score = iou.max(axis=1)
        matched = iou.argmax(axis=1)
    order = np.lexsort((np.arange(A), -score))
    topk = order[:min(top_k, A)]
    labels = (score > positive_iou).astype(float)
    if empty is not None:
        labels[empty] = 0.0
    refine = np.zeros((A, 7))
    pos = labels > 0
    if pos.any():
        refine[pos] = refinement_targets(anchors[pos], gt[matched[pos]])
    return Targets(score, matched, topk, labels, refine)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class PreparedScene:
    features: np.ndarray
    anchors: np.ndarray
    roi: RoiBatch
    targets: Targets | None
    gt: np.ndarray


def prepare_scene(fused: FusedCloud, tcfg: TrainConfig, seed: int, with_targets: bool = True,
                  use_priors: bool = True) -> PreparedScene | None:
    if len(fused) == 0:
        return None
    sc = sample_cloud(fused, tcfg.points_per_cloud, derive_seed(seed, "sample"))
    priors = sc.priors if use_priors else None
    anchors, _, _, _ = generate_anchors(sc.features[:, :3], priors, tcfg.anchor_dims)
    roi = roi_pool(sc.features[:, :3], anchors, tcfg.roi_points, derive_seed(seed, "roi"))
    gt = as_box_array(fused.labels)
    tg = assign_targets(anchors, gt, tcfg.top_k_anchors, tcfg.positive_iou, roi.empty) if with_targets else None
    return PreparedScene(sc.features, anchors, roi, tg, gt)


@dataclass
class TrainResult:
    network: RPNet
    loss_trace: list[float]
    cls_trace: list[float] = field(default_factory=list)
    ref_trace: list[float] = field(default_factory=list)


def _subset(roi: RoiBatch, idx: np.ndarray) -> RoiBatch:
    return RoiBatch(roi.index[idx], roi.local[idx], roi.empty[idx], roi.counts[idx])


def train_step(net: RPNet, adam: nn.AdamState, ps: PreparedScene, tcfg: TrainConfig,
               warmup: bool) -> tuple[float, float]:
    """One joint update on one scene; returns (classification, refinement) loss.

    Only the top-k anchors receive any loss, so only they are forwarded;
    batch-norm statistics in training mode are therefore taken over that set.
    """
    tg = ps.targets
    k = tg.topk
    net.zero_grad()
    conf, deltas = net.forward(ps.features, _subset(ps.roi, k), train=True)
    labels = tg.labels[k]
    l_cls, grad_conf = nn.cross_entropy(conf, labels)
    scores = tg.score[k] if warmup else conf
    kept = np.asarray(nms(ps.anchors[k], scores, tcfg.nms_iou), dtype=int)
    pos = kept[labels[kept] > 0]
    grad_deltas = np.zeros_like(deltas)
    l_ref = 0.0
    if len(pos):
        l_ref, g_d = nn.smooth_l1(tg.refine[k[pos]], deltas[pos], tcfg.smooth_l1_delta)
        grad_deltas[pos] = g_d
    if not (math.isfinite(l_cls) and math.isfinite(l_ref)):
        return l_cls, l_ref
    net.backward(grad_conf, grad_deltas)
    nn.adam_step(adam, net.parameters(), net.gradients())
    return l_cls, l_ref


def train(dataset: list[FusedCloud], tcfg: TrainConfig, ncfg: NetworkConfig | None = None,
          use_priors: bool = True, dump_dir: str | Path | None = None,
          prepared: list[PreparedScene] | None = None, progress=None) -> TrainResult:
    """Joint training of both heads; one optimiser step per scene.

    During the first ``warmup_epochs`` epochs suppression ranks anchors by
    their ground-truth IoU instead of the (still untrained) confidences.
    """
    if not dataset and not prepared:
        raise ValueError("training needs a non-empty dataset")
    ncfg = ncfg or NetworkConfig(seed=tcfg.seed)
    net = RPNet(ncfg)
    adam = nn.AdamState(tcfg.learning_rate, tcfg.beta1, tcfg.beta2)
    if prepared is None:
        prepared = [prepare_scene(fc, tcfg, derive_seed(tcfg.seed, "scene", i), use_priors=use_priors)
                    for i, fc in enumerate(dataset)]
    scenes = [p for p in prepared if p is not None]
    if not scenes:
        raise ValueError("every scene in the dataset is empty")
    res = TrainResult(net, [])
    for epoch in range(tcfg.epochs):
        warm = epoch < tcfg.warmup_epochs
        order = np.random.default_rng(derive_seed(tcfg.seed, "epoch", epoch)).permutation(len(scenes))
        tot_c = tot_r = 0.0
        for i in order:
            lc, lr = train_step(net, adam, scenes[i], tcfg, warm)
            if not (math.isfinite(lc) and math.isfinite(lr)):
                state = {"epoch": epoch, "scene": int(i), "cls_loss": lc, "ref_loss": lr,
                         "adam_step": adam.step}
                if dump_dir is not None:
                    Path(dump_dir).mkdir(parents=True, exist_ok=True)
                    net.save(Path(dump_dir) / "diverged.ckpt", {"diverged": state})
                    (Path(dump_dir) / "diverged.json").write_text(json.dumps(state, indent=2))
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, scene {i}: {state}", state)
            tot_c += lc
            tot_r += lr
        n = len(scenes)
        res.cls_trace.append(tot_c / n)
        res.ref_trace.append(tot_r / n)
        res.loss_trace.append((tot_c + tot_r) / n)
        if progress is not None:
            progress(epoch, res.loss_trace[-1])
        log.debug("epoch %d loss %.4f (cls %.4f, ref %.4f)", epoch, res.loss_trace[-1],
                  res.cls_trace[-1], res.ref_trace[-1])
    return res


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def predict(fused: FusedCloud, net: RPNet, conf_floor: float = 0.5, seed: int = 0,
            tcfg: TrainConfig | None = None, use_priors: bool = True,
            nms_iou: float | None = None) -> list[Detection]:
    """Detections for one cloud, sorted by confidence; suppression runs on refined boxes."""
    tcfg = tcfg or TrainConfig()
    ps = prepare_scene(fused, tcfg, seed, with_targets=False, use_priors=use_priors)
    if ps is None:
        return []
    return detect_prepared(ps, net, conf_floor, tcfg.nms_iou if nms_iou is None else nms_iou)


def detect_prepared(ps: PreparedScene, net: RPNet, conf_floor: float, nms_iou: float) -> list[Detection]:
    conf, deltas = net.forward(ps.features, ps.roi, train=False)
    boxes = apply_refinement(ps.anchors, deltas)
    cand = np.flatnonzero(conf >= conf_floor)
    if len(cand) == 0:
        return []
    kept = cand[nms(boxes[cand], conf[cand], nms_iou)]
    return [Detection(Box3D.from_array(boxes[i]), float(conf[i]), int(i)) for i in kept]


# ---------------------------------------------------------------------------
# Clustering baseline
# ---------------------------------------------------------------------------


def pca_yaw(xy: np.ndarray) -> float:
    """Direction of the first principal axis, wrapped to (-pi/2, pi/2]."""
    xy = np.asarray(xy, dtype=float)
    if len(xy) < 2:
        return 0.0
    cov = np.cov((xy - xy.mean(axis=0)).T)
    vals, vecs = np.linalg.eigh(cov)
    v = vecs[:, int(np.argmax(vals))]
    return wrap_half_pi(math.atan2(v[1], v[0]))


def baseline_cluster_pca(fused: FusedCloud, default_dims=(2.0, 2.0, 5.0), eps: float = 0.75,
                         min_points: int = 3) -> list[Detection]:
    """One fixed-size box per DBSCAN cluster, yawed along the cluster's principal axis."""
    if len(fused) == 0:
        return []
    pts = fused.points
    labels = dbscan(pts[:, :3], eps, min_points)
    w, h, l = default_dims
    out = []
    for c in range(labels.max() + 1):
        m = labels == c
        cen = pts[m, :3].mean(axis=0)
        yaw = pca_yaw(pts[m, :2])
        out.append(Detection(Box3D(cen[0], cen[1], cen[2], w, h, l, yaw), float(m.sum()) / len(pts), c))
    out.sort(key=lambda d: -d.confidence)
    return out
