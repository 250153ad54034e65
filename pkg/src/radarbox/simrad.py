"""Synthetic multi-radar scenes under a specular scattering-center model.

A vehicle reflects only from a handful of scattering centers (corners,
wheelhouses, number plates).  Each center is visible inside a cone around its
outward normal, so a single viewpoint sees only the faces turned towards it.
Frames are rendered per radar, in that radar's own coordinate frame, with
optional jitter, range/azimuth/Doppler quantization, Poisson clutter and
mirror-image multipath ghosts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (Box3D, Pose2D, RadarFrame, bev_corners, bev_iou_matrix,
                   normalize_angle, normalize_angles, transform_points, wrap_half_pi)

SOURCE_CLUTTER = -1
SOURCE_GHOST = -2

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys) -> int:
    """Stable child seed from a root seed and a path of ints/strings."""
    h = splitmix64(int(seed) & _MASK64)
    for k in keys:
        if isinstance(k, str):
            v = 0
            for ch in k.encode("utf-8"):
                v = splitmix64(v ^ ch)
        else:
            v = int(k) & _MASK64
        h = splitmix64(h ^ v)
    return h >> 1  # fits numpy's non-negative seed range comfortably


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScatteringCenter:
    offset: tuple[float, float, float]  # vehicle frame, meters
    cone_center: float  # radians, vehicle frame
    half_angle: float
    reflectivity: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.half_angle <= math.pi:
            raise ValueError("visibility half-angle must lie in (0, pi]")
        if self.reflectivity <= 0:
            raise ValueError("reflectivity must be positive")


def default_scattering_centers(w: float, h: float, l: float,
                               corner_half_angle: float = math.radians(60),
                               face_half_angle: float = math.radians(40),
                               wheel_inset: float = 0.05) -> list[ScatteringCenter]:
    """4 corners, 4 wheelhouses and 2 plates with cones along outward normals."""
    hl, hw = l / 2.0, w / 2.0
    z_low, z_mid = -h / 2 + 0.35 * h, -h / 2 + 0.45 * h  # relative to box center
    centers = []
    for sx in (1, -1):
        for sy in (1, -1):
            centers.append(ScatteringCenter((sx * hl, sy * hw, z_mid), math.atan2(sy, sx),
                                            corner_half_angle, 1.0))
    for sx in (1, -1):
        for sy in (1, -1):
            centers.append(ScatteringCenter((sx * 0.3 * l, sy * (hw - wheel_inset), z_low),
                                            math.copysign(math.pi / 2, sy), face_half_angle, 0.8))
    centers.append(ScatteringCenter((hl, 0.0, z_mid), 0.0, face_half_angle, 1.2))
    centers.append(ScatteringCenter((-hl, 0.0, z_mid), math.pi, face_half_angle, 1.2))
    return centers


@dataclass
class Vehicle:
    box: Box3D
    velocity: tuple[float, float] = (0.0, 0.0)
    scattering_centers: list[ScatteringCenter] = field(default_factory=list)
    object_id: int = 0

    def __post_init__(self):
        if not self.scattering_centers:
            self.scattering_centers = default_scattering_centers(self.box.w, self.box.h, self.box.l)
        for sc in self.scattering_centers:
            if abs(sc.offset[0]) > self.box.l / 2 + 1e-9 or abs(sc.offset[1]) > self.box.w / 2 + 1e-9:
                raise ValueError("scattering center outside the vehicle footprint")

    def centers_world(self) -> np.ndarray:
        """``(k, 5)``: x, y, z, cone_center, half_angle in world frame; reflectivity separate."""
        b = self.box
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        rows = []
        for sc in self.scattering_centers:
            ox, oy, oz = sc.offset
            rows.append((b.cx + c * ox - s * oy, b.cy + s * ox + c * oy, b.cz + oz,
                         b.yaw + sc.cone_center, sc.half_angle))
        return np.array(rows).reshape(-1, 5)


@dataclass
class Scene:
    scene_id: int
    vehicles: list[Vehicle]
    ego_pose: Pose2D = field(default_factory=Pose2D)
    ego_velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not 1 <= len(self.vehicles) <= 4:
            raise ValueError("a scene holds between 1 and 4 vehicles")

    def labels(self) -> list[Box3D]:
        return [v.box for v in self.vehicles]


@dataclass
class SensorModel:
    range_resolution: float = 0.067
    velocity_resolution: float = 2.59
    angular_resolution: float = math.radians(15.0)
    max_range: float = 25.0
    min_range: float = 0.5
    fov_half_angle: float = math.radians(60.0)
    frame_rate: float = 30.0
    max_velocity: float = 20.74
    reference_range: float = 10.0
    mount_height: float = 0.5
    quantize: bool = True

    def __post_init__(self):
        for name in ("range_resolution", "velocity_resolution", "angular_resolution"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def high_res(cls, **kw) -> "SensorModel":
        return cls(angular_resolution=math.radians(1.0), **kw)


@dataclass
class NoiseModel:
    clutter_rate: float = 0.0
    ghost_probability: float = 0.0
    reflector_line: tuple[tuple[float, float], tuple[float, float]] | None = ((0.0, 6.5), (1.0, 6.5))
    position_jitter_sigma: float = 0.0
    returns_per_center: int = 1
    ghost_attenuation: float = 0.5
    clutter_z_max: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.ghost_probability <= 1.0:
            raise ValueError("ghost_probability must lie in [0, 1]")
        if self.clutter_rate < 0:
            raise ValueError("clutter_rate must be >= 0")
        if self.returns_per_center < 1:
            raise ValueError("returns_per_center must be >= 1")


@dataclass
class SceneConfig:
    """Ranges for random scene synthesis."""

    n_vehicles: tuple[int, int] = (1, 3)
    region_x: tuple[float, float] = (3.0, 13.0)
    region_y: tuple[float, float] = (-5.0, 5.0)
    discretize_orientation: bool = False
    orientation_steps: int = 36
    fixed_dims: tuple[float, float, float] | None = None  # (w, h, l)
    large_vehicle_probability: float = 0.15
    speed: tuple[float, float] = (2.0, 10.0)
    min_gap: float = 0.5
    max_attempts: int = 200


class SceneSamplingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------


def _sample_dims(cfg: SceneConfig, rng: np.random.Generator) -> tuple[float, float, float]:
    if cfg.fixed_dims is not None:
        return tuple(float(v) for v in cfg.fixed_dims)
    if rng.random() < cfg.large_vehicle_probability:
        return (rng.uniform(2.0, 2.5), rng.uniform(2.0, 3.0), rng.uniform(5.5, 7.0))
    return (rng.uniform(1.65, 1.95), rng.uniform(1.4, 1.7), rng.uniform(4.0, 4.9))


def sample_scene(cfg: SceneConfig, seed: int, scene_id: int = 0) -> Scene:
    """Random non-overlapping vehicles inside the configured region."""
    rng = np.random.default_rng(seed)
    lo, hi = cfg.n_vehicles
    n = int(rng.integers(lo, hi + 1))
    vehicles: list[Vehicle] = []
    inflated: list[np.ndarray] = []
    for k in range(n):
        for _ in range(cfg.max_attempts):
            w, h, l = _sample_dims(cfg, rng)
            if cfg.discretize_orientation:
                yaw = 2 * math.pi * int(rng.integers(cfg.orientation_steps)) / cfg.orientation_steps
            else:
                yaw = rng.uniform(-math.pi, math.pi)
            cx = rng.uniform(*cfg.region_x)
            cy = rng.uniform(*cfg.region_y)
            box = Box3D(cx, cy, h / 2, w, h, l, yaw)
            grown = np.array([cx, cy, h / 2, w + 2 * cfg.min_gap, h, l + 2 * cfg.min_gap, box.yaw])
            if inflated and bev_iou_matrix(grown[None], np.array(inflated)).max() > 0:
                continue
            speed = rng.uniform(*cfg.speed)
            vel = (speed * math.cos(box.yaw), speed * math.sin(box.yaw))
            vehicles.append(Vehicle(box, vel, object_id=k))
            inflated.append(grown)
            break
        else:
            raise SceneSamplingError(
                f"could not place vehicle {k + 1} of {n} after {cfg.max_attempts} attempts")
    return Scene(scene_id, vehicles)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _segment_hits_box(p0, p1, box: Box3D, shrink: float = 1e-6) -> bool:
    """Slab test: does the open segment p0->p1 pass through the footprint interior?"""
    c, s = math.cos(box.yaw), math.sin(box.yaw)

    def local(p):
        dx, dy = p[0] - box.cx, p[1] - box.cy
        return c * dx + s * dy, -s * dx + c * dy

    (ax, ay), (bx, by) = local(p0), local(p1)
    t0, t1 = 0.0, 1.0
    for a, b, half in ((ax, bx, box.l / 2 - shrink), (ay, by, box.w / 2 - shrink)):
        d = b - a
        if abs(d) < 1e-15:
            if abs(a) >= half:
                return False
            continue
        ta, tb = (-half - a) / d, (half - a) / d
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 >= t1:
            return False
    return t1 - t0 > 1e-9


def _mirror(xy: np.ndarray, line) -> np.ndarray:
    (x0, y0), (x1, y1) = line
    d = np.array([x1 - x0, y1 - y0], dtype=float)
    d /= np.linalg.norm(d)
    rel = xy - np.array([x0, y0])
    proj = rel @ d
    foot = np.array([x0, y0]) + proj[:, None] * d
    return 2 * foot - xy


def _to_polar_and_quantize(xy_local: np.ndarray, sensor: SensorModel):
    rng_ = np.hypot(xy_local[:, 0], xy_local[:, 1])
    az = np.arctan2(xy_local[:, 1], xy_local[:, 0])
    if sensor.quantize:
        rbin = np.round(rng_ / sensor.range_resolution)
        abin = np.round(az / sensor.angular_resolution)
        rng_ = rbin * sensor.range_resolution
        az = abin * sensor.angular_resolution
    else:
        rbin = abin = None
    xy = np.stack([rng_ * np.cos(az), rng_ * np.sin(az)], axis=1)
    return xy, rng_, az, rbin, abin


def _quantize_velocity(v: np.ndarray, sensor: SensorModel):
    if not sensor.quantize:
        return v, None
    vbin = np.round(v / sensor.velocity_resolution)
    return vbin * sensor.velocity_resolution, vbin


def render_radar_frame(scene: Scene, radar_pose: Pose2D, sensor: SensorModel,
                       noise: NoiseModel, seed: int, frame_id: int = 0,
                       timestamp: float = 0.0, radar_id: int = 0) -> RadarFrame:
    """Render one radar's view of ``scene``.

    ``radar_pose`` is the mount in the ego frame.  Returned points are in the
    radar frame; ``frame.sources`` tags each point with the vehicle
    ``object_id`` it came from, ``SOURCE_CLUTTER`` or ``SOURCE_GHOST``.
    """
    rng = np.random.default_rng(seed)
    world = scene.ego_pose.compose(radar_pose)
    to_local = world.inverse()
    rx, ry = world.tx, world.ty
    ego_v = np.asarray(scene.ego_velocity, dtype=float)

    true_xyz, vel_rel, refl, src = [], [], [], []
    for veh in scene.vehicles:
        cw = veh.centers_world()
        for sc, (x, y, z, cone, half) in zip(veh.scattering_centers, cw):
            bearing = math.atan2(ry - y, rx - x)
            if abs(normalize_angle(bearing - cone)) > half:
                continue
            dist = math.hypot(x - rx, y - ry)
            if not sensor.min_range <= dist <= sensor.max_range:
                continue
            az = normalize_angle(math.atan2(y - ry, x - rx) - world.yaw)
            if abs(az) > sensor.fov_half_angle:
                continue
            if any(other is not veh and _segment_hits_box((rx, ry), (x, y), other.box)
                   for other in scene.vehicles):
                continue
            for _ in range(noise.returns_per_center):
                true_xyz.append((x, y, z))
                vel_rel.append(np.asarray(veh.velocity, dtype=float) - ego_v)
                refl.append(sc.reflectivity)
                src.append(veh.object_id)

    true_xyz = np.array(true_xyz, dtype=float).reshape(-1, 3)
    if len(true_xyz) and noise.position_jitter_sigma > 0:
        true_xyz = true_xyz + rng.normal(0.0, noise.position_jitter_sigma, size=true_xyz.shape)
    vel_rel = np.array(vel_rel, dtype=float).reshape(-1, 2)
    refl = np.array(refl, dtype=float)
    src = np.array(src, dtype=int)

    # multipath ghosts echo already-visible vehicle points
    ghost_xyz, ghost_v, ghost_refl = [], [], []
    if noise.ghost_probability > 0 and noise.reflector_line is not None:
        for veh in scene.vehicles:
            sel = src == veh.object_id
            if not sel.any():
                continue
            if rng.random() >= noise.ghost_probability:
                continue
            mxy = _mirror(true_xyz[sel, :2], noise.reflector_line)
            ghost_xyz.append(np.column_stack([mxy, true_xyz[sel, 2]]))
            ghost_v.append(vel_rel[sel])
            ghost_refl.append(refl[sel] * noise.ghost_attenuation)
    if ghost_xyz:
        gx = np.vstack(ghost_xyz)
        true_xyz = np.vstack([true_xyz, gx])
        vel_rel = np.vstack([vel_rel, np.vstack(ghost_v)])
        refl = np.concatenate([refl, np.concatenate(ghost_refl)])
        src = np.concatenate([src, np.full(len(gx), SOURCE_GHOST)])

    local = transform_points(true_xyz, to_local)
    # line-of-sight radial velocity, in the radar frame
    c, s = math.cos(-world.yaw), math.sin(-world.yaw)
    v_local = np.column_stack([c * vel_rel[:, 0] - s * vel_rel[:, 1],
                               s * vel_rel[:, 0] + c * vel_rel[:, 1]]) if len(vel_rel) else vel_rel
    ranges = np.hypot(local[:, 0], local[:, 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        los = local[:, :2] / np.maximum(ranges, 1e-12)[:, None]
    radial = np.sum(v_local * los, axis=1) if len(local) else np.zeros(0)
    az = np.arctan2(local[:, 1], local[:, 0])
    keep = (ranges >= sensor.min_range) & (ranges <= sensor.max_range) & (np.abs(az) <= sensor.fov_half_angle)
    local, radial, refl, src = local[keep], radial[keep], refl[keep], src[keep]

    # clutter, uniform over the field-of-view sector area
    n_clutter = int(rng.poisson(noise.clutter_rate)) if noise.clutter_rate > 0 else 0
    if n_clutter:
        r2 = rng.uniform(sensor.min_range ** 2, sensor.max_range ** 2, n_clutter)
        cr = np.sqrt(r2)
        ca = rng.uniform(-sensor.fov_half_angle, sensor.fov_half_angle, n_clutter)
        cz = rng.uniform(0.0, noise.clutter_z_max, n_clutter)
        cl = np.column_stack([cr * np.cos(ca), cr * np.sin(ca), cz])
        cv = rng.uniform(-sensor.max_velocity, sensor.max_velocity, n_clutter)
        crefl = rng.uniform(0.05, 0.5, n_clutter)
        local = np.vstack([local, cl])
        radial = np.concatenate([radial, cv])
        refl = np.concatenate([refl, crefl])
        src = np.concatenate([src, np.full(n_clutter, SOURCE_CLUTTER)])

    xy, rr, azq, rbin, abin = _to_polar_and_quantize(local[:, :2], sensor)
    vq, vbin = _quantize_velocity(radial, sensor)
    intensity = refl * (sensor.reference_range / np.maximum(rr, 1e-6)) ** 2
    pts = np.column_stack([xy, local[:, 2], vq, intensity]) if len(xy) else np.zeros((0, 5))

    if sensor.quantize and len(pts):
        # returns sharing a range/azimuth/Doppler cell are unresolvable: keep the strongest
        key = np.column_stack([rbin, abin, vbin]).astype(np.int64)
        order = np.lexsort((-intensity, key[:, 2], key[:, 1], key[:, 0]))
        ks = key[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = np.any(ks[1:] != ks[:-1], axis=1)
        chosen = np.sort(order[first])
        pts, src = pts[chosen], src[chosen]

    return RadarFrame(frame_id, timestamp, radar_id, radar_pose, pts, sources=src)


# ---------------------------------------------------------------------------
# Sequences and datasets
# ---------------------------------------------------------------------------


@dataclass
class FrameRecord:
    """All radars at one timestamp plus the ground-truth boxes (world frame)."""

    frame_id: int
    timestamp: float
    ego_pose: Pose2D
    radars: list[RadarFrame]
    labels: list[Box3D]
    object_ids: list[int]
    sequence_id: int = 0


def rig_poses(separation: float, n_radars: int = 2) -> list[Pose2D]:
    """Radars on a lateral rail centred on the ego origin, all facing +x."""
    if n_radars == 1:
        return [Pose2D()]
    ys = np.linspace(separation / 2, -separation / 2, n_radars)
    return [Pose2D(0.0, float(y), 0.0) for y in ys]


def advance_scene(scene: Scene, dt: float) -> Scene:
    moved = []
    for v in scene.vehicles:
        box = replace(v.box, cx=v.box.cx + v.velocity[0] * dt, cy=v.box.cy + v.velocity[1] * dt)
        moved.append(Vehicle(box, v.velocity, v.scattering_centers, v.object_id))
    ego = scene.ego_pose
    ego = Pose2D(ego.tx + scene.ego_velocity[0] * dt, ego.ty + scene.ego_velocity[1] * dt, ego.yaw)
    return Scene(scene.scene_id, moved, ego, scene.ego_velocity)


def simulate_sequence(scene: Scene | SceneConfig, rig: list[Pose2D], n_frames: int, seed: int,
                      sensor: SensorModel | None = None, noise: NoiseModel | None = None,
                      sequence_id: int = 0, first_frame_id: int = 0) -> list[FrameRecord]:
    """Propagate vehicles at constant velocity and render every radar each frame."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    sensor = sensor or SensorModel()
    noise = noise or NoiseModel()
    if isinstance(scene, SceneConfig):
        scene = sample_scene(scene, derive_seed(seed, "scene"), scene_id=sequence_id)
    dt = 1.0 / sensor.frame_rate
    records = []
    for t in range(n_frames):
        ts = t * dt
        frames = [render_radar_frame(scene, pose, sensor, noise,
                                     derive_seed(seed, "frame", t, rid),
                                     frame_id=first_frame_id + t, timestamp=ts, radar_id=rid)
                  for rid, pose in enumerate(rig)]
        records.append(FrameRecord(first_frame_id + t, ts, scene.ego_pose, frames,
                                   scene.labels(), [v.object_id for v in scene.vehicles],
                                   sequence_id))
        scene = advance_scene(scene, dt)
    return records


@dataclass
class SimulatorConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    sensor: SensorModel = field(default_factory=SensorModel)
    noise: NoiseModel = field(default_factory=NoiseModel)
    n_frames: int = 100
    frames_per_sequence: int = 10
    n_radars: int = 2
    separation: float = 1.5


DATASET_REDRAWS = 20


def _sample_with_redraws(cfg: SceneConfig, sseed: int, scene_id: int) -> Scene:
    """A crowded draw that cannot be placed is redrawn from the next derived seed."""
    for attempt in range(DATASET_REDRAWS):
        key = ("scene",) if attempt == 0 else ("scene", attempt)
        try:
            return sample_scene(cfg, derive_seed(sseed, *key), scene_id=scene_id)
        except SceneSamplingError:
            continue
    raise SceneSamplingError(f"scene {scene_id}: no placeable draw in {DATASET_REDRAWS} redraws")


def simulate_dataset(cfg: SimulatorConfig, seed: int) -> list[FrameRecord]:
    """``cfg.n_frames`` records split into sequences of ``frames_per_sequence``."""
    rig = rig_poses(cfg.separation, cfg.n_radars)
    out: list[FrameRecord] = []
    seq = 0
    while len(out) < cfg.n_frames:
        n = min(cfg.frames_per_sequence, cfg.n_frames - len(out))
        sseed = derive_seed(seed, "sequence", seq)
        scene = _sample_with_redraws(cfg.scene, sseed, seq)
        out.extend(simulate_sequence(scene, rig, n, sseed, cfg.sensor, cfg.noise,
                                     sequence_id=seq, first_frame_id=len(out)))
        seq += 1
    return out


# ---------------------------------------------------------------------------
# Radar separation experiment
# ---------------------------------------------------------------------------


def rasterize_bev(xy: np.ndarray, grid: int = 32, extent: float = 8.0) -> np.ndarray:
    """Occupancy grid of points centred on their centroid."""
    img = np.zeros((grid, grid))
    if len(xy) == 0:
        return img.ravel()
    rel = xy - xy.mean(axis=0)
    idx = np.floor((rel / extent + 0.5) * grid).astype(int)
    ok = np.all((idx >= 0) & (idx < grid), axis=1)
    img[idx[ok, 0], idx[ok, 1]] = 1.0
    return img.ravel()


@dataclass
class SweepResult:
    separations: list[float]
    mean_error: list[float]
    stderr: list[float]
    n_used: list[int]
    n_skipped: list[int]

    def rows(self):
        return list(zip(self.separations, self.mean_error, self.stderr, self.n_used, self.n_skipped))


def _orientation_regressor(seed: int, hidden: tuple[int, ...], max_iter: int):
    from sklearn.neural_network import MLPRegressor

    return MLPRegressor(hidden_layer_sizes=hidden, max_iter=max_iter, random_state=seed,
                        alpha=1e-3, learning_rate_init=1e-3)


def fit_orientation_error(X: np.ndarray, yaw: np.ndarray, train_idx, test_idx, seed: int,
                          hidden=(128,), max_iter: int = 300) -> np.ndarray:
    """Train an MLP on (cos 2yaw, sin 2yaw) and return absolute mod-pi errors on ``test_idx``."""
    import warnings

    from sklearn.exceptions import ConvergenceWarning

    target = np.column_stack([np.cos(2 * yaw), np.sin(2 * yaw)])
    model = _orientation_regressor(seed % (2 ** 32), hidden, max_iter)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model.fit(X[train_idx], target[train_idx])
    pred = model.predict(X[test_idx])
    pred_yaw = 0.5 * np.arctan2(pred[:, 1], pred[:, 0])
    return np.abs(wrap_half_pi(pred_yaw - yaw[test_idx]))


def separation_clouds(separation: float, scenes: list[Scene], sensor: SensorModel,
                      seed: int) -> list[np.ndarray]:
    """Noise-free two-radar BEV point sets for each scene, in the ego frame."""
    rig = [Pose2D(0.0, separation / 2, 0.0), Pose2D(0.0, -separation / 2, 0.0)]
    noise = NoiseModel(reflector_line=None)
    clouds = []
    for i, sc in enumerate(scenes):
        parts = []
        for rid, pose in enumerate(rig):
            fr = render_radar_frame(sc, pose, sensor, noise, derive_seed(seed, i, rid), radar_id=rid)
            parts.append(transform_points(fr.points, pose)[:, :2])
        clouds.append(np.vstack(parts))
    return clouds


def separation_sweep(separations: list[float], n_scenes: int, seed: int,
                     sensor: SensorModel | None = None, scene_cfg: SceneConfig | None = None,
                     test_fraction: float = 0.2, min_points: int = 2,
                     hidden=(128,), max_iter: int = 300) -> SweepResult:
    """Mean held-out orientation error (radians, mod pi) per radar separation.

    The same scenes are rendered for every separation so the comparison is
    paired; a separation of 0 places both radars at the same spot.
    """
    if any(s < 0 for s in separations):
        raise ValueError("separations must be >= 0")
    sensor = sensor or SensorModel(quantize=False)
    scene_cfg = scene_cfg or SceneConfig(n_vehicles=(1, 1), discretize_orientation=True,
                                         fixed_dims=(1.7, 1.5, 4.5), speed=(0.0, 0.0))
    scenes = [sample_scene(scene_cfg, derive_seed(seed, "sweep-scene", i), scene_id=i)
              for i in range(n_scenes)]
    yaw = np.array([s.vehicles[0].box.yaw for s in scenes])
    perm = np.random.default_rng(derive_seed(seed, "split")).permutation(n_scenes)
    n_test = max(1, int(round(test_fraction * n_scenes)))
    test_set, train_set = set(perm[:n_test].tolist()), perm[n_test:]

    res = SweepResult([], [], [], [], [])
    for sep in separations:
        clouds = separation_clouds(sep, scenes, sensor, derive_seed(seed, "render"))
        ok = np.array([len(c) >= min_points for c in clouds])
        X = np.array([rasterize_bev(c) for c in clouds])
        tr = np.array([i for i in train_set if ok[i]])
        te = np.array(sorted(i for i in test_set if ok[i]))
        err = fit_orientation_error(X, yaw, tr, te, derive_seed(seed, "mlp"), hidden, max_iter)
        res.separations.append(float(sep))
        res.mean_error.append(float(err.mean()))
        res.stderr.append(float(err.std(ddof=1) / math.sqrt(len(err))) if len(err) > 1 else float("nan"))
        res.n_used.append(int(ok.sum()))
        res.n_skipped.append(int((~ok).sum()))
    return res
