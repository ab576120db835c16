"""Synthetic driving scenes and weather degradations.

Scenes are boxes (cars, poles) on a textured ground plane, ray cast
analytically for every sensor. Degradations act on a rendered
:class:`MultimodalFrame` and never touch its ground-truth boxes.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .encoding import CalibrationModel, GatedSlices, LidarPointSet, RadarScan, VEHICLE_TO_OPTICAL

SKY_DEPTH = 1000.0
AIRLIGHT = 0.8
LN20 = math.log(20.0)

WEATHER_KINDS = ("clear", "light_fog", "dense_fog", "snow_rain", "night")

# stream tags for per-frame random generators
_TAG_SCENE, _TAG_RENDER, _TAG_FOG, _TAG_NIGHT, _TAG_SNOW = 1, 2, 3, 4, 5


@dataclass
class SceneObject:
    cls: str  # "car" or "pole"
    center: tuple[float, float, float]
    extents: tuple[float, float, float]  # length (x), width (y), height (z)
    yaw: float = 0.0
    albedo: tuple[float, float, float] = (0.5, 0.5, 0.5)
    nir_albedo: float = 0.6
    reflectivity: float = 0.6
    radar_amplitude: float = 0.8

    def __post_init__(self):
        if min(self.extents) < 0:
            raise ValueError(f"negative extents {self.extents}")


@dataclass
class SceneSpec:
    seed: int
    objects: list[SceneObject] = field(default_factory=list)
    ground_z: float = -1.6
    ground_albedo: float = 0.42
    texture_contrast: float = 0.18
    lane_offsets: tuple[float, ...] = (-5.25, -1.75, 1.75, 5.25)


@dataclass(frozen=True)
class WeatherCondition:
    kind: str = "clear"
    visibility: float = math.inf
    ambient_light: float = 1.0
    clutter_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in WEATHER_KINDS:
            raise ValueError(f"unknown weather kind {self.kind!r}")
        if not self.visibility > 0:
            raise ValueError(f"visibility must be positive, got {self.visibility}")
        if self.kind == "dense_fog" and not self.visibility < 100:
            raise ValueError(f"dense_fog requires visibility < 100 m, got {self.visibility}")
        if self.kind == "light_fog" and not 100 <= self.visibility < 1000:
            raise ValueError(f"light_fog requires 100 <= visibility < 1000 m, got {self.visibility}")
        if not 0.0 <= self.ambient_light <= 1.0:
            raise ValueError(f"ambient_light must lie in [0, 1], got {self.ambient_light}")
        if self.clutter_rate < 0:
            raise ValueError(f"clutter_rate must be >= 0, got {self.clutter_rate}")

    @staticmethod
    def fog(visibility: float) -> "WeatherCondition":
        if visibility < 100:
            return WeatherCondition("dense_fog", visibility)
        if visibility < 1000:
            return WeatherCondition("light_fog", visibility)
        return WeatherCondition("clear", visibility)


@dataclass(frozen=True)
class GroundTruthBox:
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in pixels
    cls: str = "car"
    occlusion: float = 0.0
    truncation: float = 0.0
    distance: float = 0.0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")

    @property
    def height(self) -> float:
        return self.box[3] - self.box[1]


@dataclass
class MultimodalFrame:
    camera: np.ndarray  # [3, H, W] float32 in [0, 1]
    depth: np.ndarray | None  # [H, W] float32, metres along the ray
    lidar: LidarPointSet
    radar: RadarScan
    gated: GatedSlices
    gated_depth: np.ndarray | None  # [h, w]
    gated_ambient: np.ndarray  # [h, w] passive share contained in every gated slice
    boxes: list[GroundTruthBox]
    weather: WeatherCondition = field(default_factory=WeatherCondition)
    seed: int = 0

    def replace(self, **kw) -> "MultimodalFrame":
        return dataclasses.replace(self, **kw)


@dataclass
class SimConfig:
    lidar_max_range: float = 120.0
    lidar_elevations: tuple[float, float, int] = (2.0, -24.9, 64)  # degrees top, bottom, count
    lidar_azimuth: tuple[float, float, float] = (-30.0, 30.0, 0.2)  # degrees start, stop, step
    lidar_range_noise: float = 0.02
    radar_fov: float = 45.0
    radar_max_range: float = 200.0
    radar_clutter_mean: float = 3.0
    gated_windows: tuple[tuple[float, float, float, float], ...] = (
        (0.0, 3.0, 25.0, 50.0),
        (15.0, 30.0, 45.0, 70.0),
        (40.0, 60.0, 90.0, 140.0),
    )
    gated_passive_gain: float = 0.25
    gated_max_gain: float = 4.0
    fog_clutter_per_beta: float = 1500.0
    night_noise: float = 0.02
    snow_drop_per_rate: float = 1e-4


# ---------------------------------------------------------------------------
# scene generation

_PALETTE = (
    (0.85, 0.85, 0.85),
    (0.10, 0.10, 0.11),
    (0.50, 0.50, 0.52),
    (0.70, 0.12, 0.10),
    (0.12, 0.22, 0.60),
    (0.68, 0.70, 0.72),
    (0.20, 0.40, 0.25),
)


def random_scene(seed: int, max_cars: int = 6, x_range: tuple[float, float] = (8.0, 60.0), empty_prob: float = 0.05) -> SceneSpec:
    """Sample a road scene of cars and roadside poles; fully determined by ``seed``."""
    rng = np.random.default_rng([seed, _TAG_SCENE])
    spec = SceneSpec(seed=seed)
    spec.ground_albedo = float(rng.uniform(0.32, 0.5))
    spec.texture_contrast = float(rng.uniform(0.1, 0.25))
    n_cars = 0 if rng.random() < empty_prob else int(rng.integers(1, max_cars + 1))
    lanes = np.array([-7.0, -3.5, 0.0, 3.5, 7.0])
    placed: list[tuple[float, float]] = []
    for _ in range(n_cars):
        for _attempt in range(20):
            x = float(rng.uniform(*x_range))
            y = float(rng.choice(lanes) + rng.uniform(-0.6, 0.6))
            if all((x - px) ** 2 + (y - py) ** 2 > 6.5**2 for px, py in placed):
                break
        else:
            continue
        placed.append((x, y))
        length, width, height = rng.uniform(3.8, 4.8), rng.uniform(1.6, 1.95), rng.uniform(1.4, 1.75)
        yaw = float(rng.normal(0, 0.08)) if rng.random() < 0.85 else float(rng.uniform(-1.2, 1.2))
        base = np.array(_PALETTE[int(rng.integers(len(_PALETTE)))])
        albedo = tuple(np.clip(base * rng.uniform(0.85, 1.15), 0.02, 0.95).tolist())
        spec.objects.append(SceneObject(
            "car", (x, y, spec.ground_z + height / 2), (length, width, height), yaw, albedo,
            nir_albedo=float(rng.uniform(0.45, 0.9)), reflectivity=float(rng.uniform(0.35, 0.9)),
            radar_amplitude=float(rng.uniform(0.6, 1.0)),
        ))
    for _ in range(int(rng.poisson(2.0))):
        x = float(rng.uniform(10, 80))
        y = float(rng.choice([-1, 1]) * rng.uniform(9, 12))
        h = float(rng.uniform(3.5, 6.0))
        g = float(rng.uniform(0.3, 0.6))
        spec.objects.append(SceneObject(
            "pole", (x, y, spec.ground_z + h / 2), (0.3, 0.3, h), 0.0, (g, g, g),
            nir_albedo=float(rng.uniform(0.3, 0.6)), reflectivity=float(rng.uniform(0.3, 0.6)),
            radar_amplitude=float(rng.uniform(0.2, 0.45)),
        ))
    return spec


# ---------------------------------------------------------------------------
# ray casting


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class _Hits:
    t: np.ndarray  # distance along unit ray, inf on miss
    index: np.ndarray  # object index, -1 ground, -2 sky
    normal: np.ndarray  # [N, 3]
    local: np.ndarray  # [N, 3] hit point in the object's box frame
    per_object: list[np.ndarray]  # unoccluded hit distance per object


def _raycast(origin: np.ndarray, dirs: np.ndarray, spec: SceneSpec, ground_max: float = 150.0) -> _Hits:
    n = len(dirs)
    t_best = np.full(n, np.inf)
    index = np.full(n, -2, dtype=np.int64)
    normal = np.zeros((n, 3))
    local = np.zeros((n, 3))
    per_object = []
    rows = np.arange(n)
    for k, obj in enumerate(spec.objects):
        R = _yaw_matrix(obj.yaw)
        o = R.T @ (origin - np.asarray(obj.center))
        d = dirs @ R
        d = np.where(np.abs(d) < 1e-12, 1e-12, d)
        half = np.asarray(obj.extents) / 2
        t1 = (-half - o) / d
        t2 = (half - o) / d
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tn = tmin.max(axis=1)
        tf = tmax.min(axis=1)
        ok = (tn <= tf) & (tn > 1e-6)
        t = np.where(ok, tn, np.inf)
        per_object.append(t)
        closer = t < t_best
        if closer.any():
            axis = tmin.argmax(axis=1)
            nl = np.zeros((n, 3))
            nl[rows, axis] = -np.sign(d[rows, axis])
            t_best = np.where(closer, t, t_best)
            index[closer] = k
            normal[closer] = (nl @ R.T)[closer]
            local[closer] = (o + t[:, None] * d)[closer]
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (spec.ground_z - origin[2]) / dz
    gnd = (dz < 0) & (tg > 0) & (tg < ground_max)
    closer = gnd & (tg < t_best)
    t_best = np.where(closer, tg, t_best)
    index[closer] = -1
    normal[closer] = (0.0, 0.0, 1.0)
    return _Hits(t_best, index, normal, local, per_object)


def _pixel_rays(intr, pose) -> np.ndarray:
    vv, uu = np.mgrid[0 : intr.height, 0 : intr.width]
    d_opt = np.stack([(uu.ravel() + 0.5 - intr.cx) / intr.fx, (vv.ravel() + 0.5 - intr.cy) / intr.fy, np.ones(uu.size)], axis=1)
    d_opt /= np.linalg.norm(d_opt, axis=1, keepdims=True)
    d_sensor = d_opt @ VEHICLE_TO_OPTICAL  # optical -> vehicle axes
    return d_sensor @ pose.rotation.T


class _GroundTexture:
    """Two-octave value noise over ground coordinates, seeded by the scene."""

    def __init__(self, seed: int):
        rng = np.random.default_rng([seed, _TAG_RENDER, 7])
        self.fine = rng.uniform(-1, 1, size=(64, 64))
        self.coarse = rng.uniform(-1, 1, size=(32, 32))

    @staticmethod
    def _lookup(grid: np.ndarray, x: np.ndarray, y: np.ndarray, cell: float) -> np.ndarray:
        n = grid.shape[0]
        gx, gy = x / cell, y / cell
        x0, y0 = np.floor(gx), np.floor(gy)
        fx, fy = gx - x0, gy - y0
        i0, j0 = x0.astype(np.int64) % n, y0.astype(np.int64) % n
        i1, j1 = (i0 + 1) % n, (j0 + 1) % n
        return (grid[i0, j0] * (1 - fx) * (1 - fy) + grid[i1, j0] * fx * (1 - fy)
                + grid[i0, j1] * (1 - fx) * fy + grid[i1, j1] * fx * fy)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return 0.6 * self._lookup(self.fine, x, y, 0.5) + 0.4 * self._lookup(self.coarse, x, y, 4.0)


def _lane_mask(spec: SceneSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    m = np.zeros(x.shape, dtype=bool)
    for off in spec.lane_offsets:
        m |= (np.abs(y - off) < 0.09) & (np.mod(x, 6.0) < 3.0)
    return m


_SUN = np.array([-0.35, 0.45, 0.82]) / np.linalg.norm([-0.35, 0.45, 0.82])


def _shade_surfaces(spec: SceneSpec, hits: _Hits, pts: np.ndarray, tex: _GroundTexture):
    """Return RGB albedo*shading [N,3], NIR albedo [N], lidar reflectivity [N] at hit points."""
    n = len(hits.t)
    rgb = np.zeros((n, 3))
    nir = np.zeros(n)
    refl = np.zeros(n)
    g = hits.index == -1
    if g.any():
        t = tex(pts[g, 0], pts[g, 1])
        lane = _lane_mask(spec, pts[g, 0], pts[g, 1])
        base = spec.ground_albedo * (1 + spec.texture_contrast * t)
        gray = np.where(lane, 0.9, base)
        rgb[g] = gray[:, None] * np.array([1.0, 0.98, 0.95])
        nir[g] = np.where(lane, 0.85, 0.25 + 0.08 * t)
        refl[g] = np.where(lane, 0.75, 0.15 + 0.05 * t)
    for k, obj in enumerate(spec.objects):
        m = hits.index == k
        if not m.any():
            continue
        shade = 0.55 + 0.45 * np.clip(hits.normal[m] @ _SUN, 0, None)
        col = np.tile(np.asarray(obj.albedo), (int(m.sum()), 1))
        a_nir = np.full(int(m.sum()), obj.nir_albedo)
        if obj.cls == "car":
            # glass band on the upper part of the body
            window = hits.local[m, 2] > obj.extents[2] * 0.12
            col[window] = (0.12, 0.13, 0.15)
            a_nir[window] = 0.2
        rgb[m] = col * shade[:, None]
        nir[m] = a_nir
        refl[m] = obj.reflectivity * (0.5 + 0.5 * np.abs(hits.normal[m] @ np.array([1.0, 0.0, 0.0])))
    return rgb, nir, refl


def _box_corners(obj: SceneObject) -> np.ndarray:
    l, w, h = obj.extents
    c = np.array([[sx * l / 2, sy * w / 2, sz * h / 2] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    return c @ _yaw_matrix(obj.yaw).T + np.asarray(obj.center)


def _ground_truth(spec: SceneSpec, calib: CalibrationModel, hits: _Hits) -> list[GroundTruthBox]:
    W, H = calib.camera.width, calib.camera.height
    boxes = []
    for k, obj in enumerate(spec.objects):
        if obj.cls != "car":
            continue
        u, v, z = calib.project(_box_corners(obj))
        if np.any(z <= 0.1):
            continue
        full_area = (u.max() - u.min()) * (v.max() - v.min())
        x1, y1 = max(u.min(), 0.0), max(v.min(), 0.0)
        x2, y2 = min(u.max(), float(W)), min(v.max(), float(H))
        if x2 <= x1 or y2 <= y1 or full_area <= 0:
            continue
        trunc = 1.0 - (x2 - x1) * (y2 - y1) / full_area
        n_full = int(np.isfinite(hits.per_object[k]).sum())
        if n_full == 0:
            continue
        n_vis = int((hits.index == k).sum())
        occl = 1.0 - n_vis / n_full
        dist = float(np.linalg.norm(np.asarray(obj.center) - calib.camera_pose.translation))
        boxes.append(GroundTruthBox((float(x1), float(y1), float(x2), float(y2)), "car",
                                    float(np.clip(occl, 0, 1)), float(np.clip(trunc, 0, 1)), dist))
    return boxes


def _gated_profile(d: np.ndarray, window: tuple[float, float, float, float]) -> np.ndarray:
    a, b, c, e = window
    up = np.clip((d - a) / max(b - a, 1e-6), 0, 1)
    down = np.clip((e - d) / max(e - c, 1e-6), 0, 1)
    return np.minimum(up, down)


def render_clear(spec: SceneSpec, calib: CalibrationModel | None = None, cfg: SimConfig | None = None) -> MultimodalFrame:
    """Render camera, lidar, radar and gated measurements of ``spec`` in clear daylight."""
    calib = calib or CalibrationModel.default()
    cfg = cfg or SimConfig()
    rng = np.random.default_rng([spec.seed, _TAG_RENDER])
    tex = _GroundTexture(spec.seed)

    # camera
    intr = calib.camera
    origin = np.asarray(calib.camera_pose.translation, dtype=np.float64)
    dirs = _pixel_rays(intr, calib.camera_pose)
    hits = _raycast(origin, dirs, spec)
    pts = origin + np.where(np.isfinite(hits.t), hits.t, 0)[:, None] * dirs
    rgb, _, _ = _shade_surfaces(spec, hits, pts, tex)
    sky = hits.index == -2
    elev = np.clip(dirs[sky, 2], 0, 1)
    rgb[sky] = np.stack([0.62 + 0.25 * elev, 0.72 + 0.2 * elev, 0.86 + 0.1 * elev], axis=1)
    camera = np.clip(rgb, 0, 1).T.reshape(3, intr.height, intr.width).astype(np.float32)
    depth = np.where(sky, SKY_DEPTH, hits.t).reshape(intr.height, intr.width).astype(np.float32)
    boxes = _ground_truth(spec, calib, hits)

    # gated: active range-gated slices plus a passive share
    gi = calib.gated
    g_origin = np.asarray(calib.gated_pose.translation, dtype=np.float64)
    g_dirs = _pixel_rays(gi, calib.gated_pose)
    g_hits = _raycast(g_origin, g_dirs, spec)
    g_pts = g_origin + np.where(np.isfinite(g_hits.t), g_hits.t, 0)[:, None] * g_dirs
    g_rgb, g_nir, _ = _shade_surfaces(spec, g_hits, g_pts, tex)
    g_sky = g_hits.index == -2
    g_depth = np.where(g_sky, SKY_DEPTH, g_hits.t)
    passive = cfg.gated_passive_gain * np.where(g_sky, 0.8, g_rgb.mean(axis=1))
    slices = []
    for win in cfg.gated_windows:
        active = np.where(g_sky, 0.0, g_nir * _gated_profile(g_depth, win))
        slices.append(np.clip(active + passive, 0, 1))
    gated_imgs = np.stack(slices).reshape(3, gi.height, gi.width).astype(np.float32)
    gated = GatedSlices(gated_imgs, calib.gated_homography().astype(np.float32))

    # lidar
    top, bottom, n_el = cfg.lidar_elevations
    el = np.radians(np.linspace(top, bottom, int(n_el)))
    az = np.radians(np.arange(cfg.lidar_azimuth[0], cfg.lidar_azimuth[1], cfg.lidar_azimuth[2]))
    E, A = np.meshgrid(el, az, indexing="ij")
    l_dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
    l_dirs = l_dirs @ calib.lidar_pose.rotation.T
    l_origin = np.asarray(calib.lidar_pose.translation, dtype=np.float64)
    l_hits = _raycast(l_origin, l_dirs, spec)
    ok = np.isfinite(l_hits.t) & (l_hits.t <= cfg.lidar_max_range)
    l_pts = l_origin + np.where(ok, l_hits.t, 0)[:, None] * l_dirs
    _, _, refl = _shade_surfaces(spec, l_hits, l_pts, tex)
    r_meas = l_hits.t[ok] + rng.normal(0, cfg.lidar_range_noise, size=int(ok.sum()))
    xyz = l_origin + r_meas[:, None] * l_dirs[ok]
    lidar = LidarPointSet(np.concatenate([xyz, np.clip(refl[ok], 0, 1)[:, None]], axis=1).astype(np.float32))

    # radar: one detection per object centroid plus sparse clutter
    dets = []
    for obj in spec.objects:
        c = calib.radar_pose.to_sensor(np.asarray(obj.center)[None])[0]
        r = float(np.hypot(c[0], c[1]))
        a = math.degrees(math.atan2(c[1], c[0]))
        if c[0] <= 0 or abs(a) > cfg.radar_fov or r > cfg.radar_max_range:
            continue
        amp = obj.radar_amplitude * float(np.clip(math.sqrt(30.0 / max(r, 1.0)), 0.2, 1.0))
        dets.append((a + rng.normal(0, 0.3), r + rng.normal(0, 0.1), 0.0, amp))
    for _ in range(int(rng.poisson(cfg.radar_clutter_mean))):
        dets.append((rng.uniform(-cfg.radar_fov, cfg.radar_fov), rng.uniform(5, 150), 0.0, rng.uniform(0.02, 0.15)))
    radar = RadarScan(np.asarray(dets[:100], dtype=np.float32).reshape(-1, 4))

    return MultimodalFrame(
        camera=camera,
        depth=depth,
        lidar=lidar,
        radar=radar,
        gated=gated,
        gated_depth=g_depth.reshape(gi.height, gi.width).astype(np.float32),
        gated_ambient=passive.reshape(gi.height, gi.width).astype(np.float32),
        boxes=boxes,
        weather=WeatherCondition(),
        seed=spec.seed,
    )


# ---------------------------------------------------------------------------
# degradations


def fog_transmission(distance, visibility: float):
    """Koschmieder transmission ``exp(-beta d)`` with ``beta = ln(20) / V``."""
    beta = 0.0 if math.isinf(visibility) else LN20 / visibility
    return np.exp(-beta * np.asarray(distance, dtype=np.float64))


def _random_lidar_dirs(rng: np.random.Generator, n: int, cfg: SimConfig) -> np.ndarray:
    top, bottom, _ = cfg.lidar_elevations
    el = np.radians(rng.uniform(bottom, top, size=n))
    az = np.radians(rng.uniform(cfg.lidar_azimuth[0], cfg.lidar_azimuth[1], size=n))
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)


def apply_fog(frame: MultimodalFrame, visibility: float, cfg: SimConfig | None = None) -> MultimodalFrame:
    """Attenuate and scatter every stream for meteorological visibility ``visibility`` (m)."""
    cfg = cfg or SimConfig()
    if frame.depth is None or frame.gated_depth is None:
        raise ValueError("apply_fog needs the rendered depth buffers")
    if not visibility > 0:
        raise ValueError(f"visibility must be positive, got {visibility}")
    if math.isinf(visibility):
        return frame.replace(weather=dataclasses.replace(frame.weather, kind="clear", visibility=math.inf))
    beta = LN20 / visibility
    t_cam = fog_transmission(frame.depth, visibility).astype(np.float32)
    camera = frame.camera * t_cam[None] + np.float32(AIRLIGHT) * (1 - t_cam[None])

    # gated: attenuation only, no backscatter term
    t_g = fog_transmission(frame.gated_depth, visibility).astype(np.float32)
    att = frame.gated.images * t_g[None]
    # per-slice auto gain restores each slice's clear peak level, bounded by the imager's gain range
    peak0 = frame.gated.images.reshape(3, -1).max(axis=1)
    peak1 = att.reshape(3, -1).max(axis=1)
    gain = np.minimum(np.where(peak1 > 0, peak0 / np.maximum(peak1, 1e-12), 1.0), cfg.gated_max_gain).astype(np.float32)
    gated = GatedSlices(np.clip(att * gain[:, None, None], 0, 1), frame.gated.homography)
    gated_ambient = frame.gated_ambient * t_g * gain.mean()

    rng = np.random.default_rng([frame.seed, _TAG_FOG, int(round(visibility * 1000))])
    pts = frame.lidar.points
    r_max = visibility / 2
    keep = np.linalg.norm(pts[:, :3], axis=1) <= r_max
    n_clutter = int(rng.poisson(cfg.fog_clutter_per_beta * beta))
    dirs = _random_lidar_dirs(rng, n_clutter, cfg)
    rr = rng.uniform(3.0, 12.0, size=n_clutter)
    clutter = np.concatenate([dirs * rr[:, None], rng.uniform(0.0, 0.15, size=(n_clutter, 1))], axis=1)
    lidar = LidarPointSet(np.concatenate([pts[keep], clutter.astype(np.float32)]).astype(np.float32))

    kind = WeatherCondition.fog(visibility)
    weather = dataclasses.replace(frame.weather, kind=kind.kind, visibility=float(visibility))
    return frame.replace(camera=np.clip(camera, 0, 1).astype(np.float32), gated=gated, gated_ambient=gated_ambient,
                         lidar=lidar, weather=weather)


def apply_night(frame: MultimodalFrame, ambient: float, cfg: SimConfig | None = None) -> MultimodalFrame:
    """Scale passive illumination by ``ambient`` in [0, 1].

    The camera gets signal-dependent sensor noise with standard deviation
    ``night_noise * sqrt(signal)``; the gated camera keeps its active share.
    """
    cfg = cfg or SimConfig()
    if not 0.0 <= ambient <= 1.0:
        raise ValueError(f"ambient must lie in [0, 1], got {ambient}")
    rng = np.random.default_rng([frame.seed, _TAG_NIGHT, int(round(ambient * 1e6))])
    sig = frame.camera * np.float32(ambient)
    noise = rng.normal(0.0, 1.0, size=sig.shape).astype(np.float32) * np.float32(cfg.night_noise) * np.sqrt(sig)
    camera = np.clip(sig + noise, 0, 1).astype(np.float32)
    dim = np.float32(1.0 - ambient) * frame.gated_ambient
    gated = GatedSlices(np.clip(frame.gated.images - dim[None], 0, 1).astype(np.float32), frame.gated.homography)
    weather = dataclasses.replace(frame.weather, ambient_light=float(ambient))
    return frame.replace(camera=camera, gated=gated, gated_ambient=(frame.gated_ambient * np.float32(ambient)).astype(np.float32),
                         weather=weather)


def _draw_streaks(img: np.ndarray, rng: np.random.Generator, n: int) -> np.ndarray:
    """Composite ``n`` bright short slanted streaks onto ``img[C, H, W]``."""
    out = img.copy()
    _, H, W = img.shape
    for _ in range(n):
        x0, y0 = rng.uniform(0, W), rng.uniform(0, H)
        length = rng.uniform(2, 9)
        ang = rng.normal(math.pi / 2, 0.25)
        val = np.float32(rng.uniform(0.8, 1.0))
        for s in np.linspace(0, length, int(length * 2) + 1):
            x = int(x0 + s * math.cos(ang))
            y = int(y0 + s * math.sin(ang))
            if 0 <= x < W and 0 <= y < H:
                out[:, y, x] = val
    return out


def apply_snow_rain(frame: MultimodalFrame, clutter_rate: float, cfg: SimConfig | None = None) -> MultimodalFrame:
    """Add ``clutter_rate`` falling particles per frame to camera, gated and lidar."""
    cfg = cfg or SimConfig()
    if clutter_rate < 0:
        raise ValueError(f"clutter_rate must be >= 0, got {clutter_rate}")
    if clutter_rate == 0:
        return frame
    rng = np.random.default_rng([frame.seed, _TAG_SNOW, int(round(clutter_rate * 1000))])
    camera = _draw_streaks(frame.camera, rng, int(rng.poisson(clutter_rate)))
    gated_imgs = _draw_streaks(frame.gated.images, rng, int(rng.poisson(clutter_rate * 0.5)))
    pts = frame.lidar.points
    p_drop = min(1.0, cfg.snow_drop_per_rate * clutter_rate)
    keep = rng.random(len(pts)) >= p_drop
    n_clutter = int(rng.poisson(clutter_rate))
    dirs = _random_lidar_dirs(rng, n_clutter, cfg)
    rr = rng.uniform(2.0, 25.0, size=n_clutter)
    clutter = np.concatenate([dirs * rr[:, None], rng.uniform(0.0, 0.3, size=(n_clutter, 1))], axis=1)
    lidar = LidarPointSet(np.concatenate([pts[keep], clutter.astype(np.float32)]).astype(np.float32))
    weather = dataclasses.replace(frame.weather, kind="snow_rain", clutter_rate=float(clutter_rate))
    return frame.replace(camera=camera, gated=GatedSlices(gated_imgs, frame.gated.homography), lidar=lidar, weather=weather)


def apply_condition(frame: MultimodalFrame, cond: WeatherCondition, cfg: SimConfig | None = None) -> MultimodalFrame:
    """Apply every degradation implied by ``cond`` to a clear frame."""
    out = frame
    if cond.ambient_light < 1.0:
        out = apply_night(out, cond.ambient_light, cfg)
    if cond.kind in ("light_fog", "dense_fog"):
        out = apply_fog(out, cond.visibility, cfg)
    if cond.kind == "snow_rain" or cond.clutter_rate > 0:
        out = apply_snow_rain(out, cond.clutter_rate, cfg)
    return out.replace(weather=cond)
