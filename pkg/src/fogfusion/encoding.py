"""Image-plane encoding of lidar, radar and gated measurements.

Every stream is brought into the RGB camera's pixel grid so that all branches
see pixel-aligned inputs. Pixels without a measurement are encoded as 0.

Frames: the vehicle frame is x forward, y left, z up. Camera frames are the
usual x right, y down, z forward. Pixel ``(u, v)`` covers ``[u, u+1) x [v, v+1)``
in continuous image coordinates, so the principal point ``(W/2, H/2)`` falls
in pixel ``(W//2, H//2)``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

# vehicle (x fwd, y left, z up) -> optical (x right, y down, z fwd)
VEHICLE_TO_OPTICAL = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])

diagnostics: Counter = Counter()


@dataclass(frozen=True)
class Pose:
    """Sensor pose in the vehicle frame: ``p_vehicle = rotation @ p_sensor + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_sensor(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.translation) @ self.rotation

    def to_vehicle(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "PinholeIntrinsics":
        f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class CalibrationModel:
    camera: PinholeIntrinsics
    gated: PinholeIntrinsics
    camera_pose: Pose = field(default_factory=Pose)
    lidar_pose: Pose = field(default_factory=Pose)
    radar_pose: Pose = field(default_factory=Pose)
    gated_pose: Pose = field(default_factory=Pose)

    @classmethod
    def default(cls, width: int = 192, height: int = 96, gated_width: int = 128, gated_height: int = 72) -> "CalibrationModel":
        # horizontal fields of view of the RGB (39.6 deg) and gated (31.1 deg) cameras
        return cls(
            camera=PinholeIntrinsics.from_fov(width, height, 39.6),
            gated=PinholeIntrinsics.from_fov(gated_width, gated_height, 31.1),
        )

    def gated_homography(self) -> np.ndarray:
        """Homography mapping gated pixel coordinates to camera pixel coordinates.

        Exact for co-located sensors (rotation only); translations are ignored.
        """
        r_cam = VEHICLE_TO_OPTICAL @ self.camera_pose.rotation.T
        r_gat = VEHICLE_TO_OPTICAL @ self.gated_pose.rotation.T
        rel = r_cam @ r_gat.T
        return self.camera.K @ rel @ np.linalg.inv(self.gated.K)

    def project(self, pts_vehicle: np.ndarray, intrinsics: PinholeIntrinsics | None = None, pose: Pose | None = None):
        """Return continuous pixel coords ``(u, v)`` and optical depth ``z`` of vehicle-frame points."""
        intr = intrinsics or self.camera
        pose = pose or self.camera_pose
        pc = pose.to_sensor(pts_vehicle) @ VEHICLE_TO_OPTICAL.T
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = intr.fx * pc[:, 0] / z + intr.cx
            v = intr.fy * pc[:, 1] / z + intr.cy
        return u, v, z


@dataclass
class LidarPointSet:
    points: np.ndarray  # [N, 4]: x, y, z, intensity

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)


@dataclass
class RadarScan:
    detections: np.ndarray  # [N, 4]: azimuth deg, range m, radial velocity m/s, amplitude
    max_targets: int = 100

    def __post_init__(self):
        self.detections = np.asarray(self.detections, dtype=np.float64).reshape(-1, 4)
        if len(self.detections) > self.max_targets:
            raise ValueError(f"{len(self.detections)} radar detections exceed max_targets={self.max_targets}")


@dataclass
class GatedSlices:
    images: np.ndarray  # [3, h, w] in the gated camera's own plane
    homography: np.ndarray  # 3x3, gated plane -> camera plane

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.homography = np.asarray(self.homography, dtype=np.float64)


@dataclass
class EncoderConfig:
    lidar_max_range: float = 120.0
    radar_max_range: float = 200.0
    z_min: float = -2.0
    z_max: float = 6.0


@dataclass
class EncodedFrame:
    camera: np.ndarray  # [3, H, W]
    lidar: np.ndarray  # [3, H, W] depth, height, intensity
    radar: np.ndarray  # [2, H, W] range, amplitude
    gated: np.ndarray  # [3, H, W]

    STREAMS = ("camera", "lidar", "radar", "gated")

    def stream(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {s: getattr(self, s) for s in self.STREAMS}


STREAMS = EncodedFrame.STREAMS
STREAM_CHANNELS = {"camera": 3, "lidar": 3, "radar": 2, "gated": 3}


def project_lidar(points: LidarPointSet | np.ndarray, calib: CalibrationModel, size: tuple[int, int] | None = None,
                  cfg: EncoderConfig | None = None) -> np.ndarray:
    """Depth/height/intensity planes ``[3, H, W]``; nearest point wins per pixel."""
    cfg = cfg or EncoderConfig()
    H, W = size or (calib.camera.height, calib.camera.width)
    out = np.zeros((3, H, W), dtype=np.float32)
    pts = points.points if isinstance(points, LidarPointSet) else np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if len(pts) == 0:
        return out
    xyz = pts[:, :3]
    rng = np.linalg.norm(xyz - calib.lidar_pose.translation, axis=1)
    u, v, z = calib.project(xyz)
    ok = (z > 0) & (rng > 0) & (rng <= cfg.lidar_max_range)
    u, v, rng, p = u[ok], v[ok], rng[ok], pts[ok]
    ui = np.floor(u).astype(np.int64)
    vi = np.floor(v).astype(np.int64)
    inside = (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    if not inside.any():
        return out
    ui, vi, rng, p = ui[inside], vi[inside], rng[inside], p[inside]
    depth = rng / cfg.lidar_max_range
    height = np.clip((p[:, 2] - cfg.z_min) / (cfg.z_max - cfg.z_min), 0.0, 1.0)
    inten = np.clip(p[:, 3], 0.0, 1.0)
    # farthest first so the nearest write lands last; full key makes ties order-independent
    order = np.lexsort((-inten, -p[:, 2], -p[:, 1], -p[:, 0], -rng))
    out[0, vi[order], ui[order]] = depth[order]
    out[1, vi[order], ui[order]] = height[order]
    out[2, vi[order], ui[order]] = inten[order]
    return out


def replicate_radar(scan: RadarScan | np.ndarray, calib: CalibrationModel, size: tuple[int, int] | None = None,
                    cfg: EncoderConfig | None = None) -> np.ndarray:
    """Range/amplitude planes ``[2, H, W]`` replicated along image columns."""
    cfg = cfg or EncoderConfig()
    H, W = size or (calib.camera.height, calib.camera.width)
    out = np.zeros((2, H, W), dtype=np.float32)
    det = scan.detections if isinstance(scan, RadarScan) else np.asarray(scan, dtype=np.float64).reshape(-1, 4)
    if len(det) == 0:
        return out
    az = np.radians(det[:, 0])
    r = det[:, 1]
    local = np.stack([np.cos(az), np.sin(az), np.zeros_like(az)], axis=1)
    pts = calib.radar_pose.to_vehicle(local * np.maximum(r, 1e-6)[:, None])
    u, _, z = calib.project(pts)
    ok = z > 0
    col = np.full(len(det), -1, dtype=np.int64)
    col[ok] = np.floor(u[ok]).astype(np.int64)
    ok &= (col >= 0) & (col < W)
    diagnostics["radar_out_of_view"] += int((~ok).sum())
    if not ok.any():
        return out
    col, r, amp = col[ok], r[ok], np.clip(det[ok, 3], 0.0, 1.0)
    rn = np.clip(r / cfg.radar_max_range, 0.0, 1.0)
    order = np.lexsort((-amp, -r))
    row = np.zeros((2, W), dtype=np.float32)
    row[0, col[order]] = rn[order]
    row[1, col[order]] = amp[order]
    out[:] = row[:, None, :]
    return out


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``img[C, h, w]`` at pixel-index coordinates; outside the grid gives 0."""
    C, h, w = img.shape
    eps = 1e-6
    valid = (x >= -eps) & (x <= w - 1 + eps) & (y >= -eps) & (y <= h - 1 + eps)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0).astype(np.float32)
    fy = (yc - y0).astype(np.float32)
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bot = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.where(valid, out, 0.0).astype(np.float32)


def warp_image(img: np.ndarray, homography: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Inverse-warp ``img`` (source plane) into a ``size`` destination plane.

    ``homography`` maps source continuous coordinates to destination ones.
    """
    h = np.asarray(homography, dtype=np.float64)
    if abs(np.linalg.det(h)) <= 1e-9:
        raise ValueError(f"homography is singular (det={np.linalg.det(h):.3e})")
    Hd, Wd = size
    vv, uu = np.mgrid[0:Hd, 0:Wd]
    dst = np.stack([uu.ravel() + 0.5, vv.ravel() + 0.5, np.ones(Hd * Wd)])
    src = np.linalg.inv(h) @ dst
    with np.errstate(divide="ignore", invalid="ignore"):
        x = src[0] / src[2] - 0.5
        y = src[1] / src[2] - 0.5
    bad = ~np.isfinite(x) | ~np.isfinite(y) | (src[2] <= 0)
    x[bad] = -10.0
    y[bad] = -10.0
    out = bilinear_sample(np.asarray(img, dtype=np.float32), x, y)
    return out.reshape(img.shape[0], Hd, Wd)


def warp_gated(slices: GatedSlices, size: tuple[int, int]) -> np.ndarray:
    """Gated slices resampled into the camera plane, clipped to [0, 1]."""
    return np.clip(warp_image(slices.images, slices.homography, size), 0.0, 1.0)


def encode_frame(frame, calib: CalibrationModel, cfg: EncoderConfig | None = None) -> EncodedFrame:
    """Encode a :class:`~fogfusion.weather.MultimodalFrame` into pixel-aligned planes."""
    size = (calib.camera.height, calib.camera.width)
    return EncodedFrame(
        camera=np.clip(frame.camera, 0.0, 1.0).astype(np.float32),
        lidar=project_lidar(frame.lidar, calib, size, cfg),
        radar=replicate_radar(frame.radar, calib, size, cfg),
        gated=warp_gated(frame.gated, size),
    )
