"""Pinhole cameras, look-at trajectories, Plücker ray maps and pose errors.

Conventions (fixed across the package): ``R, t`` map world to camera,
``x_cam = R @ x_world + t``; the camera looks down +z, image x grows right and
image y grows down; the camera center is ``C = -R.T @ t``. World "up" is -y.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

WORLD_UP = np.array([0.0, -1.0, 0.0])


class DegenerateLookAt(ValueError):
    pass


@dataclass(frozen=True)
class CameraPose:
    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def validate(self, tol: float = 1e-6) -> None:
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=tol) or abs(np.linalg.det(self.R) - 1) > tol:
            raise ValueError("R must be a proper rotation")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rescaled(self, out_w: int, out_h: int) -> "CameraPose":
        sx = out_w / self.width
        sy = out_h / self.height
        return CameraPose(self.R, self.t, self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, out_w, out_h)

    def with_extrinsics(self, R: np.ndarray, t: np.ndarray) -> "CameraPose":
        return CameraPose(R, t, self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def to_dict(self) -> dict:
        return {
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.array(d["R"], dtype=np.float64).reshape(3, 3), np.array(d["t"], dtype=np.float64),
                   float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))

    def same_as(self, other: "CameraPose") -> bool:
        return (np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)
                and (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
                == (other.fx, other.fy, other.cx, other.cy, other.width, other.height))


@dataclass
class Trajectory:
    poses: list[CameraPose]
    shared_intrinsics: bool = True

    def __post_init__(self):
        if self.poses:
            sizes = {(p.width, p.height) for p in self.poses}
            if len(sizes) != 1:
                raise ValueError("all poses in a trajectory must share the image size")

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i: int) -> CameraPose:
        return self.poses[i]

    @property
    def centers(self) -> np.ndarray:
        return np.stack([p.center for p in self.poses])

    def to_json(self) -> dict:
        return {"frames": [p.to_dict() for p in self.poses]}

    @classmethod
    def from_json(cls, obj: dict) -> "Trajectory":
        return cls([CameraPose.from_dict(f) for f in obj["frames"]])

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "Trajectory":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class PoseErrors:
    trans_err: float
    rot_err: float
    degenerate: bool = False


@dataclass(frozen=True)
class TrajectoryConfig:
    frames: int = 16
    r_min: float = 2.0
    r_max: float = 10.0
    azimuth_range: tuple[float, float] = (-180.0, 180.0)
    elevation_range: tuple[float, float] = (0.0, 35.0)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    static: bool = False
    width: int = 64
    height: int = 64
    fov_deg: float = 45.0


def look_at_rotation(center: np.ndarray, target: np.ndarray, up: np.ndarray = WORLD_UP) -> np.ndarray:
    """World-to-camera rotation for a zero-roll camera at ``center`` facing ``target``."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    n = np.linalg.norm(forward)
    if n < 1e-6:
        raise DegenerateLookAt("camera center coincides with look-at target")
    z = forward / n
    down = -np.asarray(up, dtype=np.float64)
    x = np.cross(down, z)
    nx = np.linalg.norm(x)
    if nx < 1e-6:
        raise DegenerateLookAt("view direction parallel to the up vector")
    x /= nx
    y = np.cross(z, x)
    return np.stack([x, y, z])


def pose_from_center(center: np.ndarray, target: np.ndarray, fx: float, fy: float, cx: float, cy: float,
                     width: int, height: int) -> CameraPose:
    R = look_at_rotation(center, target)
    return CameraPose(R, -R @ np.asarray(center, dtype=np.float64), fx, fy, cx, cy, width, height)


def intrinsics_for(width: int, height: int, fov_deg: float) -> tuple[float, float, float, float]:
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return f, f, width / 2.0, height / 2.0


def spherical_offset(radius: float, azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """Offset from the target; azimuth 0 sits on -z (facing a subject that faces -z)."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return radius * np.array([math.cos(el) * math.sin(az), -math.sin(el), -math.cos(el) * math.cos(az)])


def _sample_center(rng: np.random.Generator, cfg: TrajectoryConfig) -> tuple[np.ndarray, float]:
    # volume-uniform radius over the shell, area-uniform direction over the patch
    u = rng.random()
    r = (cfg.r_min ** 3 + u * (cfg.r_max ** 3 - cfg.r_min ** 3)) ** (1.0 / 3.0)
    az = rng.uniform(*cfg.azimuth_range)
    s0, s1 = (math.sin(math.radians(e)) for e in cfg.elevation_range)
    el = math.degrees(math.asin(rng.uniform(s0, s1)))
    r = min(max(r, cfg.r_min), cfg.r_max)
    return np.asarray(cfg.look_at, dtype=np.float64) + spherical_offset(r, az, el), az


def _segment_min_distance(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    u = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(a + u * ab - p))


def sample_trajectory(rng_seed: int, config: TrajectoryConfig) -> Trajectory:
    """Linear camera path between two endpoints drawn from the spherical shell.

    Endpoint pairs whose chord would dip inside ``r_min`` are redrawn, so every
    interpolated center stays inside the shell.
    """
    if config.frames < 1:
        raise ValueError("frames must be >= 1")
    if not (0 < config.r_min <= config.r_max):
        raise ValueError("need 0 < r_min <= r_max")
    rng = np.random.default_rng(rng_seed)
    target = np.asarray(config.look_at, dtype=np.float64)
    fx, fy, cx, cy = intrinsics_for(config.width, config.height, config.fov_deg)
    degenerate = 0
    for _ in range(4096):
        start, _ = _sample_center(rng, config)
        end = start if config.static else _sample_center(rng, config)[0]
        if _segment_min_distance(start, end, target) < config.r_min * (1 - 1e-12):
            continue
        try:
            poses = []
            for k in range(config.frames):
                a = 0.0 if config.frames == 1 else k / (config.frames - 1)
                c = start + a * (end - start)
                poses.append(pose_from_center(c, target, fx, fy, cx, cy, config.width, config.height))
        except DegenerateLookAt:
            degenerate += 1
            if degenerate >= 16:
                break
            continue
        if config.static:
            poses = [poses[0]] * config.frames
        return Trajectory(poses)
    raise DegenerateLookAt("could not sample a valid trajectory")


def plucker_embed(traj: Trajectory, out_h: int, out_w: int) -> np.ndarray:
    """Per-pixel (d, m) ray encoding, shape ``(T, out_h, out_w, 6)``."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    jj, ii = np.meshgrid(np.arange(out_w) + 0.5, np.arange(out_h) + 0.5)
    pix = np.stack([jj, ii, np.ones_like(jj)], axis=-1)
    out = np.empty((len(traj), out_h, out_w, 6))
    for k, pose in enumerate(traj.poses):
        p = pose.rescaled(out_w, out_h)
        rays_cam = pix @ np.linalg.inv(p.K).T
        d = rays_cam @ p.R  # R^T applied to row vectors
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        out[k, ..., :3] = d
        out[k, ..., 3:] = np.cross(p.center, d)
    return out


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic distance; atan2 of the sine and cosine parts stays accurate near 0 and pi."""
    M = Ra @ Rb.T
    c = (np.trace(M) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(np.arctan2(s, c))


def _relative(traj: Trajectory) -> tuple[list[np.ndarray], np.ndarray]:
    R0, t0 = traj[0].R, traj[0].t
    Rs, ts = [], []
    for p in traj.poses:
        Rr = p.R @ R0.T
        Rs.append(Rr)
        ts.append(p.t - Rr @ t0)
    return Rs, np.stack(ts)


def pose_error(estimated: Trajectory, reference: Trajectory) -> PoseErrors:
    """Mean normalized translation error and mean geodesic rotation error.

    Both tracks are expressed relative to their first frame; the reference's
    relative translations are scaled to max norm 1 and the estimate shares that
    scale. Means run over the non-first frames.
    """
    if len(estimated) != len(reference) or len(reference) < 2:
        raise ValueError("trajectories must have equal length >= 2")
    Re, te = _relative(estimated)
    Rr, tr = _relative(reference)
    scale = float(np.max(np.linalg.norm(tr, axis=1)))
    degenerate = scale < 1e-12
    if degenerate:
        scale = 1.0
    trans = np.linalg.norm(te[1:] / scale - tr[1:] / scale, axis=1).mean()
    rot = np.mean([rotation_angle(a, b) for a, b in zip(Re[1:], Rr[1:])])
    return PoseErrors(float(trans), float(rot), degenerate)
