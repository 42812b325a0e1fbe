"""Time-varying Gaussian primitives and the scene container."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

UP = np.array([0.0, -1.0, 0.0])


@dataclass(frozen=True)
class LightingParams:
    gain: float = 1.0
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    key_direction: tuple[float, float, float] = (0.0, -1.0, 0.0)
    key_strength: float = 0.0

    def __post_init__(self):
        if self.gain <= 0 or min(self.tint) <= 0 or self.key_strength < 0:
            raise ValueError("invalid lighting parameters")
        d = np.asarray(self.key_direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1) > 1e-6:
            raise ValueError("key_direction must be unit length")

    @property
    def is_identity(self) -> bool:
        return self.gain == 1.0 and tuple(self.tint) == (1.0, 1.0, 1.0) and self.key_strength == 0.0


@dataclass
class Gaussian4D:
    center_track: np.ndarray  # (1, 3) static, (2, 3) endpoints, or (frames, 3)
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    color: np.ndarray
    opacity: float
    subject_id: int = 0

    def __post_init__(self):
        self.center_track = np.atleast_2d(np.asarray(self.center_track, dtype=np.float64))
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.opacity = float(self.opacity)
        self.subject_id = int(self.subject_id)

    def validate(self) -> None:
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity outside [0, 1]")
        if np.any(self.scale < 1e-4) or np.any(self.scale > 10):
            raise ValueError("scale outside [1e-4, 10]")
        if abs(np.linalg.norm(self.rotation) - 1) > 1e-6:
            raise ValueError("rotation quaternion must be unit")

    def to_dict(self) -> dict:
        return {
            "center_track": self.center_track.tolist(),
            "scale": self.scale.tolist(),
            "rotation": self.rotation.tolist(),
            "color": self.color.tolist(),
            "opacity": self.opacity,
            "subject_id": self.subject_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Gaussian4D":
        return cls(d["center_track"], d["scale"], d["rotation"], d["color"], d["opacity"], d.get("subject_id", 0))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for ``(..., 4)`` quaternions in (w, x, y, z) order."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


@dataclass
class PackedFrame:
    """Structure-of-arrays view of a scene at one time step."""
    means: np.ndarray
    covs: np.ndarray
    colors: np.ndarray
    opacity: np.ndarray
    subject_ids: np.ndarray


@dataclass
class Scene:
    gaussians: list[Gaussian4D]
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lighting: LightingParams = field(default_factory=LightingParams)
    subject_registry: dict[int, dict] = field(default_factory=dict)
    frames: int = 1
    setting: str = ""

    def __post_init__(self):
        ids = {g.subject_id for g in self.gaussians}
        for sid in self.subject_registry:
            if int(sid) not in ids:
                raise ValueError(f"registry entry {sid} has no Gaussians")
        self.subject_registry = {int(k): v for k, v in self.subject_registry.items()}

    @property
    def subject_ids(self) -> list[int]:
        return sorted({g.subject_id for g in self.gaussians if g.subject_id > 0})

    @cached_property
    def _arrays(self):
        n = len(self.gaussians)
        tracks = np.zeros((n, self.frames, 3))
        for i, g in enumerate(self.gaussians):
            tracks[i] = resolve_track(g.center_track, self.frames)
        if n:
            scales = np.stack([g.scale for g in self.gaussians])
            rots = quat_to_matrix(np.stack([g.rotation for g in self.gaussians]))
            covs = np.einsum("nij,nj,nkj->nik", rots, scales ** 2, rots)
            colors = np.stack([g.color for g in self.gaussians])
        else:
            covs = np.zeros((0, 3, 3))
            colors = np.zeros((0, 3))
        opac = np.array([g.opacity for g in self.gaussians], dtype=np.float64)
        sids = np.array([g.subject_id for g in self.gaussians], dtype=np.int64)
        return tracks, covs, colors, opac, sids

    def packed(self, time: int) -> PackedFrame:
        if not 0 <= time < self.frames:
            raise IndexError(f"time {time} outside clip of {self.frames} frames")
        tracks, covs, colors, opac, sids = self._arrays
        means = tracks[:, time]
        return PackedFrame(means, covs, shade(colors, means, sids, self.lighting), opac, sids)

    def lit_background(self) -> np.ndarray:
        bg = np.asarray(self.background_color, dtype=np.float64)
        lt = self.lighting
        return np.clip(bg * lt.gain * np.asarray(lt.tint), 0.0, 1.0)

    def to_dict(self) -> dict:
        lt = self.lighting
        return {
            "frames": self.frames,
            "setting": self.setting,
            "background_color": list(map(float, self.background_color)),
            "lighting": {"gain": lt.gain, "tint": list(lt.tint), "key_direction": list(lt.key_direction),
                         "key_strength": lt.key_strength},
            "subject_registry": {str(k): v for k, v in self.subject_registry.items()},
            "gaussians": [g.to_dict() for g in self.gaussians],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        lt = d.get("lighting", {})
        lighting = LightingParams(lt.get("gain", 1.0), tuple(lt.get("tint", (1.0, 1.0, 1.0))),
                                  tuple(lt.get("key_direction", (0.0, -1.0, 0.0))), lt.get("key_strength", 0.0))
        return cls([Gaussian4D.from_dict(g) for g in d["gaussians"]], tuple(d.get("background_color", (0, 0, 0))),
                   lighting, {int(k): v for k, v in d.get("subject_registry", {}).items()}, int(d.get("frames", 1)),
                   d.get("setting", ""))

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "Scene":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes) -> "Scene":
        return dataclasses.replace(self, **changes)


def resolve_track(track: np.ndarray, frames: int) -> np.ndarray:
    track = np.atleast_2d(track)
    k = track.shape[0]
    if k == 1:
        return np.repeat(track, frames, axis=0)
    if k == frames:
        return track.copy()
    if k == 2:
        if frames == 1:
            return track[:1].copy()
        a = (np.arange(frames) / (frames - 1))[:, None]
        return track[0] + a * (track[1] - track[0])
    raise ValueError(f"center track of length {k} does not fit a {frames}-frame clip")


def normal_proxy(means: np.ndarray, subject_ids: np.ndarray) -> np.ndarray:
    """Outward direction from each subject's current centroid; background faces up."""
    normals = np.tile(UP, (len(means), 1))
    for sid in np.unique(subject_ids):
        if sid <= 0:
            continue
        sel = subject_ids == sid
        off = means[sel] - means[sel].mean(axis=0)
        n = np.linalg.norm(off, axis=1, keepdims=True)
        ok = n[:, 0] > 1e-9
        block = normals[sel]
        block[ok] = off[ok] / n[ok]
        normals[sel] = block
    return normals


def shade(colors: np.ndarray, means: np.ndarray, subject_ids: np.ndarray, lighting: LightingParams) -> np.ndarray:
    if lighting.is_identity:
        return colors
    k = np.asarray(lighting.key_direction, dtype=np.float64)
    lam = np.maximum(0.0, normal_proxy(means, subject_ids) @ k)
    factor = 1.0 - lighting.key_strength + lighting.key_strength * lam
    return np.clip(colors * lighting.gain * np.asarray(lighting.tint) * factor[:, None], 0.0, 1.0)
