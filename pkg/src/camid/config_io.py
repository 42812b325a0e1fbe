"""Run configuration, seed lineage and on-disk formats.

Everything human-facing is JSON. Weights and raw arrays use a small binary
container: an 8-byte little-endian header length, a JSON header listing
``{name, shape, offset}`` per array, then the little-endian float32 payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigError(ValueError):
    """Schema or validation failure; the message names the offending field path."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataConfig(_Section):
    frames: int = Field(16, ge=1)
    resolution: int = Field(64, ge=8)
    fov_deg: float = Field(45.0, gt=0, lt=180)
    r_min: float = Field(2.0, gt=0)
    r_max: float = 10.0
    elevation_range: tuple[float, float] = (0.0, 35.0)
    azimuth_range: tuple[float, float] = (-180.0, 180.0)
    # desk-scale counts are 1/8 of the captured dataset (256 videos over 8
    # sequences, 128 relit videos, 27 joint videos per subject pair)
    videos_per_subject: int = Field(32, ge=0)
    sequences_per_subject: int = Field(4, ge=1)
    relit_per_subject: int = Field(8, ge=0)
    joint_videos: int = Field(4, ge=0)
    frontal_only: bool = False
    static_cameras: bool = False
    n_subjects: int = Field(2, ge=1, le=4)
    general_videos: int = Field(96, ge=0)
    probe_videos: int = Field(32, ge=0)
    reference_views: int = Field(10, ge=1)

    @model_validator(mode="after")
    def _radius_order(self):
        if self.r_max < self.r_min:
            raise ValueError("r_max must be >= r_min")
        return self


class ModelConfig(_Section):
    blocks: int = Field(8, ge=1)
    width: int = Field(128, ge=8)
    heads: int = Field(4, ge=1)
    patch: int = Field(4, ge=1)
    tpatch: int = Field(2, ge=1)
    frames: int = Field(16, ge=1)
    height: int = Field(64, ge=1)
    width_px: int = Field(64, ge=1)
    steps: int = Field(50, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    max_prompt: int = Field(16, ge=1)

    @model_validator(mode="after")
    def _divisible(self):
        if self.frames % self.tpatch or self.height % self.patch or self.width_px % self.patch:
            raise ValueError("resolution must be divisible by the patch sizes")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        return self

    @property
    def token_grid(self) -> tuple[int, int, int]:
        return (self.frames // self.tpatch, self.height // self.patch, self.width_px // self.patch)

    @property
    def n_video_tokens(self) -> int:
        t, h, w = self.token_grid
        return t * h * w

    @property
    def control_blocks(self) -> int:
        # ceil(0.25 * L) without float rounding
        return -(-self.blocks // 4)


class CameraPretrainConfig(_Section):
    base_steps: int = Field(4000, ge=0)
    steps: int = Field(1000, ge=0)
    lr: float = Field(1e-3, gt=0)
    branch_lr: float = Field(3e-4, gt=0)
    batch: int = Field(1, ge=1)
    gate_fraction: float = Field(0.4, gt=0, le=1)
    gate_training_loss: bool = True
    log_every: int = Field(50, ge=1)


class CustomizeConfig(_Section):
    steps: int = Field(400, ge=0)
    lr: float = Field(1e-3, gt=0)
    token_lr: float = Field(3e-3, gt=0)
    reg_mix: float = Field(0.5, ge=0, le=1)
    rank: int = Field(4, ge=1)
    alpha: float = 1.0
    batch: int = Field(1, ge=1)


class BlendConfig(_Section):
    warmup_fraction: float = Field(0.10, ge=0, lt=1)


class EvalConfig(_Section):
    n_trajectories: int = Field(16, ge=1)
    n_prompts: int = Field(16, ge=1)
    sampler_steps: int = Field(20, ge=1)
    pose_iters: int = Field(40, ge=1)
    pose_tol: float = Field(0.02, gt=0)
    blend_samples: int = Field(4, ge=1)
    embedder_steps: int = Field(1500, ge=1)


class RunConfig(_Section):
    master_seed: int = 0
    output_root: str = "runs"
    stage_tags: dict[str, str] = Field(default_factory=dict)
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    camera_pretrain: CameraPretrainConfig = Field(default_factory=CameraPretrainConfig)
    customize: CustomizeConfig = Field(default_factory=CustomizeConfig)
    blend: BlendConfig = Field(default_factory=BlendConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def resolved_output_root(self) -> Path:
        return Path(os.environ.get("CAMCTRL_OUT", self.output_root))

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.model_dump(mode="json")).encode()).hexdigest()[:16]


def _format_validation(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{path}: {e['msg']}")
    return "; ".join(parts)


def parse_config(data: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_validation(err)) from None


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a JSON object")
    return parse_config(data)


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    write_json(path, cfg.model_dump(mode="json"))


def derive_seed(master_seed: int, stage_label: str, index: int = 0) -> int:
    """Stateless 63-bit seed for ``(stage_label, index)`` under ``master_seed``."""
    h = hashlib.blake2b(f"{int(master_seed)}|{stage_label}|{int(index)}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path: str | os.PathLike, obj: Any) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str | os.PathLike) -> Any:
    with open(path) as fh:
        return json.load(fh)


def save_tensors(path: str | os.PathLike, arrays: dict[str, np.ndarray]) -> str:
    """Write arrays as little-endian float32; returns the sha256 of the file."""
    header = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f4", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        header.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    head = canonical_json({"tensors": header}).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    return file_sha256(path)


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        payload = fh.read()
    out = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        out[entry["name"]] = a.reshape(entry["shape"]).copy()
    return out


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
