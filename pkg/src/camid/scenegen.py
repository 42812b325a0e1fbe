"""Procedural subjects, scenes, lighting variations and dataset manifests.

Subjects are articulated Gaussian blobs whose front and back carry different
colors, so recognizing one from behind is a genuine multi-view problem.
Subjects face -z; feet rest on the ground plane y = 0 and the body extends
towards -y (world up).
"""
from __future__ import annotations

import colorsys
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from camid.camera import (Trajectory, TrajectoryConfig, intrinsics_for, pose_from_center, sample_trajectory,
                          spherical_offset)
from camid.config_io import DataConfig, derive_seed, read_json, write_json
from camid.splat.render import render_frame, render_video, write_frames, write_masks
from camid.splat.scene import Gaussian4D, LightingParams, Scene

PARTS = ("torso", "head", "arm_l", "arm_r", "leg_l", "leg_r")
MOTIONS = ("bobbing", "turning", "swaying", "standing")
SETTINGS = ("studio", "room", "garden", "street")
STUDIO = "studio"


@dataclass(frozen=True)
class IdentityDescriptor:
    seed: int

    @property
    def signature(self) -> dict:
        rng = np.random.default_rng([7331, self.seed])
        base_hue = rng.random()
        front, back = {}, {}
        for k, part in enumerate(PARTS):
            h = (base_hue + rng.uniform(-0.12, 0.12) + (0.5 if part.startswith("leg") else 0.0)) % 1.0
            front[part] = colorsys.hsv_to_rgb(h, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0))
            hb = (h + rng.uniform(0.25, 0.45)) % 1.0
            back[part] = colorsys.hsv_to_rgb(hb, rng.uniform(0.5, 1.0), rng.uniform(0.4, 0.9))
        return {
            "height": float(rng.uniform(1.5, 1.9)),
            "girth": float(rng.uniform(0.8, 1.25)),
            "head_ratio": float(rng.uniform(0.8, 1.3)),
            "backpack": bool(rng.random() < 0.5),
            "hat": bool(rng.random() < 0.5),
            "front_colors": {p: [float(c) for c in v] for p, v in front.items()},
            "back_colors": {p: [float(c) for c in v] for p, v in back.items()},
            "accent": [float(c) for c in colorsys.hsv_to_rgb(rng.random(), 0.9, 0.95)],
        }

    def to_dict(self) -> dict:
        return {"seed": self.seed, "signature": self.signature}


def _part_layout(sig: dict) -> dict[str, tuple[np.ndarray, np.ndarray, int]]:
    """Part name -> (center, half-extents, gaussian count) in the subject frame."""
    h, gth, hr = sig["height"], sig["girth"], sig["head_ratio"]
    head_r = 0.11 * hr
    return {
        "torso": (np.array([0.0, -0.62 * h, 0.0]), np.array([0.19 * gth, 0.2 * h, 0.12 * gth]), 40),
        "head": (np.array([0.0, -0.88 * h, 0.0]), np.array([head_r, head_r * 1.15, head_r]), 20),
        "arm_l": (np.array([-0.27 * gth, -0.62 * h, 0.0]), np.array([0.05, 0.18 * h, 0.05]), 10),
        "arm_r": (np.array([0.27 * gth, -0.62 * h, 0.0]), np.array([0.05, 0.18 * h, 0.05]), 10),
        "leg_l": (np.array([-0.09 * gth, -0.22 * h, 0.0]), np.array([0.07, 0.21 * h, 0.07]), 12),
        "leg_r": (np.array([0.09 * gth, -0.22 * h, 0.0]), np.array([0.07, 0.21 * h, 0.07]), 12),
    }


def motion_params(motion_seed: int) -> dict:
    rng = np.random.default_rng([9001, motion_seed])
    kind = MOTIONS[int(rng.integers(len(MOTIONS)))]
    amp = {"bobbing": (0.06, 0.0, 0.0), "turning": (0.0, 0.45, 0.0), "swaying": (0.0, 0.0, 0.12),
           "standing": (0.0, 0.0, 0.0)}[kind]
    return {
        "kind": kind,
        "bob": amp[0] * rng.uniform(0.7, 1.3),
        "yaw": amp[1] * rng.uniform(0.7, 1.3),
        "sway": amp[2] * rng.uniform(0.7, 1.3),
        "cycles": float(rng.uniform(0.75, 1.5)),
        "phase": float(rng.uniform(0, 2 * math.pi)),
    }


def make_subject(identity: IdentityDescriptor, motion_seed: int, frames: int, subject_id: int = 1) -> list[Gaussian4D]:
    """Subject-labeled Gaussian cluster with periodic motion, centered at the origin."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    sig = identity.signature
    rng = np.random.default_rng([4242, identity.seed])
    local, colors, scales = [], [], []
    for part, (center, half, count) in _part_layout(sig).items():
        pts = rng.normal(size=(count, 3))
        pts /= np.maximum(np.linalg.norm(pts, axis=1, keepdims=True), 1e-9)
        pts *= rng.random((count, 1)) ** (1 / 3) * 0.8
        pts = center + pts * half
        for p in pts:
            side = "front_colors" if p[2] <= 0 else "back_colors"
            colors.append(np.clip(np.array(sig[side][part]) + rng.normal(0, 0.03, 3), 0, 1))
            local.append(p)
            scales.append(np.clip(half.mean() * rng.uniform(0.35, 0.55, 3), 0.02, 0.2))
    h = sig["height"]
    if sig["backpack"]:
        for _ in range(14):
            local.append(np.array([0.0, -0.62 * h, 0.17]) + rng.normal(0, [0.08, 0.09, 0.03]))
            colors.append(np.array(sig["accent"]))
            scales.append(np.full(3, 0.06))
    if sig["hat"]:
        for _ in range(8):
            local.append(np.array([0.0, -0.9 * h - 0.14 * sig["head_ratio"], -0.02]) + rng.normal(0, [0.07, 0.02, 0.07]))
            colors.append(0.6 * np.array(sig["accent"]))
            scales.append(np.array([0.07, 0.03, 0.07]))
    local = np.array(local)
    mp = motion_params(motion_seed)
    if frames == 1:
        tracks = local[:, None, :]
    else:
        tau = np.arange(frames) / frames
        ang = 2 * math.pi * mp["cycles"] * tau + mp["phase"]
        yaw = mp["yaw"] * np.sin(ang)
        bob = mp["bob"] * np.sin(2 * ang)
        sway = mp["sway"] * np.sin(ang)
        c, s = np.cos(yaw), np.sin(yaw)
        x = c[None] * local[:, 0:1] + s[None] * local[:, 2:3] + sway[None] * (-local[:, 1:2] / h)
        z = -s[None] * local[:, 0:1] + c[None] * local[:, 2:3]
        y = local[:, 1:2] - bob[None] * (-local[:, 1:2] / h)
        tracks = np.stack([x, y, z], -1)
    return [Gaussian4D(tracks[i], scales[i], (1.0, 0.0, 0.0, 0.0), colors[i], 0.9, subject_id)
            for i in range(len(local))]


def subject_footprint_center(gaussians: list[Gaussian4D]) -> np.ndarray:
    return np.mean([g.center_track[0] for g in gaussians], axis=0)


def shift_gaussians(gaussians: list[Gaussian4D], offset: np.ndarray) -> list[Gaussian4D]:
    return [Gaussian4D(g.center_track + offset, g.scale, g.rotation, g.color, g.opacity, g.subject_id)
            for g in gaussians]


def background_gaussians(background_seed: int, setting: str | None = None) -> tuple[list[Gaussian4D], tuple, str]:
    """Static scene dressing: a tiled floor plus distant props."""
    rng = np.random.default_rng([5150, background_seed])
    if setting is None:
        setting = SETTINGS[int(rng.integers(len(SETTINGS)))]
    palettes = {
        "studio": ((0.82, 0.82, 0.80), (0.45, 0.45, 0.47), 0),
        "room": ((0.70, 0.62, 0.52), (0.45, 0.32, 0.22), 6),
        "garden": ((0.55, 0.75, 0.92), (0.25, 0.48, 0.20), 8),
        "street": ((0.60, 0.66, 0.72), (0.30, 0.30, 0.33), 8),
        "probe": ((0.50, 0.55, 0.65), (0.35, 0.30, 0.28), 14),
    }
    bg, floor, n_props = palettes[setting]
    out = []
    tile = 1.5
    for ix in range(-8, 8):
        for iz in range(-8, 8):
            c = np.clip(np.array(floor) + rng.normal(0, 0.04 if setting != "probe" else 0.12, 3), 0, 1)
            if setting == "probe" and (ix + iz) % 2:
                c = np.clip(1.0 - c, 0, 1)
            p = np.array([(ix + 0.5) * tile, 0.02, (iz + 0.5) * tile])
            out.append(Gaussian4D([p], (tile * 0.4, 0.01, tile * 0.4), (1, 0, 0, 0), c, 0.95, 0))
    for _ in range(n_props):
        ang = rng.uniform(0, 2 * math.pi)
        rad = rng.uniform(11.0, 14.0)
        size = rng.uniform(0.8, 2.0)
        p = np.array([rad * math.sin(ang), -size, rad * math.cos(ang)])
        c = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.4, 0.9), rng.uniform(0.5, 0.95)))
        out.append(Gaussian4D([p], (size * 0.6, size, size * 0.6), (1, 0, 0, 0), c, 0.95, 0))
    return out, bg, setting


def make_scene(subjects: list[list[Gaussian4D]], background_seed: int, lighting: LightingParams | None = None,
               setting: str | None = None, registry: dict | None = None, frames: int | None = None,
               spacing: float = 1.2) -> Scene:
    """Place subjects side by side (>= 0.5 m apart) on a procedural background."""
    bg_gauss, bg_color, setting = background_gaussians(background_seed, setting)
    rng = np.random.default_rng([777, background_seed])
    placed = []
    n = len(subjects)
    anchors = []
    for i, gs in enumerate(subjects):
        c = subject_footprint_center(gs)
        x = (i - (n - 1) / 2) * spacing + (rng.uniform(-0.1, 0.1) if n > 1 else 0.0)
        anchors.append(np.array([x, 0.0, rng.uniform(-0.1, 0.1) if n > 1 else 0.0]) - np.array([c[0], 0.0, c[2]]))
    anchors = _separate([subject_footprint_center(gs) + a for gs, a in zip(subjects, anchors)], anchors)
    for gs, a in zip(subjects, anchors):
        placed.extend(shift_gaussians(gs, a))
    if frames is None:
        frames = max([g.center_track.shape[0] for g in placed] + [1])
    reg = registry or {}
    reg = {int(k): v for k, v in reg.items()}
    for i, gs in enumerate(subjects):
        if gs:
            reg.setdefault(gs[0].subject_id, {"slot": i})
    return Scene(bg_gauss + placed, bg_color, lighting or LightingParams(), reg, frames, setting)


def _separate(centers: list[np.ndarray], anchors: list[np.ndarray], min_dist: float = 0.5) -> list[np.ndarray]:
    centers = [c.copy() for c in centers]
    anchors = [a.copy() for a in anchors]
    for _ in range(100):
        moved = False
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                d = centers[j] - centers[i]
                d[1] = 0.0
                dist = np.linalg.norm(d)
                if dist < min_dist:
                    direction = d / dist if dist > 1e-9 else np.array([1.0, 0.0, 0.0])
                    push = 0.5 * (min_dist - dist) + 1e-3
                    for k, sgn in ((i, -1.0), (j, 1.0)):
                        centers[k] += sgn * push * direction
                        anchors[k] += sgn * push * direction
                    moved = True
        if not moved:
            break
    return anchors


def subject_centers(scene: Scene, time: int = 0) -> dict[int, np.ndarray]:
    packed = scene.packed(time)
    return {sid: packed.means[packed.subject_ids == sid].mean(axis=0) for sid in scene.subject_ids}


def relight_augment(scene: Scene, light_seed: int) -> Scene:
    """Copy of ``scene`` under a randomly drawn lighting setup; geometry untouched."""
    rng = np.random.default_rng([2718, light_seed])
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    lighting = LightingParams(float(rng.uniform(0.4, 1.6)), tuple(float(v) for v in rng.uniform(0.7, 1.3, 3)),
                              tuple(float(v) for v in d), float(rng.uniform(0.0, 0.8)))
    return scene.replace(lighting=lighting)


def lighting_word(lighting: LightingParams) -> str | None:
    if lighting.is_identity:
        return None
    if lighting.gain > 1.15:
        return "bright"
    if lighting.gain < 0.85:
        return "dim"
    r, _, b = lighting.tint
    return "warm" if r >= b else "cool"


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    entries: list[dict] = field(default_factory=list)
    references: dict[int, list[dict]] = field(default_factory=dict)
    subjects: dict[int, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    root: Path | None = None

    def to_json(self) -> dict:
        return {"entries": self.entries, "references": {str(k): v for k, v in self.references.items()},
                "subjects": {str(k): v for k, v in self.subjects.items()}, "meta": self.meta}

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        obj = read_json(path)
        return cls(obj["entries"], {int(k): v for k, v in obj.get("references", {}).items()},
                   {int(k): v for k, v in obj.get("subjects", {}).items()}, obj.get("meta", {}), Path(path).parent)

    def path(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def split(self, tag: str) -> list[dict]:
        return [e for e in self.entries if e.get("split") == tag]


def trajectory_config(cfg: DataConfig, look_at=(0.0, 0.0, 0.0), azimuth_range=None, static=None) -> TrajectoryConfig:
    return TrajectoryConfig(frames=cfg.frames, r_min=cfg.r_min, r_max=cfg.r_max,
                            azimuth_range=tuple(azimuth_range or ((-30.0, 30.0) if cfg.frontal_only else cfg.azimuth_range)),
                            elevation_range=tuple(cfg.elevation_range), look_at=tuple(float(v) for v in look_at),
                            static=cfg.static_cameras if static is None else static,
                            width=cfg.resolution, height=cfg.resolution, fov_deg=cfg.fov_deg)


def subject_prompt(token: str, motion: str, setting: str = STUDIO, light: str | None = None) -> list[str]:
    words = ["a", token, motion, "in", setting]
    return words + [light] if light else words


def _write_entry(out: Path, name: str, scene: Scene, traj: Trajectory, prompt: list[str], subject_ids: list[int],
                 lighting_tag: str, split: str, extra: dict | None = None) -> dict:
    video, masks = render_video(scene, traj)
    vdir, mdir, cam = f"videos/{name}", f"masks/{name}", f"cameras/{name}.json"
    write_frames(video, out / vdir)
    write_masks(masks, out / mdir)
    traj.save(out / cam)
    entry = {"name": name, "video_dir": vdir, "camera_file": cam, "mask_dir": mdir, "prompt_tokens": prompt,
             "subject_ids": subject_ids, "lighting_tag": lighting_tag, "split": split}
    entry.update(extra or {})
    return entry


def reference_poses(cfg: DataConfig, look_at: np.ndarray, n: int = 10, radius: float = 4.0,
                    elevation: float = 10.0) -> list:
    fx, fy, cx, cy = intrinsics_for(cfg.resolution, cfg.resolution, cfg.fov_deg)
    out = []
    for k in range(n):
        az = -180.0 + 360.0 * k / n
        out.append(pose_from_center(look_at + spherical_offset(radius, az, elevation), look_at,
                                    fx, fy, cx, cy, cfg.resolution, cfg.resolution))
    return out


def _run_entries(jobs, n_jobs: int):
    if n_jobs == 1:
        return [fn(*args) for fn, args in jobs]
    from joblib import Parallel, delayed
    return Parallel(n_jobs=n_jobs)(delayed(fn)(*args) for fn, args in jobs)


def _subject_video(out, name, ident, sid, motion_seed, bg_seed, traj_seed, cfg, light_seed, split, token):
    gs = make_subject(ident, motion_seed, cfg.frames, subject_id=sid)
    scene = make_scene([gs], bg_seed, setting=STUDIO, registry={sid: ident.to_dict()}, frames=cfg.frames)
    if light_seed is not None:
        scene = relight_augment(scene, light_seed)
    anchor = subject_centers(scene)[sid]
    traj = sample_trajectory(traj_seed, trajectory_config(cfg, anchor))
    motion = motion_params(motion_seed)["kind"]
    light = lighting_word(scene.lighting)
    return _write_entry(out, name, scene, traj, subject_prompt(token, motion, STUDIO, light), [sid],
                        light or "default", split, {"motion_seed": motion_seed})


def _joint_video(out, name, idents, motion_seeds, bg_seed, traj_seed, cfg, tokens):
    subs = [make_subject(ident, ms, cfg.frames, subject_id=sid)
            for sid, (ident, ms) in enumerate(zip(idents, motion_seeds), start=1)]
    scene = make_scene(subs, bg_seed, setting=STUDIO, frames=cfg.frames,
                       registry={sid: ident.to_dict() for sid, ident in enumerate(idents, start=1)})
    centers = subject_centers(scene)
    anchor = np.mean([centers[s] for s in sorted(centers)], axis=0)
    traj = sample_trajectory(traj_seed, trajectory_config(cfg, anchor))
    prompt = ["a", tokens[0]]
    for tok in tokens[1:]:
        prompt += ["and", "a", tok]
    prompt += ["in", STUDIO]
    return _write_entry(out, name, scene, traj, prompt, list(range(1, len(idents) + 1)), "default", "train")


def subject_token(sid: int) -> str:
    return f"SUBJ_{sid}"


def build_dataset(subjects: list[IdentityDescriptor], config: DataConfig, master_seed: int, out_dir: str | Path,
                  n_jobs: int = 1) -> DatasetManifest:
    """Render the customization set for ``subjects`` (ids 1..K) and write ``manifest.json``."""
    if not subjects:
        raise ValueError("need at least one subject")
    out = Path(out_dir)
    created = not out.exists()
    try:
        out.mkdir(parents=True, exist_ok=True)
        jobs = []
        studio_seed = derive_seed(master_seed, "studio", 0)
        for sid, ident in enumerate(subjects, start=1):
            token = subject_token(sid)
            motion_seeds = [derive_seed(master_seed, f"motion/{sid}", s) for s in range(config.sequences_per_subject)]
            for v in range(config.videos_per_subject):
                jobs.append((_subject_video, (out, f"s{sid}_v{v:03d}", ident, sid,
                                              motion_seeds[v % len(motion_seeds)], studio_seed,
                                              derive_seed(master_seed, f"traj/{sid}", v), config, None, "train", token)))
            for v in range(config.relit_per_subject):
                jobs.append((_subject_video, (out, f"s{sid}_relit{v:03d}", ident, sid,
                                              motion_seeds[v % len(motion_seeds)], studio_seed,
                                              derive_seed(master_seed, f"traj-relit/{sid}", v), config,
                                              derive_seed(master_seed, f"light/{sid}", v), "train", token)))
        if len(subjects) >= 2 and config.joint_videos > 0:
            for v in range(config.joint_videos):
                ms = [derive_seed(master_seed, f"motion/{sid}", v % config.sequences_per_subject)
                      for sid in range(1, len(subjects) + 1)]
                jobs.append((_joint_video, (out, f"joint_v{v:03d}", subjects, ms, studio_seed,
                                            derive_seed(master_seed, "traj/joint", v), config,
                                            [subject_token(s) for s in range(1, len(subjects) + 1)])))
        entries = _run_entries(jobs, n_jobs)
        references = {}
        for sid, ident in enumerate(subjects, start=1):
            gs = make_subject(ident, derive_seed(master_seed, f"motion/{sid}", 0), config.frames, subject_id=sid)
            scene = make_scene([gs], studio_seed, setting=STUDIO, frames=config.frames)
            anchor = subject_centers(scene)[sid]
            refs = []
            for k, pose in enumerate(reference_poses(config, anchor, config.reference_views)):
                rel = f"references/subject_{sid}/ref_{k:02d}.png"
                write_frames(render_frame(scene, pose, 0)[None], out / "tmp_ref")
                (out / rel).parent.mkdir(parents=True, exist_ok=True)
                shutil.move(str(out / "tmp_ref" / "frame_00000.png"), str(out / rel))
                refs.append({"image": rel, "camera": pose.to_dict(), "split": "ref"})
            references[sid] = refs
        shutil.rmtree(out / "tmp_ref", ignore_errors=True)
        manifest = DatasetManifest(entries, references, {sid: ident.to_dict() for sid, ident in enumerate(subjects, 1)},
                                   {"master_seed": master_seed, "config": config.model_dump(mode="json"),
                                    "kind": "customization"}, out)
        manifest.save(out / "manifest.json")
        return manifest
    except OSError:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise


def probe_scene(master_seed: int, frames: int) -> Scene:
    """Static, richly textured scene bound to the SCENE_1 token for camera evaluation."""
    return make_scene([], derive_seed(master_seed, "probe", 0), setting="probe", frames=frames)


def _general_video(out, name, kind, seed, cfg, master_seed):
    rng = np.random.default_rng([31337, seed])
    frames = cfg.frames
    if kind == "probe":
        scene = probe_scene(master_seed, frames)
        anchor = np.array([0.0, -0.8, 0.0])
        prompt = ["a", "SCENE_1", "scene"]
        sids = []
    else:
        setting = SETTINGS[int(rng.integers(len(SETTINGS)))]
        n_people = {"scene": 0, "person": 1, "pair": 2}[kind]
        subs, motions = [], []
        for k in range(n_people):
            ident = IdentityDescriptor(int(rng.integers(10_000, 2 ** 31)))
            ms = int(rng.integers(0, 2 ** 31))
            subs.append(make_subject(ident, ms, frames, subject_id=k + 1))
            motions.append(motion_params(ms)["kind"])
        scene = make_scene(subs, int(rng.integers(0, 2 ** 31)), setting=setting, frames=frames)
        if rng.random() < 0.25:
            scene = relight_augment(scene, int(rng.integers(0, 2 ** 31)))
        centers = subject_centers(scene)
        anchor = np.mean(list(centers.values()), axis=0) if centers else np.array([0.0, -0.8, 0.0])
        if n_people == 0:
            prompt = ["a", setting, "scene"]
        elif n_people == 1:
            prompt = ["a", "person", motions[0], "in", setting]
        else:
            prompt = ["a", "person", "and", "a", "person", "in", setting]
        light = lighting_word(scene.lighting)
        if light:
            prompt.append(light)
        sids = []
    traj = sample_trajectory(int(rng.integers(0, 2 ** 31)), trajectory_config(cfg, anchor, static=False))
    return _write_entry(out, name, scene, traj, prompt, sids, lighting_word(scene.lighting) or "default", "train",
                        {"kind": kind})


def build_general_dataset(config: DataConfig, master_seed: int, out_dir: str | Path, n_jobs: int = 1) -> DatasetManifest:
    """Camera-annotated pretraining set: generic people, empty settings, pairs, and the probe scene.

    No entry carries a subject identity token; probe-scene clips carry SCENE_1.
    """
    out = Path(out_dir)
    created = not out.exists()
    kinds = ["person"] * 6 + ["pair"] * 2 + ["scene"] * 2
    try:
        out.mkdir(parents=True, exist_ok=True)
        jobs = []
        for v in range(config.general_videos):
            jobs.append((_general_video, (out, f"g{v:04d}", kinds[v % len(kinds)],
                                          derive_seed(master_seed, "general", v), config, master_seed)))
        for v in range(config.probe_videos):
            jobs.append((_general_video, (out, f"probe{v:04d}", "probe",
                                          derive_seed(master_seed, "probe-video", v), config, master_seed)))
        entries = _run_entries(jobs, n_jobs)
        probe_scene(master_seed, config.frames).save(out / "probe_scene.json")
        manifest = DatasetManifest(entries, {}, {}, {"master_seed": master_seed, "config": config.model_dump(mode="json"),
                                                     "kind": "general", "probe_scene": "probe_scene.json"}, out)
        manifest.save(out / "manifest.json")
        return manifest
    except OSError:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise
