"""Identity, temporal-consistency and camera-steerability metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from camid.camera import PoseErrors, Trajectory, pose_error
from camid.harness.embedder import IdentityEmbedder, crops_for, embed_crops, render_crops, resize_frames
from camid.splat.pose import estimate_pose
from camid.splat.scene import Scene


@dataclass
class IdentityScore:
    score: float
    frames_used: int
    defined: bool
    per_frame: list[float] = field(default_factory=list)


def aggregate_references(similarities) -> float:
    """Frame score: best match over the reference set."""
    return float(np.max(np.asarray(similarities, dtype=np.float64)))


def reference_embeddings(embedder: IdentityEmbedder, references: np.ndarray) -> np.ndarray:
    crops, keep = crops_for(references, min_area=0.0)
    return embed_crops(embedder, crops)


def identity_score(embedder: IdentityEmbedder, video: np.ndarray, references: np.ndarray,
                   masks: np.ndarray | None = None, ref_embeddings: np.ndarray | None = None) -> IdentityScore:
    """Mean over frames (with the subject visible) of the max cosine similarity to any reference.

    ``video`` is ``(T, H, W, 3)`` in [0, 1]; ``masks`` optionally restricts each
    frame to a region, otherwise the segmentation oracle's foreground is used.
    Frames whose mask covers < 1% of the image are skipped.
    """
    refs = reference_embeddings(embedder, references) if ref_embeddings is None else ref_embeddings
    crops, keep = crops_for(video, masks)
    if not keep:
        return IdentityScore(float("nan"), 0, False)
    sims = embed_crops(embedder, crops) @ refs.T
    per = [aggregate_references(row) for row in sims]
    return IdentityScore(float(np.mean(per)), len(keep), True, per)


@torch.no_grad()
def temporal_consistency(embedder: IdentityEmbedder, video: np.ndarray) -> float:
    """Mean cosine similarity of whole-frame descriptors of consecutive frames."""
    video = np.asarray(video)
    if len(video) < 2:
        raise ValueError("temporal consistency needs at least two frames")
    d = embedder.frame_descriptor(resize_frames(video)).numpy().astype(np.float64)
    return float(np.mean(np.sum(d[1:] * d[:-1], axis=1)))


def embedder_margin(embedder: IdentityEmbedder, subject_seeds: list[int], references: list[np.ndarray],
                    seed: int, views: int = 12) -> dict:
    """Intra- vs inter-subject mean identity score on held-out GT renders."""
    crops, labels = render_crops(subject_seeds, views, seed)
    emb = embed_crops(embedder, crops)
    refs = [reference_embeddings(embedder, r) for r in references]
    scores = np.array([[aggregate_references(e @ r.T) for r in refs] for e in emb])  # (n, K)
    K = len(subject_seeds)
    intra = float(np.mean([scores[i, labels[i]] for i in range(len(labels))]))
    inter = float(np.mean([scores[i, k] for i in range(len(labels)) for k in range(K) if k != labels[i]])) \
        if K > 1 else float("nan")
    return {"intra": intra, "inter": inter, "margin": intra - inter if K > 1 else float("nan")}


@dataclass
class CameraReport:
    trans_err: float
    rot_err: float
    flagged: bool
    nonconverged_fraction: float
    per_trajectory: list[dict] = field(default_factory=list)


def estimate_trajectory(video: np.ndarray, scene: Scene, requested: Trajectory, max_iters: int = 40,
                        tol: float = 0.02) -> tuple[Trajectory, int]:
    """Per-frame pose fit against the known scene, initialized at the requested poses."""
    poses, misses = [], 0
    for frame, init in zip(video, requested.poses):
        est = estimate_pose(np.asarray(frame, dtype=np.float64), scene, 0, init, max_iters=max_iters, tol=tol)
        poses.append(est.pose)
        misses += int(not est.converged)
    return Trajectory(poses), misses


def camera_errors(videos: list[np.ndarray], scene: Scene, trajectories: list[Trajectory], max_iters: int = 40,
                  tol: float = 0.02) -> CameraReport:
    rows, total, misses = [], 0, 0
    for video, traj in zip(videos, trajectories):
        est, m = estimate_trajectory(video, scene, traj, max_iters, tol)
        err: PoseErrors = pose_error(est, traj)
        rows.append({"trans_err": err.trans_err, "rot_err": err.rot_err, "nonconverged": m})
        total += len(traj)
        misses += m
    frac = misses / total if total else 0.0
    return CameraReport(float(np.mean([r["trans_err"] for r in rows])), float(np.mean([r["rot_err"] for r in rows])),
                        frac > 0.25, frac, rows)


def camera_metrics(model, branch, words: list[str], trajectories: list[Trajectory], scene: Scene, steps: int,
                   seeds: list[int], adapters=None, max_iters: int = 40, tol: float = 0.02,
                   videos_out: list | None = None) -> CameraReport:
    """Probe-scene protocol: generate along each trajectory, then recover the poses against the scene."""
    from camid.dit import to_unit_range
    from camid.pipeline import generate
    videos = []
    for traj, seed in zip(trajectories, seeds):
        videos.append(to_unit_range(generate(model, branch, words, traj, steps, seed, adapters)[0]))
    if videos_out is not None:
        videos_out.extend(videos)
    return camera_errors(videos, scene, trajectories, max_iters, tol)
