"""Multi-subject composition by mask-weighted blending of per-subject denoising steps."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from camid.camctrl import GATE_FRACTION, ControlBranch, make_control
from camid.camera import Trajectory
from camid.config_io import read_json, write_json
from camid.customize import AdapterSet, attach, detach
from camid.dit import VideoDiT, initial_noise, is_identity_token, step_times, to_unit_range
from camid.pipeline import camera_tokens, generate, prompt_ids, warmup_steps


class SegmentationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# segmentation oracle
# ---------------------------------------------------------------------------

def foreground_mask(video: np.ndarray, sat_thresh: float = 0.3, min_value: float = 0.08) -> np.ndarray:
    """Subject pixels of ``(T, H, W, 3)`` frames in [0, 1].

    Scene dressing is near-neutral while subjects are saturated, so after a
    gray-world white balance (the frame median is mostly background) a
    relative-saturation threshold separates them, whatever the global tint.
    """
    v = np.asarray(video, dtype=np.float64)
    med = np.median(v.reshape(v.shape[0], -1, 3), axis=1)  # (T, 3)
    wb = v / np.maximum(med / med.mean(axis=1, keepdims=True), 1e-3)[:, None, None, :]
    mx, mn = wb.max(-1), wb.min(-1)
    fg = ((mx - mn) / (mx + 1e-3) > sat_thresh) & (mx > min_value)
    # drop isolated specks frame by frame
    return np.stack([ndimage.binary_opening(f, structure=np.ones((2, 2))) | _keep_large(f) for f in fg])


def _keep_large(f: np.ndarray, min_size: int = 6) -> np.ndarray:
    lab, n = ndimage.label(f)
    if n == 0:
        return f
    sizes = ndimage.sum(f, lab, index=np.arange(1, n + 1))
    return np.isin(lab, 1 + np.nonzero(sizes >= min_size)[0])


def _kmeans_1d(x: np.ndarray, k: int, iters: int = 25) -> np.ndarray:
    centers = np.quantile(x, (np.arange(k) + 0.5) / k)
    for _ in range(iters):
        lab = np.argmin(np.abs(x[:, None] - centers[None]), axis=1)
        new = np.array([x[lab == j].mean() if np.any(lab == j) else centers[j] for j in range(k)])
        if np.allclose(new, centers):
            break
        centers = new
    order = np.argsort(centers, kind="stable")
    rank = np.empty(k, dtype=np.int64)
    rank[order] = np.arange(k)
    return rank[np.argmin(np.abs(x[:, None] - centers[None]), axis=1)]


def segment_subjects(video: np.ndarray, n_slots: int) -> np.ndarray:
    """Boolean ``(n_slots, T, H, W)`` masks; slots are ordered left to right in each frame."""
    fg = foreground_mask(video)
    out = np.zeros((n_slots,) + fg.shape, dtype=bool)
    for t, f in enumerate(fg):
        ys, xs = np.nonzero(f)
        if len(xs) == 0:
            continue
        lab = _kmeans_1d(xs.astype(np.float64), n_slots) if n_slots > 1 else np.zeros(len(xs), dtype=np.int64)
        out[lab, t, ys, xs] = True
    return out


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def complete_masks(raw: np.ndarray) -> np.ndarray:
    """Assign every pixel to the region whose nearest pixel is closest in (t, y, x).

    ``raw`` is a boolean ``(K, T, H, W)`` stack; returns one-hot float weights.
    Ties go to the lowest region index.
    """
    raw = np.asarray(raw, dtype=bool)
    if not raw.any():
        raise SegmentationError("all masks are empty")
    dist = np.full(raw.shape, np.inf)
    for k in range(raw.shape[0]):
        if raw[k].any():
            dist[k] = ndimage.distance_transform_edt(~raw[k], sampling=(1.0, 1.0, 1.0))
    owner = np.argmin(dist, axis=0)  # first minimum = lowest index
    onehot = np.zeros(raw.shape, dtype=np.float64)
    for k in range(raw.shape[0]):
        onehot[k][owner == k] = 1.0
    return onehot


def masks_to_tokens(masks: np.ndarray, pt: int, ps: int) -> np.ndarray:
    """Area-average ``(K, T, H, W)`` weights onto the token grid and renormalize per token."""
    K, T, H, W = masks.shape
    m = masks.reshape(K, T // pt, pt, H // ps, ps, W // ps, ps).mean(axis=(2, 4, 6))
    total = m.sum(axis=0, keepdims=True)
    if np.any(total <= 0):
        raise SegmentationError("masks do not cover every token")
    return m / total


def tokens_to_pixels(tok: np.ndarray, pt: int, ps: int) -> np.ndarray:
    return tok.repeat(pt, axis=1).repeat(ps, axis=2).repeat(ps, axis=3)


# ---------------------------------------------------------------------------
# plan and sampling
# ---------------------------------------------------------------------------

def subject_prompts(generic: Sequence[str], tokens: Sequence[str], placeholder: str = "person") -> list[list[str]]:
    """Per-subject prompts: only the k-th placeholder is replaced by subject k's token."""
    slots = [i for i, w in enumerate(generic) if w == placeholder]
    if len(slots) < len(tokens):
        raise ValueError(f"generic prompt describes {len(slots)} subjects, {len(tokens)} tokens given")
    out = []
    for k, tok in enumerate(tokens):
        words = list(generic)
        words[slots[k]] = tok
        out.append(words)
    return out


@dataclass
class BlendPlan:
    generic_prompt: list[str]
    prompts: list[list[str]]
    seed: int
    steps: int = 50
    warmup_fraction: float = 0.10
    base: str = ""
    branch: str = ""
    adapters: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if any(is_identity_token(w) for w in self.generic_prompt):
            raise ValueError("the generic layout prompt must not contain identity tokens")

    def to_dict(self) -> dict:
        return {"generic_prompt": self.generic_prompt, "prompts": self.prompts, "seed": self.seed,
                "steps": self.steps, "warmup_fraction": self.warmup_fraction, "base": self.base,
                "branch": self.branch, "adapters": self.adapters}

    @classmethod
    def from_dict(cls, d: dict) -> "BlendPlan":
        return cls(list(d["generic_prompt"]), [list(p) for p in d["prompts"]], int(d["seed"]), int(d.get("steps", 50)),
                   float(d.get("warmup_fraction", 0.10)), d.get("base", ""), d.get("branch", ""),
                   list(d.get("adapters", [])))

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "BlendPlan":
        return cls.from_dict(read_json(path))


def layout_pass(model: VideoDiT, branch: ControlBranch | None, plan: BlendPlan, traj: Trajectory | None,
                n_slots: int | None = None) -> tuple[torch.Tensor, np.ndarray]:
    """Uncustomized camera-conditioned sample plus raw per-slot masks from the segmentation oracle."""
    plan.validate()
    n = len(plan.prompts) if n_slots is None else n_slots
    video = generate(model, branch, plan.generic_prompt, traj, plan.steps, plan.seed)
    raw = segment_subjects(to_unit_range(video[0]), n)
    empty = [k for k in range(n) if not raw[k].any()]
    if empty:
        raise SegmentationError(f"empty segmentation for subject slot(s) {empty}")
    return video, raw


@torch.no_grad()
def blended_sample(model: VideoDiT, branch: ControlBranch | None, plan: BlendPlan, adapters: list[AdapterSet],
                   masks: np.ndarray, traj: Trajectory | None, gate_fraction: float = GATE_FRACTION) -> torch.Tensor:
    """``z <- z_1 + sum_{k>=2} M_k (z_k - z_1)``, i.e. the mask-weighted sum of per-subject Euler steps."""
    plan.validate()
    if len(adapters) != len(plan.prompts) or len(masks) != len(adapters):
        raise ValueError("need one adapter set, prompt and mask per subject")
    if len({a.base_hash for a in adapters}) != 1:
        raise ValueError("adapter sets were trained against different base checkpoints")
    cfg = model.cfg
    tok = masks_to_tokens(np.asarray(masks, dtype=np.float64), cfg.tpatch, cfg.patch)
    weights = torch.from_numpy(tokens_to_pixels(tok, cfg.tpatch, cfg.patch).astype(np.float32))[:, None, ..., None]
    control_for = make_control(branch, camera_tokens(model, branch, traj), gate_fraction)
    generic = prompt_ids(model, plan.generic_prompt)
    ids = [prompt_ids(model, p) for p in plan.prompts]
    warm = warmup_steps(plan.steps, plan.warmup_fraction)
    times = step_times(plan.steps)
    z = initial_noise(cfg, plan.seed)
    for i in range(plan.steps):
        s, s_next = times[i], times[i + 1]
        ctrl = control_for(s) if control_for is not None else None
        s_t = torch.full((1,), s, dtype=z.dtype)
        if i < warm:
            z = z + (s_next - s) * model(z, s_t, generic, ctrl)
            continue
        nxt = []
        for a, p in zip(adapters, ids):
            attach(model, a)
            try:
                nxt.append(z + (s_next - s) * model(z, s_t, p, ctrl))
            finally:
                detach(model)
        z = nxt[0]
        for k in range(1, len(nxt)):
            z = z + weights[k] * (nxt[k] - nxt[0])
    return z.clamp(-1.0, 1.0)
