"""Tiny convolutional identity embedder trained on synthetic renders."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from camid.blend import foreground_mask
from camid.camera import intrinsics_for, pose_from_center, spherical_offset
from camid.config_io import derive_seed, load_tensors, read_json, save_tensors, write_json
from camid.scenegen import IdentityDescriptor, STUDIO, make_scene, make_subject, relight_augment, subject_centers
from camid.splat.render import render_frame_with_masks

log = logging.getLogger(__name__)

CROP = 32
MASK_FILL = 0.5


class EmbedderInvalid(RuntimeError):
    """Identity metrics refuse to run with an embedder that fails validation."""


class IdentityEmbedder(nn.Module):
    def __init__(self, n_subjects: int, dim: int = 64):
        super().__init__()
        chans = [3, 16, 32, 64, 64]
        stages = []
        for a, b in zip(chans[:-1], chans[1:]):
            stages.append(nn.Sequential(nn.Conv2d(a, b, 3, padding=1), nn.BatchNorm2d(b), nn.SiLU(),
                                        nn.Conv2d(b, b, 3, padding=1, stride=2), nn.BatchNorm2d(b), nn.SiLU()))
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(64 * (CROP // 16) ** 2, dim)
        # one class per registered subject plus "other" (background, generic people)
        self.n_classes = n_subjects + 1
        self.classifier = nn.Parameter(torch.randn(self.n_classes, dim) * 0.1)
        self.logit_scale = 10.0

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        h = (x - 0.5) / 0.25
        for st in self.stages:
            h = st(h)
            out.append(h)
        return out

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)[-1]
        return F.normalize(self.head(h.flatten(1)), dim=-1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.logit_scale * self.embed(x) @ F.normalize(self.classifier, dim=-1).T

    def frame_descriptor(self, frames: torch.Tensor) -> torch.Tensor:
        """Whole-frame descriptor: centered, flattened mid-level feature maps, unit norm."""
        h = self.features(frames)[1].flatten(1)
        return F.normalize(h - h.mean(dim=1, keepdim=True), dim=-1)


def prepare_crop(frame: np.ndarray, mask: np.ndarray | None, size: int = CROP, margin: int = 2) -> np.ndarray:
    """Square crop around the mask support with outside pixels set to gray, resized to ``size``."""
    img = np.asarray(frame, dtype=np.float32)
    if mask is not None:
        m = np.asarray(mask) > 0.5
        ys, xs = np.nonzero(m)
        img = np.where(m[..., None], img, MASK_FILL).astype(np.float32)
        H, W = m.shape
        cy, cx = (ys.min() + ys.max()) / 2.0, (xs.min() + xs.max()) / 2.0
        half = max(ys.max() - ys.min(), xs.max() - xs.min()) / 2.0 + margin
        y0, y1 = int(np.floor(cy - half)), int(np.ceil(cy + half)) + 1
        x0, x1 = int(np.floor(cx - half)), int(np.ceil(cx + half)) + 1
        pad = max(0, -y0, -x0, y1 - H, x1 - W)
        if pad:
            img = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), constant_values=MASK_FILL)
            y0, y1, x0, x1 = y0 + pad, y1 + pad, x0 + pad, x1 + pad
        img = img[y0:y1, x0:x1]
    t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return t[0].numpy()


def resize_frames(video: np.ndarray, size: int = CROP) -> torch.Tensor:
    t = torch.from_numpy(np.asarray(video, dtype=np.float32)).permute(0, 3, 1, 2)
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------

def _random_pose(rng: np.random.Generator, look_at: np.ndarray, res: int, fov: float, az_range=(-180.0, 180.0)):
    fx, fy, cx, cy = intrinsics_for(res, res, fov)
    r = rng.uniform(2.5, 7.0)
    az = rng.uniform(*az_range)
    el = rng.uniform(0.0, 35.0)
    return pose_from_center(look_at + spherical_offset(r, az, el), look_at, fx, fy, cx, cy, res, res)


def render_crops(identity_seeds: list[int], n_views: int, seed: int, res: int = 64, fov: float = 45.0,
                 frames: int = 16, az_range=(-180.0, 180.0)) -> tuple[np.ndarray, np.ndarray]:
    """Crops of each identity (label = list position) from random views, motions and lighting."""
    rng = np.random.default_rng([606, seed])
    crops, labels = [], []
    for label, ident_seed in enumerate(identity_seeds):
        ident = IdentityDescriptor(int(ident_seed))
        for _ in range(n_views):
            gs = make_subject(ident, int(rng.integers(2 ** 31)), frames, subject_id=1)
            scene = make_scene([gs], int(rng.integers(2 ** 31)), setting=STUDIO, frames=frames)
            if rng.random() < 0.5:
                scene = relight_augment(scene, int(rng.integers(2 ** 31)))
            time = int(rng.integers(frames))
            pose = _random_pose(rng, subject_centers(scene, time)[1], res, fov, az_range)
            img, masks, lab = render_frame_with_masks(scene, pose, time)
            m = masks[lab.index(1)] > 0.5
            if m.sum() < 0.01 * m.size:
                continue
            crops.append(prepare_crop(img, m))
            labels.append(label)
    return np.stack(crops), np.array(labels)


def background_crops(n: int, seed: int, res: int = 64, fov: float = 45.0) -> np.ndarray:
    rng = np.random.default_rng([607, seed])
    out = []
    for _ in range(n):
        scene = make_scene([], int(rng.integers(2 ** 31)), setting=STUDIO if rng.random() < 0.5 else None)
        if rng.random() < 0.5:
            scene = relight_augment(scene, int(rng.integers(2 ** 31)))
        img, _, _ = render_frame_with_masks(scene, _random_pose(rng, np.array([0.0, -0.8, 0.0]), res, fov), 0)
        s = int(rng.integers(8, 40))
        y, x = int(rng.integers(0, res - s)), int(rng.integers(0, res - s))
        box = np.zeros((res, res), dtype=bool)
        box[y:y + s, x:x + s] = True
        out.append(prepare_crop(img, box, margin=0))
    return np.stack(out)


def _augment(x: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    B = x.shape[0]
    sigma = 1.2 * torch.rand(B, generator=g)
    k = torch.arange(-2, 3, dtype=torch.float32)
    ker = torch.exp(-k[None] ** 2 / (2 * sigma[:, None].clamp_min(1e-3) ** 2))
    ker = ker / ker.sum(1, keepdim=True)
    # separable blur with a per-sample kernel
    xb = x.reshape(1, B * 3, CROP, CROP)
    kk = ker.repeat_interleave(3, 0)
    xb = F.conv2d(F.pad(xb, (2, 2, 0, 0), mode="replicate"), kk[:, None, None, :], groups=B * 3)
    xb = F.conv2d(F.pad(xb, (0, 0, 2, 2), mode="replicate"), kk[:, None, :, None], groups=B * 3)
    x = xb.reshape(B, 3, CROP, CROP)
    gain = 1.0 + 0.15 * (2 * torch.rand(B, 1, 1, 1, generator=g) - 1)
    x = x * gain + 0.05 * torch.rand(B, 1, 1, 1, generator=g) * torch.randn(x.shape, generator=g)
    flip = torch.rand(B, generator=g) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    return x.clamp(0, 1)


@dataclass
class EmbedderData:
    crops: np.ndarray
    labels: np.ndarray


def build_embedder_data(subject_seeds: list[int], seed: int, views: int = 120, others: int = 24,
                        az_range=(-180.0, 180.0)) -> EmbedderData:
    """Training crops: registered subjects (labels 0..K-1) and the "other" class (label K)."""
    sub, lab = render_crops(subject_seeds, views, derive_seed(seed, "emb-subjects"), az_range=az_range)
    rng = np.random.default_rng([608, seed])
    generic = [int(v) for v in rng.integers(10_000, 2 ** 31, size=others)]
    gen, _ = render_crops(generic, max(2, views // 8), derive_seed(seed, "emb-generic"))
    bg = background_crops(views, derive_seed(seed, "emb-bg"))
    K = len(subject_seeds)
    crops = np.concatenate([sub, gen, bg])
    labels = np.concatenate([lab, np.full(len(gen) + len(bg), K)])
    return EmbedderData(crops.astype(np.float32), labels.astype(np.int64))


def train_embedder(data: EmbedderData, n_subjects: int, steps: int, seed: int, batch: int = 64,
                   lr: float = 2e-3) -> IdentityEmbedder:
    torch.manual_seed(seed % (2 ** 31))
    model = IdentityEmbedder(n_subjects)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=1e-4)
    x_all = torch.from_numpy(data.crops)
    y_all = torch.from_numpy(data.labels)
    counts = torch.bincount(y_all, minlength=model.n_classes).float()
    w = (1.0 / counts.clamp_min(1))[y_all]
    g = torch.Generator().manual_seed(seed % (2 ** 63))
    model.train()
    for step in range(steps):
        idx = torch.multinomial(w, batch, replacement=True, generator=g)
        x = _augment(x_all[idx], g)
        loss = F.cross_entropy(model.logits(x), y_all[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % 250 == 0:
            log.info("embedder step %d loss %.4f", step, loss.item())
    model.eval()
    return model


def save_embedder(model: IdentityEmbedder, path: str | Path, meta: dict | None = None) -> str:
    path = Path(path)
    digest = save_tensors(path.with_suffix(".bin"), {k: v.detach().numpy() for k, v in model.state_dict().items()})
    write_json(path.with_suffix(".json"), {"n_subjects": model.n_classes - 1, "weights_sha256": digest, **(meta or {})})
    return digest


def load_embedder(path: str | Path) -> IdentityEmbedder:
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    model = IdentityEmbedder(meta["n_subjects"])
    arrays = load_tensors(path.with_suffix(".bin"))
    state = model.state_dict()
    model.load_state_dict({k: torch.from_numpy(arrays[k]).to(state[k].dtype) for k in state})
    model.eval()
    return model


@torch.no_grad()
def embed_crops(model: IdentityEmbedder, crops: np.ndarray) -> np.ndarray:
    return model.embed(torch.from_numpy(np.asarray(crops, dtype=np.float32))).numpy().astype(np.float64)


def crops_for(images: np.ndarray, masks: np.ndarray | None = None, min_area: float = 0.01):
    """Crops of frames whose subject mask covers at least ``min_area``; masks default to the oracle."""
    images = np.asarray(images)
    if masks is None:
        masks = foreground_mask(images)
    keep, crops = [], []
    for t, (img, m) in enumerate(zip(images, masks)):
        mb = np.asarray(m) > 0.5
        if mb.mean() < min_area:
            continue
        keep.append(t)
        crops.append(prepare_crop(img, mb))
    return (np.stack(crops) if crops else np.zeros((0, 3, CROP, CROP), np.float32)), keep
