"""Manifest-backed training data held in memory as model-space tensors."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from camid.camera import Trajectory
from camid.camctrl import plucker_tensor
from camid.dit import to_model_space, tokenize
from camid.scenegen import DatasetManifest
from camid.splat.render import read_frames


@dataclass
class Item:
    name: str
    video: torch.Tensor  # (1, T, H, W, 3) in [-1, 1]
    ids: torch.Tensor  # (1, P)
    plucker: torch.Tensor  # (1, T, H, W, 6)
    words: list[str]
    subject_ids: list[int]


class VideoData:
    """Entries of one or more manifests, loaded on first use."""

    def __init__(self, manifests: list[DatasetManifest] | DatasetManifest, max_prompt: int = 16,
                 split: str | None = "train", select=None):
        if isinstance(manifests, DatasetManifest):
            manifests = [manifests]
        self.max_prompt = max_prompt
        self.refs = [(m, e) for m in manifests for e in m.entries
                     if (split is None or e.get("split") == split) and (select is None or select(e))]

    # shared across instances so unions and subsets reuse decoded clips
    _cache: dict[tuple[str, str, int], Item] = {}

    def __len__(self) -> int:
        return len(self.refs)

    def __getitem__(self, k: int) -> Item:
        m, e = self.refs[k]
        key = (str(m.root), e["name"], self.max_prompt)
        if key not in self._cache:
            frames = read_frames(m.path(e["video_dir"]))
            traj = Trajectory.load(m.path(e["camera_file"]))
            T, H, W, _ = frames.shape
            self._cache[key] = Item(e["name"], to_model_space(frames)[None],
                                  torch.tensor([tokenize(e["prompt_tokens"], self.max_prompt)]),
                                  plucker_tensor(traj, H, W), list(e["prompt_tokens"]), list(e["subject_ids"]))
        return self._cache[key]

    def draw(self, g: torch.Generator) -> Item:
        if not self.refs:
            raise ValueError("empty dataset")
        return self[int(torch.randint(len(self.refs), (), generator=g))]

    def words(self) -> list[list[str]]:
        return [list(e["prompt_tokens"]) for _, e in self.refs]


def load_manifest(path: str | Path) -> DatasetManifest:
    p = Path(path)
    return DatasetManifest.load(p / "manifest.json" if p.is_dir() else p)


def reference_images(manifest: DatasetManifest, subject_id: int) -> np.ndarray:
    from PIL import Image
    refs = manifest.references[subject_id]
    return np.stack([np.asarray(Image.open(manifest.path(r["image"])).convert("RGB"), dtype=np.float64) / 255.0
                     for r in refs])


def concat(datasets: list[VideoData]) -> VideoData:
    """Union preserving order; a single dataset is returned as an equivalent copy."""
    out = VideoData([], datasets[0].max_prompt if datasets else 16)
    for d in datasets:
        out.refs.extend(d.refs)
    return out
