"""Camera control branch: Plücker encoder, mirrored control blocks, gated injection."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from camid.camera import Trajectory, plucker_embed
from camid.config_io import load_tensors, read_json, save_tensors, write_json
from camid.dit import ShapeError, TrainingDiverged, VideoDiT, checksum, train_step

log = logging.getLogger(__name__)

GATE_FRACTION = 0.4
# moments grow with the camera radius (2-10 m); keep encoder inputs O(1)
MOMENT_SCALE = 0.2


def apply_schedule(s: float, fraction: float = GATE_FRACTION) -> bool:
    """Control is active during the first ``fraction`` of denoising, i.e. iff ``s > 1 - fraction``."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("gate fraction must lie in (0, 1]")
    return float(s) > 1.0 - fraction


def active_steps(n_steps: int, fraction: float = GATE_FRACTION) -> list[int]:
    return [i for i in range(n_steps) if apply_schedule(1.0 - i / n_steps, fraction)]


class ControlBranch(nn.Module):
    def __init__(self, model: VideoDiT, hidden: int = 64):
        super().__init__()
        cfg = model.cfg
        D = cfg.width
        self.grid = cfg.token_grid
        self.input_shape = (cfg.frames, cfg.height, cfg.width_px, 6)
        self.encoder = nn.Sequential(
            nn.Conv3d(6, hidden, kernel_size=3, padding=1),
            nn.SiLU(),
            nn.Conv3d(hidden, D, kernel_size=(cfg.tpatch, cfg.patch, cfg.patch),
                      stride=(cfg.tpatch, cfg.patch, cfg.patch)),
        )
        self.fuse = nn.Linear(2 * D, D)
        with torch.no_grad():
            # start as "video tokens plus a small camera term"
            self.fuse.weight.zero_()
            self.fuse.weight[:, :D] = torch.eye(D)
            self.fuse.weight[:, D:] = 0.02 * torch.randn(D, D)
            self.fuse.bias.zero_()
        self.blocks = nn.ModuleList(copy.deepcopy(model.blocks[k]) for k in range(model.n_control))
        for p in self.blocks.parameters():
            p.requires_grad_(True)
        self.out_proj = nn.ModuleList(nn.Linear(D, D) for _ in range(model.n_control))
        for proj in self.out_proj:
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
        for blk in self.blocks:
            for m in blk.modules():
                if hasattr(m, "lora"):
                    m.lora = None

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def encode_plucker(self, pmap: torch.Tensor) -> torch.Tensor:
        """``(B, T, H, W, 6) -> (B, n_tokens, width)`` in patchify token order."""
        if tuple(pmap.shape[1:]) != self.input_shape:
            raise ShapeError(f"Plücker map {tuple(pmap.shape[1:])} does not match model input {self.input_shape}")
        x = pmap.permute(0, 4, 1, 2, 3)
        x = torch.cat([x[:, :3], MOMENT_SCALE * x[:, 3:]], dim=1)
        y = self.encoder(x)
        return y.flatten(2).transpose(1, 2)

    def residuals(self, video_tokens: torch.Tensor, text_tokens: torch.Tensor, c: torch.Tensor,
                  camera_tokens: torch.Tensor) -> list[torch.Tensor]:
        if video_tokens.shape != camera_tokens.shape:
            raise ShapeError(f"token grids differ: {tuple(video_tokens.shape)} vs {tuple(camera_tokens.shape)}")
        P = text_tokens.shape[1]
        h = torch.cat([text_tokens, self.fuse(torch.cat([video_tokens, camera_tokens], dim=-1))], dim=1)
        out = []
        for blk, proj in zip(self.blocks, self.out_proj):
            h = blk(h, c)
            out.append(proj(h[:, P:]))
        return out


def plucker_tensor(traj: Trajectory, height: int, width: int) -> torch.Tensor:
    return torch.from_numpy(plucker_embed(traj, height, width).astype(np.float32))[None]


def control_forward(branch: ControlBranch, video_tokens: torch.Tensor, text_tokens: torch.Tensor,
                    c: torch.Tensor, camera_tokens: torch.Tensor, s: float,
                    fraction: float = GATE_FRACTION) -> list[torch.Tensor] | None:
    if not apply_schedule(s, fraction):
        return None
    return branch.residuals(video_tokens, text_tokens, c, camera_tokens)


def make_control(branch: ControlBranch | None, camera_tokens: torch.Tensor | None,
                 fraction: float = GATE_FRACTION) -> Callable[[float], object] | None:
    """Per-step control provider for the samplers: ``s -> callable | None``."""
    if branch is None:
        return None
    if camera_tokens is None:
        raise ValueError("a control branch requires a trajectory")

    def control_for(s: float):
        if not apply_schedule(s, fraction):
            return None
        return lambda v, t, c: branch.residuals(v, t, c, camera_tokens)
    return control_for


def freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


def sample_open_gate(g: torch.Generator, fraction: float = GATE_FRACTION) -> float:
    """Noise time drawn uniformly from the gate-open region ``(1 - fraction, 1]``."""
    u = torch.rand((), generator=g).item()
    return 1.0 - fraction * (1.0 - u) if u < 1.0 else 1.0


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    extras: dict = field(default_factory=dict)


class DivergenceMonitor:
    """Abort once the loss stays above ``factor`` x its initial value for ``patience`` steps."""

    def __init__(self, factor: float = 10.0, patience: int = 100):
        self.factor, self.patience = factor, patience
        self.initial: float | None = None
        self.run = 0

    def update(self, loss: float) -> None:
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss}")
        if self.initial is None:
            self.initial = loss
            return
        self.run = self.run + 1 if loss > self.factor * self.initial else 0
        if self.run >= self.patience:
            raise TrainingDiverged(f"loss {loss:.4g} above {self.factor}x initial {self.initial:.4g} "
                                   f"for {self.patience} consecutive steps")


def pretrain_camera(model: VideoDiT, branch: ControlBranch, data, steps: int, lr: float, seed: int,
                    gate_fraction: float = GATE_FRACTION, gate_training_loss: bool = True,
                    log_every: int = 50, monitor: DivergenceMonitor | None = None) -> TrainLog:
    """Train only the branch on general data with the main DiT frozen.

    ``data`` is a :class:`camid.data.VideoData`. With ``gate_training_loss`` the
    noise time is drawn only from the gate-open interval, which is the branch
    loss restricted to the steps where the branch is applied at sampling time.
    """
    freeze(model)
    before = checksum(model)
    params = [p for p in branch.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
    g = torch.Generator().manual_seed(seed)
    monitor = monitor or DivergenceMonitor()
    out = TrainLog()
    branch.train()
    for step in range(steps):
        item = data.draw(g)
        s = sample_open_gate(g, gate_fraction) if gate_training_loss else torch.rand((), generator=g).item()
        eps = torch.randn(item.video.shape, generator=g)
        if not apply_schedule(s, gate_fraction):
            # gate closed: the branch receives no signal from this draw
            with torch.no_grad():
                out.losses.append(train_step(model, item.video, item.ids, torch.tensor([s]), eps).item())
            continue
        cam = branch.encode_plucker(item.plucker)
        ctrl = lambda v, t, c: branch.residuals(v, t, c, cam)
        warmup_lr(opt, step, lr)
        loss = train_step(model, item.video, item.ids, torch.tensor([s]), eps, ctrl)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        value = loss.item()
        out.losses.append(value)
        monitor.update(value)
        if step % log_every == 0:
            log.info("camera pretrain step %d loss %.4f", step, value)
    out.steps = steps
    branch.eval()
    if checksum(model) != before:
        raise RuntimeError("main DiT weights changed during camera pretraining")
    return out


def warmup_lr(opt: torch.optim.Optimizer, step: int, base_lr: float, warmup: int = 100) -> None:
    for group in opt.param_groups:
        group["lr"] = group.get("base_lr", base_lr) * min(1.0, (step + 1) / warmup)


def pretrain_backbone(model: VideoDiT, data, steps: int, lr: float, seed: int, log_every: int = 50,
                      monitor: DivergenceMonitor | None = None) -> TrainLog:
    """Unconditioned text-to-video training of the main DiT on general data.

    Stands in for the pretrained backbone the branch is later attached to.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
    g = torch.Generator().manual_seed(seed)
    monitor = monitor or DivergenceMonitor()
    out = TrainLog()
    model.train()
    for step in range(steps):
        item = data.draw(g)
        s = torch.rand((1,), generator=g)
        eps = torch.randn(item.video.shape, generator=g)
        warmup_lr(opt, step, lr)
        loss = train_step(model, item.video, item.ids, s, eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        value = loss.item()
        out.losses.append(value)
        monitor.update(value)
        if step % log_every == 0:
            log.info("backbone step %d loss %.4f", step, value)
    out.steps = steps
    model.eval()
    return out


def save_branch(branch: ControlBranch, path, base_hash: str, lineage: dict) -> str:
    path = Path(path)
    arrays = {k: v.detach().numpy() for k, v in branch.state_dict().items()}
    digest = save_tensors(path.with_suffix(".bin"), arrays)
    write_json(path.with_suffix(".json"), {"stage": "camera-pretrained", "base_hash": base_hash,
                                           "lineage": lineage, "weights_sha256": digest})
    return digest


def load_branch(path, model: VideoDiT) -> ControlBranch:
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    if meta["base_hash"] != checksum(model):
        raise ValueError("branch checkpoint was trained against a different base model")
    branch = ControlBranch(model)
    arrays = load_tensors(path.with_suffix(".bin"))
    branch.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    branch.eval()
    freeze(branch)
    return branch
