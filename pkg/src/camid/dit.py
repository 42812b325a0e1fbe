"""Small pixel-space video diffusion transformer.

Rectified flow: ``z_s = (1 - s) x + s eps`` with velocity target ``eps - x``;
``s = 1`` is pure noise. Text conditioning is in-context (prompt tokens are
prepended to the video token sequence); the noise time enters through adaLN
modulation. Every attention/MLP linear map is a :class:`LoRALinear` so that
adapter sets can be attached and detached without touching base weights.
"""
from __future__ import annotations

import hashlib
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from camid.config_io import ModelConfig, load_tensors, read_json, save_tensors, write_json
from camid.scenegen import MOTIONS, SETTINGS

N_IDENTITY_SLOTS = 4
PAD = "<pad>"
RARE_TOKEN = "sks"
DESCRIPTORS = ["a", "person", "and", "in", "scene", *MOTIONS, *SETTINGS, "bright", "dim", "warm", "cool", RARE_TOKEN]
IDENTITY_TOKENS = [f"SUBJ_{k}" for k in range(1, N_IDENTITY_SLOTS + 1)] + \
                  [f"SCENE_{k}" for k in range(1, N_IDENTITY_SLOTS + 1)]
VOCABULARY = [PAD] + DESCRIPTORS + IDENTITY_TOKENS
TOKEN_ID = {w: i for i, w in enumerate(VOCABULARY)}


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def is_identity_token(word: str) -> bool:
    return word in IDENTITY_TOKENS


def tokenize(words: Sequence[str], max_len: int = 16) -> list[int]:
    """Map prompt words to padded ids; identity tokens may appear at most once each."""
    if len(words) > max_len:
        raise ValueError(f"prompt longer than {max_len} tokens")
    ids = []
    seen = set()
    for w in words:
        if w not in TOKEN_ID:
            raise ValueError(f"unknown prompt token {w!r}")
        if is_identity_token(w):
            if w in seen:
                raise ValueError(f"identity token {w} repeated")
            seen.add(w)
        ids.append(TOKEN_ID[w])
    return ids + [TOKEN_ID[PAD]] * (max_len - len(ids))


def detokenize(ids: Sequence[int]) -> list[str]:
    return [VOCABULARY[i] for i in ids if i != TOKEN_ID[PAD]]


# ---------------------------------------------------------------------------
# tokens
# ---------------------------------------------------------------------------

def patchify(video: torch.Tensor, pt: int, ps: int) -> torch.Tensor:
    """``(B, T, H, W, C) -> (B, T/pt * H/ps * W/ps, pt*ps*ps*C)`` in (t, h, w) order."""
    B, T, H, W, C = video.shape
    if T % pt or H % ps or W % ps:
        raise ShapeError(f"video {tuple(video.shape)} not divisible by patch ({pt}, {ps}, {ps})")
    x = video.reshape(B, T // pt, pt, H // ps, ps, W // ps, ps, C)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(B, (T // pt) * (H // ps) * (W // ps), pt * ps * ps * C)


def unpatchify(tokens: torch.Tensor, grid: tuple[int, int, int], pt: int, ps: int, channels: int = 3) -> torch.Tensor:
    B = tokens.shape[0]
    gt, gh, gw = grid
    x = tokens.reshape(B, gt, gh, gw, pt, ps, ps, channels)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(B, gt * pt, gh * ps, gw * ps, channels)


def _sincos(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freq = 1.0 / (10000 ** (np.arange(dim // 2) / max(dim // 2, 1)))
    ang = pos * freq[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def positional_encoding(grid: tuple[int, int, int], width: int) -> np.ndarray:
    """Factorized sin/cos codes: one chunk of channels per (t, h, w) axis."""
    d = (width // 3) // 2 * 2
    dims = [d, d, width - 2 * d]
    gt, gh, gw = grid
    et, eh, ew = _sincos(gt, dims[0]), _sincos(gh, dims[1]), _sincos(gw, dims[2])
    t, h, w = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij")
    return np.concatenate([et[t.ravel()], eh[h.ravel()], ew[w.ravel()]], axis=1).astype(np.float32)


def timestep_embedding(s: torch.Tensor, dim: int = 128) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=s.dtype, device=s.device) / half)
    ang = (s * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class LoRALinear(nn.Linear):
    """Linear map with an optional attached low-rank delta ``scale * B @ A``."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__(in_features, out_features, bias=bias)
        self.lora: tuple[torch.Tensor, torch.Tensor, float] | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = super().forward(x)
        if self.lora is not None:
            A, B, scale = self.lora
            y = y + scale * F.linear(F.linear(x, A), B)
        return y


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class DiTBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.qkv = LoRALinear(width, 3 * width)
        self.proj = LoRALinear(width, width)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.fc1 = LoRALinear(width, mlp_ratio * width)
        self.fc2 = LoRALinear(mlp_ratio * width, width)
        self.ada = nn.Linear(width, 6 * width)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, h: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(F.silu(c)).chunk(6, dim=-1)
        B, N, D = h.shape
        x = modulate(self.norm1(h), sh1, sc1)
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v)
        a = a.transpose(1, 2).reshape(B, N, D)
        h = h + (1 + g1[:, None]) * self.proj(a)
        x = modulate(self.norm2(h), sh2, sc2)
        return h + (1 + g2[:, None]) * self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


ControlFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], "list[torch.Tensor] | None"]


class VideoDiT(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int = len(VOCABULARY)):
        super().__init__()
        self.cfg = cfg
        D = cfg.width
        self.patch_dim = cfg.tpatch * cfg.patch * cfg.patch * 3
        self.patch_embed = nn.Linear(self.patch_dim, D)
        self.register_buffer("pos", torch.from_numpy(positional_encoding(cfg.token_grid, D)), persistent=False)
        self.text_embed = nn.Embedding(vocab_size, D)
        nn.init.normal_(self.text_embed.weight, std=0.5)
        self.text_pos = nn.Parameter(0.1 * torch.randn(cfg.max_prompt, D))
        self.time_mlp = nn.Sequential(nn.Linear(128, D), nn.SiLU(), nn.Linear(D, D))
        self.blocks = nn.ModuleList(DiTBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.blocks))
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Linear(D, 2 * D)
        self.final = nn.Linear(D, self.patch_dim)
        for m in (self.final_ada, self.final):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)
        # identity token rows overridden by an attached adapter set
        self.token_override: dict[int, torch.Tensor] = {}

    @property
    def n_control(self) -> int:
        return self.cfg.control_blocks

    def embed_video(self, z: torch.Tensor) -> torch.Tensor:
        return self.patch_embed(patchify(z, self.cfg.tpatch, self.cfg.patch)) + self.pos

    def embed_text(self, ids: torch.Tensor) -> torch.Tensor:
        e = self.text_embed(ids)
        if self.token_override:
            for tok, row in self.token_override.items():
                e = torch.where((ids == tok)[..., None], row.to(e.dtype), e)
        return e + self.text_pos[: ids.shape[1]]

    def embed_time(self, s: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(s))

    def forward(self, z: torch.Tensor, s: torch.Tensor, ids: torch.Tensor,
                control: "list[torch.Tensor] | ControlFn | None" = None) -> torch.Tensor:
        cfg = self.cfg
        expected = (cfg.frames, cfg.height, cfg.width_px, 3)
        if tuple(z.shape[1:]) != expected:
            raise ShapeError(f"expected video shape {expected}, got {tuple(z.shape[1:])}")
        s = torch.as_tensor(s, dtype=z.dtype).reshape(-1).expand(z.shape[0])
        x = self.embed_video(z)
        txt = self.embed_text(ids)
        c = self.embed_time(s)
        residuals = control(x, txt, c) if callable(control) else control
        if residuals is not None and len(residuals) != self.n_control:
            raise ShapeError(f"expected {self.n_control} control residuals, got {len(residuals)}")
        P = txt.shape[1]
        h = torch.cat([txt, x], dim=1)
        for k, blk in enumerate(self.blocks):
            if residuals is not None and k < len(residuals):
                h = torch.cat([h[:, :P], h[:, P:] + residuals[k]], dim=1)
            h = blk(h, c)
        shift, scale = self.final_ada(F.silu(c)).chunk(2, dim=-1)
        out = self.final(modulate(self.final_norm(h[:, P:]), shift, scale))
        return unpatchify(out, cfg.token_grid, cfg.tpatch, cfg.patch)

    def lora_layers(self) -> dict[str, LoRALinear]:
        return {name: m for name, m in self.named_modules() if isinstance(m, LoRALinear)}


# ---------------------------------------------------------------------------
# objective and samplers
# ---------------------------------------------------------------------------

def interpolate(x: torch.Tensor, eps: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    s = s.reshape(-1, *([1] * (x.dim() - 1)))
    return (1 - s) * x + s * eps


def train_step(model: VideoDiT, video: torch.Tensor, ids: torch.Tensor, s: torch.Tensor, eps: torch.Tensor,
               control: "list[torch.Tensor] | ControlFn | None" = None, frame0_clean: bool = False) -> torch.Tensor:
    """Rectified-flow loss ``mean |v_hat - (eps - x)|^2`` for one batch (caller runs backward)."""
    z = interpolate(video, eps, s)
    if frame0_clean:
        z = torch.cat([video[:, :1], z[:, 1:]], dim=1)
    target = eps - video
    pred = model(z, s, ids, control)
    err = (pred - target) ** 2
    if frame0_clean:
        err = err[:, 1:]
    loss = err.mean()
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss (s={s.tolist()}, pred range "
                               f"[{pred.min().item():.3g}, {pred.max().item():.3g}])")
    return loss


def initial_noise(cfg: ModelConfig, seed: int, batch: int = 1) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed) % (2 ** 63))
    return torch.randn((batch, cfg.frames, cfg.height, cfg.width_px, 3), generator=g)


def step_times(n_steps: int) -> list[float]:
    return [1.0 - i / n_steps for i in range(n_steps + 1)]


Predictor = Callable[[torch.Tensor, float, int], torch.Tensor]


def euler_integrate(z: torch.Tensor, n_steps: int, predict: Predictor,
                    post_step: Callable[[torch.Tensor, float], torch.Tensor] | None = None) -> torch.Tensor:
    """Integrate ``dz/ds = v`` from s=1 to s=0 over uniform steps; ``predict(z, s, i)`` gives v."""
    times = step_times(n_steps)
    for i in range(n_steps):
        s, s_next = times[i], times[i + 1]
        z = z + (s_next - s) * predict(z, s, i)
        if post_step is not None:
            z = post_step(z, s_next)
    return z


def make_predictor(model: VideoDiT, ids: torch.Tensor, control_for: Callable[[float], object] | None = None) -> Predictor:
    def predict(z, s, i):
        ctrl = control_for(s) if control_for is not None else None
        return model(z, torch.full((z.shape[0],), s, dtype=z.dtype), ids, ctrl)
    return predict


@torch.no_grad()
def sample(model: VideoDiT, ids: torch.Tensor, steps: int, seed: int, control_for=None,
           noise: torch.Tensor | None = None) -> torch.Tensor:
    """Text-to-video sampling; ``control_for(s)`` supplies camera control per step (see camctrl)."""
    z = initial_noise(model.cfg, seed) if noise is None else noise.clone()
    z = euler_integrate(z, steps, make_predictor(model, ids, control_for))
    return z.clamp(-1.0, 1.0)


@torch.no_grad()
def sample_i2v(model: VideoDiT, ids: torch.Tensor, first_frame: torch.Tensor, steps: int, seed: int,
               control_for=None) -> torch.Tensor:
    """First-frame-conditioned sampling by inpainting-style clamping of frame 0.

    The denoiser always sees the clean first frame (as in first-frame-clamped
    training); after each Euler step the state's frame 0 is reset to the first
    frame re-noised to the new noise time, so it equals the input at s = 0.
    """
    cfg = model.cfg
    if tuple(first_frame.shape[-3:]) != (cfg.height, cfg.width_px, 3):
        raise ShapeError("first frame does not match model resolution")
    first = first_frame.reshape(1, 1, cfg.height, cfg.width_px, 3).to(torch.float32)
    z = initial_noise(cfg, seed)
    eps0 = z[:, :1].clone()
    base = make_predictor(model, ids, control_for)

    def predict(zz, s, i):
        return base(torch.cat([first, zz[:, 1:]], dim=1), s, i)

    def clamp_first(zz, s_next):
        return torch.cat([(1 - s_next) * first + s_next * eps0, zz[:, 1:]], dim=1)

    z = euler_integrate(clamp_first(z, 1.0), steps, predict, clamp_first)
    return z.clamp(-1.0, 1.0)


def to_model_space(video01: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(video01, dtype=np.float32) * 2.0 - 1.0)


def to_unit_range(video: torch.Tensor) -> np.ndarray:
    return ((video.detach().cpu().numpy().astype(np.float64) + 1.0) / 2.0).clip(0.0, 1.0)


def model_state(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def load_model_state(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: nn.Module, path, config: dict, stage: str, lineage: dict) -> str:
    """Weights as ``<path>.bin`` plus a JSON sidecar; returns the weights' sha256."""
    path = Path(path)
    digest = save_tensors(path.with_suffix(".bin"), model_state(model))
    write_json(path.with_suffix(".json"), {"config": config, "vocabulary": VOCABULARY, "stage": stage,
                                           "lineage": lineage, "weights_sha256": digest, "checksum": checksum(model)})
    return digest


def read_sidecar(path) -> dict:
    return read_json(Path(path).with_suffix(".json"))


def load_checkpoint(path) -> VideoDiT:
    meta = read_sidecar(path)
    if meta["vocabulary"] != VOCABULARY:
        raise ValueError("checkpoint vocabulary differs from this build")
    model = VideoDiT(ModelConfig.model_validate(meta["config"]))
    load_model_state(model, load_tensors(Path(path).with_suffix(".bin")))
    model.eval()
    return model
