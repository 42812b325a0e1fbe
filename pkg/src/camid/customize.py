"""Subject and scene customization with low-rank adapters and identity tokens."""
from __future__ import annotations

import contextlib
import logging
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from camid.camctrl import (GATE_FRACTION, ControlBranch, DivergenceMonitor, TrainLog, apply_schedule, freeze,
                           warmup_lr)
from camid.config_io import CustomizeConfig, derive_seed, load_tensors, read_json, save_tensors, write_json
from camid.data import VideoData, concat
from camid.dit import RARE_TOKEN, TOKEN_ID, VideoDiT, checksum, is_identity_token, train_step

log = logging.getLogger(__name__)


class TokenError(ValueError):
    pass


def _key(name: str) -> str:
    return name.replace(".", "__")


class AdapterSet(nn.Module):
    """Rank-r additive deltas on every attention/MLP linear of the main DiT, plus identity token rows."""

    def __init__(self, model: VideoDiT, tokens: list[str], rank: int = 4, alpha: float = 1.0, seed: int = 0):
        super().__init__()
        for tok in tokens:
            if not is_identity_token(tok):
                raise TokenError(f"{tok!r} is not a reserved identity token")
        if len(set(tokens)) != len(tokens):
            raise TokenError(f"token collision in {tokens}")
        self.tokens = list(tokens)
        self.rank, self.alpha = rank, alpha
        self.base_hash = checksum(model)
        g = torch.Generator().manual_seed(seed)
        self.targets = list(model.lora_layers())
        self.A = nn.ParameterDict()
        self.B = nn.ParameterDict()
        for name, layer in model.lora_layers().items():
            a = torch.randn((rank, layer.in_features), generator=g) / math.sqrt(layer.in_features)
            self.A[_key(name)] = nn.Parameter(a)
            self.B[_key(name)] = nn.Parameter(torch.zeros(layer.out_features, rank))
        # starts equal to the base rows so a fresh set is an exact no-op
        self.rows = nn.ParameterDict({tok: nn.Parameter(model.text_embed.weight[TOKEN_ID[tok]].detach().clone())
                                      for tok in self.tokens})

    def init_rows_from_rare(self, model: VideoDiT) -> None:
        with torch.no_grad():
            for row in self.rows.values():
                row.copy_(model.text_embed.weight[TOKEN_ID[RARE_TOKEN]])

    def lora_parameters(self) -> list[nn.Parameter]:
        return list(self.A.values()) + list(self.B.values())

    def sidecar(self, cfg: dict | None = None) -> dict:
        return {"identity_tokens": self.tokens, "base_hash": self.base_hash, "rank": self.rank,
                "alpha": self.alpha, "targets": self.targets, "cfg": cfg or {}}

    def save(self, path: str | Path, cfg: dict | None = None) -> str:
        path = Path(path)
        arrays = {f"A/{k}": v.detach().numpy() for k, v in self.A.items()}
        arrays.update({f"B/{k}": v.detach().numpy() for k, v in self.B.items()})
        arrays.update({f"row/{k}": v.detach().numpy() for k, v in self.rows.items()})
        digest = save_tensors(path.with_suffix(".bin"), arrays)
        meta = self.sidecar(cfg)
        meta["weights_sha256"] = digest
        write_json(path.with_suffix(".json"), meta)
        return digest

    @classmethod
    def load(cls, path: str | Path, model: VideoDiT) -> "AdapterSet":
        path = Path(path)
        meta = read_json(path.with_suffix(".json"))
        if meta["base_hash"] != checksum(model):
            raise ValueError("adapter set was trained against a different base checkpoint")
        out = cls(model, meta["identity_tokens"], meta["rank"], meta["alpha"])
        arrays = load_tensors(path.with_suffix(".bin"))
        with torch.no_grad():
            for k in out.A:
                out.A[k].copy_(torch.from_numpy(arrays[f"A/{k}"]))
                out.B[k].copy_(torch.from_numpy(arrays[f"B/{k}"]))
            for k in out.rows:
                out.rows[k].copy_(torch.from_numpy(arrays[f"row/{k}"]))
        return out


def attach(model: VideoDiT, adapters: AdapterSet) -> None:
    if adapters.base_hash != checksum(model):
        raise ValueError("adapter set does not match this base model")
    layers = model.lora_layers()
    for name in adapters.targets:
        layers[name].lora = (adapters.A[_key(name)], adapters.B[_key(name)], adapters.alpha)
    model.token_override = {TOKEN_ID[tok]: row for tok, row in adapters.rows.items()}


def detach(model: VideoDiT) -> None:
    for layer in model.lora_layers().values():
        layer.lora = None
    model.token_override = {}


@contextlib.contextmanager
def applied(model: VideoDiT, adapters: AdapterSet | None):
    """Temporarily attach ``adapters`` (``None`` leaves the base model untouched)."""
    if adapters is None:
        yield model
        return
    attach(model, adapters)
    try:
        yield model
    finally:
        detach(model)


def mix_schedule(reg_mix: float, steps: int, seed: int) -> np.ndarray:
    """Per-step flags: True where the batch is drawn from regularization data."""
    if not 0.0 <= reg_mix <= 1.0:
        raise ValueError("reg_mix must lie in [0, 1]")
    return np.random.default_rng(seed).random(steps) < reg_mix


def _check_tokens(data: VideoData, tokens: list[str]) -> None:
    words = data.words()
    if not words:
        raise TokenError("customization dataset is empty")
    for tok in tokens:
        if not any(tok in w for w in words):
            raise TokenError(f"identity token {tok} absent from customization prompts")
    for w in words:
        if not any(tok in w for tok in tokens):
            raise TokenError(f"customization prompt {' '.join(w)!r} carries none of {tokens}")


def _train_adapters(model: VideoDiT, branch: ControlBranch | None, data: VideoData, reg: VideoData | None,
                    tokens: list[str], cfg: CustomizeConfig, seed: int, frame0_clean: bool = False,
                    gate_fraction: float = GATE_FRACTION) -> tuple[AdapterSet, TrainLog]:
    _check_tokens(data, tokens)
    freeze(model)
    if branch is not None:
        freeze(branch)
    before = (checksum(model), checksum(branch) if branch is not None else None)
    adapters = AdapterSet(model, tokens, cfg.rank, cfg.alpha, seed=derive_seed(seed, "adapter-init"))
    adapters.init_rows_from_rare(model)
    opt = torch.optim.AdamW([{"params": adapters.lora_parameters(), "lr": cfg.lr, "base_lr": cfg.lr},
                             {"params": list(adapters.rows.values()), "lr": cfg.token_lr, "base_lr": cfg.token_lr}],
                            weight_decay=0.0)
    use_reg = mix_schedule(cfg.reg_mix if reg is not None and len(reg) else 0.0, cfg.steps,
                           derive_seed(seed, "reg-mix"))
    g = torch.Generator().manual_seed(derive_seed(seed, "customize"))
    monitor = DivergenceMonitor()
    out = TrainLog()
    params = adapters.lora_parameters() + list(adapters.rows.values())
    with applied(model, adapters):
        for step in range(cfg.steps):
            item = (reg if use_reg[step] else data).draw(g)
            s = torch.rand((1,), generator=g)
            eps = torch.randn(item.video.shape, generator=g)
            ctrl = None
            if branch is not None and apply_schedule(s.item(), gate_fraction):
                cam = branch.encode_plucker(item.plucker)
                ctrl = lambda v, t, c, cam=cam: branch.residuals(v, t, c, cam)
            warmup_lr(opt, step, cfg.lr, warmup=50)
            loss = train_step(model, item.video, item.ids, s, eps, ctrl, frame0_clean=frame0_clean)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, 1.0)
            opt.step()
            out.losses.append(loss.item())
            monitor.update(out.losses[-1])
            if step % 50 == 0:
                log.info("customize %s step %d loss %.4f", "+".join(tokens), step, out.losses[-1])
    out.steps = cfg.steps
    out.extras["reg_fraction"] = float(use_reg.mean()) if cfg.steps else 0.0
    after = (checksum(model), checksum(branch) if branch is not None else None)
    if after != before:
        raise RuntimeError("base weights changed during customization")
    return adapters, out


def customize(model: VideoDiT, branch: ControlBranch | None, subject_data: VideoData, reg_data: VideoData | None,
              cfg: CustomizeConfig, token: str, seed: int) -> tuple[AdapterSet, TrainLog]:
    return _train_adapters(model, branch, subject_data, reg_data, [token], cfg, seed)


def joint_customize(model: VideoDiT, branch: ControlBranch | None, entity_data: list[VideoData], tokens: list[str],
                    reg_data: VideoData | None, cfg: CustomizeConfig, seed: int,
                    joint_data: VideoData | None = None) -> tuple[AdapterSet, TrainLog]:
    """One shared adapter set over the union of single-entity sets (plus joint clips when given)."""
    if len(entity_data) != len(tokens):
        raise ValueError("one dataset per entity token expected")
    if len(set(tokens)) != len(tokens):
        raise TokenError(f"token collision in {tokens}")
    parts = list(entity_data) + ([joint_data] if joint_data is not None and len(joint_data) else [])
    union = entity_data[0] if len(parts) == 1 else concat(parts)
    return _train_adapters(model, branch, union, reg_data, tokens, cfg, seed)


def customize_i2v(model: VideoDiT, branch: ControlBranch | None, subject_data: VideoData, reg_data: VideoData | None,
                  cfg: CustomizeConfig, token: str, seed: int) -> tuple[AdapterSet, TrainLog]:
    """As :func:`customize`, with frame 0 kept clean and excluded from the loss."""
    return _train_adapters(model, branch, subject_data, reg_data, [token], cfg, seed, frame0_clean=True)
