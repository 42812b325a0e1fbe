"""Generation entry points shared by evaluation, blending and the CLI."""
from __future__ import annotations

import math
from fractions import Fraction
from typing import Sequence

import torch

from camid.camctrl import GATE_FRACTION, ControlBranch, make_control, plucker_tensor
from camid.camera import Trajectory
from camid.customize import AdapterSet, applied, attach, detach
from camid.dit import VideoDiT, euler_integrate, initial_noise, sample, sample_i2v, tokenize


def prompt_ids(model: VideoDiT, words: Sequence[str]) -> torch.Tensor:
    return torch.tensor([tokenize(list(words), model.cfg.max_prompt)])


def camera_tokens(model: VideoDiT, branch: ControlBranch | None, traj: Trajectory | None) -> torch.Tensor | None:
    if branch is None or traj is None:
        return None
    with torch.no_grad():
        return branch.encode_plucker(plucker_tensor(traj, model.cfg.height, model.cfg.width_px))


def generate(model: VideoDiT, branch: ControlBranch | None, words: Sequence[str], traj: Trajectory | None,
             steps: int, seed: int, adapters: AdapterSet | None = None, first_frame: torch.Tensor | None = None,
             gate_fraction: float = GATE_FRACTION) -> torch.Tensor:
    """Sample one ``(1, T, H, W, 3)`` video in model space."""
    if branch is not None and traj is None:
        raise ValueError("a control branch requires a trajectory")
    control_for = make_control(branch, camera_tokens(model, branch, traj), gate_fraction)
    ids = prompt_ids(model, words)
    with applied(model, adapters):
        if first_frame is not None:
            return sample_i2v(model, ids, first_frame, steps, seed, control_for)
        return sample(model, ids, steps, seed, control_for)


def warmup_steps(n_steps: int, fraction: float) -> int:
    """``ceil(fraction * N)`` evaluated exactly on the decimal value of ``fraction``."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("warmup fraction must lie in [0, 1)")
    return math.ceil(Fraction(repr(float(fraction))) * n_steps)


@torch.no_grad()
def sample_with_warmup(model: VideoDiT, branch: ControlBranch | None, adapters: AdapterSet, words: Sequence[str],
                       generic_words: Sequence[str], traj: Trajectory | None, steps: int, seed: int,
                       warmup_fraction: float = 0.1, gate_fraction: float = GATE_FRACTION) -> torch.Tensor:
    """Customized sampling whose first ``ceil(f N)`` steps use the base model and the generic prompt."""
    control_for = make_control(branch, camera_tokens(model, branch, traj), gate_fraction)
    ids, generic = prompt_ids(model, words), prompt_ids(model, generic_words)
    warm = warmup_steps(steps, warmup_fraction)

    def predict(z, s, i):
        ctrl = control_for(s) if control_for is not None else None
        s_t = torch.full((z.shape[0],), s, dtype=z.dtype)
        if i < warm:
            return model(z, s_t, generic, ctrl)
        attach(model, adapters)
        try:
            return model(z, s_t, ids, ctrl)
        finally:
            detach(model)

    z = euler_integrate(initial_noise(model.cfg, seed), steps, predict)
    return z.clamp(-1.0, 1.0)
