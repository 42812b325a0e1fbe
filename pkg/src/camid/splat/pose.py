"""Photometric SE(3) refinement of a camera against a known scene."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from camid.camera import CameraPose
from camid.splat.render import render_frame, render_with_jacobian
from camid.splat.scene import Scene


def _hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponential map of ``xi = (rho, phi)``; returns ``(R, t)``."""
    rho, phi = np.asarray(xi[:3], dtype=np.float64), np.asarray(xi[3:], dtype=np.float64)
    theta = np.linalg.norm(phi)
    W = _hat(phi)
    if theta < 1e-8:
        R = np.eye(3) + W + 0.5 * W @ W
        V = np.eye(3) + 0.5 * W + W @ W / 6.0
    else:
        a = np.sin(theta) / theta
        b = (1 - np.cos(theta)) / theta ** 2
        c = (theta - np.sin(theta)) / theta ** 3
        R = np.eye(3) + a * W + b * W @ W
        V = np.eye(3) + b * W + c * W @ W
    return R, V @ rho


def perturb(pose: CameraPose, xi: np.ndarray) -> CameraPose:
    """Left-compose ``exp(xi)`` (camera frame) onto the world-to-camera pose."""
    dR, dt = se3_exp(xi)
    return pose.with_extrinsics(dR @ pose.R, dR @ pose.t + dt)


def photometric_loss(scene: Scene, pose: CameraPose, time: int, target: np.ndarray) -> float:
    return float(np.mean((render_frame(scene, pose, time) - target) ** 2))


def _loss_grad_jac(scene, pose, time, target):
    img, jac = render_with_jacobian(scene, pose, time)
    r = (img - target).reshape(-1)
    J = jac.reshape(-1, 6)
    n = r.size
    return float(r @ r / n), 2.0 * (J.T @ r) / n, J, n


def render_gradients(scene: Scene, pose: CameraPose, time: int, loss_pixels: np.ndarray) -> np.ndarray:
    """Gradient of the mean squared pixel error w.r.t. a 6-vector pose perturbation."""
    _, g, _, _ = _loss_grad_jac(scene, pose, time, np.asarray(loss_pixels, dtype=np.float64))
    return g


@dataclass
class PoseEstimate:
    pose: CameraPose
    final_loss: float
    converged: bool
    losses: list[float] = field(default_factory=list)


def estimate_pose(target: np.ndarray, scene: Scene, time: int, init: CameraPose, max_iters: int = 50,
                  lr: float = 1.0, tol: float = 1e-4, damping: float = 1e-3, max_halvings: int = 12) -> PoseEstimate:
    """Descend the photometric loss over SE(3) from ``init``.

    Each iteration takes a damped Gauss-Newton step (a gradient step
    preconditioned by ``J^T J + damping * I``), re-linearized at the current
    estimate, and halves it until the loss decreases. The accepted losses are
    monotone non-increasing and the best pose seen is returned.
    """
    target = np.asarray(target, dtype=np.float64)
    if not scene.gaussians:
        loss = photometric_loss(scene, init, time, target)
        return PoseEstimate(init, loss, False, [loss])
    pose = init
    loss, g, J, n = _loss_grad_jac(scene, pose, time, target)
    losses = [loss]
    for _ in range(max_iters):
        if loss <= 1e-12 or not np.any(g):
            break
        H = 2.0 * (J.T @ J) / n
        H += damping * (np.trace(H) / 6.0 + 1e-12) * np.eye(6)
        step = -lr * np.linalg.solve(H, g)
        accepted = False
        for _ in range(max_halvings):
            cand = perturb(pose, step)
            cand_loss = photometric_loss(scene, cand, time, target)
            if cand_loss < loss:
                accepted = True
                break
            step = step * 0.5
        if not accepted:
            break
        improvement = loss - cand_loss
        pose = cand
        loss, g, J, n = _loss_grad_jac(scene, pose, time, target)
        losses.append(loss)
        if improvement < 1e-10 * max(loss, 1e-12):
            break
    return PoseEstimate(pose, loss, loss <= tol, losses)
