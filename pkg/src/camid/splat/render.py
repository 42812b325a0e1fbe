"""EWA-style splat rendering of :class:`Scene` objects."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from camid.camera import CameraPose, Trajectory
from camid.splat._kernels import rasterize
from camid.splat.scene import Scene

NEAR = 0.05
DILATION = 0.3
FRUSTUM_SLACK = 1.3


@dataclass
class Projection:
    order: np.ndarray  # indices into the packed arrays, near to far
    means: np.ndarray
    conics: np.ndarray
    radii: np.ndarray
    depths: np.ndarray
    dmeans: np.ndarray | None = None
    dconics: np.ndarray | None = None


def _skew(v: np.ndarray) -> np.ndarray:
    """Batched cross-product matrices, ``(..., 3) -> (..., 3, 3)``."""
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([np.stack([z, -w, y], -1), np.stack([w, z, -x], -1), np.stack([-y, x, z], -1)], -2)


_GENERATORS = _skew(np.eye(3))  # [e_k]_x for k = 0..2


def project(means: np.ndarray, covs: np.ndarray, pose: CameraPose, with_tangents: bool = False) -> Projection:
    """Perspective projection with the local affine (Jacobian) covariance approximation.

    Tangents are derivatives w.r.t. a left perturbation ``exp(xi) * T_wc`` with
    ``xi = (rho, phi)`` expressed in the camera frame.
    """
    xc = means @ pose.R.T + pose.t
    lim_x = FRUSTUM_SLACK * 0.5 * pose.width / pose.fx
    lim_y = FRUSTUM_SLACK * 0.5 * pose.height / pose.fy
    with np.errstate(divide="ignore", invalid="ignore"):
        in_frustum = ((xc[:, 2] > NEAR) & (np.abs(xc[:, 0]) <= lim_x * xc[:, 2])
                      & (np.abs(xc[:, 1]) <= lim_y * xc[:, 2]))
    keep = np.nonzero(in_frustum)[0]
    xc = xc[keep]
    z = xc[:, 2]
    order_local = np.argsort(z, kind="stable")
    keep = keep[order_local]
    xc = xc[order_local]
    z = xc[:, 2]
    x, y = xc[:, 0], xc[:, 1]
    fx, fy = pose.fx, pose.fy
    n = len(keep)
    uv = np.stack([fx * x / z + pose.cx, fy * y / z + pose.cy], -1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z ** 2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z ** 2
    cov_c = pose.R @ covs[keep] @ pose.R.T
    cov2 = J @ cov_c @ np.swapaxes(J, 1, 2) + DILATION * np.eye(2)
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    inv = np.stack([cov2[:, 1, 1] / det, -cov2[:, 0, 1] / det, cov2[:, 0, 0] / det], -1)
    mid = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid ** 2 - det, 0.0))
    radii = 3.0 * np.sqrt(lam)
    proj = Projection(keep, uv, inv, radii, z)
    if not with_tangents:
        return proj

    # d xc / d xi : [I | -[xc]_x]
    dxc = np.zeros((n, 3, 6))
    dxc[:, :, :3] = np.eye(3)
    dxc[:, :, 3:] = -_skew(xc)
    du_dxc = np.stack([fx / z, np.zeros(n), -fx * x / z ** 2], -1)
    dv_dxc = np.stack([np.zeros(n), fy / z, -fy * y / z ** 2], -1)
    dmeans = np.stack([np.einsum("ni,nik->nk", du_dxc, dxc), np.einsum("ni,nik->nk", dv_dxc, dxc)], -1)

    # dJ / d xc_i, shape (n, 3[i], 2, 3)
    dJ = np.zeros((n, 3, 2, 3))
    dJ[:, 0, 0, 2] = -fx / z ** 2
    dJ[:, 1, 1, 2] = -fy / z ** 2
    dJ[:, 2, 0, 0] = -fx / z ** 2
    dJ[:, 2, 0, 2] = 2.0 * fx * x / z ** 3
    dJ[:, 2, 1, 1] = -fy / z ** 2
    dJ[:, 2, 1, 2] = 2.0 * fy * y / z ** 3
    dJ_dxi = np.einsum("niab,nik->nkab", dJ, dxc)  # (n, 6, 2, 3)
    dcov_c = np.zeros((n, 6, 3, 3))
    for k in range(3):
        G = _GENERATORS[k]
        dcov_c[:, 3 + k] = G @ cov_c + cov_c @ G.T
    Jt = np.swapaxes(J, 1, 2)[:, None]
    A = dJ_dxi @ cov_c[:, None] @ Jt
    dcov2 = A + np.swapaxes(A, -1, -2) + J[:, None] @ dcov_c @ Jt
    inv_m = np.stack([np.stack([inv[:, 0], inv[:, 1]], -1), np.stack([inv[:, 1], inv[:, 2]], -1)], -2)
    dinv = -inv_m[:, None] @ dcov2 @ inv_m[:, None]
    proj.dmeans = dmeans
    proj.dconics = np.stack([dinv[..., 0, 0], dinv[..., 0, 1], dinv[..., 1, 1]], -1)
    return proj


def _slots(subject_ids: np.ndarray) -> tuple[np.ndarray, list[int]]:
    labels = sorted(set(int(s) for s in subject_ids) | {0})
    lut = {s: i for i, s in enumerate(labels)}
    return np.array([lut[int(s)] for s in subject_ids], dtype=np.int64), labels


def _render(scene: Scene, pose: CameraPose, time: int, with_grad: bool):
    packed = scene.packed(time)
    proj = project(packed.means, packed.covs, pose, with_tangents=with_grad)
    slots, labels = _slots(packed.subject_ids)
    o = proj.order
    img, weights, T, dimg = rasterize(proj.means, proj.conics, packed.opacity[o], packed.colors[o], proj.radii,
                                      slots[o], len(labels), scene.lit_background(), pose.height, pose.width,
                                      proj.dmeans, proj.dconics)
    return img, weights, T, labels, dimg


def render_frame(scene: Scene, pose: CameraPose, time: int = 0) -> np.ndarray:
    """Render one ``(H, W, 3)`` frame in [0, 1]."""
    img, *_ = _render(scene, pose, time, False)
    return np.clip(img, 0.0, 1.0)


def render_frame_with_masks(scene: Scene, pose: CameraPose, time: int = 0) -> tuple[np.ndarray, np.ndarray, list[int]]:
    img, weights, T, labels, _ = _render(scene, pose, time, False)
    total = weights.sum(-1) + T
    masks = weights / total[..., None]
    masks[..., 0] = 1.0 - masks[..., 1:].sum(-1)  # background takes the residual
    return np.clip(img, 0.0, 1.0), np.moveaxis(masks, -1, 0), labels


def render_with_jacobian(scene: Scene, pose: CameraPose, time: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Frame plus its ``(H, W, 3, 6)`` derivative w.r.t. the pose perturbation."""
    img, _, _, _, dimg = _render(scene, pose, time, True)
    return img, np.swapaxes(dimg, -1, -2)


@dataclass
class MaskVideo:
    subject_ids: list[int]
    weights: np.ndarray  # (n_ids, T, H, W); row of id 0 is background

    def of(self, subject_id: int) -> np.ndarray:
        return self.weights[self.subject_ids.index(subject_id)]


def render_video(scene: Scene, traj: Trajectory) -> tuple[np.ndarray, MaskVideo]:
    """Render a clip along ``traj``; returns frames ``(T, H, W, 3)`` and per-subject masks."""
    if len(traj) != scene.frames and scene.frames != 1:
        raise ValueError(f"trajectory has {len(traj)} frames, scene clip has {scene.frames}")
    labels = sorted(set(scene.subject_ids) | {0})
    frames, masks = [], []
    for k, pose in enumerate(traj.poses):
        time = k if scene.frames > 1 else 0
        img, m, lab = render_frame_with_masks(scene, pose, time)
        full = np.zeros((len(labels),) + m.shape[1:])
        for row, sid in zip(m, lab):
            full[labels.index(sid)] = row
        frames.append(img)
        masks.append(full)
    return np.stack(frames), MaskVideo(labels, np.stack(masks, axis=1))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_frames(frames: np.ndarray, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(frames):
        Image.fromarray(to_uint8(f)).save(out / f"frame_{k:05d}.png")


def write_masks(masks: MaskVideo, out_dir: str | Path) -> None:
    out = Path(out_dir)
    for sid, track in zip(masks.subject_ids, masks.weights):
        sub = out / f"subject_{sid}"
        sub.mkdir(parents=True, exist_ok=True)
        for k, m in enumerate(track):
            Image.fromarray(to_uint8(m)).save(sub / f"frame_{k:05d}.png")


def read_frames(in_dir: str | Path) -> np.ndarray:
    files = sorted(Path(in_dir).glob("frame_*.png"))
    if not files:
        raise FileNotFoundError(f"no frames in {in_dir}")
    return np.stack([np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 255.0 for f in files])


def read_masks(in_dir: str | Path) -> MaskVideo:
    dirs = sorted(Path(in_dir).glob("subject_*"), key=lambda p: int(p.name.split("_")[1]))
    ids = [int(d.name.split("_")[1]) for d in dirs]
    w = np.stack([np.stack([np.asarray(Image.open(f), dtype=np.float64) / 255.0
                            for f in sorted(d.glob("frame_*.png"))]) for d in dirs])
    return MaskVideo(ids, w)
