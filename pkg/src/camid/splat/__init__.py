"""Gaussian scene rendering and photometric pose refinement."""
from camid.splat.pose import PoseEstimate, estimate_pose, perturb, photometric_loss, render_gradients, se3_exp
from camid.splat.render import (MaskVideo, project, read_frames, read_masks, render_frame, render_frame_with_masks,
                                render_video, render_with_jacobian, write_frames, write_masks)
from camid.splat.scene import Gaussian4D, LightingParams, Scene

__all__ = [
    "Gaussian4D", "LightingParams", "MaskVideo", "PoseEstimate", "Scene", "estimate_pose", "perturb",
    "photometric_loss", "project", "read_frames", "read_masks", "render_frame", "render_frame_with_masks",
    "render_gradients", "render_video", "render_with_jacobian", "se3_exp", "write_frames", "write_masks",
]
