"""Rasterizer timing: numba kernel vs the pure-numpy fallback.

    python benchmarks/bench_render.py [--repeats 5]

Both paths render the same frames; the script also reports the largest
pixel difference between them.
"""
import argparse
import time

import numpy as np

from camid import _accel
from camid.camera import TrajectoryConfig, sample_trajectory
from camid.config_io import DataConfig
from camid.scenegen import IdentityDescriptor, STUDIO, make_scene, make_subject
from camid.splat.render import render_frame, render_with_jacobian


def _scene(cfg: DataConfig):
    gs = make_subject(IdentityDescriptor(3), 7, cfg.frames, subject_id=1)
    return make_scene([gs], 11, setting=STUDIO, frames=cfg.frames)


def _time(fn, repeats: int) -> float:
    fn()  # warm-up (jit compile / cache load)
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    cfg = DataConfig()
    scene = _scene(cfg)
    traj = sample_trajectory(0, TrajectoryConfig(frames=4, width=cfg.resolution, height=cfg.resolution))
    pose = traj.poses[0]

    results = {}
    for label, flag in (("numba", True), ("numpy", False)):
        _accel.NUMBA_ENABLED = flag
        img = render_frame(scene, pose, 0)
        results[label] = (
            _time(lambda: render_frame(scene, pose, 0), args.repeats),
            _time(lambda: render_with_jacobian(scene, pose, 0), args.repeats),
            img,
        )
    _accel.NUMBA_ENABLED = True

    print(f"{'path':<8}{'render [ms]':>14}{'render+jac [ms]':>18}")
    for label, (t_fwd, t_jac, _) in results.items():
        print(f"{label:<8}{1e3 * t_fwd:>14.2f}{1e3 * t_jac:>18.2f}")
    fwd = results["numpy"][0] / results["numba"][0]
    jac = results["numpy"][1] / results["numba"][1]
    print(f"speedup  {fwd:.1f}x forward, {jac:.1f}x with jacobian")
    print(f"max |numba - numpy| = {np.abs(results['numba'][2] - results['numpy'][2]).max():.2e}")


if __name__ == "__main__":
    main()
