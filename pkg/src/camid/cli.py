"""Command-line entry point: ``camid <command> [--config PATH] [--seed N] [--out DIR] ...``.

Exit codes: 0 success, 2 validation failure, 3 non-convergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from pydantic import ValidationError

from camid.config_io import ConfigError, RunConfig, load_config, parse_config, write_json
from camid.harness.experiment import EmbedderGate

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3


class NonConvergence(RuntimeError):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else parse_config({})
    if getattr(args, "seed", None) is not None:
        cfg = cfg.model_copy(update={"master_seed": args.seed})
    return cfg


def _out(args, cfg: RunConfig) -> Path:
    return Path(args.out) if getattr(args, "out", None) else cfg.resolved_output_root()


def cmd_gen_data(args) -> int:
    from camid.scenegen import IdentityDescriptor, build_dataset, build_general_dataset
    from camid.harness.experiment import Experiment
    cfg = _config(args)
    out = _out(args, cfg)
    if args.kind in ("general", "all"):
        build_general_dataset(cfg.data, cfg.master_seed, out / "general", args.jobs)
    if args.kind in ("subjects", "all"):
        seeds = Experiment(cfg, out).subject_seeds
        build_dataset([IdentityDescriptor(s) for s in seeds], cfg.data, cfg.master_seed, out / "subjects", args.jobs)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from camid.harness.experiment import Experiment
    cfg = _config(args)
    exp = Experiment(cfg, _out(args, cfg), args.jobs)
    exp.base()
    exp.branch()
    print(json.dumps({"base": str(exp.root / "ckpt/base/model.bin"),
                      "branch": str(exp.root / "ckpt/branch/branch.bin")}, indent=2))
    return EXIT_OK


def _load_stack(base: str, branch: str | None):
    from camid.camctrl import load_branch
    from camid.dit import load_checkpoint
    model = load_checkpoint(base)
    for p in model.parameters():
        p.requires_grad_(False)
    return model, (load_branch(branch, model) if branch else None)


def cmd_customize(args) -> int:
    from camid.customize import customize, customize_i2v
    from camid.data import VideoData, load_manifest
    cfg = _config(args)
    model, branch = _load_stack(args.base, args.branch)
    subj = VideoData(load_manifest(args.data), model.cfg.max_prompt, select=lambda e: args.token in e["prompt_tokens"])
    reg = VideoData(load_manifest(args.reg), model.cfg.max_prompt) if args.reg else None
    fn = customize_i2v if args.i2v else customize
    adapters, log = fn(model, branch, subj, reg, cfg.customize, args.token, cfg.master_seed)
    out = _out(args, cfg)
    adapters.save(out / "adapters", {"customize": cfg.customize.model_dump(mode="json"), "token": args.token,
                                     "i2v": args.i2v})
    write_json(out / "losses.json", {"losses": log.losses, **log.extras})
    return EXIT_OK


def cmd_sample(args) -> int:
    from camid.camera import Trajectory
    from camid.customize import AdapterSet
    from camid.dit import to_model_space, to_unit_range
    from camid.pipeline import generate
    from camid.splat.render import read_frames, write_frames
    cfg = _config(args)
    model, branch = _load_stack(args.base, args.branch)
    adapters = AdapterSet.load(args.adapters, model) if args.adapters else None
    traj = Trajectory.load(args.traj) if args.traj else None
    first = None
    if args.first_frame:
        src = Path(args.first_frame)
        img = read_frames(src)[0] if src.is_dir() else np.asarray(Image.open(src).convert("RGB"), np.float64) / 255.0
        first = to_model_space(img)
    video = generate(model, branch, args.prompt.split(), traj, args.steps or cfg.eval.sampler_steps,
                     cfg.master_seed, adapters, first)
    write_frames(to_unit_range(video[0]), _out(args, cfg))
    return EXIT_OK


def cmd_blend(args) -> int:
    from camid.blend import BlendPlan, blended_sample, complete_masks, layout_pass
    from camid.camera import Trajectory
    from camid.customize import AdapterSet
    from camid.dit import to_unit_range
    from camid.splat.render import MaskVideo, write_frames, write_masks
    cfg = _config(args)
    plan = BlendPlan.load(args.plan)
    model, branch = _load_stack(plan.base, plan.branch or None)
    adapters = [AdapterSet.load(p, model) for p in plan.adapters]
    traj = Trajectory.load(args.traj)
    layout, raw = layout_pass(model, branch, plan, traj)
    masks = complete_masks(raw)
    video = blended_sample(model, branch, plan, adapters, masks, traj)
    out = _out(args, cfg)
    write_frames(to_unit_range(layout[0]), out / "layout")
    write_masks(MaskVideo(list(range(1, len(masks) + 1)), masks), out / "masks")
    write_frames(to_unit_range(video[0]), out / "video")
    return EXIT_OK


def cmd_render(args) -> int:
    from camid.camera import Trajectory
    from camid.splat.render import render_video, write_frames, write_masks
    from camid.splat.scene import Scene
    cfg = _config(args)
    video, masks = render_video(Scene.load(args.scene), Trajectory.load(args.traj))
    out = _out(args, cfg)
    write_frames(video, out / "video")
    write_masks(masks, out / "masks")
    return EXIT_OK


def _print_report(rows: list[dict], out: Path) -> None:
    from camid.harness.report import report
    table, text = report(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(table + "\n")
    (out / "report_table.json").write_text(text + "\n")
    print(table)


def cmd_eval(args) -> int:
    from camid.harness.experiment import Experiment
    cfg = _config(args)
    exp = Experiment(cfg, _out(args, cfg), args.jobs)
    res = exp.run()
    rows = list(res["results"].values())
    _print_report(rows, exp.root)
    print(json.dumps(res["criteria"], indent=2))
    if any(r.get("flagged") for r in rows):
        raise NonConvergence("pose estimation failed on more than 25% of frames for at least one run")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from camid.harness.experiment import run_ablation
    cfg = _config(args)
    res = run_ablation(args.name, cfg, cfg.master_seed, _out(args, cfg))
    rows = [dict(res["treatment"], arm="treatment"), dict(res["control"], arm="control")]
    _print_report(rows, _out(args, cfg) / "ablations" / args.name)
    print(f"control better: {res['control_better']}")
    if any(r.get("flagged") for r in rows):
        raise NonConvergence("pose estimation failed on more than 25% of frames")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="RunConfig JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed override")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel render workers")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="camid", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render general and customization datasets")
    p.add_argument("--kind", choices=("general", "subjects", "all"), default="all")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="train backbone, then the camera branch")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("customize", parents=[common], help="fit an adapter set for one identity token")
    p.add_argument("--base", required=True)
    p.add_argument("--branch")
    p.add_argument("--data", required=True)
    p.add_argument("--reg")
    p.add_argument("--token", required=True)
    p.add_argument("--i2v", action="store_true")
    p.set_defaults(fn=cmd_customize)

    p = sub.add_parser("sample", parents=[common], help="generate one video")
    p.add_argument("--base", required=True)
    p.add_argument("--branch")
    p.add_argument("--adapters")
    p.add_argument("--prompt", required=True)
    p.add_argument("--traj")
    p.add_argument("--steps", type=int)
    p.add_argument("--first-frame")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("blend", parents=[common], help="two-pass noise-blended multi-subject sampling")
    p.add_argument("--plan", required=True)
    p.add_argument("--traj", required=True)
    p.set_defaults(fn=cmd_blend)

    p = sub.add_parser("eval", parents=[common], help="run the cached end-to-end experiment and report")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", parents=[common], help="render a scene along a trajectory")
    p.add_argument("--scene", required=True)
    p.add_argument("--traj", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("ablate", parents=[common], help="paired ablation report")
    p.add_argument("--name", required=True)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        return args.fn(args)
    except (ConfigError, ValidationError, ValueError, FileNotFoundError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except EmbedderGate as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except NonConvergence as err:
        print(f"non-convergence: {err}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except RuntimeError as err:
        from camid.dit import TrainingDiverged
        if isinstance(err, TrainingDiverged):
            print(f"training diverged: {err}", file=sys.stderr)
            return EXIT_NONCONVERGED
        raise


if __name__ == "__main__":
    sys.exit(main())
