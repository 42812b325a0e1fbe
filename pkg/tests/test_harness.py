import json
import math

import numpy as np
import pytest
import torch

from camid.camera import TrajectoryConfig, sample_trajectory
from camid.config_io import DataConfig
from camid.harness.embedder import (CROP, build_embedder_data, crops_for, load_embedder, prepare_crop,
                                    save_embedder, train_embedder)
from camid.harness.experiment import judge, summarize_pairs
from camid.harness.metrics import (aggregate_references, camera_errors, embedder_margin, identity_score,
                                   temporal_consistency)
from camid.harness.report import COLUMNS, format_table, parse_report, report
from camid.scenegen import IdentityDescriptor, STUDIO, make_scene, make_subject, probe_scene, reference_poses, \
    subject_centers
from camid.splat.render import render_frame, render_video

SEEDS = [11, 22]


def _refs(seed, n=6):
    sc = make_scene([make_subject(IdentityDescriptor(seed), 0, 1)], 5, setting=STUDIO, frames=1)
    return np.stack([render_frame(sc, p, 0) for p in reference_poses(DataConfig(), subject_centers(sc)[1], n)])


@pytest.fixture(scope="module")
def embedder():
    data = build_embedder_data(SEEDS, 0, views=40, others=8)
    return train_embedder(data, len(SEEDS), 300, 0)


def test_embedder_separates_subjects(embedder):
    m = embedder_margin(embedder, SEEDS, [_refs(s) for s in SEEDS], 99, views=6)
    assert m["intra"] > m["inter"] and m["margin"] > 0.1


def test_identity_score_self_match(embedder):
    refs = _refs(11)
    s = identity_score(embedder, refs[:2], refs)
    assert s.defined and s.frames_used == 2 and s.score > 0.99


def test_identity_score_undefined_without_subject(embedder):
    blank = np.full((3, 64, 64, 3), 0.5)
    s = identity_score(embedder, blank, _refs(11))
    assert not s.defined and math.isnan(s.score)


def test_temporal_consistency_bounds(embedder):
    rng = np.random.default_rng(0)
    still = np.repeat(rng.random((1, 64, 64, 3)), 4, 0)
    assert temporal_consistency(embedder, still) == pytest.approx(1.0, abs=1e-5)
    assert temporal_consistency(embedder, rng.random((8, 64, 64, 3))) < 0.9
    with pytest.raises(ValueError):
        temporal_consistency(embedder, still[:1])


def test_embedder_roundtrip(tmp_path, embedder):
    save_embedder(embedder, tmp_path / "e", {"seed": 0})
    back = load_embedder(tmp_path / "e")
    x = torch.rand(3, 3, CROP, CROP)
    with torch.no_grad():
        torch.testing.assert_close(back.embed(x), embedder.embed(x))


def test_crops():
    img = np.zeros((64, 64, 3))
    mask = np.zeros((64, 64), bool)
    mask[10:20, 30:36] = True
    c = prepare_crop(img, mask)
    assert c.shape == (3, CROP, CROP)
    crops, keep = crops_for(img[None], mask[None])
    assert keep == [0] and crops.shape == (1, 3, CROP, CROP)
    assert crops_for(img[None], np.zeros((1, 64, 64)))[1] == []


def test_aggregate_is_max():
    assert aggregate_references([0.1, 0.7, 0.3]) == 0.7


def test_camera_errors_on_ground_truth():
    traj = sample_trajectory(1, TrajectoryConfig(frames=4, look_at=(0, -0.8, 0)))
    scene = probe_scene(0, 4)
    video, _ = render_video(scene, traj)
    rep = camera_errors([video], scene, [traj], max_iters=5)
    assert rep.trans_err < 1e-6 and rep.rot_err < 1e-6 and not rep.flagged


def test_report_golden():
    rows = [{"run": "a", "identity": 0.5, "trans_err": float("nan"), "rot_err": None, "temporal": 0.25,
             "config_hash": "abc", "seed": 3, "checkpoint": "x/y", "note": "hi"}]
    table, text = report(rows)
    assert table.splitlines()[0] == "| " + " | ".join(COLUMNS) + " |"
    assert "| a   | 0.5000   | nan       | -       | 0.2500   | abc         | 3    | x/y        |" in table
    obj = json.loads(text)
    assert obj["columns"] == list(COLUMNS)
    assert obj["rows"][0]["trans_err"] is None and obj["rows"][0]["extra"] == {"note": "hi"}
    back = parse_report(text)
    assert back[0]["note"] == "hi" and back[0]["identity"] == 0.5
    assert format_table([]) .count("\n") == 1


def test_table_keeps_long_run_names():
    table = format_table([{"run": "cam_customized_static", "checkpoint": "0123456789abcdef0123"}])
    assert "cam_customized_static" in table and "0123456789ab " in table


def test_summarize_pairs_assignment():
    rows = [{"scores": [[0.2, 0.9], [0.8, 0.1]]}, {"scores": [[float("nan"), 0.1], [0.2, 0.3]]}]
    fixed = summarize_pairs(rows, fixed=True)
    free = summarize_pairs(rows, fixed=False)
    assert fixed["identity"] == pytest.approx(0.15) and free["identity"] == pytest.approx(0.85)
    assert fixed["scored_samples"] == 1 and fixed["cooccurrence"] == 0.5


def _results(**over):
    base = {"cam_pretrained": {"trans_err": 0.3, "rot_err": 0.1}, "cam_uncond": {"trans_err": 0.5, "rot_err": 0.2},
            "cam_customized": {"trans_err": 0.35, "rot_err": 0.12},
            "cam_customized_static": {"trans_err": 0.6, "rot_err": 0.3},
            "id_token": {"identity": 0.8}, "id_no_token": {"identity": 0.5},
            "id_side_multiview": {"identity": 0.7}, "id_side_frontal": {"identity": 0.6},
            "blend": {"identity": 0.7, "region_own": [0.7, 0.7], "region_other": [0.4, 0.5]},
            "joint": {"identity": 0.72}}
    base.update(over)
    return base


def test_judge_directions():
    verdict = judge(_results(), {"margin": 0.3})
    assert all(verdict.values())
    bad = judge(_results(cam_uncond={"trans_err": 0.2, "rot_err": 0.2}, joint={"identity": 0.9}), {"margin": 0.05})
    assert not bad["a_camera_vs_uncond"] and not bad["b_token_gain"] and not bad["f_blend_regions"]
