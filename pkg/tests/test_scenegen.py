import hashlib
from pathlib import Path

import numpy as np
import pytest

from camid.config_io import DataConfig
from camid.dit import TOKEN_ID
from camid.scenegen import (DatasetManifest, IdentityDescriptor, MOTIONS, build_dataset, build_general_dataset,
                            lighting_word, make_scene, make_subject, relight_augment, subject_centers, subject_token)
from camid.splat.render import read_frames

SMALL = DataConfig(frames=4, resolution=32, videos_per_subject=3, sequences_per_subject=2, relit_per_subject=1,
                   joint_videos=1, general_videos=5, probe_videos=2, reference_views=3)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_default_customization_set_has_84_videos(tmp_path):
    m = build_dataset([IdentityDescriptor(11), IdentityDescriptor(12)], DataConfig(), 0, tmp_path / "d")
    assert len(m.entries) == 84
    assert sum(e["name"].startswith("joint") for e in m.entries) == 4
    assert sum("relit" in e["name"] for e in m.entries) == 16
    assert sorted(m.references) == [1, 2] and all(len(v) == 10 for v in m.references.values())


def test_dataset_build_is_bitwise_deterministic(tmp_path):
    subs = [IdentityDescriptor(3), IdentityDescriptor(4)]
    build_dataset(subs, SMALL, 7, tmp_path / "a")
    build_dataset(subs, SMALL, 7, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    build_dataset(subs, SMALL, 8, tmp_path / "c")
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "c")


def test_manifest_contents(tmp_path):
    m = build_dataset([IdentityDescriptor(3), IdentityDescriptor(4)], SMALL, 1, tmp_path)
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert back.entries == m.entries
    for e in back.entries:
        frames = read_frames(back.path(e["video_dir"]))
        assert frames.shape == (4, 32, 32, 3)
        assert all(w in TOKEN_ID for w in e["prompt_tokens"])
        toks = [subject_token(s) for s in e["subject_ids"]]
        assert all(t in e["prompt_tokens"] for t in toks)
    joint = [e for e in back.entries if e["name"].startswith("joint")]
    assert joint and joint[0]["subject_ids"] == [1, 2]


def test_general_set_has_no_subject_tokens(tmp_path):
    m = build_general_dataset(SMALL, 2, tmp_path)
    assert len(m.entries) == 7
    for e in m.entries:
        assert not any(w.startswith("SUBJ_") for w in e["prompt_tokens"])
    probes = [e for e in m.entries if e["name"].startswith("probe")]
    assert probes and all(e["prompt_tokens"] == ["a", "SCENE_1", "scene"] for e in probes)
    assert (tmp_path / "probe_scene.json").exists()


def test_empty_subject_list_rejected(tmp_path):
    with pytest.raises(ValueError):
        build_dataset([], SMALL, 0, tmp_path / "x")


def test_identities_are_distinct_and_stable():
    a, b = IdentityDescriptor(1).signature, IdentityDescriptor(2).signature
    assert a == IdentityDescriptor(1).signature
    assert a["front_colors"] != b["front_colors"]


def test_subject_motion_and_placement():
    gs1 = make_subject(IdentityDescriptor(1), 5, 8, subject_id=1)
    gs2 = make_subject(IdentityDescriptor(2), 6, 8, subject_id=2)
    scene = make_scene([gs1, gs2], 3, frames=8)
    for t in range(8):
        c = subject_centers(scene, t)
        d = c[1] - c[2]
        assert np.hypot(d[0], d[2]) >= 0.5
    with pytest.raises(ValueError):
        make_subject(IdentityDescriptor(1), 0, 0)


def test_relight_keeps_geometry():
    scene = make_scene([make_subject(IdentityDescriptor(1), 5, 2)], 3, frames=2)
    lit = relight_augment(scene, 9)
    np.testing.assert_array_equal(lit.packed(0).means, scene.packed(0).means)
    assert lighting_word(lit.lighting) in ("bright", "dim", "warm", "cool")
    assert lighting_word(scene.lighting) is None


def test_motion_vocabulary():
    assert set(MOTIONS) <= set(TOKEN_ID)
