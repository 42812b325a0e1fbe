import sys

import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("camid", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("camid")
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


TINY_DATA = dict(frames=4, resolution=16, videos_per_subject=4, sequences_per_subject=2, relit_per_subject=1,
                 joint_videos=2, general_videos=10, probe_videos=2, reference_views=4)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small general + two-subject datasets at 4 x 16 x 16."""
    from camid.config_io import DataConfig
    from camid.data import load_manifest
    from camid.scenegen import IdentityDescriptor, build_dataset, build_general_dataset
    root = tmp_path_factory.mktemp("data")
    cfg = DataConfig(**TINY_DATA)
    build_general_dataset(cfg, 0, root / "general")
    build_dataset([IdentityDescriptor(101), IdentityDescriptor(202)], cfg, 0, root / "subjects")
    return load_manifest(root / "general"), load_manifest(root / "subjects")


@pytest.fixture(scope="session")
def tiny_cfg():
    from camid.config_io import ModelConfig
    return ModelConfig(blocks=4, width=32, heads=2, frames=4, height=16, width_px=16, max_prompt=8)


@pytest.fixture
def tiny_model(tiny_cfg):
    from camid.dit import VideoDiT
    torch.manual_seed(0)
    m = VideoDiT(tiny_cfg)
    with torch.no_grad():  # a non-trivial "pretrained" head
        for p in list(m.final.parameters()) + list(m.final_ada.parameters()):
            p.normal_(0, 0.05)
    m.eval()
    return m


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
