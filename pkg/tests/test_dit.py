import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from camid.config_io import ModelConfig
from camid.dit import (IDENTITY_TOKENS, TOKEN_ID, VOCABULARY, LoRALinear, ShapeError, TrainingDiverged, VideoDiT,
                       checksum, detokenize, euler_integrate, initial_noise, interpolate, load_checkpoint, patchify,
                       positional_encoding, read_sidecar, sample, sample_i2v, save_checkpoint, step_times, to_model_space,
                       to_unit_range, tokenize, train_step, unpatchify)

TINY = ModelConfig(blocks=2, width=16, heads=2, frames=4, height=8, width_px=8, max_prompt=6)


def _model(cfg=TINY, seed=0, randomize_head=True):
    torch.manual_seed(seed)
    m = VideoDiT(cfg)
    if randomize_head:  # zero-init output layers would make most gradients vanish
        with torch.no_grad():
            for p in list(m.final.parameters()) + list(m.final_ada.parameters()):
                p.normal_(0, 0.1)
    return m


def _ids(words=("a", "person", "in", "studio"), cfg=TINY):
    return torch.tensor([tokenize(list(words), cfg.max_prompt)])


def test_vocabulary_and_tokenizer():
    assert VOCABULARY[0] == "<pad>" and len(set(VOCABULARY)) == len(VOCABULARY)
    ids = tokenize(["a", "SUBJ_1", "in", "studio"], 8)
    assert len(ids) == 8 and detokenize(ids) == ["a", "SUBJ_1", "in", "studio"]
    with pytest.raises(ValueError):
        tokenize(["a", "dragon"])
    with pytest.raises(ValueError):
        tokenize(["SUBJ_1", "SUBJ_1"])
    with pytest.raises(ValueError):
        tokenize(["a"] * 9, 8)
    assert set(IDENTITY_TOKENS) <= set(TOKEN_ID)


@given(st.integers(1, 3), st.sampled_from([(1, 1), (2, 2), (2, 4), (4, 4)]))
def test_patchify_roundtrip(batch, patch):
    pt, ps = patch
    v = torch.randn(batch, 4, 8, 8, 3)
    tok = patchify(v, pt, ps)
    assert tok.shape == (batch, (4 // pt) * (8 // ps) ** 2, pt * ps * ps * 3)
    assert torch.equal(unpatchify(tok, (4 // pt, 8 // ps, 8 // ps), pt, ps), v)


def test_patchify_rejects_indivisible():
    with pytest.raises(ShapeError):
        patchify(torch.zeros(1, 3, 8, 8, 3), 2, 4)


def test_token_count_arithmetic():
    cfg = ModelConfig()
    assert cfg.token_grid == (8, 16, 16)
    assert cfg.n_video_tokens == 2048
    m = VideoDiT(TINY)
    x = m.embed_video(torch.zeros(1, 4, 8, 8, 3))
    assert x.shape == (1, TINY.n_video_tokens, TINY.width) and TINY.n_video_tokens == 2 * 2 * 2
    assert m.embed_text(_ids()).shape == (1, TINY.max_prompt, TINY.width)


def test_positional_encoding_layout():
    pe = positional_encoding((2, 3, 4), 128)
    assert pe.shape == (24, 128)
    assert np.allclose(pe[0, :42], pe[12, :42]) is False  # t axis differs across t
    np.testing.assert_array_equal(pe[0, 42:], pe[12, 42:])  # same (h, w)


def test_forward_shapes_and_errors():
    m = _model()
    z = torch.randn(2, 4, 8, 8, 3)
    out = m(z, torch.tensor([0.3, 0.7]), _ids().expand(2, -1))
    assert out.shape == z.shape
    with pytest.raises(ShapeError):
        m(torch.randn(1, 4, 16, 16, 3), torch.tensor([0.5]), _ids())
    with pytest.raises(ShapeError):
        m(z[:1], torch.tensor([0.5]), _ids(), control=[torch.zeros(1)] * (m.n_control + 1))


def test_zero_init_head_starts_at_zero_velocity():
    m = _model(randomize_head=False)
    out = m(torch.randn(1, 4, 8, 8, 3), torch.tensor([0.5]), _ids())
    assert torch.count_nonzero(out) == 0



def test_interpolant_endpoints():
    x, e = torch.randn(2, 4, 8, 8, 3), torch.randn(2, 4, 8, 8, 3)
    assert torch.equal(interpolate(x, e, torch.zeros(2)), x)
    assert torch.equal(interpolate(x, e, torch.ones(2)), e)


def test_step_times():
    assert step_times(4) == [1.0, 0.75, 0.5, 0.25, 0.0]


@pytest.mark.parametrize("n", [1, 10, 50])
def test_oracle_sampling_reconstructs(n):
    x = torch.rand(1, 16, 64, 64, 3) * 2 - 1
    z = initial_noise(ModelConfig(), 3)
    out = euler_integrate(z, n, lambda zz, s, i: (zz - x) / s)
    assert (out - x).abs().max().item() <= 1e-4


def test_train_step_gradient_matches_finite_differences():
    m = _model().double()
    g = torch.Generator().manual_seed(1)
    video = torch.rand(1, 4, 8, 8, 3, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(1, 4, 8, 8, 3, generator=g, dtype=torch.float64)
    s = torch.tensor([0.4], dtype=torch.float64)
    ids = _ids()
    loss = train_step(m, video, ids, s, eps)
    loss.backward()
    params = [m.patch_embed.weight, m.blocks[0].qkv.weight, m.blocks[1].fc1.weight, m.blocks[0].ada.weight, m.final.weight]
    rng = np.random.default_rng(0)
    for p in params:
        direction = torch.from_numpy(rng.normal(size=p.shape))
        analytic = float((p.grad * direction).sum())
        h = 1e-5
        with torch.no_grad():
            p += h * direction
            up = float(train_step(m, video, ids, s, eps))
            p -= 2 * h * direction
            down = float(train_step(m, video, ids, s, eps))
            p += h * direction
        fd = (up - down) / (2 * h)
        assert abs(analytic - fd) <= 0.01 * abs(fd) + 1e-12


def test_train_step_frame0_clean_masks_first_frame():
    m = _model()
    video = torch.rand(1, 4, 8, 8, 3) * 2 - 1
    eps = torch.randn(1, 4, 8, 8, 3)
    video.requires_grad_(True)
    loss = train_step(m, video, _ids(), torch.tensor([0.5]), eps, frame0_clean=True)
    assert torch.isfinite(loss)


def test_train_step_nan_raises():
    m = _model()
    video = torch.full((1, 4, 8, 8, 3), float("nan"))
    with pytest.raises(TrainingDiverged):
        train_step(m, video, _ids(), torch.tensor([0.5]), torch.randn(1, 4, 8, 8, 3))


def test_sampling_deterministic():
    m = _model()
    a = sample(m, _ids(), 4, seed=5)
    b = sample(m, _ids(), 4, seed=5)
    assert torch.equal(a, b)
    assert not torch.equal(a, sample(m, _ids(), 4, seed=6))


def test_i2v_keeps_first_frame():
    m = _model()
    first = torch.rand(8, 8, 3) * 2 - 1
    out = sample_i2v(m, _ids(), first, 5, 1)
    assert torch.equal(out[0, 0], first.clamp(-1, 1))
    with pytest.raises(ShapeError):
        sample_i2v(m, _ids(), torch.zeros(4, 4, 3), 5, 1)


def test_lora_linear_delta():
    lin = LoRALinear(4, 3)
    x = torch.randn(2, 4)
    base = lin(x)
    A, B = torch.randn(2, 4), torch.randn(3, 2)
    lin.lora = (A, B, 0.5)
    torch.testing.assert_close(lin(x), base + 0.5 * x @ A.T @ B.T)
    assert all(isinstance(l, LoRALinear) for l in _model().lora_layers().values())


def test_checkpoint_roundtrip(tmp_path):
    m = _model()
    digest = save_checkpoint(m, tmp_path / "m", TINY.model_dump(mode="json"), "base", {"seed": 0})
    back = load_checkpoint(tmp_path / "m")
    assert checksum(back) == checksum(m)
    meta = read_sidecar(tmp_path / "m")
    assert meta["weights_sha256"] == digest and meta["stage"] == "base"


def test_unit_range_conversion():
    v = np.random.default_rng(0).random((2, 4, 4, 3))
    np.testing.assert_allclose(to_unit_range(to_model_space(v)), v, atol=1e-6)
