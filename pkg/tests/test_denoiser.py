import json

import numpy as np
import pytest
import torch

from lesionfill.denoiser import (
    CHANNEL_ORDER,
    VOID_VALUE,
    ConditioningBundle,
    DenoiserSpec,
    SinusoidalTimeEmbedding,
    UNetDenoiser,
    ZConv,
    build_denoiser,
    load_checkpoint,
    make_conditioning_input,
    predict_noise,
    save_checkpoint,
)
from lesionfill.diffusion import DiffusionConfig

TINY = DenoiserSpec(
    image_size=32,
    channels_per_stage=(8, 16, 16),
    res_blocks_per_stage=1,
    attention_resolution=8,
    time_embed_dim=32,
)


class TestDenoiserSpec:
    def test_default_spec_valid(self):
        spec = DenoiserSpec()
        spec.validate()
        assert spec.num_resolutions == 6
        # 256 -> 128 -> 64 -> 32 -> 16: attention sits at stage index 4
        assert spec.attention_stages() == (4,)

    def test_tiny_attention_stage(self):
        # 32 -> 16 -> 8: resolution 8 is stage index 2
        assert TINY.attention_stages() == (2,)

    def test_invalid_in_channels(self):
        with pytest.raises(ValueError, match="in_channels"):
            DenoiserSpec(in_channels=2).validate()

    def test_indivisible_image_size(self):
        with pytest.raises(ValueError, match="divisible"):
            DenoiserSpec(image_size=100).validate()

    def test_dict_round_trip(self):
        spec = DenoiserSpec(in_channels=3, pseudo3d=True)
        assert DenoiserSpec.from_dict(spec.to_dict()) == spec


class TestTimeEmbedding:
    def test_t_zero_is_sin0_cos0(self):
        emb = SinusoidalTimeEmbedding(8)(torch.zeros(1))
        assert torch.allclose(emb[0, :4], torch.zeros(4))
        assert torch.allclose(emb[0, 4:], torch.ones(4))

    def test_first_frequency_is_unit(self):
        t = torch.tensor([0.5])
        emb = SinusoidalTimeEmbedding(8)(t)
        assert emb[0, 0] == pytest.approx(np.sin(0.5), abs=1e-6)

    def test_distinct_timesteps_distinct_embeddings(self):
        emb = SinusoidalTimeEmbedding(64)(torch.tensor([1.0, 2.0, 500.0]))
        assert not torch.allclose(emb[0], emb[1])
        assert not torch.allclose(emb[1], emb[2])


class TestZConv:
    def test_shape_preserved(self):
        x = torch.randn(5, 4, 8, 8)
        assert ZConv(4).forward(x).shape == x.shape

    def test_acts_only_along_z(self):
        # identical slices stay identical in the interior of the stack,
        # so the z-conv output is spatially local per pixel column
        torch.manual_seed(0)
        conv = ZConv(2)
        x = torch.randn(1, 2, 4, 4).repeat(7, 1, 1, 1)
        out = conv(x)
        assert torch.allclose(out[2], out[3], atol=1e-6)

    def test_information_flows_between_slices(self):
        torch.manual_seed(1)
        conv = ZConv(2)
        x = torch.randn(5, 2, 4, 4)
        y = x.clone()
        y[2] += 1.0  # perturb one slice
        out_x, out_y = conv(x), conv(y)
        # neighbors within the kernel see the change; distant slices do not
        assert not torch.allclose(out_x[1], out_y[1])
        assert not torch.allclose(out_x[3], out_y[3])
        assert torch.allclose(out_x[0], out_y[0], atol=1e-6)
        assert torch.allclose(out_x[4], out_y[4], atol=1e-6)


@pytest.fixture(scope="module")
def model():
    return build_denoiser(TINY, seed=0)


class TestUNetDenoiser:
    def test_output_shape_matches_input(self, model):
        x = torch.randn(2, 1, 32, 32)
        assert model(x, 10).shape == (2, 1, 32, 32)

    def test_conditional_three_channel(self):
        spec = DenoiserSpec(
            image_size=32,
            channels_per_stage=(8, 16),
            res_blocks_per_stage=1,
            attention_resolution=16,
            in_channels=3,
            time_embed_dim=32,
        )
        model = build_denoiser(spec, seed=0)
        out = model(torch.randn(2, 3, 32, 32), 5)
        assert out.shape == (2, 1, 32, 32)

    def test_timestep_forms_agree(self, model):
        x = torch.randn(2, 1, 32, 32)
        a = model(x, 7)
        b = model(x, np.array([7, 7]))
        c = model(x, torch.tensor([7.0, 7.0]))
        assert torch.allclose(a, b, atol=1e-6)
        assert torch.allclose(a, c, atol=1e-6)

    def test_timestep_changes_output(self, model):
        x = torch.randn(1, 1, 32, 32)
        assert not torch.allclose(model(x, 1), model(x, 900))

    def test_seeded_init_deterministic(self):
        a = build_denoiser(TINY, seed=3)
        b = build_denoiser(TINY, seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_wrong_channel_count_rejected(self, model):
        with pytest.raises(ValueError, match="channels"):
            model(torch.randn(1, 3, 32, 32), 1)

    def test_wrong_rank_rejected(self, model):
        with pytest.raises(ValueError):
            model(torch.randn(1, 32, 32), 1)

    def test_attention_present_at_configured_stage(self, model):
        from lesionfill.denoiser import AttentionBlock

        names = [
            name for name, mod in model.named_modules() if isinstance(mod, AttentionBlock)
        ]
        assert any(name.startswith("down_blocks.2") for name in names)
        assert not any(name.startswith("down_blocks.0") for name in names)
        assert "mid_attn" in names

    def test_pseudo3d_slice_coupling(self):
        spec = DenoiserSpec(
            image_size=16,
            channels_per_stage=(8, 8),
            res_blocks_per_stage=1,
            attention_resolution=8,
            pseudo3d=True,
            time_embed_dim=16,
        )
        model = build_denoiser(spec, seed=0).eval()
        x = torch.randn(6, 1, 16, 16)
        y = x.clone()
        y[0] += 0.5
        with torch.no_grad():
            out_x, out_y = model(x, 3), model(y, 3)
        # with z-convs the perturbation of slice 0 leaks into slice 1
        assert not torch.allclose(out_x[1], out_y[1], atol=1e-6)

    def test_2d_model_slices_independent(self, model):
        x = torch.randn(4, 1, 32, 32)
        y = x.clone()
        y[0] += 0.5
        with torch.no_grad():
            out_x, out_y = model(x, 3), model(y, 3)
        assert torch.allclose(out_x[1:], out_y[1:], atol=1e-6)

    def test_predict_noise_guards_nonfinite(self, model):
        x = torch.full((1, 1, 32, 32), float("nan"))
        with pytest.raises(FloatingPointError):
            predict_noise(model, x, 1)


class TestConditioning:
    def test_voided_channel_values(self):
        gt = torch.tensor([[[[0.2, 0.4], [0.6, 0.8]]]])
        mask = torch.tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        x_t = torch.zeros_like(gt)
        bundle = make_conditioning_input(x_t, gt, mask)
        expected = torch.tensor([[[[VOID_VALUE, 0.4], [0.6, VOID_VALUE]]]])
        assert torch.equal(bundle.voided, expected)

    def test_stacked_channel_order(self):
        gt = torch.rand(2, 1, 4, 4)
        mask = (torch.rand_like(gt) > 0.5).float()
        x_t = torch.rand_like(gt)
        stacked = make_conditioning_input(x_t, gt, mask).stacked()
        assert stacked.shape == (2, 3, 4, 4)
        assert CHANNEL_ORDER == ("noisy", "voided", "mask")
        assert torch.equal(stacked[:, 0:1], x_t)
        assert torch.equal(stacked[:, 2:3], mask)

    def test_empty_mask_keeps_ground_truth(self):
        gt = torch.rand(1, 1, 4, 4)
        bundle = make_conditioning_input(torch.zeros_like(gt), gt, torch.zeros_like(gt))
        assert torch.equal(bundle.voided, gt)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            make_conditioning_input(
                torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2)
            )

    def test_bundle_validates(self):
        with pytest.raises(ValueError):
            ConditioningBundle(
                torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 8, 8)
            )


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = build_denoiser(TINY, seed=0)
        cfg = DiffusionConfig(num_steps=100)
        path = save_checkpoint(tmp_path / "model.pt", model, cfg, extra={"step": 42})
        loaded, loaded_cfg, sidecar = load_checkpoint(path)
        assert loaded_cfg == cfg
        assert sidecar["extra"]["step"] == 42
        for pa, pb in zip(model.parameters(), loaded.parameters()):
            assert torch.equal(pa, pb)
        x = torch.randn(1, 1, 32, 32)
        with torch.no_grad():
            assert torch.allclose(model.eval()(x, 5), loaded(x, 5), atol=1e-6)

    def test_sidecar_contents(self, tmp_path):
        model = build_denoiser(TINY, seed=0)
        save_checkpoint(tmp_path / "model.pt", model, DiffusionConfig())
        sidecar = json.loads((tmp_path / "model.pt.json").read_text())
        assert sidecar["channel_order"] == ["noisy", "voided", "mask"]
        assert sidecar["normalization"]["void_value"] == -1.0
        assert sidecar["denoiser_spec"]["image_size"] == 32

    def test_channel_expectation_enforced(self, tmp_path):
        model = build_denoiser(TINY, seed=0)  # in_channels=1
        path = save_checkpoint(tmp_path / "model.pt", model, DiffusionConfig())
        load_checkpoint(path, expected_in_channels=1)
        with pytest.raises(ValueError, match="in_channels"):
            load_checkpoint(path, expected_in_channels=3)

    def test_missing_sidecar(self, tmp_path):
        model = build_denoiser(TINY, seed=0)
        path = save_checkpoint(tmp_path / "model.pt", model, DiffusionConfig())
        (tmp_path / "model.pt.json").unlink()
        with pytest.raises(FileNotFoundError):
            load_checkpoint(path)

    def test_bad_format_version(self, tmp_path):
        model = build_denoiser(TINY, seed=0)
        path = save_checkpoint(tmp_path / "model.pt", model, DiffusionConfig())
        side = tmp_path / "model.pt.json"
        payload = json.loads(side.read_text())
        payload["format_version"] = 99
        side.write_text(json.dumps(payload))
        with pytest.raises(ValueError, match="format"):
            load_checkpoint(path)
