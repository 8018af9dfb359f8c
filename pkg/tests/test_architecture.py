import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from orbit_restore.architecture import (
    ENCODER_STAGES,
    ModelConfig,
    PixelShuffleICNR,
    build_model,
    count_parameters,
    forward,
    freeze_encoder,
    icnr_init,
    pixel_shuffle,
    trainable_parameters,
)
from orbit_restore.errors import ParamError, ShapeError, SizeError, WeightsUnavailable
from orbit_restore.weights import module_tensors, write_archive


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(pretrained=False))


@pytest.fixture
def small_model():
    return build_model(ModelConfig(pretrained=False, width=0.125, init_seed=3))


class TestPixelShuffle:
    def test_two_by_two(self):
        a, b, c, d = 1.0, 2.0, 3.0, 4.0
        x = torch.tensor([a, b, c, d]).view(1, 4, 1, 1)
        assert pixel_shuffle(x, 2)[0, 0].tolist() == [[a, b], [c, d]]

    def test_r1_identity(self):
        x = torch.randn(2, 5, 3, 4)
        assert torch.equal(pixel_shuffle(x, 1), x)

    @pytest.mark.parametrize("r", [2, 3])
    def test_matches_index_formula(self, r):
        x = torch.randn(1, 2 * r * r, 3, 4)
        out = pixel_shuffle(x, r)
        for c in range(2):
            for y in range(3):
                for xx in range(4):
                    for dy in range(r):
                        for dx in range(r):
                            assert out[0, c, r * y + dy, r * xx + dx] == x[0, c * r * r + dy * r + dx, y, xx]

    def test_matches_torch(self):
        x = torch.randn(3, 12, 5, 7)
        assert torch.equal(pixel_shuffle(x, 2), F.pixel_shuffle(x, 2))

    def test_permutation(self):
        x = torch.randn(1, 8, 4, 4)
        assert torch.equal(torch.sort(pixel_shuffle(x, 2).flatten()).values, torch.sort(x.flatten()).values)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            pixel_shuffle(torch.zeros(1, 6, 2, 2), 2)


class TestIcnr:
    def test_groups_are_copies(self):
        w = torch.empty(3 * 4, 5, 3, 3)
        icnr_init(w, 2)
        for c in range(3):
            for k in range(4):
                assert torch.equal(w[c * 4 + k], w[c * 4])
        assert not torch.equal(w[0], w[4])

    def test_r1_is_base_init(self):
        torch.manual_seed(0)
        w = icnr_init(torch.empty(6, 4, 3, 3), 1)
        torch.manual_seed(0)
        ref = nn.init.kaiming_normal_(torch.empty(6, 4, 3, 3))
        assert torch.equal(w, ref)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            icnr_init(torch.empty(6, 2, 1, 1), 2)

    def test_equals_nearest_neighbour_upsampling(self):
        torch.manual_seed(5)
        layer = PixelShuffleICNR(4, 3, scale=2)
        base_w = layer.conv.weight[::4]
        base_b = layer.conv.bias[::4]
        x = torch.randn(1, 4, 3, 3)
        with torch.no_grad():
            via_shuffle = layer(x)
            via_nn = F.interpolate(F.conv2d(x, base_w, base_b), scale_factor=2, mode="nearest")
        assert torch.max(torch.abs(via_shuffle - via_nn)) <= 1e-6


class TestModel:
    def test_encoder_stage_map(self, model):
        x = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            stages = model.eval().encoder(x)
        for (stride, channels), s in zip(ENCODER_STAGES, stages):
            assert s.shape[1] == channels
            assert s.shape[-1] == 64 // stride

    def test_decoder_concat_widths(self, model):
        skips = [64, 64, 128, 256][::-1]
        for block, skip, width in zip(model.decoder, skips, (256, 128, 64, 32)):
            assert block.conv1[0].in_channels == width + skip
            assert block.in_channels == width + skip

    @pytest.mark.parametrize("size", [32, 64, 96, 224, 250, 256, 321])
    def test_shape_and_range(self, model, size):
        out = forward(model, np.random.default_rng(size).random((size, size, 3)))
        assert out.shape == (size, size, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_non_square(self, model):
        assert forward(model, np.zeros((40, 70, 3))).shape == (40, 70, 3)

    @pytest.mark.parametrize("shape", [(31, 64), (64, 16), (8, 8)])
    def test_too_small(self, model, shape):
        with pytest.raises(SizeError):
            forward(model, np.zeros(shape + (3,)))

    def test_eval_deterministic(self, model):
        img = np.random.default_rng(0).random((64, 64, 3))
        assert np.array_equal(forward(model, img), forward(model, img))

    def test_bad_mode(self, model):
        with pytest.raises(ParamError):
            forward(model, np.zeros((32, 32, 3)), mode="test")

    def test_build_deterministic(self):
        a = build_model(ModelConfig(pretrained=False, width=0.25, init_seed=7))
        b = build_model(ModelConfig(pretrained=False, width=0.25, init_seed=7))
        for (na, ta), (nb, tb) in zip(module_tensors(a).items(), module_tensors(b).items()):
            assert na == nb and torch.equal(ta, tb)

    def test_build_leaves_global_rng_alone(self):
        torch.manual_seed(11)
        expected = torch.rand(3)
        torch.manual_seed(11)
        build_model(ModelConfig(pretrained=False, width=0.125))
        assert torch.equal(torch.rand(3), expected)

    def test_parameter_count_deterministic(self):
        cfg = ModelConfig(pretrained=False, width=0.25)
        assert count_parameters(build_model(cfg).parameters()) == count_parameters(build_model(cfg).parameters())

    def test_skip_connections_are_live(self, small_model):
        torch.manual_seed(0)
        x, y = torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64)
        opt = torch.optim.Adam(small_model.parameters(), lr=1e-3)
        small_model.train()
        for _ in range(10):
            opt.zero_grad()
            F.l1_loss(small_model(x), y).backward()
            opt.step()
        small_model.eval()
        with torch.no_grad():
            with_skips = small_model(x)
            small_model.skip_scale = 0.0
            without = small_model(x)
            small_model.skip_scale = 1.0
        assert torch.max(torch.abs(with_skips - without)) > 0


class TestPretrained:
    def _fake_cache(self, tmp_path):
        torch.manual_seed(99)
        donor = build_model(ModelConfig(pretrained=False, init_seed=99))
        write_archive(tmp_path / "resnet34", module_tensors(donor.encoder), "resnet34")
        return donor

    def test_loads_archive_bit_exactly(self, tmp_path, monkeypatch):
        donor = self._fake_cache(tmp_path)
        monkeypatch.setenv("ORBIT_RESTORE_WEIGHTS_CACHE", str(tmp_path))
        model = build_model(ModelConfig(pretrained=True, init_seed=0))
        assert torch.equal(model.encoder.conv1.weight, donor.encoder.conv1.weight)
        for name, t in module_tensors(donor.encoder).items():
            assert torch.equal(module_tensors(model.encoder)[name], t)

    def test_missing_env(self, monkeypatch):
        monkeypatch.delenv("ORBIT_RESTORE_WEIGHTS_CACHE", raising=False)
        with pytest.raises(WeightsUnavailable):
            build_model(ModelConfig(pretrained=True))

    def test_missing_archive(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ORBIT_RESTORE_WEIGHTS_CACHE", str(tmp_path))
        with pytest.raises(WeightsUnavailable):
            build_model(ModelConfig(pretrained=True))

    def test_pretrained_needs_full_width(self):
        with pytest.raises(ParamError):
            ModelConfig(pretrained=True, width=0.5)


class TestFreeze:
    def _step(self, model):
        torch.manual_seed(1)
        x, y = torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64)
        model.train()
        opt = torch.optim.AdamW(trainable_parameters(model), lr=1e-3, weight_decay=1e-2)
        opt.zero_grad()
        F.l1_loss(model(x), y).backward()
        opt.step()

    def _encoder_state(self, model):
        return {k: v.clone() for k, v in model.encoder.state_dict().items()}

    def test_frozen_step_leaves_encoder(self, small_model):
        freeze_encoder(small_model, True)
        before = self._encoder_state(small_model)
        self._step(small_model)
        after = small_model.encoder.state_dict()
        # parameters and batch-norm running statistics alike
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_unfreeze_changes_encoder(self, small_model):
        freeze_encoder(small_model, True)
        self._step(small_model)
        freeze_encoder(small_model, False)
        before = self._encoder_state(small_model)
        self._step(small_model)
        after = small_model.encoder.state_dict()
        assert any(not torch.equal(before[k], after[k]) for k in before)

    def test_partition(self, small_model):
        freeze_encoder(small_model, True)
        total = count_parameters(small_model.parameters())
        assert count_parameters(trainable_parameters(small_model)) + count_parameters(
            small_model.encoder.parameters()) == total
        freeze_encoder(small_model, False)
        assert count_parameters(trainable_parameters(small_model)) == total
