import numpy as np
import pytest
import torch

from trackseg.model import (
    CheckpointError,
    ModelConfig,
    ResponseGrid,
    build_model,
    depthwise_xcorr,
    feature_sides,
    load_checkpoint,
    save_checkpoint,
)


def toy_config(**overrides):
    defaults = dict(
        backbone_kind="toy_convnet",
        feature_channels=16,
        anchors_per_cell=2,
        mask_side=7,
        refined_mask_side=31,
        refinement_channels=(8, 6, 4),
        exemplar_side=31,
        search_side=63,
        response_side=5,
        toy_channels=(4, 6, 8, 8),
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


class TestFeatureSides:
    def test_exemplar_127(self):
        s = feature_sides(127)
        assert (s.s2, s.s4, s.s8) == (61, 31, 15)

    def test_search_255(self):
        s = feature_sides(255)
        assert (s.s2, s.s4, s.s8) == (125, 63, 31)

    def test_default_config_consistent(self):
        cfg = ModelConfig()
        assert cfg.exemplar_feat_side == 15
        assert cfg.search_feat_side == 31
        assert cfg.response_side == 17

    def test_inconsistent_response_side_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(response_side=19)

    def test_stride_must_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(search_side=250)


class TestBackbone:
    @pytest.mark.parametrize("kind", ["resnet50_c4", "toy_convnet"])
    def test_contract_sides(self, kind):
        cfg = ModelConfig(backbone_kind=kind)
        net = build_model(cfg, "two_branch", seed=0).eval()
        with torch.no_grad():
            pyr = net.backbone_forward(torch.rand(1, 3, 127, 127) * 255)
        assert pyr.final.shape[-1] == 15
        assert pyr.f1.shape[-1] == 15
        assert pyr.f2.shape[-1] == 31
        assert pyr.f3.shape[-1] == 61

    def test_resnet_search_side(self):
        cfg = ModelConfig()
        net = build_model(cfg, "two_branch", seed=0).eval()
        with torch.no_grad():
            pyr = net.backbone_forward(torch.rand(1, 3, 255, 255) * 255)
        assert pyr.final.shape[-1] == 31

    def test_rejects_bad_input(self):
        net = build_model(toy_config(), seed=0)
        with pytest.raises(ValueError):
            net.backbone_forward(torch.rand(1, 1, 31, 31))
        with pytest.raises(ValueError):
            net.backbone_forward(torch.rand(1, 3, 31, 63))


class TestDepthwiseXcorr:
    def test_shape_contract(self):
        z = torch.rand(1, 256, 15, 15)
        x = torch.rand(1, 256, 31, 31)
        out = depthwise_xcorr(z, x)
        assert tuple(out.shape) == (1, 256, 17, 17)

    def test_zero_template_zero_output(self):
        z = torch.zeros(2, 8, 3, 3)
        x = torch.rand(2, 8, 9, 9)
        assert torch.all(depthwise_xcorr(z, x) == 0)

    def test_delta_kernel_is_crop(self):
        # hand-checkable correlation identity on a 3x3 kernel over 5x5 input
        z = torch.zeros(1, 1, 3, 3)
        z[0, 0, 1, 1] = 1.0
        x = torch.arange(25, dtype=torch.float32).reshape(1, 1, 5, 5)
        out = depthwise_xcorr(z, x)
        torch.testing.assert_close(out, x[:, :, 1:4, 1:4])

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            depthwise_xcorr(torch.rand(1, 4, 3, 3), torch.rand(1, 8, 9, 9))


class TestHeads:
    def test_three_branch_sizes(self):
        cfg = ModelConfig()
        net = build_model(cfg, "three_branch", seed=0).eval()
        corr = torch.rand(1, cfg.feature_channels, 17, 17)
        grid = net.heads(corr)
        assert tuple(grid.scores.shape) == (1, 10, 17, 17)
        assert tuple(grid.box_deltas.shape) == (1, 20, 17, 17)
        assert tuple(grid.mask_logits.shape) == (1, 3969, 17, 17)

    def test_two_branch_sizes(self):
        cfg = ModelConfig()
        net = build_model(cfg, "two_branch", seed=0).eval()
        grid = net.heads(torch.rand(1, cfg.feature_channels, 17, 17))
        assert tuple(grid.scores.shape) == (1, 1, 17, 17)
        assert grid.box_deltas is None
        assert tuple(grid.mask_logits.shape) == (1, 3969, 17, 17)

    def test_zero_features_give_constant_grid(self):
        net = build_model(toy_config(), "three_branch", seed=1).eval()
        grid = net.heads(torch.zeros(1, 16, 5, 5))
        for t in (grid.scores, grid.box_deltas, grid.mask_logits):
            flat = t.reshape(t.shape[1], -1)
            assert torch.allclose(flat, flat[:, :1].expand_as(flat))

    def test_grid_shape_assertion(self):
        with pytest.raises(ValueError):
            ResponseGrid(
                features=torch.rand(1, 4, 5, 5),
                scores=torch.rand(1, 2, 7, 7),
                mask_logits=torch.rand(1, 49, 5, 5),
            )


class TestForwardAndRefine:
    def test_full_forward_shapes(self):
        cfg = toy_config()
        net = build_model(cfg, "three_branch", seed=2).eval()
        z = torch.rand(2, 3, 31, 31) * 255
        x = torch.rand(2, 3, 63, 63) * 255
        with torch.no_grad():
            grid, pyramid = net(z, x)
        assert grid.grid_side == 5
        assert tuple(grid.scores.shape) == (2, 4, 5, 5)
        assert tuple(grid.box_deltas.shape) == (2, 8, 5, 5)
        assert tuple(grid.mask_logits.shape) == (2, 49, 5, 5)
        assert pyramid.final.shape[-1] == 7

    def test_refined_side_default_config(self):
        cfg = toy_config()
        net = build_model(cfg, "two_branch", seed=3).eval()
        with torch.no_grad():
            grid, pyr = net(torch.rand(1, 3, 31, 31) * 255, torch.rand(1, 3, 63, 63) * 255)
            out = net.refine(grid.features, pyr, [(0, 2, 2)])
        assert tuple(out.shape) == (1, 31 * 31)

    def test_refine_bad_position(self):
        cfg = toy_config()
        net = build_model(cfg, "two_branch", seed=3).eval()
        with torch.no_grad():
            grid, pyr = net(torch.rand(1, 3, 31, 31) * 255, torch.rand(1, 3, 63, 63) * 255)
        with pytest.raises(IndexError):
            net.refine(grid.features, pyr, [(0, 9, 0)])

    def test_zero_params_finite(self):
        cfg = toy_config()
        net = build_model(cfg, "two_branch", seed=4).eval()
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
            grid, pyr = net(torch.rand(1, 3, 31, 31) * 255, torch.rand(1, 3, 63, 63) * 255)
            out = net.refine(grid.features, pyr, [(0, 0, 0)])
        assert torch.isfinite(out).all()

    def test_determinism(self):
        cfg = toy_config()
        net = build_model(cfg, "three_branch", seed=5).eval()
        z = torch.rand(1, 3, 31, 31) * 255
        x = torch.rand(1, 3, 63, 63) * 255
        with torch.no_grad():
            a, _ = net(z, x)
            b, _ = net(z, x)
        assert torch.equal(a.scores, b.scores)
        assert torch.equal(a.mask_logits, b.mask_logits)

    def test_refine_gradient_matches_finite_differences(self):
        torch.manual_seed(11)
        cfg = toy_config()
        net = build_model(cfg, "two_branch", seed=6).double().eval()
        corr = torch.randn(1, cfg.feature_channels, 5, 5, dtype=torch.float64)
        pyr_shapes = [(cfg.toy_channels[2], 7), (cfg.toy_channels[1], 15), (cfg.toy_channels[0], 29)]
        from trackseg.model import FeaturePyramid

        pyr = FeaturePyramid(
            f1=torch.randn(1, pyr_shapes[0][0], 7, 7, dtype=torch.float64),
            f2=torch.randn(1, pyr_shapes[1][0], 15, 15, dtype=torch.float64),
            f3=torch.randn(1, pyr_shapes[2][0], 29, 29, dtype=torch.float64),
            final=torch.zeros(1, cfg.toy_channels[3], 7, 7, dtype=torch.float64),
        )
        corr_var = corr.clone().requires_grad_(True)
        out = net.refine(corr_var, pyr, [(0, 2, 3)]).sum()
        out.backward()
        analytic = corr_var.grad[0, :, 2, 3].clone()

        eps = 1e-4  # float64 central differences: roundoff dominates below this
        rng = np.random.default_rng(0)
        for c in rng.choice(cfg.feature_channels, size=6, replace=False):
            plus = corr.clone()
            plus[0, c, 2, 3] += eps
            minus = corr.clone()
            minus[0, c, 2, 3] -= eps
            with torch.no_grad():
                fd = (
                    net.refine(plus, pyr, [(0, 2, 3)]).sum() - net.refine(minus, pyr, [(0, 2, 3)]).sum()
                ).item() / (2 * eps)
            rel = abs(fd - analytic[c].item()) / max(abs(fd), abs(analytic[c].item()), 1e-8)
            assert rel < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = toy_config()
        net = build_model(cfg, "three_branch", seed=7).eval()
        path = tmp_path / "model.npz"
        save_checkpoint(path, net)
        loaded = load_checkpoint(path).eval()
        assert loaded.variant == "three_branch"
        assert loaded.config == cfg
        z = torch.rand(1, 3, 31, 31) * 255
        x = torch.rand(1, 3, 63, 63) * 255
        with torch.no_grad():
            a, _ = net(z, x)
            b, _ = loaded(z, x)
        torch.testing.assert_close(a.scores, b.scores)

    def test_config_mismatch_rejected(self, tmp_path):
        net = build_model(toy_config(), "two_branch", seed=8)
        path = tmp_path / "model.npz"
        save_checkpoint(path, net)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected_config=toy_config(feature_channels=8))

    def test_parameter_count_deterministic(self):
        a = build_model(toy_config(), "three_branch", seed=1)
        b = build_model(toy_config(), "three_branch", seed=99)
        na = sum(p.numel() for p in a.parameters())
        nb = sum(p.numel() for p in b.parameters())
        assert na == nb
