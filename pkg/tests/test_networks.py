"""Network builders: geometry arithmetic, shapes, ownership, inference
independence."""

import numpy as np
import pytest

from auxcnn.engine import OWNER_GROUPS, ParameterStore
from auxcnn.errors import ShapeError
from auxcnn.networks import (
    DNetConfig,
    FNetConfig,
    RNetConfig,
    build_bundle,
    build_classifier,
    build_dnet,
    build_fnet,
    build_rnet,
    classify,
    default_reshape_side,
    discriminate,
    extract_features,
    predict,
    predict_label,
    reconstruct,
)
from auxcnn.training import init_parameters

from conftest import small_full_bundle


class TestGeometryArithmetic:
    @pytest.mark.parametrize("m,expected", [(112, 3), (224, 4), (448, 5)])
    def test_upsample_counts_at_reference_sizes(self, m, expected):
        assert RNetConfig(image_size=m, reshape_side=7).n_upsample == expected

    def test_small_image_fallback_geometry(self):
        # 32 = 8 * 2^(1+1): reshape side 8 with one upsample block
        cfg = RNetConfig(image_size=32, reshape_side=8)
        assert cfg.n_upsample == 1
        assert default_reshape_side(32) == 8
        assert default_reshape_side(224) == 7

    def test_inconsistent_geometry_rejected(self):
        with pytest.raises(ShapeError):
            RNetConfig(image_size=32, reshape_side=7).n_upsample

    @pytest.mark.parametrize("m,side", [(224, 14), (32, 2), (112, 7), (448, 28)])
    def test_patch_map_side(self, m, side):
        assert DNetConfig(image_size=m, n_downsample=3).patch_side == side

    def test_indivisible_patch_geometry_rejected(self):
        with pytest.raises(ShapeError):
            DNetConfig(image_size=100, n_downsample=3).patch_side


class TestFNet:
    def test_resnet18_has_8_residual_blocks_of_2_convs(self):
        store = ParameterStore()
        g = build_fnet(FNetConfig(depth=18, image_size=64), store)
        adds = [n for n in g.nodes[1:] if n.op.kind == "add"]
        assert len(adds) == 8
        block_convs = [n for n in g.nodes[1:]
                       if n.op.kind == "conv2d" and n.op.kernel == 3
                       and "block" in n.params[0]]
        assert len(block_convs) == 16

    @pytest.mark.parametrize("depth,blocks", [(12, 5), (18, 8), (34, 16), (44, 21), (50, 16)])
    def test_depth_table_block_counts(self, depth, blocks):
        store = ParameterStore()
        g = build_fnet(FNetConfig(depth=depth, image_size=64), store)
        assert sum(1 for n in g.nodes[1:] if n.op.kind == "add") == blocks

    def test_feature_width_128(self):
        b = small_full_bundle()
        init_parameters(b, 0)
        x = np.random.default_rng(0).random((1, 1, 32, 32)).astype(np.float32)
        assert extract_features(b, x).shape == (1, 128)

    def test_unsupported_depth_rejected(self):
        with pytest.raises(ShapeError):
            FNetConfig(depth=20, image_size=32)

    def test_batch_of_8_feature_shape(self):
        b = small_full_bundle()
        init_parameters(b, 1)
        x = np.random.default_rng(1).random((8, 1, 32, 32)).astype(np.float32)
        assert extract_features(b, x).shape == (8, 128)

    def test_identical_rows_identical_features_in_eval(self):
        b = small_full_bundle()
        init_parameters(b, 2)
        row = np.random.default_rng(2).random((1, 1, 32, 32)).astype(np.float32)
        f = extract_features(b, np.concatenate([row, row]))
        assert np.array_equal(f[0], f[1])


class TestClassifier:
    def test_rows_sum_to_one(self):
        store = ParameterStore()
        g = build_classifier(16, 3, store)
        init_parameters(store, 0)
        p = g.forward(np.random.default_rng(0).random((5, 16)).astype(np.float32))
        assert np.abs(p.sum(axis=1) - 1).max() < 1e-6

    def test_binary_head(self):
        store = ParameterStore()
        g = build_classifier(16, 2, store)
        init_parameters(store, 0)
        p = g.forward(np.zeros((3, 16), dtype=np.float32))
        assert p.shape == (3, 2)

    def test_zero_weights_uniform_output(self):
        store = ParameterStore()
        g = build_classifier(16, 4, store)
        store.set("C/fc/weight", np.zeros((4, 16)))
        store.set("C/fc/bias", np.zeros(4))
        p = g.forward(np.random.default_rng(1).random((6, 16)).astype(np.float32))
        assert np.allclose(p, 0.25)

    def test_predict_label_argmax_and_tie_break(self):
        assert predict_label(np.array([[0.2, 0.5, 0.3]])) == 1
        assert predict_label(np.array([[0.5, 0.5]])) == 0
        assert predict_label(np.eye(4)[[2]]) == 2


class TestRNet:
    def test_reshape_target_and_output_size(self):
        store = ParameterStore()
        cfg = RNetConfig(image_size=224, reshape_side=7)
        g = build_rnet(cfg, store)
        reshapes = [n for n in g.nodes[1:] if n.op.kind == "reshape"]
        assert reshapes[0].op.shape == (128, 7, 7)
        init_parameters(store, 0)
        out = g.forward(np.zeros((1, 128), dtype=np.float32))
        assert out.shape == (1, 1, 224, 224)

    def test_output_rescaled_to_unit_interval(self):
        b = small_full_bundle()
        init_parameters(b, 3)
        f = np.random.default_rng(3).standard_normal((4, 128)).astype(np.float32) * 3
        out = reconstruct(b, f)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_zero_feature_zero_bias_gives_half_gray(self):
        b = small_full_bundle()
        init_parameters(b, 4)
        store = b.store
        for name in store.names(groups=("R",)):
            if name.endswith("/bias") or name.endswith("/beta"):
                store.set(name, np.zeros_like(store[name]))
        out = reconstruct(b, np.zeros((1, 128), dtype=np.float32))
        assert np.allclose(out, 0.5, atol=1e-6)


class TestDNet:
    def test_two_heads_shapes(self):
        b = small_full_bundle()
        init_parameters(b, 5)
        x = np.random.default_rng(5).random((4, 1, 32, 32)).astype(np.float32)
        patch, cls = discriminate(b, x)
        assert patch.shape == (4, 2, 2)
        assert cls.shape == (4, 3)
        assert np.abs(cls.sum(axis=1) - 1).max() <= 1e-6
        assert np.all((patch > 0) & (patch < 1))

    def test_zero_weight_dnet_patch_half(self):
        b = small_full_bundle()
        init_parameters(b, 6)
        for name in b.store.names(groups=("D", "D_disc", "D_cls")):
            b.store.set(name, np.zeros_like(b.store[name]))
        x = np.random.default_rng(6).random((2, 1, 32, 32)).astype(np.float32)
        patch, cls = discriminate(b, x)
        assert np.allclose(patch, 0.5)
        assert np.allclose(cls, 1 / 3)

    def test_classification_head_width_three(self):
        store = ParameterStore()
        g = build_dnet(DNetConfig(image_size=32, class_count=3, base_channels=8), store)
        init_parameters(store, 0)
        _, cls = g.forward(np.zeros((1, 1, 32, 32), dtype=np.float32))
        assert cls.shape == (1, 3)


class TestBundleInvariants:
    @pytest.mark.parametrize("m", [32, 112, 224, 448])
    def test_geometry_round_trip(self, m):
        side = default_reshape_side(m)
        b = build_bundle(
            FNetConfig(depth=12, image_size=m),
            3,
            RNetConfig(image_size=m, reshape_side=side),
            DNetConfig(image_size=m, class_count=3, base_channels=4),
        )
        init_parameters(b, 7)
        x = np.random.default_rng(7).random((1, 1, m, m)).astype(np.float32)
        f = extract_features(b, x)
        xhat = reconstruct(b, f)
        assert xhat.shape == (1, 1, m, m)
        patch, _ = discriminate(b, xhat[:, 0])
        assert patch.shape[1] == m // 16

    def test_parameter_ownership_partition(self):
        b = small_full_bundle()
        store = b.store
        all_names = set(store.names())
        by_group = [set(store.names(groups=(g,))) for g in OWNER_GROUPS]
        assert set.union(*by_group) == all_names
        for i, ga in enumerate(by_group):
            for gb in by_group[i + 1:]:
                assert not (ga & gb)
        # each graph's parameters map to the expected groups
        assert {store.owner(p) for p in b.fnet.param_names()} == {"F"}
        assert {store.owner(p) for p in b.classifier.param_names()} == {"C"}
        assert {store.owner(p) for p in b.rnet.param_names()} == {"R"}
        assert {store.owner(p) for p in b.dnet.param_names()} == {"D", "D_disc", "D_cls"}

    def test_inference_ignores_auxiliary_parameters(self):
        b = small_full_bundle()
        init_parameters(b, 8)
        x = np.random.default_rng(8).random((6, 1, 32, 32)).astype(np.float32)
        before = predict(b, x)
        probs_before = classify(b, extract_features(b, x))
        rng = np.random.default_rng(999)
        for name in b.store.names(groups=("R", "D", "D_disc", "D_cls")):
            b.store.set(name, rng.standard_normal(b.store[name].shape))
        assert np.array_equal(predict(b, x), before)
        assert np.array_equal(classify(b, extract_features(b, x)), probs_before)

    def test_wrong_input_size_rejected(self):
        b = small_full_bundle()
        init_parameters(b, 9)
        with pytest.raises(ShapeError):
            extract_features(b, np.zeros((1, 1, 16, 16), dtype=np.float32))

    def test_summary_mentions_all_networks(self):
        text = small_full_bundle().summary()
        assert "depth 12" in text and "R-Net" in text and "patch map 2x2" in text
