"""Network construction: parameter counts, head replacement, groups, freezing."""

import numpy as np
import pytest

from stagewise.errors import ConfigError
from stagewise.layers import (
    ResNetConfig,
    assign_layer_groups,
    build_resnet,
    replace_head,
    set_frozen,
)
from stagewise.tensor import Tensor


def enumerate_param_count(blocks, base_width, n_classes, head_hidden=512):
    """Independent layer-by-layer shape enumeration (the oracle)."""
    total = 0

    def bn(c):
        return 2 * c

    total += 3 * base_width * 7 * 7 + bn(base_width)          # stem
    in_ch = base_width
    for stage, (count, mult) in enumerate(zip(blocks, (1, 2, 4, 8)), start=1):
        planes = base_width * mult
        out_ch = planes * 4
        for b in range(count):
            total += in_ch * planes                            # conv1 1x1
            total += bn(planes)
            total += planes * planes * 9                       # conv2 3x3
            total += bn(planes)
            total += planes * out_ch                           # conv3 1x1
            total += bn(out_ch)
            stride = 2 if (stage > 1 and b == 0) else 1
            if stride != 1 or in_ch != out_ch:
                total += in_ch * out_ch + bn(out_ch)           # projection
            in_ch = out_ch
    pooled = 2 * in_ch
    total += bn(pooled)                                        # head bn1
    total += pooled * head_hidden + head_hidden                # head lin1
    total += bn(head_hidden)                                   # head bn2
    total += head_hidden * n_classes + n_classes               # head lin2
    return total


class TestBuildResnet:
    def test_resnet50_parameter_count_near_25_6m(self):
        model = build_resnet(ResNetConfig(n_classes=4))
        count = model.param_count()
        assert abs(count - 25.6e6) / 25.6e6 < 0.05
        assert count == enumerate_param_count((3, 4, 6, 3), 64, 4)

    def test_mini_count_matches_enumeration(self):
        model = build_resnet(ResNetConfig.mini())
        assert model.param_count() == enumerate_param_count((1, 1, 1, 1), 16, 4)

    @pytest.mark.parametrize("size", [64, 96, 128])
    def test_size_agnostic_forward(self, size):
        model = build_resnet(ResNetConfig.mini(seed=3))
        x = Tensor(np.random.default_rng(0).standard_normal(
            (2, 3, size, size)).astype(np.float32))
        out = model.forward(x)
        assert out.shape == (2, 4)

    def test_forward_below_minimum_fails(self):
        model = build_resnet(ResNetConfig.mini())
        x = Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32))
        with pytest.raises(Exception):
            model.forward(x)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            ResNetConfig(blocks=(0, 1, 1, 1))
        with pytest.raises(ConfigError):
            ResNetConfig(n_classes=1)


class TestReplaceHead:
    def test_body_bit_identical(self):
        model = build_resnet(ResNetConfig.mini(seed=5))
        before = {k: v.data.copy() for k, v in model.named_params().items()
                  if k in dict.fromkeys(model.body_param_names() + [k]) and
                  not k.startswith("head")}
        new = replace_head(model, 4, seed=99)
        for name in new.body_param_names():
            assert np.array_equal(new.named_params()[name].data, before[name])

    def test_output_shape(self):
        model = replace_head(build_resnet(ResNetConfig.mini(seed=1)), 4, seed=2)
        x = Tensor(np.random.default_rng(1).standard_normal(
            (8, 3, 32, 32)).astype(np.float32))
        assert model.forward(x).shape == (8, 4)

    def test_seeded_head_init_identical(self):
        base = build_resnet(ResNetConfig.mini(seed=7))
        a = replace_head(base, 4, seed=11)
        b = replace_head(base, 4, seed=11)
        for name in a.named_params():
            if name.startswith("head"):
                assert np.array_equal(a.named_params()[name].data,
                                      b.named_params()[name].data)

    def test_different_seed_differs(self):
        base = build_resnet(ResNetConfig.mini(seed=7))
        a = replace_head(base, 4, seed=11)
        b = replace_head(base, 4, seed=12)
        assert not np.array_equal(a.named_params()["head_lin1.weight"].data,
                                  b.named_params()["head_lin1.weight"].data)

    def test_rejects_single_class(self):
        model = build_resnet(ResNetConfig.mini())
        with pytest.raises(ConfigError):
            replace_head(model, 1)


class TestLayerGroups:
    def test_two_groups_body_head(self):
        model = assign_layer_groups(build_resnet(ResNetConfig.mini()), 2)
        groups = {model.param_group(name) for name in model.named_params()}
        assert groups == {0, 1}
        for name in model.named_params():
            expected = 1 if name.startswith("head") else 0
            assert model.param_group(name) == expected

    def test_six_groups_stage_boundaries(self):
        model = assign_layer_groups(build_resnet(ResNetConfig()), 6)
        assert model.param_group("stem_conv.weight") == 0
        assert model.param_group("s1b0.conv1.weight") == 1
        assert model.param_group("s2b0.conv1.weight") == 2
        assert model.param_group("s3b0.conv1.weight") == 3
        assert model.param_group("s4b0.conv1.weight") == 4
        assert model.param_group("head_lin2.weight") == 5

    @pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
    def test_partition_property(self, n):
        model = assign_layer_groups(build_resnet(ResNetConfig.mini()), n)
        per_group = [0] * n
        last = 0
        for name, p in model.named_params().items():
            g = model.param_group(name)
            assert last <= g  # monotone with depth (params iterate in order)
            last = g
            per_group[g] += p.size
        assert sum(per_group) == model.param_count()
        assert all(c > 0 for c in per_group)

    def test_too_many_groups(self):
        with pytest.raises(ConfigError):
            assign_layer_groups(build_resnet(ResNetConfig.mini()), 7)


class TestFreeze:
    def test_head_only_marks_body(self):
        model = set_frozen(build_resnet(ResNetConfig.mini(seed=2)), "head_only")
        for name, p in model.named_params().items():
            if name.startswith("head"):
                assert p.requires_grad
            else:
                assert not p.requires_grad
                assert model.param_frozen(name)

    def test_toggle_preserves_values(self):
        model = build_resnet(ResNetConfig.mini(seed=2))
        before = {k: v.data.copy() for k, v in model.named_params().items()}
        set_frozen(model, "head_only")
        set_frozen(model, "all_trainable")
        for name, p in model.named_params().items():
            assert p.requires_grad
            assert np.array_equal(p.data, before[name])

    def test_frozen_bn_stats_pinned(self):
        model = set_frozen(build_resnet(ResNetConfig.mini(seed=4)), "head_only")
        stats_before = {k: v.copy() for k, v in model.named_buffers().items()
                        if not k.startswith("head")}
        x = Tensor(np.random.default_rng(3).standard_normal(
            (4, 3, 32, 32)).astype(np.float32))
        model.forward(x, training=True)
        for k, v in model.named_buffers().items():
            if not k.startswith("head"):
                assert np.array_equal(v, stats_before[k]), k

    def test_unfrozen_stats_opt_in(self):
        # params stay fixed but running statistics may keep adapting
        model = set_frozen(build_resnet(ResNetConfig.mini(seed=4)),
                           "head_only", freeze_stats=False)
        stats_before = {k: v.copy() for k, v in model.named_buffers().items()
                        if not k.startswith("head")}
        params_before = {k: v.data.copy()
                         for k, v in model.named_params().items()
                         if not k.startswith("head")}
        x = Tensor(np.random.default_rng(5).standard_normal(
            (4, 3, 32, 32)).astype(np.float32))
        model.forward(x, training=True)
        moved = any(not np.array_equal(v, stats_before[k])
                    for k, v in model.named_buffers().items()
                    if not k.startswith("head"))
        assert moved
        for k, v in model.named_params().items():
            if not k.startswith("head"):
                assert np.array_equal(v.data, params_before[k])

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            set_frozen(build_resnet(ResNetConfig.mini()), "nothing")
