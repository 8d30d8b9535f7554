"""Backbone layer plans, level geometry and parameter counting."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cagnet.backbone import Backbone, backbone_forward, toy_backbone, vgg16_shape
from cagnet.tensor import ShapeError, Tensor


def live_weights(net, exclude=()):
    return sum(conv.weight.data.size for conv, spec in zip(net.convs, net.spec.convs)
               if spec.name not in exclude)


class TestVggPlan:
    def test_conv_only_count(self):
        spec = vgg16_shape()
        # 3x3 convs: 3-64-64 | 128 x2 | 256 x3 | 512 x3 | 512 x3
        widths = [3, 64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]
        closed = sum(9 * a * b for a, b in zip(widths[:-1], widths[1:]))
        assert closed == 14_710_464
        assert spec.weight_count(exclude=("added",)) == closed
        assert live_weights(Backbone(spec), exclude=("added",)) == closed

    def test_added_layer(self):
        spec = vgg16_shape()
        added = [c for c in spec.convs if c.name == "added"][0]
        assert added.weight_count == 3 * 3 * 512 * 1024 == 4_718_592
        net = Backbone(spec)
        assert net.convs[-1].weight.data.size == 4_718_592

    def test_taps(self):
        spec = vgg16_shape()
        names = [spec.layers[i].name for i in spec.taps]
        assert names == ["conv3_3", "conv4_3", "conv5_3", "added"]
        assert spec.level_channels == (256, 512, 512, 1024)


class TestToyPlan:
    def test_geometry(self, rng):
        levels = backbone_forward(toy_backbone(16), Tensor(rng.normal(size=(2, 3, 64, 64))))
        assert [lv.shape for lv in levels] == [
            (2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4), (2, 128, 2, 2)]

    def test_channels(self):
        assert toy_backbone(16).level_channels == (16, 32, 64, 128)

    @pytest.mark.parametrize("width", [4, 8, 16])
    def test_closed_form_count(self, width):
        net = Backbone(toy_backbone(width))
        live = sum(p.data.size for _, p in net.named_parameters())
        spec = net.spec
        assert live == spec.weight_count() + spec.bias_count()

    def test_width_too_small(self):
        with pytest.raises(ValueError):
            toy_backbone(2)


class TestForward:
    @settings(max_examples=8, deadline=None)
    @given(h=st.sampled_from([32, 64, 96]), w=st.sampled_from([32, 64, 128]))
    def test_stride_contract(self, h, w):
        levels = backbone_forward(toy_backbone(4), Tensor(np.zeros((1, 3, h, w))))
        for n, lv in zip(range(2, 6), levels):
            assert lv.shape[2:] == (h // 2**n, w // 2**n)

    def test_zero_image_zero_levels(self):
        levels = backbone_forward(toy_backbone(8), Tensor(np.zeros((1, 3, 64, 64))))
        assert all(np.all(lv.data == 0) for lv in levels)

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            backbone_forward(toy_backbone(4), Tensor(np.zeros((1, 3, 48, 64))))

    def test_wrong_channels_rejected(self):
        with pytest.raises(ShapeError):
            backbone_forward(toy_backbone(4), Tensor(np.zeros((1, 1, 64, 64))))
