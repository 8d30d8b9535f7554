"""Building blocks: GCN, MFEM variants, guide module, RRM and normalization."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cagnet import tensor as T
from cagnet.blocks import Conv2d, GcnBlock, GuideModule, Mfem, NormLayer, Rrm
from cagnet.gradsuite import pre_norm_biases, select
from cagnet.tensor import ShapeError, Tape, Tensor


def initialized(module, seed=0):
    module.init_parameters(seed)
    return module


def count_weights(module):
    return sum(p.data.size for n, p in module.named_parameters() if n.endswith("weight"))


@pytest.fixture
def x8(rng):
    return Tensor(rng.normal(size=(2, 8, 10, 10)))


# =============================================================================
# GCN
# =============================================================================

class TestGcn:
    def test_count_k15_level_a(self):
        block = GcnBlock(256, 8, 15)
        assert count_weights(block) == GcnBlock.weight_count(15, 256, 8) == 63_360
        assert 225 * 256 * 8 == 460_800

    @settings(max_examples=30, deadline=None)
    @given(k=st.sampled_from([1, 3, 5, 7, 11, 15]), cin=st.integers(1, 40), cout=st.integers(1, 40))
    def test_count_formula(self, k, cin, cout):
        assert count_weights(GcnBlock(cin, cout, k)) == 2 * (k * cin * cout + k * cout * cout)

    def test_shape_preserved(self, rng):
        block = initialized(GcnBlock(3, 5, 11))
        assert block(Tensor(rng.normal(size=(1, 3, 30, 30)))).shape == (1, 5, 30, 30)

    def test_rank_one_equivalence(self, rng):
        k, cin = 7, 3
        block = GcnBlock(cin, 1, k)
        col, row = rng.normal(size=(cin, k)), rng.normal(size=k)
        block.a1.weight.data[0, :, :, 0] = col
        block.a2.weight.data[0, 0, 0, :] = row
        # branch B and all biases stay zero
        x = Tensor(rng.normal(size=(2, cin, 12, 12)))
        dense = np.einsum("cu,v->cuv", col, row)[None]
        ref = T.conv2d(x, Tensor(dense), pad=(3, 3))
        np.testing.assert_allclose(block(x).data, ref.data, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            GcnBlock(3, 3, 4)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            GcnBlock(3, 2, 7)(Tensor(rng.normal(size=(1, 4, 8, 8))))


# =============================================================================
# MFEM
# =============================================================================

class TestMfem:
    def test_level_a_geometry(self):
        m = initialized(Mfem(256, 8))
        out = m(Tensor(np.random.default_rng(1).normal(size=(1, 256, 120, 120))))
        assert out.shape == (1, 32, 120, 120)

    def test_variants_share_output_shape(self, x8):
        shapes = {v: initialized(Mfem(8, 3, v))(x8).shape for v in ("gcn", "dilated", "trivial", "conv1x1")}
        assert set(shapes.values()) == {(2, 12, 10, 10)}

    def test_delta_over_vgg_levels(self):
        delta = sum(count_weights(Mfem(c, 8, "trivial")) - count_weights(Mfem(c, 8, "gcn"))
                    for c in (256, 512, 512, 1024))
        assert delta == sum(2632 * c for c in (256, 512, 512, 1024)) - 4 * 4224 == 6_047_232

    def test_conv1x1_count(self):
        assert count_weights(Mfem(512, 8, "conv1x1")) == 512 * 32

    def test_dilation_rates(self):
        m = Mfem(4, 2, "dilated")
        assert [b.dilation for b in m.branches] == [1, 3, 5, 7]
        assert all(b.weight.shape[2:] == (3, 3) for b in m.branches)

    def test_trivial_kernels(self):
        assert [b.weight.shape[2] for b in Mfem(4, 2, "trivial").branches] == [3, 7, 11, 15]

    def test_branch_order_and_relu(self, x8):
        m = initialized(Mfem(8, 3, "gcn", norm="none"))
        out = m(x8).data
        assert out.min() >= 0
        first = T.relu(m.norms[0](m.branches[0](x8))).data
        np.testing.assert_array_equal(out[:, :3], first)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            Mfem(4, 2, "bogus")


# =============================================================================
# Guide module
# =============================================================================

class TestGuide:
    @pytest.fixture
    def pair(self, rng):
        return Tensor(rng.normal(size=(2, 8, 6, 6))), Tensor(rng.normal(size=(2, 8, 3, 3)))

    def test_weight_ranges_and_shapes(self, pair):
        g = initialized(GuideModule(8))
        s, c, _ = g.weights(*pair)
        assert s.shape == (2, 1, 6, 6) and c.shape == (2, 8, 1, 1)
        assert 0 < s.data.min() and s.data.max() < 1
        assert 0 < c.data.min() and c.data.max() < 1

    def test_unit_weights_identity(self, pair):
        g = initialized(GuideModule(8))
        for conv in (g.spatial, g.excite):
            conv.weight.data[...] = 0
            conv.bias.data[...] = 1e3
        low, high = g(*pair)
        np.testing.assert_allclose(low.data, pair[0].data, atol=1e-12)
        np.testing.assert_allclose(high.data, T.upsample_bilinear(pair[1], 2).data, atol=1e-12)

    def test_guided_high_bounded(self, pair):
        _, high = initialized(GuideModule(8))(*pair)
        up = T.upsample_bilinear(pair[1], 2).data
        assert np.all(np.abs(high.data) <= np.abs(up))

    def test_geometry_contract(self, rng):
        g = initialized(GuideModule(32))
        low, high = g(Tensor(rng.normal(size=(1, 32, 60, 60))), Tensor(rng.normal(size=(1, 32, 30, 30))))
        assert low.shape == high.shape == (1, 32, 60, 60)

    def test_branch_toggles(self, pair):
        up = T.upsample_bilinear(pair[1], 2).data
        low, high = initialized(GuideModule(8, use_hg=False))(*pair)
        np.testing.assert_array_equal(high.data, up)
        low, high = initialized(GuideModule(8, use_lg=False))(*pair)
        np.testing.assert_array_equal(low.data, pair[0].data)

    def test_se_bottleneck(self):
        g = GuideModule(32, reduction=4)
        assert g.squeeze.weight.shape == (8, 64, 1, 1) and g.excite.weight.shape == (32, 8, 1, 1)
        assert GuideModule(2, reduction=4).squeeze.cout == 1

    def test_mismatch(self, rng):
        g = GuideModule(8)
        with pytest.raises(ShapeError):
            g(Tensor(rng.normal(size=(1, 8, 6, 6))), Tensor(rng.normal(size=(1, 8, 4, 4))))
        with pytest.raises(ShapeError):
            g(Tensor(rng.normal(size=(1, 8, 6, 6))), Tensor(rng.normal(size=(1, 4, 3, 3))))


# =============================================================================
# RRM
# =============================================================================

class TestRrm:
    def test_zero_path_identity(self, x8):
        r = initialized(Rrm(8))
        r.conv2.weight.data[...] = 0
        np.testing.assert_array_equal(r(x8).data, x8.data)

    def test_shape(self, rng):
        assert initialized(Rrm(32))(Tensor(rng.normal(size=(1, 32, 15, 15)))).shape == (1, 32, 15, 15)

    def test_residual_decomposition(self, x8):
        r = initialized(Rrm(8), seed=4)
        for _, p in r.named_parameters():
            p.data += 0.1
        y = r(x8).data
        expected = r.attention_map(x8).data * r.residual(x8).data
        np.testing.assert_allclose(y - x8.data, expected, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            Rrm(4)(Tensor(rng.normal(size=(1, 3, 4, 4))))


# =============================================================================
# Normalization
# =============================================================================

class TestNorm:
    def test_batch_statistics(self, rng):
        n = NormLayer(3)
        out = n(Tensor(rng.normal(loc=4, scale=3, size=(4, 3, 5, 5)))).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)

    def test_none_mode_affine(self, rng):
        n = NormLayer(2, "none")
        n.gamma.data[:] = [2, 3]
        n.beta.data[:] = [1, -1]
        x = rng.normal(size=(1, 2, 3, 3))
        out = n(Tensor(x)).data
        np.testing.assert_allclose(out[0, 0], 2 * x[0, 0] + 1)
        np.testing.assert_allclose(out[0, 1], 3 * x[0, 1] - 1)

    def test_running_stats_and_eval(self, rng):
        n = NormLayer(2)
        x = rng.normal(loc=2, size=(8, 2, 4, 4))
        n(Tensor(x))
        mu = x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(n.running_mean, 0.1 * mu)
        n.eval()
        out = n(Tensor(x)).data
        inv = 1 / np.sqrt(n.running_var + n.eps)
        np.testing.assert_allclose(out, (x - n.running_mean[None, :, None, None]) * inv[None, :, None, None])

    def test_eval_does_not_update(self, rng):
        n = NormLayer(2).eval()
        n(Tensor(rng.normal(size=(2, 2, 3, 3))))
        np.testing.assert_array_equal(n.running_mean, 0)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            NormLayer(2, "layer")


class TestModuleTree:
    def test_named_parameters_nested(self):
        names = dict(Mfem(3, 2, "gcn").named_parameters())
        assert "branches.1.a1.weight" in names and "norms.3.beta" in names

    def test_init_depends_on_name_and_seed(self):
        a, b = initialized(Conv2d(3, 4, 3), 0), initialized(Conv2d(3, 4, 3), 0)
        np.testing.assert_array_equal(a.weight.data, b.weight.data)
        c = initialized(Conv2d(3, 4, 3), 1)
        assert not np.array_equal(a.weight.data, c.weight.data)
        bound = np.sqrt(6 / 27)
        assert np.abs(a.weight.data).max() <= bound and np.all(a.bias.data == 0)


class TestBlockGradients:
    @pytest.mark.parametrize("check", select("blocks"), ids=lambda c: c.name)
    def test_block(self, check):
        assert check.run() < check.tol

    def test_pre_norm_biases_have_zero_gradient(self, rng):
        # justifies excluding them from relative-error checks in batch mode
        m = initialized(Mfem(3, 2, "gcn"))
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        proj = rng.normal(size=(2, 8, 8, 8))
        with Tape() as tape:
            loss = T.sum_all(T.mul(m(x), Tensor(proj)))
        grads = tape.backward(loss)
        params = m.parameters()
        skipped = pre_norm_biases(params)
        assert skipped == {"branches.0.bias", "branches.1.a2.bias", "branches.1.b2.bias",
                           "branches.2.a2.bias", "branches.2.b2.bias", "branches.3.a2.bias",
                           "branches.3.b2.bias"}
        for name in skipped:
            assert np.abs(grads[params[name].var_id]).max() < 1e-10
        assert np.abs(grads[params["branches.1.a1.bias"].var_id]).max() > 1e-6
