import numpy as np
import pytest
import torch

from edc.eome import (StemKernel, make_pretrained_stem, adapt_stem,
                      window_partition, window_merge, CarrierInit, HatBlock,
                      StreamEncoder, attention_cost, RED_INDEX)
from edc.model import seed_parameters
from edc.verify import fd_max_rel_error

torch.set_default_dtype(torch.float64)


@pytest.fixture
def pretrained():
    return make_pretrained_stem(8, k=4, seed=3)


class TestAdaptStem:
    def test_sar2_slice_identity(self, pretrained):
        out = adapt_stem(pretrained, "sar2")
        assert out.weights.shape == (8, 2, 4, 4)
        assert np.array_equal(out.weights, pretrained.weights[:, 0:2])

    def test_sar1_first_kernel(self, pretrained):
        out = adapt_stem(pretrained, "sar1")
        assert out.weights.shape == (8, 1, 4, 4)
        assert np.array_equal(out.weights, pretrained.weights[:, 0:1])

    def test_optical4_replicates_red(self, pretrained):
        out = adapt_stem(pretrained, "optical4")
        assert out.weights.shape == (8, 4, 4, 4)
        assert np.array_equal(out.weights[:, :3], pretrained.weights)
        assert np.array_equal(out.weights[:, 3], out.weights[:, RED_INDEX])

    def test_rejects_wrong_input_channels(self, pretrained):
        bad = StemKernel(pretrained.weights[:, 0:2])
        with pytest.raises(ValueError):
            adapt_stem(bad, "sar2")
        with pytest.raises(ValueError):
            adapt_stem(pretrained, "thermal")


class TestWindows:
    def test_partition_arithmetic(self):
        f = torch.rand(8, 8, 4)
        wt = window_partition(f, 4)
        assert wt.windows.shape == (1, 4, 16, 4)

    def test_roundtrip_exact(self):
        f = torch.rand(16, 16, 8)
        assert torch.equal(window_merge(window_partition(f, 4)), f)

    def test_padded_roundtrip(self):
        f = torch.rand(10, 10, 3)
        wt = window_partition(f, 4)
        assert wt.windows.shape == (1, 9, 16, 3)
        assert torch.equal(window_merge(wt), f)

    def test_rejects_nonpositive_window(self):
        with pytest.raises(ValueError):
            window_partition(torch.rand(8, 8, 2), 0)


class TestCarrierInit:
    def test_constant_tokens_identity_proj(self):
        ci = CarrierInit(4)
        with torch.no_grad():
            ci.proj.weight.copy_(torch.eye(4))
            ci.proj.bias.zero_()
        wt = window_partition(torch.ones(8, 8, 4), 4)
        t = ci(wt)
        assert torch.allclose(t, torch.ones(1, 4, 4))

    def test_single_window_global_mean(self):
        ci = CarrierInit(3)
        f = torch.rand(4, 4, 3)
        wt = window_partition(f, 4)
        expected = ci.proj(f.mean(dim=(0, 1)))
        assert torch.allclose(ci(wt).squeeze(), expected)

    def test_against_bruteforce_mean(self):
        ci = CarrierInit(5)
        f = torch.rand(8, 8, 5)
        wt = window_partition(f, 4)
        for m in range(4):
            acc = torch.zeros(5)
            for tok in wt.windows[0, m]:
                acc += tok
            expected = ci.proj(acc / 16)
            assert torch.allclose(ci(wt)[0, m], expected, atol=1e-6)


class TestHatBlock:
    def test_shape_contract(self):
        blk = HatBlock(32, heads=4, window=4)
        wt = window_partition(torch.rand(8, 8, 32), 4)
        t = torch.rand(1, 4, 32)
        wt2, t2 = blk(wt, t)
        assert wt2.windows.shape == wt.windows.shape
        assert t2.shape == t.shape

    def test_window_permutation_equivariance(self):
        torch.manual_seed(0)
        blk = HatBlock(16, heads=2, window=4)
        with torch.no_grad():
            blk.pos_bias.zero_()
        wt = window_partition(torch.rand(8, 8, 16), 4)
        t = torch.rand(1, 4, 16)
        out_w, out_t = blk(wt, t)

        perm = torch.tensor([2, 0, 3, 1])
        from edc.eome import WindowedTokens
        wt_p = WindowedTokens(wt.windows[:, perm], 4, wt.origin_shape)
        out_wp, out_tp = blk(wt_p, t[:, perm])
        assert torch.allclose(out_wp.windows, out_w.windows[:, perm], atol=1e-6)
        assert torch.allclose(out_tp, out_t[:, perm], atol=1e-6)

    def test_rejects_mismatched_carriers(self):
        blk = HatBlock(16, heads=2, window=4)
        wt = window_partition(torch.rand(8, 8, 16), 4)
        with pytest.raises(ValueError):
            blk(wt, torch.rand(1, 3, 16))

    def test_gradients(self):
        torch.manual_seed(1)
        blk = HatBlock(6, heads=2, window=2)
        x = torch.rand(4, 4, 6)
        t0 = torch.rand(1, 4, 6)

        def loss():
            wt = window_partition(x, 2)
            out_w, out_t = blk(wt, t0)
            return (out_w.windows * out_w.windows).sum() + out_t.sum()

        assert fd_max_rel_error(loss, blk.parameters()) < 1e-4


class TestStreamEncoder:
    def test_stage_shapes(self):
        enc = StreamEncoder(4, widths=(8, 12, 16, 20), window=2, heads=2)
        pyr = enc(torch.rand(1, 4, 64, 64))
        shapes = [tuple(s.shape) for s in pyr.stages]
        assert shapes == [(1, 8, 16, 16), (1, 12, 8, 8),
                          (1, 16, 4, 4), (1, 20, 2, 2)]

    def test_deterministic(self):
        enc = StreamEncoder(2, widths=(4, 6, 8, 10), window=2, heads=2)
        x = torch.rand(1, 2, 32, 32)
        a = enc(x)
        b = enc(x)
        for s1, s2 in zip(a.stages, b.stages):
            assert torch.equal(s1, s2)

    def test_channel_mismatch_raises(self):
        enc = StreamEncoder(4, widths=(4, 6, 8, 10), heads=2)
        with pytest.raises(ValueError):
            enc(torch.rand(1, 3, 32, 32))

    def test_set_stem_preserves_weights(self):
        enc = StreamEncoder(2, widths=(8, 12, 16, 20))
        kern = adapt_stem(make_pretrained_stem(8, seed=5), "sar2")
        enc.set_stem(kern)
        assert np.array_equal(enc.stem.weight.detach().numpy(), kern.weights)

    @pytest.mark.slow
    def test_gradients_full_stream(self):
        enc = StreamEncoder(2, widths=(3, 4, 4, 6), window=2, heads=1)
        seed_parameters(enc, 0)
        x = torch.rand(1, 2, 16, 16)

        def loss():
            pyr = enc(x)
            return sum(s.sum() for s in pyr.stages)

        assert fd_max_rel_error(loss, enc.parameters()) < 1e-4


class TestAttentionCost:
    def test_dense_64(self):
        assert attention_cost(64, 64, mode="dense") == 16_777_216

    def test_carrier_64_window8(self):
        assert attention_cost(64, 64, window=8, mode="carrier") == 274_496

    def test_single_window_limit(self):
        n = 64 * 64
        carrier = attention_cost(64, 64, window=64, mode="carrier")
        dense = attention_cost(64, 64, mode="dense")
        assert carrier == (n + 1) ** 2 + 1
        assert abs(carrier / dense - 1.0) < 0.001

    def test_carrier_cheaper_everywhere(self):
        for hw in (16, 32, 64, 128):
            for window in (2, 4, 8):
                if window <= hw // 2:
                    assert (attention_cost(hw, hw, window=window, mode="carrier")
                            < attention_cost(hw, hw, mode="dense"))

    def test_rejects_nondividing_window(self):
        with pytest.raises(ValueError):
            attention_cost(10, 10, window=4, mode="carrier")
