"""Beta coefficient sampling and convex image mixing."""

import pytest
import torch
from scipy import stats

from cromo.mixup import build_mix_batch, mix, sample_lambda


class TestSampleLambda:
    def test_uniform_for_alpha_one(self, torch_gen):
        lam = sample_lambda(1.0, 100_000, torch_gen)
        assert lam.mean().item() == pytest.approx(0.5, abs=0.01)
        # Beta(1,1) is Uniform(0,1)
        ks = stats.kstest(lam.numpy(), "uniform")
        assert ks.pvalue > 1e-3

    def test_concentration_for_large_alpha(self, torch_gen):
        alpha = 1e4
        lam = sample_lambda(alpha, 20_000, torch_gen)
        # Beta(a, a) variance is 1 / (8a + 4)
        assert lam.std().item() < 0.01
        assert lam.std().item() == pytest.approx((1 / (8 * alpha + 4)) ** 0.5,
                                                 rel=0.1)
        assert lam.mean().item() == pytest.approx(0.5, abs=0.005)

    def test_deterministic_under_seed(self):
        a = sample_lambda(0.7, 100, torch.Generator().manual_seed(9))
        b = sample_lambda(0.7, 100, torch.Generator().manual_seed(9))
        assert torch.equal(a, b)

    def test_bad_args(self, torch_gen):
        with pytest.raises(ValueError):
            sample_lambda(0.0, 4, torch_gen)
        with pytest.raises(ValueError):
            sample_lambda(1.0, 0, torch_gen)

    def test_range(self, torch_gen):
        lam = sample_lambda(0.2, 10_000, torch_gen)
        assert lam.min().item() >= 0.0
        assert lam.max().item() <= 1.0


class TestMix:
    def test_endpoints_exact(self, torch_gen):
        x = torch.rand((4, 2, 3, 3), generator=torch_gen)
        y = torch.rand((4, 2, 3, 3), generator=torch_gen)
        assert torch.equal(mix(x, y, torch.ones(4)), x)
        assert torch.equal(mix(x, y, torch.zeros(4)), y)

    def test_midpoint(self):
        x = torch.zeros(2, 1, 2, 2)
        y = torch.full((2, 1, 2, 2), 2.0)
        out = mix(x, y, torch.full((2,), 0.5))
        assert torch.equal(out, torch.ones(2, 1, 2, 2))

    def test_shape_and_range_validation(self):
        x = torch.zeros(2, 1, 2, 2)
        with pytest.raises(ValueError):
            mix(x, torch.zeros(3, 1, 2, 2), torch.ones(2))
        with pytest.raises(ValueError):
            mix(x, x, torch.tensor([0.5, 1.5]))
        with pytest.raises(ValueError):
            mix(x, x, torch.ones(3))


class TestBuildMixBatch:
    def _views(self, gen, b=6, pb=4):
        cur = (torch.rand((b, 2, 4, 4), generator=gen),
               torch.rand((b, 2, 4, 4), generator=gen))
        par = (torch.rand((pb, 2, 4, 4), generator=gen),
               torch.rand((pb, 2, 4, 4), generator=gen))
        return cur, par

    def test_convexity_bounds(self, torch_gen):
        cur, par = self._views(torch_gen)
        mb = build_mix_batch(cur, par, 1.0, torch_gen)
        for view, (c, p) in ((mb.view1, (cur[0], par[0])),
                             (mb.view2, (cur[1], par[1]))):
            partner = p[mb.pairing]
            lo = torch.minimum(c, partner)
            hi = torch.maximum(c, partner)
            assert (view >= lo - 1e-7).all()
            assert (view <= hi + 1e-7).all()

    def test_same_lambda_and_pairing_across_views(self, torch_gen):
        cur, par = self._views(torch_gen)
        mb = build_mix_batch(cur, par, 1.0, torch_gen)
        # reconstruct the current view from the mix: (v - (1-lam) p) / lam
        keep = mb.lam > 0.1
        lam = mb.lam[keep].view(-1, 1, 1, 1)
        for view, c, p in ((mb.view1, cur[0], par[0]), (mb.view2, cur[1], par[1])):
            rec = (view[keep] - (1 - lam) * p[mb.pairing][keep]) / lam
            assert torch.allclose(rec, c[keep], atol=1e-5)

    def test_large_alpha_mixes_near_midpoint(self, torch_gen):
        cur, par = self._views(torch_gen, b=32)
        mb = build_mix_batch(cur, par, 1e4, torch_gen)
        mid = 0.5 * (cur[0] + par[0][mb.pairing])
        assert (mb.view1 - mid).abs().max().item() < 0.02

    def test_empty_partner_batch_rejected(self, torch_gen):
        cur, _ = self._views(torch_gen)
        empty = (torch.zeros(0, 2, 4, 4), torch.zeros(0, 2, 4, 4))
        with pytest.raises(ValueError, match="buffer"):
            build_mix_batch(cur, empty, 1.0, torch_gen)

    def test_pairing_indexes_partner_batch(self, torch_gen):
        cur, par = self._views(torch_gen, b=40, pb=3)
        mb = build_mix_batch(cur, par, 1.0, torch_gen)
        assert mb.pairing.min().item() >= 0
        assert mb.pairing.max().item() < 3
        assert mb.lam.shape == (40,)
