import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import rand_image, tiny_model
from wrib.bct import BCTOutput, split_vertical
from wrib.errors import InvalidWidth, ShapeMismatch
from wrib.losses import (
    MRF_LAYERS,
    VGG_LAYERS,
    VGGFeatures,
    feat_con_loss,
    feat_rec_loss,
    idmrf_loss,
    mrf_layer_loss,
    pixel_loss_ft,
    pixel_loss_sr,
    psnr,
    weight_mask,
)
from wrib.networks import Encoder

# frozen from direct evaluation of the two-Gaussian mask with sigma = 64
M0_256 = 1.0003354626279024
M128_256 = 0.2706705664732254
M64_256 = 0.6176396562508757


@pytest.fixture(scope="module")
def vgg():
    return VGGFeatures()


@pytest.fixture(scope="module")
def vgg64():
    return VGGFeatures().double()


def mask_oracle(d_total):
    s = d_total / 4
    return [math.exp(-0.5 * (d / s) ** 2) + math.exp(-0.5 * ((d - d_total) / s) ** 2) for d in range(d_total)]


class TestMask:
    def test_frozen_values(self):
        m = weight_mask(256)
        assert m[0].item() == pytest.approx(M0_256, abs=1e-12)
        assert m[128].item() == pytest.approx(M128_256, abs=1e-12)
        assert m[64].item() == pytest.approx(M64_256, abs=1e-12)
        assert m[0].item() == pytest.approx(1.000335, abs=1e-6)
        assert m[128].item() == pytest.approx(0.270671, abs=1e-6)

    def test_symmetry(self):
        m = weight_mask(256)
        assert m[64].item() == m[192].item()
        assert torch.allclose(m[1:], m[1:].flip(0), atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(d_total=st.integers(2, 600))
    def test_against_oracle(self, d_total):
        m = weight_mask(d_total)
        assert np.allclose(m.numpy(), mask_oracle(d_total), atol=1e-12)
        assert (m > 0).all()
        assert m.argmin().item() in (d_total // 2, (d_total - 1) // 2, (d_total + 1) // 2)

    def test_invalid(self):
        with pytest.raises(InvalidWidth):
            weight_mask(1)


def _parts(seed=0, h=4, w=6, dtype=torch.float64):
    return [rand_image(1, 3, h, w, seed=seed + i, dtype=dtype) for i in range(3)]


class TestPixelLosses:
    def test_perfect(self):
        l, m, r = _parts()
        pano = torch.cat([l, m, r], -1)
        assert pixel_loss_sr(pano, l, m, r).item() == 0
        assert pixel_loss_ft(pano, l, r).item() == 0

    def test_ft_ignores_mid(self):
        l, m, r = _parts()
        pano = torch.cat([l, torch.randn_like(m), r], -1)
        assert pixel_loss_ft(pano, l, r).item() == 0
        other = torch.cat([l + 0.1, torch.randn_like(m), r], -1)
        same = torch.cat([l + 0.1, torch.randn_like(m), r], -1)
        assert pixel_loss_ft(other, l, r).item() == pixel_loss_ft(same, l, r).item()

    @pytest.mark.parametrize("e", [0.5, -0.25, 1e-3])
    def test_uniform_left_error(self, e):
        l, m, r = _parts()
        pano = torch.cat([l + e, m, r], -1)
        assert pixel_loss_sr(pano, l, m, r).item() == pytest.approx(e * e, rel=1e-9)

    def test_mask_weighting(self):
        l, m, r = _parts(h=4, w=64)
        border = m.clone()
        border[..., 0] += 0.5
        center = m.clone()
        center[..., 32] += 0.5
        lb = pixel_loss_sr(torch.cat([l, border, r], -1), l, m, r)
        lc = pixel_loss_sr(torch.cat([l, center, r], -1), l, m, r)
        assert lc < lb
        mask = mask_oracle(64)
        assert lb.item() == pytest.approx((0.5 * mask[0]) ** 2 / 64, rel=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_ft_is_sr_minus_mid(self, seed):
        l, m, r = _parts(seed)
        pano = rand_image(1, 3, 4, 18, seed=seed + 99, dtype=torch.float64)
        mask = torch.tensor(mask_oracle(6), dtype=torch.float64)
        mid_term = ((mask * (pano[..., 6:12] - m)) ** 2).mean()
        assert pixel_loss_sr(pano, l, m, r).item() >= 0
        assert pixel_loss_ft(pano, l, r).item() == pytest.approx(
            (pixel_loss_sr(pano, l, m, r) - mid_term).item(), abs=1e-12)

    def test_shape_errors(self):
        l, m, r = _parts()
        with pytest.raises(ShapeMismatch):
            pixel_loss_sr(torch.zeros(1, 3, 4, 17), l, m, r)
        with pytest.raises(ShapeMismatch):
            pixel_loss_ft(torch.zeros(1, 3, 4, 21), l, r)

    def test_gradcheck(self):
        l, m, r = _parts()
        pano = rand_image(1, 3, 4, 18, seed=7, dtype=torch.float64).requires_grad_()
        assert torch.autograd.gradcheck(lambda p: pixel_loss_sr(p, l, m, r), (pano,), rtol=1e-3)
        assert torch.autograd.gradcheck(lambda p: pixel_loss_ft(p, l, r), (pano,), rtol=1e-3)


class TestFeatureLosses:
    @pytest.fixture
    def encoder(self):
        torch.manual_seed(0)
        return Encoder(tiny_model()).double().eval()

    def test_feat_rec_fixed_point_and_offset(self, encoder):
        img = rand_image(2, 3, 64, 64, dtype=torch.float64)
        with torch.no_grad():
            target, _ = encoder(img)
        assert feat_rec_loss(target, img, encoder).item() == 0
        eps = 0.3
        assert feat_rec_loss(target + eps, img, encoder).item() == pytest.approx(eps ** 2, rel=1e-9)

    def test_feat_rec_no_gradient_to_target_branch(self, encoder):
        img = rand_image(1, 3, 64, 64, dtype=torch.float64).requires_grad_()
        f = torch.randn(1, 16, 2, 2, dtype=torch.float64, requires_grad=True)
        loss = feat_rec_loss(f, img, encoder)
        loss.backward()
        assert img.grad is None
        assert all(p.grad is None for p in encoder.parameters())
        assert f.grad.abs().sum() > 0
        assert torch.autograd.gradcheck(lambda x: feat_rec_loss(x, img.detach(), encoder), (f.detach().requires_grad_(),))

    def test_feat_rec_shape(self, encoder):
        with pytest.raises(ShapeMismatch):
            feat_rec_loss(torch.zeros(1, 16, 2, 3, dtype=torch.float64), torch.zeros(1, 3, 64, 64, dtype=torch.float64), encoder)

    def _bct_out(self, f_left, f_mid, f_right, k=2):
        s = lambda f: split_vertical(f, k)
        return BCTOutput(fwd_mid=s(f_mid), bwd_mid=s(f_mid.clone()), fwd_right=s(f_right.clone()),
                         bwd_left=s(f_left.clone()), fused_mid=f_mid)

    def test_feat_con(self):
        fl, fm, fr = (torch.randn(1, 4, 2, 4, dtype=torch.float64) for _ in range(3))
        out = self._bct_out(fl, fm, fr)
        assert feat_con_loss(out, fl, fr).item() == 0
        eps = 0.2
        out.fwd_mid = [x + eps for x in out.fwd_mid]
        assert feat_con_loss(out, fl, fr).item() == pytest.approx(eps ** 2, rel=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000))
    def test_feat_con_nonnegative(self, seed):
        g = torch.Generator().manual_seed(seed)
        fl, fr = torch.randn(1, 4, 2, 4, generator=g), torch.randn(1, 4, 2, 4, generator=g)
        seqs = [split_vertical(torch.randn(1, 4, 2, 4, generator=g), 2) for _ in range(4)]
        out = BCTOutput(*seqs, fused_mid=torch.zeros(1, 4, 2, 4))
        assert feat_con_loss(out, fl, fr).item() >= 0

    def test_feat_con_gradcheck(self):
        fl, fm, fr = (torch.randn(1, 2, 2, 4, dtype=torch.float64) for _ in range(3))
        x = torch.randn(1, 2, 2, 4, dtype=torch.float64, requires_grad=True)

        def f(x):
            out = self._bct_out(fl, fm, fr)
            out.fwd_mid = split_vertical(x, 2)
            return feat_con_loss(out, fl, fr)
        assert torch.autograd.gradcheck(f, (x,), rtol=1e-3)


def mrf_oracle(pred, target, p=3, h=0.5, eps=1e-5):
    """Loop-based IDMRF for one unbatched C×H×W feature pair."""
    def patches(f):
        c, hh, ww = f.shape
        out = []
        for r in range(hh - p + 1):
            for q in range(ww - p + 1):
                v = f[:, r:r + p, q:q + p].reshape(-1)
                out.append(v / max(np.linalg.norm(v), 1e-12))
        return out
    vs, ss = patches(pred), patches(target)
    best = []
    for s_idx in range(len(ss)):
        col = []
        for v in vs:
            mu_row = [v @ s for s in ss]
            denom = max(mu_row) + eps
            rs = [math.exp(m / denom / h) for m in mu_row]
            col.append(rs[s_idx] / sum(rs))
        best.append(max(col))
    return -math.log(sum(best) / len(best))


class TestIDMRF:
    def test_layers(self, vgg):
        assert vgg.layers == ("relu3_2", "relu4_2") == MRF_LAYERS
        assert VGG_LAYERS == {"relu3_2": 13, "relu4_2": 22}
        feats = vgg(torch.zeros(1, 3, 32, 32))
        assert set(feats) == {"relu3_2", "relu4_2"}
        assert feats["relu3_2"].shape == (1, 256, 8, 8)
        assert feats["relu4_2"].shape == (1, 512, 4, 4)
        assert type(vgg.trunk[VGG_LAYERS["relu3_2"]]).__name__ == "ReLU"
        assert type(vgg.trunk[VGG_LAYERS["relu4_2"]]).__name__ == "ReLU"

    def test_layer_loss_matches_oracle(self):
        g = torch.Generator().manual_seed(0)
        a = torch.rand(2, 5, 6, 6, generator=g, dtype=torch.float64)
        b = torch.rand(2, 5, 6, 6, generator=g, dtype=torch.float64)
        got = mrf_layer_loss(a, b).item()
        want = np.mean([mrf_oracle(a[i].numpy(), b[i].numpy()) for i in range(2)])
        assert got == pytest.approx(want, abs=1e-10)

    def test_finite_scalar(self, vgg):
        out = idmrf_loss(rand_image(1, 3, 32, 32, seed=1), rand_image(1, 3, 32, 32, seed=2), vgg)
        assert out.dim() == 0 and torch.isfinite(out)

    def test_self_match_dominance(self, vgg, photos):
        rng = np.random.default_rng(0)
        names = sorted(photos)
        wins = 0
        for t in range(20):
            arr = photos[names[t % len(names)]]
            if arr.ndim == 2:
                arr = np.stack([arr] * 3, -1)
            y = rng.integers(0, arr.shape[0] - 32)
            x = rng.integers(0, arr.shape[1] - 32)
            crop = torch.from_numpy(arr[y:y + 32, x:x + 32, :3].astype(np.float32)).permute(2, 0, 1) / 127.5 - 1
            img = crop[None]
            perm = torch.from_numpy(rng.permutation(32 * 32))
            shuffled = img.flatten(2)[..., perm].view_as(img)
            with torch.no_grad():
                wins += idmrf_loss(img, img, vgg).item() < idmrf_loss(shuffled, img, vgg).item()
        assert wins >= 19

    def test_gradient_only_to_prediction(self, vgg):
        pred = rand_image(1, 3, 32, 32, seed=3).requires_grad_()
        target = rand_image(1, 3, 32, 32, seed=4).requires_grad_()
        idmrf_loss(pred, target, vgg).backward()
        assert pred.grad is not None and pred.grad.abs().sum() > 0
        assert target.grad is None or target.grad.abs().sum() == 0
        assert all(p.grad is None and not p.requires_grad for p in vgg.parameters())

    def test_stays_frozen_in_train_mode(self, vgg):
        vgg.train()
        assert not vgg.training

    def test_directional_derivative(self, vgg64):
        pred = rand_image(1, 3, 32, 32, seed=5, dtype=torch.float64).requires_grad_()
        target = rand_image(1, 3, 32, 32, seed=6, dtype=torch.float64)
        direction = rand_image(1, 3, 32, 32, seed=7, dtype=torch.float64)
        loss = idmrf_loss(pred, target, vgg64)
        loss.backward()
        analytic = (pred.grad * direction).sum().item()
        h = 1e-6
        with torch.no_grad():
            up = idmrf_loss(pred + h * direction, target, vgg64).item()
            down = idmrf_loss(pred - h * direction, target, vgg64).item()
        numeric = (up - down) / (2 * h)
        assert analytic == pytest.approx(numeric, rel=1e-3)

    def test_layer_gradcheck(self):
        g = torch.Generator().manual_seed(1)
        a = torch.rand(1, 3, 5, 5, generator=g, dtype=torch.float64, requires_grad=True)
        b = torch.rand(1, 3, 5, 5, generator=g, dtype=torch.float64)
        assert torch.autograd.gradcheck(lambda x: mrf_layer_loss(x, b), (a,), rtol=1e-3)


def test_psnr():
    a = torch.zeros(1, 3, 4, 4)
    assert psnr(a, a) == math.inf
    # mse 0.04 on a range of 2 -> 10 log10(4 / 0.04) = 20 dB
    assert psnr(a + 0.2, a) == pytest.approx(20.0, abs=1e-6)
