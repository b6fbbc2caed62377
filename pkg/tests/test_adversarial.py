import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import rand_image, tiny_model
from wrib.adversarial import Discriminator, adv_losses, relativistic_avg
from wrib.config import desk_config
from wrib.errors import EmptyBatch, ShapeMismatch

scores = st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=8)


@pytest.fixture(scope="module")
def disc():
    torch.manual_seed(0)
    return Discriminator(desk_config().model).eval()


class TestDiscriminator:
    def test_one_score_per_image(self, disc):
        with torch.no_grad():
            out = disc(rand_image(4, 3, 256, 768))
        assert out.shape == (4,)
        assert torch.isfinite(out).all()

    def test_deterministic_eval(self, disc):
        x = rand_image(2, 3, 256, 768)
        with torch.no_grad():
            assert torch.equal(disc(x), disc(x))

    def test_zero_image(self, disc):
        with torch.no_grad():
            assert torch.isfinite(disc(torch.zeros(1, 3, 256, 768))).all()

    def test_wrong_shape(self, disc):
        with pytest.raises(ShapeMismatch):
            disc(torch.zeros(1, 3, 256, 512))

    def test_spectral_norm_everywhere(self, disc):
        weighted = [m for m in disc.modules() if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear))]
        assert len(weighted) == 7
        assert all(hasattr(m, "weight_orig") for m in weighted)

    def test_default_architecture(self):
        d = Discriminator()
        convs = [m for m in d.modules() if isinstance(m, torch.nn.Conv2d)]
        assert [c.out_channels for c in convs] == [64, 128, 256, 512, 512, 512]
        assert all(c.stride == (2, 2) for c in convs)


class TestRelativistic:
    def test_examples(self):
        assert relativistic_avg([1.0], [0.0]).tolist() == [1.0]
        assert relativistic_avg([0.0], [1.0]).tolist() == [-1.0]
        assert relativistic_avg([2.0, 0.0], [1.0, 1.0]).tolist() == [1.0, -1.0]

    @given(c=st.floats(-100, 100, allow_nan=False), n=st.integers(1, 6), m=st.integers(1, 6))
    def test_constant_scores(self, c, n, m):
        out = relativistic_avg(torch.full((n,), c, dtype=torch.float64), torch.full((m,), c, dtype=torch.float64))
        assert torch.all(out.abs() <= 1e-12 * max(1.0, abs(c)))

    def test_empty(self):
        with pytest.raises(EmptyBatch):
            relativistic_avg(torch.ones(2), torch.ones(0))
        with pytest.raises(EmptyBatch):
            adv_losses(torch.ones(0), torch.ones(2))


class TestLosses:
    @pytest.mark.parametrize("real,fake,ld,lg", [(0.0, 0.0, 2.0, 0.0), (1.0, 0.0, 0.0, 1.0), (0.0, 1.0, 8.0, 1.0)])
    def test_closed_forms(self, real, fake, ld, lg):
        loss_d, loss_g = adv_losses(torch.full((3,), real), torch.full((3,), fake))
        assert loss_d.item() == pytest.approx(ld)
        assert loss_g.item() == pytest.approx(lg)

    @settings(max_examples=100)
    @given(real=scores, fake=scores, shift=st.floats(-100, 100, allow_nan=False))
    def test_shift_invariance_and_sign(self, real, fake, shift):
        r = torch.tensor(real, dtype=torch.float64)
        f = torch.tensor(fake, dtype=torch.float64)
        d0, g0 = adv_losses(r, f)
        d1, g1 = adv_losses(r + shift, f + shift)
        assert d0 >= 0 and g0 >= 0
        assert d1.item() == pytest.approx(d0.item(), rel=1e-6, abs=1e-6)
        assert g1.item() == pytest.approx(g0.item(), rel=1e-6, abs=1e-6)

    def test_generator_gradient_finite_difference(self):
        torch.manual_seed(0)
        disc = Discriminator(tiny_model()).double().eval()
        real = rand_image(2, 3, 64, 192, seed=1, dtype=torch.float64)
        fake = rand_image(2, 3, 64, 192, seed=2, dtype=torch.float64).requires_grad_()

        def loss_g(x):
            return adv_losses(disc(real), disc(x))[1]

        loss_g(fake).backward()
        assert fake.grad.abs().sum() > 0
        h = 1e-6
        for idx in [(0, 0, 10, 20), (1, 2, 40, 150), (0, 1, 63, 191)]:
            bump = torch.zeros_like(fake)
            bump[idx] = h
            with torch.no_grad():
                numeric = (loss_g(fake + bump) - loss_g(fake - bump)).item() / (2 * h)
            assert fake.grad[idx].item() == pytest.approx(numeric, rel=1e-4, abs=1e-10)
