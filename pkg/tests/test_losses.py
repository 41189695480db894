import math

import numpy as np
import pytest
import torch
from torch import nn

from onestep_face.diffusion import build_schedule, forward_diffuse_batch
from onestep_face.losses import (
    LossReport,
    LossWeights,
    combine_generator,
    dists,
    ea_dists,
    gan_discriminator_loss,
    gan_generator_loss,
    generator_total,
    identity_loss,
    mse,
    sobel,
)
from onestep_face.networks import FaceEmbedder, FeatureExtractor, LatentDiscriminator, seeded

from oracles import finite_diff, naive_correlate

SCHED = build_schedule(1000, 8.5e-4, 1.2e-2)
LN2 = math.log(2)


@pytest.fixture(scope="module")
def feat():
    return FeatureExtractor()


class FixedEmbed(nn.Module):
    def __init__(self, vectors):
        super().__init__()
        self.vectors = vectors

    def forward(self, x):
        return self.vectors[int(x.flatten()[0].round())][None]


class ConstD(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, z, t):
        return torch.full((z.shape[0],), self.value, dtype=z.dtype)


# identity


def test_identity_loss_hits_0_1_2():
    vecs = torch.tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    F = FixedEmbed(vecs)
    img = lambda i: torch.full((1, 3, 4, 4), float(i))
    assert identity_loss(img(0), img(0), F).item() == pytest.approx(0.0, abs=1e-7)
    assert identity_loss(img(0), img(1), F).item() == pytest.approx(1.0, abs=1e-7)
    assert identity_loss(img(0), img(2), F).item() == pytest.approx(2.0, abs=1e-7)


def test_face_embedder_unit_norm_and_range():
    F = FaceEmbedder()
    x, y = torch.rand(5, 3, 32, 32), torch.rand(5, 3, 32, 32)
    with torch.no_grad():
        e = F(x)
    np.testing.assert_allclose(e.norm(dim=-1).numpy(), 1.0, atol=1e-5)
    assert torch.equal(e, F(x).detach())
    v = identity_loss(x, y, F).item()
    assert 0 <= v <= 2


# sobel, dists


def test_sobel_constant_and_step():
    assert torch.all(sobel(torch.full((1, 3, 8, 8), 0.3)) == 0)
    x = torch.zeros(1, 1, 6, 8)
    x[..., 4:] = 1.0
    s = sobel(x)[0, 0]
    cols = torch.nonzero(s.abs().sum(0) > 1e-6).flatten().tolist()
    assert cols == [3, 4]


def test_sobel_single_pixel_matches_naive_convolution():
    img = np.zeros((7, 7))
    img[3, 3] = 1.0
    gx = naive_correlate(img, [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]])
    gy = naive_correlate(img, [[-1, -2, -1], [0, 0, 0], [1, 2, 1]])
    got = sobel(torch.tensor(img)[None, None])[0, 0].numpy()
    np.testing.assert_allclose(got, np.hypot(gx, gy), atol=1e-6)


def test_dists_identity_symmetry_and_bounds(feat):
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(4, 3, 32, 32, generator=gen)
    y = torch.rand(4, 3, 32, 32, generator=gen)
    assert dists(x, x, feat).item() == pytest.approx(0.0, abs=1e-6)
    assert dists(x, y, feat).item() == pytest.approx(dists(y, x, feat).item(), abs=1e-6)
    vals = []
    for _ in range(100):
        a = torch.rand(1, 3, 16, 16, generator=gen) * torch.rand(1, generator=gen)
        b = torch.rand(1, 3, 16, 16, generator=gen)
        vals.append(dists(a, b, feat).item())
    assert min(vals) >= 0 and max(vals) <= 1


def test_ea_dists_definition(feat):
    x, y = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    assert ea_dists(x, x, feat).item() == pytest.approx(0.0, abs=1e-6)
    assert torch.equal(ea_dists(x, y, feat), dists(x, y, feat) + dists(sobel(x), sobel(y), feat))
    assert ea_dists(x, y, feat) >= dists(x, y, feat)
    a, b = torch.full((1, 3, 16, 16), 0.2), torch.full((1, 3, 16, 16), 0.7)
    assert dists(sobel(a), sobel(b), feat).item() == pytest.approx(0.0, abs=1e-6)
    assert ea_dists(a, b, feat).item() == pytest.approx(dists(a, b, feat).item(), abs=1e-6)


# GAN terms


def test_constant_discriminator_values():
    z = torch.randn(3, 4, 4, 4)
    assert gan_generator_loss(z, None, ConstD(0.5), SCHED).item() == pytest.approx(LN2, abs=1e-6)
    assert gan_discriminator_loss(z, z, None, ConstD(0.5), SCHED).item() == pytest.approx(2 * LN2, abs=1e-6)
    assert 0 < gan_generator_loss(z, 5, ConstD(1.0), SCHED).item() < 1e-5


def test_perfect_discriminator_limit():
    class Perfect(nn.Module):
        def forward(self, z, t):
            return (z.flatten(1)[:, 0] > 50).to(z.dtype)

    real, fake = torch.full((2, 1, 2, 2), 1e4), torch.full((2, 1, 2, 2), -1e4)
    assert 0 < gan_discriminator_loss(real, fake, 1, Perfect(), SCHED).item() < 1e-5


def test_generator_loss_single_draw_by_hand():
    gen = torch.Generator().manual_seed(0)
    with seeded(0):
        D = LatentDiscriminator(4, 16)
    z = torch.randn(2, 4, 4, 4, generator=gen)
    eps = torch.randn(2, 4, 4, 4, generator=gen)
    t = torch.tensor([17, 640])
    with torch.no_grad():
        z_t = forward_diffuse_batch(z, t, eps, SCHED)
        expected = -torch.log(D(z_t, t)).mean().item()
        assert gan_generator_loss(z, t, D, SCHED, eps=eps).item() == pytest.approx(expected, rel=1e-6)


def test_generator_loss_monotone_in_fake_score():
    z = torch.randn(2, 4, 4, 4)
    vals = [gan_generator_loss(z, 10, ConstD(p), SCHED).item() for p in (0.2, 0.5, 0.9)]
    assert vals[0] > vals[1] > vals[2]


def test_discriminator_gradient_matches_finite_differences():
    class Toy(nn.Module):
        def __init__(self):
            super().__init__()
            self.w = nn.Parameter(torch.tensor([0.3, -0.2], dtype=torch.float64))

        def forward(self, z, t):
            return torch.sigmoid(self.w[0] * z.mean(dim=(1, 2, 3)) + self.w[1])

    D = Toy()
    zh, zf = torch.randn(3, 2, 2, 2, dtype=torch.float64), torch.randn(3, 2, 2, 2, dtype=torch.float64)
    er, ef = torch.randn_like(zh), torch.randn_like(zf)
    t = 300
    gan_discriminator_loss(zh, zf, t, D, SCHED, eps_real=er, eps_fake=ef).backward()

    def f(w):
        with torch.no_grad():
            D.w.copy_(torch.from_numpy(w))
            return gan_discriminator_loss(zh, zf, t, D, SCHED, eps_real=er, eps_fake=ef).item()

    grad = D.w.grad.clone().numpy()
    fd = finite_diff(f, np.array([0.3, -0.2]))
    np.testing.assert_allclose(grad, fd, rtol=1e-3)


def test_discriminator_noise_draws_are_independent():
    gen = torch.Generator().manual_seed(3)
    seen = []

    class Spy(nn.Module):
        def forward(self, z, t):
            seen.append(z.clone())
            return torch.full((z.shape[0],), 0.5)

    z = torch.zeros(1, 1, 3, 3)
    gan_discriminator_loss(z, z, 1000, Spy(), SCHED, generator=gen)
    assert not torch.equal(seen[0], seen[1])


def test_timestep_range_checked():
    with pytest.raises(ValueError):
        gan_generator_loss(torch.zeros(1, 1, 2, 2), 0, ConstD(0.5), SCHED)


# totals


def test_combine_examples():
    comps = dict(gan=0.7, id=0.2, ea_dists=0.1, mse=0.05)
    assert combine_generator(comps, LossWeights(1.0, 0.5, 2.0)) == pytest.approx(1.05)
    assert combine_generator(comps, LossWeights(0, 0, 0)) == 0.05
    with pytest.raises(KeyError):
        combine_generator({"gan": 1.0}, LossWeights())
    with pytest.raises(ValueError):
        LossWeights(-1.0)
    with pytest.raises(ValueError):
        LossWeights(float("nan"))


def test_generator_total_identical_images(feat):
    I = torch.rand(2, 3, 16, 16)
    z = torch.randn(2, 4, 4, 4)
    rep = generator_total(I, I.clone(), z, z.clone(), LossWeights(1, 1, 1), FaceEmbedder(), feat, ConstD(0.5), SCHED)
    assert isinstance(rep, LossReport)
    assert rep["total"].item() == pytest.approx(LN2, abs=1e-5)
    assert set(rep) == {"gan", "id", "ea_dists", "mse", "total"}


def test_generator_total_is_affine_in_each_weight(feat):
    gen = torch.Generator().manual_seed(1)
    I, J = torch.rand(2, 3, 16, 16, generator=gen), torch.rand(2, 3, 16, 16, generator=gen)
    z, zh = torch.randn(2, 4, 4, 4, generator=gen), torch.randn(2, 4, 4, 4, generator=gen)
    eps = torch.randn(2, 4, 4, 4, generator=gen)
    F, D = FaceEmbedder(), ConstD(0.3)
    args = (feat, D, SCHED)
    base = dict(lambda_dis=0.1, lambda_id=0.5, lambda_per=1.0)
    ref = generator_total(I, J, z, zh, LossWeights(**base), F, *args, t=7, eps=eps)
    for name, comp in (("lambda_dis", "gan"), ("lambda_id", "id"), ("lambda_per", "ea_dists")):
        bumped = generator_total(I, J, z, zh, LossWeights(**{**base, name: base[name] + 1}), F, *args, t=7, eps=eps)
        assert (bumped["total"] - ref["total"]).item() == pytest.approx(ref[comp].item(), rel=1e-5)
    zero = generator_total(I, J, z, zh, LossWeights(0, 0, 0), F, *args, t=7, eps=eps)
    assert zero["total"].item() == pytest.approx(mse(I, J).item())


def test_losses_have_finite_gradients(feat):
    F = FaceEmbedder()
    with seeded(0):
        D = LatentDiscriminator(4, 16)
    for seed in range(100):
        gen = torch.Generator().manual_seed(seed)
        I = torch.rand(1, 3, 16, 16, generator=gen)
        J = torch.rand(1, 3, 16, 16, generator=gen).requires_grad_(True)
        zh = torch.randn(1, 4, 4, 4, generator=gen)
        z = torch.randn(1, 4, 4, 4, generator=gen).requires_grad_(True)
        rep = generator_total(I, J, zh, z, LossWeights(), F, feat, D, SCHED, generator=gen)
        rep["total"].backward()
        assert torch.isfinite(J.grad).all() and torch.isfinite(z.grad).all()
