import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import mini_net_config, random_mini_batch, snapshot, changed
from oracles import mib_gradient_errors, monte_carlo_kl, scalar_infonce, triple_product_scores
from mibrl.mib import LossBreakdown, bilinear_scores, infonce_loss, kl_upper_bound, mib_loss, score_matrix
from mibrl.nets import GaussianPosterior, RepresentationModel
from mibrl.sac import AgentConfig


def test_kl_analytic_cases():
    zero = kl_upper_bound(GaussianPosterior(torch.zeros(50), torch.ones(50)))
    assert zero.item() == 0.0
    ones = kl_upper_bound(GaussianPosterior(torch.ones(50, dtype=torch.float64), torch.ones(50, dtype=torch.float64)))
    assert ones.item() == pytest.approx(25.0, abs=1e-12)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for k in range(5):
        mean = rng.normal(size=8)
        std = np.exp(rng.uniform(-1, 1, size=8))
        analytic = kl_upper_bound(GaussianPosterior(torch.tensor(mean), torch.tensor(std))).item()
        mc = monte_carlo_kl(mean, std, 1_000_000, seed=k)
        assert abs(mc - analytic) / analytic < 0.01


def test_kl_batch_is_mean():
    mean = torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
    std = torch.ones(2, 2, dtype=torch.float64)
    post = GaussianPosterior(mean, std)
    assert kl_upper_bound(post).item() == pytest.approx(0.5)
    assert torch.allclose(kl_upper_bound(post, reduce=False), torch.tensor([0.0, 1.0], dtype=torch.float64))


def test_kl_rejects_nonpositive_std():
    with pytest.raises(ValueError):
        kl_upper_bound(GaussianPosterior(torch.zeros(3), torch.tensor([1.0, 0.0, 1.0])))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.data())
def test_kl_nonnegative(mean, data):
    std = data.draw(st.lists(st.floats(1e-3, 5), min_size=len(mean), max_size=len(mean)))
    kl = kl_upper_bound(GaussianPosterior(torch.tensor(mean, dtype=torch.float64), torch.tensor(std, dtype=torch.float64)))
    assert kl.item() >= -1e-12


def test_score_matrix_cases(mini_model):
    b, d = 3, mini_model.cfg.latent_dim
    z, a, zn = torch.randn(b, d), torch.rand(b, 2), torch.randn(b, d)
    with torch.no_grad():
        mini_model.omega.zero_()
    assert torch.equal(score_matrix(mini_model, z, a, zn), torch.zeros(b, b))
    e1 = torch.zeros(4, 50)
    e1[:, 0] = 1.0
    s = bilinear_scores(e1, torch.eye(50), e1)
    assert torch.equal(s, torch.ones(4, 4))


def test_score_matrix_matches_triple_product():
    torch.manual_seed(3)
    model = RepresentationModel(mini_net_config()).double()
    z, a, zn = torch.randn(3, 4, dtype=torch.float64), torch.rand(3, 2, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64)
    with torch.no_grad():
        model.omega.normal_()
        for p in model.target["projection"].parameters():
            p.add_(0.1 * torch.randn_like(p))
        query = model.project(model.prediction(z, a)).numpy()
        keys = model.target["projection"](zn).numpy()
        s = score_matrix(model, z, a, zn).numpy()
    np.testing.assert_allclose(s, triple_product_scores(query, model.omega.detach().numpy(), keys), rtol=1e-10)


def test_score_matrix_uses_target_projection():
    torch.manual_seed(0)
    model = RepresentationModel(mini_net_config())
    z, a, zn = torch.randn(3, 4), torch.rand(3, 2), torch.randn(3, 4)
    before = score_matrix(model, z, a, zn).detach()
    with torch.no_grad():
        for p in model.target["projection"].parameters():
            p.mul_(2.0)
    assert not torch.allclose(before, score_matrix(model, z, a, zn).detach())


def test_infonce_analytic_cases():
    assert infonce_loss(torch.zeros(8, 8)).item() == pytest.approx(math.log(8), abs=1e-6)
    sat = torch.eye(8) * 100.0
    assert infonce_loss(sat).item() < 1e-4
    hand = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    expected = -math.log(math.e / (math.e + 1))
    assert scalar_infonce(hand) == pytest.approx(expected, abs=1e-12)
    assert infonce_loss(hand).item() == pytest.approx(expected, abs=1e-10)
    assert expected == pytest.approx(0.3133, abs=1e-4)


def test_infonce_errors():
    with pytest.raises(ValueError):
        infonce_loss(torch.zeros(1, 1))
    with pytest.raises(ValueError):
        infonce_loss(torch.zeros(2, 3))


def test_infonce_stable_for_huge_scores():
    s = torch.tensor([[1e4, 0.0], [0.0, 1e4]])
    assert torch.isfinite(infonce_loss(s))
    assert infonce_loss(s).item() == pytest.approx(0.0, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000), st.floats(-50, 50))
def test_infonce_properties(b, seed, shift):
    g = torch.Generator().manual_seed(seed)
    s = torch.randn(b, b, generator=g, dtype=torch.float64) * 3
    loss = infonce_loss(s).item()
    assert loss >= 0
    assert math.log(b) - loss <= math.log(b) + 1e-12
    assert loss == pytest.approx(scalar_infonce(s.numpy()), abs=1e-9)
    row_shift = torch.zeros(b, 1, dtype=torch.float64)
    row_shift[0] = shift
    assert infonce_loss(s + row_shift).item() == pytest.approx(loss, abs=1e-9)


def test_mib_loss_alpha_zero_and_default(mini_model):
    batch = random_mini_batch(mini_model.cfg, 4)
    (img, prop), act, _, (nimg, nprop), _ = batch
    total, info = mib_loss(mini_model, img, prop, act, nimg, nprop, 0.0, generator=torch.Generator().manual_seed(0))
    assert info.total == info.infonce_term
    assert total.item() == pytest.approx(info.infonce_term)
    assert info.kl_term > 0
    assert AgentConfig(net=mini_model.cfg).alpha == 1e-4


def test_mib_loss_recomposition(mini_model):
    """Recompute both terms from the same noise draws, independently of ``mib_loss``."""
    (img, prop), act, _, (nimg, nprop), _ = random_mini_batch(mini_model.cfg, 5)
    alpha = 0.3
    total, info = mib_loss(mini_model, img, prop, act, nimg, nprop, alpha, generator=torch.Generator().manual_seed(7))
    g = torch.Generator().manual_seed(7)
    with torch.no_grad():
        j = mini_model.fusion(mini_model.image_encoder(img), mini_model.proprio_encoder(prop))
        post = mini_model.stochastic(j)
        z = post.mean + post.stddev * torch.randn(post.mean.shape, generator=g)
        t = mini_model.target
        post_n = t["stochastic"](t["fusion"](t["image_encoder"](nimg), t["proprio_encoder"](nprop)))
        zn = post_n.mean + post_n.stddev * torch.randn(post_n.mean.shape, generator=g)
        mu, sd = post.mean.double(), post.stddev.double()
        kl = (0.5 * (mu**2 + sd**2 - 1 - 2 * torch.log(sd)).sum(1)).mean().item()
        q = mini_model.projection(mini_model.prediction.fc(torch.cat([z, act], 1)))
        k = mini_model.target["projection"](zn)
        s = (q @ mini_model.omega @ k.T).numpy()
    nce = scalar_infonce(s)
    assert info.kl_term == pytest.approx(kl, rel=1e-5)
    assert info.infonce_term == pytest.approx(nce, rel=1e-5)
    assert info.total == alpha * info.kl_term + info.infonce_term
    assert total.item() == pytest.approx(alpha * kl + nce, rel=1e-5)


def test_loss_breakdown_fields():
    lb = LossBreakdown(1.0, 2.0, 2.5, 0.5)
    assert lb.as_dict() == {"kl_term": 1.0, "infonce_term": 2.0, "total": 2.5, "alpha": 0.5}


@pytest.mark.parametrize("alpha", [1e-4, 1.0])
def test_full_gradient_matches_finite_differences(alpha):
    torch.manual_seed(0)
    model = RepresentationModel(mini_net_config()).double()
    with torch.no_grad():
        model.omega.normal_(0, 1.0)
    batch = random_mini_batch(model.cfg, 4, seed=1, dtype=torch.float64)
    errors = mib_gradient_errors(model, batch, alpha)
    assert set(errors) == {n for n, p in model.named_parameters() if p.requires_grad}
    assert max(errors.values()) < 1e-3, errors


def test_gradients_reach_every_online_component(mini_model):
    (img, prop), act, _, (nimg, nprop), _ = random_mini_batch(mini_model.cfg, 4)
    total, _ = mib_loss(mini_model, img, prop, act, nimg, nprop, 1e-4, generator=torch.Generator().manual_seed(0))
    total.backward()
    for name in ("image_encoder", "proprio_encoder", "fusion", "stochastic", "prediction", "projection"):
        grads = [p.grad for p in getattr(mini_model, name).parameters()]
        assert any(g is not None and g.abs().sum() > 0 for g in grads), name
    assert mini_model.omega.grad.abs().sum() > 0
    assert all(p.grad is None for p in mini_model.target.parameters())


def test_target_isolation_under_gradient_step(mini_model):
    before = snapshot(mini_model.target)
    opt = torch.optim.Adam(mini_model.online_parameters(), lr=1e-2)
    for seed in range(3):
        (img, prop), act, _, (nimg, nprop), _ = random_mini_batch(mini_model.cfg, 4, seed=seed)
        total, _ = mib_loss(mini_model, img, prop, act, nimg, nprop, 1e-4)
        opt.zero_grad()
        total.backward()
        opt.step()
    assert not changed(before, snapshot(mini_model.target))
