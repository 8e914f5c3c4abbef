import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import finite_difference_check
from vibrancy.vae import (LatentGaussian, MaskedVAE, VAEConfig, decode, embed_series, encode, kl_divergence,
                          load_vae, masked_mse, sample_latent, save_vae, train_vae, vae_loss)


def tiny(dtype=torch.float64, d=2, seed=0):
    torch.manual_seed(seed)
    return MaskedVAE(VAEConfig(height=8, width=8, latent_dim=d, widths=[4], head_channels=3)).to(dtype)


def mask8(seed=0):
    m = (np.random.default_rng(seed).random((8, 8)) > 0.25).astype(np.float64)
    m[0, 0] = 1.0
    return torch.as_tensor(m)


def test_gradient_check():
    model = tiny()
    gen = torch.Generator().manual_seed(1)
    C = torch.rand(3, 8, 8, 1, generator=gen, dtype=torch.float64)
    noise = torch.randn(3, 2, generator=gen, dtype=torch.float64)
    mask = mask8()

    def loss():
        out, g = model(C, mask, noise)
        return vae_loss(C, out, g, mask, beta=0.7)[0]

    assert finite_difference_check(model, loss) < 1e-4


def test_shapes_and_batch_consistency():
    model = tiny(torch.float32, d=5)
    C = np.random.default_rng(0).random((4, 8, 8, 1)).astype(np.float32)
    g = encode(C, model)
    assert g.mu.shape == (4, 5) and g.logvar.shape == (4, 5)
    single = encode(C[2], model)
    torch.testing.assert_close(single.mu, g.mu[2], rtol=1e-6, atol=1e-6)
    assert torch.equal(encode(C[2], model).mu, single.mu)


def test_encode_rejects_wrong_shape():
    with pytest.raises(ValueError):
        encode(np.zeros((8, 4, 1)), tiny())


def test_architecture_reaches_four_by_four():
    model = MaskedVAE(VAEConfig(height=64, width=64, widths=[8]))
    assert model.cfg.n_down == 4 and (model.map_h, model.map_w) == (4, 4)
    g = encode(np.zeros((64, 64, 1), dtype=np.float32), model)
    assert g.mu.shape == (8,)


class TestSampling:
    def test_zero_noise_returns_mean(self):
        g = LatentGaussian(torch.tensor([1.0, -2.0]), torch.tensor([0.3, 0.1]))
        e = sample_latent(g, torch.zeros(2))
        assert torch.equal(e.z, g.mu) and e.source == "mean"
        assert sample_latent(g, None).source == "mean"

    def test_unit_sigma(self):
        g = LatentGaussian(torch.tensor([1.0, -2.0]), torch.zeros(2))
        e = sample_latent(g, torch.tensor([1.0, 0.0]))
        assert e.z.tolist() == [2.0, -2.0] and e.source == "sampled"

    def test_monte_carlo_mean(self):
        mu = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
        logvar = torch.tensor([0.0, 1.0, -1.0], dtype=torch.float64)
        noise = torch.randn(10_000, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        z = sample_latent(LatentGaussian(mu, logvar), noise).z
        sigma = torch.exp(0.5 * logvar)
        assert torch.all((z.mean(0) - mu).abs() < 4 * sigma / 100)


class TestLosses:
    def test_perfect_reconstruction_prior(self):
        C = torch.rand(2, 8, 8, 1)
        g = LatentGaussian(torch.zeros(2, 3), torch.zeros(2, 3))
        total, recon, kl = vae_loss(C, C.clone(), g, torch.ones(8, 8))
        assert total.item() == 0.0 and recon.item() == 0.0 and kl.item() == 0.0

    def test_kl_half(self):
        g = LatentGaussian(torch.tensor([[1.0, 0.0, 0.0]]), torch.zeros(1, 3))
        assert kl_divergence(g).item() == 0.5

    def test_kl_nonnegative_random(self):
        rng = np.random.default_rng(0)
        mu = torch.as_tensor(rng.normal(scale=3, size=(1000, 4)))
        lv = torch.as_tensor(rng.normal(scale=3, size=(1000, 4)))
        per_row = -0.5 * (1 + lv - mu**2 - lv.exp()).sum(-1)
        assert torch.all(per_row >= 0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.data())
    def test_kl_zero_iff_standard_normal(self, mu, data):
        lv = data.draw(st.lists(st.floats(-5, 5), min_size=len(mu), max_size=len(mu)))
        g = LatentGaussian(torch.tensor([mu], dtype=torch.float64), torch.tensor([lv], dtype=torch.float64))
        kl = kl_divergence(g).item()
        assert kl >= 0
        if all(m == 0 for m in mu) and all(v == 0 for v in lv):
            assert kl == 0

    def test_masked_cells_do_not_change_recon(self):
        C = torch.rand(2, 8, 8, 1, dtype=torch.float64)
        C_hat = torch.rand(2, 8, 8, 1, dtype=torch.float64, requires_grad=True)
        mask = mask8()
        r = masked_mse(C, C_hat, mask)
        C2 = C.clone()
        C2[:, mask == 0] += 5.0
        assert masked_mse(C2, C_hat, mask).item() == r.item()
        r.backward()
        assert torch.all(C_hat.grad[:, mask == 0] == 0)

    def test_recon_is_mean_over_active_cells(self):
        C = torch.zeros(1, 8, 8, 1, dtype=torch.float64)
        C_hat = torch.zeros_like(C)
        C_hat[0, 0, 0, 0] = 2.0
        mask = torch.zeros(8, 8, dtype=torch.float64)
        mask[0, :4] = 1.0
        assert masked_mse(C, C_hat, mask).item() == 1.0

    def test_no_active_cells(self):
        with pytest.raises(ValueError):
            masked_mse(torch.zeros(1, 8, 8, 1), torch.zeros(1, 8, 8, 1), torch.zeros(8, 8))

    def test_negative_beta(self):
        g = LatentGaussian(torch.zeros(1, 2), torch.zeros(1, 2))
        with pytest.raises(ValueError):
            vae_loss(torch.zeros(1, 8, 8, 1), torch.zeros(1, 8, 8, 1), g, torch.ones(8, 8), beta=-1.0)


class TestDecode:
    def test_zero_on_inactive_for_random_z(self):
        model = tiny(torch.float32, d=4)
        mask = mask8().numpy()
        z = np.random.default_rng(0).normal(scale=10, size=(50, 4)).astype(np.float32)
        out = decode(z, mask, model)
        assert out.shape == (50, 8, 8, 1)
        assert np.all(out[:, mask == 0] == 0.0)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_all_zero_mask(self):
        out = decode(np.ones((3, 2), dtype=np.float32), np.zeros((8, 8)), tiny(torch.float32))
        assert not out.any()

    def test_flipping_one_cell(self):
        model = tiny(torch.float32, d=2)
        z = np.array([[0.3, -0.7]], dtype=np.float32)
        full = decode(z, np.ones((8, 8)), model)
        m = np.ones((8, 8))
        m[3, 4] = 0.0
        flipped = decode(z, m, model)
        assert flipped[0, 3, 4, 0] == 0.0 and full[0, 3, 4, 0] > 0.0
        keep = m == 1
        np.testing.assert_array_equal(flipped[0][keep], full[0][keep])

    def test_mask_shape_mismatch(self):
        with pytest.raises(ValueError):
            decode(np.zeros((1, 2), dtype=np.float32), np.ones((4, 4)), tiny(torch.float32))


def _toy_grid(T=96, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(T)[:, None, None]
    a = rng.random((8, 8))
    b = rng.random((8, 8))
    g = 0.5 + 0.2 * np.sin(2 * np.pi * t / 24) * a + 0.2 * np.cos(2 * np.pi * t / 24) * b
    mask = (rng.random((8, 8)) > 0.2).astype(np.float32)
    return (g * mask)[..., None].astype(np.float32), mask


def _train(beta=1e-3, epochs=6, seed=0):
    from vibrancy.data import ActivityMask

    grid, mask = _toy_grid()
    cfg = VAEConfig(height=8, width=8, latent_dim=2, widths=[8], head_channels=4, epochs=epochs,
                    batch_size=16, beta=beta, seed=seed)
    return train_vae(grid, ActivityMask(mask), np.arange(0, 64), np.arange(64, 96), cfg), grid, mask


def test_training_deterministic_and_round_trips(tmp_path):
    (m1, h1), grid, mask = _train()
    (m2, h2), _, _ = _train()
    assert h1.val_total == h2.val_total
    for (k, a), (_, b) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k
    save_vae(tmp_path / "ck", m1)
    m3 = load_vae(tmp_path / "ck")
    E1, E3 = embed_series(grid, m1), embed_series(grid, m3)
    assert E1.tobytes() == E3.tobytes() and E1.shape == (96, 2)
    best = h1.val_total[h1.best_epoch]
    assert best == min(h1.val_total)


def test_repeated_snapshot_gives_repeated_embedding():
    grid, _ = _toy_grid(T=4)
    grid[2] = grid[0]
    E = embed_series(grid, tiny(torch.float32))
    assert np.array_equal(E[0], E[2])


def test_beta_zero_fits_train_at_least_as_well():
    (m0, _), grid, mask = _train(beta=0.0, epochs=15)
    (m1, _), _, _ = _train(beta=1.0, epochs=15)
    C = torch.as_tensor(grid[:64])
    mt = torch.as_tensor(mask)

    def recon(model):
        with torch.no_grad():
            return masked_mse(C, model.decode(model.encode(C).mu, mt), mt).item()

    assert recon(m0) <= recon(m1)
