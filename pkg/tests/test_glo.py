import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from glann.datasets import DatasetHandle
from glann.errors import NumericError
from glann.glo import (GloTrainConfig, build_generator, decode, glo_reconstruct, glo_train_epoch,
                       init_latent_table, pca_latent_table, project_to_sphere, train_glo)
from glann.losses import LossSpec

L2 = LossSpec(kind="l2")


def toy_data(n=8, shape=(1, 8, 8), seed=0):
    g = torch.Generator().manual_seed(seed)
    return DatasetHandle("toy", torch.rand(n, *shape, generator=g) * 1.6 - 0.8, seed=seed)


# -- sphere ---------------------------------------------------------------------------

def test_project_examples():
    assert project_to_sphere(torch.tensor([0.6, 0.8])).tolist() == pytest.approx([0.6, 0.8])
    assert project_to_sphere(torch.tensor([[3.0, 4.0]])).tolist() == [[pytest.approx(0.6), pytest.approx(0.8)]]
    with pytest.raises(NumericError):
        project_to_sphere(torch.tensor([[1.0, 0.0], [0.0, 0.0]]))


@pytest.mark.parametrize("count,dim,seed", [(1, 1, 0), (5, 3, 1), (100, 64, 2)])
def test_init_table_unit_norm_and_seeded(count, dim, seed):
    t = init_latent_table(count, dim, seed)
    assert t.max_norm_error() < 1e-6
    assert torch.equal(t.codes, init_latent_table(count, dim, seed).codes)
    assert t.updates.tolist() == [0] * count


def test_init_table_rejects_zero_dim():
    with pytest.raises(ValueError):
        init_latent_table(4, 0)


def test_init_table_mean_pairwise_cosine():
    z = init_latent_table(10000, 64, 0).codes.double()
    s = z.sum(0)
    # mean over i != j of z_i . z_j, using sum_ij z_i.z_j = |sum z|^2 and z_i.z_i = 1
    mean_cos = (float(s @ s) - 10000) / (10000 * 9999)
    assert abs(mean_cos) < 0.02


def test_pca_table():
    data = toy_data(20, (1, 4, 4))
    t = pca_latent_table(data, 3)
    assert t.codes.shape == (20, 3) and t.max_norm_error() < 1e-6
    assert torch.equal(t.codes, pca_latent_table(data, 3).codes)
    with pytest.raises(ValueError):
        pca_latent_table(data, 17)


# -- schedule -------------------------------------------------------------------------

def test_default_schedule():
    cfg = GloTrainConfig()
    assert (cfg.epochs, cfg.decay, cfg.decay_every) == (500, 0.5, 50)
    assert cfg.latent_rate(49) == cfg.latent_lr and cfg.latent_rate(50) == cfg.latent_lr / 2
    assert cfg.latent_rate(120) == cfg.latent_lr / 4
    assert cfg.generator_rate(0) == pytest.approx(cfg.latent_lr * 0.1)


@pytest.mark.parametrize("kw", [{"latent_lr": -1}, {"decay": 0}, {"decay_every": 0}, {"latent_optimizer": "x"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        GloTrainConfig(**kw)


# -- training -------------------------------------------------------------------------

def test_zero_rates_leave_parameters_and_table_unchanged():
    data = toy_data()
    gen = build_generator("infogan-small", 4, data.shape, seed=0)
    table = init_latent_table(8, 4, 0)
    before = [p.detach().clone() for p in gen.parameters()]
    codes = table.codes.clone()
    cfg = GloTrainConfig(epochs=1, batch_size=4, latent_lr=0.0, loss=L2)
    stats = glo_train_epoch(gen, table, data, cfg, 0)
    assert len(stats.batch_losses) == 2
    assert all(torch.equal(a, b) for a, b in zip(before, gen.parameters()))
    assert torch.equal(codes, table.codes)


def test_non_finite_loss_aborts():
    data = toy_data()
    gen = build_generator("mlp", 4, data.shape, seed=0)
    with torch.no_grad():
        gen.net[0].weight[0, 0] = float("nan")
    with pytest.raises(NumericError, match="batch 0"):
        glo_train_epoch(gen, init_latent_table(8, 4), data, GloTrainConfig(loss=L2), 0)


@pytest.fixture(scope="module")
def overfit_run():
    data = toy_data()
    gen = build_generator("infogan-small", 8, data.shape, seed=0)
    table = init_latent_table(8, 8, 0)
    cfg = GloTrainConfig(epochs=200, batch_size=8, latent_lr=0.05, decay_every=100, loss=L2)
    history = train_glo(gen, table, data, cfg)
    return data, gen, table, history


def test_overfit_loss_drops(overfit_run):
    _, _, table, history = overfit_run
    assert history[-1].mean_loss < 0.1 * history[0].mean_loss
    assert table.max_norm_error() < 1e-5
    assert table.updates.tolist() == [200] * 8


def test_overfit_reconstruction(overfit_run):
    data, gen, table, _ = overfit_run
    rec = glo_reconstruct(gen, table, range(8))
    per_image = ((rec.pixels - data.pixels) ** 2).flatten(1).mean(1)
    assert float(per_image.max()) < 0.05


def test_reconstruct_contract():
    gen = build_generator("infogan-small", 4, (1, 8, 8), seed=0)
    table = init_latent_table(5, 4)
    out = glo_reconstruct(gen, table, [4, 0])
    assert out.pixels.shape == (2, 1, 8, 8) and out.ids.tolist() == [4, 0]
    assert float(out.pixels.abs().max()) <= 1.0
    assert len(glo_reconstruct(gen, table, [])) == 0
    with pytest.raises(ValueError):
        glo_reconstruct(gen, table, [5])
    assert gen.training  # decode restores the previous mode


# -- gradients ------------------------------------------------------------------------

@torch.no_grad()
def _fd_grad(f, x, eps=1e-6):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def _rel_err(a, b):
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    gen = build_generator("mlp", 3, (1, 4, 4), seed=1, hidden=6).double()
    z = project_to_sphere(torch.randn(2, 3, dtype=torch.float64))
    target = torch.rand(2, 1, 4, 4, dtype=torch.float64) * 2 - 1

    def loss():
        return float(((gen(z) - target) ** 2).mean())

    zz = z.clone().requires_grad_(True)
    value = ((gen(zz) - target) ** 2).mean()
    params = list(gen.parameters())
    grads = torch.autograd.grad(value, [zz, *params])
    with torch.no_grad():
        assert _rel_err(grads[0], _fd_grad(loss, z)) < 1e-3
        for p, g in zip(params, grads[1:]):
            assert _rel_err(g, _fd_grad(loss, p.data)) < 1e-3


def test_latent_step_uses_per_image_gradient():
    """One SGD epoch: each row moves along the gradient of its own image's loss, then renormalizes."""
    data = toy_data(4, (1, 4, 4))
    data = DatasetHandle("toy", data.pixels.double(), data.seed)
    gen = build_generator("mlp", 3, data.shape, seed=2, hidden=5).double()
    table = init_latent_table(4, 3, 1)
    table.codes = table.codes.double()
    z0 = table.codes.clone()
    lr = 0.3

    expected = []
    for i in range(4):
        zi = z0[i].clone()

        def own_loss():
            return float(((gen(zi[None]) - data.pixels[i:i + 1]) ** 2).mean())

        g = _fd_grad(own_loss, zi)
        expected.append(project_to_sphere(z0[i] - lr * g))

    cfg = GloTrainConfig(batch_size=4, latent_lr=lr, generator_lr_ratio=0.0, latent_optimizer="sgd", loss=L2)
    glo_train_epoch(gen, table, data, cfg, 0)
    assert torch.allclose(table.codes, torch.stack(expected), atol=1e-7)


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.sampled_from(["sgd", "adam"]), st.floats(0.01, 2.0))
def test_sphere_invariant_holds(n, dim, opt, lr):
    data = toy_data(n, (1, 4, 4), seed=n)
    gen = build_generator("mlp", dim, data.shape, seed=0, hidden=8)
    table = init_latent_table(n, dim, seed=dim)
    cfg = GloTrainConfig(epochs=3, batch_size=2, latent_lr=lr, latent_optimizer=opt, loss=L2)
    train_glo(gen, table, data, cfg)
    assert table.max_norm_error() < 1e-5


def test_training_is_deterministic():
    def run():
        data = toy_data()
        gen = build_generator("infogan-small", 4, data.shape, seed=3)
        table = init_latent_table(8, 4, 3)
        train_glo(gen, table, data, GloTrainConfig(epochs=3, batch_size=4, loss=L2))
        return gen, table

    (g1, t1), (g2, t2) = run(), run()
    assert torch.equal(t1.codes, t2.codes)
    assert all(torch.equal(a, b) for a, b in zip(g1.state_dict().values(), g2.state_dict().values()))


def test_decode_empty_and_range():
    gen = build_generator("infogan", 4, (3, 8, 8), seed=0)
    assert decode(gen, torch.zeros(0, 4)).shape == (0, 3, 8, 8)
    out = decode(gen, init_latent_table(3, 4).codes)
    assert out.shape == (3, 3, 8, 8) and float(out.abs().max()) <= 1


def test_generator_arch_checks():
    with pytest.raises(ValueError):
        build_generator("infogan", 4, (1, 10, 10))
    with pytest.raises(ValueError):
        build_generator("resnet", 4, (1, 8, 8))
