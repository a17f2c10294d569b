import math

import numpy as np
import pytest

from fedgan_trust.gan import (EPS, ArchitectureMismatch, DataDistribution, GanConfig, GradientSet, ModelParams,
                              ShapeError, SyntheticBatch, TrainingFault, average_params, batch_bytes,
                              batch_from_bytes, compute_losses, discriminator_architecture,
                              discriminator_forward, discriminator_pass, generator_architecture,
                              generator_forward, generator_gradients, mlp_forward, sgd_step, train_standalone)
from fedgan_trust.modmath import Prng


def _nets(seed=0, data_dim=1):
    r = Prng(seed, "nets")
    g = generator_architecture(8, 32, data_dim).init(r.substream("g"))
    d = discriminator_architecture(data_dim, 32).init(r.substream("d"))
    return g, d


def test_zero_generator_outputs_zero():
    g = generator_architecture(8, 32, 2).zeros()
    batch = generator_forward(g, Prng(0).normal((64, 8)))
    assert batch.rows.shape == (64, 2)
    assert np.all(batch.rows == 0)


def test_generator_deterministic_digest():
    g, _ = _nets()
    a = generator_forward(g, Prng(5).normal((16, 8)))
    b = generator_forward(g, Prng(5).normal((16, 8)))
    assert a.digest == b.digest


def test_generator_shape_error():
    g, _ = _nets()
    with pytest.raises(ShapeError):
        generator_forward(g, np.zeros((4, 7)))


def test_zero_discriminator_is_one_half():
    d = discriminator_architecture(2, 32).zeros()
    out = discriminator_forward(d, np.ones((10, 2)))
    assert np.all(out == 0.5)


def test_discriminator_probabilities_open_interval():
    _, d = _nets()
    out = discriminator_forward(d, Prng(1).normal((100, 1), 0, 50))
    assert np.all((out >= 0) & (out <= 1))
    d_loss, g_loss = compute_losses(np.ones(3), np.zeros(3))
    assert math.isfinite(d_loss) and math.isfinite(g_loss)
    assert d_loss == pytest.approx(-2 * math.log(1 - EPS), abs=1e-12)


def test_discriminator_monotone_in_final_bias():
    _, d = _nets()
    x = Prng(2).normal((20, 1))
    base = discriminator_forward(d, x)
    bumped = d.copy()
    bumped.biases[-1] = bumped.biases[-1] + 1e-3
    assert np.all(discriminator_forward(bumped, x) > base)


def test_losses_at_one_half():
    d_loss, g_loss = compute_losses(np.full(5, 0.5), np.full(5, 0.5))
    assert d_loss == pytest.approx(2 * math.log(2), abs=1e-15)
    assert g_loss == pytest.approx(math.log(2), abs=1e-15)
    assert round(d_loss, 4) == 1.3863 and round(g_loss, 4) == 0.6931


def test_loss_limits_and_monotonicity():
    assert compute_losses(np.full(3, 1 - 1e-12), np.full(3, 1e-12))[0] < 1e-6
    g = [compute_losses(np.full(3, 0.5), np.full(3, p))[1] for p in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert all(a > b for a, b in zip(g, g[1:]))


def test_zero_params_give_exact_initial_losses():
    g = generator_architecture().zeros()
    d = discriminator_architecture().zeros()
    fake = generator_forward(g, Prng(0).normal((64, 8))).rows
    out = discriminator_pass(d, Prng(1).normal((64, 1), 3, 1), fake)
    assert out.d_loss == pytest.approx(2 * math.log(2), abs=1e-12)
    assert out.g_loss == pytest.approx(math.log(2), abs=1e-12)


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _fd_check(params, loss_fn, analytic: GradientSet, h=1e-5):
    flat = params.flatten()
    ana = analytic.flatten()
    worst = 0.0
    for k in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[k] += h
        dn[k] -= h
        num = (loss_fn(params.unflatten(up)) - loss_fn(params.unflatten(dn))) / (2 * h)
        if abs(num) < 1e-9 and abs(ana[k]) < 1e-9:
            continue
        worst = max(worst, _rel_err(ana[k], num))
    return worst


@pytest.mark.parametrize("data_dim", [1, 2])
def test_discriminator_gradients_finite_difference(data_dim):
    g, d = _nets(3, data_dim)
    r = Prng(4)
    real = r.normal((16, data_dim), 3, 1)
    fake = generator_forward(g, r.normal((16, 8))).rows
    out = discriminator_pass(d, real, fake)

    def loss(p):
        return discriminator_pass(p, real, fake).d_loss

    assert _fd_check(d, loss, out.grads) < 1e-4


@pytest.mark.parametrize("data_dim", [1, 2])
def test_generator_gradients_finite_difference(data_dim):
    g, d = _nets(5, data_dim)
    noise = Prng(6).normal((16, 8))
    real = Prng(7).normal((16, data_dim))
    fake = generator_forward(g, noise).rows
    out = discriminator_pass(d, real, fake)
    grads = generator_gradients(g, noise, out.fake_grad)

    def loss(p):
        return discriminator_pass(d, real, generator_forward(p, noise).rows).g_loss

    assert _fd_check(g, loss, grads) < 1e-4


def test_zero_upstream_gives_zero_gradients():
    g, _ = _nets()
    noise = Prng(0).normal((8, 8))
    grads = generator_gradients(g, noise, np.zeros((8, 1)))
    assert np.all(grads.flatten() == 0)
    assert grads.shapes == g.shapes


def test_gradient_shape_mismatch():
    g, _ = _nets()
    with pytest.raises(ShapeError):
        generator_gradients(g, np.zeros((8, 8)), np.zeros((8, 2)))


def _scalar(w):
    return ModelParams([np.array([[w]])], [np.array([0.0])], ("linear",))


def test_sgd_examples():
    p = _scalar(1.0)
    g = GradientSet([np.array([[2.0]])], [np.array([0.0])], ("linear",))
    assert sgd_step(p, g, 0.1).weights[0][0, 0] == pytest.approx(0.8)
    same = sgd_step(p, g, 0.0)
    assert np.array_equal(same.flatten(), p.flatten())


def test_sgd_converges_on_quadratic():
    p = _scalar(-4.0)
    for _ in range(200):
        w = p.weights[0][0, 0]
        p = sgd_step(p, GradientSet([np.array([[2 * (w - 3.0)]])], [np.array([0.0])], ("linear",)), 0.1)
    assert p.weights[0][0, 0] == pytest.approx(3.0, abs=1e-9)


def test_sgd_rejects_non_finite():
    g = GradientSet([np.array([[np.nan]])], [np.array([0.0])], ("linear",))
    with pytest.raises(TrainingFault):
        sgd_step(_scalar(1.0), g, 0.1)


def test_average_params():
    a, b = _scalar(2.0), _scalar(4.0)
    assert average_params([a, b]).weights[0][0, 0] == 3.0
    g, _ = _nets()
    assert np.array_equal(average_params([g, g]).flatten(), g.flatten())
    np.testing.assert_allclose(average_params([g, g, g]).flatten(), g.flatten(), rtol=1e-15, atol=0)
    with pytest.raises(ArchitectureMismatch):
        average_params([g, generator_architecture(8, 16, 1).zeros()])


def test_flatten_roundtrip_and_digest():
    g, d = _nets()
    assert np.array_equal(g.unflatten(g.flatten()).flatten(), g.flatten())
    assert g.n_params == 8 * 32 + 32 + 32 + 1 == 321
    assert d.n_params == 32 + 32 + 32 + 1 == 97
    assert g.architecture_digest() == generator_architecture().zeros().architecture_digest()
    assert g.architecture_digest() != d.architecture_digest()


def test_batch_serialization_layout():
    rows = np.array([[1.0, -2.5], [0.25, 3.0]])
    raw = batch_bytes(rows)
    assert raw[:8] == (2).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert raw[8:16] == np.float64(1.0).tobytes() and len(raw) == 8 + 32
    assert np.array_equal(batch_from_bytes(raw), rows)
    import hashlib
    assert SyntheticBatch(rows).digest == hashlib.sha256(raw).digest()


@pytest.mark.parametrize("spec,dim", [
    ({"kind": "gaussian1d", "mu": 3.0, "sigma": 1.0}, 1),
    ({"kind": "mixture2d", "components": [[0.5, -2, 0, 0.5], [0.5, 2, 0, 0.5]]}, 2),
    ({"kind": "categorical", "marginals": [[0.2, 0.8], [0.1, 0.3, 0.6]]}, 5),
])
def test_distributions(spec, dim):
    dist = DataDistribution.from_dict(spec)
    assert dist.data_dim == dim
    assert DataDistribution.from_dict(dist.to_dict()) == dist
    x = dist.sample(Prng(1), 4000)
    assert x.shape == (4000, dim)
    if spec["kind"] == "gaussian1d":
        assert abs(x.mean() - 3) < 0.1 and abs(x.std() - 1) < 0.1
    if spec["kind"] == "mixture2d":
        assert abs((x[:, 0] > 0).mean() - 0.5) < 0.05
    if spec["kind"] == "categorical":
        assert np.all(x.sum(axis=1) == 2)
        assert abs(x[:, 1].mean() - 0.8) < 0.03


def test_disjoint_seeds_give_different_samples():
    dist = DataDistribution()
    assert not np.array_equal(dist.sample(Prng(1, "r1"), 10), dist.sample(Prng(1, "r2"), 10))


def test_standalone_deterministic():
    cfg = GanConfig()
    g1, _, h1 = train_standalone(cfg, DataDistribution(), 3, 30)
    g2, _, h2 = train_standalone(cfg, DataDistribution(), 3, 30)
    assert h1 == h2 and np.array_equal(g1.flatten(), g2.flatten())


def test_standalone_moves_toward_target():
    g, _, _ = train_standalone(GanConfig(), DataDistribution(), 0, 600)
    x = generator_forward(g, Prng(9).normal((2000, 8))).rows
    assert abs(x.mean() - 3.0) < 1.0
