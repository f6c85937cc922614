import math

import numpy as np
import pytest

from qgan.dataio import SyntheticSpec, synth_dataset
from qgan.gan import (
    QGAN,
    TrainConfig,
    TrainingError,
    discriminator_forward,
    discriminator_logits,
    gan_value,
    generator_forward,
    sample_latent,
    train,
    train_step,
    write_loss_csv,
)
from qgan.gradcheck import numeric_grad, rel_error
from qgan.nn import ConfigurationError, Sequential, sigmoid
from qgan.qlayers import QDeconv2d, SplitActivation

TINY = dict(image_size=8, latent_dim=3, g_channels=(3,), d_channels=(3,), batch_size=4)


def snapshot(model):
    return {("G", k): v.copy() for k, v in model.G.named_params()} | {
        ("D", k): v.copy() for k, v in model.D.named_params()
    }


class TestLosses:
    def test_equilibrium_anchor(self):
        loss_d, loss_g = gan_value(np.full(4, 0.5), np.full(4, 0.5))
        assert loss_d == 2 * math.log(2)
        assert loss_g == math.log(2)

    def test_perfect_discriminator(self):
        loss_d, _ = gan_value(np.ones(3), np.zeros(3))
        assert 0 <= loss_d < 1e-6

    def test_clamped_finite(self):
        loss_d, loss_g = gan_value(np.zeros(2), np.zeros(2))
        assert math.isfinite(loss_d) and math.isfinite(loss_g)


class TestShapes:
    def test_default_topology(self):
        model = QGAN.create(TrainConfig())
        z = sample_latent(np.random.default_rng(0), 2, 64)
        assert z.shape == (2, 192, 1, 1)
        x = z
        sizes = []
        for layer in model.G:
            x = layer.forward(x)
            if isinstance(layer, QDeconv2d):
                sizes.append(x.shape[2])
        assert sizes == [4, 8, 16, 32]
        assert x.shape == (2, 3, 32, 32)
        assert np.all(np.abs(x) <= 1)

    def test_latent_mismatch(self):
        model = QGAN.create(TrainConfig(**TINY))
        with pytest.raises(ConfigurationError):
            generator_forward(np.zeros((1, 5, 1, 1)), model.G)
        with pytest.raises(ConfigurationError):
            generator_forward(np.zeros((1, 9, 1, 1)), model.G, latent_dim=4)

    def test_flat_latent_accepted(self):
        model = QGAN.create(TrainConfig(**TINY))
        model.G.train()
        assert generator_forward(np.zeros((2, 9)), model.G).shape == (2, 3, 8, 8)

    def test_discriminator_shape_error(self):
        model = QGAN.create(TrainConfig(**TINY))
        with pytest.raises(ConfigurationError):
            discriminator_forward(np.zeros((1, 4, 8, 8)), model.D)

    @pytest.mark.parametrize("kw", [
        dict(image_size=24), dict(g_channels=(8, 8)), dict(batch_size=1), dict(iterations=-1),
    ])
    def test_bad_config(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)


class TestForward:
    def test_zero_latent_linear_chain(self):
        rng = np.random.default_rng(0)
        G = Sequential(QDeconv2d(2, 2, 4, 1, 0, rng=rng), SplitActivation("leaky_relu"),
                       QDeconv2d(2, 1, 4, 2, 1, rng=rng), SplitActivation("tanh"))
        for layer in (G[0], G[2]):
            layer.params["theta"][:] = 0
            layer.params["s"][:] = 1
        assert np.all(G.forward(np.zeros((1, 6, 1, 1))) == 0)

    def test_generator_deterministic(self):
        a = QGAN.create(TrainConfig(**TINY, seed=5))
        b = QGAN.create(TrainConfig(**TINY, seed=5))
        z = sample_latent(np.random.default_rng(1), 4, 3)
        a.G.train(), b.G.train()
        np.testing.assert_array_equal(generator_forward(z, a.G), generator_forward(z, b.G))

    def test_discriminator_zero_weights(self):
        model = QGAN.create(TrainConfig(**TINY))
        for _, p in model.D.named_params():
            p[...] = 0
        np.testing.assert_array_equal(discriminator_forward(np.ones((2, 3, 8, 8)), model.D), 0.5)

    def test_discriminator_range(self):
        model = QGAN.create(TrainConfig(**TINY))
        rng = np.random.default_rng(2)
        for _, p in model.D.named_params():
            p[...] = rng.normal(scale=0.5, size=p.shape)
        imgs = rng.uniform(-1, 1, size=(1000, 3, 8, 8)) * 5
        p = discriminator_forward(imgs, model.D)
        assert np.all((p > 0) & (p < 1))
        np.testing.assert_array_equal(p, discriminator_forward(imgs, model.D))


class TestTraining:
    def test_lr_zero_is_noop(self):
        model = QGAN.create(TrainConfig(**TINY, lr_g=0.0, lr_d=0.0))
        before = snapshot(model)
        train_step(model, synth_dataset(SyntheticSpec(side=8, count=4)))
        after = snapshot(model)
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])

    def test_zero_iterations_is_initialization(self):
        cfg = TrainConfig(**TINY, iterations=0)
        model, rows = train(synth_dataset(SyntheticSpec(side=8, count=4)), cfg)
        fresh = snapshot(QGAN.create(cfg))
        assert rows == []
        for k, v in snapshot(model).items():
            np.testing.assert_array_equal(v, fresh[k])

    def test_deterministic_rows(self, tmp_path):
        data = synth_dataset(SyntheticSpec(side=8, count=8))
        cfg = TrainConfig(**TINY, iterations=100, seed=2)
        _, r1 = train(data, cfg, loss_csv=tmp_path / "a.csv")
        _, r2 = train(data, cfg, loss_csv=tmp_path / "b.csv")
        assert r1 == r2
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.csv").read_text().splitlines()[0] == "iter,loss_d,loss_g"

    def test_loss_g_trend_decreases(self):
        data = synth_dataset(SyntheticSpec(side=8, count=16, seed=4))
        cfg = TrainConfig(**{**TINY, "batch_size": 8}, iterations=500, seed=0)
        _, rows = train(data, cfg)
        lg = np.array([r[2] for r in rows])
        assert lg[-100:].mean() < lg[:20].mean()

    def test_nan_aborts(self):
        model = QGAN.create(TrainConfig(**TINY))
        bad = np.full((4, 3, 8, 8), np.nan)
        with pytest.raises(TrainingError):
            train_step(model, bad)

    def test_dataset_checks(self):
        with pytest.raises(ConfigurationError):
            train(np.zeros((4, 3, 16, 16)), TrainConfig(**TINY))
        with pytest.raises(ConfigurationError):
            train(np.zeros((1, 3, 8, 8)), TrainConfig(**TINY))

    def test_csv_locale_independent(self, tmp_path):
        write_loss_csv(tmp_path / "l.csv", [(1, 0.5, 1.25)])
        assert (tmp_path / "l.csv").read_text() == "iter,loss_d,loss_g\n1,0.5,1.25\n"


class TestEndToEndGradient:
    def test_loss_g_wrt_one_theta(self):
        """Finite differences of the generator loss through D and the whole generator."""
        cfg = TrainConfig(**TINY, seed=9)
        model = QGAN.create(cfg)
        rng = np.random.default_rng(0)
        for _, p in model.D.named_params():
            p[...] = rng.normal(scale=0.3, size=p.shape)
        z = sample_latent(rng, 4, cfg.latent_dim)
        G, D = model.G, model.D
        G.train()

        def loss():
            p = discriminator_forward(generator_forward(z, G), D)
            return gan_value(np.full(4, 0.5), p)[1]

        fake = generator_forward(z, G)
        p = sigmoid(discriminator_logits(fake, D))
        G.backward(D.backward(((p - 1.0) / 4)[:, None]))
        grads = dict(G.named_grads())
        for name in ("0.theta", "3.theta", "0.s", "1.gamma"):
            arr = dict(G.named_params())[name]
            assert rel_error(grads[name], numeric_grad(loss, arr, 1e-5)) < 1e-3, name
