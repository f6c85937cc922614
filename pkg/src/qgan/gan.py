"""Quaternion generator, real discriminator and the adversarial training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Adam, ConfigurationError, Conv2d, LeakyReLU, Linear, Sequential, sigmoid
from .qlayers import QBatchNorm, QDeconv2d, SplitActivation

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    image_size: int = 32
    latent_dim: int = 64
    g_channels: tuple = (32, 16, 8)
    d_channels: tuple = (8, 16, 32)
    kernel: int = 4
    g_gain: float = 0.25
    batch_size: int = 16
    iterations: int = 2000
    lr_g: float = 1e-3
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.g_channels = tuple(int(c) for c in self.g_channels)
        self.d_channels = tuple(int(c) for c in self.d_channels)
        n_up = _n_doublings(self.image_size)
        if n_up < 1:
            raise ConfigurationError("image_size must be at least 8")
        if len(self.g_channels) != n_up or len(self.d_channels) != n_up:
            raise ConfigurationError(
                f"image_size {self.image_size} needs {n_up} generator and discriminator widths, "
                f"got {len(self.g_channels)} and {len(self.d_channels)}"
            )
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 for batch normalization")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["g_channels"] = list(self.g_channels)
        d["d_channels"] = list(self.d_channels)
        return d


def _n_doublings(size):
    n = int(round(math.log2(size / 4))) if size >= 4 else -1
    if n < 0 or 4 * 2**n != size:
        raise ConfigurationError(f"image_size must be 4 * 2^k, got {size}")
    return n


def build_generator(cfg: TrainConfig, rng) -> Sequential:
    """Latent (N, 3*latent, 1, 1) -> 4x4 -> ... -> image (N, 3, S, S).

    Hidden blocks are deconv -> QBN -> split leaky ReLU; the last deconv
    emits one quaternion channel through tanh. ``g_gain`` scales the initial
    tap magnitudes by ``g_gain / sqrt(taps per output pixel)``.
    """
    k = cfg.kernel
    widths = list(cfg.g_channels)
    layers = []
    cin = cfg.latent_dim
    for i, cout in enumerate(widths):
        stride, pad = (1, 0) if i == 0 else (2, 1)
        fan = cin * (k * k if i == 0 else (k // stride) ** 2)
        layers += [
            QDeconv2d(cin, cout, k, stride, pad, rng=rng, gain=1.0 / math.sqrt(fan)),
            QBatchNorm(cout),
            SplitActivation("leaky_relu", 0.2),
        ]
        cin = cout
    fan = cin * (k // 2) ** 2
    layers += [
        QDeconv2d(cin, 1, k, 2, 1, rng=rng, gain=cfg.g_gain / math.sqrt(fan)),
        SplitActivation("tanh"),
    ]
    return Sequential(*layers)


def build_discriminator(cfg: TrainConfig, rng) -> Sequential:
    """Stride-2 convs with leaky ReLU down to 4x4, then one logit."""
    k = cfg.kernel
    layers = []
    cin = 3
    for cout in cfg.d_channels:
        layers += [Conv2d(cin, cout, k, 2, 1, rng=rng), LeakyReLU(0.2)]
        cin = cout
    layers.append(Linear(cin * 16, 1, rng=rng))
    return Sequential(*layers)


def sample_latent(rng, n, latent_dim):
    """p_z: every imaginary component i.i.d. uniform(-1, 1)."""
    return rng.uniform(-1.0, 1.0, size=(n, 3 * latent_dim, 1, 1))


def generator_forward(z, G: Sequential, latent_dim=None):
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim == 2:
        z = z.reshape(z.shape[0], -1, 1, 1)
    first = G[0]
    expected = 3 * first.params["s"].shape[0]
    if z.shape[1:] != (expected, 1, 1) or (latent_dim is not None and expected != 3 * latent_dim):
        raise ConfigurationError(f"latent must have {expected} real components, got shape {z.shape}")
    return G.forward(z)


def discriminator_logits(img, D: Sequential):
    return D.forward(img)[:, 0]


def discriminator_forward(img, D: Sequential):
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[1] != 3:
        raise ConfigurationError(f"discriminator expects (N, 3, H, W), got {img.shape}")
    # float64 sigmoid rounds to exactly 0 or 1 for |logit| > ~37; keep it a strict probability
    return np.clip(sigmoid(discriminator_logits(img, D)), PROB_CLAMP, 1.0 - PROB_CLAMP)


def gan_value(d_real, d_fake):
    """(loss_D, loss_G) with clamped logs; loss_G is the non-saturating -mean log D(G(z))."""
    d_real = np.clip(np.asarray(d_real, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    d_fake = np.clip(np.asarray(d_fake, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss_d = -np.mean(np.log(d_real)) - np.mean(np.log1p(-d_fake))
    loss_g = -np.mean(np.log(d_fake))
    return float(loss_d), float(loss_g)


class TrainingError(RuntimeError):
    pass


@dataclass
class QGAN:
    """Generator, discriminator, their optimizers and the training RNG."""

    config: TrainConfig
    G: Sequential
    D: Sequential
    opt_g: Adam
    opt_d: Adam
    rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, config: TrainConfig):
        rng = np.random.default_rng(config.seed)
        G = build_generator(config, rng)
        D = build_discriminator(config, rng)
        opt_g = Adam(list(G.named_params()), config.lr_g, config.beta1, config.beta2)
        opt_d = Adam(list(D.named_params()), config.lr_d, config.beta1, config.beta2)
        return cls(config, G, D, opt_g, opt_d, rng)

    def sample(self, n, rng=None):
        rng = self.rng if rng is None else rng
        self.G.eval()
        return generator_forward(sample_latent(rng, n, self.config.latent_dim), self.G)


def _check_finite(what, value, iteration):
    if not np.isfinite(value):
        raise TrainingError(f"{what} became {value} at iteration {iteration}")


def train_step(model: QGAN, real):
    """One discriminator update on (real, fake), then one generator update."""
    G, D = model.G, model.D
    n = real.shape[0]
    if n < 2:
        raise ConfigurationError("train_step needs a batch of at least 2 images")
    G.train()
    z = sample_latent(model.rng, n, model.config.latent_dim)
    fake = generator_forward(z, G)

    # discriminator on the concatenated batch: d/dlogit of the BCE terms
    batch = np.concatenate([real, fake], axis=0)
    logits = discriminator_logits(batch, D)
    p = sigmoid(logits)
    loss_d, _ = gan_value(p[:n], p[n:])
    dlogit = np.concatenate([(p[:n] - 1.0) / n, p[n:] / n])
    D.backward(dlogit[:, None])
    model.opt_d.step([g for _, g in D.named_grads()])

    # generator through the updated discriminator
    logits_f = discriminator_logits(fake, D)
    p_f = sigmoid(logits_f)
    _, loss_g = gan_value(np.full(n, 0.5), p_f)
    d_img = D.backward(((p_f - 1.0) / n)[:, None])
    G.backward(d_img)
    model.opt_g.step([g for _, g in G.named_grads()])

    model.iteration += 1
    _check_finite("loss_d", loss_d, model.iteration)
    _check_finite("loss_g", loss_g, model.iteration)
    return loss_d, loss_g


def write_loss_csv(path, rows):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "loss_d", "loss_g"])
        for it, ld, lg in rows:
            w.writerow([it, repr(float(ld)), repr(float(lg))])
    tmp.replace(path)


def train(images, config: TrainConfig, model: QGAN | None = None, loss_csv=None, checkpoint_path=None):
    """Run the alternating loop; returns the model and its (iter, loss_d, loss_g) rows."""
    from .dataio import save_checkpoint

    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ConfigurationError("dataset must be a non-empty (N, 3, H, W) array")
    if images.shape[2:] != (config.image_size, config.image_size):
        raise ConfigurationError(
            f"dataset images are {images.shape[2:]}, config expects {config.image_size}"
        )
    model = QGAN.create(config) if model is None else model
    b = min(config.batch_size, images.shape[0])
    if b < 2:
        raise ConfigurationError("need at least two training images")
    rows = model.history
    for _ in range(config.iterations):
        idx = model.rng.choice(images.shape[0], size=b, replace=False)
        loss_d, loss_g = train_step(model, images[idx])
        rows.append((model.iteration, loss_d, loss_g))
        if model.iteration % 100 == 0:
            log.info("iter %d  loss_d %.4f  loss_g %.4f", model.iteration, loss_d, loss_g)
        if checkpoint_path and config.checkpoint_every and model.iteration % config.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path)
    if loss_csv is not None:
        write_loss_csv(loss_csv, rows)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    model.G.eval()
    return model, rows
