"""Central finite-difference checks of layer backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn import Layer


def sum_squares(y):
    return float(np.sum(y * y)), 2.0 * y


def weighted_sum_squares(weights):
    """Loss ``sum(w * y^2)``; breaks the symmetries that make plain sum-of-squares flat for QBN."""

    def loss(y):
        return float(np.sum(weights * y * y)), 2.0 * weights * y

    return loss


@dataclass
class GradCheckReport:
    name: str
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.errors.items())
        return f"{status} {self.name}: max rel err {self.max_rel_error:.2e} (tol {self.tol:.0e}) [{parts}]"


def rel_error(analytic, numeric, floor=1e-6):
    """Entrywise ``|a - n| / max(|a|, |n|, floor)``, maximised."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def gradient_check(layer: Layer, x, loss=sum_squares, step=1e-5, tol=1e-4, name=None, floor=1e-6):
    """Compare ``layer.backward`` against finite differences for inputs and all params."""
    x = np.array(x, dtype=np.float64)
    y = layer.forward(x)
    _, dy = loss(y)
    dx = layer.backward(dy)
    params = dict(layer.named_params())
    analytic = {"input": np.array(dx)}
    for k, g in layer.named_grads():
        analytic[k] = np.array(g)

    def f():
        return loss(layer.forward(x))[0]

    report = GradCheckReport(name or type(layer).__name__, tol=tol)
    report.errors["input"] = rel_error(analytic["input"], numeric_grad(f, x, step), floor)
    for k, arr in params.items():
        report.errors[k] = rel_error(analytic[k], numeric_grad(f, arr, step), floor)
    return report


def default_suite(seed=0, step=1e-5, tol=1e-4, e2e_tol=1e-3) -> list[GradCheckReport]:
    """Checks for every layer type on small configurations, plus a tiny G -> D chain."""
    from .gan import TrainConfig, build_discriminator, build_generator, sample_latent
    from .nn import Conv2d, LeakyReLU, Linear, Sequential, Tanh
    from .qlayers import QBatchNorm, QConv2d, QDeconv2d, SplitActivation

    rng = np.random.default_rng(seed)

    def wloss(shape):
        return weighted_sum_squares(rng.uniform(0.5, 1.5, size=shape))

    def run(layer, x, name, loss=None, tol_=tol):
        out_shape = layer.forward(np.array(x)).shape
        return gradient_check(layer, x, loss=loss or wloss(out_shape), step=step, tol=tol_, name=name)

    cases = [
        (QConv2d(2, 2, 3, 1, 1, rng=rng), (2, 6, 5, 5), "QConv2d k3 s1 p1"),
        (QConv2d(1, 2, 4, 2, 1, rng=rng), (2, 3, 6, 6), "QConv2d k4 s2 p1"),
        (QDeconv2d(2, 2, 3, 1, 0, rng=rng), (2, 6, 3, 3), "QDeconv2d k3 s1 p0"),
        (QDeconv2d(2, 1, 4, 2, 1, rng=rng), (2, 6, 3, 3), "QDeconv2d k4 s2 p1"),
        (SplitActivation("leaky_relu", 0.2), (2, 6, 3, 3), "split leaky ReLU"),
        (SplitActivation("tanh"), (2, 6, 3, 3), "split tanh"),
        (Conv2d(3, 2, 4, 2, 1, rng=rng, std=0.3), (2, 3, 6, 6), "Conv2d k4 s2 p1"),
        (Linear(12, 1, rng=rng, std=0.3), (3, 3, 2, 2), "Linear"),
        (LeakyReLU(0.2), (2, 3, 3, 3), "LeakyReLU"),
        (Tanh(), (2, 3, 3, 3), "Tanh"),
    ]
    reports = [run(layer, rng.normal(size=shape), name) for layer, shape, name in cases]

    bn = QBatchNorm(2)
    bn.state.gamma[:] = rng.uniform(0.5, 1.5, 2)
    bn.state.beta[:] = rng.normal(size=(2, 3))
    x = rng.normal(size=(3, 6, 3, 3)) * 2.0 + 0.5
    reports.append(run(bn, x, "QBatchNorm train"))
    bn.eval()
    reports.append(run(bn, x, "QBatchNorm infer"))

    disc = Sequential(Conv2d(3, 2, 4, 2, 1, rng=rng, std=0.3), LeakyReLU(0.2), Linear(2 * 4 * 4, 1, rng=rng, std=0.3))
    reports.append(run(disc, rng.normal(size=(2, 3, 8, 8)), "discriminator"))

    # end to end: real-valued loss of D(G(z)) differentiated back to every generator angle
    cfg = TrainConfig(image_size=8, latent_dim=2, g_channels=(2,), d_channels=(2,), g_gain=1.0, seed=seed)
    G = build_generator(cfg, rng)
    D = build_discriminator(cfg, rng)
    for _, arr in D.named_params():
        arr[...] = rng.normal(scale=0.3, size=arr.shape)
    chain = Sequential(*G, *D)

    def logit_loss(y):
        return float(np.sum(y)), np.ones_like(y)

    rep = gradient_check(chain, sample_latent(rng, 3, cfg.latent_dim), loss=logit_loss, step=step, tol=e2e_tol,
                         name="generator end-to-end")
    rep.errors = {k: v for k, v in rep.errors.items() if k == "input" or k.split(".")[0] in
                  {str(i) for i in range(len(G))}}
    reports.append(rep)
    return reports
