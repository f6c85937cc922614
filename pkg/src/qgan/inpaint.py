"""Semantic inpainting by latent-space search over a frozen pre-trained QGAN.

Masks use 1 for observed pixels and 0 for missing ones. Images are
``(3, H, W)`` or batches ``(N, 3, H, W)`` in [-1, 1].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse

from . import metrics
from .gan import PROB_CLAMP, QGAN, discriminator_logits, generator_forward, sample_latent
from .nn import Adam, ConfigurationError, sigmoid

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# masks


def make_center_mask(h, w, target_frac=0.16):
    """Centered square hole whose area fraction is closest to ``target_frac``."""
    if h < 4 or w < 4:
        raise ConfigurationError("masks need images of at least 4x4")
    sides = np.arange(0, min(h, w) + 1)
    fracs = sides**2 / float(h * w)
    side = int(sides[np.argmin(np.abs(fracs - target_frac))])
    m = np.ones((h, w))
    top, left = (h - side) // 2, (w - side) // 2
    m[top:top + side, left:left + side] = 0.0
    return m


def make_diag_mask(h, w, target_frac=0.36):
    """Band ``|i - j| <= half_width`` around the main diagonal, area closest to the target."""
    if h != w:
        raise ConfigurationError(f"diagonal masks need square images, got {h}x{w}")
    if h < 4:
        raise ConfigurationError("masks need images of at least 4x4")
    i, j = np.mgrid[0:h, 0:w]
    dist = np.abs(i - j)
    # half_width = -1 means no hole at all
    widths = np.arange(-1, h)
    fracs = np.array([np.count_nonzero(dist <= hw) for hw in widths]) / float(h * w)
    hw = int(widths[np.argmin(np.abs(fracs - target_frac))])
    return np.where(dist <= hw, 0.0, 1.0)


def missing_fraction(mask) -> float:
    return float(np.mean(np.asarray(mask) == 0))


def validate_mask(mask):
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ConfigurationError(f"mask must be 2-d, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ConfigurationError("mask entries must be exactly 0 or 1")
    if not np.any(m == 1):
        raise ConfigurationError("mask must keep at least one observed pixel")
    return m


def _box_sum(a, r):
    """Sum of ``a`` over the (2r+1)^2 window around each pixel, zero outside."""
    h, w = a.shape
    p = np.zeros((h + 2 * r + 1, w + 2 * r + 1), dtype=np.int64)
    p[r + 1:r + 1 + h, r + 1:r + 1 + w] = a
    c = p.cumsum(0).cumsum(1)
    k = 2 * r + 1
    return c[k:k + h, k:k + w] - c[0:h, k:k + w] - c[k:k + h, 0:w] + c[0:h, 0:w]


def weight_matrix(mask, r=3):
    """Fraction of missing pixels among each observed pixel's in-bounds neighbors.

    The neighborhood is the (2r+1) x (2r+1) window without the center.
    Missing pixels get weight 0.
    """
    if r < 1:
        raise ConfigurationError("window radius must be >= 1")
    m = np.asarray(mask, dtype=np.float64)
    holes = (m == 0).astype(np.int64)
    n_nb = _box_sum(np.ones_like(holes), r) - 1
    n_missing = _box_sum(holes, r) - holes
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(n_nb > 0, n_missing / np.maximum(n_nb, 1), 0.0)
    return np.where(m == 1, w, 0.0)


# ---------------------------------------------------------------------------
# losses


def context_loss(gz, y, weights):
    """Weighted l1 distance sum_ij |w_ij (G(z)_ij - y_ij)| and its gradient w.r.t. G(z).

    Works per image; batched inputs return one loss per image. The gradient
    at a zero residual is taken as 0.
    """
    gz = np.asarray(gz, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if gz.shape != y.shape:
        raise ConfigurationError(f"context_loss shapes differ: {gz.shape} vs {y.shape}")
    r = gz - y
    norm = np.sqrt(np.sum(r * r, axis=-3))
    loss_map = weights * norm
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(norm[..., None, :, :] > 0, r / norm[..., None, :, :], 0.0)
    grad = (weights[..., None, :, :] if np.ndim(weights) == gz.ndim - 1 else weights) * unit
    if gz.ndim == 3:
        return float(loss_map.sum()), grad
    return loss_map.sum(axis=(-2, -1)), grad


def prior_loss(d_gz, lam):
    """``lam * log(1 - D(G(z)))`` and its derivative w.r.t. D(G(z)), after clamping."""
    d = np.clip(np.asarray(d_gz, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = lam * np.log1p(-d)
    grad = -lam / (1.0 - d)
    if np.ndim(loss) == 0:
        return float(loss), float(grad)
    return loss, grad


# ---------------------------------------------------------------------------
# latent search


@dataclass
class InpaintConfig:
    lam: float = 0.003
    iterations: int = 1000
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    window_radius: int = 3
    poisson: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")


@dataclass
class LatentResult:
    z: np.ndarray
    best_loss: np.ndarray
    trajectory: np.ndarray  # (evaluations, N) total loss
    z0: np.ndarray = field(repr=False, default=None)


def _masks_for_batch(mask, n):
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        m = np.broadcast_to(m, (n,) + m.shape)
    return m


def total_loss_and_grad(z, y, weights, model: QGAN, lam):
    """Per-image L_c + L_p and dL/dz through the frozen networks."""
    gz = generator_forward(z, model.G)
    lc, dgz = context_loss(gz, y, weights)
    p = sigmoid(discriminator_logits(gz, model.D))
    lp, dp = prior_loss(p, lam)
    if lam != 0:
        dimg = model.D.backward((dp * p * (1.0 - p))[:, None])
        dgz = dgz + dimg
    dz = model.G.backward(dgz)
    return lc + lp, dz, gz


def optimize_latent(y, mask, model: QGAN, cfg: InpaintConfig, z0=None):
    """Adam on z minimizing L_c + L_p; returns the lowest-loss iterate per image."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 3
    if single:
        y = y[None]
    n = y.shape[0]
    masks = _masks_for_batch(mask, n)
    weights = np.stack([weight_matrix(m, cfg.window_radius) for m in masks])
    model.G.eval()
    if z0 is None:
        z0 = sample_latent(np.random.default_rng(cfg.seed), n, model.config.latent_dim)
    z = np.array(z0, dtype=np.float64)
    opt = Adam([("z", z)], lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    best = np.full(n, np.inf)
    best_z = z.copy()
    traj = []

    def record(loss):
        if not np.all(np.isfinite(loss)):
            raise FloatingPointError(f"inpainting loss is not finite after {len(traj)} evaluations: {loss}")
        traj.append(loss.copy())
        better = loss < best
        best[better] = loss[better]
        best_z[better] = z[better]

    for it in range(cfg.iterations):
        loss, dz, _ = total_loss_and_grad(z, y, weights, model, cfg.lam)
        record(loss)
        opt.step([dz])
        if (it + 1) % 250 == 0:
            log.info("latent iter %d  mean loss %.4f", it + 1, float(loss.mean()))
    if cfg.lr != 0:
        loss, _, _ = total_loss_and_grad(z, y, weights, model, cfg.lam)
        record(loss)
    return LatentResult(best_z, best, np.array(traj), z0=np.array(z0))


# ---------------------------------------------------------------------------
# composition


def blend(mask, y, gz):
    """Observed pixels from ``y``, holes from ``gz``."""
    m = np.asarray(mask, dtype=np.float64)
    m = m[..., None, :, :] if m.ndim == np.ndim(y) - 1 else m
    return m * y + (1.0 - m) * gz


def mean_fill(y, mask):
    """Baseline: fill each hole with the per-channel mean of the observed pixels."""
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    obs = m == 1
    out = y.copy()
    for c in range(3):
        out[c][~obs] = y[c][obs].mean()
    return out


class PoissonError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (final residual {residual:.3e})")
        self.residual = residual


def conjugate_gradient(A, b, tol=1e-10, max_iter=None, x0=None):
    """Plain CG for SPD ``A``; stops when ||b - A x|| <= tol * max(||b||, 1)."""
    n = b.shape[0]
    max_iter = 10 * n if max_iter is None else max_iter
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - A @ x
    p = r.copy()
    rs = float(r @ r)
    target = tol * max(float(np.linalg.norm(b)), 1.0)
    it = 0
    while math.sqrt(rs) > target:
        if it >= max_iter:
            raise PoissonError(f"CG did not converge in {max_iter} iterations", math.sqrt(rs))
        ap = A @ p
        alpha = rs / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1
    return x, math.sqrt(rs), it


def poisson_system(mask, guide, boundary):
    """Sparse 5-point system for the hole pixels of one channel.

    For each missing pixel p with in-image neighbors q:
    ``sum_q (f_p - f_q) = sum_q (g_p - g_q)`` with ``f_q = boundary_q`` at
    observed q. Neighbors outside the image are dropped, which acts as a
    zero-flux condition on the image border.
    """
    m = np.asarray(mask)
    h, w = m.shape
    hole = m == 0
    idx = -np.ones((h, w), dtype=np.int64)
    ii, jj = np.nonzero(hole)
    n = ii.size
    idx[ii, jj] = np.arange(n)
    diag = np.zeros(n)
    rhs = np.zeros(n)
    rows, cols = [], []
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        qi, qj = ii + di, jj + dj
        inside = (qi >= 0) & (qi < h) & (qj >= 0) & (qj < w)
        p_in = np.nonzero(inside)[0]
        qi, qj = qi[inside], qj[inside]
        diag[p_in] += 1.0
        rhs[p_in] += guide[ii[p_in], jj[p_in]] - guide[qi, qj]
        q_idx = idx[qi, qj]
        unknown = q_idx >= 0
        rows.append(p_in[unknown])
        cols.append(q_idx[unknown])
        known = ~unknown
        rhs[p_in[known]] += boundary[qi[known], qj[known]]
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    A = sparse.csr_matrix(
        (np.concatenate([diag, -np.ones(r.size)]), (np.concatenate([np.arange(n), r]), np.concatenate([np.arange(n), c]))),
        shape=(n, n),
    )
    return A, rhs, (ii, jj)


def poisson_fuse(y, mask, gz, tol=1e-10, max_iter=None):
    """Gradient-domain fill of the hole: Laplacian of ``gz``, boundary values of ``y``."""
    y = np.asarray(y, dtype=np.float64)
    gz = np.asarray(gz, dtype=np.float64)
    m = validate_mask(mask)
    out = blend(m, y, gz)
    if not np.any(m == 0):
        return out
    hole = m == 0
    ring = ndimage.binary_dilation(hole) & ~hole
    for c in range(y.shape[0]):
        A, b, (ii, jj) = poisson_system(m, gz[c], y[c])
        # start from gz shifted to the boundary level; a constant fill is then a fixed point
        x0 = gz[c][ii, jj]
        if ring.any():
            x0 = (x0 - np.median(gz[c][ring])) + np.median(y[c][ring])
        x, _, _ = conjugate_gradient(A, b, tol=tol, max_iter=max_iter, x0=x0)
        out[c][ii, jj] = x
    return out


@dataclass
class InpaintResult:
    images: np.ndarray
    generated: np.ndarray
    latent: LatentResult
    rows: list = field(default_factory=list)


def inpaint(y, mask, model: QGAN, cfg: InpaintConfig, truth=None, names=None, hole_only=False):
    """Latent search, blend, optional Poisson fusion, and a metrics row per image."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 3
    if single:
        y = y[None]
    m = validate_mask(mask)
    res = optimize_latent(y, m, model, cfg)
    model.G.eval()
    gz = generator_forward(res.z, model.G)
    out = np.empty_like(y)
    for i in range(y.shape[0]):
        out[i] = poisson_fuse(y[i], m, gz[i]) if cfg.poisson else blend(m, y[i], gz[i])
    rows = []
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64).reshape(out.shape)
        region = (m == 0) if hole_only else None
        for i in range(out.shape[0]):
            rep = metrics.report(out[i], truth[i], region=region)
            rows.append({
                "image": names[i] if names else f"img_{i:05d}",
                "psnr": rep.psnr_capped,
                "ssim": rep.ssim,
                "mask_frac": missing_fraction(m),
                "iters": cfg.iterations,
            })
    if single:
        return InpaintResult(out[0], gz[0], res, rows)
    return InpaintResult(out, gz, res, rows)
