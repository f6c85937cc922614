"""Quaternion convolution, deconvolution, batch normalization and split activations.

Tensor layout
-------------
A quaternion tensor with ``C`` channels is a real array of shape
``(N, 3 * C, H, W)``; real channel ``3 * c + a`` holds imaginary component
``a`` (i, j, k) of quaternion channel ``c``. The scalar part is never
stored, so every layer output is pure by construction.

A kernel tap (o, c, u, v) with scale ``s`` and angle ``theta`` acts on a
pixel vector as the 3x3 block ``s R(theta)``. Assembling those blocks
gives a real ``(3 O, 3 C, d, d)`` weight, so both passes run as ordinary
im2col matrix products; the rotation structure only enters through how the
weight is built and how its gradient is reduced back onto ``(s, theta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .nn import ConfigurationError, Layer, conv_out_size
from .qalgebra import RotationParams, _dgammas, _gammas


def planes(x: np.ndarray) -> np.ndarray:
    """View ``(N, 3C, H, W)`` as ``(N, C, 3, H, W)``."""
    n, c3, h, w = x.shape
    if c3 % 3:
        raise ConfigurationError(f"channel axis {c3} is not a multiple of 3")
    return x.reshape(n, c3 // 3, 3, h, w)


@dataclass
class QConvKernel:
    """Rotation parameters of a quaternion convolution.

    ``s`` and ``theta`` have shape ``(out_channels, in_channels, d, d)`` in
    the convolution direction. A deconvolution built from the same kernel
    is its adjoint and therefore maps ``out_channels -> in_channels``.
    """

    s: np.ndarray
    theta: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.s.shape != self.theta.shape or self.s.ndim != 4:
            raise ConfigurationError("s and theta must share a 4-d shape (O, C, d, d)")
        if self.s.shape[2] != self.s.shape[3] or self.s.shape[2] < 1:
            raise ConfigurationError("kernel taps must form a square d x d grid, d >= 1")
        if self.stride < 1 or self.padding < 0:
            raise ConfigurationError("stride must be >= 1 and padding >= 0")
        if not (np.all(np.isfinite(self.s)) and np.all(np.isfinite(self.theta))):
            raise ConfigurationError("kernel parameters must be finite")

    @property
    def out_channels(self) -> int:
        return self.s.shape[0]

    @property
    def in_channels(self) -> int:
        return self.s.shape[1]

    @property
    def size(self) -> int:
        return self.s.shape[2]

    @classmethod
    def init(cls, out_channels, in_channels, d, stride=1, padding=0, rng=None, gain=1.0):
        """Near-identity init: theta ~ U(-pi/8, pi/8), s ~ gain * (1 + U(-0.05, 0.05))."""
        rng = np.random.default_rng() if rng is None else rng
        shape = (out_channels, in_channels, d, d)
        theta = rng.uniform(-math.pi / 8, math.pi / 8, size=shape)
        s = gain * (1.0 + rng.uniform(-0.05, 0.05, size=shape))
        return cls(s, theta, stride, padding)

    def tap(self, o, c, u, v) -> RotationParams:
        return RotationParams(float(self.s[o, c, u, v]), float(self.theta[o, c, u, v]))

    def real_weight(self) -> np.ndarray:
        """The ``(3O, 3C, d, d)`` real weight whose 3x3 blocks are ``s R(theta)``."""
        o, c, d, _ = self.s.shape
        g = _gammas(self.theta)
        w = np.empty((o, 3, c, 3, d, d))
        # circulant: block entry (a, b) is gamma_{(b - a) mod 3}
        for a in range(3):
            for b in range(3):
                w[:, a, :, b] = self.s * g[(b - a) % 3]
        return w.reshape(3 * o, 3 * c, d, d)

    def reduce_weight_grad(self, dw: np.ndarray):
        """Chain a gradient w.r.t. the real weight onto (d_s, d_theta)."""
        o, c, d, _ = self.s.shape
        g6 = dw.reshape(o, 3, c, 3, d, d)
        diag = [g6[:, 0, :, k] + g6[:, 1, :, (1 + k) % 3] + g6[:, 2, :, (2 + k) % 3] for k in range(3)]
        g = _gammas(self.theta)
        dg = _dgammas(self.theta)
        d_s = g[0] * diag[0] + g[1] * diag[1] + g[2] * diag[2]
        d_theta = self.s * (dg[0] * diag[0] + dg[1] * diag[1] + dg[2] * diag[2])
        return d_s, d_theta


@dataclass
class GradBundle:
    d_input: np.ndarray
    d_s: np.ndarray | None = None
    d_theta: np.ndarray | None = None
    d_gamma: np.ndarray | None = None
    d_beta: np.ndarray | None = None


def _check_input(x, channels, what):
    if x.ndim != 4 or x.shape[1] != 3 * channels:
        raise ConfigurationError(f"{what} expects input (N, {3 * channels}, H, W), got {x.shape}")


def conv_output_shape(x_shape, k: QConvKernel):
    n, _, h, w = x_shape
    oh = conv_out_size(h, k.size, k.stride, k.padding, "quaternion convolution")
    ow = conv_out_size(w, k.size, k.stride, k.padding, "quaternion convolution")
    return n, 3 * k.out_channels, oh, ow


def deconv_output_shape(x_shape, k: QConvKernel):
    n, _, h, w = x_shape
    oh = (h - 1) * k.stride - 2 * k.padding + k.size
    ow = (w - 1) * k.stride - 2 * k.padding + k.size
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"quaternion deconvolution of {h}x{w} gives empty output")
    return n, 3 * k.in_channels, oh, ow


def _conv_cols(x, k):
    return _kernels.im2col(x, k.size, k.size, k.stride, k.padding)


def qconv_forward(x, k: QConvKernel, weight=None, cols=None):
    _check_input(x, k.in_channels, "qconv_forward")
    n, c_out, oh, ow = conv_output_shape(x.shape, k)
    w = k.real_weight() if weight is None else weight
    cols = _conv_cols(x, k) if cols is None else cols
    out = cols @ w.reshape(c_out, -1).T
    return np.ascontiguousarray(out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2))


def qconv_backward(x, k: QConvKernel, d_out, weight=None, cols=None) -> GradBundle:
    _check_input(x, k.in_channels, "qconv_backward")
    expected = conv_output_shape(x.shape, k)
    if d_out.shape != expected:
        raise ConfigurationError(f"d_out shape {d_out.shape} does not match output {expected}")
    w = k.real_weight() if weight is None else weight
    cols = _conv_cols(x, k) if cols is None else cols
    c_out = expected[1]
    dmat = d_out.transpose(0, 2, 3, 1).reshape(-1, c_out)
    d_s, d_theta = k.reduce_weight_grad((dmat.T @ cols).reshape(w.shape))
    d_x = _kernels.col2im(dmat @ w.reshape(c_out, -1), x.shape, k.size, k.size, k.stride, k.padding)
    return GradBundle(d_x, d_s=d_s, d_theta=d_theta)


def qdeconv_forward(x, k: QConvKernel, weight=None):
    _check_input(x, k.out_channels, "qdeconv_forward")
    out_shape = deconv_output_shape(x.shape, k)
    w = k.real_weight() if weight is None else weight
    c_in = x.shape[1]
    xmat = x.transpose(0, 2, 3, 1).reshape(-1, c_in)
    cols = xmat @ w.reshape(c_in, -1)
    return _kernels.col2im(cols, out_shape, k.size, k.size, k.stride, k.padding)


def qdeconv_backward(x, k: QConvKernel, d_out, weight=None) -> GradBundle:
    _check_input(x, k.out_channels, "qdeconv_backward")
    expected = deconv_output_shape(x.shape, k)
    if d_out.shape != expected:
        raise ConfigurationError(f"d_out shape {d_out.shape} does not match output {expected}")
    w = k.real_weight() if weight is None else weight
    c_in = x.shape[1]
    dcols = _kernels.im2col(d_out, k.size, k.size, k.stride, k.padding)
    xmat = x.transpose(0, 2, 3, 1).reshape(-1, c_in)
    d_s, d_theta = k.reduce_weight_grad((xmat.T @ dcols).reshape(w.shape))
    n, _, h, wd = x.shape
    d_x = (dcols @ w.reshape(c_in, -1).T).reshape(n, h, wd, c_in).transpose(0, 3, 1, 2)
    return GradBundle(np.ascontiguousarray(d_x), d_s=d_s, d_theta=d_theta)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class QBNState:
    """Per-channel affine parameters and running statistics.

    ``running_var`` tracks the biased batch variance; inference multiplies it
    by ``count / (count - 1)`` where ``count`` is the number of pooled
    samples per channel in a training batch.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    count: int = 0
    batches_seen: int = 0
    mode: str = "train"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if not 0 < self.momentum <= 1:
            raise ConfigurationError("momentum must lie in (0, 1]")
        if np.any(self.running_var < 0):
            raise ConfigurationError("running variance must be non-negative")

    @classmethod
    def create(cls, dims, epsilon=1e-5, momentum=0.1):
        return cls(
            gamma=np.ones(dims),
            beta=np.zeros((dims, 3)),
            running_mean=np.zeros((dims, 3)),
            running_var=np.ones(dims),
            epsilon=epsilon,
            momentum=momentum,
        )

    @property
    def dims(self) -> int:
        return self.gamma.shape[0]

    def inference_moments(self):
        if self.batches_seen == 0:
            raise ValueError("QBN has no running statistics yet; run a training pass first")
        m = self.count
        factor = m / (m - 1) if m > 1 else 1.0
        return self.running_mean, factor * self.running_var


@dataclass
class QBNCache:
    xhat: np.ndarray  # (N, C, 3, H, W)
    inv_std: np.ndarray  # (C,)
    mean: np.ndarray = field(repr=False)
    var: np.ndarray = field(repr=False)


def batch_moments(x):
    """Per-channel quaternion mean (C, 3) and scalar variance (C,) pooled over N, H, W."""
    p = planes(x)
    mean = p.mean(axis=(0, 3, 4))
    xc = p - mean[None, :, :, None, None]
    var = np.mean(np.sum(xc * xc, axis=2), axis=(0, 2, 3))
    return mean, var


def qbn_forward_train(x, state: QBNState, update_stats=True):
    _check_input(x, state.dims, "qbn_forward_train")
    n, _, h, w = x.shape
    m = n * h * w
    if m < 2:
        raise ValueError("QBN training needs at least two pooled samples per channel")
    p = planes(x)
    mean, var = batch_moments(x)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (p - mean[None, :, :, None, None]) * inv_std[None, :, None, None, None]
    y = state.gamma[None, :, None, None, None] * xhat + state.beta[None, :, :, None, None]
    if update_stats:
        if state.batches_seen == 0:
            state.running_mean = mean.copy()
            state.running_var = var.copy()
        else:
            mo = state.momentum
            state.running_mean = (1.0 - mo) * state.running_mean + mo * mean
            state.running_var = (1.0 - mo) * state.running_var + mo * var
        state.count = m
        state.batches_seen += 1
    return y.reshape(x.shape), QBNCache(xhat, inv_std, mean, var)


def qbn_forward_infer(x, state: QBNState):
    _check_input(x, state.dims, "qbn_forward_infer")
    mean, var = state.inference_moments()
    scale = state.gamma / np.sqrt(var + state.epsilon)
    shift = state.beta - scale[:, None] * mean
    y = scale[None, :, None, None, None] * planes(x) + shift[None, :, :, None, None]
    return y.reshape(x.shape)


def qbn_backward(cache: QBNCache, state: QBNState, d_out) -> GradBundle:
    if cache is None:
        raise RuntimeError("qbn_backward needs the cache of a training forward pass")
    dy = planes(d_out)
    xhat = cache.xhat
    d_gamma = np.sum(dy * xhat, axis=(0, 2, 3, 4))
    d_beta = np.sum(dy, axis=(0, 3, 4))
    dxhat = dy * state.gamma[None, :, None, None, None]
    mean_dxhat = dxhat.mean(axis=(0, 3, 4), keepdims=True)
    # the three components share one variance, so they couple through x_hat . dx_hat
    proj = np.mean(np.sum(dxhat * xhat, axis=2, keepdims=True), axis=(0, 3, 4), keepdims=True)
    dx = cache.inv_std[None, :, None, None, None] * (dxhat - mean_dxhat - xhat * proj)
    return GradBundle(dx.reshape(d_out.shape), d_gamma=d_gamma, d_beta=d_beta)


# ---------------------------------------------------------------------------
# layers


class QConv2d(Layer):
    def __init__(self, in_ch, out_ch, d, stride=1, padding=0, rng=None, gain=1.0):
        super().__init__()
        k = QConvKernel.init(out_ch, in_ch, d, stride, padding, rng, gain)
        self.stride, self.padding = stride, padding
        self.params["s"] = k.s
        self.params["theta"] = k.theta
        self._cache = None

    @property
    def kernel(self) -> QConvKernel:
        return QConvKernel(self.params["s"], self.params["theta"], self.stride, self.padding)

    def forward(self, x):
        k = self.kernel
        w = k.real_weight()
        cols = _conv_cols(x, k) if x.ndim == 4 else None
        y = qconv_forward(x, k, weight=w, cols=cols)
        self._cache = (x, w, cols)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x, w, cols = self._cache
        g = qconv_backward(x, self.kernel, dy, weight=w, cols=cols)
        self.grads["s"], self.grads["theta"] = g.d_s, g.d_theta
        return g.d_input


class QDeconv2d(Layer):
    """Transposed quaternion convolution mapping ``in_ch -> out_ch`` channels."""

    def __init__(self, in_ch, out_ch, d, stride=1, padding=0, rng=None, gain=1.0):
        super().__init__()
        k = QConvKernel.init(in_ch, out_ch, d, stride, padding, rng, gain)
        self.stride, self.padding = stride, padding
        self.params["s"] = k.s
        self.params["theta"] = k.theta
        self._cache = None

    @property
    def kernel(self) -> QConvKernel:
        return QConvKernel(self.params["s"], self.params["theta"], self.stride, self.padding)

    def forward(self, x):
        k = self.kernel
        w = k.real_weight()
        self._cache = (x, w)
        return qdeconv_forward(x, k, weight=w)

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x, w = self._cache
        g = qdeconv_backward(x, self.kernel, dy, weight=w)
        self.grads["s"], self.grads["theta"] = g.d_s, g.d_theta
        return g.d_input


class QBatchNorm(Layer):
    """Channel-wise QBN. Training mode uses batch moments, eval mode the frozen ones."""

    def __init__(self, channels, epsilon=1e-5, momentum=0.1):
        super().__init__()
        self.state = QBNState.create(channels, epsilon, momentum)
        self.params["gamma"] = self.state.gamma
        self.params["beta"] = self.state.beta
        self._cache = None
        self._x = None
        self._mode = None

    def train(self, mode=True):
        self.training = mode
        self.state.mode = "train" if mode else "infer"
        return self

    def forward(self, x):
        if self.training:
            y, self._cache = qbn_forward_train(x, self.state)
            self._mode = "train"
        else:
            y = qbn_forward_infer(x, self.state)
            self._mode = "infer"
            self._cache = None
            self._x = x
        return y

    def backward(self, dy):
        if self._mode is None:
            raise RuntimeError("backward called before forward")
        if self._mode == "train":
            g = qbn_backward(self._cache, self.state, dy)
            self.grads["gamma"], self.grads["beta"] = g.d_gamma, g.d_beta
            return g.d_input
        # frozen statistics: a per-channel affine map
        mean, var = self.state.inference_moments()
        scale = self.state.gamma / np.sqrt(var + self.state.epsilon)
        p = planes(dy)
        xhat = (planes(self._x) - mean[None, :, :, None, None]) / np.sqrt(var + self.state.epsilon)[None, :, None, None, None]
        self.grads["gamma"] = np.sum(p * xhat, axis=(0, 2, 3, 4))
        self.grads["beta"] = np.sum(p, axis=(0, 3, 4))
        return (scale[None, :, None, None, None] * p).reshape(dy.shape)

    def named_buffers(self, prefix=""):
        st = self.state
        yield prefix + "running_mean", st.running_mean
        yield prefix + "running_var", st.running_var
        yield prefix + "count", np.array([float(st.count)])
        yield prefix + "batches_seen", np.array([float(st.batches_seen)])

    def load_buffer(self, name, value):
        st = self.state
        if name == "running_mean":
            st.running_mean = np.array(value, dtype=np.float64).reshape(st.dims, 3)
        elif name == "running_var":
            st.running_var = np.array(value, dtype=np.float64).reshape(st.dims)
        elif name == "count":
            st.count = int(value[0])
        elif name == "batches_seen":
            st.batches_seen = int(value[0])
        else:
            raise KeyError(name)


def split_activation_forward(x, kind="leaky_relu", alpha=0.2):
    if kind == "leaky_relu":
        return np.where(x > 0, x, alpha * x)
    if kind == "tanh":
        return np.tanh(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def split_activation_backward(x, d_out, kind="leaky_relu", alpha=0.2):
    if kind == "leaky_relu":
        return np.where(x > 0, d_out, alpha * d_out)
    if kind == "tanh":
        t = np.tanh(x)
        return d_out * (1.0 - t * t)
    raise ConfigurationError(f"unknown activation {kind!r}")


class SplitActivation(Layer):
    """Real activation applied to each imaginary component independently."""

    def __init__(self, kind="leaky_relu", alpha=0.2):
        super().__init__()
        split_activation_forward(np.zeros(1), kind, alpha)
        self.kind, self.alpha = kind, alpha
        self._x = None

    def forward(self, x):
        self._x = x
        return split_activation_forward(x, self.kind, self.alpha)

    def backward(self, dy):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        return split_activation_backward(self._x, dy, self.kind, self.alpha)
