"""Layer protocol, containers, real-valued layers and the Adam optimizer.

Every layer caches what its backward pass needs during ``forward`` and
exposes trainable arrays through ``params`` and their gradients through
``grads`` (overwritten, not accumulated, by each ``backward``).
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import _kernels


class ConfigurationError(ValueError):
    """Shapes or hyperparameters that cannot work together."""


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def named_params(self, prefix="") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v

    def named_grads(self, prefix="") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            yield prefix + k, self.grads[k]

    def named_buffers(self, prefix="") -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def train(self, mode=True):
        self.training = mode
        for layer in self.layers:
            layer.train(mode)
        return self

    def named_params(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}{i}.")

    def named_grads(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_grads(f"{prefix}{i}.")

    def named_buffers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_buffers(f"{prefix}{i}.")

    def load_buffer(self, name, value):
        head, _, rest = name.partition(".")
        self.layers[int(head)].load_buffer(rest, value)


# ---------------------------------------------------------------------------
# real-valued layers (discriminator)


def conv_out_size(size, k, stride, pad, what="convolution"):
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"{what}: input size {size} with kernel {k}, stride {stride}, padding {pad} "
            "does not tile evenly"
        )
    return span // stride + 1


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, k, stride=1, padding=0, rng=None, std=0.02):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.stride, self.padding, self.k = stride, padding, k
        self.params["weight"] = rng.normal(0.0, std, size=(out_ch, in_ch, k, k))
        self.params["bias"] = np.zeros(out_ch)
        self._cache = None

    def forward(self, x):
        w = self.params["weight"]
        o, c, k, _ = w.shape
        if x.ndim != 4 or x.shape[1] != c:
            raise ConfigurationError(f"Conv2d expects (N, {c}, H, W), got {x.shape}")
        n, _, h, wd = x.shape
        oh = conv_out_size(h, k, self.stride, self.padding)
        ow = conv_out_size(wd, k, self.stride, self.padding)
        cols = _kernels.im2col(x, k, k, self.stride, self.padding)
        out = cols @ w.reshape(o, -1).T + self.params["bias"]
        self._cache = (x.shape, cols)
        return np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        shape, cols = self._cache
        w = self.params["weight"]
        o = w.shape[0]
        dmat = dy.transpose(0, 2, 3, 1).reshape(-1, o)
        self.grads["weight"] = (dmat.T @ cols).reshape(w.shape)
        self.grads["bias"] = dmat.sum(axis=0)
        return _kernels.col2im(dmat @ w.reshape(o, -1), shape, self.k, self.k, self.stride, self.padding)


class Linear(Layer):
    """Dense layer over flattened input; restores the input shape on backward."""

    def __init__(self, in_features, out_features, rng=None, std=0.02):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.params["weight"] = rng.normal(0.0, std, size=(out_features, in_features))
        self.params["bias"] = np.zeros(out_features)
        self._cache = None

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.params["weight"].shape[1]:
            raise ConfigurationError(
                f"Linear expects {self.params['weight'].shape[1]} features, got {flat.shape[1]}"
            )
        self._cache = (x.shape, flat)
        return flat @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        shape, flat = self._cache
        self.grads["weight"] = dy.T @ flat
        self.grads["bias"] = dy.sum(axis=0)
        return (dy @ self.params["weight"]).reshape(shape)


class LeakyReLU(Layer):
    def __init__(self, alpha=0.2):
        super().__init__()
        self.alpha = alpha
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, self.alpha * x)

    def backward(self, dy):
        return np.where(self._mask, dy, self.alpha * dy)


class Tanh(Layer):
    def __init__(self):
        super().__init__()
        self._y = None

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1.0 - self._y * self._y)


def sigmoid(x):
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.names = [n for n, _ in params]
        self.params = [p for _, p in params]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr != 0.0:
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {}
        for n, m, v in zip(self.names, self.m, self.v):
            out[f"m.{n}"] = m
            out[f"v.{n}"] = v
        return out
