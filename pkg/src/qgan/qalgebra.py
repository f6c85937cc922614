"""Quaternion scalars and the gray-axis rotation matrices used by every layer.

Scalar types are small immutable dataclasses; the layer code never touches
them and works on real arrays of rotation parameters instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

GRAY_AXIS = np.full(3, 1.0 / math.sqrt(3.0))


def wrap_angle(theta):
    """Map angles into [-pi, pi]. Works on scalars and arrays."""
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) + math.pi, 2.0 * math.pi) - math.pi
    # keep +pi as +pi rather than folding it onto -pi
    wrapped = np.where((wrapped == -math.pi) & (np.asarray(theta) > 0), math.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Quaternion:
    w: float = 0.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Quaternion(self.w * other, self.x * other, self.y * other, self.z * other)
        return qmul(self, _as_quaternion(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return self * other
        return NotImplemented

    def __add__(self, other):
        o = _as_quaternion(other)
        return Quaternion(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)

    def __sub__(self, other):
        o = _as_quaternion(other)
        return Quaternion(self.w - o.w, self.x - o.x, self.y - o.y, self.z - o.z)

    def __neg__(self):
        return Quaternion(-self.w, -self.x, -self.y, -self.z)

    def to_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class PureQuaternion:
    """Quaternion with no scalar part; an RGB pixel is one of these."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "PureQuaternion":
        a, b, c = (float(t) for t in v)
        return cls(a, b, c)

    def to_vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def as_quaternion(self) -> Quaternion:
        return Quaternion(0.0, self.x, self.y, self.z)

    def conjugate(self) -> "PureQuaternion":
        return PureQuaternion(-self.x, -self.y, -self.z)


def _as_quaternion(q) -> Quaternion:
    if isinstance(q, Quaternion):
        return q
    if isinstance(q, PureQuaternion):
        return q.as_quaternion()
    if isinstance(q, (int, float)):
        return Quaternion(float(q))
    raise TypeError(f"cannot interpret {type(q).__name__} as a quaternion")


I = Quaternion(0.0, 1.0, 0.0, 0.0)
J = Quaternion(0.0, 0.0, 1.0, 0.0)
K = Quaternion(0.0, 0.0, 0.0, 1.0)
ONE = Quaternion(1.0)


def qmul(a, b) -> Quaternion:
    """Hamilton product ``a * b``."""
    a = _as_quaternion(a)
    b = _as_quaternion(b)
    return Quaternion(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )


def conjugate(q) -> Quaternion:
    q = _as_quaternion(q)
    return Quaternion(q.w, -q.x, -q.y, -q.z)


def modulus(q) -> float:
    q = _as_quaternion(q)
    return math.sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z)


def inverse(q) -> Quaternion:
    """Multiplicative inverse, ``conj(q) / |q|^2``."""
    q = _as_quaternion(q)
    n2 = q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z
    if n2 == 0.0:
        raise ZeroDivisionError("the zero quaternion has no inverse")
    c = conjugate(q)
    return Quaternion(c.w / n2, c.x / n2, c.y / n2, c.z / n2)


def qmean_var(batch: Iterable) -> tuple[Quaternion, float]:
    """Componentwise mean and the real scalar variance mean(|q - E[q]|^2)."""
    arr = np.array([_as_quaternion(q).to_array() for q in batch], dtype=np.float64)
    if arr.size == 0:
        raise ValueError("qmean_var needs a non-empty batch")
    mean = arr.mean(axis=0)
    var = float(np.mean(np.sum((arr - mean) ** 2, axis=1)))
    return Quaternion(*mean.tolist()), var


def l1_norm(a) -> float:
    """Sum of entry moduli of a quaternion matrix.

    ``a`` may be a nested sequence of quaternions or a real array whose last
    axis holds the components (3 for pure, 4 for full quaternions).
    """
    if isinstance(a, np.ndarray) and a.dtype != object:
        return float(np.sum(np.sqrt(np.sum(a.astype(np.float64) ** 2, axis=-1))))
    total = 0.0
    for row in a:
        for q in row:
            total += modulus(q)
    return total


@dataclass(frozen=True)
class RotationParams:
    """Scale ``s`` and angle ``theta`` of one kernel tap (theta wrapped)."""

    s: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def as_quaternion(self) -> Quaternion:
        """The kernel element ``s (cos(theta/2) + sin(theta/2) mu)``."""
        c = math.cos(self.theta / 2.0)
        sn = math.sin(self.theta / 2.0) / math.sqrt(3.0)
        return Quaternion(self.s * c, self.s * sn, self.s * sn, self.s * sn)


def _gammas(theta):
    g1 = 1.0 / 3.0 + 2.0 / 3.0 * np.cos(theta)
    g2 = 1.0 / 3.0 - 2.0 / 3.0 * np.cos(theta - math.pi / 3.0)
    g3 = 1.0 / 3.0 - 2.0 / 3.0 * np.cos(theta + math.pi / 3.0)
    return g1, g2, g3


def _dgammas(theta):
    return (
        -2.0 / 3.0 * np.sin(theta),
        2.0 / 3.0 * np.sin(theta - math.pi / 3.0),
        2.0 / 3.0 * np.sin(theta + math.pi / 3.0),
    )


def _circulant(g1, g2, g3):
    rows = [[g1, g2, g3], [g3, g1, g2], [g2, g3, g1]]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rotation_matrices(s, theta) -> np.ndarray:
    """Scaled rotations ``s R(theta)`` for arrays of taps; result shape ``(..., 3, 3)``."""
    s = np.asarray(s, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    return s[..., None, None] * _circulant(*_gammas(theta))


def rotation_matrices_dtheta(s, theta) -> np.ndarray:
    """Elementwise d/dtheta of :func:`rotation_matrices`."""
    s = np.asarray(s, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    return s[..., None, None] * _circulant(*_dgammas(theta))


def rotation_matrix(p: RotationParams) -> np.ndarray:
    return rotation_matrices(p.s, p.theta)


def rotation_matrix_dtheta(p: RotationParams) -> np.ndarray:
    return rotation_matrices_dtheta(p.s, p.theta)


def sandwich(p: RotationParams, q) -> PureQuaternion:
    """``(1/s) w q conj(w)`` by explicit Hamilton products."""
    if p.s == 0.0:
        raise ZeroDivisionError("sandwich product is undefined for s = 0")
    if not isinstance(q, PureQuaternion):
        q = PureQuaternion.from_vector(q)
    w = p.as_quaternion()
    r = qmul(qmul(w, q.as_quaternion()), conjugate(w)) * (1.0 / p.s)
    return PureQuaternion(r.x, r.y, r.z)
