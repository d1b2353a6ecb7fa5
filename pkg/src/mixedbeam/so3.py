"""Rotation algebra on rotation vectors and unit quaternions.

Two layers live here:

* array kernels (``quat_exp``, ``quat_log``, ``quat_mul``, ``tangent_matrix``,
  ...) that broadcast over leading axes. They run on numpy for numpy input
  and on ``jax.numpy`` otherwise, so the element code can trace and
  differentiate them.
* a small value-level API (:class:`Rotation`, :func:`exp_rotvec`,
  :func:`log_rotation`, ...) returning numpy arrays, for model building,
  post-processing and tests.

Quaternions are stored as ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

# switch between closed-form expressions and small-angle series
EPS_PSI = 1e-4

_E = np.eye(3)


# ---------------------------------------------------------------------------
# array kernels (traceable)
# ---------------------------------------------------------------------------


def _xp(*arrays):
    """``numpy`` when every argument is host data, ``jax.numpy`` otherwise."""
    if any(isinstance(a, jax.Array) for a in arrays):
        return jnp
    return np


def hat(v):
    """Skew matrix of ``v`` with ``hat(v) @ b == cross(v, b)``; batched."""
    xp = _xp(v)
    v = xp.asarray(v, dtype=float)
    z = xp.zeros_like(v[..., 0])
    return xp.stack(
        [
            xp.stack([z, -v[..., 2], v[..., 1]], axis=-1),
            xp.stack([v[..., 2], z, -v[..., 0]], axis=-1),
            xp.stack([-v[..., 1], v[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def _angle_sq(xp, psi):
    t2 = xp.sum(psi * psi, axis=-1)
    small = t2 < EPS_PSI**2
    # double-where keeps gradients finite at psi = 0
    t2_safe = xp.where(small, 1.0, t2)
    return t2, small, xp.sqrt(t2_safe)


def quat_exp(psi):
    """Unit quaternion of the rotation vector ``psi`` (..., 3) -> (..., 4)."""
    xp = _xp(psi)
    psi = xp.asarray(psi, dtype=float)
    t2, small, t = _angle_sq(xp, psi)
    c = xp.where(small, 1.0 - t2 / 8.0, xp.cos(0.5 * t))
    s = xp.where(small, 0.5 - t2 / 48.0, xp.sin(0.5 * t) / t)
    q = xp.concatenate([c[..., None], s[..., None] * psi], axis=-1)
    return q / xp.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    """Hamilton product ``a * b`` (rotation ``b`` applied first)."""
    xp = _xp(a, b)
    a, b = xp.asarray(a, dtype=float), xp.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return xp.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    xp = _xp(q)
    return xp.asarray(q, dtype=float) * xp.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    xp = _xp(q)
    q = xp.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return xp.stack(
        [
            xp.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            xp.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            xp.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def quat_rotate(q, v):
    """Rotate vectors ``v`` by quaternions ``q`` (broadcasting)."""
    xp = _xp(q, v)
    return xp.einsum("...ij,...j->...i", quat_to_matrix(q), xp.asarray(v, dtype=float))


def _canonical_sign(xp, q):
    # hemisphere w > 0; on w == 0 the first nonzero vector component is made positive
    v = q[..., 1:]
    nz = xp.abs(v) > 0.0
    first = xp.argmax(nz, axis=-1)
    lead = xp.take_along_axis(v, first[..., None], axis=-1)[..., 0]
    return xp.where(q[..., 0] > 0.0, 1.0, xp.where(q[..., 0] < 0.0, -1.0, xp.where(lead < 0.0, -1.0, 1.0)))


def quat_log(q, tie_break: bool = True):
    """Rotation vector of norm <= pi for the unit quaternion ``q``.

    With ``tie_break=False`` the hemisphere is chosen from the sign of ``w``
    alone, which is cheaper to differentiate.
    """
    xp = _xp(q)
    q = xp.asarray(q, dtype=float)
    if tie_break:
        sign = _canonical_sign(xp, q)
    else:
        sign = xp.where(q[..., 0] < 0.0, -1.0, 1.0)
    q = q * sign[..., None]
    w = q[..., 0]
    v = q[..., 1:]
    s2 = xp.sum(v * v, axis=-1)
    small = s2 < EPS_PSI**2
    s = xp.sqrt(xp.where(small, 1.0, s2))
    w_safe = xp.where(small, w, 1.0)
    # 2*atan(s/w)/s for small s
    f_series = 2.0 / w_safe * (1.0 - s2 / (3.0 * w_safe * w_safe))
    f = xp.where(small, f_series, 2.0 * xp.arctan2(s, w) / s)
    return f[..., None] * v


def quat_angle(q):
    """Rotation angle in [0, pi]."""
    xp = _xp(q)
    q = xp.asarray(q, dtype=float)
    s = xp.linalg.norm(q[..., 1:], axis=-1)
    return 2.0 * xp.arctan2(s, xp.abs(q[..., 0]))


def tangent_matrix(psi):
    """Tangent map ``T(psi)`` with ``dtheta = T(psi) @ dpsi``; batched."""
    xp = _xp(psi)
    psi = xp.asarray(psi, dtype=float)
    t2, small, t = _angle_sq(xp, psi)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = xp.where(small, 0.5 - t2 / 24.0, (1.0 - xp.cos(t)) / (t * t))
        b = xp.where(small, 1.0 / 6.0 - t2 / 120.0, (1.0 - xp.sin(t) / t) / (t * t))
    P = hat(psi)
    return xp.eye(3) + a[..., None, None] * P + b[..., None, None] * (P @ P)


# ---------------------------------------------------------------------------
# value-level API (numpy)
# ---------------------------------------------------------------------------


def skew(v) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def unskew(A) -> np.ndarray:
    """Axial vector of the skew part of ``A``."""
    A = np.asarray(A, dtype=float)
    return 0.5 * np.array([A[2, 1] - A[1, 2], A[0, 2] - A[2, 0], A[1, 0] - A[0, 1]])


@dataclass(frozen=True, eq=False)
class Rotation:
    """Orientation stored as a unit quaternion ``(w, x, y, z)``."""

    quat: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        if not np.all(np.isfinite(q)):
            raise ValueError("quaternion has non-finite entries")
        n = np.linalg.norm(q)
        if n == 0.0:
            raise ValueError("zero quaternion")
        q = q / n
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls) -> Rotation:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_rotvec(cls, psi) -> Rotation:
        return exp_rotvec(psi)

    @classmethod
    def from_matrix(cls, R) -> Rotation:
        """Quaternion from an orthogonal matrix (Shepperd's method)."""
        R = np.asarray(R, dtype=float)
        tr = np.trace(R)
        d = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
        i = int(np.argmax(d))
        if i == 0:
            w = 0.5 * np.sqrt(1.0 + tr)
            q = [w, (R[2, 1] - R[1, 2]) / (4 * w), (R[0, 2] - R[2, 0]) / (4 * w), (R[1, 0] - R[0, 1]) / (4 * w)]
        elif i == 1:
            x = 0.5 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            q = [(R[2, 1] - R[1, 2]) / (4 * x), x, (R[0, 1] + R[1, 0]) / (4 * x), (R[0, 2] + R[2, 0]) / (4 * x)]
        elif i == 2:
            y = 0.5 * np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
            q = [(R[0, 2] - R[2, 0]) / (4 * y), (R[0, 1] + R[1, 0]) / (4 * y), y, (R[1, 2] + R[2, 1]) / (4 * y)]
        else:
            z = 0.5 * np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
            q = [(R[1, 0] - R[0, 1]) / (4 * z), (R[0, 2] + R[2, 0]) / (4 * z), (R[1, 2] + R[2, 1]) / (4 * z), z]
        return cls(np.array(q))

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(quat_to_matrix(self.quat))

    def inverse(self) -> Rotation:
        return Rotation(self.quat * np.array([1.0, -1.0, -1.0, -1.0]))

    def apply(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)

    def __matmul__(self, other: Rotation) -> Rotation:
        return compose(self, other)

    def __repr__(self) -> str:
        return f"Rotation(quat={np.array2string(self.quat, precision=6)})"


def exp_rotvec(psi) -> Rotation:
    """Exponential map: rotation vector -> rotation."""
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (3,) or not np.all(np.isfinite(psi)):
        raise ValueError(f"expected a finite 3-vector, got {psi!r}")
    return Rotation(quat_exp(psi))


def log_rotation(rot: Rotation) -> np.ndarray:
    """Rotation vector with norm in [0, pi] such that ``exp_rotvec`` of it gives ``rot``."""
    return quat_log(rot.quat)


def tangent_map(psi) -> np.ndarray:
    """Matrix ``T`` relating rotation-vector variations to spatial spins."""
    return tangent_matrix(np.asarray(psi, dtype=float))


def compose(a: Rotation, b: Rotation) -> Rotation:
    """Rotation ``a @ b`` (``b`` applied first)."""
    return Rotation(np.asarray(quat_mul(a.quat, b.quat)))


def rotate(rot: Rotation, v) -> np.ndarray:
    return rot.apply(v)


def relative_rotvec(a: Rotation, b: Rotation) -> np.ndarray:
    """Rotation vector of ``a^T b``; unchanged by a common left rotation."""
    return log_rotation(compose(a.inverse(), b))
