"""Quaternion, axis-angle, and planar-angle utilities.

Quaternions are stored (w, x, y, z) and operate on the last axis, so every
function broadcasts over leading dimensions. Rotations follow the Hamilton
convention: quat_rotate(quat_mul(a, b), v) == quat_rotate(a, quat_rotate(b, v)).
"""

from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

__all__ = [
    "IDENTITY_QUAT",
    "quat_mul",
    "quat_conjugate",
    "quat_rotate",
    "quat_rotate_backward",
    "quat_normalize",
    "quat_canonical",
    "quat_from_axis_angle",
    "axis_angle_from_quat",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_left_matrix",
    "quat_right_matrix",
    "rotmat_axis_angle_jacobian",
    "quat_to_matrix_jacobian",
    "wrap_angle",
]


def quat_mul(a, b):
    """Hamilton product a ⊗ b, broadcasting over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_rotate(q, v):
    """Rotate vectors v by unit quaternions q (no normalization performed)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_rotate_backward(q, v, d_out):
    """Gradients of quat_rotate w.r.t. q (as a free 4-vector) and v.

    Uses r = rot(q) v with the quadratic quaternion form; the caller is
    responsible for projecting d_q onto the unit sphere if q is constrained.
    """
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    d_out = np.asarray(d_out, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    # r = v + 2 w (u×v) + 2 u×(u×v)
    d_w = 2.0 * np.sum(d_out * uv, axis=-1, keepdims=True)
    # w (u×v) term: adjoint of -w [v]× is w (v × d_out)
    d_u = 2.0 * w * np.cross(v, d_out)
    # u×(u×v) = u(u·v) - v(u·u): adjoint is (u·v) d + (u·d) v - 2 (v·d) u
    d_u += 2.0 * (
        np.sum(u * v, axis=-1, keepdims=True) * d_out
        + np.sum(u * d_out, axis=-1, keepdims=True) * v
        - 2.0 * np.sum(d_out * v, axis=-1, keepdims=True) * u
    )
    d_q = np.concatenate([d_w, d_u], axis=-1)
    # dv: v + 2w(u×v) + 2(u (u·v) - v (u·u))
    d_v = (
        d_out
        + 2.0 * w * np.cross(d_out, u)
        + 2.0 * (np.sum(u * d_out, axis=-1, keepdims=True) * u
                 - np.sum(u * u, axis=-1, keepdims=True) * d_out)
    )
    return d_q, d_v


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q):
    """Flip sign so the first nonzero component of (w, x, y, z) is positive."""
    q = np.asarray(q, dtype=float)
    sign = np.zeros(q.shape[:-1])
    for i in range(4):
        comp = q[..., i]
        sign = np.where(sign == 0.0, np.sign(comp), sign)
    sign = np.where(sign == 0.0, 1.0, sign)
    return q * sign[..., None]


def quat_from_axis_angle(aa):
    """Exponential map from axis-angle 3-vectors (radians) to unit quaternions."""
    aa = np.asarray(aa, dtype=float)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-12
    # sin(θ/2)/θ, with the θ→0 limit 1/2
    factor = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, angle))
    return np.concatenate([np.cos(half), factor * aa], axis=-1)


def axis_angle_from_quat(q):
    q = quat_canonical(quat_normalize(q))
    w = np.clip(q[..., :1], -1.0, 1.0)
    angle = 2.0 * np.arccos(w)
    s = np.sqrt(np.maximum(1.0 - w * w, 0.0))
    small = s < 1e-12
    axis = q[..., 1:] / np.where(small, 1.0, s)
    return np.where(small, q[..., 1:] * 2.0, axis * angle)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    m[..., 0, 1] = 2.0 * (x * y - w * z)
    m[..., 0, 2] = 2.0 * (x * z + w * y)
    m[..., 1, 0] = 2.0 * (x * y + w * z)
    m[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    m[..., 1, 2] = 2.0 * (y * z - w * x)
    m[..., 2, 0] = 2.0 * (x * z - w * y)
    m[..., 2, 1] = 2.0 * (y * z + w * x)
    m[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    """Rotation matrices to canonical-sign unit quaternions (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    batch = m.shape[:-2]
    m = m.reshape((-1, 3, 3))
    t = np.trace(m, axis1=-2, axis2=-1)
    q = np.empty((m.shape[0], 4))

    cand = np.stack([t, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=-1)
    case = np.argmax(cand, axis=-1)

    def fill(mask, qw, qx, qy, qz, pivot):
        s = 2.0 * np.sqrt(np.maximum(pivot[mask], 1e-300))
        q[mask, 0] = qw[mask] / s
        q[mask, 1] = qx[mask] / s
        q[mask, 2] = qy[mask] / s
        q[mask, 3] = qz[mask] / s

    m00, m11, m22 = m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]
    fill(case == 0, 1.0 + t, m[:, 2, 1] - m[:, 1, 2], m[:, 0, 2] - m[:, 2, 0],
         m[:, 1, 0] - m[:, 0, 1], 1.0 + t)
    fill(case == 1, m[:, 2, 1] - m[:, 1, 2], 1.0 + m00 - m11 - m22,
         m[:, 0, 1] + m[:, 1, 0], m[:, 0, 2] + m[:, 2, 0], 1.0 + m00 - m11 - m22)
    fill(case == 2, m[:, 0, 2] - m[:, 2, 0], m[:, 0, 1] + m[:, 1, 0],
         1.0 + m11 - m00 - m22, m[:, 1, 2] + m[:, 2, 1], 1.0 + m11 - m00 - m22)
    fill(case == 3, m[:, 1, 0] - m[:, 0, 1], m[:, 0, 2] + m[:, 2, 0],
         m[:, 1, 2] + m[:, 2, 1], 1.0 + m22 - m00 - m11, 1.0 + m22 - m00 - m11)

    return quat_canonical(quat_normalize(q)).reshape(batch + (4,))


def quat_left_matrix(q):
    """4×4 L(q) with L(q) @ r == quat_mul(q, r)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, -z, y], axis=-1),
        np.stack([y, z, w, -x], axis=-1),
        np.stack([z, -y, x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def quat_right_matrix(q):
    """4×4 R(q) with R(q) @ r == quat_mul(r, q)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, z, -y], axis=-1),
        np.stack([y, -z, w, x], axis=-1),
        np.stack([z, y, -x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def _hat(v):
    v = np.asarray(v, dtype=float)
    zeros = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([zeros, -v[..., 2], v[..., 1]], axis=-1),
            np.stack([v[..., 2], zeros, -v[..., 0]], axis=-1),
            np.stack([-v[..., 1], v[..., 0], zeros], axis=-1),
        ],
        axis=-2,
    )


def rotmat_axis_angle_jacobian(aa):
    """dR/dω as a (..., 3, 3, 3) tensor, index order: [component i, row, col].

    Gallego-Yezzi closed form: ∂R/∂ωᵢ = (ωᵢ[ω]× + [ω×(I−R)eᵢ]×) R / θ²,
    with the θ→0 limit [eᵢ]×.
    """
    aa = np.asarray(aa, dtype=float)
    batch = aa.shape[:-1]
    theta2 = np.sum(aa * aa, axis=-1)
    R = quat_to_matrix(quat_from_axis_angle(aa))
    out = np.empty(batch + (3, 3, 3))
    eye = np.eye(3)
    i_minus_r = eye - R
    hat_w = _hat(aa)
    small = theta2 < 1e-20
    safe_theta2 = np.where(small, 1.0, theta2)
    for i in range(3):
        e_i = eye[i]
        col = i_minus_r[..., :, i]
        term = aa[..., i, None, None] * hat_w + _hat(np.cross(aa, col))
        exact = (term @ R) / safe_theta2[..., None, None]
        out[..., i, :, :] = np.where(small[..., None, None], _hat(e_i), exact)
    return out


def quat_to_matrix_jacobian(q):
    """dR/dq for the (non-normalized) quadratic map, shape (..., 4, 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    zeros = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dw = mat([[zeros, -2 * z, 2 * y], [2 * z, zeros, -2 * x], [-2 * y, 2 * x, zeros]])
    dx = mat([[zeros, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    dy = mat([[-4 * y, 2 * x, 2 * w], [2 * x, zeros, 2 * z], [-2 * w, 2 * z, -4 * y]])
    dz = mat([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zeros]])
    return np.stack([dw, dx, dy, dz], axis=-3)


def wrap_angle(a):
    """Wrap angles into (−π, π]."""
    a = np.asarray(a, dtype=float)
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)
