"""Gaussian-on-mesh initialization and polygon-frame deformation.

World-space splats follow their parent polygon's similarity transform:
center mu' = k·R(mu) + T, rotation r' = R ⊗ r, scale s' = k·s; color and
opacity pass through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .transforms import (
    quat_canonical,
    quat_mul,
    quat_right_matrix,
    quat_rotate,
    quat_rotate_backward,
)
from .types import PolygonFrameSet, SkinnedMesh, SplatSet, ValidationError, WorldGaussians


@dataclass(frozen=True)
class InitOptions:
    per_polygon: int = 1
    scale_fraction: float = 0.5  # of the triangle's mean edge length
    jitter_fraction: float = 0.25  # tangent-plane jitter for extra splats
    color: tuple = (0.5, 0.5, 0.5)
    opacity: float = 0.5
    seed: int = 0


def init_splats(mesh: SkinnedMesh, opts: InitOptions = InitOptions()) -> SplatSet:
    """One splat per polygon center (more with per_polygon > 1, jittered).

    Scales are isotropic at scale_fraction of the canonical triangle's mean
    edge length; colors start mid-gray and opacity at 0.5.
    """
    if opts.per_polygon < 1:
        raise ValidationError("per_polygon must be >= 1")
    tri = mesh.triangles
    v = mesh.vertices
    m = mesh.num_triangles
    edges = np.stack([
        np.linalg.norm(v[tri[:, 1]] - v[tri[:, 0]], axis=-1),
        np.linalg.norm(v[tri[:, 2]] - v[tri[:, 1]], axis=-1),
        np.linalg.norm(v[tri[:, 0]] - v[tri[:, 2]], axis=-1),
    ], axis=-1)
    mean_edge = edges.mean(axis=-1)  # (M,)
    base_scale = opts.scale_fraction * mean_edge

    reps = opts.per_polygon
    n = m * reps
    polygon_id = np.repeat(np.arange(m, dtype=np.int64), reps)
    mu = np.zeros((n, 3))
    if reps > 1:
        rng = np.random.default_rng(opts.seed)
        jitter = rng.normal(scale=1.0, size=(n, 2))
        jitter[::reps] = 0.0  # first splat of each polygon stays at the center
        amp = opts.jitter_fraction * np.repeat(mean_edge, reps)
        mu[:, 0] = amp * jitter[:, 0]
        mu[:, 1] = amp * jitter[:, 1]

    rot = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    log_scale = np.log(np.repeat(base_scale, reps))[:, None] * np.ones((1, 3))
    color = np.tile(np.asarray(opts.color, dtype=float), (n, 1))
    opacity = np.full(n, float(opts.opacity))
    return SplatSet(mu_local=mu, rot_local=rot, log_scale=log_scale,
                    color=color, opacity=opacity, polygon_id=polygon_id)


def deform_splats(splats: SplatSet, frames: PolygonFrameSet,
                  prev: WorldGaussians | None = None) -> WorldGaussians:
    """Carry splats into world space through their polygons' frames.

    Splats on a degenerate (flagged) frame inherit their previous world state
    when one is supplied and are flagged in the output either way.
    """
    splats = SplatSet.coerce(splats)
    pid = splats.polygon_id
    if pid.size and pid.max() >= len(frames):
        raise ValidationError(
            f"splat polygon_id {int(pid.max())} has no frame (only {len(frames)} frames)")

    k = frames.k[pid]
    rot_f = frames.rot[pid]
    t = frames.t[pid]

    mu = k[:, None] * quat_rotate(rot_f, splats.mu_local) + t
    rot = quat_canonical(quat_mul(rot_f, splats.rot_local))
    scale = k[:, None] * splats.scale_local
    flagged = frames.degenerate[pid]

    if prev is not None and np.any(flagged):
        mu = np.where(flagged[:, None], prev.mu, mu)
        rot = np.where(flagged[:, None], prev.rot, rot)
        scale = np.where(flagged[:, None], prev.scale, scale)

    return WorldGaussians(mu=mu, rot=rot, scale=scale,
                          color=splats.color.copy(), opacity=splats.opacity.copy(),
                          flagged=flagged)


def deform_backward(splats: SplatSet, frames: PolygonFrameSet,
                    d_mu, d_rot, d_scale):
    """Chain world-space gradients back to splat parameters and frames.

    Returns (d_mu_local, d_rot_local, d_log_scale, frame_grads) where
    frame_grads = (d_k (M,), d_rot_f (M, 4), d_t (M, 3)). The rot_local
    gradient is with respect to the raw (pre-normalization) quaternion entries
    of the unit input, matching how the trainer parameterizes rotations.
    """
    pid = splats.polygon_id
    k = frames.k[pid]
    rot_f = frames.rot[pid]

    d_mu = np.asarray(d_mu, dtype=float)
    d_rot = np.asarray(d_rot, dtype=float)
    d_scale = np.asarray(d_scale, dtype=float)

    # canonical-sign flip applied in forward: gradients flow through the sign
    sign = _canonical_sign(quat_mul(rot_f, splats.rot_local))
    d_rot_signed = d_rot * sign[:, None]

    # mu' = k * R(mu) + T
    rotated = quat_rotate(rot_f, splats.mu_local)
    d_k = np.sum(d_mu * rotated, axis=-1)
    d_rot_f_from_mu, d_mu_local = quat_rotate_backward(rot_f, splats.mu_local,
                                                       k[:, None] * d_mu)
    # r' = R ⊗ r  =>  dR = Rright(r)ᵀ d r', dr = Rleft(R)ᵀ d r'
    right = quat_right_matrix(splats.rot_local)  # (N, 4, 4): right @ R = r'
    d_rot_f_from_rot = np.einsum("nij,ni->nj", right, d_rot_signed)
    from .transforms import quat_left_matrix

    left = quat_left_matrix(rot_f)
    d_rot_local = np.einsum("nij,ni->nj", left, d_rot_signed)

    # s' = k * s, s = exp(log_s)
    scale_local = splats.scale_local
    d_k += np.sum(d_scale * scale_local, axis=-1)
    d_log_scale = d_scale * k[:, None] * scale_local

    m = len(frames)
    d_t = np.zeros((m, 3))
    d_kf = np.zeros(m)
    d_rf = np.zeros((m, 4))
    np.add.at(d_t, pid, d_mu)
    np.add.at(d_kf, pid, d_k)
    np.add.at(d_rf, pid, d_rot_f_from_mu + d_rot_f_from_rot)

    return d_mu_local, d_rot_local, d_log_scale, (d_kf, d_rf, d_t)


def _canonical_sign(q):
    sign = np.zeros(q.shape[:-1])
    for i in range(4):
        comp = q[..., i]
        sign = np.where(sign == 0.0, np.sign(comp), sign)
    return np.where(sign == 0.0, 1.0, sign)
