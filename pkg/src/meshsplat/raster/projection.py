"""Perspective projection of world Gaussians to screen-space ellipses.

The 2D covariance follows the local-affine (EWA) approximation
cov2d = J W Σ Wᵀ Jᵀ with Σ = R diag(s²) Rᵀ, plus an isotropic blur floor that
keeps every footprint at least a fraction of a pixel wide. Culling removes
splats behind the near plane or whose 3σ ellipse misses the viewport.

Pixel (i, j) is sampled at center (i + 0.5, j + 0.5); each splat's integer
pixel rect spans the pixels within RADIUS_SIGMA standard deviations, which is
also the evaluation predicate inside the rasterizer, so tiling never changes
which pixels a splat touches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..transforms import quat_to_matrix, quat_to_matrix_jacobian
from ..types import Camera, ContractViolationError, WorldGaussians

BLUR_FLOOR = 0.3  # px^2, keeps cov2d well-conditioned and antialiased
NEAR_PLANE = 0.01
CULL_SIGMA = 3.0
RADIUS_SIGMA = 6.0
QMAX = RADIUS_SIGMA * RADIUS_SIGMA / 2.0  # falloff exponent cutoff matching the rect
ALPHA_MAX = 0.99
ALPHA_MIN = 1e-6  # contributions below this are dropped (well under tolerances)
TERMINATE_T = 1e-4


@dataclass(frozen=True)
class Projected2D:
    """Screen-space Gaussians (struct of arrays) plus culling results."""

    mean2d: np.ndarray  # (N, 2) pixels
    cov2d: np.ndarray  # (N, 3) packed (a, b, c) of [[a, b], [b, c]]
    conic: np.ndarray  # (N, 3) packed inverse covariance
    depth: np.ndarray  # (N,) camera-space z
    color: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)
    rect: np.ndarray  # (N, 4) int32 inclusive pixel bounds (x0, x1, y0, y1)
    q_cut: np.ndarray  # (N,) falloff-exponent cutoff where alpha hits ALPHA_MIN
    valid: np.ndarray  # (N,) bool; False == culled
    width: int
    height: int
    num_skipped: int  # non-invertible covariances dropped with a diagnostic

    def __len__(self):
        return self.mean2d.shape[0]


@dataclass(frozen=True)
class Gradients2D:
    color: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 3) packed


def project_gaussians(world: WorldGaussians, cam: Camera,
                      near: float = NEAR_PLANE) -> Projected2D:
    n = len(world)
    w_mat = quat_to_matrix(cam.rotation)
    p_cam = world.mu @ w_mat.T + cam.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]

    in_front = z > near
    safe_z = np.where(in_front, z, 1.0)

    mean2d = np.stack([cam.fx * x / safe_z + cam.cx,
                       cam.fy * y / safe_z + cam.cy], axis=-1)

    rot_m = quat_to_matrix(world.rot)
    m3 = rot_m * world.scale[:, None, :]
    sigma3 = m3 @ np.swapaxes(m3, -1, -2)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / safe_z
    jac[:, 0, 2] = -cam.fx * x / (safe_z * safe_z)
    jac[:, 1, 1] = cam.fy / safe_z
    jac[:, 1, 2] = -cam.fy * y / (safe_z * safe_z)
    m = jac @ w_mat
    cov_full = m @ sigma3 @ np.swapaxes(m, -1, -2)
    a = cov_full[:, 0, 0] + BLUR_FLOOR
    b = cov_full[:, 0, 1]
    c = cov_full[:, 1, 1] + BLUR_FLOOR

    det = a * c - b * b
    invertible = det > 1e-12
    safe_det = np.where(invertible, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=-1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    sigma_px = np.sqrt(np.maximum(lam_max, 0.0))

    r_cull = CULL_SIGMA * sigma_px
    on_screen = (
        (mean2d[:, 0] + r_cull >= 0.0)
        & (mean2d[:, 0] - r_cull <= cam.width)
        & (mean2d[:, 1] + r_cull >= 0.0)
        & (mean2d[:, 1] - r_cull <= cam.height)
    )
    valid = in_front & on_screen & invertible
    num_skipped = int(np.count_nonzero(in_front & on_screen & ~invertible))

    opacity = np.array(world.opacity, dtype=float)
    with np.errstate(divide="ignore"):
        q_cut = np.minimum(2.0 * QMAX,
                           2.0 * (np.log(np.maximum(opacity, 0.0))
                                  - np.log(ALPHA_MIN)))
    q_cut = np.maximum(q_cut, -1.0)  # fully transparent -> empty predicate

    # bounding box of the retained falloff region: q <= q_cut implies the
    # point lies within sqrt(q_cut * lam_max) of the center
    r_px = np.sqrt(np.maximum(q_cut, 0.0) * np.maximum(lam_max, 0.0))
    rect = np.zeros((n, 4), dtype=np.int32)
    rect[:, 0] = np.maximum(np.ceil(mean2d[:, 0] - r_px - 0.5), 0)
    rect[:, 1] = np.minimum(np.floor(mean2d[:, 0] + r_px - 0.5), cam.width - 1)
    rect[:, 2] = np.maximum(np.ceil(mean2d[:, 1] - r_px - 0.5), 0)
    rect[:, 3] = np.minimum(np.floor(mean2d[:, 1] + r_px - 0.5), cam.height - 1)
    empty = (rect[:, 0] > rect[:, 1]) | (rect[:, 2] > rect[:, 3]) | (q_cut <= 0)
    rect[empty] = np.array([0, -1, 0, -1], dtype=np.int32)

    return Projected2D(
        mean2d=mean2d,
        cov2d=np.stack([a, b, c], axis=-1),
        conic=conic,
        depth=z,
        color=np.array(world.color, dtype=float),
        opacity=opacity,
        rect=rect,
        q_cut=q_cut,
        valid=valid,
        width=cam.width,
        height=cam.height,
        num_skipped=num_skipped,
    )


def project_gaussians_backward(world: WorldGaussians, cam: Camera,
                               proj: Projected2D, grads: Gradients2D):
    """Chain screen-space gradients to world-space Gaussian parameters.

    Returns (d_mu, d_rot, d_scale, d_color, d_opacity); d_rot is with respect
    to the raw quaternion entries (callers project onto the unit sphere).
    Culled splats receive zero gradients. Includes the dependence of the
    projection Jacobian on the splat center.
    """
    if len(world) != len(proj):
        raise ContractViolationError("projection state does not match the world splats")
    n = len(world)
    v = proj.valid

    d_mu = np.zeros((n, 3))
    d_rot = np.zeros((n, 4))
    d_scale = np.zeros((n, 3))
    d_color = np.where(v[:, None], grads.color, 0.0)
    d_opacity = np.where(v, grads.opacity, 0.0)
    if not np.any(v):
        return d_mu, d_rot, d_scale, d_color, d_opacity

    w_mat = quat_to_matrix(cam.rotation)
    mu = world.mu[v]
    p_cam = mu @ w_mat.T + cam.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]

    rot_m = quat_to_matrix(world.rot[v])
    scale = world.scale[v]
    m3 = rot_m * scale[:, None, :]
    sigma3 = m3 @ np.swapaxes(m3, -1, -2)

    jac = np.zeros((mu.shape[0], 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / (z * z)
    m = jac @ w_mat

    dcov = grads.cov2d[v]
    d_sigma_m = np.empty((mu.shape[0], 2, 2))
    d_sigma_m[:, 0, 0] = dcov[:, 0]
    d_sigma_m[:, 0, 1] = 0.5 * dcov[:, 1]
    d_sigma_m[:, 1, 0] = 0.5 * dcov[:, 1]
    d_sigma_m[:, 1, 1] = dcov[:, 2]

    d_m = 2.0 * d_sigma_m @ m @ sigma3
    d_v3 = np.swapaxes(m, -1, -2) @ d_sigma_m @ m
    d_jac = d_m @ w_mat.T

    dmean = grads.mean2d[v]
    d_cam = np.zeros_like(p_cam)
    d_cam[:, 0] = dmean[:, 0] * cam.fx / z
    d_cam[:, 1] = dmean[:, 1] * cam.fy / z
    d_cam[:, 2] = (-dmean[:, 0] * cam.fx * x - dmean[:, 1] * cam.fy * y) / (z * z)

    fz2 = 1.0 / (z * z)
    d_cam[:, 0] += d_jac[:, 0, 2] * (-cam.fx * fz2)
    d_cam[:, 1] += d_jac[:, 1, 2] * (-cam.fy * fz2)
    d_cam[:, 2] += (
        d_jac[:, 0, 0] * (-cam.fx * fz2)
        + d_jac[:, 1, 1] * (-cam.fy * fz2)
        + d_jac[:, 0, 2] * (2.0 * cam.fx * x / (z * z * z))
        + d_jac[:, 1, 2] * (2.0 * cam.fy * y / (z * z * z))
    )
    d_mu[v] = d_cam @ w_mat

    d_m3 = 2.0 * d_v3 @ m3
    d_scale[v] = np.einsum("nik,nik->nk", d_m3, rot_m)
    d_rot_m = d_m3 * scale[:, None, :]
    jq = quat_to_matrix_jacobian(world.rot[v])
    d_rot[v] = np.einsum("nqij,nij->nq", jq, d_rot_m)

    return d_mu, d_rot, d_scale, d_color, d_opacity
