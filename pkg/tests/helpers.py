"""Shared test fixtures and independent oracles.

Oracles here deliberately avoid the library's own code paths: brute-force
per-pixel compositing, 4x4 homogeneous matrix chains, explicit trig, and
O(n^2) neighbor search.
"""

from __future__ import annotations

import math

import numpy as np

from meshsplat.raster import ALPHA_MAX, TERMINATE_T
from meshsplat.raster.projection import Projected2D
from meshsplat.types import Camera, WorldGaussians


def brute_force_composite(proj: Projected2D, background):
    """Evaluate every valid splat at every pixel with exact sorting."""
    bg = np.asarray(background, dtype=float)
    order = sorted((i for i in range(len(proj)) if proj.valid[i]),
                   key=lambda i: (proj.depth[i], i))
    image = np.zeros((proj.height, proj.width, 3))
    for py in range(proj.height):
        for px in range(proj.width):
            t = 1.0
            c = np.zeros(3)
            for i in order:
                dx = px + 0.5 - proj.mean2d[i, 0]
                dy = py + 0.5 - proj.mean2d[i, 1]
                a_, b_, c_ = proj.conic[i]
                q = a_ * dx * dx + 2 * b_ * dx * dy + c_ * dy * dy
                alpha = min(ALPHA_MAX, proj.opacity[i] * math.exp(-0.5 * q))
                c = c + t * alpha * proj.color[i]
                t = t * (1.0 - alpha)
                if t < TERMINATE_T:
                    break
            image[py, px] = c + t * bg
    return image


def random_world(rng, n, spread=0.6, z_center=4.0, opacity_range=(0.2, 0.55),
                 scale_range=(0.05, 0.18)):
    """World Gaussians in front of a default camera, clamp/termination safe."""
    from meshsplat.transforms import quat_normalize

    mu = np.zeros((n, 3))
    mu[:, 0] = rng.uniform(-spread, spread, n)
    mu[:, 1] = rng.uniform(-spread, spread, n)
    mu[:, 2] = z_center + rng.uniform(-0.8, 0.8, n)
    rot = quat_normalize(rng.normal(size=(n, 4)))
    scale = rng.uniform(*scale_range, size=(n, 3))
    color = rng.uniform(0.05, 0.95, size=(n, 3))
    opacity = rng.uniform(*opacity_range, size=n)
    return WorldGaussians(mu=mu, rot=rot, scale=scale, color=color,
                          opacity=opacity, flagged=np.zeros(n, dtype=bool))


def small_camera(width=8, height=8, f=12.0):
    return Camera(fx=f, fy=f, cx=width / 2, cy=height / 2,
                  rotation=np.array([1.0, 0.0, 0.0, 0.0]),
                  translation=np.zeros(3), width=width, height=height)


def perturbed_proj(proj: Projected2D, field: str, index, eps):
    """Copy of a projection with one packed entry nudged; geometry predicates
    (rect, valid) are frozen so finite differences probe the smooth part."""
    kw = dict(mean2d=proj.mean2d.copy(), cov2d=proj.cov2d.copy(),
              conic=proj.conic.copy(), depth=proj.depth, color=proj.color.copy(),
              opacity=proj.opacity.copy(), rect=proj.rect, q_cut=proj.q_cut,
              valid=proj.valid, width=proj.width, height=proj.height,
              num_skipped=proj.num_skipped)
    if field == "cov2d":
        cov = kw["cov2d"]
        cov[index] += eps
        i = index[0]
        a, b, c = cov[i]
        det = a * c - b * b
        kw["conic"][i] = (c / det, -b / det, a / det)
    else:
        kw[field][index] += eps
    return Projected2D(**kw)


def fd_gradient(loss_fn, proj, field, index, eps=1e-4):
    lp = loss_fn(perturbed_proj(proj, field, index, +eps))
    lm = loss_fn(perturbed_proj(proj, field, index, -eps))
    return (lp - lm) / (2 * eps)


def matrix_chain_fk_oracle(mesh, pose):
    """Joint world positions from explicit 4x4 homogeneous products."""
    from meshsplat.transforms import quat_from_axis_angle, quat_to_matrix
    from meshsplat.types import ROOT_PARENT

    j = mesh.num_joints
    rest = mesh.joint_rest + pose.joint_offsets
    mats = [None] * j
    order = []
    pending = list(range(j))
    while pending:
        rest_pending = []
        for i in pending:
            p = mesh.joint_parents[i]
            if p == ROOT_PARENT or mats[p] is not None:
                r = quat_to_matrix(quat_from_axis_angle(pose.joint_rotations[i]))
                local = np.eye(4)
                if p == ROOT_PARENT:
                    local[:3, :3] = r
                    local[:3, 3] = pose.root_translation
                    mats[i] = local
                else:
                    local[:3, :3] = r
                    local[:3, 3] = rest[i] - r @ rest[i]
                    mats[i] = mats[p] @ local
                order.append(i)
            else:
                rest_pending.append(i)
        pending = rest_pending
    pos = np.zeros((j, 3))
    for i in range(j):
        pos[i] = (mats[i] @ np.append(rest[i], 1.0))[:3]
    return pos, mats


def projection_matrix_oracle(points, cam: Camera):
    """Pinhole projection via an explicit 3x4 homogeneous matrix."""
    from meshsplat.transforms import quat_to_matrix

    k = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1.0]])
    rt = np.hstack([quat_to_matrix(cam.rotation), np.asarray(cam.translation)[:, None]])
    p = k @ rt
    homo = p @ np.hstack([points, np.ones((len(points), 1))]).T
    return (homo[:2] / homo[2]).T


def wrap_oracle(delta):
    """Minimal-magnitude representative of delta mod 2pi; ties pick +pi."""
    cands = [delta + 2 * math.pi * k for k in range(-3, 4)]
    best = min(cands, key=lambda d: (abs(d), -d))
    return best


def knn_bruteforce(world, k):
    """O(n^2) neighbor table plus the regularizer value, library-independent."""
    n = len(world)
    d = np.linalg.norm(world.mu[:, None, :] - world.mu[None, :, :], axis=-1)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k + 1]
    total = 0.0
    groups = [world.color, world.opacity[:, None], world.scale, world.rot]
    for g in groups:
        vals = g[idx]
        mean = vals.mean(axis=1, keepdims=True)
        std = np.sqrt(((vals - mean) ** 2).mean(axis=1))
        total += std.sum(axis=1).mean()
    return total, idx
