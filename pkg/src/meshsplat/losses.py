"""Image losses, splat regularizers, fitting losses, and quality metrics.

The splat-training objective combines pixel MSE, structural similarity,
Sobel gradient-magnitude matching, and a k-nearest-neighbor property
smoothness term; a perceptual (LPIPS) slot exists in the weights but is
reported as unavailable since no pretrained network ships here. Every term
used by the trainer has an analytic backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from scipy.spatial import cKDTree

from .body import face_visibility, forward_kinematics, project_joints, skin_vertices
from .types import (
    Camera,
    FrameKeypoints,
    LossWeights,
    PoseParams,
    SkinnedMesh,
    ValidationError,
    WorldGaussians,
)

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 100.0
SOBEL_EPS = 1e-24

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def _channels(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        return a[:, :, None]
    return a


def _check_same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValidationError(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")


def l2_image(a, b) -> float:
    _check_same_shape(a, b)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.mean((a - b) ** 2))


def l2_image_backward(a, b) -> np.ndarray:
    _check_same_shape(a, b)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return 2.0 * (a - b) / a.size


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def _gauss1d(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _win_valid(x, g1d):
    """Separable window correlation, valid region only."""
    r = (g1d.size - 1) // 2
    out = correlate1d(x, g1d, axis=0, mode="constant")
    out = correlate1d(out, g1d, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _win_full(field, g1d, shape):
    """Scatter a valid-region field back through the (symmetric) window."""
    r = (g1d.size - 1) // 2
    emb = np.zeros(shape)
    emb[r:r + field.shape[0], r:r + field.shape[1]] = field
    out = correlate1d(emb, g1d, axis=0, mode="constant")
    return correlate1d(out, g1d, axis=1, mode="constant")


def _ssim_fields(a, b, g1d):
    mu1 = _win_valid(a, g1d)
    mu2 = _win_valid(b, g1d)
    s11 = _win_valid(a * a, g1d) - mu1 * mu1
    s22 = _win_valid(b * b, g1d) - mu2 * mu2
    s12 = _win_valid(a * b, g1d) - mu1 * mu2
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    a1 = 2.0 * mu1 * mu2 + c1
    a2 = 2.0 * s12 + c2
    b1 = mu1 * mu1 + mu2 * mu2 + c1
    b2 = s11 + s22 + c2
    return mu1, mu2, a1, a2, b1, b2


def ssim(a, b) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma 1.5, L = 1 (float images)."""
    _check_same_shape(a, b)
    a = _channels(a)
    b = _channels(b)
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValidationError(f"images must be at least {SSIM_WIN}x{SSIM_WIN} for SSIM")
    g1d = _gauss1d()
    vals = []
    for c in range(a.shape[2]):
        _, _, a1, a2, b1, b2 = _ssim_fields(a[:, :, c], b[:, :, c], g1d)
        vals.append(np.mean(a1 * a2 / (b1 * b2)))
    return float(np.mean(vals))


def ssim_backward(a, b) -> np.ndarray:
    """d(mean SSIM)/da with the same window configuration as ssim()."""
    _check_same_shape(a, b)
    a3 = _channels(a)
    b3 = _channels(b)
    g1d = _gauss1d()
    out = np.zeros_like(a3)
    npos = (a3.shape[0] - SSIM_WIN + 1) * (a3.shape[1] - SSIM_WIN + 1)
    shape = a3.shape[:2]
    for c in range(a3.shape[2]):
        x = a3[:, :, c]
        y = b3[:, :, c]
        mu1, mu2, a1, a2, b1, b2 = _ssim_fields(x, y, g1d)
        denom = b1 * b2
        f1 = 2.0 * a1 / denom  # coefficient of (y_p - mu2)
        f2 = -2.0 * a1 * a2 / (denom * b2)  # coefficient of (x_p - mu1)
        f0 = 2.0 * mu2 * a2 / denom - 2.0 * mu1 * a1 * a2 / (denom * b1)
        base = f0 - f1 * mu2 - f2 * mu1
        grad = (_win_full(base, g1d, shape)
                + y * _win_full(f1, g1d, shape)
                + x * _win_full(f2, g1d, shape))
        out[:, :, c] = grad / (npos * a3.shape[2])
    return out.reshape(np.shape(a))


def _pad_replicate(a):
    return np.pad(a, ((1, 1), (1, 1)), mode="edge")


def _pad_replicate_adjoint(g):
    """Adjoint of 1-pixel replicate padding: fold border rows/columns inward."""
    out = g[1:-1, 1:-1].copy()
    out[0, :] += g[0, 1:-1]
    out[-1, :] += g[-1, 1:-1]
    out[:, 0] += g[1:-1, 0]
    out[:, -1] += g[1:-1, -1]
    out[0, 0] += g[0, 0]
    out[0, -1] += g[0, -1]
    out[-1, 0] += g[-1, 0]
    out[-1, -1] += g[-1, -1]
    return out


SOBEL_SMOOTH = np.array([1.0, 2.0, 1.0])
SOBEL_DIFF = np.array([-1.0, 0.0, 1.0])


def _conv_full_1d(x, w, axis):
    """Full 1-D convolution along an axis via an embedded correlation."""
    k = w.size
    m = k // 2
    shape = list(x.shape)
    shape[axis] += k - 1
    emb = np.zeros(shape)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(k - 1 - m, k - 1 - m + x.shape[axis])
    emb[tuple(sl)] = x
    return correlate1d(emb, w[::-1], axis=axis, mode="constant")


def _gradient_magnitude(a):
    """Per-channel Sobel gradient magnitude with replicate borders.

    Sequential 1-D passes with nearest-mode borders equal the 2-D replicate
    pad because replicate padding is separable.
    """
    a = _channels(a)
    gx = np.empty_like(a)
    gy = np.empty_like(a)
    for c in range(a.shape[2]):
        sm0 = correlate1d(a[:, :, c], SOBEL_SMOOTH, axis=0, mode="nearest")
        gx[:, :, c] = correlate1d(sm0, SOBEL_DIFF, axis=1, mode="nearest")
        sm1 = correlate1d(a[:, :, c], SOBEL_SMOOTH, axis=1, mode="nearest")
        gy[:, :, c] = correlate1d(sm1, SOBEL_DIFF, axis=0, mode="nearest")
    mag = np.sqrt(gx * gx + gy * gy + SOBEL_EPS)
    return mag, gx, gy


def sobel_loss(a, b) -> float:
    """MSE between Sobel gradient-magnitude maps of the two images."""
    _check_same_shape(a, b)
    mag_a, _, _ = _gradient_magnitude(a)
    mag_b, _, _ = _gradient_magnitude(b)
    return float(np.mean((mag_a - mag_b) ** 2))


def sobel_loss_backward(a, b) -> np.ndarray:
    _check_same_shape(a, b)
    mag_a, gx, gy = _gradient_magnitude(a)
    mag_b, _, _ = _gradient_magnitude(b)
    d_mag = 2.0 * (mag_a - mag_b) / mag_a.size
    d_gx = d_mag * gx / mag_a
    d_gy = d_mag * gy / mag_a
    out = np.zeros_like(_channels(a))
    for c in range(out.shape[2]):
        acc = (_conv_full_1d(_conv_full_1d(d_gx[:, :, c], SOBEL_SMOOTH, 0),
                             SOBEL_DIFF, 1)
               + _conv_full_1d(_conv_full_1d(d_gy[:, :, c], SOBEL_DIFF, 0),
                               SOBEL_SMOOTH, 1))
        out[:, :, c] = _pad_replicate_adjoint(acc)
    return out.reshape(np.shape(a))


PROPERTY_GROUPS = ("color", "opacity", "scale", "rot")
STD_FLOOR = 1e-8  # below this a neighborhood counts as converged (no gradient)


def knn_neighborhoods(world: WorldGaussians, k: int) -> np.ndarray:
    """Self-plus-k-nearest index table by world center, shape (N, k+1)."""
    n = len(world)
    if n < k + 1:
        raise ValidationError(f"need at least {k + 1} splats for k={k} neighborhoods")
    tree = cKDTree(world.mu)
    _, idx = tree.query(world.mu, k=k + 1)
    return np.asarray(idx, dtype=np.int64)


def _group_values(world: WorldGaussians, group: str) -> np.ndarray:
    if group == "opacity":
        return world.opacity[:, None]
    return getattr(world, group)


def knn_regularizer(world: WorldGaussians, k: int,
                    neighborhoods: np.ndarray | None = None) -> float:
    """Mean over splats of summed per-component property std within each
    splat's neighborhood (self plus k nearest canonical-pose centers)."""
    idx = knn_neighborhoods(world, k) if neighborhoods is None else neighborhoods
    total = 0.0
    for group in PROPERTY_GROUPS:
        vals = _group_values(world, group)[idx]  # (N, k+1, d)
        std = np.sqrt(np.maximum(vals.var(axis=1), 0.0))  # population std
        total += float(std.sum(axis=1).mean())
    return total


def knn_regularizer_backward(world: WorldGaussians, k: int,
                             neighborhoods: np.ndarray | None = None):
    """Value plus gradients w.r.t. (color, opacity, scale, rot) world arrays."""
    idx = knn_neighborhoods(world, k) if neighborhoods is None else neighborhoods
    n = len(world)
    value = 0.0
    grads = {}
    for group in PROPERTY_GROUPS:
        full = _group_values(world, group)
        vals = full[idx]  # (N, k+1, d)
        mu = vals.mean(axis=1, keepdims=True)
        centered = vals - mu
        std = np.sqrt(np.maximum((centered ** 2).mean(axis=1), 0.0))  # (N, d)
        value += float(std.sum(axis=1).mean())
        # the sqrt makes d(std) scale-invariant, so float-level spread would
        # otherwise emit O(1) gradients; converged neighborhoods stay still
        safe = np.where(std > STD_FLOOR, std, 1.0)
        d_vals = np.where(std[:, None, :] > STD_FLOOR,
                          centered / (idx.shape[1] * safe[:, None, :]) / n, 0.0)
        g = np.zeros_like(full)
        np.add.at(g, idx, d_vals)
        grads[group] = g[:, 0] if group == "opacity" else g
    return value, grads


def psnr(a, b) -> float:
    """10·log10(1/MSE) for float images in [0, 1], capped at 100 dB."""
    mse = l2_image(a, b)
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def total_gaussian_loss(rendered, truth, world: WorldGaussians,
                        weights: LossWeights = LossWeights(), knn_k: int = 3,
                        neighborhoods: np.ndarray | None = None):
    """Splat-training objective; returns (value, term breakdown).

    The perceptual slot is carried in the weights but excluded from the value
    (needs a pretrained network); the breakdown reports it as unavailable.
    """
    l2 = l2_image(rendered, truth)
    ssim_val = ssim(rendered, truth) if weights.w_ssim > 0 else 1.0
    sobel = sobel_loss(rendered, truth) if weights.w_sobel > 0 else 0.0
    knn = (knn_regularizer(world, knn_k, neighborhoods)
           if weights.w_knn > 0 else 0.0)
    total = (l2 + weights.w_ssim * (1.0 - ssim_val)
             + weights.w_sobel * sobel + weights.w_knn * knn)
    breakdown = {
        "l2": l2,
        "ssim": ssim_val,
        "ssim_loss": 1.0 - ssim_val,
        "sobel": sobel,
        "knn": knn,
        "lpips": "unavailable",
        "total": total,
    }
    return total, breakdown


def _face_patch_structure(mesh: SkinnedMesh):
    """Neighbor lists and edge set of the face patch's interior triangles."""
    patch = mesh.face_patch_idx
    in_patch = {int(v): i for i, v in enumerate(patch)}
    neighbors = [set() for _ in patch]
    edges = set()
    for tri in mesh.triangles:
        if all(int(v) in in_patch for v in tri):
            loc = [in_patch[int(v)] for v in tri]
            for a in range(3):
                i, j = loc[a], loc[(a + 1) % 3]
                neighbors[i].add(j)
                neighbors[j].add(i)
                edges.add((min(i, j), max(i, j)))
    return [sorted(s) for s in neighbors], sorted(edges)


def _uniform_laplacian(points, neighbors):
    delta = np.zeros_like(points)
    for i, nbrs in enumerate(neighbors):
        if nbrs:
            delta[i] = points[i] - points[nbrs].mean(axis=0)
    return delta


def fitting_loss(pose: PoseParams, detected: FrameKeypoints,
                 init_pose: PoseParams, face_target, mesh: SkinnedMesh,
                 cam: Camera, weights: LossWeights = LossWeights()):
    """Articulated-pose objective; returns (value, term breakdown).

    Keypoint residuals are confidence-weighted mean L1 distances between
    detected points and projected model joints (synthetic points count half;
    joints behind the camera are excluded). The face block runs only when the
    face passes the visibility test and a target patch is supplied.
    """
    transforms = forward_kinematics(mesh, pose)
    uv, valid = project_joints(transforms, cam)

    w_sum = 0.0
    acc = 0.0
    for ki, name in enumerate(detected.layout):
        joint_name = mesh.keypoint_map.get(name)
        if joint_name is None:
            continue
        j = mesh.joint_index(joint_name)
        if not valid[j]:
            continue
        w = float(detected.confidence[ki])
        if detected.synthetic[ki]:
            w *= 0.5
        if w <= 0.0:
            continue
        r = uv[j] - detected.xy[ki]
        acc += w * (abs(r[0]) + abs(r[1]))
        w_sum += w
    l_kpt = acc / w_sum if w_sum > 0 else 0.0

    def flat(p: PoseParams):
        return np.concatenate([p.joint_rotations.ravel(), p.root_translation,
                               p.shape, p.joint_offsets.ravel(), p.expression])

    pa, pb = flat(pose), flat(init_pose)
    if pa.shape != pb.shape:
        raise ValidationError("pose and init_pose have different parameter layouts")
    l_init = float(np.mean(np.abs(pa - pb)))

    posed = None
    visible = False
    if mesh.face_center_idx.size and mesh.eye_midpoint_idx.size:
        posed = skin_vertices(mesh, pose, transforms)
        visible = face_visibility(posed, mesh.face_center_idx,
                                  mesh.eye_midpoint_idx, cam)

    l_vertex = l_lap = l_edge = 0.0
    face_active = visible and face_target is not None and mesh.face_patch_idx.size > 0
    if face_active:
        target = np.asarray(face_target, dtype=float)
        if target.shape != (mesh.face_patch_idx.size, 3):
            raise ValidationError(
                f"face target must be index-aligned with the patch: expected "
                f"{(mesh.face_patch_idx.size, 3)}, got {target.shape}")
        model_pts = posed[mesh.face_patch_idx]
        neighbors, edges = _face_patch_structure(mesh)
        l_vertex = float(np.mean(np.abs(model_pts - target)))
        dm = _uniform_laplacian(model_pts, neighbors)
        dt = _uniform_laplacian(target, neighbors)
        l_lap = float(np.mean((dm - dt) ** 2))
        if edges:
            e = np.asarray(edges)
            len_m = np.linalg.norm(model_pts[e[:, 0]] - model_pts[e[:, 1]], axis=1)
            len_t = np.linalg.norm(target[e[:, 0]] - target[e[:, 1]], axis=1)
            l_edge = float(np.mean(np.abs(len_m - len_t)))
    l_face = weights.w_vertex * l_vertex + weights.w_lap * l_lap + weights.w_edge * l_edge

    l_shape = float(np.sum(pose.shape ** 2))
    l_jo = float(np.sum(pose.joint_offsets ** 2))
    l_sym = 0.0
    if weights.w_sym > 0:
        if not mesh.left_right_map:
            raise ValidationError(
                "mesh has no left/right correspondence map; set w_sym=0 to disable L_sym")
        mirror = np.array([-1.0, 1.0, 1.0])
        diffs = []
        for a, b in mesh.left_right_map.items():
            ja, jb = mesh.joint_index(a), mesh.joint_index(b)
            diffs.append(pose.joint_offsets[ja] - mirror * pose.joint_offsets[jb])
        if diffs:
            l_sym = float(np.mean(np.sum(np.square(diffs), axis=1)))
    l_reg = weights.w_shape * l_shape + weights.w_jo * l_jo + weights.w_sym * l_sym

    total = l_kpt + weights.w_init * l_init + l_face + l_reg
    breakdown = {
        "kpt": l_kpt,
        "init": l_init,
        "face": l_face,
        "face_vertex": l_vertex,
        "face_lap": l_lap,
        "face_edge": l_edge,
        "face_visible": visible,
        "shape": l_shape,
        "joint_offsets": l_jo,
        "sym": l_sym,
        "reg": l_reg,
        "total": total,
    }
    return total, breakdown
