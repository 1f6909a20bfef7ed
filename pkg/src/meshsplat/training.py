"""Splat-parameter optimization against target images.

Each iteration samples a frame and a fresh uniform-random background color,
composites the target foreground over it, renders, and backpropagates the
combined image loss analytically through the rasterizer, the projection, and
the polygon-frame deformation into the local splat parameters (position,
rotation, log-scale, color, opacity), which an Adam rule then updates.
Random backgrounds keep off-body splats from hiding in the clear color.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .binding import deform_backward, deform_splats
from .losses import (
    knn_neighborhoods,
    knn_regularizer_backward,
    l2_image,
    l2_image_backward,
    psnr,
    sobel_loss,
    sobel_loss_backward,
    ssim,
    ssim_backward,
)
from .raster import (
    RenderTarget,
    project_gaussians,
    project_gaussians_backward,
    rasterize,
    rasterize_backward,
)
from .render import pose_polygon_frames
from .types import LossWeights, MeshSplatError, PoseParams, SkinnedMesh, SplatSet


class TrainError(MeshSplatError):
    pass


@dataclass(frozen=True)
class TrainOptions:
    iterations: int = 3000
    seed: int = 0
    background: str = "random"  # or "fixed"
    fixed_background: tuple = (0.0, 0.0, 0.0)
    lr_position: float = 1.6e-4  # scaled by scene extent
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    knn_k: int = 3
    knn_refresh: int = 100
    grad_floor: float = 1e-9  # Adam would walk at full lr on float-level noise
    weights: LossWeights = field(default_factory=LossWeights)
    eval_interval: int = 0  # 0 disables periodic held-out metrics
    eval_frames: tuple = ()
    prune_opacity: float = 0.005
    max_nan_skips: int = 10
    backend: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_interval: int = 1000
    unfreeze_pose: bool = False
    pose_interval: int = 10
    lr_pose: float = 1e-4


@dataclass
class _Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, param, grad):
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mh = self.m / (1.0 - self.beta1 ** self.t)
        vh = self.v / (1.0 - self.beta2 ** self.t)
        return param - self.lr * mh / (np.sqrt(vh) + self.eps)


def _logit(p):
    p = np.clip(p, 1e-6, 1.0 - 1e-6)
    return np.log(p / (1.0 - p))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30.0, 30.0)))


def _normalize_rows(q):
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


class TrainableSplats:
    """Mutable optimization view over a SplatSet."""

    def __init__(self, splats: SplatSet):
        self.mu = np.array(splats.mu_local)
        self.rot_raw = np.array(splats.rot_local)
        self.log_scale = np.array(splats.log_scale)
        self.color = np.array(splats.color)
        self.opacity_logit = _logit(np.array(splats.opacity))
        self.polygon_id = np.array(splats.polygon_id)

    def snapshot(self) -> SplatSet:
        return SplatSet(mu_local=self.mu, rot_local=_normalize_rows(self.rot_raw),
                        log_scale=self.log_scale,
                        color=np.clip(self.color, 0.0, 1.0),
                        opacity=_sigmoid(self.opacity_logit),
                        polygon_id=self.polygon_id)


def composite_target(rgb, alpha, background):
    """Premultiplied foreground over a background color."""
    bg = np.asarray(background, dtype=float)
    return rgb + (1.0 - alpha)[:, :, None] * bg


def train(mesh: SkinnedMesh, splats: SplatSet, poses, targets, cams,
          opts: TrainOptions = TrainOptions()):
    """Optimize splat parameters; returns (trained splats, metrics log).

    targets: list of (rgb (H,W,3), alpha (H,W)) premultiplied-foreground
    pairs, one per pose; cams: one Camera per pose (or a single shared one).
    """
    n_frames = len(poses)
    if n_frames < 1:
        raise TrainError("need at least one training frame")
    if not isinstance(cams, (list, tuple)):
        cams = [cams] * n_frames
    rng = np.random.default_rng(opts.seed)
    weights = opts.weights

    frames_per_pose = [pose_polygon_frames(mesh, p) for p in poses]
    canon_frames = pose_polygon_frames(mesh, PoseParams.identity(mesh))

    params = TrainableSplats(splats)
    extent = _scene_extent(mesh)
    opt = {
        "mu": _Adam(opts.lr_position * extent),
        "rot": _Adam(opts.lr_rotation),
        "log_scale": _Adam(opts.lr_log_scale),
        "color": _Adam(opts.lr_color),
        "opacity": _Adam(opts.lr_opacity),
    }
    pose_opt = {}
    poses = list(poses)

    neighborhoods = None
    log = []
    nan_skips = 0
    order = rng.permutation(n_frames)
    cursor = 0

    for it in range(opts.iterations):
        if cursor >= n_frames:
            order = rng.permutation(n_frames)
            cursor = 0
        f = int(order[cursor])
        cursor += 1

        if opts.background == "random":
            bg = rng.random(3)
        else:
            bg = np.asarray(opts.fixed_background, dtype=float)

        current = params.snapshot()
        if weights.w_knn > 0 and (neighborhoods is None or
                                  (opts.knn_refresh and it % opts.knn_refresh == 0)):
            world_canon_probe = deform_splats(current, canon_frames)
            neighborhoods = knn_neighborhoods(world_canon_probe, opts.knn_k)

        world = deform_splats(current, frames_per_pose[f])
        proj = project_gaussians(world, cams[f])
        target_ref = RenderTarget(width=cams[f].width, height=cams[f].height,
                                  background=bg)
        result = rasterize(proj, target_ref, backend=opts.backend, retain_state=True)
        rendered = result.image

        gt_rgb, gt_alpha = targets[f]
        gt = composite_target(np.asarray(gt_rgb, dtype=float),
                              np.asarray(gt_alpha, dtype=float), bg)

        l2 = l2_image(rendered, gt)
        ssim_val = ssim(rendered, gt) if weights.w_ssim > 0 else 1.0
        sobel = sobel_loss(rendered, gt) if weights.w_sobel > 0 else 0.0

        knn_val = 0.0
        knn_grads = None
        world_canon = None
        if weights.w_knn > 0:
            world_canon = deform_splats(current, canon_frames)
            knn_val, knn_grads = knn_regularizer_backward(world_canon, opts.knn_k,
                                                          neighborhoods)
        loss = (l2 + weights.w_ssim * (1.0 - ssim_val)
                + weights.w_sobel * sobel + weights.w_knn * knn_val)
        if not np.isfinite(loss):
            _maybe_checkpoint(params, opt, opts, it, forced=True)
            raise TrainError(f"non-finite loss {loss} at iteration {it}")

        d_image = l2_image_backward(rendered, gt)
        if weights.w_ssim > 0:
            d_image = d_image - weights.w_ssim * ssim_backward(rendered, gt)
        if weights.w_sobel > 0:
            d_image = d_image + weights.w_sobel * sobel_loss_backward(rendered, gt)

        grads2d = rasterize_backward(proj, result.state, d_image)
        d_mu_w, d_rot_w, d_scale_w, d_color, d_opacity = project_gaussians_backward(
            world, cams[f], proj, grads2d)
        d_mu_l, d_rot_l, d_ls, frame_grads = deform_backward(
            current, frames_per_pose[f], d_mu_w, d_rot_w, d_scale_w)

        if knn_grads is not None:
            d_color = d_color + weights.w_knn * knn_grads["color"]
            d_opacity = d_opacity + weights.w_knn * knn_grads["opacity"]
            k_mu, k_rot, k_ls, _ = deform_backward(
                current, canon_frames,
                np.zeros_like(d_mu_w),
                weights.w_knn * knn_grads["rot"],
                weights.w_knn * knn_grads["scale"])
            d_mu_l = d_mu_l + k_mu
            d_rot_l = d_rot_l + k_rot
            d_ls = d_ls + k_ls

        # chain rotation gradients through row normalization of the raw quats
        raw = params.rot_raw
        norm = np.linalg.norm(raw, axis=-1, keepdims=True)
        unit = raw / norm
        d_rot_raw = (d_rot_l - unit * np.sum(d_rot_l * unit, axis=-1, keepdims=True)) / norm
        sig = _sigmoid(params.opacity_logit)
        d_logit = d_opacity * sig * (1.0 - sig)

        grads = {"mu": d_mu_l, "rot": d_rot_raw, "log_scale": d_ls,
                 "color": d_color, "opacity": d_logit}
        if opts.grad_floor > 0:
            grads = {k: np.where(np.abs(g) > opts.grad_floor, g, 0.0)
                     for k, g in grads.items()}
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            nan_skips += 1
            log.append({"iteration": it, "frame": f, "total": float(loss),
                        "skipped": True})
            if nan_skips > opts.max_nan_skips:
                raise TrainError(f"more than {opts.max_nan_skips} NaN-gradient steps")
            continue

        params.mu = opt["mu"].step(params.mu, grads["mu"])
        params.rot_raw = opt["rot"].step(params.rot_raw, grads["rot"])
        params.log_scale = opt["log_scale"].step(params.log_scale, grads["log_scale"])
        params.color = np.clip(opt["color"].step(params.color, grads["color"]), 0.0, 1.0)
        params.opacity_logit = np.clip(
            opt["opacity"].step(params.opacity_logit, grads["opacity"]), -15.0, 15.0)

        if opts.unfreeze_pose and opts.pose_interval and (it + 1) % opts.pose_interval == 0:
            poses[f], frames_per_pose[f] = _pose_step(
                mesh, poses[f], frame_grads, pose_opt.setdefault(
                    f, _Adam(opts.lr_pose)), frames_per_pose[f])

        entry = {"iteration": it, "frame": f, "l2": float(l2),
                 "ssim": float(ssim_val), "sobel": float(sobel),
                 "knn": float(knn_val), "total": float(loss)}
        if opts.eval_interval and (it + 1) % opts.eval_interval == 0 and opts.eval_frames:
            entry["eval"] = _heldout_metrics(mesh, params.snapshot(), poses, targets,
                                             cams, opts)
        log.append(entry)

        if (opts.checkpoint_dir and opts.checkpoint_interval
                and (it + 1) % opts.checkpoint_interval == 0):
            _maybe_checkpoint(params, opt, opts, it)

    trained = params.snapshot()
    keep = trained.opacity >= opts.prune_opacity
    if not np.all(keep):
        trained = SplatSet(mu_local=trained.mu_local[keep],
                           rot_local=trained.rot_local[keep],
                           log_scale=trained.log_scale[keep],
                           color=trained.color[keep],
                           opacity=trained.opacity[keep],
                           polygon_id=trained.polygon_id[keep])
    return trained, log


def _scene_extent(mesh: SkinnedMesh) -> float:
    center = mesh.vertices.mean(axis=0)
    return float(np.linalg.norm(mesh.vertices - center, axis=1).max())


def _heldout_metrics(mesh, splats, poses, targets, cams, opts):
    out = {}
    for f in opts.eval_frames:
        world = deform_splats(splats, pose_polygon_frames(mesh, poses[f]))
        proj = project_gaussians(world, cams[f])
        res = rasterize(proj, RenderTarget(cams[f].width, cams[f].height,
                                           np.zeros(3)),
                        backend=opts.backend, retain_state=False)
        gt = composite_target(np.asarray(targets[f][0], dtype=float),
                              np.asarray(targets[f][1], dtype=float), np.zeros(3))
        out[str(f)] = {"psnr": psnr(res.image, gt), "ssim": ssim(res.image, gt)}
    return out


def _pose_step(mesh, pose, frame_grads, adam, frames_now):
    """First-order pose refinement: analytic dL/d(frames) chained through a
    central-difference Jacobian of the cheap pose->frames map."""
    d_k, d_rot, d_t = frame_grads
    vec = np.concatenate([pose.joint_rotations.ravel(), pose.root_translation])
    eps = 1e-5

    def frames_of(v):
        p = pose.replace(joint_rotations=v[:-3].reshape(-1, 3),
                         root_translation=v[-3:])
        return pose_polygon_frames(mesh, p), p

    grad = np.zeros_like(vec)
    for i in range(vec.size):
        plus = vec.copy()
        plus[i] += eps
        minus = vec.copy()
        minus[i] -= eps
        fp, _ = frames_of(plus)
        fm, _ = frames_of(minus)
        # align quaternion signs to the current frames before differencing
        rp = fp.rot * np.sign(np.sum(fp.rot * frames_now.rot, axis=-1, keepdims=True))
        rm = fm.rot * np.sign(np.sum(fm.rot * frames_now.rot, axis=-1, keepdims=True))
        grad[i] = (np.sum(d_k * (fp.k - fm.k)) + np.sum(d_rot * (rp - rm))
                   + np.sum(d_t * (fp.t - fm.t))) / (2 * eps)

    new_vec = adam.step(vec, grad)
    frames, new_pose = frames_of(new_vec)
    return new_pose, frames


def _maybe_checkpoint(params, opt, opts, iteration, forced=False):
    if not opts.checkpoint_dir:
        return
    import os

    from .assets import save_splats

    os.makedirs(opts.checkpoint_dir, exist_ok=True)
    tag = f"iter{iteration:06d}" + ("_halt" if forced else "")
    save_splats(os.path.join(opts.checkpoint_dir, f"checkpoint_{tag}.splat"),
                params.snapshot())
    state = {}
    for name, a in opt.items():
        if a.m is not None:
            state[f"{name}_m"] = a.m
            state[f"{name}_v"] = a.v
            state[f"{name}_t"] = np.array(a.t)
    np.savez(os.path.join(opts.checkpoint_dir, f"optimizer_{tag}.npz"), **state)


def evaluate(mesh: SkinnedMesh, splats: SplatSet, poses, cams, truths,
             backend: str | None = None):
    """Per-frame and mean PSNR/SSIM plus splat count and render timing.

    truths: list of (rgb, alpha) foreground pairs or plain rgb images; both
    sides are composited over black before comparison.
    """
    if not isinstance(cams, (list, tuple)):
        cams = [cams] * len(poses)
    rows = []
    times = []
    for f, pose in enumerate(poses):
        world = deform_splats(splats, pose_polygon_frames(mesh, pose))
        proj = project_gaussians(world, cams[f])
        t0 = time.perf_counter()
        res = rasterize(proj, RenderTarget(cams[f].width, cams[f].height, np.zeros(3)),
                        backend=backend, retain_state=False)
        times.append(1000.0 * (time.perf_counter() - t0))
        truth = truths[f]
        if isinstance(truth, tuple):
            truth = composite_target(np.asarray(truth[0], dtype=float),
                                     np.asarray(truth[1], dtype=float), np.zeros(3))
        rows.append({"frame": f, "psnr": psnr(res.image, truth),
                     "ssim": ssim(res.image, truth)})
    table = {
        "frames": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
        "splat_count": len(splats),
        "lpips": "unavailable",
        "render_ms_median": float(np.median(times)),
    }
    return table


def format_metrics(table) -> str:
    return json.dumps(table, indent=2, sort_keys=True)
