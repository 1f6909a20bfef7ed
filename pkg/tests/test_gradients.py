"""Analytic-vs-finite-difference checks for every differentiable stage."""

import numpy as np
import pytest

from helpers import fd_gradient, random_world, small_camera
from meshsplat.raster import (
    Gradients2D,
    HAVE_KERNELS,
    RenderTarget,
    project_gaussians,
    project_gaussians_backward,
    rasterize,
    rasterize_backward,
)
from meshsplat.types import ContractViolationError, WorldGaussians

BACKENDS = ("compiled", "reference") if HAVE_KERNELS else ("reference",)


def checked_scene(rng, n=10, width=8, height=8):
    """A scene that stays away from the alpha clamp and early termination,
    so central differences probe a smooth function."""
    cam = small_camera(width, height, f=10.0)
    world = random_world(rng, n, spread=0.45, opacity_range=(0.15, 0.5),
                         scale_range=(0.12, 0.35))
    proj = project_gaussians(world, cam)
    assert proj.valid.all()
    res = rasterize(proj, RenderTarget(width, height, np.array([0.3, 0.5, 0.2])),
                    backend="reference")
    # margins: no early termination anywhere, no clamped alphas possible
    assert res.state.final_t.min() > 1e-3
    return cam, world, proj


def weighted_loss(image, w):
    return float(np.sum(image * w))


class TestRasterizeBackward:
    def test_zero_upstream_gives_zero_gradients(self, rng):
        cam, world, proj = checked_scene(rng)
        res = rasterize(proj, RenderTarget(8, 8, np.zeros(3)), backend="reference")
        grads = rasterize_backward(proj, res.state, np.zeros((8, 8, 3)))
        for arr in (grads.color, grads.opacity, grads.mean2d, grads.cov2d):
            assert np.all(arr == 0.0)

    def test_single_splat_closed_form_color_gradient(self, rng):
        cam = small_camera(8, 8, f=10.0)
        world = random_world(rng, 1, spread=0.2, opacity_range=(0.6, 0.9),
                             scale_range=(0.2, 0.4))
        proj = project_gaussians(world, cam)
        bg = np.array([0.2, 0.2, 0.2])
        target = np.full((8, 8, 3), 0.35)
        res = rasterize(proj, RenderTarget(8, 8, bg), backend="reference")
        # L = sum((C - target)^2); dL/dc = sum_px 2 (C - t) * T * alpha
        d_image = 2.0 * (res.image - target)
        grads = rasterize_backward(proj, res.state, d_image)

        ys, xs = np.mgrid[0:8, 0:8]
        dx = xs + 0.5 - proj.mean2d[0, 0]
        dy = ys + 0.5 - proj.mean2d[0, 1]
        a, b, c = proj.conic[0]
        q = a * dx * dx + 2 * b * dx * dy + c * dy * dy
        alpha = np.minimum(0.99, proj.opacity[0] * np.exp(-0.5 * q))
        inside = (xs >= proj.rect[0, 0]) & (xs <= proj.rect[0, 1]) \
            & (ys >= proj.rect[0, 2]) & (ys <= proj.rect[0, 3]) & (q <= proj.q_cut[0])
        alpha = np.where(inside, alpha, 0.0)
        closed = np.einsum("yx,yxc->c", alpha, 2.0 * (res.image - target))
        assert np.allclose(grads.color[0], closed, atol=1e-8)

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_all_parameter_classes_match_fd(self, backend, rng):
        cam, world, proj = checked_scene(rng, n=10)
        bg = np.array([0.25, 0.55, 0.4])
        w = np.asarray(rng.uniform(-1, 1, size=(8, 8, 3)))

        def loss(p):
            res = rasterize(p, RenderTarget(8, 8, bg), backend=backend,
                            retain_state=False)
            return weighted_loss(res.image, w)

        res = rasterize(proj, RenderTarget(8, 8, bg), backend=backend)
        grads = rasterize_backward(proj, res.state, w)

        checks = []
        for i in range(len(proj)):
            checks += [("color", (i, 0), grads.color[i, 0]),
                       ("color", (i, 2), grads.color[i, 2]),
                       ("opacity", (i,), grads.opacity[i]),
                       ("mean2d", (i, 0), grads.mean2d[i, 0]),
                       ("mean2d", (i, 1), grads.mean2d[i, 1]),
                       ("cov2d", (i, 0), grads.cov2d[i, 0]),
                       ("cov2d", (i, 1), grads.cov2d[i, 1]),
                       ("cov2d", (i, 2), grads.cov2d[i, 2])]
        for field, index, analytic in checks:
            fd = fd_gradient(loss, proj, field, index, eps=1e-4)
            assert analytic == pytest.approx(fd, rel=1e-3, abs=1e-7), (field, index)

    def test_clamped_alpha_blocks_parameter_gradients(self, rng):
        cam = small_camera(8, 8, f=10.0)
        world = random_world(rng, 1, spread=0.05, opacity_range=(1.0, 1.0),
                             scale_range=(0.5, 0.6))
        proj = project_gaussians(world, cam)
        res = rasterize(proj, RenderTarget(8, 8, np.zeros(3)), backend="reference")
        grads = rasterize_backward(proj, res.state, np.ones((8, 8, 3)))
        # at the center the alpha is clamped: opacity gradient only collects
        # from unclamped pixels, so it must be finite and well-defined
        assert np.isfinite(grads.opacity[0])
        assert np.isfinite(grads.mean2d[0]).all()

    def test_state_mismatch_rejected(self, rng):
        cam, world, proj = checked_scene(rng, n=3)
        res = rasterize(proj, RenderTarget(8, 8, np.zeros(3)), backend="reference")
        other = project_gaussians(world, cam)
        with pytest.raises(ContractViolationError):
            rasterize_backward(other, res.state, np.zeros((8, 8, 3)))
        with pytest.raises(ContractViolationError):
            rasterize_backward(proj, res.state, np.zeros((4, 4, 3)))

    @pytest.mark.skipif(not HAVE_KERNELS, reason="compiled backend not built")
    def test_backends_agree_on_gradients(self, rng):
        cam, world, proj = checked_scene(rng, n=12)
        w = rng.normal(size=(8, 8, 3))
        out = {}
        for backend in ("compiled", "reference"):
            res = rasterize(proj, RenderTarget(8, 8, np.array([0.1, 0.9, 0.5])),
                            backend=backend)
            out[backend] = rasterize_backward(proj, res.state, w)
        # the compiled backend's polynomial exp differs from libm by <7e-9
        for fieldname in ("color", "opacity", "mean2d", "cov2d"):
            a = getattr(out["compiled"], fieldname)
            b = getattr(out["reference"], fieldname)
            assert np.allclose(a, b, atol=1e-6), fieldname


class TestProjectionBackward:
    @pytest.mark.parametrize("rotated_cam", [False, True])
    def test_world_parameter_gradients_match_fd(self, rng, rotated_cam):
        from meshsplat.transforms import quat_normalize

        if rotated_cam:
            cam_rot = quat_normalize(np.array([0.9, 0.1, -0.2, 0.15]))
            cam_t = np.array([0.2, -0.1, 4.5])
        else:
            cam_rot = np.array([1.0, 0, 0, 0])
            cam_t = np.zeros(3)
        from meshsplat.types import Camera

        cam = Camera(fx=11.0, fy=13.0, cx=4.0, cy=4.0, rotation=cam_rot,
                     translation=cam_t, width=8, height=8)
        world = random_world(rng, 6, spread=0.4,
                             z_center=4.5 if not rotated_cam else 0.0)
        proj = project_gaussians(world, cam)
        if not proj.valid.any():
            pytest.skip("fixture fell outside the frustum")

        w_mean = rng.normal(size=proj.mean2d.shape)
        w_cov = rng.normal(size=proj.cov2d.shape)
        w_col = rng.normal(size=proj.color.shape)
        w_op = rng.normal(size=proj.opacity.shape)
        w_mean[~proj.valid] = 0
        w_cov[~proj.valid] = 0
        w_col[~proj.valid] = 0
        w_op[~proj.valid] = 0

        def loss_of(wg):
            p = project_gaussians(wg, cam)
            return (np.sum(p.mean2d[p.valid] * w_mean[p.valid])
                    + np.sum(p.cov2d[p.valid] * w_cov[p.valid])
                    + np.sum(p.color[p.valid] * w_col[p.valid])
                    + np.sum(p.opacity[p.valid] * w_op[p.valid]))

        grads = Gradients2D(color=w_col, opacity=w_op, mean2d=w_mean, cov2d=w_cov)
        d_mu, d_rot, d_scale, d_col, d_op = project_gaussians_backward(
            world, cam, proj, grads)

        eps = 1e-6
        for i in range(len(world)):
            if not proj.valid[i]:
                assert np.all(d_mu[i] == 0)
                continue
            for c in range(3):
                for arr_name, grad in (("mu", d_mu), ("scale", d_scale)):
                    base = np.array(getattr(world, arr_name))
                    plus = base.copy()
                    plus[i, c] += eps
                    minus = base.copy()
                    minus[i, c] -= eps
                    wp = WorldGaussians(**{**_world_kw(world), arr_name: plus})
                    wm = WorldGaussians(**{**_world_kw(world), arr_name: minus})
                    fd = (loss_of(wp) - loss_of(wm)) / (2 * eps)
                    assert grad[i, c] == pytest.approx(fd, rel=2e-4, abs=1e-6), (arr_name, i, c)
            for c in range(4):
                base = np.array(world.rot)
                plus = base.copy()
                plus[i, c] += eps
                minus = base.copy()
                minus[i, c] -= eps
                fd = (loss_of(WorldGaussians(**{**_world_kw(world), "rot": plus}))
                      - loss_of(WorldGaussians(**{**_world_kw(world), "rot": minus}))) / (2 * eps)
                assert d_rot[i, c] == pytest.approx(fd, rel=2e-4, abs=1e-6), ("rot", i, c)
        assert np.allclose(d_col, w_col) and np.allclose(d_op, w_op)


def _world_kw(world):
    return dict(mu=world.mu, rot=world.rot, scale=world.scale, color=world.color,
                opacity=world.opacity, flagged=world.flagged)


class TestFullChainGradient:
    """Image loss -> rasterizer -> projection -> deformation -> local params."""

    def test_local_parameter_gradients_match_fd(self, rng, sphere_mesh):
        from meshsplat.binding import deform_backward, deform_splats, init_splats
        from meshsplat.body import polygon_frames
        from meshsplat.losses import l2_image, l2_image_backward
        from meshsplat.types import Camera, SplatSet

        mesh = sphere_mesh
        splats = init_splats(mesh)
        sel = rng.choice(len(splats), size=40, replace=False)
        splats = SplatSet(mu_local=splats.mu_local[sel], rot_local=splats.rot_local[sel],
                          log_scale=splats.log_scale[sel], color=rng.uniform(0.2, 0.8, (40, 3)),
                          opacity=rng.uniform(0.3, 0.6, 40), polygon_id=splats.polygon_id[sel])
        frames = polygon_frames(mesh, mesh.vertices, mesh.vertices)
        cam = Camera(fx=30, fy=30, cx=12, cy=12, rotation=[1, 0, 0, 0],
                     translation=[0, 0, 4.0], width=24, height=24)
        target = rng.uniform(0, 1, size=(24, 24, 3))
        bg = np.array([0.5, 0.2, 0.8])

        def forward(s, with_state=False):
            world = deform_splats(s, frames)
            proj = project_gaussians(world, cam)
            res = rasterize(proj, RenderTarget(24, 24, bg), backend="reference",
                            retain_state=with_state)
            return world, proj, res

        world, proj, res = forward(splats, with_state=True)
        loss0 = l2_image(res.image, target)
        d_image = l2_image_backward(res.image, target)
        g2d = rasterize_backward(proj, res.state, d_image)
        d_mu_w, d_rot_w, d_scale_w, d_col, d_op = project_gaussians_backward(
            world, cam, proj, g2d)
        d_mu, d_rot, d_ls, _ = deform_backward(splats, frames, d_mu_w, d_rot_w, d_scale_w)

        eps = 1e-5
        steps = [("mu_local", d_mu, (5, 0)), ("mu_local", d_mu, (12, 2)),
                 ("log_scale", d_ls, (3, 1)), ("color", d_col, (8, 1)),
                 ("color", d_col, (20, 0))]
        for arr_name, grad, idx in steps:
            base = np.array(getattr(splats, arr_name))
            plus = base.copy()
            plus[idx] += eps
            minus = base.copy()
            minus[idx] -= eps
            lp = l2_image(forward(splats.replace(**{arr_name: plus}))[2].image, target)
            lm = l2_image(forward(splats.replace(**{arr_name: minus}))[2].image, target)
            fd = (lp - lm) / (2 * eps)
            assert grad[idx] == pytest.approx(fd, rel=2e-3, abs=1e-9), (arr_name, idx)

        # opacity via its raw channel
        base = np.array(splats.opacity)
        for i in (0, 17):
            plus = base.copy()
            plus[i] += eps
            minus = base.copy()
            minus[i] -= eps
            lp = l2_image(forward(splats.replace(opacity=plus))[2].image, target)
            lm = l2_image(forward(splats.replace(opacity=minus))[2].image, target)
            fd = (lp - lm) / (2 * eps)
            assert d_op[i] == pytest.approx(fd, rel=2e-3, abs=1e-9)
