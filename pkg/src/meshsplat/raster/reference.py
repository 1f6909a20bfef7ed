"""Reference alpha compositor: splat-major numpy, the correctness oracle.

Splats are processed front to back in depth order; each splat updates only
the pixels inside its rect whose falloff exponent stays under the cutoff,
which makes the result independent of any tiling. Per-pixel accumulation
stops once transmittance drops below the termination threshold.
"""

from __future__ import annotations

import numpy as np

from .projection import ALPHA_MAX, Projected2D, TERMINATE_T


class ReferenceState:
    """Forward-pass record needed by the analytic backward pass."""

    __slots__ = ("order", "records", "final_t", "n_contrib", "width", "height",
                 "background", "proj_id", "num_valid")

    def __init__(self, order, records, final_t, n_contrib, width, height,
                 background, proj_id):
        self.order = order
        self.records = records  # per composited splat: (idx, rect, mask, alpha, g)
        self.final_t = final_t
        self.n_contrib = n_contrib
        self.width = width
        self.height = height
        self.background = background
        self.proj_id = proj_id
        self.num_valid = len(order)


def depth_order(proj: Projected2D) -> np.ndarray:
    """Indices of valid splats, front to back; equal depths keep input order."""
    idx = np.nonzero(proj.valid)[0]
    return idx[np.argsort(proj.depth[idx], kind="stable")]


def forward(proj: Projected2D, background, retain_state: bool = True):
    h, w = proj.height, proj.width
    background = np.asarray(background, dtype=float)
    color_acc = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    n_contrib = np.zeros((h, w), dtype=np.int32)
    alive = np.ones((h, w), dtype=bool)

    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5

    order = depth_order(proj)
    records = []
    for i in order:
        x0, x1, y0, y1 = proj.rect[i]
        if x1 < x0 or y1 < y0:
            if retain_state:
                records.append(None)
            continue
        sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        dx = xs[x0:x1 + 1][None, :] - proj.mean2d[i, 0]
        dy = ys[y0:y1 + 1][:, None] - proj.mean2d[i, 1]
        ca, cb, cc = proj.conic[i]
        q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
        mask = (q <= proj.q_cut[i]) & alive[sl]
        if not mask.any():
            if retain_state:
                records.append(None)
            continue
        g = np.where(mask, np.exp(-0.5 * q), 0.0)
        alpha = np.minimum(ALPHA_MAX, proj.opacity[i] * g)
        t_here = np.where(mask, trans[sl], 0.0)
        weight = t_here * alpha
        color_acc[sl] += weight[:, :, None] * proj.color[i]
        trans[sl] = np.where(mask, trans[sl] * (1.0 - alpha), trans[sl])
        n_contrib[sl] += mask
        alive[sl] &= trans[sl] >= TERMINATE_T
        if retain_state:
            records.append(((y0, y1, x0, x1), mask, alpha, g))

    image = color_acc + trans[:, :, None] * background
    alpha_buf = 1.0 - trans
    state = None
    if retain_state:
        state = ReferenceState(order=order, records=records, final_t=trans,
                               n_contrib=n_contrib, width=w, height=h,
                               background=background, proj_id=id(proj))
    return image, alpha_buf, trans, n_contrib, state


def backward(proj: Projected2D, state: ReferenceState, d_image):
    """Analytic gradients of the composited image w.r.t. splat 2D parameters.

    Replays the recorded contributions back to front, reconstructing each
    splat's entry transmittance by dividing the running value by (1 - alpha).
    Alpha values saturated at the clamp contribute no parameter gradient.
    """
    n = len(proj)
    d_color = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_mean2d = np.zeros((n, 2))
    d_cov2d = np.zeros((n, 3))

    d_image = np.asarray(d_image, dtype=float)
    t_after = state.final_t.copy()
    suffix = state.final_t[:, :, None] * state.background[None, None, :]

    ys = np.arange(state.height) + 0.5
    xs = np.arange(state.width) + 0.5

    for i, rec in zip(state.order[::-1], state.records[::-1]):
        if rec is None:
            continue
        (y0, y1, x0, x1), mask, alpha, g = rec
        sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        one_minus = np.where(mask, 1.0 - alpha, 1.0)
        t_i = np.where(mask, t_after[sl] / one_minus, 0.0)

        d_img = d_image[sl]
        d_color[i] = np.einsum("yx,yxc->c", t_i * alpha, d_img)

        # dC/dα = T_i c_i − suffix/(1−α)
        d_alpha = (np.einsum("yxc,c->yx", d_img, proj.color[i]) * t_i
                   - np.einsum("yxc,yxc->yx", d_img, suffix[sl]) / one_minus)
        d_alpha = np.where(mask, d_alpha, 0.0)

        unclamped = mask & (proj.opacity[i] * g < ALPHA_MAX)
        d_opacity[i] = np.sum(np.where(unclamped, d_alpha * g, 0.0))
        d_g = np.where(unclamped, d_alpha * proj.opacity[i], 0.0)

        dx = xs[x0:x1 + 1][None, :] - proj.mean2d[i, 0]
        dy = ys[y0:y1 + 1][:, None] - proj.mean2d[i, 1]
        ca, cb, cc = proj.conic[i]
        u0 = ca * dx + cb * dy
        u1 = cb * dx + cc * dy
        dgg = d_g * g
        d_mean2d[i, 0] = np.sum(dgg * u0)
        d_mean2d[i, 1] = np.sum(dgg * u1)
        d_cov2d[i, 0] = 0.5 * np.sum(dgg * u0 * u0)
        d_cov2d[i, 1] = np.sum(dgg * u0 * u1)
        d_cov2d[i, 2] = 0.5 * np.sum(dgg * u1 * u1)

        suffix[sl] += (t_i * alpha)[:, :, None] * proj.color[i]
        t_after[sl] = np.where(mask, t_i, t_after[sl])

    from .projection import Gradients2D

    return Gradients2D(color=d_color, opacity=d_opacity,
                       mean2d=d_mean2d, cov2d=d_cov2d)
