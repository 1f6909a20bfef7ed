"""Depth-sorted alpha-compositing rasterizer with two interchangeable backends.

The compiled (Cython, OpenMP tile-parallel) backend is selected automatically
when its extension imported; the pure-numpy reference backend is both the
fallback and the correctness oracle. Force a choice with
MESHSPLAT_BACKEND=compiled|reference or the backend= argument.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..types import ContractViolationError, ValidationError
from . import reference
from .projection import (
    ALPHA_MAX,
    BLUR_FLOOR,
    CULL_SIGMA,
    Gradients2D,
    NEAR_PLANE,
    Projected2D,
    QMAX,
    RADIUS_SIGMA,
    TERMINATE_T,
    project_gaussians,
    project_gaussians_backward,
)

try:  # compiled kernels are optional; the reference backend always works
    from . import _kernels

    HAVE_KERNELS = True
except ImportError:  # pragma: no cover - depends on the build environment
    _kernels = None
    HAVE_KERNELS = False

DEFAULT_TILE = 16

__all__ = [
    "ALPHA_MAX", "BLUR_FLOOR", "CULL_SIGMA", "NEAR_PLANE", "QMAX",
    "RADIUS_SIGMA", "TERMINATE_T", "DEFAULT_TILE", "HAVE_KERNELS",
    "Projected2D", "Gradients2D", "RenderTarget", "RenderResult",
    "project_gaussians", "project_gaussians_backward",
    "available_backends", "resolve_backend", "rasterize", "rasterize_backward",
]


@dataclass
class RenderTarget:
    """Output raster: dimensions, background color, and result buffers."""

    width: int
    height: int
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    color: np.ndarray | None = None  # (H, W, 3) after rasterize
    alpha: np.ndarray | None = None  # (H, W) after rasterize

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=float).reshape(3)
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("render target dimensions must be positive")


@dataclass
class RenderState:
    """Opaque forward-pass record consumed by rasterize_backward."""

    backend: str
    proj_id: int
    width: int
    height: int
    background: np.ndarray
    final_t: np.ndarray
    n_contrib: np.ndarray
    data: object  # backend-specific


@dataclass
class RenderResult:
    target: RenderTarget
    state: RenderState | None

    @property
    def image(self):
        return self.target.color

    @property
    def alpha(self):
        return self.target.alpha


def available_backends():
    return ("compiled", "reference") if HAVE_KERNELS else ("reference",)


def resolve_backend(backend: str | None = None) -> str:
    choice = backend or os.environ.get("MESHSPLAT_BACKEND", "auto")
    if choice == "auto":
        return "compiled" if HAVE_KERNELS else "reference"
    if choice not in ("compiled", "reference"):
        raise ValidationError(f"unknown rasterizer backend {choice!r}")
    if choice == "compiled" and not HAVE_KERNELS:
        raise ValidationError("compiled backend requested but the extension is not built")
    return choice


_CPU_COUNT = max(1, os.cpu_count() or 1)


def _num_threads(requested=None) -> int:
    if requested:
        return int(requested)
    env = os.environ.get("MESHSPLAT_THREADS")
    if env:
        return max(1, int(env))
    return _CPU_COUNT


def rasterize(proj: Projected2D, target: RenderTarget, tile: int = DEFAULT_TILE,
              backend: str | None = None, retain_state: bool = True,
              num_threads: int | None = None) -> RenderResult:
    """Composite projected splats front-to-back over the target background."""
    if proj.width != target.width or proj.height != target.height:
        raise ContractViolationError(
            f"projection is {proj.width}x{proj.height} but target is "
            f"{target.width}x{target.height}")
    chosen = resolve_backend(backend)

    if chosen == "reference":
        image, alpha_buf, final_t, n_contrib, ref_state = reference.forward(
            proj, target.background, retain_state=retain_state)
        state = None
        if retain_state:
            state = RenderState(backend="reference", proj_id=id(proj),
                                width=target.width, height=target.height,
                                background=np.asarray(target.background, dtype=float),
                                final_t=final_t, n_contrib=n_contrib, data=ref_state)
    else:
        order = reference.depth_order(proj)
        mean2d = np.ascontiguousarray(proj.mean2d[order])
        conic = np.ascontiguousarray(proj.conic[order])
        opacity = np.ascontiguousarray(proj.opacity[order])
        color = np.ascontiguousarray(proj.color[order])
        rect = np.ascontiguousarray(proj.rect[order], dtype=np.int32)
        q_cut = np.ascontiguousarray(proj.q_cut[order])
        offsets, pairs = _kernels.build_tile_lists(rect, target.width, target.height, tile)
        bg = np.ascontiguousarray(target.background, dtype=float)
        image, final_t, n_contrib = _kernels.forward(
            mean2d, conic, opacity, color, rect, q_cut, offsets, pairs,
            target.width, target.height, tile, bg,
            ALPHA_MAX, TERMINATE_T, _num_threads(num_threads))
        alpha_buf = 1.0 - final_t
        state = None
        if retain_state:
            state = RenderState(backend="compiled", proj_id=id(proj),
                                width=target.width, height=target.height,
                                background=bg, final_t=final_t, n_contrib=n_contrib,
                                data=(order, mean2d, conic, opacity, color, rect,
                                      q_cut, offsets, pairs, tile))

    target.color = image
    target.alpha = alpha_buf
    return RenderResult(target=target, state=state)


def rasterize_backward(proj: Projected2D, state: RenderState, d_image,
                       num_threads: int | None = None) -> Gradients2D:
    """Analytic gradients of the composited image w.r.t. 2D splat parameters."""
    if state is None:
        raise ContractViolationError("rasterize was called with retain_state=False")
    if state.proj_id != id(proj):
        raise ContractViolationError("forward state does not match this projection")
    d_image = np.asarray(d_image, dtype=float)
    if d_image.shape != (state.height, state.width, 3):
        raise ContractViolationError(
            f"d_image shape {d_image.shape} does not match the forward pass")

    if state.backend == "reference":
        return reference.backward(proj, state.data, d_image)

    (order, mean2d, conic, opacity, color, rect, q_cut, offsets, pairs,
     tile) = state.data
    grads_sorted = _kernels.backward(
        mean2d, conic, opacity, color, rect, q_cut, offsets, pairs,
        state.width, state.height, tile, state.background,
        ALPHA_MAX, state.final_t, state.n_contrib,
        np.ascontiguousarray(d_image), _num_threads(num_threads))

    n = len(proj)
    d_color = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_mean2d = np.zeros((n, 2))
    d_cov2d = np.zeros((n, 3))
    d_color[order] = grads_sorted[:, 0:3]
    d_opacity[order] = grads_sorted[:, 3]
    d_mean2d[order] = grads_sorted[:, 4:6]
    d_cov2d[order] = grads_sorted[:, 6:9]
    return Gradients2D(color=d_color, opacity=d_opacity,
                       mean2d=d_mean2d, cov2d=d_cov2d)
