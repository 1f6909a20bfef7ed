"""Full avatar rendering: pose -> skinning -> polygon frames -> splats -> image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binding import deform_splats
from .body import forward_kinematics, polygon_frames, skin_vertices
from .raster import (
    RenderResult,
    RenderTarget,
    project_gaussians,
    rasterize,
)
from .types import Camera, PolygonFrameSet, PoseParams, SkinnedMesh, SplatSet, WorldGaussians


@dataclass
class AvatarRender:
    image: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    frames: PolygonFrameSet
    world: WorldGaussians
    proj: object  # Projected2D
    result: RenderResult


def pose_polygon_frames(mesh: SkinnedMesh, pose: PoseParams,
                        prev: PolygonFrameSet | None = None) -> PolygonFrameSet:
    posed = skin_vertices(mesh, pose)
    return polygon_frames(mesh, mesh.vertices, posed, prev=prev)


def render_avatar(mesh: SkinnedMesh, pose: PoseParams, splats: SplatSet,
                  cam: Camera, background=(0.0, 0.0, 0.0),
                  backend: str | None = None, tile: int = 16,
                  retain_state: bool = False,
                  prev_frames: PolygonFrameSet | None = None,
                  prev_world: WorldGaussians | None = None) -> AvatarRender:
    frames = pose_polygon_frames(mesh, pose, prev=prev_frames)
    world = deform_splats(SplatSet.coerce(splats), frames, prev=prev_world)
    proj = project_gaussians(world, cam)
    target = RenderTarget(width=cam.width, height=cam.height,
                          background=np.asarray(background, dtype=float))
    result = rasterize(proj, target, tile=tile, backend=backend,
                       retain_state=retain_state)
    return AvatarRender(image=result.image, alpha=result.alpha, frames=frames,
                        world=world, proj=proj, result=result)
