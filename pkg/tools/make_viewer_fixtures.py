#!/usr/bin/env python3
"""Regenerates the web viewer's test fixtures.

Writes a small bundle (mini biped, colored splats), three golden
pose/camera pairs rendered by the primary rasterizer as raw float32 images,
and a goldens.json descriptor, into frontend/tests/fixtures/.
"""

import json
import os
import sys

import numpy as np

from meshsplat import assets
from meshsplat.binding import init_splats
from meshsplat.render import render_avatar
from meshsplat.synthetic import apose, mini_biped
from meshsplat.types import Camera, PoseParams

SIZE = 128
BACKGROUND = (0.12, 0.10, 0.18)


def novel_pose(mesh):
    rot = np.zeros((mesh.num_joints, 3))
    rot[mesh.joint_index("l_shoulder")] = [0.0, 0.0, -0.9]
    rot[mesh.joint_index("l_elbow")] = [0.0, 0.0, -1.1]
    rot[mesh.joint_index("r_shoulder")] = [0.0, 0.0, 0.5]
    rot[mesh.joint_index("neck")] = [0.0, 0.5, 0.0]
    return PoseParams.identity(mesh).replace(joint_rotations=rot)


def camera(angle_deg, height=1.2, dist=2.6):
    ang = np.radians(angle_deg)
    # orbit around the biped (centered near x=0, y~1.2), looking inward
    from meshsplat.transforms import matrix_to_quat

    pos = np.array([dist * np.sin(ang), height, dist * np.cos(ang)])
    target = np.array([0.0, 1.1, 0.0])
    fwd = target - pos
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = matrix_to_quat(np.stack([right, down, fwd]))
    from meshsplat.transforms import quat_rotate

    trans = -quat_rotate(rot, pos)
    return Camera(fx=1.4 * SIZE, fy=1.4 * SIZE, cx=SIZE / 2, cy=SIZE / 2,
                  rotation=rot, translation=trans, width=SIZE, height=SIZE)


def main(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    mesh = mini_biped()
    splats = init_splats(mesh)
    rng = np.random.default_rng(2024)
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    color = np.stack([
        0.35 + 0.5 * (centroids[:, 1] - centroids[:, 1].min())
        / np.ptp(centroids[:, 1]),
        0.25 + 0.4 * (centroids[:, 0] - centroids[:, 0].min())
        / np.ptp(centroids[:, 0]),
        np.full(len(splats), 0.55),
    ], axis=-1)
    splats = splats.replace(color=np.clip(color + rng.normal(scale=0.03, size=color.shape), 0, 1),
                            opacity=rng.uniform(0.75, 0.95, len(splats)))

    goldens = {
        "tpose_front": (PoseParams.identity(mesh), camera(0.0)),
        "apose_three_quarter": (apose(mesh), camera(35.0)),
        "novel_side": (novel_pose(mesh), camera(80.0)),
    }

    bundle_dir = os.path.join(out_dir, "bundle")
    assets.export_viewer_bundle(
        bundle_dir, mesh, splats,
        clips={"wave": [PoseParams.identity(mesh), apose(mesh), novel_pose(mesh)]},
        presets={"tpose": PoseParams.identity(mesh), "apose": apose(mesh)},
        goldens=goldens)

    descriptor = {"width": SIZE, "height": SIZE, "background": list(BACKGROUND),
                  "goldens": []}
    for name, (pose, cam) in goldens.items():
        out = render_avatar(mesh, pose, splats, cam, background=BACKGROUND)
        raw = os.path.join(out_dir, f"golden_{name}.f32")
        assets.save_image_raw(raw, out.image)
        assets.save_image_png(os.path.join(out_dir, f"golden_{name}.png"), out.image)
        descriptor["goldens"].append({
            "name": name,
            "image": f"golden_{name}.f32",
            "frames": f"bundle/clips/golden_{name}.frames",
            "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                       "rotation": [float(v) for v in cam.rotation],
                       "translation": [float(v) for v in cam.translation],
                       "width": cam.width, "height": cam.height},
        })
    with open(os.path.join(out_dir, "goldens.json"), "wb") as fh:
        fh.write(assets.canonical_json(descriptor))
    print(f"fixtures written to {out_dir}")


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else os.path.join(
        os.path.dirname(__file__), "..", "frontend", "tests", "fixtures")
    main(os.path.abspath(target))
