"""Procedural desk-scale assets: test fixtures, benchmarks, and demo scenes.

Everything here is deterministic given its arguments; no external model files
are required anywhere in the package.
"""

from __future__ import annotations

import numpy as np

from .types import ROOT_PARENT, SkinnedMesh


def two_triangle_mesh() -> SkinnedMesh:
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                      [0.0, 1.0, 0.0], [1.0, 1.0, 0.2]])
    tris = np.array([[0, 1, 2], [1, 3, 2]])
    return SkinnedMesh(vertices=verts, triangles=tris, joint_names=("root",),
                       joint_parents=np.array([ROOT_PARENT]),
                       joint_rest=np.zeros((1, 3)),
                       skin_weights=np.ones((4, 1)))


def uv_sphere_mesh(rings: int = 16, sectors: int = 24, radius=1.0,
                   center=(0.0, 0.0, 0.0), axis_scale=(1.0, 1.0, 1.0)) -> SkinnedMesh:
    """Ellipsoid banded sphere (open poles), one rigid root joint.

    Triangle count is exactly 2 * rings * sectors.
    """
    verts, tris = _sphere_grid(rings, sectors, radius, center, axis_scale)
    n = verts.shape[0]
    return SkinnedMesh(vertices=verts, triangles=tris, joint_names=("root",),
                       joint_parents=np.array([ROOT_PARENT]),
                       joint_rest=np.array([list(center)], dtype=float),
                       skin_weights=np.ones((n, 1)))


def _sphere_grid(rings, sectors, radius, center, axis_scale):
    lat = np.linspace(np.radians(8.0), np.radians(172.0), rings + 1)
    lon = np.linspace(0.0, 2.0 * np.pi, sectors, endpoint=False)
    verts = []
    for th in lat:
        for ph in lon:
            verts.append([
                radius * np.sin(th) * np.cos(ph) * axis_scale[0],
                radius * np.cos(th) * axis_scale[1],
                radius * np.sin(th) * np.sin(ph) * axis_scale[2],
            ])
    verts = np.asarray(verts) + np.asarray(center)
    tris = []
    for r in range(rings):
        for s in range(sectors):
            a = r * sectors + s
            b = r * sectors + (s + 1) % sectors
            c = (r + 1) * sectors + s
            d = (r + 1) * sectors + (s + 1) % sectors
            tris.append([a, b, c])
            tris.append([b, d, c])
    return verts, np.asarray(tris, dtype=np.int64)


def _tube(p0, p1, radius, rings, sectors):
    """Open-ended tube between two points; returns (verts, tris)."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    axis = axis / length
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    ts = np.linspace(0.0, 1.0, rings + 1)
    angles = np.linspace(0.0, 2.0 * np.pi, sectors, endpoint=False)
    verts = []
    for t in ts:
        c = p0 + t * length * axis
        for a in angles:
            verts.append(c + radius * (np.cos(a) * u + np.sin(a) * v))
    tris = []
    for r in range(rings):
        for s in range(sectors):
            a = r * sectors + s
            b = r * sectors + (s + 1) % sectors
            c = (r + 1) * sectors + s
            d = (r + 1) * sectors + (s + 1) % sectors
            tris.append([a, b, c])
            tris.append([b, d, c])
    return np.asarray(verts), np.asarray(tris, dtype=np.int64), ts


def zigzag_chain_mesh(n_joints: int = 6, bone: float = 0.3, bend: float = 0.12,
                      radius: float = 0.05, sectors: int = 6) -> SkinnedMesh:
    """A skinned tube around a bent chain of joints along +x.

    Each main joint also carries two rigid leaf "site" joints off the bone
    axis, so its full 3-dof rotation is observable from projected keypoints
    (a bare chain leaves twists about the bone unconstrained). The
    keypoint_map exposes every joint: kp_i for the chain, kp_i_a / kp_i_b for
    the sites.
    """
    main = np.zeros((n_joints, 3))
    for i in range(n_joints):
        main[i] = [bone * i, 0.0, bend * (i % 2)]
    site_a = main + np.array([0.07, 0.11, 0.05])
    site_b = main + np.array([0.05, -0.10, -0.08])

    joints = np.concatenate([main, site_a, site_b])
    parents = np.array(
        [ROOT_PARENT] + list(range(n_joints - 1))  # chain
        + list(range(n_joints)) * 2,  # each site hangs off its main joint
        dtype=np.int64)
    names = (tuple(f"j{i}" for i in range(n_joints))
             + tuple(f"j{i}_site_a" for i in range(n_joints))
             + tuple(f"j{i}_site_b" for i in range(n_joints)))
    j_total = len(names)

    all_verts = []
    all_tris = []
    all_weights = []
    for i in range(n_joints - 1):
        verts, tris, ts = _tube(main[i], main[i + 1], radius, rings=3, sectors=sectors)
        base = sum(v.shape[0] for v in all_verts)
        all_tris.append(tris + base)
        all_verts.append(verts)
        w = np.zeros((verts.shape[0], j_total))
        for ring, t in enumerate(ts):
            rows = slice(ring * sectors, (ring + 1) * sectors)
            # blend toward the distal joint along the bone
            w[rows, i] = 1.0 - t
            w[rows, i + 1] = t
        all_weights.append(w)

    verts = np.concatenate(all_verts)
    tris = np.concatenate(all_tris)
    weights = np.concatenate(all_weights)
    keypoint_map = {f"kp_{i}": f"j{i}" for i in range(n_joints)}
    keypoint_map.update({f"kp_{i}_a": f"j{i}_site_a" for i in range(n_joints)})
    keypoint_map.update({f"kp_{i}_b": f"j{i}_site_b" for i in range(n_joints)})
    return SkinnedMesh(
        vertices=verts, triangles=tris, joint_names=names,
        joint_parents=parents, joint_rest=joints, skin_weights=weights,
        keypoint_map=keypoint_map,
    )


BIPED_JOINTS = (
    ("root", None, (0.0, 0.95, 0.0)),
    ("chest", "root", (0.0, 1.25, 0.0)),
    ("neck", "chest", (0.0, 1.45, 0.0)),
    ("head", "neck", (0.0, 1.55, 0.0)),
    ("l_shoulder", "chest", (0.20, 1.40, 0.0)),
    ("l_elbow", "l_shoulder", (0.45, 1.40, 0.0)),
    ("l_wrist", "l_elbow", (0.70, 1.40, 0.0)),
    ("l_palm", "l_wrist", (0.80, 1.40, 0.0)),
    ("r_shoulder", "chest", (-0.20, 1.40, 0.0)),
    ("r_elbow", "r_shoulder", (-0.45, 1.40, 0.0)),
    ("r_wrist", "r_elbow", (-0.70, 1.40, 0.0)),
    ("r_palm", "r_wrist", (-0.80, 1.40, 0.0)),
)

BIPED_KEYPOINT_MAP = {
    "left_shoulder": "l_shoulder", "left_elbow": "l_elbow",
    "left_wrist": "l_wrist", "left_palm": "l_palm",
    "right_shoulder": "r_shoulder", "right_elbow": "r_elbow",
    "right_wrist": "r_wrist", "right_palm": "r_palm",
    "head": "head", "neck": "neck", "chest": "chest", "root": "root",
}

BIPED_LAYOUT = tuple(BIPED_KEYPOINT_MAP.keys())


def mini_biped(sectors: int = 8) -> SkinnedMesh:
    """A small articulated figure: torso, head with a face, two 4-joint arms.

    Carries everything the pipeline's metadata hooks need: face_center /
    eye_midpoint / face_patch index sets on the head sphere (facing +z),
    left-right joint correspondence, and a keypoint-name map.
    """
    names = tuple(j[0] for j in BIPED_JOINTS)
    name_to_idx = {n: i for i, n in enumerate(names)}
    parents = np.array(
        [ROOT_PARENT if j[1] is None else name_to_idx[j[1]] for j in BIPED_JOINTS],
        dtype=np.int64)
    joints = np.array([j[2] for j in BIPED_JOINTS])

    parts = []  # (verts, tris, weights)

    def add_part(verts, tris, weight_rows):
        parts.append((verts, tris, weight_rows))

    def tube_part(a, b, radius, rings, w_from, w_to):
        verts, tris, ts = _tube(joints[name_to_idx[a]], joints[name_to_idx[b]],
                                radius, rings, sectors)
        w = np.zeros((verts.shape[0], len(names)))
        for ring, t in enumerate(ts):
            rows = slice(ring * sectors, (ring + 1) * sectors)
            w[rows, name_to_idx[w_from]] = 1.0 - t
            w[rows, name_to_idx[w_to]] = t
        add_part(verts, tris, w)

    # torso: pelvis column up to the neck
    tube_part("root", "chest", 0.16, 4, "root", "chest")
    tube_part("chest", "neck", 0.12, 2, "chest", "neck")
    # arms and hands
    for side in ("l", "r"):
        tube_part(f"{side}_shoulder", f"{side}_elbow", 0.05, 3,
                  f"{side}_shoulder", f"{side}_elbow")
        tube_part(f"{side}_elbow", f"{side}_wrist", 0.045, 3,
                  f"{side}_elbow", f"{side}_wrist")
        tube_part(f"{side}_wrist", f"{side}_palm", 0.04, 2,
                  f"{side}_wrist", f"{side}_palm")
    # rigid legs (no extra joints)
    for x in (0.09, -0.09):
        verts, tris, _ = _tube((x, 0.12, 0.0), (x, 0.92, 0.0), 0.07, 5, sectors)
        w = np.zeros((verts.shape[0], len(names)))
        w[:, name_to_idx["root"]] = 1.0
        add_part(verts, tris, w)

    # head sphere, face toward +z
    head_center = np.array([0.0, 1.66, 0.0])
    head_r = 0.12
    verts, tris = _sphere_grid(8, sectors, head_r, head_center, (1.0, 1.0, 1.0))
    w = np.zeros((verts.shape[0], len(names)))
    w[:, name_to_idx["head"]] = 1.0
    head_base = sum(p[0].shape[0] for p in parts)
    add_part(verts, tris, w)

    all_verts = np.concatenate([p[0] for p in parts])
    all_tris = np.concatenate([p[1] + off for p, off in
                               zip(parts, np.cumsum([0] + [p[0].shape[0] for p in parts[:-1]]))])
    all_weights = np.concatenate([p[2] for p in parts])

    head_verts = all_verts[head_base:]
    front = head_verts[:, 2] - head_center[2]
    face_patch = head_base + np.nonzero(front > 0.45 * head_r)[0]
    face_center = head_base + np.argsort(
        np.linalg.norm(head_verts - (head_center + [0, 0, head_r]), axis=1))[:4]
    eye_target = head_center + np.array([0.0, 0.05, 0.9 * head_r])
    eye_mid = head_base + np.argsort(np.linalg.norm(head_verts - eye_target, axis=1))[:4]

    lr = {}
    for n in names:
        if n.startswith("l_"):
            lr[n] = "r_" + n[2:]
            lr["r_" + n[2:]] = n

    return SkinnedMesh(
        vertices=all_verts, triangles=all_tris, joint_names=names,
        joint_parents=parents, joint_rest=joints, skin_weights=all_weights,
        keypoint_map=dict(BIPED_KEYPOINT_MAP),
        face_center_idx=np.sort(face_center),
        eye_midpoint_idx=np.sort(eye_mid),
        face_patch_idx=np.sort(face_patch),
        left_right_map=lr,
    )


def apose(mesh: SkinnedMesh, angle_deg: float = 50.0):
    """Arms-down pose for a mini_biped-style skeleton (rotation about z)."""
    from .types import PoseParams

    rot = np.zeros((mesh.num_joints, 3))
    a = np.radians(angle_deg)
    for name, sign in (("l_shoulder", -1.0), ("r_shoulder", 1.0)):
        if name in mesh.joint_names:
            rot[mesh.joint_index(name), 2] = sign * a
    return PoseParams.identity(mesh).replace(joint_rotations=rot)
