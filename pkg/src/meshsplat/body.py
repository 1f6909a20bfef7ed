"""Articulated skinned mesh: forward kinematics, blend skinning, per-polygon
similarity frames, joint projection, and the face-visibility test.

Joint world transforms are affine maps x -> Q·x + T. The root's transform is
exactly its (rotation, translation) pair, so a root rotation q moves every
rest point to q·x + t; child rotations pivot at their own (offset) rest joint
positions, which makes the all-identity pose the identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .transforms import (
    matrix_to_quat,
    quat_canonical,
    quat_conjugate,
    quat_from_axis_angle,
    quat_mul,
    quat_rotate,
    quat_to_matrix,
)
from .types import (
    Camera,
    MIN_TRIANGLE_AREA,
    PolygonFrameSet,
    PoseParams,
    ROOT_PARENT,
    SkinnedMesh,
    ValidationError,
)

COS_VISIBILITY_THRESHOLD = math.cos(math.radians(135.0))


@dataclass(frozen=True)
class JointTransforms:
    """Per-joint world transform (x -> Q·x + T), its matrix form, and positions.

    Because rest transforms are the identity by construction, (Q, T) doubles
    as the skinning transform (world composed with inverse rest).
    """

    rotations: np.ndarray  # (J, 4)
    translations: np.ndarray  # (J, 3)
    positions: np.ndarray  # (J, 3) posed joint positions

    @property
    def matrices(self):
        return quat_to_matrix(self.rotations)


def topological_order(parents) -> np.ndarray:
    parents = np.asarray(parents)
    j = len(parents)
    order = []
    placed = np.zeros(j, dtype=bool)
    pending = list(range(j))
    for _ in range(j + 1):
        rest = []
        for i in pending:
            p = parents[i]
            if p == ROOT_PARENT or placed[p]:
                order.append(i)
                placed[i] = True
            else:
                rest.append(i)
        if not rest:
            break
        if len(rest) == len(pending):
            raise ValidationError(f"joint hierarchy has a cycle involving {sorted(rest)}")
        pending = rest
    return np.array(order, dtype=np.int64)


def shaped_vertices(mesh: SkinnedMesh, pose: PoseParams) -> np.ndarray:
    """Canonical vertices displaced by the shape/expression bases when present."""
    v = mesh.vertices
    if mesh.shape_basis is not None and pose.shape.size:
        v = v + mesh.shape_basis @ pose.shape
    if mesh.expr_basis is not None and pose.expression.size:
        v = v + mesh.expr_basis @ pose.expression
    return v


def forward_kinematics(mesh: SkinnedMesh, pose: PoseParams) -> JointTransforms:
    pose.validate_for(mesh)
    j = mesh.num_joints
    rest = mesh.joint_rest + pose.joint_offsets
    local_q = quat_from_axis_angle(pose.joint_rotations)

    q = np.empty((j, 4))
    t = np.empty((j, 3))
    for i in topological_order(mesh.joint_parents):
        p = mesh.joint_parents[i]
        if p == ROOT_PARENT:
            q[i] = local_q[i]
            t[i] = pose.root_translation
        else:
            # local map pivots at the rest joint: x -> R(x - rest) + rest
            local_t = rest[i] - quat_rotate(local_q[i], rest[i])
            q[i] = quat_mul(q[p], local_q[i])
            t[i] = quat_rotate(q[p], local_t) + t[p]
    positions = quat_rotate(q, rest) + t
    return JointTransforms(rotations=q, translations=t, positions=positions)


def skin_vertices(mesh: SkinnedMesh, pose: PoseParams,
                  transforms: JointTransforms | None = None) -> np.ndarray:
    """Linear blend skinning of the (shaped) canonical vertices."""
    if transforms is None:
        transforms = forward_kinematics(mesh, pose)
    v = shaped_vertices(mesh, pose)
    mats = transforms.matrices  # (J, 3, 3)
    w = mesh.skin_weights  # (N, J)
    blended_rot = np.einsum("nj,jab->nab", w, mats)
    blended_t = w @ transforms.translations
    return np.einsum("nab,nb->na", blended_rot, v) + blended_t


def _triangle_frames(vertices, triangles):
    """Orthonormal tangent frames (ê1, ê2, n̂ columns) and areas per triangle."""
    v0 = vertices[triangles[:, 0]]
    v1 = vertices[triangles[:, 1]]
    v2 = vertices[triangles[:, 2]]
    e1 = v1 - v0
    normal = np.cross(e1, v2 - v0)
    area = 0.5 * np.linalg.norm(normal, axis=-1)
    safe = np.maximum(area, MIN_TRIANGLE_AREA / 2)
    e1_hat = e1 / np.maximum(np.linalg.norm(e1, axis=-1, keepdims=True), 1e-300)
    n_hat = normal / (2.0 * safe[:, None])
    e2_hat = np.cross(n_hat, e1_hat)
    frame = np.stack([e1_hat, e2_hat, n_hat], axis=-1)
    centroid = (v0 + v1 + v2) / 3.0
    return frame, area, centroid


def polygon_frames(mesh: SkinnedMesh, canonical_vertices, posed_vertices,
                   prev: PolygonFrameSet | None = None) -> PolygonFrameSet:
    """Per-triangle similarity (k, R, T) from canonical to posed space.

    R rotates the canonical edge-aligned tangent frame onto the posed one and
    k = sqrt(area ratio), so the canonical pose maps to (1, identity, centroid)
    and any rigid motion of the posed mesh acts equivariantly. A degenerate
    posed triangle falls back to its previous valid frame (or k=1, R=identity
    when none is supplied) and is flagged.
    """
    canonical_vertices = np.asarray(canonical_vertices, dtype=float)
    posed_vertices = np.asarray(posed_vertices, dtype=float)
    tri = mesh.triangles

    frame_c, area_c, _ = _triangle_frames(canonical_vertices, tri)
    frame_p, area_p, centroid_p = _triangle_frames(posed_vertices, tri)
    if np.any(area_c <= MIN_TRIANGLE_AREA):
        bad = int(np.argmax(area_c <= MIN_TRIANGLE_AREA))
        raise ValidationError(f"canonical triangle {bad} is degenerate")

    degenerate = area_p <= MIN_TRIANGLE_AREA
    rot_mats = frame_p @ np.swapaxes(frame_c, -1, -2)
    k = np.sqrt(area_p / area_c)
    rot = matrix_to_quat(rot_mats)

    if np.any(degenerate):
        k = k.copy()
        rot = rot.copy()
        t = centroid_p.copy()
        if prev is not None:
            k[degenerate] = prev.k[degenerate]
            rot[degenerate] = prev.rot[degenerate]
            t[degenerate] = prev.t[degenerate]
        else:
            k[degenerate] = 1.0
            rot[degenerate] = np.array([1.0, 0.0, 0.0, 0.0])
        centroid_p = t

    return PolygonFrameSet(k=k, rot=quat_canonical(rot), t=centroid_p, degenerate=degenerate)


def project_points(points, cam: Camera):
    """Pinhole projection of world points; returns (uv, depth, valid).

    Points at or behind the near plane (camera z <= 0) are marked invalid and
    their uv left at the clamped-z projection for diagnostics only.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    p_cam = quat_rotate(cam.rotation, points) + cam.translation
    z = p_cam[:, 2]
    valid = z > 0
    safe_z = np.where(valid, z, 1.0)
    u = cam.fx * p_cam[:, 0] / safe_z + cam.cx
    v = cam.fy * p_cam[:, 1] / safe_z + cam.cy
    return np.stack([u, v], axis=-1), z, valid


def project_joints(transforms: JointTransforms, cam: Camera):
    """2D joint positions in pixels plus a validity mask (z > 0)."""
    uv, _, valid = project_points(transforms.positions, cam)
    return uv, valid


def _visible_from_cos(cos_angle: float) -> bool:
    # strict: the angle must exceed 135 degrees
    return cos_angle < COS_VISIBILITY_THRESHOLD


def face_visibility(posed_vertices, face_center_idx, eye_midpoint_idx, cam: Camera) -> bool:
    """True when the face points at the camera by more than 135 degrees.

    Compares the (face center -> eye midpoint) direction against the
    (camera -> face center) direction, both in the camera frame's xz-plane.
    Degenerate (zero-length) projections count as not visible.
    """
    posed_vertices = np.asarray(posed_vertices, dtype=float)
    face_center_idx = np.asarray(face_center_idx, dtype=np.int64)
    eye_midpoint_idx = np.asarray(eye_midpoint_idx, dtype=np.int64)
    if face_center_idx.size == 0 or eye_midpoint_idx.size == 0:
        raise ValidationError("face_center and eye_midpoint index sets must be nonempty")

    face_center = posed_vertices[face_center_idx].mean(axis=0)
    eye_mid = posed_vertices[eye_midpoint_idx].mean(axis=0)

    a = quat_rotate(cam.rotation, eye_mid - face_center)
    b = quat_rotate(cam.rotation, face_center - cam.position())
    a2 = np.array([a[0], a[2]])
    b2 = np.array([b[0], b[2]])
    na = np.linalg.norm(a2)
    nb = np.linalg.norm(b2)
    if na < 1e-12 or nb < 1e-12:
        return False
    cos_angle = float(np.dot(a2, b2) / (na * nb))
    return _visible_from_cos(cos_angle)


def pinhole_jacobian(p_cam, fx, fy):
    """d(u, v)/d(camera-space point) rows for each point, shape (N, 2, 3)."""
    p_cam = np.atleast_2d(p_cam)
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    out = np.zeros((p_cam.shape[0], 2, 3))
    out[:, 0, 0] = fx / z
    out[:, 0, 2] = -fx * x / (z * z)
    out[:, 1, 1] = fy / z
    out[:, 1, 2] = -fy * y / (z * z)
    return out


def ancestor_matrix(mesh: SkinnedMesh) -> np.ndarray:
    """Boolean (J, J) table: entry [a, j] is True iff a is an ancestor-or-self of j."""
    parents = mesh.joint_parents
    j_count = mesh.num_joints
    table = np.zeros((j_count, j_count), dtype=bool)
    for jj in range(j_count):
        a = jj
        while True:
            table[a, jj] = True
            p = parents[a]
            if p == ROOT_PARENT:
                break
            a = int(p)
    return table


def carried_point_jacobian(mesh: SkinnedMesh, pose: PoseParams,
                           transforms: JointTransforms, canonical_points,
                           weights, wrt_joints) -> np.ndarray:
    """d(blended world points)/d(joint axis-angle) as a (P, 3, A, 3) tensor.

    canonical_points: (P, 3) pre-pose positions; weights: (P, J) skinning
    weights (one-hot rows for pure joint attachments); wrt_joints: the A joint
    indices being differentiated.

    A point carried by joint j responds to joint a's rotation iff a is an
    ancestor-or-self of j. The derivative rotates the lever arm from a's
    world pivot by dR/dω conjugated into a's parent frame; for the root the
    pivot is the translated world origin. A joint's own position has a zero
    lever arm, so its self-derivative vanishes automatically.
    """
    from .transforms import rotmat_axis_angle_jacobian

    canonical_points = np.atleast_2d(np.asarray(canonical_points, dtype=float))
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    parents = mesh.joint_parents
    ancestors = ancestor_matrix(mesh)

    world_r = transforms.matrices  # (J, 3, 3)
    d_local = rotmat_axis_angle_jacobian(pose.joint_rotations)  # (J, 3, 3, 3)

    # per-point, per-carrier world position G_j(v)
    carried = (np.einsum("jab,pb->pja", world_r, canonical_points)
               + transforms.translations[None, :, :])  # (P, J, 3)

    out = np.zeros((canonical_points.shape[0], 3, len(wrt_joints), 3))
    for col, a in enumerate(wrt_joints):
        mask = ancestors[a]  # (J,)
        w_masked = weights * mask[None, :]
        m = w_masked.sum(axis=1)  # (P,)
        s = np.einsum("pj,pja->pa", w_masked, carried)  # (P, 3)
        p_parent = parents[a]
        if p_parent == ROOT_PARENT:
            r_parent = np.eye(3)
            pivot = pose.root_translation
        else:
            r_parent = world_r[p_parent]
            pivot = transforms.positions[a]
        lever = s - m[:, None] * pivot[None, :]  # (P, 3)
        lever_local = lever @ world_r[a]  # Rw_aᵀ applied per point
        for i in range(3):
            k = r_parent @ d_local[a, i]  # (3, 3)
            out[:, :, col, i] = lever_local @ k.T
    return out
