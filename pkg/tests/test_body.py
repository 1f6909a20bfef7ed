import numpy as np
import pytest

from helpers import matrix_chain_fk_oracle, projection_matrix_oracle, small_camera
from meshsplat import body
from meshsplat.transforms import (
    quat_canonical,
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    quat_rotate,
)
from meshsplat.types import Camera, PoseParams, ROOT_PARENT, SkinnedMesh


def random_pose(mesh, rng, scale=0.5, translation=True):
    return PoseParams.identity(mesh).replace(
        joint_rotations=rng.normal(scale=scale, size=(mesh.num_joints, 3)),
        root_translation=rng.normal(size=3) if translation else np.zeros(3))


class TestForwardKinematics:
    def test_identity_pose_keeps_offset_rest_positions(self, chain_mesh, rng):
        offsets = rng.normal(scale=0.01, size=(chain_mesh.num_joints, 3))
        pose = PoseParams.identity(chain_mesh).replace(joint_offsets=offsets)
        tf = body.forward_kinematics(chain_mesh, pose)
        assert np.allclose(tf.positions, chain_mesh.joint_rest + offsets, atol=1e-12)

    def test_root_rotation_is_rigid_motion(self, biped, rng):
        q_aa = rng.normal(size=3)
        t = rng.normal(size=3)
        pose = PoseParams.identity(biped)
        rots = np.array(pose.joint_rotations)
        rots[biped.root_index()] = q_aa
        pose = pose.replace(joint_rotations=rots, root_translation=t)
        tf = body.forward_kinematics(biped, pose)
        q = quat_from_axis_angle(q_aa)
        expect = quat_rotate(q, biped.joint_rest) + t
        assert np.allclose(tf.positions, expect, atol=1e-12)

    def test_matches_matrix_chain_oracle(self, chain_mesh, rng):
        for _ in range(5):
            pose = random_pose(chain_mesh, rng)
            tf = body.forward_kinematics(chain_mesh, pose)
            oracle_pos, _ = matrix_chain_fk_oracle(chain_mesh, pose)
            assert np.allclose(tf.positions, oracle_pos, atol=1e-10)

    def test_determinism_bit_identical(self, biped, rng):
        pose = random_pose(biped, rng)
        a = body.forward_kinematics(biped, pose)
        b = body.forward_kinematics(biped, pose)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.rotations, b.rotations)

    def test_dimension_mismatch_rejected(self, biped):
        bad = PoseParams(joint_rotations=np.zeros((3, 3)), root_translation=np.zeros(3))
        with pytest.raises(Exception):
            body.forward_kinematics(biped, bad)


class TestSkinning:
    def test_identity_pose_is_identity(self, biped):
        pose = PoseParams.identity(biped)
        assert np.allclose(body.skin_vertices(biped, pose), biped.vertices, atol=1e-12)

    def test_single_joint_rigid_rotation(self, rng):
        # all weights on one child joint -> vertices rotate rigidly about it
        rest = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        verts = rng.normal(size=(5, 3)) + [1.0, 0, 0]
        mesh = SkinnedMesh(vertices=verts, triangles=np.array([[0, 1, 2]]),
                           joint_names=("root", "child"),
                           joint_parents=np.array([ROOT_PARENT, 0]),
                           joint_rest=rest,
                           skin_weights=np.tile([0.0, 1.0], (5, 1)))
        aa = rng.normal(size=3)
        pose = PoseParams.identity(mesh)
        rots = np.array(pose.joint_rotations)
        rots[1] = aa
        pose = pose.replace(joint_rotations=rots)
        posed = body.skin_vertices(mesh, pose)
        q = quat_from_axis_angle(aa)
        expect = quat_rotate(q, verts - rest[1]) + rest[1]
        assert np.allclose(posed, expect, atol=1e-12)

    def test_fifty_fifty_blend_matches_hand_blend(self, rng):
        rest = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        verts = np.array([[0.5, 0.2, 0.1]])
        mesh = SkinnedMesh(vertices=verts, triangles=np.array([[0, 0, 0]]),
                           joint_names=("root", "child"),
                           joint_parents=np.array([ROOT_PARENT, 0]),
                           joint_rest=rest,
                           skin_weights=np.array([[0.5, 0.5]]))
        aa = np.array([0.0, 0.0, np.pi / 2])
        pose = PoseParams.identity(mesh)
        rots = np.array(pose.joint_rotations)
        rots[1] = aa
        pose = pose.replace(joint_rotations=rots)
        posed = body.skin_vertices(mesh, pose)
        q = quat_from_axis_angle(aa)
        rotated = quat_rotate(q, verts[0] - rest[1]) + rest[1]
        expect = 0.5 * verts[0] + 0.5 * rotated
        assert np.allclose(posed[0], expect, atol=1e-12)

    def test_partition_of_unity_translation(self, biped, rng):
        pose = random_pose(biped, rng, translation=False)
        base = body.skin_vertices(biped, pose)
        t = rng.normal(size=3)
        shifted = body.skin_vertices(
            biped, pose.replace(root_translation=pose.root_translation + t))
        assert np.allclose(shifted, base + t, atol=1e-12)

    def test_shape_basis_displaces_before_skinning(self, rng):
        rest = np.zeros((1, 3))
        verts = rng.normal(size=(4, 3))
        basis = rng.normal(size=(4, 3, 2))
        mesh = SkinnedMesh(vertices=verts, triangles=np.array([[0, 1, 2]]),
                           joint_names=("root",), joint_parents=np.array([ROOT_PARENT]),
                           joint_rest=rest, skin_weights=np.ones((4, 1)),
                           shape_basis=basis)
        beta = rng.normal(size=2)
        pose = PoseParams.identity(mesh).replace(shape=beta)
        assert np.allclose(body.skin_vertices(mesh, pose),
                           verts + basis @ beta, atol=1e-12)


class TestPolygonFrames:
    def test_canonical_pose_identity(self, biped):
        frames = body.polygon_frames(biped, biped.vertices, biped.vertices)
        assert np.allclose(frames.k, 1.0, atol=1e-12)
        assert np.allclose(frames.rot, [1.0, 0, 0, 0], atol=1e-9)
        tri = biped.triangles
        centroids = biped.vertices[tri].mean(axis=1)
        assert np.allclose(frames.t, centroids, atol=1e-12)
        assert not frames.degenerate.any()

    def test_uniform_scale_by_two(self, tiny_mesh):
        frames = body.polygon_frames(tiny_mesh, tiny_mesh.vertices,
                                     2.0 * np.asarray(tiny_mesh.vertices))
        assert np.allclose(frames.k, 2.0, atol=1e-12)
        assert np.allclose(frames.rot, [1.0, 0, 0, 0], atol=1e-9)

    def test_rigid_rotation_recovered(self, sphere_mesh, rng):
        q = quat_canonical(quat_normalize(rng.normal(size=4)))
        posed = quat_rotate(q, sphere_mesh.vertices)
        frames = body.polygon_frames(sphere_mesh, sphere_mesh.vertices, posed)
        assert np.allclose(frames.k, 1.0, atol=1e-10)
        assert np.allclose(frames.rot, q, atol=1e-9)

    def test_equivariance_under_rigid_motion(self, biped, rng):
        pose = random_pose(biped, rng, scale=0.3)
        posed = body.skin_vertices(biped, pose)
        base = body.polygon_frames(biped, biped.vertices, posed)
        for _ in range(5):
            q = quat_canonical(quat_normalize(rng.normal(size=4)))
            t = rng.normal(size=3)
            moved = quat_rotate(q, posed) + t
            frames = body.polygon_frames(biped, biped.vertices, moved)
            assert np.allclose(frames.k, base.k, atol=1e-9)
            assert np.allclose(frames.t, quat_rotate(q, base.t) + t, atol=1e-9)
            expect_rot = quat_canonical(quat_mul(q, base.rot))
            assert np.allclose(frames.rot, expect_rot, atol=1e-9)

    def test_degenerate_falls_back_to_prev_and_flags(self, tiny_mesh):
        prev = body.polygon_frames(tiny_mesh, tiny_mesh.vertices, tiny_mesh.vertices)
        collapsed = np.array(tiny_mesh.vertices)
        collapsed[3] = collapsed[1]  # second triangle collapses to a segment
        frames = body.polygon_frames(tiny_mesh, tiny_mesh.vertices, collapsed, prev=prev)
        assert not frames.degenerate[0] and frames.degenerate[1]
        assert frames.k[1] == prev.k[1]
        assert np.allclose(frames.rot[1], prev.rot[1])
        assert np.allclose(frames.t[1], prev.t[1])

    def test_emitted_quaternions_canonical(self, biped, rng):
        pose = random_pose(biped, rng, scale=0.4)
        frames = body.polygon_frames(biped, biped.vertices,
                                     body.skin_vertices(biped, pose))
        first = frames.rot[:, 0]
        assert np.all(first >= -1e-12)


class TestProjection:
    def test_optical_axis(self):
        cam = Camera(fx=1000, fy=1000, cx=256, cy=256, rotation=[1, 0, 0, 0],
                     translation=[0, 0, 0], width=512, height=512)
        uv, z, valid = body.project_points(np.array([[0.0, 0.0, 1.0]]), cam)
        assert np.allclose(uv[0], [256.0, 256.0]) and valid[0]

    def test_similar_triangles_example(self):
        cam = Camera(fx=1000, fy=1000, cx=256, cy=256, rotation=[1, 0, 0, 0],
                     translation=[0, 0, 0], width=512, height=512)
        uv, _, _ = body.project_points(np.array([[0.1, 0.0, 1.0]]), cam)
        assert uv[0, 0] == pytest.approx(356.0)

    def test_matches_homogeneous_matrix_oracle(self, rng):
        cam = Camera(fx=800, fy=760, cx=310, cy=245,
                     rotation=quat_normalize(rng.normal(size=4)),
                     translation=rng.normal(size=3), width=640, height=480)
        pts = rng.normal(size=(40, 3)) * 2.0
        uv, z, valid = body.project_points(pts, cam)
        oracle = projection_matrix_oracle(pts, cam)
        assert np.allclose(uv[valid], oracle[valid], atol=1e-9)

    def test_behind_camera_marked_invalid(self):
        cam = small_camera()
        _, _, valid = body.project_points(np.array([[0.0, 0.0, -1.0]]), cam)
        assert not valid[0]


def visibility_camera():
    return Camera(fx=100, fy=100, cx=32, cy=32, rotation=[1, 0, 0, 0],
                  translation=[0, 0, 0], width=64, height=64)


def face_pair(eye_offset_cam):
    """Two-vertex cloud: face center at z=2 on the axis, eyes offset from it."""
    face = np.array([0.0, 0.0, 2.0])
    eye = face + np.asarray(eye_offset_cam, dtype=float)
    return np.stack([face, eye]), np.array([0]), np.array([1])


class TestFaceVisibility:
    def test_facing_camera_visible(self):
        verts, fc, em = face_pair([0.0, 0.0, -0.2])  # a antiparallel to b
        assert body.face_visibility(verts, fc, em, visibility_camera())

    def test_turned_away_not_visible(self):
        verts, fc, em = face_pair([0.0, 0.0, 0.2])  # a parallel to b
        assert not body.face_visibility(verts, fc, em, visibility_camera())

    def test_exactly_135_degrees_not_visible(self):
        # (1, 0, -1) against (0, 0, 1): the normalized dot equals the
        # threshold constant bit-for-bit, so strict '>' must exclude it
        verts, fc, em = face_pair([1.0, 0.0, -1.0])
        assert not body.face_visibility(verts, fc, em, visibility_camera())

    def test_just_past_135_visible(self):
        angle = np.radians(135.0) + 1e-6
        verts, fc, em = face_pair([np.sin(angle), 0.0, np.cos(angle)])
        assert body.face_visibility(verts, fc, em, visibility_camera())

    def test_just_under_135_not_visible(self):
        angle = np.radians(135.0) - 1e-6
        verts, fc, em = face_pair([np.sin(angle), 0.0, np.cos(angle)])
        assert not body.face_visibility(verts, fc, em, visibility_camera())

    def test_y_component_ignored(self):
        # vertical tilt must not affect the xz-plane test
        verts, fc, em = face_pair([0.0, 5.0, -0.2])
        assert body.face_visibility(verts, fc, em, visibility_camera())

    def test_degenerate_projection_not_visible(self):
        verts, fc, em = face_pair([0.0, 1.0, 0.0])  # eye straight above: xz zero
        assert not body.face_visibility(verts, fc, em, visibility_camera())


class TestCarriedPointJacobian:
    def test_joint_positions_match_fd(self, chain_mesh, rng):
        pose = random_pose(chain_mesh, rng, scale=0.4)
        tf = body.forward_kinematics(chain_mesh, pose)
        rest = chain_mesh.joint_rest + pose.joint_offsets
        joints = np.arange(chain_mesh.num_joints)
        onehot = np.eye(chain_mesh.num_joints)
        jac = body.carried_point_jacobian(chain_mesh, pose, tf, rest, onehot,
                                          list(range(chain_mesh.num_joints)))
        eps = 1e-6
        for a in range(chain_mesh.num_joints):
            for i in range(3):
                rots = np.array(pose.joint_rotations)
                rots[a, i] += eps
                plus = body.forward_kinematics(chain_mesh, pose.replace(joint_rotations=rots)).positions
                rots[a, i] -= 2 * eps
                minus = body.forward_kinematics(chain_mesh, pose.replace(joint_rotations=rots)).positions
                fd = (plus - minus) / (2 * eps)
                assert np.allclose(jac[:, :, a, i], fd[joints], atol=1e-6)

    def test_skinned_vertices_match_fd(self, biped, rng):
        pose = random_pose(biped, rng, scale=0.3)
        tf = body.forward_kinematics(biped, pose)
        sel = rng.choice(biped.num_vertices, size=12, replace=False)
        jac = body.carried_point_jacobian(biped, pose, tf, biped.vertices[sel],
                                          biped.skin_weights[sel],
                                          list(range(biped.num_joints)))
        eps = 1e-6
        for a in rng.choice(biped.num_joints, size=4, replace=False):
            for i in range(3):
                rots = np.array(pose.joint_rotations)
                rots[a, i] += eps
                plus = body.skin_vertices(biped, pose.replace(joint_rotations=rots))[sel]
                rots[a, i] -= 2 * eps
                minus = body.skin_vertices(biped, pose.replace(joint_rotations=rots))[sel]
                fd = (plus - minus) / (2 * eps)
                assert np.allclose(jac[:, :, a, i], fd, atol=1e-6)
