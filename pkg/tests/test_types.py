import numpy as np
import pytest

from meshsplat.binding import init_splats
from meshsplat.types import (
    Camera,
    KeypointSequence,
    LossWeights,
    PoseParams,
    ROOT_PARENT,
    SkinnedMesh,
    Splat,
    SplatSet,
    ValidationError,
    validate_asset,
)


class TestValidateAsset:
    def test_well_formed_mesh_and_splats_pass(self, tiny_mesh):
        splats = [
            Splat(mu_local=[0, 0, 0], rot_local=[1, 0, 0, 0],
                  scale_local=[0.1, 0.1, 0.1], color=[0.5, 0.5, 0.5],
                  opacity=0.5, polygon_id=0),
            Splat(mu_local=[0.01, 0, 0], rot_local=[1, 0, 0, 0],
                  scale_local=[0.1, 0.1, 0.1], color=[0.2, 0.4, 0.6],
                  opacity=0.9, polygon_id=1),
        ]
        report = validate_asset(tiny_mesh, splats)
        assert report.ok and report.message() == "ok"

    def test_polygon_id_out_of_range_fails(self, tiny_mesh):
        splats = SplatSet(mu_local=np.zeros((1, 3)), rot_local=[[1, 0, 0, 0]],
                          log_scale=np.zeros((1, 3)), color=np.full((1, 3), 0.5),
                          opacity=[0.5], polygon_id=[tiny_mesh.num_triangles])
        report = validate_asset(tiny_mesh, splats)
        assert not report.ok
        assert any(i.code == "index out of range" for i in report.issues)

    def test_unnormalized_weights_fail(self, tiny_mesh):
        weights = np.array(tiny_mesh.skin_weights)
        weights[2] = 0.8
        bad = SkinnedMesh(vertices=tiny_mesh.vertices, triangles=tiny_mesh.triangles,
                          joint_names=tiny_mesh.joint_names,
                          joint_parents=tiny_mesh.joint_parents,
                          joint_rest=tiny_mesh.joint_rest, skin_weights=weights)
        report = validate_asset(bad)
        assert not report.ok
        assert any(i.code == "weights not normalized" for i in report.issues)

    def test_degenerate_triangle_fails(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
        mesh = SkinnedMesh(vertices=verts, triangles=np.array([[0, 1, 2]]),
                           joint_names=("root",),
                           joint_parents=np.array([ROOT_PARENT]),
                           joint_rest=np.zeros((1, 3)),
                           skin_weights=np.ones((3, 1)))
        report = validate_asset(mesh)
        assert not report.ok
        assert any(i.code == "degenerate triangle" for i in report.issues)

    def test_cycle_in_hierarchy_fails(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
        mesh = SkinnedMesh(vertices=verts, triangles=np.array([[0, 1, 2]]),
                           joint_names=("a", "b", "c"),
                           joint_parents=np.array([ROOT_PARENT, 2, 1]),
                           joint_rest=np.zeros((3, 3)),
                           skin_weights=np.eye(3))
        report = validate_asset(mesh)
        assert not report.ok

    def test_accepts_own_initializer_output(self, biped):
        assert validate_asset(biped, init_splats(biped)).ok


class TestInvariantEnforcement:
    def test_camera_rejects_bad_principal_point(self):
        with pytest.raises(ValidationError):
            Camera(fx=100, fy=100, cx=700, cy=10, rotation=[1, 0, 0, 0],
                   translation=[0, 0, 0], width=640, height=480)
        with pytest.raises(ValidationError):
            Camera(fx=-1, fy=100, cx=10, cy=10, rotation=[1, 0, 0, 0],
                   translation=[0, 0, 0], width=640, height=480)

    def test_keypoints_reject_bad_confidence(self):
        with pytest.raises(ValidationError):
            KeypointSequence(layout=("a",), xy=np.zeros((1, 1, 2)),
                             confidence=np.array([[1.5]]))

    def test_loss_weights_defaults(self):
        w = LossWeights()
        assert (w.w_init, w.w_vertex, w.w_lap, w.w_edge) == (0.1, 10.0, 10000.0, 1.0)
        assert (w.w_shape, w.w_jo, w.w_lpips) == (0.01, 100.0, 0.01)
        assert (w.w_ssim, w.w_sobel, w.w_knn) == (0.1, 1.0, 0.01)
        with pytest.raises(ValidationError):
            LossWeights(w_ssim=-0.1)

    def test_types_are_immutable(self, tiny_mesh):
        with pytest.raises(ValueError):
            tiny_mesh.vertices[0, 0] = 9.0
        pose = PoseParams.identity(tiny_mesh)
        with pytest.raises(ValueError):
            pose.joint_rotations[0, 0] = 1.0

    def test_pose_dimension_mismatch(self, tiny_mesh):
        pose = PoseParams(joint_rotations=np.zeros((3, 3)), root_translation=np.zeros(3))
        with pytest.raises(ValidationError):
            pose.validate_for(tiny_mesh)

    def test_splatset_scale_positive(self):
        s = SplatSet(mu_local=np.zeros((2, 3)),
                     rot_local=np.tile([1.0, 0, 0, 0], (2, 1)),
                     log_scale=np.full((2, 3), -2.0), color=np.full((2, 3), 0.5),
                     opacity=[0.5, 0.5], polygon_id=[0, 0])
        assert np.all(s.scale_local > 0)
        single = s[1]
        assert single.scale_local == pytest.approx(np.exp(-2.0))
