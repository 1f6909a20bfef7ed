import math

import numpy as np
import pytest

from helpers import wrap_oracle
from meshsplat import kinematics as kin
from meshsplat.types import KeypointSequence, LayoutError, PreconditionError, UnfillableGapError

LAYOUT = ("left_shoulder", "left_elbow", "left_wrist", "left_palm",
          "right_shoulder", "right_elbow", "right_wrist", "right_palm",
          "left_thumb1", "left_index2")


def make_sequence(frames_xy, conf=None):
    frames_xy = np.asarray(frames_xy, dtype=float)
    f, k, _ = frames_xy.shape
    confidence = np.full((f, k), 0.9) if conf is None else np.asarray(conf, dtype=float)
    return KeypointSequence(layout=LAYOUT[:k], xy=frames_xy, confidence=confidence)


def arm_frame(shoulder, theta_se, theta_ew, theta_wp, l_se=40.0, l_ew=30.0, l_wp=10.0):
    """Ground-truth arm using absolute angles; returns the 4 left-arm points."""
    s = np.asarray(shoulder, dtype=float)
    e = s + l_se * np.array([math.cos(theta_se), math.sin(theta_se)])
    w = e + l_ew * np.array([math.cos(theta_ew), math.sin(theta_ew)])
    p = w + l_wp * np.array([math.cos(theta_wp), math.sin(theta_wp)])
    return np.stack([s, e, w, p])


def constant_velocity_sequence(n_frames, omega_se, omega_ew, omega_wp,
                               shoulder_path=None, theta0=(0.1, 0.4, 0.9)):
    """Sequence whose left arm follows the constant-velocity chain model.

    Per the chain, segment i's absolute angle advances by the cumulative
    parent velocities: SE by w_se, EW by w_se+w_ew, WP by w_se+w_ew+w_wp.
    """
    frames = np.zeros((n_frames, 10, 2))
    for f in range(n_frames):
        s = shoulder_path(f) if shoulder_path else np.array([100.0, 200.0])
        arm = arm_frame(
            s,
            theta0[0] + f * omega_se,
            theta0[1] + f * (omega_se + omega_ew),
            theta0[2] + f * (omega_se + omega_ew + omega_wp),
        )
        frames[f, 0:4] = arm
        frames[f, 4:8] = arm * [-1.0, 1.0] + [600.0, 0.0]  # mirrored right arm
        frames[f, 8] = arm[3] + [3.0, 1.0]  # fingers ride near the palm
        frames[f, 9] = arm[3] + [5.0, -1.0]
    return make_sequence(frames)


class TestDetectMissingHands:
    def test_gap_definition_example(self):
        seq = constant_velocity_sequence(8, 0.0, 0.0, 0.0)
        conf = np.array(seq.confidence)
        conf[3:6, 2] = 0.1  # left wrist
        conf[3:6, 3] = 0.1  # left palm
        report = kin.detect_missing_hands(seq.replace(confidence=conf), 0.3)
        assert len(report.gaps) == 1
        gap = report.gaps[0]
        assert (gap.side, gap.last_visible, gap.first_reappear, gap.n) == ("left", 2, 6, 4)
        assert report.unfillable == ()

    def test_wrist_low_but_palm_high_not_missing(self):
        seq = constant_velocity_sequence(5, 0.0, 0.0, 0.0)
        conf = np.array(seq.confidence)
        conf[2, 2] = 0.1  # wrist low, palm stays 0.9
        report = kin.detect_missing_hands(seq.replace(confidence=conf), 0.3)
        assert report.gaps == () and report.unfillable == ()

    def test_all_visible_empty(self):
        seq = constant_velocity_sequence(5, 0.0, 0.0, 0.0)
        report = kin.detect_missing_hands(seq, 0.3)
        assert report.gaps == () and report.unfillable == ()

    def test_boundary_runs_reported_unfillable(self):
        seq = constant_velocity_sequence(6, 0.0, 0.0, 0.0)
        conf = np.array(seq.confidence)
        conf[0:2, 2:4] = 0.0
        conf[5, 2:4] = 0.0
        report = kin.detect_missing_hands(seq.replace(confidence=conf), 0.3)
        assert report.gaps == ()
        spans = {(g.side, g.start, g.end) for g in report.unfillable}
        assert spans == {("left", 0, 1), ("left", 5, 5)}

    def test_missing_layout_names_is_config_error(self):
        seq = KeypointSequence(layout=("left_shoulder", "left_elbow"),
                               xy=np.zeros((3, 2, 2)), confidence=np.full((3, 2), 0.9))
        with pytest.raises(LayoutError):
            kin.detect_missing_hands(seq, 0.3)

    def test_requires_two_frames(self):
        seq = constant_velocity_sequence(5, 0, 0, 0)
        one = KeypointSequence(layout=seq.layout, xy=seq.xy[:1],
                               confidence=seq.confidence[:1])
        with pytest.raises(PreconditionError):
            kin.detect_missing_hands(one, 0.3)


class TestChainAngles:
    def test_collinear_horizontal_arm(self):
        state = kin.chain_state_from_points((0, 0), (1, 0), (2, 0), (3, 0))
        assert state.theta_se == state.theta_ew == state.theta_wp == 0.0
        assert state.l_se == state.l_ew == state.l_wp == 1.0

    def test_vertical_bone(self):
        state = kin.chain_state_from_points((0, 0), (0, 1), (0, 2), (1, 2))
        assert state.theta_se == pytest.approx(math.pi / 2)

    def test_matches_trig_oracle(self, rng):
        for _ in range(30):
            pts = rng.uniform(-50, 50, size=(4, 2))
            try:
                state = kin.chain_state_from_points(*pts)
            except kin.DegenerateBoneError:
                continue
            for (a, b), theta, length in [
                ((0, 1), state.theta_se, state.l_se),
                ((1, 2), state.theta_ew, state.l_ew),
                ((2, 3), state.theta_wp, state.l_wp),
            ]:
                d = pts[b] - pts[a]
                assert theta == pytest.approx(math.atan2(d[1], d[0]), abs=1e-12)
                assert length == pytest.approx(math.hypot(*d), abs=1e-12)

    def test_coincident_joints_degenerate(self):
        with pytest.raises(kin.DegenerateBoneError):
            kin.chain_state_from_points((0, 0), (0, 0), (1, 0), (2, 0))


class TestRelativeDeltas:
    def test_identical_states_zero(self):
        s = kin.chain_state_from_points((0, 0), (1, 0), (2, 0), (3, 0))
        assert kin.relative_deltas(s, s) == (0.0, 0.0, 0.0)

    def test_substitution_example(self):
        a = kin.ChainState(theta_se=0.0, theta_ew=0.0, theta_wp=0.0,
                           l_se=1, l_ew=1, l_wp=1)
        b = kin.ChainState(theta_se=0.2, theta_ew=0.5, theta_wp=0.9,
                           l_se=1, l_ew=1, l_wp=1)
        d_se, d_ew, d_wp = kin.relative_deltas(a, b)
        assert (d_se, d_ew, d_wp) == pytest.approx((0.2, 0.3, 0.4))

    def test_wrap_boundary_matches_oracle(self, rng):
        for _ in range(1000):
            ta = rng.uniform(-math.pi, math.pi, size=3)
            tb = rng.uniform(-math.pi, math.pi, size=3)
            a = kin.ChainState(*ta, 1.0, 1.0, 1.0)
            b = kin.ChainState(*tb, 1.0, 1.0, 1.0)
            d_se, d_ew, d_wp = kin.relative_deltas(a, b)
            o_se = wrap_oracle(tb[0] - ta[0])
            o_ew = wrap_oracle(tb[1] - ta[1]) - o_se
            o_wp = wrap_oracle(tb[2] - ta[2]) - o_ew - o_se
            assert d_se == pytest.approx(o_se, abs=1e-9)
            assert d_ew == pytest.approx(o_ew, abs=1e-9)
            assert d_wp == pytest.approx(o_wp, abs=1e-9)


def hide_left_arm(seq, frames):
    conf = np.array(seq.confidence)
    for f in frames:
        conf[f, 2:4] = 0.05
    return seq.replace(confidence=conf)


class TestFillGap:
    def test_zero_velocity_translates_arm_to_shoulder(self):
        seq = constant_velocity_sequence(
            9, 0.0, 0.0, 0.0,
            shoulder_path=lambda f: np.array([100.0 + 5 * f, 200.0 - 2 * f]))
        hidden = hide_left_arm(seq, range(3, 6))
        report = kin.detect_missing_hands(hidden, 0.3)
        filled = kin.fill_gap(hidden, report.gaps[0])
        for f in range(3, 6):
            shoulder = seq.xy[f, 0]
            expect = seq.xy[2, 0:4] - seq.xy[2, 0] + shoulder
            assert np.allclose(filled.xy[f, 0:4], expect, atol=1e-9)

    def test_constant_velocity_recovery_to_1e6_px(self):
        seq = constant_velocity_sequence(12, 0.05, 0.04, -0.03)
        hidden = hide_left_arm(seq, range(3, 8))
        report = kin.detect_missing_hands(hidden, 0.3)
        assert len(report.gaps) == 1 and report.gaps[0].n == 6
        filled = kin.fill_gap(hidden, report.gaps[0])
        err = np.abs(filled.xy[3:8, 0:4] - seq.xy[3:8, 0:4]).max()
        assert err <= 1e-6

    def test_n_equal_one_returns_unchanged(self):
        seq = constant_velocity_sequence(6, 0.02, 0.01, 0.0)
        gap = kin.GapAnnotation(side="left", last_visible=2, first_reappear=3,
                                threshold=0.3)
        assert kin.fill_gap(seq, gap) is seq

    def test_synthetic_flag_and_confidence(self):
        seq = constant_velocity_sequence(9, 0.02, 0.0, 0.0)
        hidden = hide_left_arm(seq, range(3, 6))
        filled, report = kin.fill_all_gaps(hidden, 0.3)
        assert len(report.gaps) == 1
        for f in range(3, 6):
            assert filled.synthetic[f, 1:4].all()  # elbow, wrist, palm
            assert filled.synthetic[f, 8:10].all()  # finger keypoints
            assert np.all(filled.confidence[f, 1:4] == 0.3)
            assert not filled.synthetic[f, 0]  # shoulder was observed
        assert not filled.synthetic[2].any() and not filled.synthetic[6].any()

    def test_fingers_ride_with_palm(self):
        seq = constant_velocity_sequence(9, 0.05, -0.02, 0.01)
        hidden = hide_left_arm(seq, range(3, 6))
        filled, report = kin.fill_all_gaps(hidden, 0.3)
        for f in range(3, 6):
            shift = filled.xy[f, 3] - seq.xy[2, 3]
            assert np.allclose(filled.xy[f, 8], seq.xy[2, 8] + shift, atol=1e-9)

    def test_bone_lengths_preserved_under_zero_velocity(self):
        seq = constant_velocity_sequence(9, 0.0, 0.0, 0.0)
        hidden = hide_left_arm(seq, range(3, 6))
        filled, _ = kin.fill_all_gaps(hidden, 0.3)
        ref = kin.chain_angles(seq, 2, "left")
        for f in range(3, 6):
            st = kin.chain_angles(filled, f, "left")
            assert st.l_se == pytest.approx(ref.l_se, abs=1e-9)
            assert st.l_ew == pytest.approx(ref.l_ew, abs=1e-9)
            assert st.l_wp == pytest.approx(ref.l_wp, abs=1e-9)

    def test_sequential_consistency_unrelated_frames(self):
        seq = constant_velocity_sequence(12, 0.03, 0.02, 0.01)
        hidden = hide_left_arm(seq, range(4, 7))
        report = kin.detect_missing_hands(hidden, 0.3)
        filled_a = kin.fill_gap(hidden, report.gaps[0])
        # permute a frame far outside the gap and its brackets
        xy = np.array(hidden.xy)
        xy[10] = xy[10][::-1]
        permuted = hidden.replace(xy=xy)
        filled_b = kin.fill_gap(permuted, report.gaps[0])
        assert np.allclose(filled_a.xy[4:7], filled_b.xy[4:7], atol=0)

    def test_boundary_gap_unfillable(self):
        seq = constant_velocity_sequence(6, 0.0, 0.0, 0.0)
        gap = kin.GapAnnotation(side="left", last_visible=-1, first_reappear=2,
                                threshold=0.3)
        with pytest.raises(UnfillableGapError):
            kin.fill_gap(seq, gap)

    def test_missing_shoulder_precondition(self):
        seq = constant_velocity_sequence(9, 0.01, 0.0, 0.0)
        hidden = hide_left_arm(seq, range(3, 6))
        conf = np.array(hidden.confidence)
        conf[4, 0] = 0.1  # shoulder lost inside the gap
        hidden = hidden.replace(confidence=conf)
        report = kin.detect_missing_hands(hidden, 0.3)
        with pytest.raises(PreconditionError):
            kin.fill_gap(hidden, report.gaps[0])
