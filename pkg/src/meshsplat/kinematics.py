"""Missing-hand recovery over 2D keypoint sequences.

A hand counts as missing in a frame when both its wrist and palm confidences
fall below the threshold. Interior gaps are refilled by driving the
shoulder-elbow-wrist-palm chain at the constant per-segment angular velocity
implied by the bracketing visible frames; finger keypoints ride rigidly with
the palm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .transforms import wrap_angle
from .types import (
    DegenerateBoneError,
    KeypointSequence,
    LayoutError,
    PreconditionError,
    UnfillableGapError,
    ValidationError,
)

ARM_PARTS = ("shoulder", "elbow", "wrist", "palm")
FINGER_TOKENS = ("thumb", "index", "middle", "ring", "pinky", "hand")
MIN_BONE_LENGTH = 1e-9
DEFAULT_CONFIDENCE_THRESHOLD = 0.3


@dataclass(frozen=True)
class GapAnnotation:
    """A maximal missing-hand run bracketed by visible frames.

    last_visible is t-n, first_reappear is t; the frames to synthesize are
    t-n+1 .. t-1 (none when n == 1).
    """

    side: str
    last_visible: int
    first_reappear: int
    threshold: float

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValidationError(f"side must be 'left' or 'right', got {self.side!r}")
        if self.first_reappear <= self.last_visible:
            raise ValidationError("first_reappear must come after last_visible")

    @property
    def n(self) -> int:
        return self.first_reappear - self.last_visible


@dataclass(frozen=True)
class BoundaryGap:
    """A missing run touching the sequence start or end; not fillable."""

    side: str
    start: int
    end: int  # inclusive


@dataclass(frozen=True)
class GapReport:
    gaps: tuple
    unfillable: tuple


@dataclass(frozen=True)
class ChainState:
    """Absolute image-plane segment angles (CCW from +x) and pixel lengths."""

    theta_se: float
    theta_ew: float
    theta_wp: float
    l_se: float
    l_ew: float
    l_wp: float


@dataclass(frozen=True)
class AngularVelocities:
    omega_se: float
    omega_ew: float
    omega_wp: float


def arm_indices(layout, side: str) -> dict:
    """Indices of the side's shoulder/elbow/wrist/palm; LayoutError if absent."""
    layout = list(layout)
    out = {}
    for part in ARM_PARTS:
        name = f"{side}_{part}"
        if name not in layout:
            raise LayoutError(f"layout is missing required keypoint {name!r}")
        out[part] = layout.index(name)
    return out


def finger_indices(layout, side: str) -> list:
    """Keypoints that ride with the palm: side-prefixed finger/hand names."""
    prefix = f"{side}_"
    hits = []
    for i, name in enumerate(layout):
        if not name.startswith(prefix):
            continue
        rest = name[len(prefix):]
        if any(tok in rest for tok in FINGER_TOKENS):
            hits.append(i)
    return hits


def detect_missing_hands(seq: KeypointSequence, threshold: float) -> GapReport:
    """Annotate missing-hand runs; boundary-touching runs are unfillable."""
    if seq.num_frames < 2:
        raise PreconditionError("sequence must have at least 2 frames")
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError("threshold must lie in [0, 1]")

    gaps = []
    unfillable = []
    f = seq.num_frames
    for side in ("left", "right"):
        idx = arm_indices(seq.layout, side)
        wrist = seq.confidence[:, idx["wrist"]]
        palm = seq.confidence[:, idx["palm"]]
        missing = (wrist < threshold) & (palm < threshold)
        i = 0
        while i < f:
            if not missing[i]:
                i += 1
                continue
            j = i
            while j + 1 < f and missing[j + 1]:
                j += 1
            if i == 0 or j == f - 1:
                unfillable.append(BoundaryGap(side=side, start=i, end=j))
            else:
                gaps.append(GapAnnotation(side=side, last_visible=i - 1,
                                          first_reappear=j + 1, threshold=threshold))
            i = j + 1
    return GapReport(gaps=tuple(gaps), unfillable=tuple(unfillable))


def chain_state_from_points(s, e, w, p) -> ChainState:
    """Chain angles/lengths from four 2D points (shoulder, elbow, wrist, palm)."""
    pts = [np.asarray(q, dtype=float) for q in (s, e, w, p)]
    angles = []
    lengths = []
    for a, b, name in ((pts[0], pts[1], "shoulder-elbow"),
                       (pts[1], pts[2], "elbow-wrist"),
                       (pts[2], pts[3], "wrist-palm")):
        d = b - a
        length = math.hypot(d[0], d[1])
        if length < MIN_BONE_LENGTH:
            raise DegenerateBoneError(f"{name} bone is degenerate (length {length:.3g})")
        angles.append(float(wrap_angle(math.atan2(d[1], d[0]))))
        lengths.append(length)
    return ChainState(theta_se=angles[0], theta_ew=angles[1], theta_wp=angles[2],
                      l_se=lengths[0], l_ew=lengths[1], l_wp=lengths[2])


def chain_angles(seq: KeypointSequence, frame: int, side: str) -> ChainState:
    idx = arm_indices(seq.layout, side)
    xy = seq.xy[frame]
    return chain_state_from_points(xy[idx["shoulder"]], xy[idx["elbow"]],
                                   xy[idx["wrist"]], xy[idx["palm"]])


def relative_deltas(state_a: ChainState, state_b: ChainState):
    """Per-segment angle changes in the chain's own frame.

    The raw absolute-angle differences Δθ' are wrapped to (−π, π]; the chain
    decomposition then removes each parent segment's contribution.
    """
    d_se_abs = float(wrap_angle(state_b.theta_se - state_a.theta_se))
    d_ew_abs = float(wrap_angle(state_b.theta_ew - state_a.theta_ew))
    d_wp_abs = float(wrap_angle(state_b.theta_wp - state_a.theta_wp))
    d_se = d_se_abs
    d_ew = d_ew_abs - d_se
    d_wp = d_wp_abs - d_ew - d_se
    return d_se, d_ew, d_wp


def segment_velocities(state_a: ChainState, state_b: ChainState, n: int) -> AngularVelocities:
    d_se, d_ew, d_wp = relative_deltas(state_a, state_b)
    return AngularVelocities(omega_se=d_se / n, omega_ew=d_ew / n, omega_wp=d_wp / n)


def fill_gap(seq: KeypointSequence, gap: GapAnnotation) -> KeypointSequence:
    """Synthesize the gap's interior frames from the constant-velocity chain.

    Frame i in (t-n, t) places the elbow at the shoulder plus the t-n bone
    advanced by ΔT·ω (ΔT = i - t + n); wrist and palm accumulate the parent
    segment velocities. Synthesized points carry confidence == threshold and
    the synthetic flag. Bone lengths are carried forward from frame t-n,
    which pure rotation leaves unchanged.
    """
    t_prev = gap.last_visible
    t = gap.first_reappear
    if t_prev < 0 or t >= seq.num_frames:
        raise UnfillableGapError(
            f"gap [{t_prev}, {t}] is not bracketed by frames inside the sequence")
    if gap.n == 1:
        return seq

    idx = arm_indices(seq.layout, gap.side)
    state_a = chain_angles(seq, t_prev, gap.side)
    state_b = chain_angles(seq, t, gap.side)
    omega = segment_velocities(state_a, state_b, gap.n)

    fingers = finger_indices(seq.layout, gap.side)
    palm_prev = seq.xy[t_prev, idx["palm"]].copy()

    xy = np.array(seq.xy)
    conf = np.array(seq.confidence)
    syn = np.array(seq.synthetic)

    for i in range(t_prev + 1, t):
        if conf[i, idx["shoulder"]] < gap.threshold:
            raise PreconditionError(
                f"shoulder not visible at frame {i}; cannot anchor the chain")
        dt = i - t + gap.n
        a_se = state_a.theta_se + dt * omega.omega_se
        a_ew = state_a.theta_ew + dt * (omega.omega_se + omega.omega_ew)
        a_wp = state_a.theta_wp + dt * (omega.omega_se + omega.omega_ew + omega.omega_wp)

        s = xy[i, idx["shoulder"]]
        e = s + state_a.l_se * np.array([math.cos(a_se), math.sin(a_se)])
        w = e + state_a.l_ew * np.array([math.cos(a_ew), math.sin(a_ew)])
        p = w + state_a.l_wp * np.array([math.cos(a_wp), math.sin(a_wp)])

        for part, point in (("elbow", e), ("wrist", w), ("palm", p)):
            k = idx[part]
            xy[i, k] = point
            conf[i, k] = gap.threshold
            syn[i, k] = True
        shift = p - palm_prev
        for k in fingers:
            xy[i, k] = seq.xy[t_prev, k] + shift
            conf[i, k] = gap.threshold
            syn[i, k] = True

    return seq.replace(xy=xy, confidence=conf, synthetic=syn)


def fill_all_gaps(seq: KeypointSequence, threshold: float = DEFAULT_CONFIDENCE_THRESHOLD):
    """Detect and fill every interior gap; returns (sequence, report)."""
    report = detect_missing_hands(seq, threshold)
    out = seq
    for gap in report.gaps:
        out = fill_gap(out, gap)
    return out, report
