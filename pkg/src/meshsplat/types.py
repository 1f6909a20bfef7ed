"""Shared domain types and asset validation.

All types are immutable value objects: array fields are converted to float64 /
int64, C-contiguous, and marked read-only at construction, so instances can be
shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from .transforms import IDENTITY_QUAT

ROOT_PARENT = np.iinfo(np.int64).max  # sentinel parent index marking the root joint

QUAT_UNIT_TOL = 1e-6
WEIGHT_SUM_TOL = 1e-6
MIN_TRIANGLE_AREA = 1e-12


class MeshSplatError(Exception):
    """Base for all package errors."""


class ValidationError(MeshSplatError):
    pass


class LayoutError(MeshSplatError):
    """Keypoint layout does not expose a required joint name."""


class DegenerateBoneError(MeshSplatError):
    pass


class UnfillableGapError(MeshSplatError):
    pass


class PreconditionError(MeshSplatError):
    pass


class AssetFormatError(MeshSplatError):
    pass


class ContractViolationError(MeshSplatError):
    pass


class FitError(MeshSplatError):
    pass


def _freeze(arr, dtype=float, shape=None, name="array"):
    # always copy: freezing must never flip writeable on a caller-owned array
    out = np.array(arr, dtype=dtype, order="C", copy=True)
    if shape is not None:
        expect = tuple(shape)
        got = out.shape
        if len(expect) != len(got) or any(
            e is not None and e != g for e, g in zip(expect, got)
        ):
            raise ValidationError(f"{name}: expected shape {expect}, got {got}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Splat:
    """One Gaussian bound to a mesh polygon, in the polygon's local frame."""

    mu_local: np.ndarray
    rot_local: np.ndarray
    scale_local: np.ndarray  # strictly positive linear scale
    color: np.ndarray
    opacity: float
    polygon_id: int

    def __post_init__(self):
        object.__setattr__(self, "mu_local", _freeze(self.mu_local, shape=(3,), name="mu_local"))
        object.__setattr__(self, "rot_local", _freeze(self.rot_local, shape=(4,), name="rot_local"))
        object.__setattr__(self, "scale_local", _freeze(self.scale_local, shape=(3,), name="scale_local"))
        object.__setattr__(self, "color", _freeze(self.color, shape=(3,), name="color"))
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "polygon_id", int(self.polygon_id))


@dataclass(frozen=True)
class SplatSet:
    """Column layout for a collection of splats; scales are kept in log space."""

    mu_local: np.ndarray  # (N, 3)
    rot_local: np.ndarray  # (N, 4) unit quaternions
    log_scale: np.ndarray  # (N, 3)
    color: np.ndarray  # (N, 3) in [0, 1]
    opacity: np.ndarray  # (N,) in [0, 1]
    polygon_id: np.ndarray  # (N,) int

    def __post_init__(self):
        n = np.shape(self.mu_local)[0]
        object.__setattr__(self, "mu_local", _freeze(self.mu_local, shape=(n, 3), name="mu_local"))
        object.__setattr__(self, "rot_local", _freeze(self.rot_local, shape=(n, 4), name="rot_local"))
        object.__setattr__(self, "log_scale", _freeze(self.log_scale, shape=(n, 3), name="log_scale"))
        object.__setattr__(self, "color", _freeze(self.color, shape=(n, 3), name="color"))
        object.__setattr__(self, "opacity", _freeze(self.opacity, shape=(n,), name="opacity"))
        object.__setattr__(self, "polygon_id", _freeze(self.polygon_id, dtype=np.int64, shape=(n,), name="polygon_id"))

    def __len__(self):
        return self.mu_local.shape[0]

    def __getitem__(self, i) -> Splat:
        return Splat(
            mu_local=self.mu_local[i],
            rot_local=self.rot_local[i],
            scale_local=np.exp(self.log_scale[i]),
            color=self.color[i],
            opacity=float(self.opacity[i]),
            polygon_id=int(self.polygon_id[i]),
        )

    @property
    def scale_local(self):
        return np.exp(self.log_scale)

    @classmethod
    def from_splats(cls, splats: Sequence[Splat]) -> "SplatSet":
        return cls(
            mu_local=np.array([s.mu_local for s in splats]).reshape(-1, 3),
            rot_local=np.array([s.rot_local for s in splats]).reshape(-1, 4),
            log_scale=np.log(np.array([s.scale_local for s in splats]).reshape(-1, 3)),
            color=np.array([s.color for s in splats]).reshape(-1, 3),
            opacity=np.array([s.opacity for s in splats]),
            polygon_id=np.array([s.polygon_id for s in splats], dtype=np.int64),
        )

    @classmethod
    def coerce(cls, splats) -> "SplatSet":
        if isinstance(splats, cls):
            return splats
        return cls.from_splats(list(splats))

    def replace(self, **kw) -> "SplatSet":
        return replace(self, **kw)


@dataclass(frozen=True)
class PolygonFrame:
    """Similarity transform carrying splats from canonical to posed space."""

    k: float  # polygon scale, > 0
    rot: np.ndarray  # (4,) unit quaternion
    t: np.ndarray  # (3,) polygon center
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "k", float(self.k))
        object.__setattr__(self, "rot", _freeze(self.rot, shape=(4,), name="rot"))
        object.__setattr__(self, "t", _freeze(self.t, shape=(3,), name="t"))


@dataclass(frozen=True)
class PolygonFrameSet:
    k: np.ndarray  # (M,)
    rot: np.ndarray  # (M, 4)
    t: np.ndarray  # (M, 3)
    degenerate: np.ndarray  # (M,) bool

    def __post_init__(self):
        m = np.shape(self.k)[0]
        object.__setattr__(self, "k", _freeze(self.k, shape=(m,), name="k"))
        object.__setattr__(self, "rot", _freeze(self.rot, shape=(m, 4), name="rot"))
        object.__setattr__(self, "t", _freeze(self.t, shape=(m, 3), name="t"))
        object.__setattr__(self, "degenerate", _freeze(self.degenerate, dtype=bool, shape=(m,), name="degenerate"))

    def __len__(self):
        return self.k.shape[0]

    def __getitem__(self, i) -> PolygonFrame:
        return PolygonFrame(k=float(self.k[i]), rot=self.rot[i], t=self.t[i],
                            degenerate=bool(self.degenerate[i]))


@dataclass(frozen=True)
class WorldGaussians:
    """Splats deformed into world space, ready for projection."""

    mu: np.ndarray  # (N, 3)
    rot: np.ndarray  # (N, 4)
    scale: np.ndarray  # (N, 3) linear
    color: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)
    flagged: np.ndarray  # (N,) bool, True where a degenerate frame was substituted

    def __post_init__(self):
        n = np.shape(self.mu)[0]
        object.__setattr__(self, "mu", _freeze(self.mu, shape=(n, 3), name="mu"))
        object.__setattr__(self, "rot", _freeze(self.rot, shape=(n, 4), name="rot"))
        object.__setattr__(self, "scale", _freeze(self.scale, shape=(n, 3), name="scale"))
        object.__setattr__(self, "color", _freeze(self.color, shape=(n, 3), name="color"))
        object.__setattr__(self, "opacity", _freeze(self.opacity, shape=(n,), name="opacity"))
        object.__setattr__(self, "flagged", _freeze(self.flagged, dtype=bool, shape=(n,), name="flagged"))

    def __len__(self):
        return self.mu.shape[0]


@dataclass(frozen=True)
class SkinnedMesh:
    """Canonical mesh, skeleton, and skinning weights plus named metadata.

    joint_parents uses ROOT_PARENT for the single root. Optional bases make
    shape/expression coefficients active; plain meshes treat them as inert.
    Index sets (face_center, eye_midpoint, face_patch) and the left/right
    joint correspondence ship with the asset because neither is derivable
    from geometry alone.
    """

    vertices: np.ndarray  # (N, 3) canonical positions
    triangles: np.ndarray  # (M, 3) vertex indices
    joint_names: tuple
    joint_parents: np.ndarray  # (J,)
    joint_rest: np.ndarray  # (J, 3)
    skin_weights: np.ndarray  # (N, J)
    shape_basis: np.ndarray | None = None  # (N, 3, B)
    expr_basis: np.ndarray | None = None  # (N, 3, E)
    keypoint_map: Mapping[str, str] = field(default_factory=dict)
    face_center_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    eye_midpoint_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    face_patch_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    left_right_map: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        n = np.shape(self.vertices)[0]
        j = len(self.joint_names)
        object.__setattr__(self, "vertices", _freeze(self.vertices, shape=(n, 3), name="vertices"))
        object.__setattr__(self, "triangles", _freeze(self.triangles, dtype=np.int64, shape=(None, 3), name="triangles"))
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "joint_parents", _freeze(self.joint_parents, dtype=np.int64, shape=(j,), name="joint_parents"))
        object.__setattr__(self, "joint_rest", _freeze(self.joint_rest, shape=(j, 3), name="joint_rest"))
        object.__setattr__(self, "skin_weights", _freeze(self.skin_weights, shape=(n, j), name="skin_weights"))
        for attr in ("shape_basis", "expr_basis"):
            val = getattr(self, attr)
            if val is not None:
                object.__setattr__(self, attr, _freeze(val, shape=(n, 3, None), name=attr))
        for attr in ("face_center_idx", "eye_midpoint_idx", "face_patch_idx"):
            object.__setattr__(self, attr, _freeze(getattr(self, attr), dtype=np.int64, shape=(None,), name=attr))
        object.__setattr__(self, "keypoint_map", dict(self.keypoint_map))
        object.__setattr__(self, "left_right_map", dict(self.left_right_map))

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    @property
    def num_joints(self):
        return self.joint_rest.shape[0]

    @property
    def shape_dim(self):
        return 0 if self.shape_basis is None else self.shape_basis.shape[2]

    @property
    def expr_dim(self):
        return 0 if self.expr_basis is None else self.expr_basis.shape[2]

    def root_index(self) -> int:
        roots = np.nonzero(self.joint_parents == ROOT_PARENT)[0]
        if len(roots) != 1:
            raise ValidationError(f"expected exactly one root joint, found {len(roots)}")
        return int(roots[0])

    def joint_index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise LayoutError(f"mesh has no joint named {name!r}") from None


@dataclass(frozen=True)
class PoseParams:
    """Per-joint axis-angle rotations plus global and identity parameters."""

    joint_rotations: np.ndarray  # (J, 3) axis-angle, radians
    root_translation: np.ndarray  # (3,) meters
    shape: np.ndarray = field(default_factory=lambda: np.empty(0))
    joint_offsets: np.ndarray | None = None  # (J, 3), zeros if omitted
    expression: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        j = np.shape(self.joint_rotations)[0]
        object.__setattr__(self, "joint_rotations", _freeze(self.joint_rotations, shape=(j, 3), name="joint_rotations"))
        object.__setattr__(self, "root_translation", _freeze(self.root_translation, shape=(3,), name="root_translation"))
        object.__setattr__(self, "shape", _freeze(self.shape, shape=(None,), name="shape"))
        offsets = self.joint_offsets if self.joint_offsets is not None else np.zeros((j, 3))
        object.__setattr__(self, "joint_offsets", _freeze(offsets, shape=(j, 3), name="joint_offsets"))
        object.__setattr__(self, "expression", _freeze(self.expression, shape=(None,), name="expression"))

    @classmethod
    def identity(cls, mesh: SkinnedMesh) -> "PoseParams":
        return cls(
            joint_rotations=np.zeros((mesh.num_joints, 3)),
            root_translation=np.zeros(3),
            shape=np.zeros(mesh.shape_dim),
            joint_offsets=np.zeros((mesh.num_joints, 3)),
            expression=np.zeros(mesh.expr_dim),
        )

    def replace(self, **kw) -> "PoseParams":
        return replace(self, **kw)

    def validate_for(self, mesh: SkinnedMesh):
        if self.joint_rotations.shape[0] != mesh.num_joints:
            raise ValidationError(
                f"pose has {self.joint_rotations.shape[0]} joints, mesh has {mesh.num_joints}")
        if self.shape.size not in (0, mesh.shape_dim) and mesh.shape_dim > 0:
            raise ValidationError(
                f"shape has {self.shape.size} coefficients, mesh basis has {mesh.shape_dim}")
        if mesh.shape_dim == 0 and self.shape.size > 0:
            pass  # inert coefficients are allowed on plain meshes
        if self.expression.size not in (0, mesh.expr_dim) and mesh.expr_dim > 0:
            raise ValidationError(
                f"expression has {self.expression.size} coefficients, mesh basis has {mesh.expr_dim}")
        for name, arr in (("joint_rotations", self.joint_rotations),
                          ("root_translation", self.root_translation),
                          ("shape", self.shape),
                          ("joint_offsets", self.joint_offsets),
                          ("expression", self.expression)):
            if arr.size and not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics (pixels) with a rigid world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (4,) unit quaternion, world -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "rotation", _freeze(self.rotation, shape=(4,), name="rotation"))
        object.__setattr__(self, "translation", _freeze(self.translation, shape=(3,), name="translation"))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image dimensions must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    def position(self):
        """Camera center in world coordinates."""
        from .transforms import quat_conjugate, quat_rotate

        return -quat_rotate(quat_conjugate(self.rotation), self.translation)


@dataclass(frozen=True)
class KeypointSequence:
    """Per-frame 2D keypoints with confidences over a named layout."""

    layout: tuple  # K joint names
    xy: np.ndarray  # (F, K, 2) pixels
    confidence: np.ndarray  # (F, K) in [0, 1]
    synthetic: np.ndarray | None = None  # (F, K) bool, True for gap-filled points

    def __post_init__(self):
        object.__setattr__(self, "layout", tuple(self.layout))
        k = len(self.layout)
        f = np.shape(self.xy)[0]
        object.__setattr__(self, "xy", _freeze(self.xy, shape=(f, k, 2), name="xy"))
        object.__setattr__(self, "confidence", _freeze(self.confidence, shape=(f, k), name="confidence"))
        syn = self.synthetic if self.synthetic is not None else np.zeros((f, k), dtype=bool)
        object.__setattr__(self, "synthetic", _freeze(syn, dtype=bool, shape=(f, k), name="synthetic"))
        if self.confidence.size and (self.confidence.min() < 0 or self.confidence.max() > 1):
            raise ValidationError("confidences must lie in [0, 1]")

    @property
    def num_frames(self):
        return self.xy.shape[0]

    @property
    def num_keypoints(self):
        return len(self.layout)

    def index(self, name: str) -> int:
        try:
            return self.layout.index(name)
        except ValueError:
            raise LayoutError(f"layout has no keypoint named {name!r}") from None

    def replace(self, **kw) -> "KeypointSequence":
        return replace(self, **kw)


@dataclass(frozen=True)
class FrameKeypoints:
    """One frame's worth of named 2D keypoints."""

    layout: tuple
    xy: np.ndarray  # (K, 2)
    confidence: np.ndarray  # (K,)
    synthetic: np.ndarray | None = None  # (K,) bool

    def __post_init__(self):
        object.__setattr__(self, "layout", tuple(self.layout))
        k = len(self.layout)
        object.__setattr__(self, "xy", _freeze(self.xy, shape=(k, 2), name="xy"))
        object.__setattr__(self, "confidence", _freeze(self.confidence, shape=(k,), name="confidence"))
        syn = self.synthetic if self.synthetic is not None else np.zeros(k, dtype=bool)
        object.__setattr__(self, "synthetic", _freeze(syn, dtype=bool, shape=(k,), name="synthetic"))

    @classmethod
    def from_sequence(cls, seq: "KeypointSequence", frame: int) -> "FrameKeypoints":
        return cls(layout=seq.layout, xy=seq.xy[frame],
                   confidence=seq.confidence[frame], synthetic=seq.synthetic[frame])


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the fitting and splat-training objectives."""

    w_init: float = 0.1
    w_vertex: float = 10.0
    w_lap: float = 10000.0
    w_edge: float = 1.0
    w_shape: float = 0.01
    w_jo: float = 100.0
    w_lpips: float = 0.01  # hook only; no perceptual backend ships with this package
    w_ssim: float = 0.1
    w_sobel: float = 1.0
    w_knn: float = 0.01
    w_sym: float = 1.0

    def __post_init__(self):
        for f_ in fields(self):
            if getattr(self, f_.name) < 0:
                raise ValidationError(f"{f_.name} must be nonnegative")

    def replace(self, **kw) -> "LossWeights":
        return replace(self, **kw)


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    issues: tuple

    def __bool__(self):
        return self.ok

    def message(self) -> str:
        if self.ok:
            return "ok"
        return "; ".join(f"[{i.code}] {i.message}" for i in self.issues)


def triangle_areas(vertices, triangles):
    v = np.asarray(vertices, dtype=float)
    t = np.asarray(triangles)
    e1 = v[t[:, 1]] - v[t[:, 0]]
    e2 = v[t[:, 2]] - v[t[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=-1)


def validate_asset(mesh: SkinnedMesh, splats=None) -> ValidationReport:
    """Check every structural invariant of a mesh and optional splat set."""
    issues = []

    def bad(code, message):
        issues.append(ValidationIssue(code, message))

    n, j, m = mesh.num_vertices, mesh.num_joints, mesh.num_triangles

    if mesh.triangles.size:
        lo, hi = mesh.triangles.min(), mesh.triangles.max()
        if lo < 0 or hi >= n:
            bad("index out of range", f"triangle vertex index {hi if hi >= n else lo} outside [0, {n})")

    # single-rooted acyclic hierarchy
    roots = np.nonzero(mesh.joint_parents == ROOT_PARENT)[0]
    if len(roots) != 1:
        bad("hierarchy", f"expected exactly one root joint, found {len(roots)}")
    else:
        seen_order = {int(roots[0])}
        pending = [i for i in range(j) if i != roots[0]]
        for _ in range(j + 1):
            rest = []
            for i in pending:
                p = int(mesh.joint_parents[i])
                if p != ROOT_PARENT and (p < 0 or p >= j):
                    bad("index out of range", f"joint {i} has parent index {p} outside [0, {j})")
                elif p in seen_order:
                    seen_order.add(i)
                else:
                    rest.append(i)
            if not rest:
                break
            if len(rest) == len(pending):
                bad("hierarchy", f"joints {sorted(rest)} unreachable from the root (cycle or orphan)")
                break
            pending = rest

    sums = mesh.skin_weights.sum(axis=1) if n else np.empty(0)
    off = np.nonzero(np.abs(sums - 1.0) > WEIGHT_SUM_TOL)[0]
    if off.size:
        bad("weights not normalized", f"skin-weight row {off[0]} sums to {sums[off[0]]:.6g}")
    if n and mesh.skin_weights.size and mesh.skin_weights.min() < 0:
        row = int(np.nonzero((mesh.skin_weights < 0).any(axis=1))[0][0])
        bad("weights negative", f"skin-weight row {row} has a negative entry")

    if mesh.triangles.size:
        areas = triangle_areas(mesh.vertices, mesh.triangles)
        degenerate = np.nonzero(areas <= MIN_TRIANGLE_AREA)[0]
        if degenerate.size:
            bad("degenerate triangle", f"triangle {degenerate[0]} has area {areas[degenerate[0]]:.3g}")

    for set_name in ("face_center_idx", "eye_midpoint_idx", "face_patch_idx"):
        idx = getattr(mesh, set_name)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            bad("index out of range", f"{set_name} references vertex {int(idx.max())} outside [0, {n})")

    for a, b in mesh.left_right_map.items():
        if a not in mesh.joint_names or b not in mesh.joint_names:
            bad("left_right_map", f"correspondence {a!r} -> {b!r} names an unknown joint")

    if splats is not None:
        ss = SplatSet.coerce(splats)
        if len(ss):
            norms = np.linalg.norm(ss.rot_local, axis=-1)
            off_q = np.nonzero(np.abs(norms - 1.0) > QUAT_UNIT_TOL)[0]
            if off_q.size:
                bad("quaternion not unit", f"splat {off_q[0]} rotation norm {norms[off_q[0]]:.6g}")
            if not np.all(np.isfinite(ss.log_scale)):
                bad("scale not positive", "splat log-scale contains non-finite values")
            op_bad = np.nonzero((ss.opacity < 0) | (ss.opacity > 1))[0]
            if op_bad.size:
                bad("opacity range", f"splat {op_bad[0]} opacity {ss.opacity[op_bad[0]]:.6g} outside [0, 1]")
            col_bad = np.nonzero((ss.color < 0).any(axis=1) | (ss.color > 1).any(axis=1))[0]
            if col_bad.size:
                bad("color range", f"splat {col_bad[0]} color outside [0, 1]^3")
            pid_bad = np.nonzero((ss.polygon_id < 0) | (ss.polygon_id >= m))[0]
            if pid_bad.size:
                bad("index out of range",
                    f"splat {pid_bad[0]} polygon_id {ss.polygon_id[pid_bad[0]]} outside [0, {m})")

    return ValidationReport(ok=not issues, issues=tuple(issues))
