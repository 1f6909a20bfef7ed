"""Per-frame articulated pose optimization against 2D keypoints.

The optimizer is a damped Gauss-Newton loop: curvature comes from the
keypoint residuals (IRLS-weighted so the L1 objective is honored), all other
terms contribute first-order gradients only, and a backtracking line search
accepts only strict decreases of the true loss, so the reported loss sequence
is monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body import (
    carried_point_jacobian,
    face_visibility,
    forward_kinematics,
    pinhole_jacobian,
    project_joints,
    skin_vertices,
)
from .losses import _face_patch_structure, _uniform_laplacian, fitting_loss
from .transforms import quat_rotate, quat_to_matrix
from .types import (
    Camera,
    FitError,
    FrameKeypoints,
    KeypointSequence,
    LossWeights,
    PoseParams,
    SkinnedMesh,
)

DEFAULT_FOCAL_FACTOR = 1.2


def init_camera(width: int, height: int,
                focal_factor: float = DEFAULT_FOCAL_FACTOR) -> Camera:
    """Dummy starting camera: centered, unrotated, untranslated, with the
    focal length approximated as focal_factor times the larger dimension."""
    return Camera(fx=focal_factor * max(width, height),
                  fy=focal_factor * max(width, height),
                  cx=width / 2.0, cy=height / 2.0,
                  rotation=np.array([1.0, 0.0, 0.0, 0.0]),
                  translation=np.zeros(3), width=width, height=height)


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 200
    rel_tol: float = 1e-6
    patience: int = 10
    step_tol: float = 1e-6  # accepted parameter steps below this are converged
    damping: float = 1e-3
    damping_max: float = 1e8
    irls_delta: float = 1e-3  # px floor for the L1 reweighting
    optimize_rotations: bool = True
    optimize_translation: bool = True
    optimize_shape: bool = False
    optimize_offsets: bool = False
    weights: LossWeights = field(default_factory=lambda: LossWeights(w_sym=0.0))


@dataclass
class FitReport:
    converged: bool
    iterations: int
    initial_loss: float
    final_loss: float
    breakdown: dict
    loss_history: list
    aborted: str | None = None


@dataclass
class FitResult:
    pose: PoseParams
    report: FitReport


class _ParamSpace:
    """Flat view over the optimized subset of PoseParams."""

    def __init__(self, mesh: SkinnedMesh, base: PoseParams, opts: FitOptions):
        self.mesh = mesh
        self.base = base
        self.opts = opts
        self.n_joints = mesh.num_joints
        self.blocks = []
        n = 0
        if opts.optimize_rotations:
            self.blocks.append(("rot", n, 3 * self.n_joints))
            n += 3 * self.n_joints
        if opts.optimize_translation:
            self.blocks.append(("trans", n, 3))
            n += 3
        if opts.optimize_shape and base.shape.size:
            self.blocks.append(("shape", n, base.shape.size))
            n += base.shape.size
        if opts.optimize_offsets:
            self.blocks.append(("offsets", n, 3 * self.n_joints))
            n += 3 * self.n_joints
        self.size = n

    def pack(self, pose: PoseParams) -> np.ndarray:
        vec = np.empty(self.size)
        for name, start, width in self.blocks:
            if name == "rot":
                vec[start:start + width] = pose.joint_rotations.ravel()
            elif name == "trans":
                vec[start:start + width] = pose.root_translation
            elif name == "shape":
                vec[start:start + width] = pose.shape
            elif name == "offsets":
                vec[start:start + width] = pose.joint_offsets.ravel()
        return vec

    def unpack(self, vec) -> PoseParams:
        pose = self.base
        kw = {}
        for name, start, width in self.blocks:
            chunk = vec[start:start + width]
            if name == "rot":
                kw["joint_rotations"] = chunk.reshape(self.n_joints, 3)
            elif name == "trans":
                kw["root_translation"] = chunk.copy()
            elif name == "shape":
                kw["shape"] = chunk.copy()
            elif name == "offsets":
                kw["joint_offsets"] = chunk.reshape(self.n_joints, 3)
        return pose.replace(**kw)

    def slice_of(self, name):
        for bname, start, width in self.blocks:
            if bname == name:
                return slice(start, start + width)
        return None


def _keypoint_rows(mesh, detected: FrameKeypoints):
    """(joint index, detected xy, weight) rows for mapped, weighted keypoints."""
    rows = []
    for ki, name in enumerate(detected.layout):
        joint_name = mesh.keypoint_map.get(name)
        if joint_name is None:
            continue
        w = float(detected.confidence[ki])
        if detected.synthetic[ki]:
            w *= 0.5
        if w <= 0:
            continue
        rows.append((mesh.joint_index(joint_name), detected.xy[ki], w))
    return rows


def _keypoint_system(mesh, pose, cam, detected, space: _ParamSpace):
    """Residuals r (2K,), weights, and the Jacobian d(residual)/d(params)."""
    transforms = forward_kinematics(mesh, pose)
    uv, valid = project_joints(transforms, cam)
    rows = [(j, xy, w) for (j, xy, w) in _keypoint_rows(mesh, detected) if valid[j]]
    if not rows:
        return np.empty(0), np.empty(0), np.empty((0, space.size)), transforms

    joints = np.array([r[0] for r in rows])
    targets = np.array([r[1] for r in rows])
    w = np.array([r[2] for r in rows])
    w = w / w.sum()

    resid = (uv[joints] - targets).ravel()  # (2K,)
    jac = np.zeros((2 * len(rows), space.size))

    w_mat = quat_to_matrix(cam.rotation)
    rest = mesh.joint_rest + pose.joint_offsets
    p_cam = quat_rotate(cam.rotation, transforms.positions[joints]) + cam.translation
    j_pin = pinhole_jacobian(p_cam, cam.fx, cam.fy) @ w_mat  # (K, 2, 3)

    rot_slice = space.slice_of("rot")
    if rot_slice is not None:
        onehot = np.zeros((len(rows), mesh.num_joints))
        onehot[np.arange(len(rows)), joints] = 1.0
        d_p = carried_point_jacobian(mesh, pose, transforms, rest[joints], onehot,
                                     list(range(mesh.num_joints)))  # (K, 3, J, 3)
        d_uv = np.einsum("kcb,kbai->kcai", j_pin, d_p)  # (K, 2, J, 3)
        jac[:, rot_slice] = d_uv.reshape(2 * len(rows), 3 * mesh.num_joints,
                                         order="C").reshape(2 * len(rows), -1)

    t_slice = space.slice_of("trans")
    if t_slice is not None:
        jac[:, t_slice] = j_pin.reshape(-1, 3)

    off_slice = space.slice_of("offsets")
    if off_slice is not None:
        # finite-difference columns: offsets move both pivots and bone vectors
        eps = 1e-6
        base_vec = space.pack(pose)
        for col in range(off_slice.start, off_slice.stop):
            plus = base_vec.copy()
            plus[col] += eps
            minus = base_vec.copy()
            minus[col] -= eps
            uv_p, _ = project_joints(forward_kinematics(mesh, space.unpack(plus)), cam)
            uv_m, _ = project_joints(forward_kinematics(mesh, space.unpack(minus)), cam)
            jac[:, col] = ((uv_p[joints] - uv_m[joints]) / (2 * eps)).ravel()

    weights2 = np.repeat(w, 2)
    return resid, weights2, jac, transforms


def _face_gradient(mesh, pose, transforms, cam, face_target, weights,
                   space: _ParamSpace):
    """Gradient of the (gated) face block w.r.t. the optimized parameters."""
    grad = np.zeros(space.size)
    if face_target is None or mesh.face_patch_idx.size == 0:
        return grad
    if not (mesh.face_center_idx.size and mesh.eye_midpoint_idx.size):
        return grad
    posed = skin_vertices(mesh, pose, transforms)
    if not face_visibility(posed, mesh.face_center_idx, mesh.eye_midpoint_idx, cam):
        return grad

    patch = mesh.face_patch_idx
    target = np.asarray(face_target, dtype=float)
    model = posed[patch]
    neighbors, edges = _face_patch_structure(mesh)
    p = len(patch)

    d_model = np.zeros_like(model)
    # vertex L1
    d_model += weights.w_vertex * np.sign(model - target) / model.size
    # uniform Laplacian L2
    dm = _uniform_laplacian(model, neighbors)
    dt = _uniform_laplacian(target, neighbors)
    resid = 2.0 * (dm - dt) / dm.size
    d_model += weights.w_lap * resid
    for i, nbrs in enumerate(neighbors):
        if nbrs:
            d_model[nbrs] -= weights.w_lap * resid[i] / len(nbrs)
    # edge lengths L1
    if edges:
        e = np.asarray(edges)
        vec = model[e[:, 0]] - model[e[:, 1]]
        len_m = np.linalg.norm(vec, axis=1)
        len_t = np.linalg.norm(target[e[:, 0]] - target[e[:, 1]], axis=1)
        s = np.sign(len_m - len_t) / len(edges)
        unit = vec / np.maximum(len_m[:, None], 1e-12)
        np.add.at(d_model, e[:, 0], weights.w_edge * s[:, None] * unit)
        np.add.at(d_model, e[:, 1], -weights.w_edge * s[:, None] * unit)

    from .body import shaped_vertices

    canonical = shaped_vertices(mesh, pose)[patch]
    rot_slice = space.slice_of("rot")
    if rot_slice is not None:
        d_p = carried_point_jacobian(mesh, pose, transforms, canonical,
                                     mesh.skin_weights[patch],
                                     list(range(mesh.num_joints)))  # (P, 3, J, 3)
        grad[rot_slice] += np.einsum("pc,pcai->ai", d_model, d_p).ravel()
    t_slice = space.slice_of("trans")
    if t_slice is not None:
        grad[t_slice] += d_model.sum(axis=0)
    s_slice = space.slice_of("shape")
    if s_slice is not None and mesh.shape_basis is not None:
        blended_rot = np.einsum("nj,jab->nab", mesh.skin_weights[patch],
                                quat_to_matrix(transforms.rotations))
        d_shape = np.einsum("pc,pcb,pbk->k", d_model, blended_rot,
                            mesh.shape_basis[patch])
        grad[s_slice] += d_shape
    return grad


def _loss_gradient(mesh, pose, cam, detected, init_pose, face_target,
                   space: _ParamSpace, weights: LossWeights,
                   param_delta: float = 1e-6):
    """Analytic gradient of fitting_loss plus the GN system pieces.

    Returns (grad, resid, w2, jac, curv_diag): curv_diag carries the IRLS
    curvature of the L1 init prior and the exact curvature of the quadratic
    regularizers, which pins parameters the keypoints cannot see.
    """
    resid, w2, jac, transforms = _keypoint_system(mesh, pose, cam, detected, space)
    grad = np.zeros(space.size)
    curv_diag = np.zeros(space.size)
    if resid.size:
        grad += jac.T @ (w2 * np.sign(resid))

    # L_init: mean |p - p0| over the full concatenated parameter vector
    def flat(p: PoseParams):
        return np.concatenate([p.joint_rotations.ravel(), p.root_translation,
                               p.shape, p.joint_offsets.ravel(), p.expression])

    pa, pb = flat(pose), flat(init_pose)
    total_len = pa.size
    signs = np.sign(pa - pb) / total_len
    j = mesh.num_joints
    diffs = np.abs(pa - pb)
    irls_init = weights.w_init / (total_len * np.maximum(diffs, param_delta))
    chunks = {"rot": slice(0, 3 * j),
              "trans": slice(3 * j, 3 * j + 3),
              "shape": slice(3 * j + 3, 3 * j + 3 + pose.shape.size),
              "offsets": slice(3 * j + 3 + pose.shape.size,
                               3 * j + 3 + pose.shape.size + 3 * j)}
    for name, chunk in chunks.items():
        sl = space.slice_of(name)
        if sl is not None:
            grad[sl] += weights.w_init * signs[chunk]
            curv_diag[sl] += irls_init[chunk]

    grad += _face_gradient(mesh, pose, transforms, cam, face_target, weights, space)

    s_slice = space.slice_of("shape")
    if s_slice is not None:
        grad[s_slice] += weights.w_shape * 2.0 * pose.shape
        curv_diag[s_slice] += weights.w_shape * 2.0
    off_slice = space.slice_of("offsets")
    if off_slice is not None:
        g_off = weights.w_jo * 2.0 * pose.joint_offsets
        if weights.w_sym > 0 and mesh.left_right_map:
            mirror = np.array([-1.0, 1.0, 1.0])
            n_pairs = len(mesh.left_right_map)
            for a, b in mesh.left_right_map.items():
                ja, jb = mesh.joint_index(a), mesh.joint_index(b)
                d = pose.joint_offsets[ja] - mirror * pose.joint_offsets[jb]
                g_off[ja] += weights.w_sym * 2.0 * d / n_pairs
                g_off[jb] += -weights.w_sym * 2.0 * mirror * d / n_pairs
        grad[off_slice] += g_off.ravel()
        curv_diag[off_slice] += weights.w_jo * 2.0

    return grad, resid, w2, jac, curv_diag


def fit_frame(mesh: SkinnedMesh, init_pose: PoseParams, detected: FrameKeypoints,
              face_target, cam: Camera, opts: FitOptions = FitOptions()) -> FitResult:
    """Minimize the fitting loss for one frame; monotone in accepted steps."""
    init_pose.validate_for(mesh)
    space = _ParamSpace(mesh, init_pose, opts)
    if space.size == 0:
        raise FitError("no parameter group enabled for optimization")
    weights = opts.weights

    def loss_of(pose):
        return fitting_loss(pose, detected, init_pose, face_target, mesh, cam, weights)

    vec = space.pack(init_pose)
    pose = space.unpack(vec)
    loss, breakdown = loss_of(pose)
    if not np.isfinite(loss):
        raise FitError(f"non-finite loss at initialization: {loss}")
    initial_loss = loss
    history = [loss]
    lam = opts.damping
    iterations = 0
    converged = False
    aborted = None

    for iterations in range(1, opts.max_iterations + 1):
        grad, resid, w2, jac, curv_diag = _loss_gradient(
            mesh, pose, cam, detected, init_pose, face_target, space, weights)
        if resid.size:
            irls = w2 / np.maximum(np.abs(resid), opts.irls_delta)
            hess = jac.T @ (irls[:, None] * jac)
        else:
            hess = np.zeros((space.size, space.size))
        hess = hess + np.diag(curv_diag)

        # a small absolute damping floor guards any residual zero-curvature
        # directions so the damped solve cannot blow up along them
        diag_h = np.diag(hess)
        floor = max(1e-6 * float(diag_h.max(initial=0.0)), 1e-8)

        # sufficient decrease mirrors the stopping rule: steps that cannot
        # beat the per-iteration share of the relative tolerance are treated
        # as converged rather than accepted as endless creep
        min_decrease = (opts.rel_tol / opts.patience) * max(loss, 1e-12)
        accepted = False
        while lam <= opts.damping_max:
            lhs = hess + lam * (np.diag(diag_h) + floor * np.eye(space.size))
            try:
                step = np.linalg.solve(lhs, -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand_vec = vec + step
            cand_pose = space.unpack(cand_vec)
            cand_loss, cand_breakdown = loss_of(cand_pose)
            if np.isfinite(cand_loss) and cand_loss < loss - min_decrease:
                vec, pose = cand_vec, cand_pose
                loss, breakdown = cand_loss, cand_breakdown
                lam = max(lam * 0.5, 1e-10)
                accepted = True
                break
            lam *= 4.0
        history.append(loss)

        if loss > 10.0 * initial_loss:
            aborted = "diverged"
            break
        if not accepted:
            converged = True  # no descent direction remains at max damping
            break
        if np.abs(step).max() < opts.step_tol:
            converged = True
            break
        if len(history) > opts.patience:
            ref = history[-opts.patience - 1]
            if ref - loss < opts.rel_tol * max(ref, 1e-12):
                converged = True
                break

    if aborted:
        raise FitError(f"fit aborted: {aborted} (loss {loss:.4g} from {initial_loss:.4g})")

    report = FitReport(converged=converged, iterations=iterations,
                       initial_loss=initial_loss, final_loss=loss,
                       breakdown=breakdown, loss_history=history)
    return FitResult(pose=pose, report=report)


@dataclass
class SequenceFitResult:
    poses: list
    flags: list  # True where the frame failed and was interpolated
    reports: list


def fit_sequence(mesh: SkinnedMesh, seq: KeypointSequence, cams,
                 opts: FitOptions = FitOptions(),
                 init_pose: PoseParams | None = None,
                 face_targets=None) -> SequenceFitResult:
    """Fit every frame, warm-starting each one from its predecessor.

    Failed frames are flagged and later replaced by interpolating their
    nearest successful neighbors.
    """
    if seq.num_frames == 0:
        raise FitError("empty keypoint sequence")
    if isinstance(cams, Camera):
        cams = [cams] * seq.num_frames
    poses = []
    flags = []
    reports = []
    current = init_pose if init_pose is not None else PoseParams.identity(mesh)
    for f in range(seq.num_frames):
        detected = FrameKeypoints.from_sequence(seq, f)
        target = None if face_targets is None else face_targets[f]
        try:
            result = fit_frame(mesh, current, detected, target, cams[f], opts)
            poses.append(result.pose)
            reports.append(result.report)
            flags.append(False)
            current = result.pose
        except FitError:
            poses.append(None)
            reports.append(None)
            flags.append(True)

    ok = [i for i, f in enumerate(flags) if not f]
    if not ok:
        raise FitError("every frame failed to fit")
    for i, failed in enumerate(flags):
        if not failed:
            continue
        left = max([j for j in ok if j < i], default=None)
        right = min([j for j in ok if j > i], default=None)
        if left is None:
            poses[i] = poses[right]
        elif right is None:
            poses[i] = poses[left]
        else:
            t = (i - left) / (right - left)
            a, b = poses[left], poses[right]
            poses[i] = a.replace(
                joint_rotations=(1 - t) * a.joint_rotations + t * b.joint_rotations,
                root_translation=(1 - t) * a.root_translation + t * b.root_translation,
                shape=(1 - t) * a.shape + t * b.shape,
                joint_offsets=(1 - t) * a.joint_offsets + t * b.joint_offsets,
                expression=(1 - t) * a.expression + t * b.expression,
            )
    return SequenceFitResult(poses=poses, flags=flags, reports=reports)
