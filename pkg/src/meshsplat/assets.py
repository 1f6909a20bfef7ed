"""Asset file formats and the viewer bundle exporter.

Binary containers are little-endian with a 16-byte magic+version header
followed by a JSON metadata block and packed arrays in declared order; JSON
documents are canonicalized (sorted keys, two-space indent, trailing newline)
so store(load(x)) is byte-identical. Loaders validate structural invariants
and reject violations with location diagnostics.
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np
from PIL import Image

from .types import (
    AssetFormatError,
    Camera,
    KeypointSequence,
    PoseParams,
    ROOT_PARENT,
    SkinnedMesh,
    SplatSet,
    validate_asset,
)

SPLAT_MAGIC = b"MSPLATGS"
MESH_MAGIC = b"MSPLMESH"
FRAMES_MAGIC = b"MSPLFRM1"
FORMAT_VERSION = 1

SPLAT_FIELDS = (
    ("mu_local", "<f4", (3,)),
    ("rot_local", "<f4", (4,)),
    ("log_scale", "<f4", (3,)),
    ("color", "<f4", (3,)),
    ("opacity", "<f4", ()),
    ("polygon_id", "<u4", ()),
)


def canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _write_header(fh, magic: bytes, meta: dict):
    blob = canonical_json(meta)
    fh.write(magic)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    fh.write(blob)


def _read_header(fh, magic: bytes, what: str) -> dict:
    head = fh.read(16)
    if len(head) < 16:
        raise AssetFormatError(f"{what}: truncated header")
    if head[:8] != magic:
        raise AssetFormatError(f"{what}: bad magic {head[:8]!r}, expected {magic!r}")
    version, json_len = struct.unpack("<II", head[8:16])
    if version != FORMAT_VERSION:
        raise AssetFormatError(f"{what}: unsupported version {version}")
    blob = fh.read(json_len)
    if len(blob) < json_len:
        raise AssetFormatError(f"{what}: truncated metadata block")
    try:
        return json.loads(blob.decode("utf-8"))
    except ValueError as e:
        raise AssetFormatError(f"{what}: invalid metadata JSON: {e}") from None


def _read_array(fh, name: str, dtype, shape, what: str) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * np.dtype(dtype).itemsize
    raw = fh.read(nbytes)
    if len(raw) < nbytes:
        raise AssetFormatError(f"{what}: truncated before section {name!r}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def save_splats(path, splats: SplatSet):
    splats = SplatSet.coerce(splats)
    n = len(splats)
    meta = {
        "count": n,
        "fields": [{"name": name, "dtype": str(np.dtype(dt).name),
                    "shape": [n] + list(sub)} for name, dt, sub in SPLAT_FIELDS],
        "rotation_format": "wxyz",
        "scale_space": "log",
        "color_space": "rgb_unit",
    }
    with open(path, "wb") as fh:
        _write_header(fh, SPLAT_MAGIC, meta)
        for name, dt, _ in SPLAT_FIELDS:
            fh.write(np.ascontiguousarray(getattr(splats, name), dtype=dt).tobytes())


def load_splats(path) -> SplatSet:
    with open(path, "rb") as fh:
        meta = _read_header(fh, SPLAT_MAGIC, "splat asset")
        n = int(meta["count"])
        cols = {}
        for name, dt, sub in SPLAT_FIELDS:
            cols[name] = _read_array(fh, name, dt, (n,) + sub, "splat asset")
    splats = SplatSet(mu_local=cols["mu_local"], rot_local=cols["rot_local"],
                      log_scale=cols["log_scale"], color=cols["color"],
                      opacity=cols["opacity"], polygon_id=cols["polygon_id"])
    norms = np.linalg.norm(splats.rot_local, axis=-1)
    bad = np.nonzero(np.abs(norms - 1.0) > 1e-4)[0]
    if bad.size:
        raise AssetFormatError(f"splat asset: splat {bad[0]} rotation is not unit "
                               f"(norm {norms[bad[0]]:.6g})")
    if splats.opacity.size and (splats.opacity.min() < 0 or splats.opacity.max() > 1):
        bad = int(np.argmax((splats.opacity < 0) | (splats.opacity > 1)))
        raise AssetFormatError(f"splat asset: splat {bad} opacity outside [0, 1]")
    return splats


MESH_ARRAYS = ("vertices", "triangles", "joint_rest", "skin_weights")


def save_mesh(path, mesh: SkinnedMesh):
    meta = {
        "counts": {"vertices": mesh.num_vertices, "triangles": mesh.num_triangles,
                   "joints": mesh.num_joints, "shape_dim": mesh.shape_dim,
                   "expr_dim": mesh.expr_dim},
        "joint_names": list(mesh.joint_names),
        "joint_parents": [(-1 if p == ROOT_PARENT else int(p))
                          for p in mesh.joint_parents],
        "keypoint_map": dict(mesh.keypoint_map),
        "index_sets": {
            "face_center": [int(i) for i in mesh.face_center_idx],
            "eye_midpoint": [int(i) for i in mesh.eye_midpoint_idx],
            "face_patch": [int(i) for i in mesh.face_patch_idx],
        },
        "left_right_map": dict(mesh.left_right_map),
    }
    with open(path, "wb") as fh:
        _write_header(fh, MESH_MAGIC, meta)
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(mesh.triangles, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(mesh.joint_rest, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(mesh.skin_weights, dtype="<f4").tobytes())
        if mesh.shape_basis is not None:
            fh.write(np.ascontiguousarray(mesh.shape_basis, dtype="<f4").tobytes())
        if mesh.expr_basis is not None:
            fh.write(np.ascontiguousarray(mesh.expr_basis, dtype="<f4").tobytes())


def load_mesh(path) -> SkinnedMesh:
    with open(path, "rb") as fh:
        meta = _read_header(fh, MESH_MAGIC, "mesh asset")
        c = meta["counts"]
        n, m, j = int(c["vertices"]), int(c["triangles"]), int(c["joints"])
        vertices = _read_array(fh, "vertices", "<f4", (n, 3), "mesh asset")
        triangles = _read_array(fh, "triangles", "<u4", (m, 3), "mesh asset")
        joint_rest = _read_array(fh, "joint_rest", "<f4", (j, 3), "mesh asset")
        skin_weights = _read_array(fh, "skin_weights", "<f4", (n, j), "mesh asset")
        shape_basis = None
        if c.get("shape_dim", 0):
            shape_basis = _read_array(fh, "shape_basis", "<f4",
                                      (n, 3, int(c["shape_dim"])), "mesh asset")
        expr_basis = None
        if c.get("expr_dim", 0):
            expr_basis = _read_array(fh, "expr_basis", "<f4",
                                     (n, 3, int(c["expr_dim"])), "mesh asset")
    parents = np.array([ROOT_PARENT if p == -1 else p
                        for p in meta["joint_parents"]], dtype=np.int64)
    sets = meta.get("index_sets", {})
    mesh = SkinnedMesh(
        vertices=vertices, triangles=triangles,
        joint_names=tuple(meta["joint_names"]), joint_parents=parents,
        joint_rest=joint_rest, skin_weights=skin_weights,
        shape_basis=shape_basis, expr_basis=expr_basis,
        keypoint_map=meta.get("keypoint_map", {}),
        face_center_idx=np.array(sets.get("face_center", []), dtype=np.int64),
        eye_midpoint_idx=np.array(sets.get("eye_midpoint", []), dtype=np.int64),
        face_patch_idx=np.array(sets.get("face_patch", []), dtype=np.int64),
        left_right_map=meta.get("left_right_map", {}),
    )
    report = validate_asset(mesh)
    if not report.ok:
        raise AssetFormatError(f"mesh asset: {report.message()}")
    return mesh


def save_keypoints(path, seq: KeypointSequence):
    doc = {
        "version": FORMAT_VERSION,
        "layout": list(seq.layout),
        "frames": [[[float(x), float(y), float(cf)] for (x, y), cf in
                    zip(seq.xy[f], seq.confidence[f])]
                   for f in range(seq.num_frames)],
        "synthetic": [[bool(s) for s in seq.synthetic[f]]
                      for f in range(seq.num_frames)],
    }
    with open(path, "wb") as fh:
        fh.write(canonical_json(doc))


def load_keypoints(path) -> KeypointSequence:
    with open(path, "rb") as fh:
        try:
            doc = json.loads(fh.read().decode("utf-8"))
        except ValueError as e:
            raise AssetFormatError(f"keypoints: invalid JSON: {e}") from None
    layout = doc.get("layout")
    frames = doc.get("frames")
    if not layout or frames is None:
        raise AssetFormatError("keypoints: missing layout or frames")
    k = len(layout)
    xy = np.zeros((len(frames), k, 2))
    conf = np.zeros((len(frames), k))
    for fi, frame in enumerate(frames):
        if len(frame) != k:
            raise AssetFormatError(
                f"keypoints: frame {fi} has {len(frame)} entries, layout has {k}")
        for ki, rec in enumerate(frame):
            x, y, cf = float(rec[0]), float(rec[1]), float(rec[2])
            if not 0.0 <= cf <= 1.0:
                raise AssetFormatError(
                    f"keypoints: frame {fi} joint {layout[ki]!r} confidence "
                    f"{cf} outside [0, 1]")
            xy[fi, ki] = (x, y)
            conf[fi, ki] = cf
    syn = None
    if "synthetic" in doc:
        syn = np.array(doc["synthetic"], dtype=bool)
        if syn.shape != (len(frames), k):
            raise AssetFormatError("keypoints: synthetic mask shape mismatch")
    return KeypointSequence(layout=tuple(layout), xy=xy, confidence=conf, synthetic=syn)


def _pose_to_doc(pose: PoseParams) -> dict:
    return {
        "joint_rotations": [[float(v) for v in row] for row in pose.joint_rotations],
        "root_translation": [float(v) for v in pose.root_translation],
        "shape": [float(v) for v in pose.shape],
        "joint_offsets": [[float(v) for v in row] for row in pose.joint_offsets],
        "expression": [float(v) for v in pose.expression],
    }


def _pose_from_doc(doc) -> PoseParams:
    return PoseParams(
        joint_rotations=np.array(doc["joint_rotations"], dtype=float).reshape(-1, 3),
        root_translation=np.array(doc["root_translation"], dtype=float),
        shape=np.array(doc.get("shape", []), dtype=float),
        joint_offsets=(np.array(doc["joint_offsets"], dtype=float).reshape(-1, 3)
                       if doc.get("joint_offsets") else None),
        expression=np.array(doc.get("expression", []), dtype=float),
    )


def save_poses(path, poses):
    doc = {"version": FORMAT_VERSION, "frames": [_pose_to_doc(p) for p in poses]}
    with open(path, "wb") as fh:
        fh.write(canonical_json(doc))


def load_poses(path):
    with open(path, "rb") as fh:
        try:
            doc = json.loads(fh.read().decode("utf-8"))
        except ValueError as e:
            raise AssetFormatError(f"poses: invalid JSON: {e}") from None
    if "frames" not in doc:
        raise AssetFormatError("poses: missing frames")
    try:
        return [_pose_from_doc(d) for d in doc["frames"]]
    except (KeyError, ValueError) as e:
        raise AssetFormatError(f"poses: malformed frame: {e}") from None


def _camera_to_doc(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "rotation": [float(v) for v in cam.rotation],
            "translation": [float(v) for v in cam.translation],
            "width": cam.width, "height": cam.height}


def _camera_from_doc(doc) -> Camera:
    try:
        return Camera(fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
                      rotation=np.array(doc["rotation"], dtype=float),
                      translation=np.array(doc["translation"], dtype=float),
                      width=doc["width"], height=doc["height"])
    except KeyError as e:
        raise AssetFormatError(f"camera: missing field {e}") from None


def save_cameras(path, cams):
    if isinstance(cams, Camera):
        cams = [cams]
    doc = {"version": FORMAT_VERSION, "cameras": [_camera_to_doc(c) for c in cams]}
    with open(path, "wb") as fh:
        fh.write(canonical_json(doc))


def load_cameras(path):
    with open(path, "rb") as fh:
        try:
            doc = json.loads(fh.read().decode("utf-8"))
        except ValueError as e:
            raise AssetFormatError(f"camera: invalid JSON: {e}") from None
    if "cameras" in doc:
        return [_camera_from_doc(d) for d in doc["cameras"]]
    return [_camera_from_doc(doc)]


def save_image_png(path, image, alpha=None):
    """8-bit PNG from a float image in [0, 1]; RGBA when alpha is given."""
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if alpha is not None:
        a = np.round(np.clip(np.asarray(alpha, dtype=float), 0, 1) * 255).astype(np.uint8)
        data = np.dstack([data, a])
        Image.fromarray(data, mode="RGBA").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def load_image_png(path, with_alpha=False):
    img = Image.open(path)
    if with_alpha:
        img = img.convert("RGBA")
        arr = np.asarray(img, dtype=np.float64) / 255.0
        return arr[:, :, :3], arr[:, :, 3]
    arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_image_raw(path, image):
    """Headerless raw: float32 little-endian, row-major, RGB interleaved."""
    arr = np.ascontiguousarray(np.asarray(image), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())


def load_image_raw(path, width: int, height: int) -> np.ndarray:
    expected = width * height * 3 * 4
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) != expected:
        raise AssetFormatError(
            f"raw image: {len(raw)} bytes, expected {expected} for {width}x{height}x3")
    return np.frombuffer(raw, dtype="<f4").reshape(height, width, 3).astype(np.float64)


def save_frames(path, frame_sets):
    """Pose-frame clips: per frame, per polygon (k, quat wxyz, t) as float32."""
    frame_sets = list(frame_sets)
    if not frame_sets:
        raise AssetFormatError("frames: empty clip")
    m = len(frame_sets[0])
    data = np.zeros((len(frame_sets), m, 8), dtype="<f4")
    for fi, fs in enumerate(frame_sets):
        if len(fs) != m:
            raise AssetFormatError("frames: inconsistent polygon count across frames")
        data[fi, :, 0] = fs.k
        data[fi, :, 1:5] = fs.rot
        data[fi, :, 5:8] = fs.t
    with open(path, "wb") as fh:
        fh.write(FRAMES_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, len(frame_sets), m))
        fh.write(data.tobytes())


def load_frames(path):
    from .types import PolygonFrameSet

    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20 or head[:8] != FRAMES_MAGIC:
            raise AssetFormatError("frames: bad or truncated header")
        version, f, m = struct.unpack("<III", head[8:20])
        if version != FORMAT_VERSION:
            raise AssetFormatError(f"frames: unsupported version {version}")
        data = _read_array(fh, "frames", "<f4", (f, m, 8), "frames")
    out = []
    for fi in range(f):
        out.append(PolygonFrameSet(k=data[fi, :, 0].astype(float),
                                   rot=data[fi, :, 1:5].astype(float),
                                   t=data[fi, :, 5:8].astype(float),
                                   degenerate=np.zeros(m, dtype=bool)))
    return out


def frames_payload(frames) -> bytes:
    """Single-pose binary frames message (same layout as the clip format)."""
    buf = io.BytesIO()
    data = np.zeros((1, len(frames), 8), dtype="<f4")
    data[0, :, 0] = frames.k
    data[0, :, 1:5] = frames.rot
    data[0, :, 5:8] = frames.t
    buf.write(FRAMES_MAGIC)
    buf.write(struct.pack("<III", FORMAT_VERSION, 1, len(frames)))
    buf.write(data.tobytes())
    return buf.getvalue()


def export_viewer_bundle(out_dir, mesh: SkinnedMesh, splats: SplatSet,
                         clips=None, fps: float = 30.0, presets=None,
                         goldens=None):
    """Write the directory the web viewer consumes.

    clips: {name: [PoseParams, ...]} precomputed into per-pose polygon frames;
    presets: {name: PoseParams} exposed in the manifest as pose payloads;
    goldens: {name: (PoseParams, Camera)} listed for cross-renderer tests.
    """
    from .render import pose_polygon_frames

    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "clips"), exist_ok=True)
    save_mesh(os.path.join(out_dir, "avatar.mesh"), mesh)
    save_splats(os.path.join(out_dir, "avatar.splat"), splats)

    manifest = {
        "version": FORMAT_VERSION,
        "mesh": "avatar.mesh",
        "splats": "avatar.splat",
        "polygon_count": mesh.num_triangles,
        "splat_count": len(splats),
        "joint_names": list(mesh.joint_names),
        "clips": [],
        "presets": {},
        "goldens": [],
    }
    for name, poses in (clips or {}).items():
        rel = f"clips/{name}.frames"
        save_frames(os.path.join(out_dir, rel),
                    [pose_polygon_frames(mesh, p) for p in poses])
        manifest["clips"].append({"name": name, "file": rel,
                                  "frame_count": len(poses), "fps": fps})
    for name, pose in (presets or {}).items():
        manifest["presets"][name] = _pose_to_doc(pose)
    for name, (pose, cam) in (goldens or {}).items():
        rel = f"clips/golden_{name}.frames"
        save_frames(os.path.join(out_dir, rel), [pose_polygon_frames(mesh, pose)])
        manifest["goldens"].append({"name": name, "frames": rel,
                                    "camera": _camera_to_doc(cam)})
    with open(os.path.join(out_dir, "manifest.json"), "wb") as fh:
        fh.write(canonical_json(manifest))
    return manifest
