"""Command-line surface: every subcommand is a thin composition of module
operations; randomized commands accept --seed and reproduce bit-identically."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import assets
from .binding import InitOptions, init_splats
from .fitting import FitOptions, fit_sequence, init_camera
from .kinematics import DEFAULT_CONFIDENCE_THRESHOLD, fill_all_gaps
from .render import render_avatar
from .training import TrainOptions, evaluate, format_metrics, train
from .types import LossWeights, MeshSplatError, PoseParams


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshsplat",
                                description="Mesh-bound Gaussian splat avatars")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("preprocess", help="detect and fill missing-hand gaps")
    sp.add_argument("--keypoints", required=True)
    sp.add_argument("--threshold", type=float, default=DEFAULT_CONFIDENCE_THRESHOLD)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")

    sp = sub.add_parser("fit", help="fit pose parameters to a keypoint sequence")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--keypoints", required=True)
    sp.add_argument("--camera", help="camera JSON; omitted -> dummy init camera")
    sp.add_argument("--width", type=int, default=1080)
    sp.add_argument("--height", type=int, default=1080)
    sp.add_argument("--focal-factor", type=float, default=1.2)
    sp.add_argument("--max-iterations", type=int, default=200)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("init-splats", help="initialize one splat per polygon")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-polygon", type=int, default=1)
    sp.add_argument("--scale-fraction", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("train", help="optimize splats against target frames")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--splats", required=True)
    sp.add_argument("--poses", required=True)
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--targets-dir", required=True,
                    help="directory of frame_%%04d.png RGBA targets")
    sp.add_argument("--iterations", type=int, default=3000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--background", choices=("random", "fixed"), default="random")
    sp.add_argument("--fixed-background", default="0,0,0")
    sp.add_argument("--backend", choices=("compiled", "reference"))
    sp.add_argument("--checkpoint-dir")
    sp.add_argument("--checkpoint-interval", type=int, default=1000)
    sp.add_argument("--unfreeze-pose", action="store_true")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", help="metrics log (JSON lines)")

    sp = sub.add_parser("render", help="render one posed frame to an image")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--splats", required=True)
    sp.add_argument("--pose", required=True,
                    help="pose file; use file.json:IDX to pick a frame")
    sp.add_argument("--camera", required=True)
    sp.add_argument("--background", default="0,0,0")
    sp.add_argument("--backend", choices=("compiled", "reference"))
    sp.add_argument("--out", required=True, help=".png or .f32 output")

    sp = sub.add_parser("animate", help="render a pose sequence to image frames")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--splats", required=True)
    sp.add_argument("--poses", required=True)
    sp.add_argument("--camera", required=True)
    sp.add_argument("--background", default="0,0,0")
    sp.add_argument("--backend", choices=("compiled", "reference"))
    sp.add_argument("--format", choices=("png", "f32"), default="png")
    sp.add_argument("--out-dir", required=True)

    sp = sub.add_parser("metrics", help="PSNR/SSIM table against truth frames")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--splats", required=True)
    sp.add_argument("--poses", required=True)
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--truth-dir", required=True)
    sp.add_argument("--backend", choices=("compiled", "reference"))
    sp.add_argument("--out")

    sp = sub.add_parser("export-viewer", help="write a web viewer bundle")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--splats", required=True)
    sp.add_argument("--clip", action="append", default=[],
                    help="name=poses.json, repeatable")
    sp.add_argument("--fps", type=float, default=30.0)
    sp.add_argument("--out-dir", required=True)

    sp = sub.add_parser("serve", help="serve a bundle plus the POST /pose bridge")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--viewer-dir", help="built viewer to serve at /")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8080)

    return p


def _parse_color(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise MeshSplatError(f"background must be r,g,b — got {text!r}")
    return np.array(parts)


def _load_targets(dir_path, count):
    targets = []
    for f in range(count):
        path = os.path.join(dir_path, f"frame_{f:04d}.png")
        if not os.path.isfile(path):
            raise MeshSplatError(f"missing target frame {path}")
        rgb, alpha = assets.load_image_png(path, with_alpha=True)
        targets.append((rgb * alpha[:, :, None], alpha))  # premultiply
    return targets


def _cmd_preprocess(args):
    seq = assets.load_keypoints(args.keypoints)
    filled, report = fill_all_gaps(seq, args.threshold)
    assets.save_keypoints(args.out, filled)
    doc = {
        "threshold": args.threshold,
        "gaps": [{"side": g.side, "last_visible": g.last_visible,
                  "first_reappear": g.first_reappear, "n": g.n}
                 for g in report.gaps],
        "unfillable": [{"side": g.side, "start": g.start, "end": g.end}
                       for g in report.unfillable],
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_fit(args):
    mesh = assets.load_mesh(args.mesh)
    seq = assets.load_keypoints(args.keypoints)
    if args.camera:
        cam = assets.load_cameras(args.camera)[0]
    else:
        cam = init_camera(args.width, args.height, args.focal_factor)
    opts = FitOptions(max_iterations=args.max_iterations,
                      weights=LossWeights(w_sym=0.0 if not mesh.left_right_map else 1.0))
    result = fit_sequence(mesh, seq, cam, opts)
    assets.save_poses(args.out, result.poses)
    n_failed = sum(result.flags)
    print(f"fit {len(result.poses)} frames ({n_failed} interpolated) -> {args.out}")
    return 0


def _cmd_init_splats(args):
    mesh = assets.load_mesh(args.mesh)
    splats = init_splats(mesh, InitOptions(per_polygon=args.per_polygon,
                                           scale_fraction=args.scale_fraction,
                                           seed=args.seed))
    assets.save_splats(args.out, splats)
    print(f"initialized {len(splats)} splats on {mesh.num_triangles} polygons -> {args.out}")
    return 0


def _cmd_train(args):
    mesh = assets.load_mesh(args.mesh)
    splats = assets.load_splats(args.splats)
    poses = assets.load_poses(args.poses)
    cams = assets.load_cameras(args.cameras)
    if len(cams) == 1:
        cams = cams * len(poses)
    targets = _load_targets(args.targets_dir, len(poses))
    opts = TrainOptions(iterations=args.iterations, seed=args.seed,
                        background=args.background,
                        fixed_background=tuple(_parse_color(args.fixed_background)),
                        backend=args.backend, checkpoint_dir=args.checkpoint_dir,
                        checkpoint_interval=args.checkpoint_interval,
                        unfreeze_pose=args.unfreeze_pose)
    trained, log = train(mesh, splats, poses, targets, cams, opts)
    assets.save_splats(args.out, trained)
    if args.log:
        with open(args.log, "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    final = next((e for e in reversed(log) if "total" in e), {})
    print(f"trained {len(trained)} splats over {args.iterations} iterations "
          f"(final loss {final.get('total', float('nan')):.6g}) -> {args.out}")
    return 0


def _pose_arg(text):
    if ":" in text and not os.path.exists(text):
        path, idx = text.rsplit(":", 1)
        return assets.load_poses(path)[int(idx)]
    return assets.load_poses(text)[0]


def _write_image(path, image):
    if path.endswith(".f32"):
        assets.save_image_raw(path, image)
    else:
        assets.save_image_png(path, image)


def _cmd_render(args):
    mesh = assets.load_mesh(args.mesh)
    splats = assets.load_splats(args.splats)
    pose = _pose_arg(args.pose)
    cam = assets.load_cameras(args.camera)[0]
    out = render_avatar(mesh, pose, splats, cam,
                        background=_parse_color(args.background),
                        backend=args.backend)
    _write_image(args.out, out.image)
    print(f"rendered {cam.width}x{cam.height} -> {args.out}")
    return 0


def _cmd_animate(args):
    mesh = assets.load_mesh(args.mesh)
    splats = assets.load_splats(args.splats)
    poses = assets.load_poses(args.poses)
    cam = assets.load_cameras(args.camera)[0]
    os.makedirs(args.out_dir, exist_ok=True)
    bg = _parse_color(args.background)
    prev_frames = None
    prev_world = None
    for f, pose in enumerate(poses):
        out = render_avatar(mesh, pose, splats, cam, background=bg,
                            backend=args.backend, prev_frames=prev_frames,
                            prev_world=prev_world)
        prev_frames, prev_world = out.frames, out.world
        _write_image(os.path.join(args.out_dir, f"frame_{f:04d}.{args.format}"),
                     out.image)
    print(f"animated {len(poses)} frames -> {args.out_dir}")
    return 0


def _cmd_metrics(args):
    mesh = assets.load_mesh(args.mesh)
    splats = assets.load_splats(args.splats)
    poses = assets.load_poses(args.poses)
    cams = assets.load_cameras(args.cameras)
    if len(cams) == 1:
        cams = cams * len(poses)
    truths = []
    for f in range(len(poses)):
        rgb, alpha = assets.load_image_png(
            os.path.join(args.truth_dir, f"frame_{f:04d}.png"), with_alpha=True)
        truths.append((rgb * alpha[:, :, None], alpha))
    table = evaluate(mesh, splats, poses, cams, truths, backend=args.backend)
    text = format_metrics(table)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_export_viewer(args):
    from .synthetic import apose

    mesh = assets.load_mesh(args.mesh)
    splats = assets.load_splats(args.splats)
    clips = {}
    for spec in args.clip:
        if "=" not in spec:
            raise MeshSplatError(f"--clip expects name=poses.json, got {spec!r}")
        name, path = spec.split("=", 1)
        clips[name] = assets.load_poses(path)
    presets = {"tpose": PoseParams.identity(mesh)}
    try:
        presets["apose"] = apose(mesh)
    except MeshSplatError:
        pass
    assets.export_viewer_bundle(args.out_dir, mesh, splats, clips=clips,
                                fps=args.fps, presets=presets)
    print(f"exported viewer bundle -> {args.out_dir}")
    return 0


def _cmd_serve(args):
    from .server import make_server

    server = make_server(args.bundle, host=args.host, port=args.port,
                         viewer_dir=args.viewer_dir)
    host, port = server.server_address[:2]
    print(f"serving bundle {args.bundle} at http://{host}:{port}/ (Ctrl-C to stop)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


_COMMANDS = {
    "preprocess": _cmd_preprocess,
    "fit": _cmd_fit,
    "init-splats": _cmd_init_splats,
    "train": _cmd_train,
    "render": _cmd_render,
    "animate": _cmd_animate,
    "metrics": _cmd_metrics,
    "export-viewer": _cmd_export_viewer,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (MeshSplatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
