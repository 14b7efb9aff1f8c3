"""Command-line interface.

Subcommands: gen, init, optimize, render, eval, export. Exit codes: 0 on
success, 1 on usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import sceneio, synthetic
from .errors import DynsplatError, FrameOutOfRange
from .initialize import InitConfig, init_scene
from .metrics import EvalReport, psnr, ssim, epe3d
from .model import DYNAMIC, validate_scene
from .motion import pose_scene, quat_to_matrix
from .optim import Schedule, history_csv, run_schedule, scene_diameter
from .rasterize import Camera, coverage_map_arrays, render_scene


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynsplat",
                description="Desk-scale dynamic gaussian scene toolkit")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic fixture")
    g.add_argument("spec", help="fixture name or JSON spec file")
    g.add_argument("outdir")
    g.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("init", help="initialize a scene from priors")
    i.add_argument("priors", help="MSPB1 prior file")
    i.add_argument("cameras", help="cameras JSON")
    i.add_argument("out", help="output MSCN1 scene")
    i.add_argument("--config", help="InitConfig overrides as JSON file")
    i.add_argument("--images", help="directory of PPM frames for colors")

    o = sub.add_parser("optimize", help="run the progressive schedule")
    o.add_argument("scene", help="initial MSCN1 scene, or '-' to init inline")
    o.add_argument("priors")
    o.add_argument("out")
    o.add_argument("--cameras", help="cameras JSON (required with scene '-')")
    o.add_argument("--images", required=True, help="directory of PPM frames")
    o.add_argument("--config", help="Schedule overrides as JSON file")
    o.add_argument("--csv", help="loss history CSV path")
    o.add_argument("--checkpoint-dir")

    r = sub.add_parser("render", help="render one frame of a scene")
    r.add_argument("scene")
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--camera", help="pose JSON overriding the stored camera")
    r.add_argument("--out", required=True, help="output PPM (or PGM for depth)")
    r.add_argument("--mode", choices=["color", "depth", "coverage"],
                   default="color")

    e = sub.add_parser("eval", help="evaluate a scene against a GT manifest")
    e.add_argument("scene")
    e.add_argument("manifest", help="JSON manifest from `gen`")
    e.add_argument("--images", help="directory of PPM frames for PSNR/SSIM")
    e.add_argument("--report", required=True)

    x = sub.add_parser("export", help="per-frame posed point clouds")
    x.add_argument("scene")
    x.add_argument("--ply-dir", required=True)
    return p


def _load_images(dirpath: str) -> np.ndarray:
    names = sorted(n for n in os.listdir(dirpath) if n.endswith(".ppm"))
    return np.stack([sceneio.load_ppm(os.path.join(dirpath, n)) for n in names])


def _cmd_gen(args) -> int:
    cat = synthetic.fixtures()
    if args.spec in cat:
        spec = cat[args.spec]
    else:
        with open(args.spec) as f:
            cfg = json.load(f)
        bodies = [synthetic.BodySpec(**b) for b in cfg.pop("bodies", [])]
        noise = synthetic.NoiseModel(**cfg.pop("noise", {}))
        for k in ("image_size", "cam_start", "cam_velocity", "light_dir"):
            if k in cfg:
                cfg[k] = tuple(cfg[k])
        spec = synthetic.SceneSpec(bodies=bodies, noise=noise, **cfg)
    res = synthetic.generate(spec, seed=args.seed)
    os.makedirs(args.outdir, exist_ok=True)
    sceneio.save_scene(res.gt_scene, os.path.join(args.outdir, "gt.mscn"))
    sceneio.save_priors(res.priors, os.path.join(args.outdir, "priors.mspb"))
    sceneio.save_cameras_json(res.gt_scene.cameras,
                              os.path.join(args.outdir, "cameras.json"))
    imgdir = os.path.join(args.outdir, "images")
    os.makedirs(imgdir, exist_ok=True)
    for t, img in enumerate(res.images):
        sceneio.save_ppm(img, os.path.join(imgdir, f"frame_{t:04d}.ppm"))
    manifest = {
        "diameter": res.gt["diameter"],
        "num_frames": spec.num_frames,
        "image_size": list(spec.image_size),
        "body_poses": res.gt["body_poses"],
        "trajectories": {str(k): v.tolist()
                         for k, v in res.gt["trajectories"].items()},
    }
    with open(os.path.join(args.outdir, "manifest.json"), "w") as f:
        json.dump(manifest, f)
    print(f"wrote fixture to {args.outdir} "
          f"({res.gt_scene.num_gaussians} gaussians, {spec.num_frames} frames)")
    return 0


def _cmd_init(args) -> int:
    priors = sceneio.load_priors(args.priors)
    cameras = sceneio.load_cameras_json(args.cameras)
    cfg = InitConfig()
    if args.config:
        with open(args.config) as f:
            for k, v in json.load(f).items():
                setattr(cfg, k, v)
    images = _load_images(args.images) if args.images else None
    scene = init_scene(priors, cameras, images=images, config=cfg)
    problems = validate_scene(scene)
    if problems:
        raise DynsplatError("invalid initialized scene: " + "; ".join(problems))
    sceneio.save_scene(scene, args.out)
    print(f"initialized {scene.num_gaussians} gaussians, "
          f"{scene.num_clusters} clusters over {scene.num_frames} frames")
    return 0


def _cmd_optimize(args) -> int:
    priors = sceneio.load_priors(args.priors)
    images = _load_images(args.images)
    sch = Schedule()
    if args.config:
        with open(args.config) as f:
            for k, v in json.load(f).items():
                setattr(sch, k, v)
    if args.scene == "-":
        if not args.cameras:
            print("optimize: --cameras is required with scene '-'",
                  file=sys.stderr)
            return 1
        scene = None
        cameras = sceneio.load_cameras_json(args.cameras)
    else:
        scene = sceneio.load_scene(args.scene)
        cameras = scene.cameras

    cb = None
    if args.checkpoint_dir:
        os.makedirs(args.checkpoint_dir, exist_ok=True)

        def cb(sc, tag):
            sceneio.save_checkpoint(
                sc, {}, os.path.join(args.checkpoint_dir, f"{tag}.msck"))

    scene, hist = run_schedule(priors, images, cameras, sch, scene=scene,
                               checkpoint_cb=cb)
    sceneio.save_scene(scene, args.out)
    if args.csv:
        history_csv(hist, args.csv)
    print(f"optimized scene: {scene.num_gaussians} gaussians, "
          f"{scene.num_clusters} clusters, {scene.num_frames} frames; "
          f"final loss {hist[-1][2].total:.5f}" if hist else "no iterations")
    return 0


def _cmd_render(args) -> int:
    scene = sceneio.load_scene(args.scene)
    if not (0 <= args.frame < scene.num_frames):
        raise FrameOutOfRange(
            f"frame {args.frame} outside [0, {scene.num_frames})")
    if args.camera:
        with open(args.camera) as f:
            pose = json.load(f)
        scene.cameras.intrinsics[args.frame] = np.array(pose["intrinsic"])
        scene.cameras.extrinsics[args.frame] = np.array(pose["extrinsic"])
    out = render_scene(scene, args.frame)
    if args.mode == "color":
        sceneio.save_ppm(out.color, args.out)
    elif args.mode == "depth":
        sceneio.save_pgm16(out.depth, args.out)
    else:
        sceneio.save_ppm(np.repeat((out.alpha_acc >= 0.5)[..., None], 3, 2)
                         .astype(float), args.out)
    print(f"wrote {args.mode} render of frame {args.frame} to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    scene = sceneio.load_scene(args.scene)
    with open(args.manifest) as f:
        man = json.load(f)
    rep = EvalReport()
    if args.images:
        images = _load_images(args.images)
        ps, ss = [], []
        for t in range(min(scene.num_frames, len(images))):
            r = render_scene(scene, t).color
            ps.append(psnr(r, images[t]))
            ss.append(ssim(r, images[t]))
        rep.psnr = float(np.mean(ps))
        rep.ssim = float(np.mean(ss))
    if man.get("body_poses") and scene.num_clusters:
        # trajectory error of dynamic gaussians against the dominant body
        dyn = np.flatnonzero(scene.kind == DYNAMIC)
        if len(dyn):
            bp = man["body_poses"][0]
            pred, gt = [], []
            for t in range(min(scene.num_frames, len(bp["rot"]))):
                mu_t, _ = pose_scene(scene, t, with_rotations=False)
                Rg = quat_to_matrix(np.array(bp["rot"][t])[None])[0]
                pred.append(mu_t[dyn])
                gt.append(scene.mu0[dyn] @ Rg.T + np.array(bp["trans"][t]))
            e, d05, d10 = epe3d(np.concatenate(pred), np.concatenate(gt))
            rep.epe3d = e
            rep.delta3d_05 = d05
            rep.delta3d_10 = d10
    rep.extra["diameter"] = man.get("diameter", scene_diameter(scene))
    with open(args.report, "w") as f:
        f.write(rep.to_json())
    print(f"wrote report to {args.report}")
    return 0


def _cmd_export(args) -> int:
    scene = sceneio.load_scene(args.scene)
    os.makedirs(args.ply_dir, exist_ok=True)
    for t in range(scene.num_frames):
        mu_t, _ = pose_scene(scene, t, with_rotations=False)
        sceneio.export_ply(mu_t, scene.color,
                           os.path.join(args.ply_dir, f"frame_{t:04d}.ply"))
    print(f"exported {scene.num_frames} frames to {args.ply_dir}")
    return 0


_COMMANDS = {"gen": _cmd_gen, "init": _cmd_init, "optimize": _cmd_optimize,
             "render": _cmd_render, "eval": _cmd_eval, "export": _cmd_export}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.cmd](args)
    except (DynsplatError, OSError, ValueError, KeyError) as e:
        print(f"dynsplat {args.cmd}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
