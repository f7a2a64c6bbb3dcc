"""Command line entry point: train, render, mesh, eval, gradcheck, synth."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("confsplat")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="confsplat", description="CPU Gaussian splatting with "
                                "confidence-weighted training and mesh extraction.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="optimise a Gaussian cloud against a scene")
    t.add_argument("--scene", required=True, help="scene JSON")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--iters", type=int, default=7000)
    t.add_argument("--beta", type=float, default=0.075)
    t.add_argument("--no-confidence", action="store_true")
    t.add_argument("--no-var-losses", action="store_true")
    t.add_argument("--appearance", choices=("cnn", "pgsr", "h3dgs", "none"), default="cnn")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--max-gaussians", type=int, default=50_000)
    t.add_argument("--densify-grad", type=float, default=None,
                   help="base positional-gradient threshold")
    t.add_argument("--init-random", type=int, default=2000,
                   help="random primitives when the scene carries no points")

    r = sub.add_parser("render", help="render every scene camera")
    r.add_argument("--cloud", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--appearance-file", default=None)
    r.add_argument("--workers", type=int, default=1)

    m = sub.add_parser("mesh", help="extract a triangle mesh from a cloud")
    m.add_argument("--cloud", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--res", type=int, default=128)
    m.add_argument("--iso", type=float, default=0.5)
    m.add_argument("--refine", type=int, default=10)
    m.add_argument("--format", choices=("obj", "ply"), default=None)

    e = sub.add_parser("eval", help="mesh (and optional image) metrics as JSON")
    e.add_argument("--pred", required=True, help="predicted mesh (obj/ply)")
    e.add_argument("--gt", required=True, help="ground-truth mesh (obj/ply)")
    e.add_argument("--tau", type=float, default=0.05)
    e.add_argument("--samples", type=int, default=100_000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--no-crop", action="store_true")
    e.add_argument("--cloud", default=None, help="cloud PLY for PSNR/SSIM (needs --scene)")
    e.add_argument("--scene", default=None)

    g = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=20)

    s = sub.add_parser("synth", help="write an analytic synthetic scene")
    s.add_argument("--kind", choices=("plane", "sphere", "plane+sphere"), default="plane+sphere")
    s.add_argument("--views", type=int, default=16)
    s.add_argument("--res", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jitter", action="store_true", help="per-image exposure jitter")
    s.add_argument("--out", required=True)
    return p


def _cmd_train(a) -> int:
    from . import losses as L
    from .io import load_scene
    from .training import (DensifyConfig, TrainConfig, evaluate_views, initial_cloud,
                           random_cloud, scene_extent, train)

    cams, images, masks, doc = load_scene(a.scene)
    if doc.get("points"):
        pts = np.asarray(doc["points"], dtype=np.float64)
        cloud = initial_cloud(pts[:, :3], pts[:, 3:6])
    else:
        cloud = random_cloud(a.init_random, scene_extent(cams) / 2, np.random.default_rng(a.seed))
    weights = L.LossWeights(beta=a.beta, use_confidence=not a.no_confidence)
    if a.no_var_losses:
        weights.lambda_color_var = 0.0
        weights.lambda_normal_var = 0.0
    dens = DensifyConfig(max_gaussians=a.max_gaussians)
    if a.densify_grad is not None:
        dens.grad_threshold = a.densify_grad
    cfg = TrainConfig(iterations=a.iters, seed=a.seed, appearance=a.appearance,
                      workers=a.workers, densify=dens, out_dir=a.out)
    result = train(cams, images, cloud, cfg, weights, masks=masks)
    p, s = evaluate_views(result.cloud, cams, images, workers=a.workers)
    print(f"trained {a.iters} iterations: {len(result.cloud)} primitives, "
          f"train PSNR {p:.2f} dB, SSIM {s:.4f}; outputs in {a.out}")
    return 0


def _load_appearance(path):
    from .appearance import appearance_from_parameters
    from .io import load_appearance

    kind, params = load_appearance(path)
    return appearance_from_parameters(kind, params)


def _cmd_render(a) -> int:
    from .io import load_cloud, write_pfm, write_ppm
    from .render import render_image

    cloud = load_cloud(a.cloud)
    cams = _cameras_only(a.scene)
    app = _load_appearance(a.appearance_file) if a.appearance_file else None
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for cam in cams:
        o = render_image(cloud, cam, workers=a.workers)
        color = o.color if app is None else app.forward(o.color, cam.image_id)[0]
        stem = f"view_{cam.image_id:03d}"
        write_ppm(out / f"{stem}.ppm", color)
        write_pfm(out / f"{stem}_depth.pfm", o.depth)
        write_pfm(out / f"{stem}_confidence.pfm", o.confidence)
        write_pfm(out / f"{stem}_transmittance.pfm", o.transmittance)
    print(f"rendered {len(cams)} views to {out}")
    return 0


def _cameras_only(scene_path):
    import json

    from .io import camera_from_dict

    doc = json.loads(Path(scene_path).read_text())
    return [camera_from_dict(d) for d in doc["cameras"]]


def _cmd_mesh(a) -> int:
    from .io import export_mesh, load_cloud
    from .meshing import extract_mesh

    cloud = load_cloud(a.cloud)
    mesh = extract_mesh(cloud, a.res, a.iso, a.refine)
    export_mesh(mesh, a.out, a.format)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} triangles -> {a.out}")
    return 0


def _cmd_eval(a) -> int:
    from .io import load_mesh
    from .metrics import mesh_metrics

    report = mesh_metrics(load_mesh(a.pred), load_mesh(a.gt), a.tau, a.samples, a.seed,
                          crop=not a.no_crop)
    if a.cloud:
        if not a.scene:
            raise ValueError("--cloud requires --scene")
        from .io import load_cloud, load_scene
        from .training import evaluate_views

        cams, images, _, _ = load_scene(a.scene)
        report.psnr, report.ssim = evaluate_views(load_cloud(a.cloud), cams, images)
    print(report.to_json())
    return 0


def _cmd_gradcheck(a) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(a.seed, a.scenes)
    print(report.table())
    return 0 if report.passed else 1


def _cmd_synth(a) -> int:
    from .synthetic import make_synthetic_scene

    scene = make_synthetic_scene(a.kind, a.views, a.res, a.seed, exposure_jitter=a.jitter)
    path = scene.save(a.out)
    print(f"wrote {path}")
    return 0


COMMANDS = {"train": _cmd_train, "render": _cmd_render, "mesh": _cmd_mesh, "eval": _cmd_eval,
            "gradcheck": _cmd_gradcheck, "synth": _cmd_synth}


def main(argv=None) -> int:
    parser = _build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"confsplat {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
