"""Command-line interface: fixture generation, fitting, extraction, evaluation.

Every subcommand that writes an output also writes a ``<out>.manifest.json``
with the fully resolved configuration and seed, sufficient to re-run it.

Exit codes: 0 success, 1 runtime failure (non-finite loss), 2 usage or
input-parsing error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys

import numpy as np

from .geometry import (
    AnalyticShape,
    chamfer,
    evaluate_grid,
    grid_from_function,
    mae,
    marching_cubes,
    mesh_sdf_bruteforce,
    normalize_to_ball,
    psnr,
    sample_mesh_surface,
)
from .io_formats import (
    FileFormatError,
    load_checkpoint,
    load_shape_space,
    read_obj,
    read_ppm,
    read_xyz,
    save_checkpoint,
    save_shape_space,
    write_obj,
    write_ppm,
    write_xyz,
)
from .network import Checkpoint, FieldModel
from .training import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    fit_new_shape,
    l1_regression_loss,
    l2_image_loss,
    make_model,
    train_sdf,
    train_shape_space,
)

__all__ = ["main"]


class UsageError(Exception):
    """Validation failure mapped to exit code 2."""


# -- small helpers -----------------------------------------------------------------


def _parse_int_list(text):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}")


def _write_manifest(out_path, subcommand, args):
    resolved = {
        k: (list(v) if isinstance(v, tuple) else v)
        for k, v in sorted(vars(args).items())
        if k != "func"
    }
    doc = {"subcommand": subcommand, "argv": sys.argv[1:], "flags": resolved}
    with open(str(out_path) + ".manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2)


def _write_log_csv(path, log):
    if not log:
        return
    fields = list(log[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(log)


def _load_cloud(path):
    cloud = read_xyz(path)
    if cloud.normals is None:
        raise UsageError(f"{path}: point cloud has no normals (need x y z nx ny nz)")
    return cloud


def _normalize_cloud(cloud, mode):
    """Map positions into the 0.9-radius ball: y = (x - t) * s.

    Returns (positions, scale, translation). In 'auto' mode the identity is
    kept whenever the cloud already fits inside the unit ball.
    """
    pos = cloud.positions
    if mode == "never":
        return pos, 1.0, np.zeros(pos.shape[1])
    radius = float(np.max(np.linalg.norm(pos, axis=1)))
    if mode == "auto" and radius <= 1.0:
        return pos, 1.0, np.zeros(pos.shape[1])
    normalized, (s, t) = normalize_to_ball(cloud)
    return normalized.positions, s, t


def _model_transform(meta):
    s = float(meta.get("scale", 1.0))
    t = np.asarray(meta.get("translation", (0.0, 0.0, 0.0)), dtype=float)
    return s, t


def _gt_sdf_and_sampler(tag):
    """Resolve a --gt-shape tag to (sdf function, surface sampler)."""
    if tag.startswith("mesh:"):
        mesh = read_obj(tag[5:])
        if len(mesh.triangles) == 0:
            raise UsageError(f"{tag[5:]}: mesh has no triangles")
        return (
            lambda x: mesh_sdf_bruteforce(mesh, x),
            lambda n, rng: sample_mesh_surface(mesh, n, rng).positions,
        )
    shape = AnalyticShape.parse(tag)
    return shape.sdf, lambda n, rng: shape.sample_surface(n, rng).positions


def _extract_mesh(model, meta, resolution, iso=0.0):
    """Marching cubes over the normalized box, mapped to original coordinates."""
    s, t = _model_transform(meta)
    lo, hi = -np.ones(3), np.ones(3)
    grid = evaluate_grid(model, (lo, hi), resolution)
    mesh = marching_cubes(grid, iso * s)
    mesh.vertices = mesh.vertices / s + t
    return mesh


def _pixel_grid(height, width):
    u = -1.0 + 2.0 * (np.arange(width) + 0.5) / width
    v = -1.0 + 2.0 * (np.arange(height) + 0.5) / height
    vv, uu = np.meshgrid(v, u, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def _render(model, height, width):
    uv = _pixel_grid(height, width)
    out = np.empty((uv.shape[0], model.mlp.out_dim))
    for start in range(0, uv.shape[0], 65536):
        out[start : start + 65536] = model.forward(uv[start : start + 65536])
    img = np.clip(out, 0.0, 1.0)
    if model.mlp.out_dim == 1:
        return img.reshape(height, width)
    return img.reshape(height, width, model.mlp.out_dim)


# -- subcommands -------------------------------------------------------------------


def cmd_make_fixture(args):
    shape = AnalyticShape.parse(args.shape)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    cloud = shape.sample_surface(args.n, np.random.default_rng(args.seed))
    write_xyz(args.out, cloud)
    _write_manifest(args.out, "make-fixture", args)
    print(f"wrote {args.n} points to {args.out}")
    return 0


def cmd_fit_sdf(args):
    cloud = _load_cloud(args.input)
    schedule = _parse_int_list(args.schedule)
    steps = _parse_int_list(args.steps_per_stage) if args.steps_per_stage else None
    cfg = TrainConfig(
        lam=args.lam,
        tau=args.tau,
        lr=args.lr,
        batch_points=args.batch,
        k_schedule=schedule,
        steps_per_stage=steps,
        seed=args.seed,
        encoder=args.encoder,
        channels=args.c,
        projections=args.m,
        degree=args.degree,
        freeze_directions=args.freeze_directions,
        fourier_frequencies=args.k if args.encoder == "fpe" else 128,
        pretrain_steps=args.pretrain_steps,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    positions, scale, translation = _normalize_cloud(cloud, args.normalize)
    normals = cloud.normals

    model, log = train_sdf(positions, normals, cfg)
    meta = {
        "kind": "sdf",
        "scale": scale,
        "translation": list(np.asarray(translation, dtype=float)),
        "seed": args.seed,
        "final_loss": log[-1]["loss"] if log else None,
    }
    save_checkpoint(args.out, Checkpoint.of(model, meta=meta))
    log_path = args.log or str(args.out) + ".log.csv"
    _write_log_csv(log_path, log)
    _write_manifest(args.out, "fit-sdf", args)
    print(f"wrote {args.out} (final loss {meta['final_loss']:.6f})")
    return 0


def cmd_extract(args):
    if args.res < 2:
        raise UsageError("--res must be >= 2")
    ckpt = load_checkpoint(args.model)
    model = ckpt.build_model()
    mesh = _extract_mesh(model, ckpt.meta, args.res, iso=args.iso)
    write_obj(args.out, mesh)
    _write_manifest(args.out, "extract", args)
    print(f"wrote {args.out}: {len(mesh.vertices)} vertices, "
          f"{len(mesh.triangles)} triangles")
    return 0


def cmd_eval(args):
    if args.chamfer_n < 1 or args.mae_res < 2 or args.mc_res < 2:
        raise UsageError("--chamfer-n >= 1, --mae-res >= 2, --mc-res >= 2 required")
    ckpt = load_checkpoint(args.model)
    model = ckpt.build_model()
    s, t = _model_transform(ckpt.meta)
    gt_sdf, gt_sampler = _gt_sdf_and_sampler(args.gt_shape)
    rng = np.random.default_rng(args.seed)

    mesh = _extract_mesh(model, ckpt.meta, args.mc_res)
    if len(mesh.triangles) == 0:
        raise TrainingDiverged("extracted surface is empty")
    ours = sample_mesh_surface(mesh, args.chamfer_n, rng).positions
    theirs = gt_sampler(args.chamfer_n, rng)
    ch = chamfer(ours, theirs)

    # MAE over the training box mapped back to original coordinates
    lo, hi = t - 1.0 / s, t + 1.0 / s
    pred = grid_from_function(
        lambda x: model.forward((x - t) * s)[:, 0] / s, (lo, hi), args.mae_res
    )
    gt = grid_from_function(gt_sdf, (lo, hi), args.mae_res)
    m = mae(pred, gt)

    metrics = {"chamfer": ch, "mae": m}
    print(json.dumps(metrics))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(metrics, fh, indent=2)
        _write_manifest(args.out, "eval", args)
    return 0


def cmd_fit_image(args):
    image = read_ppm(args.input)
    if args.m < 1:
        raise UsageError("--m must be >= 1")
    height, width = image.shape[:2]
    out_dim = image.shape[2] if image.ndim == 3 else 1
    cfg = TrainConfig(
        encoder=args.encoder,
        channels=args.c,
        projections=args.m,
        degree=args.degree,
        k_schedule=(args.k,),
        input_dim=2,
        out_dim=out_dim,
        domain_radius=math.sqrt(2.0),
        seed=args.seed,
        fourier_frequencies=args.k if args.encoder == "fpe" else 128,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    rng = np.random.default_rng(args.seed)
    model = make_model(cfg, args.k, rng)
    uv = _pixel_grid(height, width)
    rgb = image.reshape(uv.shape[0], out_dim)

    params = model.get_params()
    adam = AdamState(params.size, cfg.beta1, cfg.beta2, cfg.eps)
    log = []
    for step in range(args.steps):
        loss, up = l2_image_loss(model, uv, rgb)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"image loss non-finite at step {step}")
        grads = model.backward(up.x, up.g_value)
        params = adam.step(params, grads, args.lr)
        model.set_params(params)
        log.append({"step": step, "loss": loss})

    rendered = _render(model, height, width)
    quality = psnr(image, rendered)
    meta = {"kind": "image", "height": height, "width": width, "psnr": quality,
            "seed": args.seed}
    save_checkpoint(args.out, Checkpoint.of(model, meta=meta))
    _write_log_csv(args.log or str(args.out) + ".log.csv", log)
    _write_manifest(args.out, "fit-image", args)
    print(f"wrote {args.out} (psnr {quality:.2f} dB)")
    return 0


def cmd_render_image(args):
    ckpt = load_checkpoint(args.model)
    model = ckpt.build_model()
    if args.res:
        try:
            width, height = (int(v) for v in args.res.lower().split("x"))
        except ValueError:
            raise UsageError(f"--res expects WxH, got {args.res!r}")
    else:
        height = int(ckpt.meta.get("height", 0))
        width = int(ckpt.meta.get("width", 0))
        if height < 1 or width < 1:
            raise UsageError("--res required: checkpoint has no stored size")
    if height < 1 or width < 1:
        raise UsageError("resolution must be positive")
    rendered = _render(model, height, width)
    write_ppm(args.out, rendered)
    _write_manifest(args.out, "render-image", args)
    msg = f"wrote {args.out} ({width}x{height})"
    if args.ref:
        ref = read_ppm(args.ref)
        if ref.shape != rendered.shape:
            raise UsageError(
                f"--ref size {ref.shape} does not match render size {rendered.shape}"
            )
        # compare what was actually written: quantized pixel values
        quantized = np.floor(rendered * 255.0 + 0.5) / 255.0
        quality = psnr(ref, quantized)
        msg += f" psnr {quality:.2f} dB"
        print(json.dumps({"psnr": quality}))
    print(msg)
    return 0


def cmd_regress_sdf(args):
    if args.m < 1:
        raise UsageError("--m must be >= 1")
    if args.grid_res < 2:
        raise UsageError("--grid-res must be >= 2")
    gt_sdf, _ = _gt_sdf_and_sampler(args.gt_shape)
    cfg = TrainConfig(
        encoder=args.encoder,
        channels=args.c,
        projections=args.m,
        degree=args.degree,
        k_schedule=(args.k,),
        seed=args.seed,
        fourier_frequencies=args.k if args.encoder == "fpe" else 128,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    rng = np.random.default_rng(args.seed)
    model = make_model(cfg, args.k, rng)

    axis = np.linspace(-1.0, 1.0, args.grid_res)
    xx, yy, zz = np.meshgrid(axis, axis, axis, indexing="ij")
    points = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    values = gt_sdf(points)

    params = model.get_params()
    adam = AdamState(params.size, cfg.beta1, cfg.beta2, cfg.eps)
    log = []
    for step in range(args.steps):
        idx = rng.integers(0, points.shape[0], size=args.batch)
        loss, up = l1_regression_loss(model, points[idx], values[idx])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"regression loss non-finite at step {step}")
        grads = model.backward(up.x, up.g_value)
        # halve the rate every 500 steps: the constant-rate endgame
        # oscillates around the optimum instead of settling
        lr = args.lr * 0.5 ** (step // 500)
        params = adam.step(params, grads, lr)
        model.set_params(params)
        log.append({"step": step, "loss": loss})

    meta = {"kind": "sdf", "scale": 1.0, "translation": [0.0, 0.0, 0.0],
            "seed": args.seed, "final_loss": log[-1]["loss"] if log else None}
    save_checkpoint(args.out, Checkpoint.of(model, meta=meta))
    _write_log_csv(args.log or str(args.out) + ".log.csv", log)
    _write_manifest(args.out, "regress-sdf", args)
    print(f"wrote {args.out} (final L1 {meta['final_loss']:.6f})")
    return 0


def cmd_shape_space_train(args):
    paths = [p for p in args.inputs.split(",") if p.strip()]
    if len(paths) < 2:
        raise UsageError("--inputs needs at least 2 comma-separated clouds")
    clouds = []
    for path in paths:
        cloud = _load_cloud(path)
        clouds.append((cloud.positions, cloud.normals))
    cfg = TrainConfig(
        lam=args.lam, tau=args.tau, lr=args.lr, batch_points=args.batch,
        seed=args.seed, pretrain_steps=args.pretrain_steps,
    )
    space, log = train_shape_space(clouds, cfg, steps_per_shape=args.steps_per_shape)
    save_shape_space(args.out, space)
    _write_log_csv(args.log or str(args.out) + ".log.csv", log)
    _write_manifest(args.out, "shape-space train", args)
    print(f"wrote {args.out} ({len(space.encodings)} shapes)")
    return 0


def cmd_shape_space_fit(args):
    space = load_shape_space(args.space)
    cloud = _load_cloud(args.input)
    enc, log = fit_new_shape(
        space, cloud.positions, cloud.normals, steps=args.steps, seed=args.seed
    )
    model = FieldModel(enc, space.mlp)
    meta = {"kind": "sdf", "scale": 1.0, "translation": [0.0, 0.0, 0.0],
            "seed": args.seed, "from_shape_space": str(args.space),
            "final_loss": log[-1]["loss"] if log else None}
    save_checkpoint(args.out, Checkpoint.of(model, meta=meta))
    _write_log_csv(args.log or str(args.out) + ".log.csv", log)
    _write_manifest(args.out, "shape-space fit", args)
    print(f"wrote {args.out} (final loss {meta['final_loss']:.6f})")
    return 0


# -- parser ------------------------------------------------------------------------


def _add_encoder_flags(p, m_default, k_default):
    p.add_argument("--encoder", choices=("spe", "fpe", "identity"), default="spe")
    p.add_argument("--k", type=int, default=k_default,
                   help="spline segments (or Fourier frequencies)")
    p.add_argument("--c", type=int, default=64, help="spline channels")
    p.add_argument("--m", type=int, default=m_default, help="projection directions")
    p.add_argument("--degree", type=int, default=1, choices=(0, 1, 2))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spefield",
        description="Spline positional-encoding implicit fields: fit, extract, "
                    "evaluate.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("make-fixture", help="sample an analytic surface to XYZ")
    p.add_argument("--shape", required=True,
                   help="sphere:R | torus:R:r | box:ax:ay:az")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("fit-sdf", help="fit an SDF to an oriented point cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _add_encoder_flags(p, m_default=3, k_default=256)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=10000)
    p.add_argument("--schedule", default="2,8,32,128,256")
    p.add_argument("--steps-per-stage", default=None,
                   help="comma list matching --schedule")
    p.add_argument("--pretrain-steps", type=int,
                   default=TrainConfig.pretrain_steps)
    p.add_argument("--freeze-directions", action="store_true")
    p.add_argument("--normalize", choices=("auto", "always", "never"),
                   default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None, help="training log CSV path")
    p.set_defaults(func=cmd_fit_sdf)

    p = sub.add_parser("extract", help="marching-cubes mesh from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="Chamfer + MAE against a ground-truth shape")
    p.add_argument("--model", required=True)
    p.add_argument("--gt-shape", required=True,
                   help="sphere:R | torus:R:r | box:ax:ay:az | mesh:path")
    p.add_argument("--chamfer-n", type=int, default=25000)
    p.add_argument("--mae-res", type=int, default=64)
    p.add_argument("--mc-res", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit-image", help="fit an MLP field to a PPM/PGM image")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _add_encoder_flags(p, m_default=32, k_default=128)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_fit_image)

    p = sub.add_parser("render-image", help="render an image checkpoint to PPM")
    p.add_argument("--model", required=True)
    p.add_argument("--res", default=None, help="WxH (default: training size)")
    p.add_argument("--out", required=True)
    p.add_argument("--ref", default=None, help="reference image for PSNR")
    p.set_defaults(func=cmd_render_image)

    p = sub.add_parser("regress-sdf", help="L1-regress an analytic SDF on a grid")
    p.add_argument("--gt-shape", required=True)
    p.add_argument("--out", required=True)
    _add_encoder_flags(p, m_default=16, k_default=128)
    p.add_argument("--grid-res", type=int, default=64)
    p.add_argument("--steps", type=int, default=2500)
    p.add_argument("--batch", type=int, default=5000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_regress_sdf)

    p = sub.add_parser("shape-space", help="auto-decoder shape-space training")
    space_sub = p.add_subparsers(dest="space_command", required=True)

    q = space_sub.add_parser("train", help="train shared MLP + per-shape encodings")
    q.add_argument("--inputs", required=True, help="comma-separated XYZ paths")
    q.add_argument("--out", required=True)
    q.add_argument("--steps-per-shape", type=int, default=None)
    q.add_argument("--pretrain-steps", type=int,
                   default=TrainConfig.pretrain_steps)
    q.add_argument("--lambda", dest="lam", type=float, default=0.1)
    q.add_argument("--tau", type=float, default=1.0)
    q.add_argument("--lr", type=float, default=1e-4)
    q.add_argument("--batch", type=int, default=10000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--log", default=None)
    q.set_defaults(func=cmd_shape_space_train)

    q = space_sub.add_parser("fit", help="fit a new shape with the MLP frozen")
    q.add_argument("--space", required=True)
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--steps", type=int, default=None)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--log", default=None)
    q.set_defaults(func=cmd_shape_space_fit)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
