"""Command-line entry point.

Subcommands: gen-data, train, evaluate, render, animate, mesh,
prune-report, gradcheck, serve. A TOML config file mirrors TrainConfig;
command-line flags override config-file values. Exit codes: 0 success,
1 usage error, 2 runtime failure.
"""

import argparse
import json
import os
import sys

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:
    import tomli as tomllib


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def _load_config(path) -> dict:
    with open(path, "rb") as f:
        return tomllib.load(f)


def _train_config(args) -> "TrainConfig":
    from .training import TrainConfig

    base = TrainConfig().to_dict()
    if args.config:
        file_cfg = _load_config(args.config)
        for k, v in file_cfg.items():
            if k not in base:
                raise SystemExit(f"error: unknown config key {k!r}")
            if isinstance(base[k], dict):
                for kk in v:
                    if kk not in base[k]:
                        raise SystemExit(
                            f"error: unknown config key {k}.{kk}")
                base[k].update(v)
            else:
                base[k] = v
    overrides = {
        "warmup_iterations": args.warmup_iterations,
        "formal_iterations": args.formal_iterations,
        "seed": args.seed,
        "num_bases": args.num_bases,
        "blend_weight_jitter": args.blend_jitter,
        "checkpoint_interval": args.checkpoint_interval,
        "sh_degree": args.sh_degree,
    }
    for k, v in overrides.items():
        if v is not None:
            base[k] = v
    if args.prune_threshold is not None:
        base["prune_schedule"]["threshold"] = args.prune_threshold
    if args.prune_start is not None:
        base["prune_schedule"]["start_iteration"] = args.prune_start
    if args.prune_interval is not None:
        base["prune_schedule"]["interval"] = args.prune_interval
    for name in ("levels", "table_size", "features_per_entry",
                 "coarsest_resolution", "finest_resolution"):
        v = getattr(args, f"hash_{name}", None)
        if v is not None:
            base["hash_config"][name] = v
    if args.densify_interval is not None:
        base["densify"]["interval"] = args.densify_interval
    return TrainConfig.from_dict(base)


def _parse_weights(text) -> dict:
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        k, _, v = part.partition(":")
        out[int(k)] = float(v)
    return out


def _parse_floats(text) -> np.ndarray:
    if not text:
        return None
    return np.asarray([float(x) for x in text.split(",")], dtype=np.float64)


def build_parser() -> _Parser:
    p = _Parser(prog="headspan",
                description="Personalized lifelong head avatars: training, "
                            "rendering, meshing, and serving.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[], help="generate a synthetic "
                       "multi-lifestage dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--lifestages", type=int, default=3)
    g.add_argument("--frames", type=int, default=50)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--variations", type=int, default=None)
    g.add_argument("--subdivisions", type=int, default=3)

    def add_train_flags(sp):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--warmup-iterations", type=int, default=None)
        sp.add_argument("--formal-iterations", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--num-bases", type=int, default=None)
        sp.add_argument("--blend-jitter", type=float, default=None)
        sp.add_argument("--checkpoint-interval", type=int, default=None)
        sp.add_argument("--sh-degree", type=int, default=None)
        sp.add_argument("--prune-threshold", type=float, default=None)
        sp.add_argument("--prune-start", type=int, default=None)
        sp.add_argument("--prune-interval", type=int, default=None)
        sp.add_argument("--hash-levels", type=int, default=None)
        sp.add_argument("--hash-table-size", dest="hash_table_size",
                        type=int, default=None)
        sp.add_argument("--hash-features", dest="hash_features_per_entry",
                        type=int, default=None)
        sp.add_argument("--hash-coarsest", dest="hash_coarsest_resolution",
                        type=int, default=None)
        sp.add_argument("--hash-finest", dest="hash_finest_resolution",
                        type=int, default=None)
        sp.add_argument("--densify-interval", type=int, default=None)

    t = sub.add_parser("train", help="warm-up + formal training with "
                       "periodic checkpoints")
    t.add_argument("--data", required=True, help="manifest.json path")
    t.add_argument("--workdir", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    add_train_flags(t)

    e = sub.add_parser("evaluate", help="PSNR/SSIM metrics CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=["holdout", "train", "all"],
                   default="holdout")

    r = sub.add_parser("render", help="one image from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--data", help="manifest for --frame")
    r.add_argument("--frame", help="render a recorded frame's controls")
    r.add_argument("--lifestage", type=int, default=None)
    r.add_argument("--weights", help="lifestage weights, e.g. '0:0.5,1:0.5'")
    r.add_argument("--shape", help="comma-separated shape coefficients")
    r.add_argument("--expr", help="comma-separated expression coefficients")
    r.add_argument("--azimuth", type=float, default=0.0)
    r.add_argument("--elevation", type=float, default=0.0)
    r.add_argument("--distance", type=float, default=None)
    r.add_argument("--size", type=int, default=256)
    r.add_argument("--dump-depth", help="write depth as .f32")
    r.add_argument("--dump-normal", help="write normals as .f32")
    r.add_argument("--dump-alpha", help="write alpha as 8-bit PNG")

    a = sub.add_parser("animate", help="image or mesh sequence from a "
                       "tracked-frame file")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--frames", required=True, help="tracked frames JSON")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--lifestage", type=int, default=0)
    a.add_argument("--mesh", action="store_true",
                   help="emit warped meshes instead of images")
    a.add_argument("--size", type=int, default=256)
    a.add_argument("--n-views", type=int, default=32)
    a.add_argument("--grid-resolution", type=int, default=96)

    m = sub.add_parser("mesh", help="static or defer-warped mesh export")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True, help=".obj or .ply path")
    m.add_argument("--lifestage", type=int, default=0)
    m.add_argument("--tracked", help="tracked frames JSON (warps the mesh)")
    m.add_argument("--tracked-index", type=int, default=0)
    m.add_argument("--n-views", type=int, default=32)
    m.add_argument("--grid-resolution", type=int, default=96)

    pr = sub.add_parser("prune-report", help="print the basis deactivation log")
    pr.add_argument("--file", help="prune_report.json path")
    pr.add_argument("--workdir", help="training workdir containing the log")

    gc = sub.add_parser("gradcheck", help="run all finite-difference suites")
    gc.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("serve", help="start the HTTP render service")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--max-size", type=int, default=512)
    return p


def cmd_gen_data(args):
    from .data import generate_synthetic

    m = generate_synthetic(
        args.out, num_lifestages=args.lifestages,
        frames_per_lifestage=args.frames, image_size=args.size,
        seed=args.seed, num_variations=args.variations,
        template_subdivisions=args.subdivisions)
    print(f"wrote {len(m.frames)} frames to {args.out}")


def cmd_train(args):
    from .data import load_dataset
    from .model import PersonalizedModel
    from .training import Trainer

    ds = load_dataset(args.data)
    cfg = _train_config(args)
    if args.resume:
        trainer = Trainer.resume(args.resume, ds, args.workdir, config=cfg)
    else:
        num_bases = cfg.num_bases or len(ds.lifestage_names)
        model = PersonalizedModel.create(
            ds.template, ds.lifestage_names, num_bases, cfg.hash_config,
            np.random.default_rng(cfg.seed), sh_degree=cfg.sh_degree,
            init_opacity=cfg.init_opacity,
            blend_jitter=cfg.blend_weight_jitter,
            residual_dim=cfg.residual_dim,
            hidden_feature_dim=cfg.hidden_feature_dim,
            mlp_width=cfg.mlp_width)
        trainer = Trainer(model, ds, cfg, args.workdir)
    final = trainer.train()
    rows = trainer.evaluate()
    from .training import write_metrics_csv

    write_metrics_csv(rows, os.path.join(args.workdir, "metrics.csv"))
    for r in rows:
        if r["kind"] != "frame":
            print(f"{r['id']}: PSNR {r['psnr']:.2f} dB, SSIM {r['ssim']:.4f}")
    print(f"final checkpoint: {final}")


def cmd_evaluate(args):
    from .data import load_dataset
    from .training import evaluate, load_checkpoint, write_metrics_csv

    ds = load_dataset(args.data)
    ck = load_checkpoint(args.checkpoint)
    idx = {"holdout": ds.holdout_frames(), "train": ds.train_frames(),
           "all": list(range(len(ds.frames)))}[args.split]
    rows = evaluate(ck.model, ds, idx, background=ck.config.background,
                    far=ck.config.far_depth)
    write_metrics_csv(rows, args.out)
    for r in rows:
        if r["kind"] != "frame":
            print(f"{r['id']}: PSNR {r['psnr']:.2f} dB, SSIM {r['ssim']:.4f}")


def cmd_render(args):
    from .imgio import save_f32, save_png_u8
    from .training import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    model = ck.model
    if args.frame:
        if not args.data:
            raise SystemExit("error: --frame requires --data")
        from .data import load_dataset

        ds = load_dataset(args.data)
        recs = {f.frame_id: f for f in ds.frames}
        if args.frame not in recs:
            raise SystemExit(f"error: unknown frame id {args.frame}")
        rec = recs[args.frame]
        out, _ = model.render_view(
            rec.camera, rec.lifestage, shape_coeffs=rec.shape_coeffs,
            expression_coeffs=rec.expression_coeffs,
            head_pose=rec.head_pose, background=ck.config.background,
            far=ck.config.far_depth, with_grad=False)
    else:
        if args.weights:
            spec = _parse_weights(args.weights)
        elif args.lifestage is not None:
            spec = args.lifestage
        else:
            spec = 0
        shape = _parse_floats(args.shape)
        expr = _parse_floats(args.expr)
        center = model.surfels.centers.mean(axis=0)
        radius = float(np.linalg.norm(model.surfels.centers - center,
                                      axis=1).max())
        distance = args.distance or 2.6 * radius
        from .cameras import orbit_camera

        cam = orbit_camera(center, args.azimuth, args.elevation, distance,
                           args.size, args.size)
        out, _ = model.render_view(
            cam, spec, shape_coeffs=shape, expression_coeffs=expr,
            with_grad=False)
    save_png_u8(args.out, out.color)
    if args.dump_depth:
        save_f32(args.dump_depth, out.depth)
    if args.dump_normal:
        save_f32(args.dump_normal, out.normal)
    if args.dump_alpha:
        save_png_u8(args.dump_alpha, out.alpha)
    print(f"wrote {args.out}")


def cmd_animate(args):
    from .fusion import export_mesh, mesh_sequence
    from .imgio import save_png_u8
    from .template import load_tracked_frames
    from .training import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    model = ck.model
    frames = load_tracked_frames(args.frames)
    os.makedirs(args.out, exist_ok=True)
    if args.mesh:
        _, meshes = mesh_sequence(model, args.lifestage, frames,
                                  n_views=args.n_views,
                                  grid_resolution=args.grid_resolution)
        for i, mesh in enumerate(meshes):
            export_mesh(mesh, os.path.join(args.out, f"frame_{i:04d}.obj"))
        print(f"wrote {len(meshes)} meshes to {args.out}")
        return
    from .cameras import orbit_camera

    center = model.surfels.centers.mean(axis=0)
    radius = float(np.linalg.norm(model.surfels.centers - center,
                                  axis=1).max())
    for i, tf in enumerate(frames):
        cam = tf.camera or orbit_camera(center, 0, 0, 2.6 * radius,
                                        args.size, args.size)
        out, _ = model.render_view(
            cam, tf.lifestage, shape_coeffs=tf.shape_coeffs,
            expression_coeffs=tf.expression_coeffs, head_pose=tf.head_pose,
            with_grad=False)
        save_png_u8(os.path.join(args.out, f"frame_{i:04d}.png"), out.color)
    print(f"wrote {len(frames)} images to {args.out}")


def cmd_mesh(args):
    from .fusion import defer_warp_mesh, export_mesh, extract_static_mesh
    from .template import load_tracked_frames
    from .training import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    model = ck.model
    mesh = extract_static_mesh(model, args.lifestage, n_views=args.n_views,
                               grid_resolution=args.grid_resolution)
    if args.tracked:
        frames = load_tracked_frames(args.tracked)
        tf = frames[args.tracked_index]
        mesh = defer_warp_mesh(mesh, model.canonical_mesh(), tf,
                               model.template)
    export_mesh(mesh, args.out)
    print(f"wrote {args.out} ({len(mesh.vertices)} vertices, "
          f"{len(mesh.triangles)} faces)")


def cmd_prune_report(args):
    path = args.file
    if not path and args.workdir:
        path = os.path.join(args.workdir, "prune_report.json")
    if not path:
        raise SystemExit("error: pass --file or --workdir")
    if not os.path.exists(path):
        print("no deactivations recorded")
        return
    from .basis import PruneLog

    log = PruneLog.load(path)
    if not log.events:
        print("no deactivations recorded")
        return
    for e in log.events:
        ws = ", ".join(f"{w:.6g}" for w in e.lifestage_weights)
        print(f"iteration {e.iteration}: basis {e.basis} deactivated "
              f"(per-lifestage weights: {ws})")


def cmd_gradcheck(args):
    from .gradcheck import run_all

    results = run_all(seed=args.seed, verbose=True)
    if not all(r.passed for r in results):
        raise SystemExit(2)


def cmd_serve(args):
    from .service import RenderService

    svc = RenderService(args.checkpoint, host=args.host, port=args.port,
                        max_image_size=args.max_size)
    svc.serve_forever()


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
    "animate": cmd_animate,
    "mesh": cmd_mesh,
    "prune-report": cmd_prune_report,
    "gradcheck": cmd_gradcheck,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except SystemExit as e:
        code = e.code if isinstance(e.code, int) else 1
        if isinstance(e.code, str):
            print(e.code, file=sys.stderr)
        return code
    except KeyboardInterrupt:
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
