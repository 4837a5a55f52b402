"""Command line driver: reproducible scene generation, evaluation,
refinement, gradient checking and heatmap export.

Every command is deterministic given its effective configuration; the
effective configuration is echoed into the output directory as
effective_config.json. Exit codes: 0 success, 1 validation/usage error,
2 numerical failure, 3 I/O failure. DEPI_LOG=debug|info|warning controls
verbosity.
"""

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from itertools import combinations

import numpy as np

from . import imageio
from .consistency import MatchabilityConfig, build_affinities, expected_error_map
from .exceptions import DivergenceError, NumericalError, ValidationError
from .field import (
    UvTransform,
    apply_uv_transform,
    load_field,
    perturb_field,
    save_field,
)
from .geometry import Camera, CalibratedPair, save_cameras
from .losses import (
    FieldGradient,
    LossWeights,
    distillation_loss,
    finite_difference_check,
    grad_multiview,
    grad_photometric,
    supervised_loss,
)
from .metrics import evaluate
from .refine import RefineConfig, RefineTrace, observations_from_scene, refine_viewset
from .scene import (
    RenderedView,
    SyntheticScene,
    default_scene,
    render,
    save_scene_config,
    visibility,
)

logger = logging.getLogger(__name__)

PROG = "depi"


def _setup_logging():
    level = os.environ.get("DEPI_LOG", "warning").strip().lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO,
              "warning": logging.WARNING, "error": logging.ERROR}
    logging.basicConfig(
        level=levels.get(level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from exc


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo_config(out_dir, command, payload):
    _write_json(os.path.join(out_dir, "effective_config.json"),
                {"command": command, **payload})


def _pick(cli_value, file_cfg, key, default):
    """CLI flag > config-file entry > default."""
    if cli_value is not None:
        return cli_value
    if file_cfg and key in file_cfg:
        return file_cfg[key]
    return default


# ---------------------------------------------------------------- scene-gen

def _field_name(k):
    return f"field_{k:02d}.bin"


def cmd_scene_gen(args):
    cfg_file = _load_json(args.config) if args.config else None
    if cfg_file and ("surface" in cfg_file or "surfaces" in cfg_file):
        scene = SyntheticScene.from_config(cfg_file)
    else:
        res = _pick(args.resolution, cfg_file, "resolution", "64x64")
        if isinstance(res, str):
            w, _, h = res.partition("x")
            res = (int(w), int(h or w))
        scene = default_scene(
            n_cameras=int(_pick(args.cameras, cfg_file, "cameras", 2)),
            resolution=tuple(res),
            extent_deg=float(_pick(args.extent, cfg_file, "extent_deg", 300.0)),
            texture_seed=int(_pick(args.seed, cfg_file, "seed", 7)),
        )
    os.makedirs(args.out, exist_ok=True)
    save_scene_config(os.path.join(args.out, "scene.json"), scene)
    save_cameras(os.path.join(args.out, "cameras.json"), scene.cameras)

    views = [render(scene, k) for k in range(len(scene.cameras))]
    for k, v in enumerate(views):
        save_field(os.path.join(args.out, _field_name(k)), v.field)
        imageio.write_ppm(os.path.join(args.out, f"rgb_{k:02d}.ppm"), v.rgb)
        imageio.write_pfm(os.path.join(args.out, f"depth_{k:02d}.pfm"), v.depth)

    pair_records = []
    for i, j in combinations(range(len(views)), 2):
        pair = CalibratedPair.from_cameras(scene.cameras[i], scene.cameras[j])
        pair_records.append({
            "view_a": i, "view_b": j,
            "F": [float(x) for x in pair.F.reshape(-1)],
        })
        for a, b in ((i, j), (j, i)):
            vis = visibility(scene, views[a], views[b])
            imageio.write_pgm8(
                os.path.join(args.out, f"vis_{a:02d}_{b:02d}.pgm"),
                vis.astype(np.uint8) * 255,
            )
    _write_json(os.path.join(args.out, "pairs.json"), {"pairs": pair_records})
    _echo_config(args.out, "scene-gen", {"scene": scene.to_config()})
    n_fg = [int(v.field.n_foreground) for v in views]
    print(f"{PROG}: wrote {len(views)} views ({len(pair_records)} pairs) "
          f"to {args.out}; foreground pixels per view: {n_fg}")
    return 0


# -------------------------------------------------------------------- shared

def load_scene_dir(path):
    """Scene plus re-rendered views from a scene-gen output directory."""
    scene = SyntheticScene.from_config(_load_json(os.path.join(path, "scene.json")))
    views = []
    for k in range(len(scene.cameras)):
        field = load_field(os.path.join(path, _field_name(k)))
        depth = imageio.read_pfm(os.path.join(path, f"depth_{k:02d}.pfm"))
        rgb = imageio.read_ppm(os.path.join(path, f"rgb_{k:02d}.ppm"))
        views.append(RenderedView(field=field, depth=depth.astype(float),
                                  rgb=rgb, camera_index=k))
    return scene, views


def _load_pred_fields(args, views):
    if args.fields:
        if len(args.fields) != len(views):
            raise ValidationError(
                f"{len(args.fields)} field files for {len(views)} views"
            )
        return [load_field(p) for p in args.fields]
    return [v.field for v in views]


def _write_heatmaps(out_dir, scene, views, fields, sigma):
    cfg = MatchabilityConfig(sigma=sigma)
    kinds = (("geometric", "epi"), ("photometric", "pho"))
    for i, j in combinations(range(len(views)), 2):
        pair = CalibratedPair.from_cameras(scene.cameras[i], scene.cameras[j])
        vis_ij = visibility(scene, views[i], views[j])
        vis_ji = visibility(scene, views[j], views[i])
        aff = build_affinities(fields[i], fields[j], pair, views[i].rgb,
                               views[j].rgb, vis_ij, vis_ji, cfg)
        back = aff.swapped()
        for kind, tag in kinds:
            for a, b, s, f in ((i, j, aff, fields[i]), (j, i, back, fields[j])):
                m = expected_error_map(s, f, kind)
                vmax = float(m.max())
                scaled = np.zeros(m.shape, dtype=np.uint16)
                if vmax > 0:
                    scaled = np.round(m / vmax * 65535.0).astype(np.uint16)
                stem = os.path.join(out_dir, f"heat_{tag}_{a:02d}_{b:02d}")
                imageio.write_pgm16(stem + ".pgm", scaled)
                ys, xs = np.nonzero(f.foreground)
                with open(stem + ".csv", "w") as fh:
                    fh.write(f"# max={vmax!r}\n")
                    fh.write("x,y,value\n")
                    for x, y in zip(xs, ys):
                        fh.write(f"{x},{y},{float(m[y, x])!r}\n")


# ------------------------------------------------------------------- eval

def cmd_eval(args):
    scene, views = load_scene_dir(args.scene)
    preds = _load_pred_fields(args, views)
    os.makedirs(args.out, exist_ok=True)
    report = evaluate(
        scene, views, preds,
        gps_kappa=args.gps_kappa, vs_kappa=args.vs_kappa, vs_grid=args.vs_grid,
    )
    report.to_json(os.path.join(args.out, "report.json"))
    report.to_csv(os.path.join(args.out, "report.csv"))
    if not args.no_heatmaps:
        _write_heatmaps(args.out, scene, views, preds, args.sigma)
    _echo_config(args.out, "eval", {
        "scene": args.scene, "fields": args.fields,
        "gps_kappa": args.gps_kappa, "vs_kappa": args.vs_kappa,
        "vs_grid": args.vs_grid, "sigma": args.sigma,
    })
    print(f"{PROG}: epi_error={report.epi_error:.6g}px gps={report.gps:.6g} "
          f"auc30={report.auc30:.6g} mpvpe={report.mpvpe:.6g}m mvs={report.mvs:.6g}")
    return 0


def cmd_heatmap(args):
    scene, views = load_scene_dir(args.scene)
    preds = _load_pred_fields(args, views)
    os.makedirs(args.out, exist_ok=True)
    _write_heatmaps(args.out, scene, views, preds, args.sigma)
    _echo_config(args.out, "heatmap", {
        "scene": args.scene, "fields": args.fields, "sigma": args.sigma,
    })
    print(f"{PROG}: heatmaps written to {args.out}")
    return 0


# ------------------------------------------------------------------ refine

def _rotation_about_y(deg):
    a = math.radians(deg)
    return np.array([
        [math.cos(a), 0.0, math.sin(a)],
        [0.0, 1.0, 0.0],
        [-math.sin(a), 0.0, math.cos(a)],
    ])


def _parse_schedule(text):
    sched = []
    for part in text.split(","):
        it, _, sig = part.partition(":")
        sched.append((int(it), float(sig)))
    return tuple(sched)


def cmd_refine(args):
    file_cfg = _load_json(args.config) if args.config else {}
    scene, views = load_scene_dir(args.scene)
    os.makedirs(args.out, exist_ok=True)

    weights = LossWeights(
        lambda_m=float(_pick(args.lambda_m, file_cfg, "lambda_m", 1.0)),
        lambda_r=float(_pick(args.lambda_r, file_cfg, "lambda_r", 2000.0)),
        lambda_t=float(_pick(args.lambda_t, file_cfg, "lambda_t", 10.0)),
    )
    match_cfg = MatchabilityConfig(
        sigma=float(_pick(args.sigma, file_cfg, "sigma", 0.05)),
        omega_grid=int(_pick(args.omega_grid, file_cfg, "omega_grid", 32)),
        omega_mode=_pick(args.omega_mode, file_cfg, "omega_mode", "grid"),
        single_e=bool(_pick(None, file_cfg, "single_e", False) or args.single_e),
        unnormalized=bool(
            _pick(None, file_cfg, "unnormalized", False) or args.unnormalized
        ),
    )
    schedule = _pick(args.sigma_schedule, file_cfg, "sigma_schedule", None)
    if isinstance(schedule, str):
        schedule = _parse_schedule(schedule)
    elif isinstance(schedule, list):
        schedule = tuple((int(i), float(s)) for i, s in schedule)
    seed = int(_pick(args.seed, file_cfg, "seed", 0))
    rotate_deg = float(_pick(args.rotate_start, file_cfg, "rotate_start", 0.0))
    perturb_std = float(_pick(args.perturb, file_cfg, "perturb", 0.05))

    if rotate_deg != 0.0:
        # the reference lattice rotates with the start so the kernel sees
        # an isometry, which is the degeneracy being demonstrated
        rot = UvTransform.rotation(math.radians(rotate_deg))
        match_cfg = dataclasses.replace(match_cfg, omega_transform=rot)

    cfg = RefineConfig(
        iterations=int(_pick(args.iterations, file_cfg, "iterations", 500)),
        step=float(_pick(args.step, file_cfg, "step", 1e-3)),
        optimizer=_pick(args.optimizer, file_cfg, "optimizer", "adam"),
        weights=weights,
        matchability=match_cfg,
        sigma_schedule=schedule,
        seed=seed,
        threads=int(args.threads),
    )

    gt_fields = [v.field for v in views]
    base = [perturb_field(f, perturb_std, seed + k)
            for k, f in enumerate(gt_fields)]
    if rotate_deg != 0.0:
        init = [apply_uv_transform(f, rot) for f in base]
    else:
        init = [f.copy() for f in base]

    corrupt = _pick(args.corrupt_camera, file_cfg, "corrupt_camera", None)
    loss_scene = scene
    if corrupt:
        idx_s, _, deg_s = str(corrupt).partition(":")
        idx, deg = int(idx_s), float(deg_s or 2.0)
        cams = list(scene.cameras)
        cam = cams[idx]
        R_err = _rotation_about_y(deg) @ cam.R
        cams[idx] = Camera(K=cam.K.copy(), R=R_err, t=-R_err @ cam.center,
                           width=cam.width, height=cam.height)
        loss_scene = SyntheticScene(
            patches=scene.patches, cameras=cams,
            resolution=scene.resolution, texture=scene.texture,
        )
    # observations: epipolar geometry from loss_scene (possibly corrupted),
    # visibility and images from the true renders
    _, observations = observations_from_scene(loss_scene, views=views)

    for k, f in enumerate(init):
        save_field(os.path.join(args.out, f"field_init_{k:02d}.bin"), f)
    report_before = evaluate(scene, views, init)
    report_before.to_json(os.path.join(args.out, "report_before.json"))

    _echo_config(args.out, "refine", {
        "scene": args.scene, "perturb": perturb_std,
        "rotate_start": rotate_deg, "corrupt_camera": corrupt,
        "refine": cfg.to_dict(),
    })

    try:
        refined, trace = refine_viewset(init, observations, cfg,
                                        frozen=base, gt=gt_fields)
    except DivergenceError as exc:
        if exc.trace is not None:
            exc.trace.to_csv(os.path.join(args.out, "trace.csv"))
        print(f"{PROG}: divergence: {exc}", file=sys.stderr)
        raise

    trace.to_csv(os.path.join(args.out, "trace.csv"))
    for k, f in enumerate(refined):
        save_field(os.path.join(args.out, f"field_refined_{k:02d}.bin"), f)
    report_after = evaluate(scene, views, refined)
    payload = report_after.to_dict()
    payload["uv_error_initial"] = trace.uv_error[0]
    payload["uv_error_final"] = trace.uv_error[-1]
    payload["uv_error_regressed"] = bool(trace.uv_error[-1] > trace.uv_error[0])
    payload["epi_trace_initial"] = trace.epi_error[0]
    payload["epi_trace_final"] = trace.epi_error[-1]
    _write_json(os.path.join(args.out, "report_after.json"), payload)

    print(f"{PROG}: {cfg.iterations} iterations: "
          f"epi {trace.epi_error[0]:.4g} -> {trace.epi_error[-1]:.4g} px, "
          f"uv {trace.uv_error[0]:.4g} -> {trace.uv_error[-1]:.4g}"
          + (" [uv regressed]" if payload["uv_error_regressed"] else ""))
    return 0


# --------------------------------------------------------------- grad-check

def cmd_grad_check(args):
    if args.scene:
        scene, views = load_scene_dir(args.scene)
    else:
        scene = default_scene(n_cameras=2, resolution=(48, 48))
        views = [render(scene, k) for k in range(2)]
    gt_a, gt_b = views[0].field, views[1].field
    pred_a = perturb_field(gt_a, 0.03, args.seed)
    pred_b = perturb_field(gt_b, 0.03, args.seed + 1)
    frozen_a = perturb_field(gt_a, 0.01, args.seed + 2)

    pair = CalibratedPair.from_cameras(scene.cameras[0], scene.cameras[1])
    vis_ab = visibility(scene, views[0], views[1])
    vis_ba = visibility(scene, views[1], views[0])
    cfg = MatchabilityConfig(sigma=args.sigma, omega_mode=args.omega_mode)
    aff = build_affinities(pred_a, pred_b, pair, views[0].rgb, views[1].rgb,
                           vis_ab, vis_ba, cfg)

    def multiview_a(f):
        loss, ga, _ = grad_multiview(f, pred_b, aff)
        if args.corrupt:
            ya, xa = np.nonzero(f.foreground)
            g = FieldGradient(ga.values.copy(), ga.foreground)
            g.values[ya[0], xa[0], 0] += 1e-3
            return loss, g
        return loss, ga

    def multiview_b(f):
        loss, _, gb = grad_multiview(pred_a, f, aff)
        return loss, gb

    def photometric_a(f):
        loss, ga, _ = grad_photometric(f, pred_b, aff)
        return loss, ga

    checks = [
        ("supervised", lambda f: supervised_loss(f, gt_a), pred_a),
        ("distillation", lambda f: distillation_loss(f, frozen_a), pred_a),
        ("multiview/A", multiview_a, pred_a),
        ("multiview/B", multiview_b, pred_b),
        ("photometric/A", photometric_a, pred_a),
    ]
    failed = False
    for name, fn, field in checks:
        res = finite_difference_check(
            fn, field, epsilon=args.epsilon, samples=args.samples,
            seed=args.seed, details=True,
        )
        if res.max_abs_grad < 1e-12:
            print(f"{name}: WARNING vanishing gradient "
                  f"(max |g| = {res.max_abs_grad:.3g}); "
                  f"finite differences cannot resolve it")
            continue
        status = "ok" if res.max_rel_error <= args.tolerance else "FAIL"
        print(f"{name}: max rel err {res.max_rel_error:.3e} "
              f"({res.n_checked} samples) {status}"
              + ("" if status == "ok" else
                 f" at pixel {res.worst_pixel} component {res.worst_component}"))
        failed = failed or status == "FAIL"
    if failed:
        raise NumericalError("gradient check failed")
    print(f"{PROG}: all gradient checks passed")
    return 0


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(
        prog=PROG,
        description="Dense epipolar-consistency engine for UV keypoint fields",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sg = sub.add_parser("scene-gen", help="render a synthetic calibrated scene")
    sg.add_argument("--config", help="scene config JSON")
    sg.add_argument("--out", required=True)
    sg.add_argument("--seed", type=int, default=None)
    sg.add_argument("--cameras", type=int, default=None)
    sg.add_argument("--resolution", default=None, help="WxH, e.g. 64x64")
    sg.add_argument("--extent", type=float, default=None,
                    help="cylinder angular extent in degrees")
    sg.set_defaults(func=cmd_scene_gen)

    ev = sub.add_parser("eval", help="metric suite over predicted fields")
    ev.add_argument("--scene", required=True, help="scene-gen output directory")
    ev.add_argument("--fields", nargs="+", default=None,
                    help="predicted field dumps, one per view (default: ground truth)")
    ev.add_argument("--out", required=True)
    ev.add_argument("--gps-kappa", type=float, default=0.255)
    ev.add_argument("--vs-kappa", type=float, default=0.05)
    ev.add_argument("--vs-grid", type=int, default=12)
    ev.add_argument("--sigma", type=float, default=0.05, help="heatmap kernel width")
    ev.add_argument("--no-heatmaps", action="store_true")
    ev.set_defaults(func=cmd_eval)

    hm = sub.add_parser("heatmap", help="expected-error heatmaps only")
    hm.add_argument("--scene", required=True)
    hm.add_argument("--fields", nargs="+", default=None)
    hm.add_argument("--out", required=True)
    hm.add_argument("--sigma", type=float, default=0.05)
    hm.set_defaults(func=cmd_heatmap)

    rf = sub.add_parser("refine", help="gradient-refine perturbed fields")
    rf.add_argument("--scene", required=True)
    rf.add_argument("--out", required=True)
    rf.add_argument("--config", help="experiment config JSON")
    rf.add_argument("--iterations", type=int, default=None)
    rf.add_argument("--step", type=float, default=None)
    rf.add_argument("--optimizer", choices=("plain", "momentum", "adam"),
                    default=None)
    rf.add_argument("--sigma", type=float, default=None)
    rf.add_argument("--sigma-schedule", default=None,
                    help="comma list of it:sigma, e.g. 0:0.1,200:0.03")
    rf.add_argument("--omega-grid", type=int, default=None)
    rf.add_argument("--omega-mode", choices=("grid", "partners"), default=None)
    rf.add_argument("--single-e", action="store_true")
    rf.add_argument("--unnormalized", action="store_true")
    rf.add_argument("--lambda-m", type=float, default=None)
    rf.add_argument("--lambda-r", type=float, default=None)
    rf.add_argument("--lambda-t", type=float, default=None)
    rf.add_argument("--perturb", type=float, default=None,
                    help="stddev of the synthetic initialization noise")
    rf.add_argument("--rotate-start", type=float, default=None,
                    help="rotate initial UVs (and the reference lattice) by degrees")
    rf.add_argument("--corrupt-camera", default=None, metavar="IDX:DEG",
                    help="inject a rotation error into one camera's loss geometry")
    rf.add_argument("--seed", type=int, default=None)
    rf.add_argument("--threads", type=int, default=1)
    rf.set_defaults(func=cmd_refine)

    gc = sub.add_parser("grad-check", help="finite-difference gradient validation")
    gc.add_argument("--scene", default=None)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--sigma", type=float, default=0.05)
    gc.add_argument("--omega-mode", choices=("grid", "partners"), default="grid")
    gc.add_argument("--samples", type=int, default=24)
    gc.add_argument("--epsilon", type=float, default=1e-5)
    gc.add_argument("--tolerance", type=float, default=1e-5)
    gc.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_grad_check)

    return p


def entry(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors; 2 means numerical
        # failure in this tool, so usage problems map to 1
        return 0 if exc.code in (0, None) else 1
    try:
        return int(args.func(args) or 0)
    except ValidationError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"{PROG}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"{PROG}: io error: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(entry())


if __name__ == "__main__":
    main()
