"""deformcap command line: synthetic scenes, per-stage runs, full pipeline, eval.

Exit codes: 0 success, 2 stage failure, 3 input validation failure.
Config precedence: CLI flags > config file > built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import scene_io, synthgen
from .contact import compute_contact_map, intersection_volume
from .deform_solver import DeformConfig, solve_deformation
from .eval_metrics import EvalReport, joint_error, miou_detailed, rendered_object_masks
from .hand_capture import HandPose, HandTracker, Skeleton3D, forward_kinematics, skin_hand
from .object_pose import GAConfig, PoseSample, posed_mesh, run_genetic_search
from .pipeline import PipelineConfig, PipelineStageError, run_pipeline

logger = logging.getLogger("deformcap")

EXIT_OK = 0
EXIT_STAGE = 2
EXIT_INPUT = 3


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineStageError as exc:
        logger.error("%s", exc)
        return EXIT_STAGE
    except (ValueError, FileNotFoundError) as exc:
        logger.error("input validation: %s", exc)
        return EXIT_INPUT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deformcap")
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    p.add_argument("--scenario", required=True, choices=["press", "orbit", "table1"])
    p.add_argument("--frames", type=int, default=11)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("hand-track", help="track the hand over a sequence")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--conf-thresh", type=float, default=0.6)
    p.add_argument("--smooth-alpha", type=float, default=0.7)
    p.set_defaults(func=cmd_hand_track)

    p = sub.add_parser("object-pose", help="estimate per-frame object rigid poses")
    p.add_argument("--manifest", required=True)
    p.add_argument("--hand", required=True, help="directory of hand pose files")
    p.add_argument("--out", required=True)
    p.add_argument("--pop", type=int, default=500)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", default="uniform", choices=["uniform", "normal"])
    p.set_defaults(func=cmd_object_pose)

    p = sub.add_parser("deform", help="solve per-frame non-rigid deformation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--objpose", required=True)
    p.add_argument("--hand", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambdas", default="5,5,1,1,2",
                   help="contact,silhouette,temporal,rigid,reg weights")
    p.add_argument("--node-spacing", type=float, default=15.0)
    p.set_defaults(func=cmd_deform)

    p = sub.add_parser("contact-map", help="per-vertex displacement maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--objpose", required=True)
    p.add_argument("--meshes", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_contact_map)

    p = sub.add_parser("eval", help="compare a run against a ground-truth scene")
    p.add_argument("--pred", required=True, help="pipeline output directory")
    p.add_argument("--gt", required=True, help="synthetic scene directory")
    p.add_argument("--report", required=True, help="output report (.json or .csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run all stages over a sequence")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dump-render", action="store_true",
                   help="dump per-view label planes as PGM")
    p.set_defaults(func=cmd_pipeline)
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.scenario == "table1":
        fixture = synthgen.make_table1_fixture(seed=args.seed)
        data = {
            "_provenance": {"generator": synthgen.GENERATOR_NAME,
                            "version": synthgen.GENERATOR_VERSION,
                            "scenario": "table1", "seed": args.seed},
            "points": fixture["points"].tolist(),
            "noise_px": fixture["noise_px"],
            "view_counts": sorted(fixture["rigs"]),
        }
        for v, cams in fixture["rigs"].items():
            scene_io.save_cameras(os.path.join(args.out, f"cameras_{v:02d}.json"), cams)
            for i, obs in enumerate(fixture["observations"][v]):
                scene_io.save_keypoints(
                    os.path.join(args.out, f"table1_{v:02d}_{i:03d}.json"), obs)
        with open(os.path.join(args.out, "table1.json"), "w", encoding="utf-8") as f:
            json.dump(data, f, indent=1)
        logger.info("table1 fixture written to %s", args.out)
        return EXIT_OK
    maker = synthgen.make_press_sequence if args.scenario == "press" \
        else synthgen.make_orbit_sequence
    scene = maker(args.frames, seed=args.seed, n_views=args.views)
    manifest = synthgen.write_scene(scene, args.out)
    logger.info("scene written, manifest at %s", manifest)
    return EXIT_OK


def cmd_hand_track(args) -> int:
    manifest = scene_io.load_manifest(args.manifest)
    cams = scene_io.load_cameras(manifest.path(manifest.cameras))
    model = scene_io.load_hand_model(manifest.path(manifest.hand_model))
    tracker = HandTracker(model, cams, args.conf_thresh, args.smooth_alpha)
    os.makedirs(args.out, exist_ok=True)
    for frame in range(manifest.n_frames):
        obs = scene_io.load_keypoints(manifest.path(manifest.keypoint_files[frame]))
        result = tracker.track_frame(frame, obs)
        scene_io.save_pose_file(os.path.join(args.out, f"pose_{frame:04d}.json"),
                                frame, result.pose_smoothed.theta, np.zeros(6),
                                hand_theta_raw=result.pose_raw.theta)
        logger.info("frame %d tracked", frame)
    return EXIT_OK


def cmd_object_pose(args) -> int:
    manifest = scene_io.load_manifest(args.manifest)
    cams = scene_io.load_cameras(manifest.path(manifest.cameras))
    cam_by_id = {c.id: c for c in cams}
    template = scene_io.load_mesh(manifest.path(manifest.object_template))
    template.validate_template()
    model = scene_io.load_hand_model(manifest.path(manifest.hand_model))
    cfg = GAConfig(population_size=args.pop, iterations=args.iters, seed=args.seed,
                   init_distribution=args.init)
    os.makedirs(args.out, exist_ok=True)
    prev = None
    for frame in range(manifest.n_frames):
        hand_pose = scene_io.load_pose_file(
            os.path.join(args.hand, f"pose_{frame:04d}.json"))
        hand_mesh = skin_hand(model, HandPose(hand_pose["hand_theta"], frame))
        masks = [scene_io.load_mask(manifest.path(rel),
                                    expect_size=None) for rel in manifest.mask_files[frame]]
        for m in masks:
            cam = cam_by_id[m.view]
            if (m.width, m.height) != (cam.width, cam.height):
                raise ValueError(f"mask view {m.view} size mismatch")
        result = run_genetic_search(template, hand_mesh, masks, cams, prev, cfg,
                                    np.random.SeedSequence([args.seed, frame]))
        scene_io.save_pose_file(os.path.join(args.out, f"pose_{frame:04d}.json"),
                                frame, hand_pose["hand_theta"], result.smoothed.alpha,
                                object_alpha_raw=result.best.alpha)
        prev = result.smoothed
        logger.info("frame %d: loss %.4f", frame, result.smoothed.loss)
    return EXIT_OK


def cmd_deform(args) -> int:
    manifest = scene_io.load_manifest(args.manifest)
    cams = scene_io.load_cameras(manifest.path(manifest.cameras))
    template = scene_io.load_mesh(manifest.path(manifest.object_template))
    template.validate_template()
    center = template.vertices.mean(axis=0)
    model = scene_io.load_hand_model(manifest.path(manifest.hand_model))
    lambdas = [float(x) for x in args.lambdas.split(",")]
    if len(lambdas) != 5:
        raise ValueError("--lambdas needs 5 comma-separated values")
    cfg = DeformConfig(lambda_contact=lambdas[0], lambda_silhouette=lambdas[1],
                       lambda_temporal=lambdas[2], lambda_rigid=lambdas[3],
                       lambda_reg=lambdas[4], node_spacing=args.node_spacing)
    os.makedirs(args.out, exist_ok=True)
    from .object_pose import apply_pose, apply_pose_inverse
    prev_deformed = None
    prev_alpha = None
    for frame in range(manifest.n_frames):
        pose = scene_io.load_pose_file(os.path.join(args.objpose, f"pose_{frame:04d}.json"))
        hand_pose = scene_io.load_pose_file(os.path.join(args.hand, f"pose_{frame:04d}.json"))
        hand_mesh = skin_hand(model, HandPose(hand_pose["hand_theta"], frame))
        masks = [scene_io.load_mask(manifest.path(rel))
                 for rel in manifest.mask_files[frame]]
        posed = posed_mesh(template, pose["object_alpha"], center)
        v_last = None
        if prev_deformed is not None:
            v_last = apply_pose(pose["object_alpha"],
                                apply_pose_inverse(prev_alpha, prev_deformed, center),
                                center)
        result = solve_deformation(posed, hand_mesh, masks, cams, cfg, v_last)
        scene_io.save_mesh(os.path.join(args.out, f"object_{frame:04d}.obj"), result.mesh)
        with open(os.path.join(args.out, f"energy_{frame:04d}.csv"), "w",
                  encoding="utf-8") as f:
            f.write("outer,contact,silhouette,temporal,rigid,reg\n")
            for row in result.outer_terms:
                f.write(f"{row['outer']},{row['contact']!r},{row['silhouette']!r},"
                        f"{row['temporal']!r},{row['rigid']!r},{row['reg']!r}\n")
        prev_deformed = result.mesh.vertices
        prev_alpha = pose["object_alpha"]
        logger.info("frame %d deformed", frame)
    return EXIT_OK


def cmd_contact_map(args) -> int:
    manifest = scene_io.load_manifest(args.manifest)
    template = scene_io.load_mesh(manifest.path(manifest.object_template))
    center = template.vertices.mean(axis=0)
    os.makedirs(args.out, exist_ok=True)
    for frame in range(manifest.n_frames):
        pose = scene_io.load_pose_file(os.path.join(args.objpose, f"pose_{frame:04d}.json"))
        deformed = scene_io.load_mesh(os.path.join(args.meshes, f"object_{frame:04d}.obj"))
        rigid = posed_mesh(template, pose["object_alpha"], center)
        disp = compute_contact_map(rigid, deformed)
        scene_io.save_contact_map(os.path.join(args.out, f"contactmap_{frame:04d}.csv"),
                                  disp)
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = scene_io.load_manifest(os.path.join(args.gt, "manifest.json"))
    cams = scene_io.load_cameras(manifest.path(manifest.cameras))
    with open(os.path.join(args.gt, "ground_truth.json"), "r", encoding="utf-8") as f:
        gt = json.load(f)
    template = scene_io.load_mesh(manifest.path(manifest.object_template))
    model = None
    if "hand_thetas" in gt:
        model = scene_io.load_hand_model(manifest.path(manifest.hand_model))

    rendered_all, observed_all, volumes, frame_mious = [], [], [], []
    joint_means = []
    for frame in range(manifest.n_frames):
        pose = scene_io.load_pose_file(os.path.join(args.pred, f"pose_{frame:04d}.json"))
        deformed = scene_io.load_mesh(os.path.join(args.pred, f"object_{frame:04d}.obj"))
        masks = [scene_io.load_mask(manifest.path(rel))
                 for rel in manifest.mask_files[frame]]
        hand_mesh = None
        if model is not None and len(pose["hand_theta"]):
            hand_mesh = skin_hand(model, HandPose(pose["hand_theta"], frame))
            gt_skel, _ = forward_kinematics(
                model, HandPose(np.asarray(gt["hand_thetas"][frame]), frame))
            pred_skel, _ = forward_kinematics(model, HandPose(pose["hand_theta"], frame))
            mean, _std = joint_error(pred_skel, gt_skel)
            joint_means.append(mean)
        rendered = rendered_object_masks(deformed, hand_mesh, cams)
        by_view = {m.view: m for m in rendered}
        frame_rendered = [by_view[m.view] for m in masks]
        frame_mious.append(miou_detailed(frame_rendered, masks)["miou"])
        rendered_all.extend(frame_rendered)
        observed_all.extend(masks)
        if hand_mesh is not None:
            volumes.append(intersection_volume(hand_mesh, deformed))

    detail = miou_detailed(rendered_all, observed_all)
    report = EvalReport(miou_percent=detail["miou"], mask_pairs=detail["pairs"],
                        empty_mask_pairs=detail["empty_pairs"],
                        joint_error_mean_mm=float(np.mean(joint_means)) if joint_means else None,
                        joint_error_std_mm=float(np.std(joint_means)) if joint_means else None,
                        intersection_volume_cm3=volumes, per_frame_miou=frame_mious)
    if args.report.endswith(".csv"):
        with open(args.report, "w", encoding="utf-8") as f:
            f.write("frame,miou,intersection_cm3\n")
            for i, m in enumerate(frame_mious):
                vol = volumes[i] if i < len(volumes) else ""
                f.write(f"{i},{m!r},{vol!r}\n")
    else:
        report.save(args.report)
    logger.info("eval: mIoU %.2f%%", detail["miou"])
    return EXIT_OK


def cmd_pipeline(args) -> int:
    manifest = scene_io.load_manifest(args.manifest)
    data = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            data = json.load(f)
    config = PipelineConfig.from_dict(data)
    if args.seed is not None:
        config.seed = args.seed
        config.ga.seed = args.seed
    if args.dump_render:
        config.dump_render = True
    run_pipeline(manifest, config, args.out, resume=args.resume)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
