"""Per-sequence orchestration: hand tracking, object pose, deformation, metrics.

Frames run strictly in order (temporal coupling); per-frame outputs are
written incrementally so interrupted runs can resume. All randomness derives
from the master seed and the frame index, so a resumed run reproduces an
uninterrupted one byte for byte. Timings are logged but kept out of the
serialized report to preserve output determinism.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import rasterizer, scene_io
from .contact import build_aabb, compute_contact_map, intersection_volume
from .deform_solver import DeformConfig, solve_deformation
from .eval_metrics import EvalReport, miou_detailed, rendered_object_masks
from .hand_capture import HandTracker
from .object_pose import (GAConfig, PoseSample, apply_pose, apply_pose_inverse,
                          run_genetic_search)
from .scene_io import SequenceManifest

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    seed: int = 0
    conf_threshold: float = 0.6
    hand_smooth_alpha: float = 0.7
    enable_hand: bool = True
    enable_object_pose: bool = True
    enable_deform: bool = True
    dump_render: bool = False
    metrics_voxel_mm: float = 2.0
    ga: GAConfig = field(default_factory=GAConfig)
    deform: DeformConfig = field(default_factory=DeformConfig)

    @staticmethod
    def from_dict(data: dict) -> "PipelineConfig":
        cfg = PipelineConfig()
        for key, value in data.items():
            if key == "ga":
                cfg.ga = GAConfig(**value)
            elif key == "deform":
                cfg.deform = DeformConfig(**value)
            elif hasattr(cfg, key):
                setattr(cfg, key, value)
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cfg

    def describe(self) -> str:
        return (f"seed={self.seed} conf={self.conf_threshold} "
                f"hand_alpha={self.hand_smooth_alpha} stages="
                f"{'H' if self.enable_hand else '-'}"
                f"{'O' if self.enable_object_pose else '-'}"
                f"{'D' if self.enable_deform else '-'} "
                f"ga(pop={self.ga.population_size}, iters={self.ga.iterations}, "
                f"init={self.ga.init_distribution}) "
                f"deform(spacing={self.deform.node_spacing}, "
                f"lambdas={self.deform.lambda_contact},{self.deform.lambda_silhouette},"
                f"{self.deform.lambda_temporal},{self.deform.lambda_rigid},"
                f"{self.deform.lambda_reg})")


class PipelineStageError(RuntimeError):
    """A stage failed; carries the frame index and stage name."""

    def __init__(self, frame: int, stage: str, cause: BaseException):
        super().__init__(f"frame {frame}, stage {stage}: {cause}")
        self.frame = frame
        self.stage = stage
        self.cause = cause


def _frame_paths(out_dir: str, frame: int) -> dict:
    return {
        "pose": os.path.join(out_dir, f"pose_{frame:04d}.json"),
        "object": os.path.join(out_dir, f"object_{frame:04d}.obj"),
        "contact": os.path.join(out_dir, f"contactmap_{frame:04d}.csv"),
    }


def run_pipeline(manifest: SequenceManifest, config: PipelineConfig,
                 out_dir: str, resume: bool = False) -> EvalReport:
    """Run all stages over the sequence and write per-frame artifacts.

    Raises PipelineStageError on stage failures (partial outputs are kept)
    and ValueError on input validation problems.
    """
    manifest.validate()
    os.makedirs(out_dir, exist_ok=True)
    logger.info("pipeline config: %s", config.describe())

    cams = scene_io.load_cameras(manifest.path(manifest.cameras))
    cam_by_id = {c.id: c for c in cams}
    template = scene_io.load_mesh(manifest.path(manifest.object_template))
    template.validate_template()
    center = template.vertices.mean(axis=0)
    hand_model = scene_io.load_hand_model(manifest.path(manifest.hand_model)) \
        if config.enable_hand else None
    tracker = HandTracker(hand_model, cams, config.conf_threshold,
                          config.hand_smooth_alpha) if hand_model else None

    prev_sample: PoseSample | None = None
    prev_deformed: np.ndarray | None = None
    prev_alpha: np.ndarray | None = None
    stage_seconds: dict[str, float] = {}
    rendered_all, observed_all = [], []
    per_frame_miou: list[float] = []
    volumes: list[float] = []

    def timed(stage: str, frame: int, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except Exception as exc:
            raise PipelineStageError(frame, stage, exc) from exc
        stage_seconds[stage] = stage_seconds.get(stage, 0.0) + time.perf_counter() - t0
        return out

    for frame in range(manifest.n_frames):
        paths = _frame_paths(out_dir, frame)
        masks = timed("scene-io", frame, _load_frame_masks, manifest, frame, cam_by_id)

        if resume and all(os.path.exists(p) for p in paths.values()):
            pose_data = scene_io.load_pose_file(paths["pose"])
            if tracker is not None:
                tracker.restore(pose_data["hand_theta"], frame)
            prev_alpha = pose_data["object_alpha"]
            prev_sample = PoseSample(prev_alpha.copy())
            prev_deformed = scene_io.load_mesh(paths["object"]).vertices
            logger.info("frame %d: outputs exist, skipping (resume)", frame)
            _accumulate_metrics(config, template, center, prev_alpha, prev_deformed,
                                tracker, masks, cams, rendered_all, observed_all,
                                per_frame_miou, volumes)
            continue

        hand_mesh = None
        hand_theta = hand_theta_raw = None
        if tracker is not None:
            obs = timed("scene-io", frame, scene_io.load_keypoints,
                        manifest.path(manifest.keypoint_files[frame]))
            result = timed("hand-capture", frame, tracker.track_frame, frame, obs)
            hand_mesh = result.mesh
            hand_theta = result.pose_smoothed.theta
            hand_theta_raw = result.pose_raw.theta

        if config.enable_object_pose:
            seed_seq = np.random.SeedSequence([config.seed, frame])
            ga = timed("object-pose", frame, run_genetic_search, template,
                       hand_mesh, masks, cams, prev_sample, config.ga, seed_seq)
            alpha = ga.smoothed.alpha
            alpha_raw = ga.best.alpha
        else:
            alpha = alpha_raw = np.zeros(6)

        posed_verts = apply_pose(alpha, template.vertices, center)
        posed = template.with_vertices(posed_verts)

        if config.enable_deform:
            v_last = None
            if prev_deformed is not None and prev_alpha is not None:
                v_last = apply_pose(
                    alpha, apply_pose_inverse(prev_alpha, prev_deformed, center), center)
            deform = timed("deform", frame, solve_deformation, posed, hand_mesh,
                           masks, cams, config.deform, v_last)
            deformed = deform.mesh
        else:
            deformed = posed

        displacement = timed("contact-map", frame, compute_contact_map, posed, deformed)
        scene_io.save_contact_map(paths["contact"], displacement)
        scene_io.save_mesh(paths["object"], deformed)
        scene_io.save_pose_file(
            paths["pose"], frame,
            hand_theta if hand_theta is not None else np.zeros(0),
            alpha, hand_theta_raw, alpha_raw)

        if config.dump_render:
            for cam in cams:
                scene = ([(deformed, "object")] if hand_mesh is None
                         else [(hand_mesh, "hand"), (deformed, "object")])
                buf = rasterizer.rasterize(scene, cam)
                rasterizer.dump_label_pgm(
                    os.path.join(out_dir, f"render_{frame:04d}_{cam.id:02d}.pgm"), buf)

        prev_sample = PoseSample(alpha.copy())
        prev_alpha = alpha.copy()
        prev_deformed = deformed.vertices.copy()
        _accumulate_metrics(config, template, center, alpha, prev_deformed, tracker,
                            masks, cams, rendered_all, observed_all,
                            per_frame_miou, volumes)
        logger.info("frame %d done", frame)

    detail = miou_detailed(rendered_all, observed_all) if rendered_all else \
        {"miou": 0.0, "pairs": 0, "empty_pairs": 0}
    report = EvalReport(miou_percent=detail["miou"], mask_pairs=detail["pairs"],
                        empty_mask_pairs=detail["empty_pairs"],
                        intersection_volume_cm3=volumes,
                        per_frame_miou=per_frame_miou,
                        stage_seconds=stage_seconds)
    report.save(os.path.join(out_dir, "report.json"))
    logger.info("pipeline finished: mIoU %.2f%%, stage seconds %s",
                detail["miou"], {k: round(v, 2) for k, v in stage_seconds.items()})
    return report


def _load_frame_masks(manifest: SequenceManifest, frame: int, cam_by_id: dict):
    masks = []
    for rel in manifest.mask_files[frame]:
        mask = scene_io.load_mask(manifest.path(rel))
        if mask.view not in cam_by_id:
            raise ValueError(f"mask {rel}: view {mask.view} has no camera")
        cam = cam_by_id[mask.view]
        if (mask.width, mask.height) != (cam.width, cam.height):
            raise ValueError(f"mask {rel}: size {mask.width}x{mask.height} does not "
                             f"match camera {cam.width}x{cam.height}")
        masks.append(mask)
    return masks


def _accumulate_metrics(config, template, center, alpha, deformed_verts, tracker,
                        masks, cams, rendered_all, observed_all,
                        per_frame_miou, volumes) -> None:
    deformed = template.with_vertices(deformed_verts)
    hand_mesh = None
    if tracker is not None and tracker.history:
        from .hand_capture import skin_hand
        hand_mesh = skin_hand(tracker.model, tracker.history[-1])
    rendered = rendered_object_masks(deformed, hand_mesh, cams)
    by_view = {m.view: m for m in rendered}
    frame_rendered = [by_view[m.view] for m in masks]
    detail = miou_detailed(frame_rendered, masks)
    per_frame_miou.append(detail["miou"])
    rendered_all.extend(frame_rendered)
    observed_all.extend(masks)
    if hand_mesh is not None:
        volumes.append(intersection_volume(hand_mesh, deformed,
                                           config.metrics_voxel_mm))
