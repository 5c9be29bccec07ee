"""Evaluation protocols: mask mIoU, joint error, intersection volume, ablations."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import rasterizer
from .contact import build_aabb, intersection_volume
from .deform_solver import DeformConfig, solve_deformation
from .hand_capture import Skeleton3D
from .scene_io import CameraParams, MaskImage, TriMesh

logger = logging.getLogger(__name__)


def miou(pred: list[MaskImage], gt: list[MaskImage]) -> float:
    """Mean IoU (%) over aligned (frame, view) mask pairs.

    Pairs with an empty union are skipped from the mean; their count is
    logged. The flat per-pair mean is documented in report headers.
    """
    detailed = miou_detailed(pred, gt)
    return detailed["miou"]


def miou_detailed(pred: list[MaskImage], gt: list[MaskImage]) -> dict:
    if len(pred) != len(gt):
        raise ValueError("miou: mask lists differ in length")
    ious = []
    skipped = 0
    for p, g in zip(pred, gt):
        if p.pixels.shape != g.pixels.shape:
            raise ValueError(f"miou: dimension mismatch {p.pixels.shape} vs "
                             f"{g.pixels.shape} (view {p.view})")
        a = p.pixels > 0
        b = g.pixels > 0
        union = int(np.count_nonzero(a | b))
        if union == 0:
            skipped += 1
            continue
        ious.append(np.count_nonzero(a & b) / union)
    if skipped:
        logger.info("miou: skipped %d empty-union pairs", skipped)
    value = 100.0 * float(np.mean(ious)) if ious else 0.0
    return {"miou": value, "pairs": len(ious), "empty_pairs": skipped}


def joint_error(pred: Skeleton3D, gt: Skeleton3D) -> tuple[float, float]:
    """Mean and population std (mm) of per-joint errors over pairwise-valid joints."""
    if pred.joints.shape != gt.joints.shape:
        raise ValueError("joint_error: joint count mismatch")
    valid = pred.valid & gt.valid
    if not np.any(valid):
        raise ValueError("joint_error: no pairwise-valid joints")
    d = np.linalg.norm(pred.joints[valid] - gt.joints[valid], axis=1)
    return float(d.mean()), float(d.std())


@dataclass
class EvalReport:
    """Aggregate metrics for one run; timings are informational only.

    mIoU uses a flat mean over (frame, view) pairs, empty-union pairs skipped.
    """

    miou_percent: float = 0.0
    mask_pairs: int = 0
    empty_mask_pairs: int = 0
    joint_error_mean_mm: float | None = None
    joint_error_std_mm: float | None = None
    intersection_volume_cm3: list[float] = field(default_factory=list)
    per_frame_miou: list[float] = field(default_factory=list)
    stage_seconds: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        data = asdict(self)
        if not include_timings:
            data.pop("stage_seconds")
        return data

    @staticmethod
    def from_dict(data: dict) -> "EvalReport":
        return EvalReport(**data)

    def save(self, path: str, include_timings: bool = False) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(include_timings), f, indent=1)
            f.write("\n")

    @staticmethod
    def load(path: str) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        data.setdefault("stage_seconds", {})
        return EvalReport.from_dict(data)


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

ABLATION_ROWS = (
    ("initialization", ()),
    ("cont", ("contact",)),
    ("cont+reg", ("contact", "reg")),
    ("cont+reg+rigid", ("contact", "reg", "rigid")),
    ("cont+reg+rigid+temp", ("contact", "reg", "rigid", "temporal")),
    ("cont+reg+rigid+temp+silh", ("contact", "reg", "rigid", "temporal", "silhouette")),
)


@dataclass
class AblationInput:
    """One frame of a scene with ground-truth masks, ready for term ablations."""

    mesh_rigid: TriMesh            # rigidly posed object template
    hand: TriMesh
    masks: list[MaskImage]         # observed / ground-truth masks
    cams: list[CameraParams]
    base_config: DeformConfig
    prev_vertices: np.ndarray | None = None
    voxel_mm: float = 1.0


def _subset_config(base: DeformConfig, terms: tuple[str, ...]) -> DeformConfig:
    cfg = DeformConfig(**{k: getattr(base, k) for k in base.__dataclass_fields__})
    cfg.lambda_contact = base.lambda_contact if "contact" in terms else 0.0
    cfg.lambda_silhouette = base.lambda_silhouette if "silhouette" in terms else 0.0
    cfg.lambda_temporal = base.lambda_temporal if "temporal" in terms else 0.0
    cfg.lambda_rigid = base.lambda_rigid if "rigid" in terms else 0.0
    cfg.lambda_reg = base.lambda_reg if "reg" in terms else 0.0
    return cfg


def rendered_object_masks(obj: TriMesh, hand: TriMesh | None,
                          cams: list[CameraParams]) -> list[MaskImage]:
    out = []
    for cam in cams:
        scene = [(obj, "object")] if hand is None else [(hand, "hand"), (obj, "object")]
        out.append(rasterizer.object_visible_mask(rasterizer.rasterize(scene, cam)))
    return out


def run_ablation(inp: AblationInput, rows=ABLATION_ROWS) -> list[dict]:
    """Cumulative energy-term ablation: one row per subset, in table order.

    Each row reports the mask mIoU of the deformed result and the
    hand-object intersection volume; the initialization row measures the
    rigidly posed template without deformation.
    """
    hand_tree = build_aabb(inp.hand)
    results = []
    for name, terms in rows:
        if not terms:
            mesh = inp.mesh_rigid
        else:
            cfg = _subset_config(inp.base_config, terms)
            mesh = solve_deformation(inp.mesh_rigid, inp.hand, inp.masks, inp.cams,
                                     cfg, prev_vertices=inp.prev_vertices,
                                     hand_tree=hand_tree).mesh
        rendered = rendered_object_masks(mesh, inp.hand, inp.cams)
        row = {
            "terms": name,
            "miou": miou(rendered, inp.masks),
            "intersection_cm3": intersection_volume(inp.hand, mesh, inp.voxel_mm),
        }
        logger.info("ablation %-28s mIoU %6.2f%%  inter %7.3f cm^3",
                    name, row["miou"], row["intersection_cm3"])
        results.append(row)
    return results
