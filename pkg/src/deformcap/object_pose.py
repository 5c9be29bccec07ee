"""Global rigid object pose by genetic-mutation search on an occlusion-aware
silhouette loss.

A pose sample is alpha = [axis-angle rotation (rad), translation (mm)]; the
rotation acts about the template vertex centroid so the two blocks stay
decoupled. The per-view loss is 1 - IoU between the rendered object mask that
is not occluded by the hand and the observed mask, plus an L2 regularizer on
alpha. Selection is roulette-wheel on (L_max - L_i) + eps fitness with
elitism; mutation adds independent uniform draws per component.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .rotations import axis_angle_to_matrix, canonicalize_axis_angle, nearest_axis_angle
from .scene_io import CameraParams, MaskImage, TriMesh
from .hand_capture import KeypointObservation, triangulate_keypoint
from . import rasterizer
from .rasterizer import LABEL_OBJECT

logger = logging.getLogger(__name__)


@dataclass
class PoseSample:
    """One 6-DoF candidate: alpha = [rot axis-angle (3), translation mm (3)]."""

    alpha: np.ndarray
    loss: float = np.inf

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(6)

    def canonicalized(self) -> "PoseSample":
        a = self.alpha.copy()
        a[:3] = canonicalize_axis_angle(a[:3])
        return PoseSample(a, self.loss)


@dataclass
class GAConfig:
    population_size: int = 500
    iterations: int = 20              # generations evaluated for initial frames
    init_distribution: str = "uniform"   # "uniform" or "normal"
    rot_halfwidth: float = 0.15       # rad, initial-frame mutation half-width
    trans_halfwidth: float = 15.0     # mm
    halfwidth_decay: float = 0.8      # per-generation decay of both half-widths
    track_iterations: int = 1         # generations for warm-started frames
    track_rot_halfwidth: float = 0.03
    track_trans_halfwidth: float = 3.0
    lambda_o: float = 1e-4
    working_scale: int = 4            # loss renders at 1/scale input resolution
    smooth_alpha: float = 0.7         # EMA against the previous smoothed pose
    seed: int = 0

    def validate(self) -> None:
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.iterations < 1 or self.track_iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.rot_halfwidth <= 0 or self.trans_halfwidth <= 0:
            raise ValueError("mutation half-widths must be positive")
        if self.init_distribution not in ("uniform", "normal"):
            raise ValueError(f"unknown init distribution {self.init_distribution!r}")


def apply_pose(alpha: np.ndarray, vertices: np.ndarray,
               center: np.ndarray | None = None) -> np.ndarray:
    """Rigidly transform vertices: rotate about ``center`` then translate."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(6)
    if center is None:
        center = vertices.mean(axis=0)
    R = axis_angle_to_matrix(alpha[:3])
    return (vertices - center) @ R.T + center + alpha[3:]


def apply_pose_inverse(alpha: np.ndarray, vertices: np.ndarray,
                       center: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64).reshape(6)
    R = axis_angle_to_matrix(alpha[:3])
    return (vertices - center - alpha[3:]) @ R + center


def posed_mesh(template: TriMesh, alpha: np.ndarray,
               center: np.ndarray | None = None) -> TriMesh:
    if center is None:
        center = template.vertices.mean(axis=0)
    return template.with_vertices(apply_pose(alpha, template.vertices, center))


def _iou_term(rendered: np.ndarray, observed: np.ndarray) -> float:
    """1 - IoU of two boolean masks; 1.0 by convention when the union is empty."""
    inter = int(np.count_nonzero(rendered & observed))
    union = int(np.count_nonzero(rendered | observed))
    if union == 0:
        return 1.0
    return 1.0 - inter / union


def sample_loss(sample: PoseSample, template: TriMesh, hand: TriMesh,
                masks: list[MaskImage], cams: list[CameraParams],
                lambda_o: float) -> float:
    """Reference (full resolution) loss of one pose sample.

    sum over views of [1 - IoU(object-visible render, observed mask)] plus
    lambda_o * ||alpha||_2. Views are matched to masks by id.
    """
    cam_by_id = {c.id: c for c in cams}
    center = template.vertices.mean(axis=0)
    posed = posed_mesh(template, sample.alpha, center)
    total = 0.0
    for mask in masks:
        cam = cam_by_id[mask.view]
        buf = rasterizer.rasterize([(hand, "hand"), (posed, "object")], cam)
        rendered = buf.label == LABEL_OBJECT
        total += _iou_term(rendered, mask.pixels > 0)
    return total + lambda_o * float(np.linalg.norm(sample.alpha))


def roulette_select(population: list[PoseSample], count: int,
                    rng: np.random.Generator) -> list[PoseSample]:
    """Draw ``count`` parents with replacement, probability proportional to
    fitness (L_max - L_i) + eps so that smaller losses inherit more often."""
    if not population:
        raise ValueError("roulette_select: empty population")
    if count == 0:
        return []
    losses = np.array([s.loss for s in population])
    if not np.all(np.isfinite(losses)):
        raise ValueError("roulette_select: non-finite loss in population")
    l_max = losses.max()
    l_min = losses.min()
    eps = 1e-6 * (l_max - l_min + 1.0)
    fitness = (l_max - losses) + eps
    p = fitness / fitness.sum()
    idx = rng.choice(len(population), size=count, replace=True, p=p)
    return [population[i] for i in idx]


def mutate(parent: PoseSample, cfg: GAConfig, rng: np.random.Generator,
           scale: float = 1.0, tracking: bool = False) -> PoseSample:
    """Uniform mutation: each component perturbed in [-h, +h] for its block.

    ``scale`` applies the per-generation half-width decay; tracking mode uses
    the warm-start half-widths. The rotation block is re-canonicalized.
    """
    h_rot = (cfg.track_rot_halfwidth if tracking else cfg.rot_halfwidth) * scale
    h_trans = (cfg.track_trans_halfwidth if tracking else cfg.trans_halfwidth) * scale
    delta = np.concatenate([rng.uniform(-h_rot, h_rot, 3),
                            rng.uniform(-h_trans, h_trans, 3)])
    alpha = parent.alpha + delta
    alpha[:3] = canonicalize_axis_angle(alpha[:3])
    return PoseSample(alpha)


# ---------------------------------------------------------------------------
# Fast loss evaluation at working resolution
# ---------------------------------------------------------------------------

class FrameEvaluator:
    """Per-frame loss evaluator with cached hand renders at working resolution.

    The hand depth/label planes are rendered once per view; each sample then
    composites only the moving object into a copy of those planes. This is a
    pure function of the sample given the frame data.
    """

    def __init__(self, template: TriMesh, hand: TriMesh, masks: list[MaskImage],
                 cams: list[CameraParams], lambda_o: float, working_scale: int = 4):
        cam_by_id = {c.id: c for c in cams}
        self.template = template
        self.center = template.vertices.mean(axis=0)
        self.lambda_o = lambda_o
        self.views = []
        for mask in masks:
            cam = cam_by_id[mask.view].scaled(working_scale) if working_scale > 1 \
                else cam_by_id[mask.view]
            small = mask.downsampled(working_scale) if working_scale > 1 else mask
            buf = rasterizer.rasterize([(hand, "hand")], cam)
            self.views.append((cam, small.pixels > 0, buf))
        self.evaluations = 0

    def loss(self, alpha: np.ndarray) -> float:
        verts = apply_pose(alpha, self.template.vertices, self.center)
        posed = self.template.with_vertices(verts)
        total = 0.0
        for cam, observed, hand_buf in self.views:
            buf = rasterizer.DepthBuffer(
                view=hand_buf.view, width=hand_buf.width, height=hand_buf.height,
                depth=hand_buf.depth.copy(), label=hand_buf.label.copy(),
                tri=hand_buf.tri.copy())
            rasterizer.rasterize_into(buf, cam, posed, "object")
            total += _iou_term(buf.label == LABEL_OBJECT, observed)
        self.evaluations += 1
        return total + self.lambda_o * float(np.linalg.norm(alpha))


# ---------------------------------------------------------------------------
# Search region
# ---------------------------------------------------------------------------

@dataclass
class SearchRegion:
    """Frame-0 translation search box (on the translation block of alpha)."""

    center: np.ndarray      # (3,) mm
    halfwidth: float        # mm, per axis

    @staticmethod
    def from_scene(template: TriMesh, masks: list[MaskImage],
                   cams: list[CameraParams], margin: float = 100.0) -> "SearchRegion":
        """Center from triangulated mask centroids; extent from the template size.

        Falls back to a zero-translation center when fewer than two views have
        foreground pixels.
        """
        template_center = template.vertices.mean(axis=0)
        radius = float(np.linalg.norm(template.vertices - template_center, axis=1).max())
        obs = []
        for mask in masks:
            ys, xs = np.nonzero(mask.pixels)
            if not len(xs):
                continue
            uv = np.array([xs.mean() + 0.5, ys.mean() + 0.5])
            obs.append(KeypointObservation(view=mask.view, joint=0, uv=uv, confidence=1.0))
        world = triangulate_keypoint(obs, cams, conf_threshold=0.0) if len(obs) >= 2 else None
        if world is None:
            logger.warning("search region: mask centroid triangulation failed; "
                           "centering the search on the template position")
            center = np.zeros(3)
        else:
            center = world - template_center
        return SearchRegion(center=center, halfwidth=radius + margin)


def _init_population(cfg: GAConfig, region: SearchRegion, size: int,
                     streams: list[np.random.Generator]) -> list[PoseSample]:
    samples = []
    for i in range(size):
        rng = streams[i]
        if cfg.init_distribution == "uniform":
            rot = _uniform_ball(rng, np.pi)
            trans = region.center + rng.uniform(-region.halfwidth, region.halfwidth, 3)
        else:
            rot = canonicalize_axis_angle(rng.normal(0.0, np.pi / 4.0, 3))
            trans = region.center + rng.normal(0.0, region.halfwidth / 4.0, 3)
        samples.append(PoseSample(np.concatenate([rot, trans])))
    return samples


def _uniform_ball(rng: np.random.Generator, radius: float) -> np.ndarray:
    """Uniform sample from the solid 3-ball of the given radius."""
    v = rng.normal(size=3)
    n = np.linalg.norm(v)
    if n < 1e-12:
        return np.zeros(3)
    r = radius * rng.uniform() ** (1.0 / 3.0)
    return v / n * r


# ---------------------------------------------------------------------------
# Evolution
# ---------------------------------------------------------------------------

@dataclass
class GAResult:
    best: PoseSample                  # minimum-loss sample ever evaluated
    smoothed: PoseSample              # best after EMA against the previous pose
    best_per_generation: list[float] = field(default_factory=list)
    evaluations: int = 0


def run_genetic_search(template: TriMesh, hand: TriMesh, masks: list[MaskImage],
                       cams: list[CameraParams], previous: PoseSample | None,
                       cfg: GAConfig,
                       seed: int | np.random.SeedSequence | None = None) -> GAResult:
    """Evolve the pose population for one frame and return the best sample.

    Initial frames draw the population from the configured distribution over
    the search region and run cfg.iterations generations with per-generation
    half-width decay. Warm-started frames mutate the previous solution (which
    itself stays in the population) for cfg.track_iterations generations.
    One master seed spawns per-sample child streams, so results do not depend
    on evaluation order.
    """
    cfg.validate()
    if seed is None:
        seed = cfg.seed
    root_ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    tracking = previous is not None
    n_gens = cfg.track_iterations if tracking else cfg.iterations
    gen_seqs = root_ss.spawn(n_gens)

    evaluator = FrameEvaluator(template, hand, masks, cams, cfg.lambda_o,
                               cfg.working_scale)

    streams = [np.random.Generator(np.random.PCG64(s))
               for s in gen_seqs[0].spawn(cfg.population_size + 1)]
    if tracking:
        prev = previous.canonicalized()
        population = [PoseSample(prev.alpha.copy())]
        population += [mutate(prev, cfg, streams[i + 1], tracking=True)
                       for i in range(cfg.population_size - 1)]
    else:
        region = SearchRegion.from_scene(template, masks, cams)
        population = _init_population(cfg, region, cfg.population_size, streams[1:])

    for s in population:
        s.loss = evaluator.loss(s.alpha)
    best = min(population, key=lambda s: s.loss)
    trace = [best.loss]

    for gen in range(1, n_gens):
        gen_rng = np.random.Generator(np.random.PCG64(gen_seqs[gen]))
        child_streams = [np.random.Generator(np.random.PCG64(s))
                         for s in gen_seqs[gen].spawn(cfg.population_size)]
        scale = cfg.halfwidth_decay ** gen
        parents = roulette_select(population, cfg.population_size - 1, gen_rng)
        children = [mutate(p, cfg, child_streams[i], scale=scale, tracking=tracking)
                    for i, p in enumerate(parents)]
        for c in children:
            c.loss = evaluator.loss(c.alpha)
        # Elitism: the best sample so far always survives into the population.
        population = [PoseSample(best.alpha.copy(), best.loss)] + children
        gen_best = min(population, key=lambda s: s.loss)
        if gen_best.loss < best.loss:
            best = gen_best
        trace.append(best.loss)

    smoothed = best
    if previous is not None and cfg.smooth_alpha < 1.0:
        a = best.alpha.copy()
        a[:3] = cfg.smooth_alpha * nearest_axis_angle(a[:3], previous.alpha[:3]) \
            + (1.0 - cfg.smooth_alpha) * previous.alpha[:3]
        a[3:] = cfg.smooth_alpha * a[3:] + (1.0 - cfg.smooth_alpha) * previous.alpha[3:]
        a[:3] = canonicalize_axis_angle(a[:3])
        smoothed = PoseSample(a, evaluator.loss(a))
    return GAResult(best=best, smoothed=smoothed, best_per_generation=trace,
                    evaluations=evaluator.evaluations)


def estimate_pose(template: TriMesh, hand: TriMesh, masks: list[MaskImage],
                  cams: list[CameraParams], previous: PoseSample | None,
                  cfg: GAConfig,
                  seed: int | np.random.SeedSequence | None = None) -> PoseSample:
    """Estimate the object pose for one frame (temporally smoothed for
    warm-started frames)."""
    return run_genetic_search(template, hand, masks, cams, previous, cfg, seed).smoothed
