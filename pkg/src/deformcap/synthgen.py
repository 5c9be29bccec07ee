"""Deterministic synthetic scenes with exact ground truth.

Desk-scale fixtures for the whole pipeline: ring camera rigs, primitive
meshes (icospheres, an asymmetric pressable blob, capsules), a rigged
stick-figure hand whose mesh is a fingertip capsule, scripted press
sequences with rendered masks and projected keypoints, a two-basin pose
scene, and the multi-view triangulation noise fixture. Everything is
regenerable bit-identically from the seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import rasterizer, scene_io
from .hand_capture import HandModel, HandPose, forward_kinematics, skin_hand
from .object_pose import apply_pose
from .rotations import axis_angle_to_matrix, matrix_to_axis_angle
from .scene_io import CameraParams, KeypointObservation, MaskImage, SequenceManifest, TriMesh

GENERATOR_NAME = "deformcap-synth"
GENERATOR_VERSION = 1


# ---------------------------------------------------------------------------
# Primitive meshes
# ---------------------------------------------------------------------------

def icosphere(radius: float = 100.0, subdivisions: int = 3) -> TriMesh:
    """Subdivided icosahedron with outward-oriented faces."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriMesh(np.asarray(verts) * radius, np.asarray(faces))


def pressable_blob(radius: float = 100.0, subdivisions: int = 3) -> TriMesh:
    """Icosphere with two unequal radial bumps so silhouettes pin the rotation.

    The bumps sit on +x and +y; the +z press site stays spherical. Radial
    scaling preserves watertightness and genus 0.
    """
    base = icosphere(radius, subdivisions)
    v = base.vertices
    dirs = v / np.linalg.norm(v, axis=1, keepdims=True)
    scale = np.ones(len(v))
    for axis, amp, sigma in (((1.0, 0.0, 0.0), 0.35, 0.55),
                             ((0.0, 1.0, 0.0), 0.18, 0.45)):
        ang = np.arccos(np.clip(dirs @ np.asarray(axis), -1.0, 1.0))
        scale += amp * np.exp(-((ang / sigma) ** 2))
    return TriMesh(v * scale[:, None], base.faces)


def capsule(radius: float = 12.0, half_length: float = 15.0,
            segments: int = 16, rings: int = 6) -> TriMesh:
    """Watertight capsule along +z, centered at the origin."""
    verts = [np.array([0.0, 0.0, -half_length - radius])]
    ring_rows = []
    for i in range(1, rings + 1):                       # bottom cap up to z=-h
        phi = -np.pi / 2 + (np.pi / 2) * i / rings
        ring_rows.append((radius * np.cos(phi), radius * np.sin(phi) - half_length))
    for i in range(rings + 1):                          # top cap from z=+h
        phi = (np.pi / 2) * i / rings
        ring_rows.append((radius * np.cos(phi), radius * np.sin(phi) + half_length))
    ring_start = []
    for rho, z in ring_rows[:-1]:
        ring_start.append(len(verts))
        for j in range(segments):
            th = 2 * np.pi * j / segments
            verts.append(np.array([rho * np.cos(th), rho * np.sin(th), z]))
    top_pole = len(verts)
    verts.append(np.array([0.0, 0.0, half_length + radius]))

    faces = []
    first = ring_start[0]
    for j in range(segments):
        faces.append((0, first + (j + 1) % segments, first + j))
    for r in range(len(ring_start) - 1):
        a0, b0 = ring_start[r], ring_start[r + 1]
        for j in range(segments):
            j1 = (j + 1) % segments
            faces.append((a0 + j, b0 + j1, b0 + j))
            faces.append((a0 + j, a0 + j1, b0 + j1))
    last = ring_start[-1]
    for j in range(segments):
        faces.append((top_pole, last + j, last + (j + 1) % segments))
    return TriMesh(np.asarray(verts), np.asarray(faces))


def dilate_mask(mask: MaskImage, radius: int) -> MaskImage:
    """Morphological mask noise: dilation for radius > 0, erosion for < 0."""
    fg = mask.pixels > 0
    if radius > 0:
        fg = ndimage.binary_dilation(fg, iterations=radius)
    elif radius < 0:
        fg = ndimage.binary_erosion(fg, iterations=-radius)
    return MaskImage(mask.view, np.where(fg, 255, 0).astype(np.uint8))


# ---------------------------------------------------------------------------
# Camera rig
# ---------------------------------------------------------------------------

def make_rig(n_views: int, radius_mm: float = 800.0, width: int = 640,
             height: int = 480) -> list[CameraParams]:
    """Evenly spaced horizontal ring of cameras aimed at the origin.

    The focal length is set so a 200 mm object at ring distance spans about a
    third of the image width.
    """
    if n_views < 2:
        raise ValueError("make_rig: need at least 2 views")
    f = radius_mm * width / (3.0 * 200.0)
    K = np.array([[f, 0.0, width / 2.0],
                  [0.0, f, height / 2.0],
                  [0.0, 0.0, 1.0]])
    up = np.array([0.0, 0.0, 1.0])
    cams = []
    for i in range(n_views):
        az = 2.0 * np.pi * i / n_views
        pos = radius_mm * np.array([np.cos(az), np.sin(az), 0.0])
        forward = -pos / np.linalg.norm(pos)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        T = -R @ pos
        cam = CameraParams(id=i, K=K.copy(), R=R, T=T, width=width, height=height)
        cam.validate()
        cams.append(cam)
    return cams


# ---------------------------------------------------------------------------
# Synthetic rigged hand
# ---------------------------------------------------------------------------

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")
INDEX_TIP_JOINT = 8


def make_synthetic_hand(finger_radius: float = 12.0) -> HandModel:
    """21-joint stick hand whose mesh is a capsule on the index fingertip.

    All mesh vertices are rigidly bound (weight 1) to the index tip joint, so
    the skinned mesh stays watertight under any pose; the other joints exist
    for keypoint fitting only.
    """
    joints = np.zeros((21, 3))
    parents = np.full(21, -1, dtype=np.int64)
    bases = {
        "thumb": (np.array([-45.0, 25.0, 0.0]),
                  np.array([-0.55, 0.835, 0.0]) / np.linalg.norm([-0.55, 0.835, 0.0]),
                  (32.0, 28.0, 24.0)),
        "index": (np.array([-22.0, 85.0, 0.0]), np.array([0.0, 1.0, 0.0]),
                  (38.0, 26.0, 22.0)),
        "middle": (np.array([0.0, 90.0, 0.0]), np.array([0.0, 1.0, 0.0]),
                   (42.0, 28.0, 24.0)),
        "ring": (np.array([20.0, 86.0, 0.0]), np.array([0.05, 1.0, 0.0]) /
                 np.linalg.norm([0.05, 1.0, 0.0]), (38.0, 26.0, 22.0)),
        "pinky": (np.array([38.0, 78.0, 0.0]), np.array([0.12, 1.0, 0.0]) /
                  np.linalg.norm([0.12, 1.0, 0.0]), (30.0, 20.0, 18.0)),
    }
    j = 1
    for name in FINGER_NAMES:
        base, direction, lengths = bases[name]
        prev = 0
        pos = base
        joints[j] = pos
        parents[j] = prev
        prev = j
        j += 1
        for L in lengths:
            pos = pos + direction * L
            joints[j] = pos
            parents[j] = prev
            prev = j
            j += 1

    tip = joints[INDEX_TIP_JOINT]
    dip = joints[INDEX_TIP_JOINT - 1]
    axis = (tip - dip) / np.linalg.norm(tip - dip)
    half_length = 16.0
    cap = capsule(finger_radius, half_length)
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(z, axis)
    s = np.linalg.norm(v)
    if s < 1e-12:
        R = np.eye(3) if axis[2] > 0 else np.diag([1.0, -1.0, -1.0])
    else:
        R = axis_angle_to_matrix(v / s * np.arcsin(np.clip(s, -1, 1)))
        if R[2] @ axis < 0:
            R = axis_angle_to_matrix(v / s * (np.pi - np.arcsin(np.clip(s, -1, 1))))
    center = tip - axis * (half_length - finger_radius * 0.25)
    mesh = TriMesh(cap.vertices @ R.T + center, cap.faces)

    weights = np.zeros((len(mesh.vertices), 21))
    weights[:, INDEX_TIP_JOINT] = 1.0
    model = HandModel(rest_mesh=mesh, parents=parents, rest_joints=joints,
                      weights=weights)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

@dataclass
class SynthScene:
    """One generated sequence plus its exact ground truth."""

    scenario: str
    seed: int
    fps: float
    cameras: list[CameraParams]
    template: TriMesh
    hand_model: HandModel | None
    gt_alphas: np.ndarray                      # (F,6) object pose per frame
    gt_thetas: np.ndarray | None               # (F,P) hand pose per frame
    keypoints: list[list[KeypointObservation]] = field(default_factory=list)
    masks: list[list[MaskImage]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.gt_alphas)

    def hand_mesh(self, frame: int) -> TriMesh:
        return skin_hand(self.hand_model, HandPose(self.gt_thetas[frame], frame))

    def object_mesh(self, frame: int) -> TriMesh:
        center = self.template.vertices.mean(axis=0)
        return self.template.with_vertices(
            apply_pose(self.gt_alphas[frame], self.template.vertices, center))


def _render_object_masks(obj: TriMesh, hand: TriMesh | None,
                         cams: list[CameraParams]) -> list[MaskImage]:
    masks = []
    for cam in cams:
        scene = [(obj, "object")] if hand is None else [(hand, "hand"), (obj, "object")]
        buf = rasterizer.rasterize(scene, cam)
        masks.append(rasterizer.object_visible_mask(buf))
    return masks


def make_press_sequence(frames: int, seed: int = 0, n_views: int = 4,
                        keypoint_noise_px: float = 0.0,
                        max_indent_mm: float = 8.0,
                        subdivisions: int = 4,
                        finger_radius: float = 14.0) -> SynthScene:
    """Capsule fingertip pressing the blob: approach, contact, indent.

    Frame 0 has a positive clearance (no penetration); the indentation ramps
    linearly to max_indent_mm at the last frame. The object drifts <= 1 mm
    and rotates 1 degree per frame. Masks are the rendered object silhouettes
    with hand occlusion; keypoints are projected joints with optional
    Gaussian pixel noise.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    rng = np.random.default_rng(seed)
    cams = make_rig(n_views)
    template = pressable_blob(100.0, subdivisions)
    hand_model = make_synthetic_hand(finger_radius=finger_radius)
    center = template.vertices.mean(axis=0)

    rot0 = _random_rotation(rng, 0.35)
    t0 = rng.uniform(-15.0, 15.0, 3)
    spin_axis = _random_unit(rng)
    drifts = rng.uniform(-0.7, 0.7, (max(frames - 1, 1), 3))

    gt_alphas = np.zeros((frames, 6))
    R = axis_angle_to_matrix(rot0)
    t = t0.copy()
    step_R = axis_angle_to_matrix(spin_axis * np.deg2rad(1.0))
    for f in range(frames):
        if f > 0:
            R = step_R @ R
            t = t + drifts[f - 1]
        gt_alphas[f, :3] = matrix_to_axis_angle(R)
        gt_alphas[f, 3:] = t

    rest_mesh = hand_model.rest_mesh
    rest_low = rest_mesh.vertices[np.argmin(rest_mesh.vertices[:, 2])]

    gt_thetas = np.zeros((frames, hand_model.n_params))
    keypoints: list[list[KeypointObservation]] = []
    masks: list[list[MaskImage]] = []
    for f in range(frames):
        obj_verts = apply_pose(gt_alphas[f], template.vertices, center)
        top = obj_verts[np.argmax(obj_verts[:, 2])]
        clearance = 4.0 if frames == 1 else 4.0 - (4.0 + max_indent_mm) * f / (frames - 1)
        target_low = np.array([top[0], top[1], top[2] + clearance])
        gt_thetas[f, :3] = target_low - rest_low

        pose = HandPose(gt_thetas[f], f)
        hand_mesh = skin_hand(hand_model, pose)
        obj_mesh = template.with_vertices(obj_verts)
        masks.append(_render_object_masks(obj_mesh, hand_mesh, cams))

        skel, _ = forward_kinematics(hand_model, pose)
        frame_obs = []
        for cam in cams:
            uv = cam.project(skel.joints)
            if keypoint_noise_px > 0:
                uv = uv + rng.normal(0.0, keypoint_noise_px, uv.shape)
            for j in range(hand_model.n_joints):
                frame_obs.append(KeypointObservation(view=cam.id, joint=j,
                                                     uv=uv[j], confidence=1.0))
        keypoints.append(frame_obs)

    return SynthScene(scenario="press", seed=seed, fps=30.0, cameras=cams,
                      template=template, hand_model=hand_model,
                      gt_alphas=gt_alphas, gt_thetas=gt_thetas,
                      keypoints=keypoints, masks=masks,
                      meta={"max_indent_mm": max_indent_mm})


def make_orbit_sequence(frames: int, seed: int = 0, n_views: int = 4) -> SynthScene:
    """Press-scene kinematics with the finger held clear of the object."""
    scene = make_press_sequence(frames, seed, n_views, max_indent_mm=-20.0)
    scene.scenario = "orbit"
    return scene


def make_two_basin_scene(seed: int = 0, n_views: int = 4,
                         separation_mm: float = 150.0,
                         decoy_dilation_px: int = 4) -> SynthScene:
    """Handless sphere scene whose masks contain two silhouette basins.

    The masks are the union of the sphere rendered at the true pose (+x) and
    a dilated decoy render at the opposite side. The decoy fits every view
    only approximately (IoU ~ 1/dilation area ratio), so the true pose is the
    global optimum while the decoy, nearer the mask-centroid search center,
    forms a local basin.
    """
    cams = make_rig(n_views)
    template = icosphere(100.0, 3)
    t_true = np.array([separation_mm, 0.0, 0.0])
    t_decoy = np.array([-separation_mm, 0.0, 0.0])
    alpha_true = np.concatenate([np.zeros(3), t_true])
    alpha_decoy = np.concatenate([np.zeros(3), t_decoy])
    center = template.vertices.mean(axis=0)
    true_masks = _render_object_masks(
        template.with_vertices(apply_pose(alpha_true, template.vertices, center)),
        None, cams)
    decoy_masks = _render_object_masks(
        template.with_vertices(apply_pose(alpha_decoy, template.vertices, center)),
        None, cams)
    masks = []
    for mt, md in zip(true_masks, decoy_masks):
        dil = dilate_mask(md, decoy_dilation_px)
        masks.append(MaskImage(mt.view, np.maximum(mt.pixels, dil.pixels)))
    gt = np.zeros((1, 6))
    gt[0] = alpha_true
    return SynthScene(scenario="two_basin", seed=seed, fps=30.0, cameras=cams,
                      template=template, hand_model=None, gt_alphas=gt,
                      gt_thetas=None, keypoints=[[]], masks=[masks],
                      meta={"decoy_alpha": alpha_decoy.tolist(),
                            "separation_mm": separation_mm})


def make_table1_fixture(seed: int = 0, n_points: int = 100,
                        noise_px: float = 2.0,
                        view_counts: tuple[int, ...] = (4, 6, 8, 10)) -> dict:
    """Random 3D points observed by rigs of increasing view count, with noise.

    Returns {"points": (n,3), "rigs": {v: cams}, "observations": {v: [per
    point obs lists]}}. Used for the error-vs-view-count trend.
    """
    rng = np.random.default_rng(seed)
    points = rng.uniform(-100.0, 100.0, (n_points, 3))
    rigs = {}
    observations = {}
    for v in view_counts:
        cams = make_rig(v)
        rigs[v] = cams
        per_point = []
        for i in range(n_points):
            obs = []
            for cam in cams:
                uv = cam.project(points[i:i + 1])[0]
                uv = uv + rng.normal(0.0, noise_px, 2)
                obs.append(KeypointObservation(view=cam.id, joint=0, uv=uv,
                                               confidence=1.0))
            per_point.append(obs)
        observations[v] = per_point
    return {"points": points, "rigs": rigs, "observations": observations,
            "noise_px": noise_px, "seed": seed}


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _random_rotation(rng: np.random.Generator, magnitude: float) -> np.ndarray:
    return _random_unit(rng) * magnitude


# ---------------------------------------------------------------------------
# On-disk scene
# ---------------------------------------------------------------------------

def write_scene(scene: SynthScene, outdir: str) -> str:
    """Write cameras, meshes, masks, keypoints, manifest and ground truth.

    Returns the manifest path. The ground-truth file carries a provenance
    header so fixtures remain traceable to their generator and seed.
    """
    os.makedirs(outdir, exist_ok=True)
    scene_io.save_cameras(os.path.join(outdir, "cameras.json"), scene.cameras)
    scene_io.save_mesh(os.path.join(outdir, "template.obj"), scene.template)
    if scene.hand_model is not None:
        scene_io.save_hand_model(os.path.join(outdir, "handmodel.json"),
                                 scene.hand_model)
    keypoint_files = []
    mask_files = []
    for f in range(scene.n_frames):
        kp_name = f"keypoints_{f:04d}.json"
        scene_io.save_keypoints(os.path.join(outdir, kp_name), scene.keypoints[f])
        keypoint_files.append(kp_name)
        row = []
        for mask in scene.masks[f]:
            m_name = f"mask_{f:04d}_{mask.view:02d}.pgm"
            scene_io.save_mask(os.path.join(outdir, m_name), mask)
            row.append(m_name)
        mask_files.append(row)
    manifest = SequenceManifest(
        root=outdir, n_frames=scene.n_frames, fps=scene.fps,
        cameras="cameras.json",
        hand_model="handmodel.json" if scene.hand_model is not None else "cameras.json",
        object_template="template.obj",
        keypoint_files=keypoint_files, mask_files=mask_files)
    manifest_path = os.path.join(outdir, "manifest.json")
    scene_io.save_manifest(manifest_path, manifest)

    gt = {
        "_provenance": {"generator": GENERATOR_NAME, "version": GENERATOR_VERSION,
                        "scenario": scene.scenario, "seed": scene.seed},
        "object_alphas": [[float(x) for x in row] for row in scene.gt_alphas],
    }
    if scene.gt_thetas is not None:
        gt["hand_thetas"] = [[float(x) for x in row] for row in scene.gt_thetas]
    if scene.meta:
        gt["meta"] = scene.meta
    scene_io._write_json(os.path.join(outdir, "ground_truth.json"), gt)
    return manifest_path
