"""Per-frame hand reconstruction.

Stages: multi-view DLT triangulation of 2D keypoints, damped Gauss-Newton
skeleton fitting against both the 3D points and the 2D detections, temporal
smoothing of the pose vector, and linear blend skinning of the rest mesh.

Pose vector layout: [root translation (3, mm), axis-angle per joint (3 * J)].
Joint 0 is the wrist; its axis-angle block is the global rotation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .rotations import nearest_axis_angle, rotation_and_derivatives
from .scene_io import CameraParams, KeypointObservation, TriMesh

logger = logging.getLogger(__name__)

DEFAULT_CONF_THRESHOLD = 0.6


@dataclass
class HandModel:
    """Rigged hand template: rest mesh, joint tree and skinning weights."""

    rest_mesh: TriMesh
    parents: np.ndarray        # (J,) int, -1 for the root
    rest_joints: np.ndarray    # (J,3) mm
    weights: np.ndarray        # (n_vertices, J), rows sum to 1

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        self.rest_joints = np.asarray(self.rest_joints, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_params(self) -> int:
        return 3 + 3 * self.n_joints

    def validate(self) -> None:
        J = self.n_joints
        if self.rest_joints.shape != (J, 3):
            raise ValueError("hand model: rest_joints shape mismatch")
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0) \
                or np.any(self.parents[1:] >= np.arange(1, J)):
            raise ValueError("hand model: parents must form a tree rooted at joint 0 "
                             "with parent index < child index")
        if self.weights.shape != (len(self.rest_mesh.vertices), J):
            raise ValueError("hand model: weights shape mismatch")
        if np.any(self.weights < -1e-12):
            raise ValueError("hand model: negative skinning weight")
        sums = self.weights.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ValueError(f"hand model: weights of vertex {bad} sum to {sums[bad]:.9f}")

    def rest_bone_lengths(self) -> np.ndarray:
        """Length of the bone ending at each non-root joint (0 for the root)."""
        lengths = np.zeros(self.n_joints)
        for j in range(1, self.n_joints):
            lengths[j] = np.linalg.norm(self.rest_joints[j] - self.rest_joints[self.parents[j]])
        return lengths


@dataclass
class HandPose:
    """Flat parameter vector [root translation, per-joint axis-angle], plus frame index."""

    theta: np.ndarray
    frame: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)

    @property
    def root_translation(self) -> np.ndarray:
        return self.theta[:3]

    def joint_rotation(self, j: int) -> np.ndarray:
        return self.theta[3 + 3 * j: 6 + 3 * j]

    def n_joints(self) -> int:
        return (len(self.theta) - 3) // 3

    def validate(self) -> None:
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("hand pose: non-finite parameters")
        rots = self.theta[3:].reshape(-1, 3)
        mags = np.linalg.norm(rots, axis=1)
        if np.any(mags >= 2.0 * np.pi):
            raise ValueError("hand pose: axis-angle magnitude >= 2*pi")

    @staticmethod
    def identity(n_joints: int, frame: int = 0) -> "HandPose":
        return HandPose(np.zeros(3 + 3 * n_joints), frame)


@dataclass
class Skeleton3D:
    """Triangulated or posed joint positions with per-joint validity."""

    joints: np.ndarray         # (J,3) mm
    valid: np.ndarray          # (J,) bool

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)


def check_bone_lengths(skel: Skeleton3D, model: HandModel, tol: float = 0.2) -> list[int]:
    """Joints whose triangulated bone length deviates > tol from rest (flagged, kept)."""
    rest = model.rest_bone_lengths()
    suspects = []
    for j in range(1, model.n_joints):
        p = model.parents[j]
        if not (skel.valid[j] and skel.valid[p]) or rest[j] < 1e-9:
            continue
        length = np.linalg.norm(skel.joints[j] - skel.joints[p])
        if abs(length - rest[j]) > tol * rest[j]:
            suspects.append(j)
    if suspects:
        logger.warning("bone lengths off rest by >%.0f%% at joints %s", tol * 100, suspects)
    return suspects


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------

def _skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def triangulate_keypoint(obs: list[KeypointObservation], cams: list[CameraParams],
                         conf_threshold: float = DEFAULT_CONF_THRESHOLD) -> np.ndarray | None:
    """DLT triangulation of one joint from its per-view 2D observations.

    Stacks the cross-product constraint skew([u,v,1]) * K * (R k + T) = 0 over
    the views with confidence strictly above the threshold and solves the
    normal equations. Returns None when fewer than two views qualify or the
    qualifying rays are mutually parallel within 0.1 degrees.
    """
    cam_by_id = {c.id: c for c in cams}
    valid = [o for o in obs if o.confidence > conf_threshold and o.view in cam_by_id]
    if len(valid) < 2:
        return None

    rays = []
    rows = []
    rhs = []
    for o in valid:
        cam = cam_by_id[o.view]
        x_h = np.array([o.uv[0], o.uv[1], 1.0])
        S = _skew(x_h)
        rows.append(S @ cam.K @ cam.R)
        rhs.append(-S @ cam.K @ cam.T)
        d = cam.R.T @ np.linalg.solve(cam.K, x_h)
        rays.append(d / np.linalg.norm(d))

    max_angle = 0.0
    for i in range(len(rays)):
        for j in range(i + 1, len(rays)):
            cos_a = np.clip(abs(float(rays[i] @ rays[j])), -1.0, 1.0)
            max_angle = max(max_angle, np.arccos(cos_a))
    if max_angle < np.deg2rad(0.1):
        logger.debug("triangulation degenerate: all rays parallel within 0.1 deg")
        return None

    A = np.vstack(rows)
    b = np.concatenate(rhs)
    k, *_ = np.linalg.lstsq(A, b, rcond=None)
    return k


def triangulate_skeleton(obs: list[KeypointObservation], cams: list[CameraParams],
                         n_joints: int,
                         conf_threshold: float = DEFAULT_CONF_THRESHOLD) -> Skeleton3D:
    """Triangulate every joint independently; joints without a solution are invalid."""
    joints = np.zeros((n_joints, 3))
    valid = np.zeros(n_joints, dtype=bool)
    by_joint: dict[int, list[KeypointObservation]] = {}
    for o in obs:
        by_joint.setdefault(o.joint, []).append(o)
    for j in range(n_joints):
        k = triangulate_keypoint(by_joint.get(j, []), cams, conf_threshold)
        if k is not None:
            joints[j] = k
            valid[j] = True
    return Skeleton3D(joints, valid)


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------

def forward_kinematics(model: HandModel, pose: HandPose,
                       want_jacobian: bool = False):
    """Pose the skeleton; optionally return joint-position Jacobians.

    Composes per-joint rotations about the rest joint positions down the tree,
    with the root block also applying the global translation. Returns
    (Skeleton3D, (R, t)) where R is (J,3,3) and the bone translations t (J,3)
    are posed-minus-rest joint positions, matching the skinning convention
    v' = sum_j w * [R_j (v - rest_j) + rest_j + t_j]. With want_jacobian, a
    third element (J, 3, P) holds d(joint position)/d(theta).
    """
    J = model.n_joints
    P = model.n_params
    theta = pose.theta
    if len(theta) != P:
        raise ValueError(f"pose has {len(theta)} parameters, model needs {P}")
    rest = model.rest_joints

    Rg = np.zeros((J, 3, 3))
    tg = np.zeros((J, 3))
    dRg = np.zeros((J, P, 3, 3)) if want_jacobian else None
    dtg = np.zeros((J, P, 3)) if want_jacobian else None

    for j in range(J):
        r_j = theta[3 + 3 * j: 6 + 3 * j]
        c = rest[j]
        if want_jacobian:
            R_j, dR_j = rotation_and_derivatives(r_j)
        else:
            R_j, dR_j = rotation_and_derivatives(r_j)[0], None
        local_t = c - R_j @ c
        p = model.parents[j]
        if p < 0:
            Rg[j] = R_j
            tg[j] = local_t + theta[:3]
        else:
            Rg[j] = Rg[p] @ R_j
            tg[j] = Rg[p] @ local_t + tg[p]
        if want_jacobian:
            own = slice(3 + 3 * j, 6 + 3 * j)
            Rp = np.eye(3) if p < 0 else Rg[p]
            for k in range(3):
                dRg[j, own.start + k] = Rp @ dR_j[k]
                dtg[j, own.start + k] = -(Rp @ dR_j[k]) @ c
            if p < 0:
                dtg[j, 0:3] = np.eye(3)
            else:
                dRg[j] += dRg[p] @ R_j
                dtg[j] += dRg[p] @ local_t + dtg[p]

    joints = np.einsum("jab,jb->ja", Rg, rest) + tg
    bone_t = joints - rest
    skel = Skeleton3D(joints, np.ones(J, dtype=bool))
    if want_jacobian:
        djoints = np.einsum("jpab,jb->jpa", dRg, rest) + dtg   # (J, P, 3)
        return skel, (Rg, bone_t), np.transpose(djoints, (0, 2, 1))
    return skel, (Rg, bone_t)


# ---------------------------------------------------------------------------
# Pose solve
# ---------------------------------------------------------------------------

@dataclass
class HandSolveConfig:
    max_iterations: int = 50
    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    robust: str = "huber"          # "huber" or "none" (plain norms)
    huber_delta: float = 5.0       # px for 2D blocks, mm for 3D blocks
    damping_init: float = 1e-4
    step_tol: float = 1e-10


def hand_residuals(model: HandModel, theta: np.ndarray, kp3d: Skeleton3D | None,
                   kp2d: list[KeypointObservation], cams: list[CameraParams],
                   conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                   want_jacobian: bool = False):
    """Residual blocks of the skeleton-fit objective (unweighted).

    Blocks are (kind, joint, r, J_block): 3D blocks f_j(theta) - k_j in mm and
    2D blocks P_n(f_j(theta)) - x_{j,n} in px. Invalid joints and observations
    at or below the confidence threshold contribute nothing.
    """
    pose = HandPose(theta)
    if want_jacobian:
        skel, _, djac = forward_kinematics(model, pose, want_jacobian=True)
    else:
        skel, _ = forward_kinematics(model, pose)
        djac = None
    cam_by_id = {c.id: c for c in cams}
    blocks = []
    if kp3d is not None:
        for j in range(model.n_joints):
            if not kp3d.valid[j]:
                continue
            r = skel.joints[j] - kp3d.joints[j]
            Jb = djac[j] if want_jacobian else None
            blocks.append(("3d", j, r, Jb))
    for o in kp2d:
        if o.confidence <= conf_threshold or o.view not in cam_by_id:
            continue
        cam = cam_by_id[o.view]
        q = cam.K @ (cam.R @ skel.joints[o.joint] + cam.T)
        if q[2] <= 1e-9:
            continue
        proj = q[:2] / q[2]
        r = proj - o.uv
        Jb = None
        if want_jacobian:
            dproj = np.array([[1.0 / q[2], 0.0, -q[0] / q[2] ** 2],
                              [0.0, 1.0 / q[2], -q[1] / q[2] ** 2]])
            Jb = dproj @ cam.K @ cam.R @ djac[o.joint]
        blocks.append(("2d", o.joint, r, Jb))
    return blocks


def _robust_objective(blocks, robust: str, delta: float) -> float:
    total = 0.0
    for _, _, r, _ in blocks:
        s = float(np.linalg.norm(r))
        if robust == "huber" and s > delta:
            total += 2.0 * delta * s - delta * delta
        else:
            total += s * s
    return total


def solve_hand_pose(model: HandModel, kp3d: Skeleton3D | None,
                    kp2d: list[KeypointObservation], cams: list[CameraParams],
                    init: HandPose, config: HandSolveConfig | None = None) -> HandPose:
    """Fit the skeleton pose by damped Gauss-Newton on the 2D + 3D keypoint errors.

    The objective is non-increasing over accepted steps; on non-convergence
    after max_iterations the best iterate is returned with a warning.
    """
    cfg = config or HandSolveConfig()
    theta = init.theta.copy()
    P = model.n_params

    def build(th, want_jac):
        return hand_residuals(model, th, kp3d, kp2d, cams, cfg.conf_threshold, want_jac)

    blocks = build(theta, True)
    if not blocks:
        logger.warning("hand solve: no residuals (no valid joints or views); "
                       "returning the initial pose")
        return HandPose(theta.copy(), init.frame)
    best_obj = _robust_objective(blocks, cfg.robust, cfg.huber_delta)
    mu = cfg.damping_init

    for _ in range(cfg.max_iterations):
        H = np.zeros((P, P))
        g = np.zeros(P)
        for _, _, r, Jb in blocks:
            w = 1.0
            if cfg.robust == "huber":
                s = np.linalg.norm(r)
                if s > cfg.huber_delta:
                    w = cfg.huber_delta / s
            H += w * (Jb.T @ Jb)
            g += w * (Jb.T @ r)
        diag = np.maximum(np.diag(H), 1e-9)
        accepted = False
        for _attempt in range(8):
            try:
                step = np.linalg.solve(H + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            cand = theta + step
            cand_blocks = build(cand, True)
            cand_obj = _robust_objective(cand_blocks, cfg.robust, cfg.huber_delta)
            if cand_obj <= best_obj:
                theta = cand
                blocks = cand_blocks
                best_obj = cand_obj
                mu = max(mu * 0.5, 1e-12)
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            break
        if np.linalg.norm(step) < cfg.step_tol:
            break
    else:
        logger.warning("hand solve: no convergence after %d iterations "
                       "(objective %.6g); returning best iterate",
                       cfg.max_iterations, best_obj)
    return HandPose(theta, init.frame)


# ---------------------------------------------------------------------------
# Temporal smoothing and skinning
# ---------------------------------------------------------------------------

def smooth_pose(history: list[HandPose], current: HandPose, alpha: float) -> HandPose:
    """Exponential moving average against the last smoothed pose.

    Axis-angle blocks are blended after choosing, per joint, the current
    representation nearest to the history value. alpha = 1 returns ``current``.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"smoothing alpha {alpha} outside (0, 1]")
    if not history or alpha == 1.0:
        return HandPose(current.theta.copy(), current.frame)
    prev = history[-1].theta
    cur = current.theta
    out = np.empty_like(cur)
    out[:3] = alpha * cur[:3] + (1.0 - alpha) * prev[:3]
    for j in range(current.n_joints()):
        s = slice(3 + 3 * j, 6 + 3 * j)
        aligned = nearest_axis_angle(cur[s], prev[s])
        out[s] = alpha * aligned + (1.0 - alpha) * prev[s]
    return HandPose(out, current.frame)


def skin_hand(model: HandModel, pose: HandPose) -> TriMesh:
    """Linear blend skinning of the rest mesh under the (smoothed) pose."""
    _, (R, t) = forward_kinematics(model, pose)
    verts = model.rest_mesh.vertices
    out = np.zeros_like(verts)
    for j in range(model.n_joints):
        w = model.weights[:, j]
        nz = np.nonzero(w)[0]
        if not len(nz):
            continue
        c = model.rest_joints[j]
        moved = (verts[nz] - c) @ R[j].T + c + t[j]
        out[nz] += w[nz, None] * moved
    return model.rest_mesh.with_vertices(out)


def inverse_distance_weights(mesh: TriMesh, parents: np.ndarray,
                             rest_joints: np.ndarray, k: int = 4) -> np.ndarray:
    """Fallback skinning weights: normalized 1/d^2 to the k nearest bones.

    Bones are the segments from each non-root joint to its parent; the weight
    is assigned to the child joint. Used when a model file carries no weights.
    """
    parents = np.asarray(parents)
    bone_joints = [j for j in range(len(parents)) if parents[j] >= 0]
    n_v = len(mesh.vertices)
    weights = np.zeros((n_v, len(parents)))
    dists = np.empty((n_v, len(bone_joints)))
    for bi, j in enumerate(bone_joints):
        a = rest_joints[parents[j]]
        b = rest_joints[j]
        dists[:, bi] = _point_segment_distance(mesh.vertices, a, b)
    order = np.argsort(dists, axis=1)[:, :k]
    for vi in range(n_v):
        d = np.maximum(dists[vi, order[vi]], 1e-6)
        w = 1.0 / (d * d)
        w /= w.sum()
        for col, wv in zip(order[vi], w):
            weights[vi, bone_joints[col]] += wv
    return weights


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


# ---------------------------------------------------------------------------
# Sequence driver
# ---------------------------------------------------------------------------

@dataclass
class HandTrackResult:
    pose_raw: HandPose
    pose_smoothed: HandPose
    skeleton: Skeleton3D
    mesh: TriMesh


class HandTracker:
    """Stateful per-frame driver: triangulate, fit, smooth, skin."""

    def __init__(self, model: HandModel, cams: list[CameraParams],
                 conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                 smooth_alpha: float = 0.7,
                 solve_config: HandSolveConfig | None = None):
        self.model = model
        self.cams = cams
        self.conf_threshold = conf_threshold
        self.smooth_alpha = smooth_alpha
        self.solve_config = solve_config or HandSolveConfig(conf_threshold=conf_threshold)
        self.history: list[HandPose] = []

    def track_frame(self, frame: int, obs: list[KeypointObservation]) -> HandTrackResult:
        skel = triangulate_skeleton(obs, self.cams, self.model.n_joints,
                                    self.conf_threshold)
        check_bone_lengths(skel, self.model)
        init = self.history[-1] if self.history else HandPose.identity(self.model.n_joints)
        raw = solve_hand_pose(self.model, skel, obs, self.cams,
                              HandPose(init.theta.copy(), frame), self.solve_config)
        smoothed = smooth_pose(self.history, raw, self.smooth_alpha)
        self.history.append(smoothed)
        return HandTrackResult(raw, smoothed, skel, skin_hand(self.model, smoothed))

    def restore(self, smoothed_theta: np.ndarray, frame: int) -> None:
        """Reseed temporal state from a saved pose file (resume support)."""
        self.history.append(HandPose(smoothed_theta.copy(), frame))
