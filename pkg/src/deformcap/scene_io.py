"""Scene input/output: cameras, meshes, masks, keypoints, manifests and result files.

All loaders are pure functions returning immutable-by-convention values; world
units are millimeters and image units are pixels throughout.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-6


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class CameraParams:
    """Pinhole camera: intrinsics K, world-to-camera extrinsics [R, T] in mm."""

    id: int
    K: np.ndarray          # (3,3) intrinsics, pixels
    R: np.ndarray          # (3,3) world -> camera rotation
    T: np.ndarray          # (3,) translation, mm
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)

    def validate(self) -> None:
        name = f"camera {self.id}"
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{name}: non-positive image size {self.width}x{self.height}")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=ORTHO_TOL):
            raise ValueError(f"{name}: field R is not orthonormal")
        if np.linalg.det(self.R) < 0:
            raise ValueError(f"{name}: field R rotation not proper (det = -1 reflection)")
        if abs(np.linalg.det(self.R) - 1.0) > ORTHO_TOL:
            raise ValueError(f"{name}: field R determinant {np.linalg.det(self.R):.9f} != 1")
        if self.K[1, 0] != 0 or self.K[2, 0] != 0 or self.K[2, 1] != 0:
            raise ValueError(f"{name}: field K is not upper-triangular")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError(f"{name}: field K has non-positive focal entries")

    def camera_points(self, points: np.ndarray) -> np.ndarray:
        """World points (n,3) -> camera-frame points (n,3)."""
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.T

    def project(self, points: np.ndarray) -> np.ndarray:
        """Full pinhole projection of world points (n,3) to pixels (n,2)."""
        q = self.camera_points(points) @ self.K.T
        return q[:, :2] / q[:, 2:3]

    def scaled(self, factor: float) -> "CameraParams":
        """Camera for an image downscaled by integer ``factor`` (working resolution)."""
        K = self.K.copy()
        K[0, :] /= factor
        K[1, :] /= factor
        return CameraParams(self.id, K, self.R.copy(), self.T.copy(),
                            int(self.width // factor), int(self.height // factor))


@dataclass
class TriMesh:
    """Indexed triangle mesh, vertices in mm. Normals recomputed on demand."""

    vertices: np.ndarray   # (n,3) float64
    faces: np.ndarray      # (m,3) int32

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32).reshape(-1, 3)
        self._normals = None
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def normals(self) -> np.ndarray:
        """Per-vertex unit normals, area-weighted average of incident face normals."""
        if self._normals is None:
            fn = self.face_normals_raw()
            n = np.zeros_like(self.vertices)
            for k in range(3):
                np.add.at(n, self.faces[:, k], fn)
            lens = np.linalg.norm(n, axis=1)
            ok = lens > 1e-20
            n[ok] /= lens[ok, None]
            self._normals = n
        return self._normals

    def face_normals_raw(self) -> np.ndarray:
        """Unnormalized face normals (cross products; length = 2x face area)."""
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same topology, new vertex positions."""
        return TriMesh(np.asarray(vertices, dtype=np.float64), self.faces.copy())

    def edge_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for a, b, c in self.faces:
            for u, v in ((a, b), (b, c), (c, a)):
                key = (min(u, v), max(u, v))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        """True iff every edge is shared by exactly two faces."""
        if not len(self.faces):
            return False
        return all(c == 2 for c in self.edge_counts().values())

    def boundary_edges(self) -> list[tuple[int, int]]:
        return [e for e, c in self.edge_counts().items() if c != 2]

    def euler_characteristic(self) -> int:
        n_e = len(self.edge_counts())
        return len(self.vertices) - n_e + len(self.faces)

    def validate_template(self) -> None:
        """Object templates must be watertight and genus 0 (sphere topology)."""
        bad = self.boundary_edges()
        if bad:
            raise ValueError(f"mesh not watertight: {len(bad)} edges not shared by "
                             f"exactly 2 faces, e.g. {bad[:4]}")
        chi = self.euler_characteristic()
        if chi != 2:
            raise ValueError(f"mesh is not genus 0 (Euler characteristic {chi} != 2)")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def signed_volume(self) -> float:
        """Divergence-theorem volume; positive for outward-oriented closed meshes."""
        v = self.vertices
        f = self.faces
        return float(np.einsum("ij,ij->i", v[f[:, 0]],
                               np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)


@dataclass
class KeypointObservation:
    """One detected 2D hand keypoint in one view."""

    view: int
    joint: int
    uv: np.ndarray         # (2,) pixels
    confidence: float

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(2)
        if not np.all(np.isfinite(self.uv)):
            raise ValueError(f"keypoint view {self.view} joint {self.joint}: uv not finite")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"keypoint view {self.view} joint {self.joint}: "
                             f"confidence {self.confidence} outside [0,1]")


@dataclass
class MaskImage:
    """Binary segmentation mask; 0 = background, 255 = object."""

    view: int
    pixels: np.ndarray     # (height, width) uint8, values in {0, 255}

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.pixels))

    def downsampled(self, factor: int) -> "MaskImage":
        """Nearest-neighbour sample at the low-resolution pixel centers."""
        h = self.height // factor
        w = self.width // factor
        ys = (factor * (np.arange(h) + 0.5)).astype(np.int64)
        xs = (factor * (np.arange(w) + 0.5)).astype(np.int64)
        return MaskImage(self.view, self.pixels[np.ix_(ys, xs)])


@dataclass
class SequenceManifest:
    """Index of one captured sequence; all paths relative to the manifest file."""

    root: str
    n_frames: int
    fps: float
    cameras: str
    hand_model: str
    object_template: str
    keypoint_files: list[str] = field(default_factory=list)
    mask_files: list[list[str]] = field(default_factory=list)   # [frame][view]

    def path(self, rel: str) -> str:
        return os.path.join(self.root, rel)

    def validate(self) -> None:
        if self.n_frames <= 0:
            raise ValueError("manifest: frame count must be positive")
        if len(self.keypoint_files) != self.n_frames or len(self.mask_files) != self.n_frames:
            raise ValueError("manifest: per-frame file lists do not match frame count")
        for rel in [self.cameras, self.hand_model, self.object_template,
                    *self.keypoint_files, *(p for fr in self.mask_files for p in fr)]:
            if not os.path.exists(self.path(rel)):
                raise ValueError(f"manifest: referenced file missing: {rel}")


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

def load_cameras(path: str) -> list[CameraParams]:
    """Load and validate a cameras.json rig file."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    cams = []
    for entry in data:
        cam = CameraParams(
            id=int(entry["id"]),
            K=np.asarray(entry["K"], dtype=np.float64).reshape(3, 3),
            R=np.asarray(entry["R"], dtype=np.float64).reshape(3, 3),
            T=np.asarray(entry["T"], dtype=np.float64),
            width=int(entry["width"]),
            height=int(entry["height"]),
        )
        cam.validate()
        cams.append(cam)
    return cams


def save_cameras(path: str, cams: list[CameraParams]) -> None:
    data = [{
        "id": c.id,
        "K": [float(x) for x in c.K.ravel()],
        "R": [float(x) for x in c.R.ravel()],
        "T": [float(x) for x in c.T],
        "width": c.width,
        "height": c.height,
    } for c in cams]
    _write_json(path, data)


# ---------------------------------------------------------------------------
# Meshes (Wavefront OBJ, v/f records only)
# ---------------------------------------------------------------------------

def load_mesh(path: str) -> TriMesh:
    """Load a triangle mesh from OBJ. Only v and f records are used."""
    vertices = []
    faces = []
    warned = False
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) != 3:
                    raise ValueError(f"{path}: non-triangular face at line {lineno}")
                faces.append([i - 1 for i in idx])
            elif tag in ("vn", "vt", "mtllib", "usemtl", "o", "g", "s"):
                if not warned and tag in ("vn", "vt", "mtllib", "usemtl"):
                    logger.warning("%s: ignoring non-geometry OBJ records (%s ...)", path, tag)
                    warned = True
            else:
                raise ValueError(f"{path}: unsupported OBJ record '{tag}' at line {lineno}")
    mesh_v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    mesh_f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if mesh_f.size and (mesh_f.min() < 0 or mesh_f.max() >= len(mesh_v)):
        raise ValueError(f"{path}: face vertex index out of range")
    return TriMesh(mesh_v, mesh_f)


def save_mesh(path: str, mesh: TriMesh) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for v in mesh.vertices:
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for a, b, c in mesh.faces:
            f.write(f"f {a + 1} {b + 1} {c + 1}\n")


# ---------------------------------------------------------------------------
# Masks (binary PGM, P5)
# ---------------------------------------------------------------------------

_MASK_NAME_RE = re.compile(r"mask_(\d+)_(\d+)\.pgm$")


def load_mask(path: str, view: int | None = None,
              expect_size: tuple[int, int] | None = None) -> MaskImage:
    """Load a binary P5 PGM mask; values are thresholded at 128 to {0, 255}.

    The view id is taken from ``view`` or parsed from a mask_<frame>_<view>.pgm
    file name. ``expect_size`` is (width, height) from the matching camera.
    """
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: unsupported PGM variant {magic!r} (binary P5 required)")
        fields = []
        while len(fields) < 3:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: malformed PGM header")
            text = line.split(b"#", 1)[0]
            fields.extend(text.split())
        width, height, maxval = (int(x) for x in fields[:3])
        if maxval != 255:
            raise ValueError(f"{path}: PGM maxval {maxval} != 255")
        raw = f.read(width * height)
    if len(raw) != width * height:
        raise ValueError(f"{path}: truncated PGM payload")
    if expect_size is not None and (width, height) != expect_size:
        raise ValueError(f"{path}: mask {width}x{height} does not match camera "
                         f"{expect_size[0]}x{expect_size[1]}")
    if view is None:
        m = _MASK_NAME_RE.search(os.path.basename(path))
        view = int(m.group(2)) if m else -1
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)
    binary = np.where(pixels >= 128, 255, 0).astype(np.uint8)
    return MaskImage(view=view, pixels=binary)


def save_mask(path: str, mask: MaskImage) -> None:
    with open(path, "wb") as f:
        f.write(f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii"))
        f.write(mask.pixels.tobytes())


# ---------------------------------------------------------------------------
# Keypoints
# ---------------------------------------------------------------------------

def load_keypoints(path: str) -> list[KeypointObservation]:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return [KeypointObservation(view=int(e["view"]), joint=int(e["joint"]),
                                uv=np.asarray(e["uv"], dtype=np.float64),
                                confidence=float(e["conf"]))
            for e in data]


def save_keypoints(path: str, obs: list[KeypointObservation]) -> None:
    data = [{"view": o.view, "joint": o.joint,
             "uv": [float(o.uv[0]), float(o.uv[1])], "conf": float(o.confidence)}
            for o in obs]
    _write_json(path, data)


# ---------------------------------------------------------------------------
# Hand model file
# ---------------------------------------------------------------------------

def load_hand_model(path: str):
    """Load handmodel.json plus its referenced rest-mesh OBJ.

    Returns a :class:`deformcap.hand_capture.HandModel`.
    """
    from .hand_capture import HandModel

    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    n_joints = int(data["joints"])
    parents = np.asarray(data["parents"], dtype=np.int64)
    rest_joints = np.asarray(data["rest_joints"], dtype=np.float64).reshape(n_joints, 3)
    mesh_path = os.path.join(os.path.dirname(path), data["rest_mesh"])
    rest_mesh = load_mesh(mesh_path)
    weights = np.zeros((len(rest_mesh.vertices), n_joints))
    for v_idx, j_idx, w in data["weights"]:
        weights[int(v_idx), int(j_idx)] = float(w)
    model = HandModel(rest_mesh=rest_mesh, parents=parents,
                      rest_joints=rest_joints, weights=weights)
    model.validate()
    return model


def save_hand_model(path: str, model, mesh_filename: str = "hand_rest.obj") -> None:
    save_mesh(os.path.join(os.path.dirname(path), mesh_filename), model.rest_mesh)
    v_idx, j_idx = np.nonzero(model.weights)
    data = {
        "joints": int(len(model.rest_joints)),
        "parents": [int(p) for p in model.parents],
        "rest_joints": [float(x) for x in model.rest_joints.ravel()],
        "rest_mesh": mesh_filename,
        "weights": [[int(v), int(j), float(model.weights[v, j])]
                    for v, j in zip(v_idx, j_idx)],
    }
    _write_json(path, data)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def load_manifest(path: str) -> SequenceManifest:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    manifest = SequenceManifest(
        root=os.path.dirname(os.path.abspath(path)),
        n_frames=int(data["frames"]),
        fps=float(data.get("fps", 30.0)),
        cameras=data["cameras"],
        hand_model=data["hand_model"],
        object_template=data["object_template"],
        keypoint_files=list(data["keypoints"]),
        mask_files=[list(fr) for fr in data["masks"]],
    )
    manifest.validate()
    return manifest


def save_manifest(path: str, manifest: SequenceManifest) -> None:
    data = {
        "frames": manifest.n_frames,
        "fps": manifest.fps,
        "cameras": manifest.cameras,
        "hand_model": manifest.hand_model,
        "object_template": manifest.object_template,
        "keypoints": manifest.keypoint_files,
        "masks": manifest.mask_files,
    }
    _write_json(path, data)


# ---------------------------------------------------------------------------
# Result files
# ---------------------------------------------------------------------------

def save_pose_file(path: str, frame: int, hand_theta: np.ndarray,
                   object_alpha: np.ndarray,
                   hand_theta_raw: np.ndarray | None = None,
                   object_alpha_raw: np.ndarray | None = None) -> None:
    """Per-frame result poses. The smoothed values are the ones consumed downstream."""
    data = {
        "frame": int(frame),
        "hand_theta": [float(x) for x in np.asarray(hand_theta).ravel()],
        "object_alpha": [float(x) for x in np.asarray(object_alpha).ravel()],
    }
    if hand_theta_raw is not None:
        data["hand_theta_raw"] = [float(x) for x in np.asarray(hand_theta_raw).ravel()]
    if object_alpha_raw is not None:
        data["object_alpha_raw"] = [float(x) for x in np.asarray(object_alpha_raw).ravel()]
    _write_json(path, data)


def load_pose_file(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    out = {"frame": int(data["frame"]),
           "hand_theta": np.asarray(data["hand_theta"], dtype=np.float64),
           "object_alpha": np.asarray(data["object_alpha"], dtype=np.float64)}
    for key in ("hand_theta_raw", "object_alpha_raw"):
        if key in data:
            out[key] = np.asarray(data[key], dtype=np.float64)
    return out


def save_contact_map(path: str, displacement_mm: np.ndarray) -> None:
    """contactmap CSV: one "vertex_index,displacement_mm" line per vertex."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("vertex_index,displacement_mm\n")
        for i, d in enumerate(np.asarray(displacement_mm).ravel()):
            f.write(f"{i},{float(d)!r}\n")


def load_contact_map(path: str) -> np.ndarray:
    values = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline()
        if not header.startswith("vertex_index"):
            raise ValueError(f"{path}: missing contact map header")
        for line in f:
            if line.strip():
                values.append(float(line.split(",")[1]))
    return np.asarray(values, dtype=np.float64)


def _write_json(path: str, data) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=1)
        f.write("\n")
