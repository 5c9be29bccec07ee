"""Z-buffered software rasterization of triangle meshes into labeled silhouettes.

Pixel centers sit at (ix + 0.5, iy + 0.5). Depth is perspective-correct
camera-space z (mm); the z-test is strict less-than so the lowest submitted
triangle index wins ties. Triangles with any vertex at z <= NEAR_MM are
rejected whole (no polygon clipping). Back faces are kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .scene_io import CameraParams, MaskImage, TriMesh

LABEL_EMPTY = 0
LABEL_HAND = 1
LABEL_OBJECT = 2

_LABEL_CODES = {"empty": LABEL_EMPTY, "hand": LABEL_HAND, "object": LABEL_OBJECT}

NEAR_MM = 0.1


@dataclass
class DepthBuffer:
    """Per-pixel depth (mm, +inf empty), label plane and generating triangle index."""

    view: int
    width: int
    height: int
    depth: np.ndarray      # (h,w) float64
    label: np.ndarray      # (h,w) uint8, LABEL_* codes
    tri: np.ndarray        # (h,w) int32, global triangle index, -1 where empty


def new_buffer(cam: CameraParams) -> DepthBuffer:
    h, w = cam.height, cam.width
    return DepthBuffer(view=cam.id, width=w, height=h,
                       depth=np.full((h, w), np.inf),
                       label=np.zeros((h, w), dtype=np.uint8),
                       tri=np.full((h, w), -1, dtype=np.int32))


def project_vertices(cam: CameraParams, vertices: np.ndarray):
    """Screen coordinates (u, v in px) and camera-space z (mm) per vertex."""
    q = cam.camera_points(vertices) @ cam.K.T
    z = q[:, 2].copy()
    safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    return q[:, 0] / safe, q[:, 1] / safe, z


def rasterize(meshes: list[tuple[TriMesh, str]], cam: CameraParams) -> DepthBuffer:
    """Render labeled meshes into a fresh buffer for one camera.

    ``meshes`` is a list of (TriMesh, label) with label "hand" or "object".
    Triangle indices in the output are global across the input list, in order.
    """
    if not meshes:
        raise ValueError("rasterize: empty mesh list")
    buf = new_buffer(cam)
    offset = 0
    for mesh, lab in meshes:
        if not np.all(np.isfinite(mesh.vertices)):
            raise ValueError("rasterize: non-finite vertices")
        code = _LABEL_CODES[lab] if isinstance(lab, str) else int(lab)
        u, v, z = project_vertices(cam, mesh.vertices)
        _raster_kernel(u, v, z, mesh.faces, offset, code,
                       buf.depth, buf.label, buf.tri, NEAR_MM)
        offset += len(mesh.faces)
    return buf


def rasterize_into(buf: DepthBuffer, cam: CameraParams, mesh: TriMesh,
                   label: str, tri_offset: int = 0) -> None:
    """Composite one more mesh into an existing buffer (used for cached hand renders)."""
    code = _LABEL_CODES[label] if isinstance(label, str) else int(label)
    u, v, z = project_vertices(cam, mesh.vertices)
    _raster_kernel(u, v, z, mesh.faces, tri_offset, code,
                   buf.depth, buf.label, buf.tri, NEAR_MM)


@njit(cache=True)
def _raster_kernel(u, v, z, faces, tri_offset, code, depth, label, tri, near):
    h, w = depth.shape
    for fi in range(faces.shape[0]):
        ia, ib, ic = faces[fi, 0], faces[fi, 1], faces[fi, 2]
        za, zb, zc = z[ia], z[ib], z[ic]
        if za <= near or zb <= near or zc <= near:
            continue
        ua, va = u[ia], v[ia]
        ub, vb = u[ib], v[ib]
        uc, vc = u[ic], v[ic]
        area2 = (ub - ua) * (vc - va) - (vb - va) * (uc - ua)
        if area2 == 0.0:
            continue
        sgn = 1.0 if area2 > 0.0 else -1.0
        umin = min(ua, min(ub, uc))
        umax = max(ua, max(ub, uc))
        vmin = min(va, min(vb, vc))
        vmax = max(va, max(vb, vc))
        x0 = int(np.ceil(umin - 0.5))
        x1 = int(np.floor(umax - 0.5))
        y0 = int(np.ceil(vmin - 0.5))
        y1 = int(np.floor(vmax - 0.5))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > w - 1:
            x1 = w - 1
        if y1 > h - 1:
            y1 = h - 1
        if x1 < x0 or y1 < y0:
            continue
        inv_a, inv_b, inv_c = 1.0 / za, 1.0 / zb, 1.0 / zc
        for iy in range(y0, y1 + 1):
            py = iy + 0.5
            for ix in range(x0, x1 + 1):
                px = ix + 0.5
                e_bc = (uc - ub) * (py - vb) - (vc - vb) * (px - ub)
                e_ca = (ua - uc) * (py - vc) - (va - vc) * (px - uc)
                e_ab = (ub - ua) * (py - va) - (vb - va) * (px - ua)
                if sgn * e_bc < 0.0 or sgn * e_ca < 0.0 or sgn * e_ab < 0.0:
                    continue
                la = e_bc / area2
                lb = e_ca / area2
                lc = e_ab / area2
                zinv = la * inv_a + lb * inv_b + lc * inv_c
                pz = 1.0 / zinv
                if pz < depth[iy, ix]:
                    depth[iy, ix] = pz
                    label[iy, ix] = code
                    tri[iy, ix] = tri_offset + fi


def object_visible_mask(buf: DepthBuffer) -> MaskImage:
    """Binary mask of object pixels not occluded by the hand (255 = object)."""
    pixels = np.where(buf.label == LABEL_OBJECT, 255, 0).astype(np.uint8)
    return MaskImage(view=buf.view, pixels=pixels)


def mask_boundary(mask: MaskImage) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour, as (x, y) rows.

    The image border counts as background. Rows are in row-major scan order.
    """
    fg = mask.pixels > 0
    padded = np.zeros((fg.shape[0] + 2, fg.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = fg
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    ys, xs = np.nonzero(fg & ~interior)
    return np.stack([xs, ys], axis=1).astype(np.int64)


def boundary_normals(mask: MaskImage, boundary: np.ndarray) -> np.ndarray:
    """Outward unit 2D normals at boundary pixels, from background 8-neighbour offsets."""
    fg = mask.pixels > 0
    padded = np.zeros((fg.shape[0] + 2, fg.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = fg
    normals = np.zeros((len(boundary), 2))
    offsets = [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dx, dy) != (0, 0)]
    for i, (x, y) in enumerate(boundary):
        nx = ny = 0.0
        for dx, dy in offsets:
            if not padded[y + dy + 1, x + dx + 1]:
                nx += dx
                ny += dy
        norm = np.hypot(nx, ny)
        if norm > 0:
            normals[i, 0] = nx / norm
            normals[i, 1] = ny / norm
    return normals


def dump_label_pgm(path: str, buf: DepthBuffer) -> None:
    """Debug dump of the label plane: empty 0, hand 128, object 255."""
    gray = np.zeros_like(buf.label)
    gray[buf.label == LABEL_HAND] = 128
    gray[buf.label == LABEL_OBJECT] = 255
    with open(path, "wb") as f:
        f.write(f"P5\n{buf.width} {buf.height}\n255\n".encode("ascii"))
        f.write(gray.tobytes())
