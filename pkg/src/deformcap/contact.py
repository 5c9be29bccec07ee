"""Hand-object interpenetration analysis and per-vertex deformation targets.

Penetration is decided by ray-parity point-in-mesh tests against the
watertight hand mesh, accelerated by an axis-aligned bounding box tree. Each
penetrating object vertex is paired with the nearest hand-surface point along
its normal line (closest surface point when the line misses), and the
deformation is diffused over the object surface with the impact factor
d * exp(-lambda_c * G), G the mesh geodesic distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

from .scene_io import TriMesh

logger = logging.getLogger(__name__)

IMPACT_CUTOFF = 0.02
DEFAULT_LAMBDA_C = 0.2

# Fixed fallback ray directions for parity tests that graze an edge or vertex.
_JITTER_DIRS = np.array([
    [1.0, 0.0, 0.0],
    [0.9950371902099892, 0.09950371902099892, 0.0],
    [0.9902680687415704, 0.0, 0.13870752962585338],
    [0.9310344827586207, -0.3103448275862069, 0.1896551724137931],
    [0.8164965809277261, 0.4082482904638631, 0.4082482904638631],
    [0.6396021490668313, -0.426401432711221, 0.6396021490668313],
    [0.5773502691896258, 0.5773502691896258, -0.5773502691896258],
])


@dataclass
class AabbTree:
    """Binary AABB hierarchy over mesh triangles (median split, leaf <= 4)."""

    box_min: np.ndarray    # (n_nodes, 3)
    box_max: np.ndarray    # (n_nodes, 3)
    left: np.ndarray       # (n_nodes,) child index, -1 at leaves
    right: np.ndarray
    start: np.ndarray      # (n_nodes,) leaf range into tri_order
    count: np.ndarray
    tri_order: np.ndarray  # (n_tris,) permutation of triangle indices
    tri_verts: np.ndarray  # (n_tris, 3, 3) triangle corners in original order


def build_aabb(mesh: TriMesh, leaf_size: int = 4) -> AabbTree:
    """Build the tree by recursive median split on the longest box axis."""
    if not len(mesh.faces):
        raise ValueError("build_aabb: empty mesh")
    tv = mesh.vertices[mesh.faces]                       # (m,3,3)
    lo = tv.min(axis=1)
    hi = tv.max(axis=1)
    centers = 0.5 * (lo + hi)

    box_min, box_max, left, right, start, count = [], [], [], [], [], []
    order: list[int] = []

    def rec(idx: np.ndarray) -> int:
        node = len(box_min)
        box_min.append(lo[idx].min(axis=0))
        box_max.append(hi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(-1)
        count.append(0)
        if len(idx) <= leaf_size:
            start[node] = len(order)
            count[node] = len(idx)
            order.extend(int(i) for i in idx)
            return node
        extent = box_max[node] - box_min[node]
        axis = int(np.argmax(extent))
        mid = len(idx) // 2
        part = idx[np.argsort(centers[idx, axis], kind="stable")]
        left[node] = rec(part[:mid])
        right[node] = rec(part[mid:])
        return node

    rec(np.arange(len(mesh.faces)))
    return AabbTree(box_min=np.array(box_min), box_max=np.array(box_max),
                    left=np.array(left, dtype=np.int64),
                    right=np.array(right, dtype=np.int64),
                    start=np.array(start, dtype=np.int64),
                    count=np.array(count, dtype=np.int64),
                    tri_order=np.array(order, dtype=np.int64),
                    tri_verts=np.ascontiguousarray(tv))


@njit(cache=True)
def _ray_tri(ox, oy, oz, dx, dy, dz, tv, fi):
    """Moller-Trumbore. Returns (t, hit, grazing); grazing hits need a retry."""
    ax, ay, az = tv[fi, 0, 0], tv[fi, 0, 1], tv[fi, 0, 2]
    e1x, e1y, e1z = tv[fi, 1, 0] - ax, tv[fi, 1, 1] - ay, tv[fi, 1, 2] - az
    e2x, e2y, e2z = tv[fi, 2, 0] - ax, tv[fi, 2, 1] - ay, tv[fi, 2, 2] - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    scale = abs(e1x) + abs(e1y) + abs(e1z) + abs(e2x) + abs(e2y) + abs(e2z)
    if abs(det) < 1e-12 * scale * scale:
        return 0.0, False, False
    inv = 1.0 / det
    tx, ty, tz = ox - ax, oy - ay, oz - az
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -1e-10 or u > 1.0 + 1e-10:
        return 0.0, False, False
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -1e-10 or u + v > 1.0 + 1e-10:
        return 0.0, False, False
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= 1e-9:
        return 0.0, False, False
    eps = 1e-7
    grazing = u < eps or v < eps or u + v > 1.0 - eps
    return t, True, grazing


@njit(cache=True)
def _slab_hit(ox, oy, oz, ix, iy, iz, bmin, bmax, node):
    tmin = -np.inf
    tmax = np.inf
    for a in range(3):
        o = ox if a == 0 else (oy if a == 1 else oz)
        inv = ix if a == 0 else (iy if a == 1 else iz)
        t0 = (bmin[node, a] - o) * inv
        t1 = (bmax[node, a] - o) * inv
        if inv < 0.0:
            t0, t1 = t1, t0
        if t0 > tmin:
            tmin = t0
        if t1 < tmax:
            tmax = t1
    return tmax >= tmin and tmax > 0.0


@njit(cache=True)
def _ray_parity(bmin, bmax, left, right, start, count, order, tv,
                ox, oy, oz, dx, dy, dz):
    """Count ray crossings; returns -1 when any hit grazes an edge or vertex."""
    ix = 1.0 / dx if dx != 0.0 else np.inf
    iy = 1.0 / dy if dy != 0.0 else np.inf
    iz = 1.0 / dz if dz != 0.0 else np.inf
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    crossings = 0
    while top > 0:
        top -= 1
        node = stack[top]
        if not _slab_hit(ox, oy, oz, ix, iy, iz, bmin, bmax, node):
            continue
        if left[node] < 0:
            for k in range(start[node], start[node] + count[node]):
                fi = order[k]
                t, hit, grazing = _ray_tri(ox, oy, oz, dx, dy, dz, tv, fi)
                if hit:
                    if grazing:
                        return -1
                    crossings += 1
        else:
            stack[top] = left[node]
            top += 1
            stack[top] = right[node]
            top += 1
    return crossings


@njit(cache=True)
def _ray_first_hit(bmin, bmax, left, right, start, count, order, tv,
                   ox, oy, oz, dx, dy, dz):
    """Nearest positive-t intersection. Returns (t, triangle index or -1)."""
    ix = 1.0 / dx if dx != 0.0 else np.inf
    iy = 1.0 / dy if dy != 0.0 else np.inf
    iz = 1.0 / dz if dz != 0.0 else np.inf
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    best_t = np.inf
    best_tri = -1
    while top > 0:
        top -= 1
        node = stack[top]
        if not _slab_hit(ox, oy, oz, ix, iy, iz, bmin, bmax, node):
            continue
        if left[node] < 0:
            for k in range(start[node], start[node] + count[node]):
                fi = order[k]
                t, hit, _ = _ray_tri(ox, oy, oz, dx, dy, dz, tv, fi)
                if hit and t < best_t:
                    best_t = t
                    best_tri = fi
        else:
            stack[top] = left[node]
            top += 1
            stack[top] = right[node]
            top += 1
    return best_t, best_tri


@njit(cache=True)
def _closest_point_all(tv, px, py, pz):
    """Closest point on any triangle (brute force over the mesh)."""
    best_d2 = np.inf
    bx = by = bz = 0.0
    best_tri = -1
    for fi in range(tv.shape[0]):
        ax, ay, az = tv[fi, 0, 0], tv[fi, 0, 1], tv[fi, 0, 2]
        bx_, by_, bz_ = tv[fi, 1, 0], tv[fi, 1, 1], tv[fi, 1, 2]
        cx, cy, cz = tv[fi, 2, 0], tv[fi, 2, 1], tv[fi, 2, 2]
        abx, aby, abz = bx_ - ax, by_ - ay, bz_ - az
        acx, acy, acz = cx - ax, cy - ay, cz - az
        apx, apy, apz = px - ax, py - ay, pz - az
        d1 = abx * apx + aby * apy + abz * apz
        d2 = acx * apx + acy * apy + acz * apz
        if d1 <= 0.0 and d2 <= 0.0:
            qx, qy, qz = ax, ay, az
        else:
            bpx, bpy, bpz = px - bx_, py - by_, pz - bz_
            d3 = abx * bpx + aby * bpy + abz * bpz
            d4 = acx * bpx + acy * bpy + acz * bpz
            if d3 >= 0.0 and d4 <= d3:
                qx, qy, qz = bx_, by_, bz_
            else:
                cpx, cpy, cpz = px - cx, py - cy, pz - cz
                d5 = abx * cpx + aby * cpy + abz * cpz
                d6 = acx * cpx + acy * cpy + acz * cpz
                if d6 >= 0.0 and d5 <= d6:
                    qx, qy, qz = cx, cy, cz
                else:
                    vc = d1 * d4 - d3 * d2
                    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                        w = d1 / (d1 - d3)
                        qx, qy, qz = ax + w * abx, ay + w * aby, az + w * abz
                    else:
                        vb = d5 * d2 - d1 * d6
                        if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                            w = d2 / (d2 - d6)
                            qx, qy, qz = ax + w * acx, ay + w * acy, az + w * acz
                        else:
                            va = d3 * d6 - d5 * d4
                            if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                                w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                                qx = bx_ + w * (cx - bx_)
                                qy = by_ + w * (cy - by_)
                                qz = bz_ + w * (cz - bz_)
                            else:
                                denom = 1.0 / (va + vb + vc)
                                v = vb * denom
                                w = vc * denom
                                qx = ax + abx * v + acx * w
                                qy = ay + aby * v + acy * w
                                qz = az + abz * v + acz * w
        dx, dy, dz = px - qx, py - qy, pz - qz
        d2q = dx * dx + dy * dy + dz * dz
        if d2q < best_d2:
            best_d2 = d2q
            bx, by, bz = qx, qy, qz
            best_tri = fi
    return best_d2, bx, by, bz, best_tri


def points_inside(tree: AabbTree, points: np.ndarray) -> np.ndarray:
    """Ray-parity inside test for each point, with jittered retries on grazing hits."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(points), dtype=bool)
    for i, p in enumerate(points):
        parity = -1
        for d in _JITTER_DIRS:
            parity = _ray_parity(tree.box_min, tree.box_max, tree.left, tree.right,
                                 tree.start, tree.count, tree.tri_order, tree.tri_verts,
                                 p[0], p[1], p[2], d[0], d[1], d[2])
            if parity >= 0:
                break
        if parity < 0:
            logger.warning("inside test: all jittered rays grazed at point %s; "
                           "treating as outside", p)
            parity = 0
        out[i] = parity % 2 == 1
    return out


def ray_first_hit(tree: AabbTree, origin: np.ndarray, direction: np.ndarray):
    """Nearest intersection along a ray: (t, triangle index) or (inf, -1)."""
    t, tri = _ray_first_hit(tree.box_min, tree.box_max, tree.left, tree.right,
                            tree.start, tree.count, tree.tri_order, tree.tri_verts,
                            origin[0], origin[1], origin[2],
                            direction[0], direction[1], direction[2])
    return t, tri


def closest_surface_point(tree: AabbTree, point: np.ndarray) -> np.ndarray:
    _, x, y, z, _ = _closest_point_all(tree.tri_verts, point[0], point[1], point[2])
    return np.array([x, y, z])


# ---------------------------------------------------------------------------
# Penetration detection
# ---------------------------------------------------------------------------

@dataclass
class PenetrationPair:
    """Penetrating object vertex and its matched hand-surface point."""

    object_vertex: int
    hand_point: np.ndarray   # (3,) mm
    depth: float             # mm, == |vertex - hand_point|

    def __post_init__(self):
        self.hand_point = np.asarray(self.hand_point, dtype=np.float64).reshape(3)


def detect_penetrations(obj: TriMesh, hand: TriMesh,
                        hand_tree: AabbTree | None = None) -> list[PenetrationPair]:
    """Find object vertices inside the hand and their hand-surface targets.

    The hand point is the nearest intersection of the vertex's normal line
    with the hand surface (either orientation: a press contact resolves to
    the surface it entered through, a deeply engulfed vertex to the surface
    ahead of it). When both directed rays miss, the closest hand-surface
    point is used instead.
    """
    bad = hand.boundary_edges()
    if bad:
        raise ValueError(f"hand mesh not watertight: {len(bad)} bad edges, "
                         f"e.g. {bad[:4]}")
    if hand_tree is None:
        hand_tree = build_aabb(hand)
    inside = points_inside(hand_tree, obj.vertices)
    normals = obj.normals
    pairs = []
    for vi in np.nonzero(inside)[0]:
        p = obj.vertices[vi]
        n = normals[vi]
        best_t = np.inf
        best_point = None
        for sign in (1.0, -1.0):
            t, tri = ray_first_hit(hand_tree, p, sign * n)
            if tri >= 0 and t < best_t:
                best_t = t
                best_point = p + sign * n * t
        if best_point is None:
            best_point = closest_surface_point(hand_tree, p)
        depth = float(np.linalg.norm(p - best_point))
        pairs.append(PenetrationPair(int(vi), best_point, depth))
    return pairs


# ---------------------------------------------------------------------------
# Geodesic distances
# ---------------------------------------------------------------------------

def geodesic_graph(mesh: TriMesh) -> sparse.csr_matrix:
    """Edge graph plus the cross diagonal of every adjacent-triangle pair."""
    v = mesh.vertices
    rows, cols, data = [], [], []

    def add(a, b):
        w = float(np.linalg.norm(v[a] - v[b]))
        rows.append(a)
        cols.append(b)
        data.append(w)

    opposite: dict[tuple[int, int], list[int]] = {}
    for a, b, c in mesh.faces:
        for u, w, o in ((a, b, c), (b, c, a), (c, a, b)):
            key = (min(u, w), max(u, w))
            opposite.setdefault(key, []).append(int(o))
    for (a, b), opp in opposite.items():
        add(a, b)
        if len(opp) == 2 and opp[0] != opp[1]:
            add(opp[0], opp[1])
    n = len(v)
    g = sparse.coo_matrix((data, (rows, cols)), shape=(n, n))
    return g.maximum(g.T).tocsr()


def geodesic_distances(mesh: TriMesh, sources: list[int]) -> np.ndarray:
    """Multi-source shortest distance over the augmented edge graph (mm)."""
    if not len(sources):
        raise ValueError("geodesic_distances: no sources")
    g = geodesic_graph(mesh)
    d = dijkstra(g, directed=False, indices=np.asarray(sources, dtype=np.int64),
                 min_only=True)
    if np.any(np.isinf(d)):
        logger.warning("geodesic field: %d vertices unreachable from sources",
                       int(np.count_nonzero(np.isinf(d))))
    return d


def geodesic_fields(mesh: TriMesh, sources: list[int]) -> np.ndarray:
    """Per-source distance fields, shape (len(sources), n_vertices)."""
    if not len(sources):
        raise ValueError("geodesic_fields: no sources")
    g = geodesic_graph(mesh)
    d = dijkstra(g, directed=False, indices=np.asarray(sources, dtype=np.int64))
    return np.atleast_2d(d)


# ---------------------------------------------------------------------------
# Contact targets
# ---------------------------------------------------------------------------

def impact_factor(depth, geodesic, lambda_c: float = DEFAULT_LAMBDA_C):
    """Contact influence d * exp(-lambda_c * G); callers zero values < 0.02."""
    return depth * np.exp(-lambda_c * np.asarray(geodesic, dtype=np.float64))


@dataclass
class ContactTargets:
    """Per-vertex deformation targets; unaffected vertices keep their position."""

    targets: np.ndarray        # (n,3) mm
    affected: np.ndarray       # (n,) bool


def compute_contact_targets(obj: TriMesh, pairs: list[PenetrationPair],
                            lambda_c: float = DEFAULT_LAMBDA_C,
                            cutoff: float = IMPACT_CUTOFF) -> ContactTargets:
    """Hard targets on penetrating vertices, diffused targets around them.

    A non-penetrating vertex v moves by the mean impact factor of the pairs
    whose influence at v is >= the cutoff, along -normal; with no such pair it
    stays put and is flagged unaffected.
    """
    if lambda_c <= 0:
        raise ValueError("lambda_c must be positive")
    n = len(obj.vertices)
    targets = obj.vertices.copy()
    affected = np.zeros(n, dtype=bool)
    if not pairs:
        return ContactTargets(targets, affected)

    src = [p.object_vertex for p in pairs]
    depths = np.array([p.depth for p in pairs])
    fields = geodesic_fields(obj, src)                     # (P, n)
    impact = impact_factor(depths[:, None], fields, lambda_c)
    impact[~np.isfinite(impact)] = 0.0
    influential = impact >= cutoff                         # (P, n)

    penetrating = np.zeros(n, dtype=bool)
    for p in pairs:
        penetrating[p.object_vertex] = True

    counts = influential.sum(axis=0)
    diffuse = (~penetrating) & (counts > 0)
    if np.any(diffuse):
        sums = np.where(influential, impact, 0.0).sum(axis=0)
        magnitude = sums[diffuse] / counts[diffuse]
        targets[diffuse] = obj.vertices[diffuse] - magnitude[:, None] * obj.normals[diffuse]
        affected[diffuse] = True
    for p in pairs:
        targets[p.object_vertex] = p.hand_point
        affected[p.object_vertex] = True
    return ContactTargets(targets, affected)


# ---------------------------------------------------------------------------
# Metrics on meshes
# ---------------------------------------------------------------------------

def intersection_volume(a: TriMesh, b: TriMesh, voxel_mm: float = 2.0) -> float:
    """Overlap volume in cm^3 by counting voxel centers inside both meshes."""
    if voxel_mm <= 0:
        raise ValueError("voxel_mm must be positive")
    for name, mesh in (("first", a), ("second", b)):
        if not mesh.is_watertight():
            raise ValueError(f"intersection_volume: {name} mesh is not watertight")
    lo = np.maximum(a.bounds()[0], b.bounds()[0])
    hi = np.minimum(a.bounds()[1], b.bounds()[1])
    if np.any(hi <= lo):
        return 0.0
    axes = [np.arange(lo[k] + voxel_mm / 2.0, hi[k], voxel_mm) for k in range(3)]
    if any(len(ax) == 0 for ax in axes):
        return 0.0
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    tree_a = build_aabb(a)
    in_a = points_inside(tree_a, pts)
    if not np.any(in_a):
        return 0.0
    tree_b = build_aabb(b)
    in_both = points_inside(tree_b, pts[in_a])
    return float(np.count_nonzero(in_both)) * voxel_mm ** 3 / 1000.0


def compute_contact_map(rigid: TriMesh, deformed: TriMesh) -> np.ndarray:
    """Per-vertex displacement magnitude (mm) between the rigid and deformed mesh."""
    if rigid.vertices.shape != deformed.vertices.shape \
            or not np.array_equal(rigid.faces, deformed.faces):
        raise ValueError("contact map: meshes do not share topology")
    return np.linalg.norm(deformed.vertices - rigid.vertices, axis=1)
