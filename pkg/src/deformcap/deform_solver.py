"""Embedded-deformation-graph non-rigid registration.

Graph nodes are farthest-point-sampled mesh vertices, each carrying a free
3x3 affine A_s and translation t_s. A mesh vertex deforms as the weighted
blend sum_s w(v, g_s) * [A_s (v - g_s) + g_s + t_s] over its K nearest nodes
(geodesic). The node transforms minimize a five-term energy: contact targets,
silhouette correspondences, temporal smoothness, soft rigidity of each A_s,
and consistency of adjacent node transforms. Minimization is damped
Gauss-Newton on squared residual blocks; contacts and correspondences are
re-detected against the current warped mesh at every outer iteration.

Reported term values use unsquared norms for the contact, silhouette,
temporal and consistency sums (the rigidity term is a sum of squares by
definition); the solver's step acceptance monitors the squared-residual
objective it actually minimizes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from . import rasterizer
from .contact import (AabbTree, ContactTargets, build_aabb, compute_contact_targets,
                      detect_penetrations, geodesic_graph,
                      DEFAULT_LAMBDA_C, IMPACT_CUTOFF)
from .rasterizer import LABEL_EMPTY, mask_boundary, boundary_normals, object_visible_mask
from .scene_io import CameraParams, MaskImage, TriMesh

logger = logging.getLogger(__name__)


@dataclass
class DeformConfig:
    lambda_contact: float = 5.0       # lambda_1
    lambda_silhouette: float = 5.0    # lambda_2
    lambda_temporal: float = 1.0      # lambda_3
    lambda_rigid: float = 1.0         # lambda_4
    lambda_reg: float = 2.0           # lambda_5
    node_spacing: float = 15.0        # mm, minimum geodesic node spacing
    n_neighbors: int = 4              # K nodes per vertex
    outer_iterations: int = 5
    inner_iterations: int = 10
    damping_init: float = 1e-4
    damping_max: float = 1e8
    gating_px: float = 20.0           # silhouette correspondence search radius
    lambda_c: float = DEFAULT_LAMBDA_C
    impact_cutoff: float = IMPACT_CUTOFF

    def validate(self) -> None:
        for name in ("lambda_contact", "lambda_silhouette", "lambda_temporal",
                     "lambda_rigid", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_neighbors < 2:
            raise ValueError("n_neighbors must be >= 2")
        if self.node_spacing <= 0:
            raise ValueError("node_spacing must be positive")


@dataclass
class DeformGraph:
    """Deformation graph over one mesh: nodes, transforms, bindings, node edges."""

    nodes: np.ndarray          # (S,3) node positions on the rigidly posed mesh
    node_vertices: np.ndarray  # (S,) source vertex index of each node
    A: np.ndarray              # (S,3,3) per-node affine
    t: np.ndarray              # (S,3) per-node translation, mm
    vert_nodes: np.ndarray     # (n,K) neighbor node ids per mesh vertex
    vert_weights: np.ndarray   # (n,K) blend weights, rows sum to 1
    edges: np.ndarray          # (E,2) unique undirected node pairs sharing a vertex
    pair_weights: np.ndarray   # (2E,) consistency weight per directed pair

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def params(self) -> np.ndarray:
        """Flat parameter vector, 12 per node: A row-major then t."""
        return np.concatenate([np.concatenate([self.A[s].ravel(), self.t[s]])
                               for s in range(self.n_nodes)])

    def set_params(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(self.n_nodes, 12)
        self.A = x[:, :9].reshape(-1, 3, 3).copy()
        self.t = x[:, 9:].copy()

    def directed_pairs(self) -> np.ndarray:
        """Both orientations of every node edge (the consistency sum is directed).

        Row i of pair_weights weighs directed_pairs()[i]: for pair (m, n) it
        is the deformation weight of node m evaluated at the point g_n, i.e.
        the same blend weight a mesh vertex at g_n would give node m (0 when m
        is not among that vertex's bound nodes). The two orientations of an
        edge therefore carry different weights in general.
        """
        if not len(self.edges):
            return np.zeros((0, 2), dtype=np.int64)
        return np.concatenate([self.edges, self.edges[:, ::-1]], axis=0)


def build_graph(mesh: TriMesh, cfg: DeformConfig | None = None) -> DeformGraph:
    """Farthest-point sample nodes and bind each vertex to its K nearest nodes.

    Sampling stops when no vertex is farther than cfg.node_spacing (geodesic)
    from the selected set, so the minimum pairwise node spacing is at least
    the configured value. Binding weights follow the embedded-deformation
    convention w = (1 - G(v, g_k) / G(v, g_{K+1}))^2, normalized per vertex.
    """
    cfg = cfg or DeformConfig()
    cfg.validate()
    mesh.validate_template()
    graph_csr = geodesic_graph(mesh)
    n = len(mesh.vertices)
    K = cfg.n_neighbors

    selected = [0]
    dist = dijkstra(graph_csr, directed=False, indices=0, min_only=True)
    while True:
        far = int(np.argmax(dist))
        if dist[far] < cfg.node_spacing or not np.isfinite(dist[far]):
            break
        selected.append(far)
        dist = np.minimum(dist, dijkstra(graph_csr, directed=False,
                                         indices=far, min_only=True))
    if len(selected) < K + 1:
        raise ValueError(
            f"only {len(selected)} nodes at spacing {cfg.node_spacing} mm; "
            f"need at least {K + 1}, reduce node_spacing")

    node_vertices = np.array(selected, dtype=np.int64)
    fields = dijkstra(graph_csr, directed=False, indices=node_vertices)   # (S,n)
    order = np.argsort(fields, axis=0, kind="stable")
    nearest = order[:K + 1, :]                                            # (K+1,n)
    d_near = np.take_along_axis(fields, nearest, axis=0)
    d_cut = d_near[K, :]                                                  # (n,)
    with np.errstate(invalid="ignore"):
        w = np.square(1.0 - d_near[:K, :] / d_cut)
    w[:, ~np.isfinite(d_cut)] = 1.0        # all K+1 unreachable-equal: uniform
    w = np.where(np.isfinite(w), w, 1.0)
    sums = w.sum(axis=0)
    flat = sums < 1e-12
    if np.any(flat):
        w[:, flat] = 1.0 / K
        sums[flat] = 1.0
    w /= sums

    vert_nodes = nearest[:K, :].T.astype(np.int64).copy()                 # (n,K)
    vert_weights = w.T.copy()

    pair_set = set()
    for row in vert_nodes:
        for i in range(K):
            for j in range(i + 1, K):
                a, b = int(row[i]), int(row[j])
                if a != b:
                    pair_set.add((min(a, b), max(a, b)))
    edges = np.array(sorted(pair_set), dtype=np.int64).reshape(-1, 2)

    def binding_weight(point_vertex: int, node: int) -> float:
        row = vert_nodes[point_vertex]
        hits = row == node
        return float(vert_weights[point_vertex][hits].sum()) if hits.any() else 0.0

    # Directed pair (m, n) is weighted by node m's deformation weight at g_n.
    fwd = [binding_weight(int(node_vertices[n]), int(m)) for m, n in edges]
    rev = [binding_weight(int(node_vertices[m]), int(n)) for m, n in edges]
    pair_weights = np.array(fwd + rev, dtype=np.float64)

    S = len(node_vertices)
    return DeformGraph(nodes=mesh.vertices[node_vertices].copy(),
                       node_vertices=node_vertices,
                       A=np.tile(np.eye(3), (S, 1, 1)),
                       t=np.zeros((S, 3)),
                       vert_nodes=vert_nodes,
                       vert_weights=vert_weights,
                       edges=edges,
                       pair_weights=pair_weights)


def warp(graph: DeformGraph, mesh: TriMesh) -> TriMesh:
    """Blend per-node affine transforms into new vertex positions."""
    return mesh.with_vertices(warp_vertices(graph, mesh.vertices))


def warp_vertices(graph: DeformGraph, vertices: np.ndarray) -> np.ndarray:
    g = graph.nodes[graph.vert_nodes]                     # (n,K,3)
    A = graph.A[graph.vert_nodes]                         # (n,K,3,3)
    t = graph.t[graph.vert_nodes]                         # (n,K,3)
    d = vertices[:, None, :] - g
    moved = np.einsum("nkab,nkb->nka", A, d) + g + t
    return np.einsum("nk,nka->na", graph.vert_weights, moved)


# ---------------------------------------------------------------------------
# Silhouette correspondences
# ---------------------------------------------------------------------------

@dataclass
class SilhouetteCorrespondence:
    """One (vertex, view) pull toward the observed object contour.

    ``pixel`` is the 2D target: the vertex's current projection shifted by
    the offset from its rendered contour pixel to the matched observed
    contour pixel, so the residual P_n(v) - pixel vanishes exactly when the
    rendered and observed contours already agree.
    """

    vertex: int
    view: int
    pixel: np.ndarray        # (2,) px target
    distance_px: float       # matched contour-pixel distance

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=np.float64).reshape(2)


def find_silhouette_correspondences(
        warped: TriMesh, hand: TriMesh | None, masks: list[MaskImage],
        cams: list[CameraParams], gating_px: float = 20.0) -> list[SilhouetteCorrespondence]:
    """Match rendered object-contour pixels to observed contour pixels.

    Occlusion boundaries (object pixels adjacent to hand pixels rather than to
    background) are skipped: they trace the hand silhouette, which the object
    must not be pulled toward. Matches require the outward contour normals to
    agree (cosine > 0) and lie within the gating radius; per (vertex, view)
    only the closest match is kept.
    """
    cam_by_id = {c.id: c for c in cams}
    best: dict[tuple[int, int], SilhouetteCorrespondence] = {}
    for mask in masks:
        cam = cam_by_id[mask.view]
        scene = [(warped, "object")] if hand is None else [(hand, "hand"), (warped, "object")]
        tri_offset = 0 if hand is None else len(hand.faces)
        buf = rasterizer.rasterize(scene, cam)
        rendered = object_visible_mask(buf)
        rb = mask_boundary(rendered)
        ob = mask_boundary(mask)
        if not len(rb) or not len(ob):
            continue
        rn = boundary_normals(rendered, rb)
        on = boundary_normals(mask, ob)
        keep = _true_silhouette(buf, rb)
        rb, rn = rb[keep], rn[keep]
        if not len(rb):
            continue
        tree = cKDTree(ob)
        proj = cam.project(warped.vertices)
        k = min(12, len(ob))
        dists, idxs = tree.query(rb, k=k, distance_upper_bound=gating_px)
        if k == 1:
            dists = dists[:, None]
            idxs = idxs[:, None]
        for i, (x, y) in enumerate(rb):
            tri = buf.tri[y, x] - tri_offset
            if tri < 0:
                continue
            match = -1
            match_d = np.inf
            for dd, jj in zip(dists[i], idxs[i]):
                if not np.isfinite(dd) or jj >= len(ob):
                    break
                if float(rn[i] @ on[jj]) > 0.0:
                    match = jj
                    match_d = float(dd)
                    break
            if match < 0:
                continue
            face = warped.faces[tri]
            p_rend = np.array([x + 0.5, y + 0.5])
            vertex = int(face[np.argmin(np.linalg.norm(proj[face] - p_rend, axis=1))])
            offset = (ob[match] - rb[i]).astype(np.float64)
            target = proj[vertex] + offset
            key = (vertex, mask.view)
            if key not in best or match_d < best[key].distance_px:
                best[key] = SilhouetteCorrespondence(vertex, mask.view, target, match_d)
    return [best[k] for k in sorted(best)]


def _true_silhouette(buf: rasterizer.DepthBuffer, boundary: np.ndarray) -> np.ndarray:
    """Keep contour pixels adjacent to empty background (image border included)."""
    lab = buf.label
    h, w = lab.shape
    keep = np.zeros(len(boundary), dtype=bool)
    for i, (x, y) in enumerate(boundary):
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = x + dx, y + dy
            if nx < 0 or ny < 0 or nx >= w or ny >= h or lab[ny, nx] == LABEL_EMPTY:
                keep[i] = True
                break
    return keep


# ---------------------------------------------------------------------------
# Residual assembly
# ---------------------------------------------------------------------------

class _Triplets:
    def __init__(self):
        self.rows = []
        self.cols = []
        self.vals = []

    def add(self, rows, cols, vals):
        self.rows.append(np.asarray(rows).ravel())
        self.cols.append(np.asarray(cols).ravel())
        self.vals.append(np.asarray(vals, dtype=np.float64).ravel())

    def matrix(self, shape):
        if not self.rows:
            return sparse.csr_matrix(shape)
        return sparse.coo_matrix(
            (np.concatenate(self.vals),
             (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=shape).tocsr()


def _warp_block_triplets(tri: _Triplets, graph: DeformGraph, vertices: np.ndarray,
                         idx: np.ndarray, row_base: np.ndarray, mix: np.ndarray | None,
                         scale: float) -> None:
    """Jacobian triplets of (mix @ warped_vertex) rows w.r.t. node parameters.

    idx: (p,) vertex ids; row_base: (p,) first row of each block; mix: (p,m,3)
    row-mixing matrices (None for identity, m = 3). Values are scaled by
    ``scale`` (the sqrt of the term weight).
    """
    K = graph.vert_nodes.shape[1]
    s = graph.vert_nodes[idx]                              # (p,K)
    w = graph.vert_weights[idx]                            # (p,K)
    diff = vertices[idx][:, None, :] - graph.nodes[s]      # (p,K,3)
    if mix is None:
        m = 3
        # A entries: row a, col (s, 3a+b), value w * diff_b
        rows = row_base[:, None, None, None] + np.arange(3)[None, None, :, None]
        rows = np.broadcast_to(rows, (len(idx), K, 3, 3))
        cols = (12 * s[:, :, None, None] + 3 * np.arange(3)[None, None, :, None]
                + np.arange(3)[None, None, None, :])
        vals = scale * w[:, :, None, None] * diff[:, :, None, :]
        tri.add(rows, cols, np.broadcast_to(vals, rows.shape))
        # t entries: row a, col (s, 9+a), value w
        rows_t = row_base[:, None, None] + np.arange(3)[None, None, :]
        rows_t = np.broadcast_to(rows_t, (len(idx), K, 3))
        cols_t = 12 * s[:, :, None] + 9 + np.arange(3)[None, None, :]
        vals_t = scale * np.broadcast_to(w[:, :, None], rows_t.shape)
        tri.add(rows_t, cols_t, vals_t)
    else:
        m = mix.shape[1]
        # d(mix @ v)/dA_s[c,b] = mix[:,c] * w * diff_b
        rows = row_base[:, None, None, None, None] + np.arange(m)[None, None, :, None, None]
        rows = np.broadcast_to(rows, (len(idx), K, m, 3, 3))
        cols = (12 * s[:, :, None, None, None]
                + 3 * np.arange(3)[None, None, None, :, None]
                + np.arange(3)[None, None, None, None, :])
        cols = np.broadcast_to(cols, rows.shape)
        vals = (scale * w[:, :, None, None, None]
                * mix[:, None, :, :, None] * diff[:, :, None, None, :])
        tri.add(rows, cols, vals)
        rows_t = row_base[:, None, None, None] + np.arange(m)[None, None, :, None]
        rows_t = np.broadcast_to(rows_t, (len(idx), K, m, 3))
        cols_t = 12 * s[:, :, None, None] + 9 + np.arange(3)[None, None, None, :]
        cols_t = np.broadcast_to(cols_t, rows_t.shape)
        vals_t = scale * w[:, :, None, None] * mix[:, None, :, :]
        tri.add(rows_t, cols_t, vals_t)


def assemble_residuals(graph: DeformGraph, mesh: TriMesh, cfg: DeformConfig,
                       contacts: ContactTargets | None = None,
                       correspondences: list[SilhouetteCorrespondence] | None = None,
                       cams: list[CameraParams] | None = None,
                       prev_vertices: np.ndarray | None = None,
                       want_jacobian: bool = True):
    """Weighted residual vector (and sparse Jacobian) of the full energy.

    Residual blocks are scaled by sqrt(lambda) so that ||r||^2 equals the
    solver objective. Row layout: contact, silhouette, temporal, rigidity,
    node consistency.
    """
    S = graph.n_nodes
    n_params = 12 * S
    warped = warp_vertices(graph, mesh.vertices)
    cam_by_id = {c.id: c for c in cams} if cams else {}

    parts = []
    tri = _Triplets() if want_jacobian else None
    row = 0

    if contacts is not None and cfg.lambda_contact > 0:
        idx = np.nonzero(contacts.affected)[0]
        if len(idx):
            sc = np.sqrt(cfg.lambda_contact)
            r = sc * (warped[idx] - contacts.targets[idx])
            parts.append(r.ravel())
            if want_jacobian:
                _warp_block_triplets(tri, graph, mesh.vertices, idx,
                                     row + 3 * np.arange(len(idx)), None, sc)
            row += 3 * len(idx)

    if correspondences and cfg.lambda_silhouette > 0:
        sc = np.sqrt(cfg.lambda_silhouette)
        idx = np.array([c.vertex for c in correspondences], dtype=np.int64)
        mixes = np.zeros((len(idx), 2, 3))
        res = np.zeros((len(idx), 2))
        for i, c in enumerate(correspondences):
            cam = cam_by_id[c.view]
            q = cam.K @ (cam.R @ warped[idx[i]] + cam.T)
            dproj = np.array([[1.0 / q[2], 0.0, -q[0] / q[2] ** 2],
                              [0.0, 1.0 / q[2], -q[1] / q[2] ** 2]])
            mixes[i] = dproj @ cam.K @ cam.R
            res[i] = q[:2] / q[2] - c.pixel
        parts.append(sc * res.ravel())
        if want_jacobian:
            _warp_block_triplets(tri, graph, mesh.vertices, idx,
                                 row + 2 * np.arange(len(idx)), mixes, sc)
        row += 2 * len(idx)

    if prev_vertices is not None and cfg.lambda_temporal > 0:
        sc = np.sqrt(cfg.lambda_temporal)
        idx = np.arange(len(mesh.vertices))
        parts.append(sc * (warped - prev_vertices).ravel())
        if want_jacobian:
            _warp_block_triplets(tri, graph, mesh.vertices, idx,
                                 row + 3 * idx, None, sc)
        row += 3 * len(idx)

    if cfg.lambda_rigid > 0:
        sc = np.sqrt(cfg.lambda_rigid)
        A = graph.A
        r = np.zeros((S, 6))
        r[:, 0] = np.einsum("si,si->s", A[:, :, 0], A[:, :, 1])
        r[:, 1] = np.einsum("si,si->s", A[:, :, 0], A[:, :, 2])
        r[:, 2] = np.einsum("si,si->s", A[:, :, 1], A[:, :, 2])
        for c in range(3):
            r[:, 3 + c] = 1.0 - np.einsum("si,si->s", A[:, :, c], A[:, :, c])
        parts.append(sc * r.ravel())
        if want_jacobian:
            pairs = ((0, 0, 1), (1, 0, 2), (2, 1, 2))
            for s_i in range(S):
                base = row + 6 * s_i
                for k, c1, c2 in pairs:
                    rows = np.full(6, base + k)
                    cols = np.concatenate([12 * s_i + 3 * np.arange(3) + c1,
                                           12 * s_i + 3 * np.arange(3) + c2])
                    vals = sc * np.concatenate([A[s_i, :, c2], A[s_i, :, c1]])
                    tri.add(rows, cols, vals)
                for c in range(3):
                    rows = np.full(3, base + 3 + c)
                    cols = 12 * s_i + 3 * np.arange(3) + c
                    vals = -2.0 * sc * A[s_i, :, c]
                    tri.add(rows, cols, vals)
        row += 6 * S

    pairs_mn = graph.directed_pairs()
    if len(pairs_mn) and cfg.lambda_reg > 0:
        sc = np.sqrt(cfg.lambda_reg * graph.pair_weights)        # (2E,) per pair
        m, nn = pairs_mn[:, 0], pairs_mn[:, 1]
        d = graph.nodes[nn] - graph.nodes[m]                     # (E,3)
        r = (graph.nodes[m] + graph.t[m]
             + np.einsum("eab,eb->ea", graph.A[m], d)
             - graph.nodes[nn] - graph.t[nn])
        parts.append((sc[:, None] * r).ravel())
        if want_jacobian:
            E = len(pairs_mn)
            base = row + 3 * np.arange(E)
            # dA_m: row a, col (m, 3a+b), value d_b
            rows = base[:, None, None] + np.arange(3)[None, :, None]
            rows = np.broadcast_to(rows, (E, 3, 3))
            cols = 12 * m[:, None, None] + 3 * np.arange(3)[None, :, None] \
                + np.arange(3)[None, None, :]
            vals = sc[:, None, None] * np.broadcast_to(d[:, None, :], rows.shape)
            tri.add(rows, cols, vals)
            # dt_m: +I, dt_n: -I
            rows_t = base[:, None] + np.arange(3)[None, :]
            for sgn, node in ((1.0, m), (-1.0, nn)):
                cols_t = 12 * node[:, None] + 9 + np.arange(3)[None, :]
                vals_t = sgn * np.broadcast_to(sc[:, None], rows_t.shape)
                tri.add(rows_t, cols_t, vals_t)
        row += 3 * len(pairs_mn)

    r_full = np.concatenate(parts) if parts else np.zeros(0)
    if want_jacobian:
        return r_full, tri.matrix((row, n_params))
    return r_full


def energy(graph: DeformGraph, mesh: TriMesh, cfg: DeformConfig,
           contacts: ContactTargets | None = None,
           correspondences: list[SilhouetteCorrespondence] | None = None,
           cams: list[CameraParams] | None = None,
           prev_vertices: np.ndarray | None = None) -> tuple[float, dict]:
    """Weighted total energy and unweighted per-term breakdown.

    Contact, silhouette, temporal and consistency terms are sums of Euclidean
    norms; the rigidity term is the column-orthogonality/unit-norm square sum.
    """
    warped = warp_vertices(graph, mesh.vertices)
    terms = {"contact": 0.0, "silhouette": 0.0, "temporal": 0.0,
             "rigid": 0.0, "reg": 0.0}
    if contacts is not None:
        idx = np.nonzero(contacts.affected)[0]
        if len(idx):
            terms["contact"] = float(
                np.linalg.norm(warped[idx] - contacts.targets[idx], axis=1).sum())
    if correspondences:
        cam_by_id = {c.id: c for c in cams}
        total = 0.0
        for c in correspondences:
            cam = cam_by_id[c.view]
            q = cam.K @ (cam.R @ warped[c.vertex] + cam.T)
            total += float(np.linalg.norm(q[:2] / q[2] - c.pixel))
        terms["silhouette"] = total
    if prev_vertices is not None:
        terms["temporal"] = float(np.linalg.norm(warped - prev_vertices, axis=1).sum())
    A = graph.A
    ortho = (np.einsum("si,si->s", A[:, :, 0], A[:, :, 1]) ** 2
             + np.einsum("si,si->s", A[:, :, 0], A[:, :, 2]) ** 2
             + np.einsum("si,si->s", A[:, :, 1], A[:, :, 2]) ** 2)
    unit = sum((1.0 - np.einsum("si,si->s", A[:, :, c], A[:, :, c])) ** 2
               for c in range(3))
    terms["rigid"] = float((ortho + unit).sum())
    pairs_mn = graph.directed_pairs()
    if len(pairs_mn):
        m, nn = pairs_mn[:, 0], pairs_mn[:, 1]
        d = graph.nodes[nn] - graph.nodes[m]
        r = (graph.nodes[m] + graph.t[m]
             + np.einsum("eab,eb->ea", graph.A[m], d)
             - graph.nodes[nn] - graph.t[nn])
        terms["reg"] = float((graph.pair_weights * np.linalg.norm(r, axis=1)).sum())
    total = (cfg.lambda_contact * terms["contact"]
             + cfg.lambda_silhouette * terms["silhouette"]
             + cfg.lambda_temporal * terms["temporal"]
             + cfg.lambda_rigid * terms["rigid"]
             + cfg.lambda_reg * terms["reg"])
    return total, terms


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

@dataclass
class DeformResult:
    mesh: TriMesh
    graph: DeformGraph
    outer_terms: list[dict] = field(default_factory=list)   # reported terms per outer
    objective_trace: list[float] = field(default_factory=list)  # accepted GN objectives


def _gauss_newton(graph: DeformGraph, mesh: TriMesh, cfg: DeformConfig,
                  contacts, correspondences, cams, prev_vertices,
                  trace: list[float]) -> None:
    x = graph.params()

    def system(params):
        graph.set_params(params)
        return assemble_residuals(graph, mesh, cfg, contacts, correspondences,
                                  cams, prev_vertices, want_jacobian=True)

    r, J = system(x)
    if not len(r):
        return
    best = float(r @ r)
    trace.append(best)
    mu = cfg.damping_init
    best_x = x.copy()

    for _ in range(cfg.inner_iterations):
        H = (J.T @ J).toarray()
        g = J.T @ r
        diag = np.maximum(np.diag(H), 1e-9)
        accepted = False
        while mu <= cfg.damping_max:
            try:
                step = np.linalg.solve(H + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            cand = x + step
            r_c, J_c = system(cand)
            obj = float(r_c @ r_c)
            if obj <= best:
                x, r, J = cand, r_c, J_c
                best = obj
                best_x = x.copy()
                mu = max(mu * 0.5, 1e-12)
                accepted = True
                trace.append(best)
                break
            mu *= 10.0
        if not accepted:
            logger.warning("deform solve: damping exceeded %.0e, keeping best iterate",
                           cfg.damping_max)
            break
        if np.linalg.norm(step) < 1e-12:
            break
    graph.set_params(best_x)


def solve_deformation(mesh_rigid: TriMesh, hand: TriMesh | None,
                      masks: list[MaskImage] | None, cams: list[CameraParams] | None,
                      cfg: DeformConfig | None = None,
                      prev_vertices: np.ndarray | None = None,
                      graph: DeformGraph | None = None,
                      hand_tree: AabbTree | None = None) -> DeformResult:
    """Outer re-detection loop around the damped Gauss-Newton inner solve.

    Each outer iteration recomputes penetrations, diffusion targets and
    silhouette correspondences against the current warped mesh, then runs the
    inner solve over all node parameters. The previous frame's deformed
    vertices (already carried through the current global transform) feed the
    temporal term; pass None on the first frame.
    """
    cfg = cfg or DeformConfig()
    cfg.validate()
    if graph is None:
        graph = build_graph(mesh_rigid, cfg)
    if hand is not None and hand_tree is None and cfg.lambda_contact > 0:
        hand_tree = build_aabb(hand)

    result = DeformResult(mesh=mesh_rigid, graph=graph)
    for outer in range(cfg.outer_iterations):
        warped = warp(graph, mesh_rigid)
        contacts = None
        if hand is not None and cfg.lambda_contact > 0:
            pairs = detect_penetrations(warped, hand, hand_tree)
            contacts = compute_contact_targets(warped, pairs, cfg.lambda_c,
                                               cfg.impact_cutoff)
        correspondences = None
        if masks and cams and cfg.lambda_silhouette > 0:
            correspondences = find_silhouette_correspondences(
                warped, hand, masks, cams, cfg.gating_px)
        _gauss_newton(graph, mesh_rigid, cfg, contacts, correspondences,
                      cams, prev_vertices, result.objective_trace)
        _, terms = energy(graph, mesh_rigid, cfg, contacts, correspondences,
                          cams, prev_vertices)
        result.outer_terms.append({"outer": outer, **terms})
    result.mesh = warp(graph, mesh_rigid)
    result.graph = graph
    return result
