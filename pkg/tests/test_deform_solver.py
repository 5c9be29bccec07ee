import numpy as np
import pytest

from deformcap import synthgen
from deformcap.contact import ContactTargets, build_aabb, detect_penetrations, intersection_volume
from deformcap.deform_solver import (DeformConfig, SilhouetteCorrespondence,
                                     assemble_residuals, build_graph, energy,
                                     find_silhouette_correspondences,
                                     solve_deformation, warp)
from deformcap.object_pose import posed_mesh
from deformcap.rotations import axis_angle_to_matrix
from deformcap.scene_io import MaskImage

from oracles import finite_difference_jacobian, relative_jacobian_error


@pytest.fixture(scope="module")
def sphere_graph():
    mesh = synthgen.icosphere(100.0, 3)
    cfg = DeformConfig(node_spacing=50.0)
    return mesh, build_graph(mesh, cfg), cfg


class TestBuildGraph:
    def test_node_count_and_spacing(self, sphere_graph):
        mesh, graph, _ = sphere_graph
        assert 20 <= graph.n_nodes <= 60
        from deformcap.contact import geodesic_fields
        fields = geodesic_fields(mesh, list(graph.node_vertices))
        for i in range(graph.n_nodes):
            for j in range(i + 1, graph.n_nodes):
                assert fields[i, graph.node_vertices[j]] >= 50.0 - 1e-9

    def test_weights_normalized(self, sphere_graph):
        _, graph, _ = sphere_graph
        assert np.allclose(graph.vert_weights.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(graph.vert_weights >= -1e-12)

    def test_every_node_influences_a_vertex(self, sphere_graph):
        _, graph, _ = sphere_graph
        used = np.unique(graph.vert_nodes[graph.vert_weights > 1e-12])
        assert set(used.tolist()) == set(range(graph.n_nodes))

    def test_edges_nonempty_symmetric(self, sphere_graph):
        _, graph, _ = sphere_graph
        assert len(graph.edges)
        directed = graph.directed_pairs()
        pairs = {(int(a), int(b)) for a, b in directed}
        assert all((b, a) in pairs for a, b in pairs)

    def test_too_coarse_spacing_rejected(self):
        mesh = synthgen.icosphere(100.0, 1)
        with pytest.raises(ValueError, match="node_spacing"):
            build_graph(mesh, DeformConfig(node_spacing=1000.0))


class TestWarp:
    def test_identity_exact(self, sphere_graph):
        mesh, graph, _ = sphere_graph
        out = warp(graph, mesh)
        assert np.max(np.abs(out.vertices - mesh.vertices)) <= 1e-12

    def test_rigid_motion_closure(self, sphere_graph):
        mesh, graph, _ = sphere_graph
        rng = np.random.default_rng(3)
        R = axis_angle_to_matrix(rng.normal(0, 0.6, 3))
        t = rng.normal(0, 20.0, 3)
        graph2 = build_graph(mesh, DeformConfig(node_spacing=50.0))
        graph2.A = np.tile(R, (graph2.n_nodes, 1, 1))
        graph2.t = (graph2.nodes @ R.T + t) - graph2.nodes
        out = warp(graph2, mesh)
        expected = mesh.vertices @ R.T + t
        assert np.max(np.abs(out.vertices - expected)) < 1e-9

    def test_single_node_translation_linearity(self, sphere_graph):
        mesh, _, _ = sphere_graph
        graph = build_graph(mesh, DeformConfig(node_spacing=50.0))
        delta = np.array([5.0, 0.0, 0.0])
        graph.t[0] = delta
        out = warp(graph, mesh)
        disp = out.vertices - mesh.vertices
        for vi in range(len(mesh.vertices)):
            w = 0.0
            for k in range(graph.vert_nodes.shape[1]):
                if graph.vert_nodes[vi, k] == 0:
                    w += graph.vert_weights[vi, k]
            assert np.allclose(disp[vi], w * delta, atol=1e-12)


class TestEnergy:
    def test_all_zero_at_identity(self, sphere_graph):
        # The temporal sum accumulates one rounding ulp per vertex from the
        # weight blend, so "zero" means zero to well below any physical scale.
        mesh, graph, cfg = sphere_graph
        total, terms = energy(graph, mesh, cfg, prev_vertices=mesh.vertices.copy())
        assert total < 1e-9
        assert all(v < 1e-9 for v in terms.values())
        assert terms["rigid"] == 0.0 and terms["contact"] == 0.0

    def test_rigid_term_2I(self, sphere_graph):
        mesh, _, cfg = sphere_graph
        graph = build_graph(mesh, DeformConfig(node_spacing=50.0))
        graph.A[0] = 2.0 * np.eye(3)
        _, terms = energy(graph, mesh, cfg)
        assert terms["rigid"] == pytest.approx(27.0, abs=1e-12)

    def test_rigid_zero_on_rotations(self, sphere_graph):
        mesh, _, cfg = sphere_graph
        graph = build_graph(mesh, DeformConfig(node_spacing=50.0))
        rng = np.random.default_rng(4)
        for s in range(graph.n_nodes):
            graph.A[s] = axis_angle_to_matrix(rng.normal(0, 1.0, 3))
        _, terms = energy(graph, mesh, cfg)
        assert terms["rigid"] < 1e-20

    def test_rigid_positive_on_scaling(self, sphere_graph):
        mesh, _, cfg = sphere_graph
        graph = build_graph(mesh, DeformConfig(node_spacing=50.0))
        rng = np.random.default_rng(5)
        graph.A[3] = np.diag(rng.uniform(1.1, 1.6, 3))
        _, terms = energy(graph, mesh, cfg)
        assert terms["rigid"] > 1e-4

    def test_reg_two_node_hand_value(self, sphere_graph):
        # Node m translated by t, neighbors identity: every directed pair
        # touching m contributes its weight times ||t||, i.e. the asymmetric
        # sum over n in S(m) of [w(g_n, g_m) + w(g_m, g_n)] * ||t||.
        mesh, _, cfg = sphere_graph
        graph = build_graph(mesh, DeformConfig(node_spacing=50.0))
        t = np.array([3.0, -4.0, 12.0])   # norm 13
        m = 0
        graph.t[m] = t
        _, terms = energy(graph, mesh, cfg)
        directed = graph.directed_pairs()
        touching = (directed == m).any(axis=1)
        expected = float(graph.pair_weights[touching].sum()) * 13.0
        assert expected > 0
        assert terms["reg"] == pytest.approx(expected, rel=1e-12)

    def test_reg_zero_on_consistent_rigid(self, sphere_graph):
        mesh, _, cfg = sphere_graph
        graph = build_graph(mesh, DeformConfig(node_spacing=50.0))
        rng = np.random.default_rng(6)
        R = axis_angle_to_matrix(rng.normal(0, 0.7, 3))
        t = rng.normal(0, 15.0, 3)
        graph.A = np.tile(R, (graph.n_nodes, 1, 1))
        graph.t = (graph.nodes @ R.T + t) - graph.nodes
        _, terms = energy(graph, mesh, cfg)
        assert terms["reg"] < 1e-9

    def test_contact_term_value(self, sphere_graph):
        mesh, _, cfg = sphere_graph
        graph = build_graph(mesh, DeformConfig(node_spacing=50.0))
        targets = ContactTargets(mesh.vertices.copy(),
                                 np.zeros(len(mesh.vertices), dtype=bool))
        targets.affected[5] = True
        targets.targets[5] = mesh.vertices[5] + np.array([0.0, 0.0, -2.0])
        _, terms = energy(graph, mesh, cfg, contacts=targets)
        assert terms["contact"] == pytest.approx(2.0, abs=1e-12)


class TestJacobians:
    def test_all_terms_match_finite_differences(self, rig4):
        # Randomized small instance exercising every residual family at once.
        mesh = synthgen.icosphere(100.0, 2)
        cfg = DeformConfig(node_spacing=60.0)
        graph = build_graph(mesh, cfg)
        assert graph.n_nodes <= 30
        rng = np.random.default_rng(7)
        x0 = graph.params() + rng.normal(0, 0.05, 12 * graph.n_nodes)

        targets = ContactTargets(mesh.vertices.copy(),
                                 np.zeros(len(mesh.vertices), dtype=bool))
        for vi in rng.choice(len(mesh.vertices), 12, replace=False):
            targets.affected[vi] = True
            targets.targets[vi] = mesh.vertices[vi] + rng.normal(0, 2.0, 3)
        corr = [SilhouetteCorrespondence(int(v), int(rig4[v % 4].id),
                                         rig4[v % 4].project(
                                             mesh.vertices[v:v + 1])[0]
                                         + rng.normal(0, 2.0, 2), 1.0)
                for v in rng.choice(len(mesh.vertices), 10, replace=False)]
        prev = mesh.vertices + rng.normal(0, 0.5, mesh.vertices.shape)

        def residual_of(x):
            graph.set_params(x)
            return assemble_residuals(graph, mesh, cfg, targets, corr, rig4,
                                      prev, want_jacobian=False)

        graph.set_params(x0)
        r, J = assemble_residuals(graph, mesh, cfg, targets, corr, rig4, prev)
        J_fd = finite_difference_jacobian(residual_of, x0, step=1e-6)
        assert relative_jacobian_error(J.toarray(), J_fd) < 1e-4

    def test_squared_residuals_equal_energy_terms(self, sphere_graph):
        # For the square-form rigid term the residual sum of squares must
        # reproduce the reported value exactly.
        mesh, _, cfg0 = sphere_graph
        cfg = DeformConfig(node_spacing=50.0, lambda_rigid=1.0, lambda_reg=0.0,
                           lambda_contact=0.0, lambda_silhouette=0.0,
                           lambda_temporal=0.0)
        graph = build_graph(mesh, cfg)
        graph.A[0] = 2.0 * np.eye(3)
        r = assemble_residuals(graph, mesh, cfg, want_jacobian=False)
        _, terms = energy(graph, mesh, cfg)
        assert float(r @ r) == pytest.approx(terms["rigid"], rel=1e-12)


class TestCorrespondences:
    def test_self_match_distances_zero(self, press_scene):
        frame = press_scene.n_frames - 1
        obj = press_scene.object_mesh(frame)
        hand = press_scene.hand_mesh(frame)
        corr = find_silhouette_correspondences(obj, hand, press_scene.masks[frame],
                                               press_scene.cameras)
        assert len(corr) > 30
        assert max(c.distance_px for c in corr) == 0.0

    def test_dilated_mask_targets_outward(self, press_scene):
        frame = 0
        obj = press_scene.object_mesh(frame)
        hand = press_scene.hand_mesh(frame)
        dilated = [synthgen.dilate_mask(m, 3) for m in press_scene.masks[frame]]
        corr = find_silhouette_correspondences(obj, hand, dilated,
                                               press_scene.cameras)
        dists = [c.distance_px for c in corr]
        assert 2.0 < np.mean(dists) < 4.0

    def test_empty_observed_mask_no_matches(self, press_scene):
        frame = 0
        obj = press_scene.object_mesh(frame)
        hand = press_scene.hand_mesh(frame)
        empty = [MaskImage(m.view, np.zeros_like(m.pixels))
                 for m in press_scene.masks[frame]]
        assert find_silhouette_correspondences(obj, hand, empty,
                                               press_scene.cameras) == []

    def test_one_correspondence_per_vertex_view(self, press_scene):
        frame = press_scene.n_frames - 1
        obj = press_scene.object_mesh(frame)
        hand = press_scene.hand_mesh(frame)
        corr = find_silhouette_correspondences(obj, hand, press_scene.masks[frame],
                                               press_scene.cameras)
        keys = [(c.vertex, c.view) for c in corr]
        assert len(keys) == len(set(keys))


class TestSolve:
    def test_already_optimal_stays_identity(self, press_scene):
        # No contact at frame 0 clearance and masks rendered from the same
        # rigid pose: the solve must not drift.
        frame = 0
        obj = press_scene.object_mesh(frame)
        hand = press_scene.hand_mesh(frame)
        cfg = DeformConfig(node_spacing=45.0, outer_iterations=2,
                           inner_iterations=5)
        result = solve_deformation(obj, hand, press_scene.masks[frame],
                                   press_scene.cameras, cfg)
        drift = np.max(np.linalg.norm(result.mesh.vertices - obj.vertices, axis=1))
        assert drift < 1e-4

    def test_press_reduces_intersection_volume(self, press_scene):
        frame = press_scene.n_frames - 1
        obj = press_scene.object_mesh(frame)
        hand = press_scene.hand_mesh(frame)
        cfg = DeformConfig(node_spacing=45.0)
        before = intersection_volume(hand, obj, voxel_mm=1.0)
        result = solve_deformation(obj, hand, press_scene.masks[frame],
                                   press_scene.cameras, cfg)
        after = intersection_volume(hand, result.mesh, voxel_mm=1.0)
        assert before > 0.5
        assert after <= 0.3 * before

    def test_objective_non_increasing_between_accepted_steps(self, press_scene):
        frame = press_scene.n_frames - 1
        obj = press_scene.object_mesh(frame)
        hand = press_scene.hand_mesh(frame)
        cfg = DeformConfig(node_spacing=45.0, outer_iterations=1)
        result = solve_deformation(obj, hand, press_scene.masks[frame],
                                   press_scene.cameras, cfg)
        trace = result.objective_trace
        assert len(trace) >= 2
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))

    def test_deterministic(self, press_scene):
        frame = 3
        obj = press_scene.object_mesh(frame)
        hand = press_scene.hand_mesh(frame)
        cfg = DeformConfig(node_spacing=45.0, outer_iterations=2,
                           inner_iterations=4)
        a = solve_deformation(obj, hand, press_scene.masks[frame],
                              press_scene.cameras, cfg)
        b = solve_deformation(obj, hand, press_scene.masks[frame],
                              press_scene.cameras, cfg)
        assert np.array_equal(a.mesh.vertices, b.mesh.vertices)
