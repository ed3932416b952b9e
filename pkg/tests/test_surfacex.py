import numpy as np
import pytest

from tetshape import surfacex as sx
from tetshape.evalkit import chamfer, make_sphere
from tetshape.shapefields import TriMesh, encode_shape
from tetshape.tetgrid import build_base_grid, build_hierarchy
from tetshape.meshio import read_obj


@pytest.fixture(scope="module")
def sphere_setup():
    hierarchy = build_hierarchy(3, 2)
    mesh = make_sphere(0.4, 3).transformed(1.0, (0.5, 0.5, 0.5))
    fields = encode_shape(mesh, hierarchy)
    return hierarchy, mesh, fields


class TestExtractSurface:
    def test_single_occupied_tet(self):
        grid = build_base_grid(2)
        occ = np.zeros(grid.num_tets)
        occ[13] = 1
        surf = sx.extract_surface(grid, occ)
        assert surf.num_faces == 4
        assert surf.num_vertices == 4
        # outward orientation: normals point away from the tet centroid
        tri = surf.vertices[surf.faces]
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        outward = np.einsum(
            "fd,fd->f", normals, tri.mean(axis=1) - grid.centroids[13]
        )
        assert (outward > 0).all()

    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_fully_occupied_gives_cube_boundary(self, m):
        grid = build_base_grid(m)
        surf = sx.extract_surface(grid, np.ones(grid.num_tets))
        assert surf.num_faces == 12 * m * m  # brute-face census: 2 per cube facet
        assert sx.is_closed(surf)
        assert sx.euler_characteristic(surf) == 2
        # oracle: every face lies on the cube boundary
        tri = surf.vertices[surf.faces]
        on_wall = np.isclose(tri, 0.0) | np.isclose(tri, 1.0)
        assert on_wall.any(axis=2).all(axis=1).all()

    def test_empty_occupancy(self):
        grid = build_base_grid(1)
        surf = sx.extract_surface(grid, np.zeros(6))
        assert surf.is_empty

    def test_sphere_topology(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        surf = sx.extract_surface(hierarchy.finest, fields.occupancy_bits())
        assert sx.euler_characteristic(surf) == 2
        assert sx.is_closed(surf)

    def test_deterministic_and_idempotent(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        bits = sx.threshold_occupancy(fields.occupancy)
        again = sx.threshold_occupancy(bits.astype(float))
        assert np.array_equal(bits, again)
        a = sx.extract_surface(hierarchy.finest, bits)
        b = sx.extract_surface(hierarchy.finest, bits)
        assert np.array_equal(a.faces, b.faces)
        assert np.array_equal(a.vertex_map, b.vertex_map)

    def test_every_face_separates(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        grid = hierarchy.finest
        bits = fields.occupancy_bits().astype(bool)
        surf = sx.extract_surface(grid, bits)
        # each extracted face must be a face of exactly one occupied tet side
        from tetshape.tetgrid import LOCAL_FACES, NONE

        occ_faces = set()
        for k in np.flatnonzero(bits):
            for s in range(4):
                j = grid.neighbors[k, s]
                if j == NONE or not bits[j]:
                    occ_faces.add(tuple(sorted(grid.tets[k, LOCAL_FACES[s]])))
        got = {tuple(sorted(surf.vertex_map[f])) for f in surf.faces}
        assert got == occ_faces

    def test_occupancy_length_mismatch(self):
        grid = build_base_grid(1)
        with pytest.raises(ValueError):
            sx.extract_surface(grid, np.zeros(5))


class TestThreshold:
    def test_above(self):
        assert sx.threshold_occupancy(np.array([0.9]), 0.5)[0] == 1

    def test_exactly_at_tau_is_out(self):
        assert sx.threshold_occupancy(np.array([0.5]), 0.5)[0] == 0

    def test_monotone_in_tau(self, rng):
        p = rng.uniform(size=200)
        taus = [0.1, 0.3, 0.5, 0.7]
        prev = sx.threshold_occupancy(p, taus[0])
        for tau in taus[1:]:
            cur = sx.threshold_occupancy(p, tau)
            assert not (cur > prev).any()  # raising tau never adds occupancy
            prev = cur


class TestDeformationFilter:
    def test_no_outliers_unchanged(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        grid = hierarchy.finest
        mu = sx.compute_mu([fields], grid)
        out = sx.deformation_filter(grid, fields.occupancy_bits(),
                                    fields.tet_deformation, mu, gamma=4.0)
        assert np.array_equal(out, fields.occupancy_bits())

    def test_injected_outlier_removed(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        grid = hierarchy.finest
        occ = fields.occupancy_bits()
        mu = sx.compute_mu([fields], grid)
        surface = np.flatnonzero(sx.surface_tet_mask(grid, occ))
        victim = int(surface[3])
        tdef = fields.tet_deformation.copy()
        tdef[victim] = [10 * 4.0 * mu, 0.0, 0.0]
        out = sx.deformation_filter(grid, occ, tdef, mu, gamma=4.0)
        changed = np.flatnonzero(out != occ)
        assert changed.tolist() == [victim]

    def test_interior_tets_never_removed(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        grid = hierarchy.finest
        occ = fields.occupancy_bits()
        mu = sx.compute_mu([fields], grid)
        huge = np.full_like(fields.tet_deformation, 100.0)
        out = sx.deformation_filter(grid, occ, huge, mu, gamma=4.0)
        interior = sx.interior_tet_mask(grid, occ)
        assert (out[interior] == 1).all()

    def test_monotone_never_adds(self, sphere_setup, rng):
        hierarchy, _, fields = sphere_setup
        grid = hierarchy.finest
        occ = fields.occupancy_bits()
        tdef = rng.standard_normal(fields.tet_deformation.shape)
        out = sx.deformation_filter(grid, occ, tdef, mu=0.01, gamma=1.0)
        assert not (out > occ).any()

    def test_mu_must_be_positive(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        with pytest.raises(ValueError):
            sx.deformation_filter(hierarchy.finest, fields.occupancy_bits(),
                                  fields.tet_deformation, mu=0.0)


class TestComputeMu:
    def test_single_shape_constant_norms(self):
        grid = build_base_grid(2)
        occ = np.zeros(grid.num_tets)
        occ[:8] = 1
        from tetshape.shapefields import FieldSet

        d = np.zeros((grid.num_tets, 3))
        d[:, 0] = 0.25  # every tet deformation norm = 0.25
        fs = FieldSet(occ, d, np.zeros((grid.num_vertices, 3)))
        assert sx.compute_mu([fs], grid) == pytest.approx(0.25)

    def test_two_shapes_mean_of_means(self):
        grid = build_base_grid(2)
        from tetshape.shapefields import FieldSet

        occ = np.zeros(grid.num_tets)
        occ[:8] = 1
        mk = lambda val: FieldSet(
            occ, np.full((grid.num_tets, 3), 0.0) + [val, 0, 0],
            np.zeros((grid.num_vertices, 3)))
        assert sx.compute_mu([mk(0.1), mk(0.3)], grid) == pytest.approx(0.2)

    def test_sphere_mu_bounded_by_cell(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        mu = sx.compute_mu([fields], hierarchy.finest)
        # finest lattice spacing for m=3, N=2 is 1/6
        assert 0.0 < mu <= 0.5 * (1.0 / 6.0)

    def test_empty_dataset_rejected(self, sphere_setup):
        with pytest.raises(ValueError):
            sx.compute_mu([], sphere_setup[0].finest)


class TestApplyDeformation:
    def test_zero_is_identity(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        surf = sx.extract_surface(hierarchy.finest, fields.occupancy_bits())
        out = sx.apply_deformation(surf, np.zeros((hierarchy.finest.num_vertices, 3)))
        assert np.array_equal(out.vertices, surf.vertices)
        assert np.array_equal(out.faces, surf.faces)

    def test_constant_is_translation(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        surf = sx.extract_surface(hierarchy.finest, fields.occupancy_bits())
        u = np.array([0.1, -0.2, 0.05])
        d = np.tile(u, (hierarchy.finest.num_vertices, 1))
        out = sx.apply_deformation(surf, d)
        assert np.abs(out.vertices - surf.vertices - u).max() <= 1e-15

    def test_deformation_reduces_chamfer(self, sphere_setup):
        hierarchy, mesh, fields = sphere_setup
        surf = sx.extract_surface(hierarchy.finest, fields.occupancy_bits(),
                                  fields.vertex_deformation)
        jagged = chamfer(TriMesh(surf.vertices, surf.faces), mesh, 3000, 0)
        deformed = sx.apply_deformation(surf)
        snapped = chamfer(TriMesh(deformed.vertices, deformed.faces), mesh, 3000, 0)
        assert snapped < jagged


class TestSmoothing:
    def test_beta_one_identity(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        surf = sx.apply_deformation(
            sx.extract_surface(hierarchy.finest, fields.occupancy_bits(),
                               fields.vertex_deformation))
        out = sx.weighted_laplacian_smooth(surf, beta=1.0)
        assert np.array_equal(out.vertices, surf.vertices)

    def test_parallel_deformations_reduce_to_uniform(self, sphere_setup, rng):
        hierarchy, _, fields = sphere_setup
        surf = sx.extract_surface(hierarchy.finest, fields.occupancy_bits())
        u = np.array([0.0, 0.0, 1.0])
        surf.vertex_deformation = np.tile(u, (surf.num_vertices, 1)) \
            * rng.uniform(0.5, 2.0, size=(surf.num_vertices, 1))
        out = sx.weighted_laplacian_smooth(surf, beta=0.4)
        # oracle: classic umbrella operator
        ref = _umbrella(surf, 0.4)
        assert np.abs(out.vertices - ref).max() <= 1e-12

    def test_energy_strictly_decreases(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        surf = sx.apply_deformation(
            sx.extract_surface(hierarchy.finest, fields.occupancy_bits(),
                               fields.vertex_deformation))
        before = sx.laplacian_energy(surf)
        after = sx.laplacian_energy(sx.weighted_laplacian_smooth(surf, beta=0.5))
        assert after < before

    def test_beta_out_of_range(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        surf = sx.extract_surface(hierarchy.finest, fields.occupancy_bits(),
                                  fields.vertex_deformation)
        with pytest.raises(ValueError):
            sx.weighted_laplacian_smooth(surf, beta=1.5)

    def test_zero_deformations_fall_back_to_uniform(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        surf = sx.extract_surface(hierarchy.finest, fields.occupancy_bits())
        surf.vertex_deformation = np.zeros((surf.num_vertices, 3))
        out = sx.weighted_laplacian_smooth(surf, beta=0.5)
        ref = _umbrella(surf, 0.5)
        assert np.abs(out.vertices - ref).max() <= 1e-12

    def test_genus_preserved(self):
        hierarchy = build_hierarchy(5, 2)
        from tetshape.evalkit import make_torus

        mesh = make_torus(0.3, 0.13).transformed(1.0, (0.5, 0.5, 0.5))
        fields = encode_shape(mesh, hierarchy)
        surf = sx.extract_surface(hierarchy.finest, fields.occupancy_bits(),
                                  fields.vertex_deformation)
        assert sx.euler_characteristic(surf) == 0
        smoothed = sx.weighted_laplacian_smooth(sx.apply_deformation(surf), 0.5)
        assert sx.euler_characteristic(smoothed) == 0


def _umbrella(surface, beta):
    """Naive uniform-weight smoothing oracle."""
    verts = surface.vertices.copy()
    neighbors = [set() for _ in range(surface.num_vertices)]
    for a, b, c in surface.faces:
        neighbors[a] |= {b, c}
        neighbors[b] |= {a, c}
        neighbors[c] |= {a, b}
    out = verts.copy()
    for i, nbrs in enumerate(neighbors):
        if nbrs:
            avg = verts[sorted(nbrs)].mean(axis=0)
            out[i] = beta * verts[i] + (1 - beta) * avg
    return out


class TestExports:
    def test_obj_round_trip(self, sphere_setup, tmp_path):
        hierarchy, _, fields = sphere_setup
        surf = sx.extract_surface(hierarchy.finest, fields.occupancy_bits())
        p = tmp_path / "s.obj"
        sx.export_surface_obj(surf, p)
        v, f = read_obj(p)
        assert len(v) == surf.num_vertices
        assert len(f) == surf.num_faces

    def test_tet_export_positive_volumes(self, sphere_setup, tmp_path):
        hierarchy, _, fields = sphere_setup
        occ = fields.occupancy_bits()
        bad = sx.export_tet_mesh(hierarchy.finest, occ, tmp_path / "t.vtk",
                                 fields.vertex_deformation, ensure_positive=True)
        assert len(bad) == 0

    def test_tet_export_reports_violators(self, sphere_setup, tmp_path):
        hierarchy, _, fields = sphere_setup
        occ = fields.occupancy_bits()
        wild = fields.vertex_deformation * 50.0
        bad = sx.export_tet_mesh(hierarchy.finest, occ, tmp_path / "t.vtk", wild)
        assert len(bad) > 0

    def test_empty_occupancy_valid_file(self, tmp_path):
        grid = build_base_grid(1)
        bad = sx.export_tet_mesh(grid, np.zeros(6), tmp_path / "e.vtk")
        assert len(bad) == 0
        text = (tmp_path / "e.vtk").read_text()
        assert text.startswith("# vtk DataFile")
        sx.export_tet_mesh(grid, np.zeros(6), tmp_path / "e.mesh")
        assert "End" in (tmp_path / "e.mesh").read_text()

    def test_medit_format(self, sphere_setup, tmp_path):
        hierarchy, _, fields = sphere_setup
        sx.export_tet_mesh(hierarchy.finest, fields.occupancy_bits(),
                           tmp_path / "t.mesh", fields.vertex_deformation,
                           ensure_positive=True)
        text = (tmp_path / "t.mesh").read_text()
        assert "Tetrahedra" in text and "MeshVersionFormatted" in text


class TestInteriorAndVolume:
    def test_interior_tets_exist_for_solid_sphere(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        occ = fields.occupancy_bits()
        interior = sx.interior_tet_mask(hierarchy.finest, occ)
        surface = sx.surface_tet_mask(hierarchy.finest, occ)
        assert interior.sum() > 0
        assert surface.sum() > 0
        assert not (interior & surface).any()

    def test_enclosed_volume_close_to_analytic(self, sphere_setup):
        hierarchy, _, fields = sphere_setup
        surf = sx.extract_surface(hierarchy.finest, fields.occupancy_bits())
        vol = sx.enclosed_volume(surf)
        assert vol == pytest.approx(4.0 / 3.0 * np.pi * 0.4**3, rel=0.1)
