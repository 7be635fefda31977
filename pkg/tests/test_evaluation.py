import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from pbf_recon import evaluation as E
from pbf_recon import synth
from pbf_recon.errors import ConfigError, DataError, DegenerateInputError, IncompatibleGridError
from pbf_recon.geometry import grid_to_cloud
from pbf_recon.trace_io import PointCloud, TriangleMesh, load_stl, write_stl

from oracles import brute_compare


def unit_cube():
    return synth.voxel_surface_mesh(synth.box_model(1, 1, 1)).triangles + 0.5


def hull_mesh(points):
    h = ConvexHull(points)
    return TriangleMesh(points[h.simplices]), h.equations


def grid_of(dims, cells):
    return E.OccupancyGrid(dims, (0, 0, 0), 1.0, np.array(sorted(cells), dtype=np.int64).reshape(-1, 3))


cell_sets = st.integers(1, 6).flatmap(
    lambda n: st.sets(st.tuples(*[st.integers(0, n - 1)] * 3), max_size=n**3).map(lambda s: (n, s))
)


# -- voxelisation --------------------------------------------------------


@pytest.mark.parametrize("cell,count", [(0.25, 64), (0.5, 8), (1.0, 1)])
def test_unit_cube(cell, count):
    g = E.voxelize_mesh(TriangleMesh(unit_cube()), cell)
    assert len(g) == count
    assert g.dims == (round(1 / cell),) * 3


def test_unit_cube_from_stl(tmp_path):
    path = tmp_path / "cube.stl"
    write_stl(TriangleMesh(unit_cube()), path)
    assert len(E.voxelize_mesh(load_stl(path), 0.25)) == 64


def test_padding_shifts_indices():
    a = E.voxelize_mesh(TriangleMesh(unit_cube()), 0.5)
    b = E.voxelize_mesh(TriangleMesh(unit_cube()), 0.5, padding=2)
    assert b.dims == (6, 6, 6)
    np.testing.assert_array_equal(b.occupied, a.occupied + 2)
    np.testing.assert_allclose(b.centers(), a.centers())


@pytest.mark.parametrize(
    "model",
    [
        synth.box_model(3, 2, 4),
        synth.gear_model(8, 20, 5, 3, 6),
        synth.astm_bar_model(40, 10, 6, 10, 4, 0.4),
    ],
    ids=["box", "gear", "bar"],
)
def test_voxel_surface_round_trip(model):
    # cell centres of the model are inside; its faces only touch the neighbours
    g = E.voxelize_mesh(synth.voxel_surface_mesh(model), 1.0)
    ref = E.occupancy_from_voxels(model)
    assert set(map(tuple, np.rint(g.centers()).astype(int).tolist())) == set(
        map(tuple, np.rint(ref.centers()).astype(int).tolist())
    )


def test_surface_mesh_is_closed_and_outward():
    model = synth.gear_model(8, 20, 5, 3, 6)
    t = synth.voxel_surface_mesh(model).triangles
    signed = np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])).sum() / 6
    assert signed == pytest.approx(len(model))


@given(st.integers(0, 2**31 - 1), st.sampled_from([0.3, 0.5, 0.7]))
def test_convex_hull_against_halfspaces(seed, cell):
    rng = np.random.default_rng(seed)
    mesh, eq = hull_mesh(rng.uniform(-2, 2, size=(12, 3)))
    g = E.voxelize_mesh(mesh, cell)
    idx = np.argwhere(np.ones(g.dims, dtype=bool))
    centers = g.origin + (idx + 0.5) * cell
    corners = np.array(list(itertools.product((-0.5, 0.5), repeat=3))) * cell
    signed = centers @ eq[:, :3].T + eq[:, 3]
    inside = (signed < -1e-6).all(axis=1)
    reach = np.abs(corners @ eq[:, :3].T).max(axis=0)
    outside = (signed > reach + 1e-6).any(axis=1)
    occ = np.zeros(g.dims, dtype=bool)
    occ[tuple(g.occupied.T)] = True
    assert occ[tuple(idx[inside].T)].all()
    assert not occ[tuple(idx[outside].T)].any()


@given(st.integers(0, 2**31 - 1))
def test_voxel_count_monotone_in_cell_size(seed):
    rng = np.random.default_rng(seed)
    mesh, _ = hull_mesh(rng.uniform(-2, 2, size=(10, 3)))
    counts = [len(E.voxelize_mesh(mesh, c)) for c in (0.2, 0.4, 0.8)]
    assert counts[0] >= counts[1] >= counts[2]


def test_open_mesh_surface_only():
    tris = unit_cube()[:-2]  # drop one face
    with pytest.warns(UserWarning, match="watertight"):
        g = E.voxelize_mesh(TriangleMesh(tris), 0.3)
    # on a 0.3 grid the faces at 0 lie on cell boundaries (touching is not
    # counted) and each face at 1 cuts through the last slab of 4x4 cells
    expected = set()
    for tri in tris:
        axis = int(np.flatnonzero(np.ptp(tri, axis=0) == 0)[0])
        if tri[0, axis] == 1:
            for i, j in itertools.product(range(4), repeat=2):
                cell = [i, j]
                cell.insert(axis, 3)
                expected.add(tuple(cell))
    assert set(map(tuple, g.occupied.tolist())) == expected
    assert len(expected) < len(E.voxelize_mesh(TriangleMesh(unit_cube()), 0.3))


def test_degenerate_triangles_skipped():
    tris = np.concatenate([unit_cube(), np.zeros((1, 3, 3))])
    with pytest.warns(UserWarning, match="degenerate"):
        assert len(E.voxelize_mesh(TriangleMesh(tris), 0.5)) == 8
    with pytest.raises(ConfigError):
        E.voxelize_mesh(TriangleMesh(unit_cube()), 0)


# -- alignment -----------------------------------------------------------


def test_align_identity():
    ref = E.voxelize_mesh(synth.voxel_surface_mesh(synth.cylinder_model(12, 5)), 1.0)
    cloud = PointCloud(ref.centers())
    for rule in E.SCALE_RULES:
        out = E.align_and_scale(cloud, ref, rule)
        np.testing.assert_allclose(out.xyz, cloud.xyz, atol=1e-9)


def test_align_recovers_half_scale():
    ref = E.voxelize_mesh(synth.voxel_surface_mesh(synth.box_model(6, 3, 4)), 1.0)
    doubled = PointCloud(ref.centers() * 2 + [7, -3, 11])
    s = E.estimate_scale(doubled, ref, "astm_mean_axis")
    np.testing.assert_allclose(s, 0.5, atol=1e-6)
    out = E.align_and_scale(doubled, ref, "astm_mean_axis")
    np.testing.assert_allclose(out.xyz, ref.centers(), atol=1e-9)


def test_explicit_scale_and_errors():
    ref = E.voxelize_mesh(TriangleMesh(unit_cube()), 0.25)
    cloud = PointCloud(ref.centers())
    np.testing.assert_array_equal(E.estimate_scale(cloud, ref, (1, 2, 3)), [1, 2, 3])
    with pytest.raises(ConfigError):
        E.estimate_scale(cloud, ref, (1, 0, 1))
    with pytest.raises(ConfigError):
        E.estimate_scale(cloud, ref, "nearest")
    with pytest.raises(DegenerateInputError):
        E.align_and_scale(PointCloud([[0, 0, 0], [0, 0, 1]]), ref, "gear_base_diameter")
    with pytest.raises(DataError):
        E.align_and_scale(PointCloud(np.empty((0, 3))), ref)


def test_simulated_alignment_residual():
    model = synth.cylinder_model(16, 6)
    cfg = synth.SimConfig(noise_sigma_volts=0.01)
    trace, truth = synth.simulate_print_trace(model, cfg, seed=2)
    from pbf_recon.rasterizer import rasterize_layers
    from pbf_recon.segmentation import segment_layers
    from pbf_recon.signal_prep import normalize_laser

    on = normalize_laser(trace.laser)
    g = rasterize_layers(on, trace.galvo_x, trace.galvo_y, segment_layers(on), cfg.raster_size_volts)
    ref = E.voxelize_mesh(synth.voxel_surface_mesh(truth), 1.0, padding=2)
    out = E.align_and_scale(grid_to_cloud(g), ref, "gear_base_diameter")
    residual = np.linalg.norm(out.xyz.mean(axis=0) - ref.centers().mean(axis=0))
    assert residual < 0.5 * ref.cell_size


def test_refine_translation_finds_shift():
    ref = E.occupancy_from_voxels(synth.box_model(4, 4, 4), padding=3)
    cloud = PointCloud(ref.centers() + [1.0, -1.0, 0.0])
    fixed = E.refine_translation(cloud, ref, search_cells=2, step=1.0)
    assert E.compare_voxels(ref, E.revoxelize_cloud(fixed, ref)).report.true_pos == len(ref)


# -- revoxelisation ------------------------------------------------------


def test_revoxelize_examples():
    t = E.OccupancyGrid((4, 4, 4), (0, 0, 0), 0.5)
    g = E.revoxelize_cloud(PointCloud([[0.75, 0.25, 1.25]]), t)
    assert g.occupied.tolist() == [[1, 0, 2]]
    assert len(E.revoxelize_cloud(PointCloud(np.empty((0, 3))), t)) == 0
    out = E.revoxelize_cloud(PointCloud([[5.0, 0, 0], [0.1, 0.1, 0.1]]), t)
    assert out.out_of_bounds == 1 and len(out) == 1


@given(st.integers(0, 2**31 - 1), st.integers(0, 200))
def test_revoxelize_pigeonhole(seed, n):
    rng = np.random.default_rng(seed)
    t = E.OccupancyGrid((5, 6, 7), (-1, -1, -1), 0.4)
    pts = rng.uniform(-1.5, 2.5, size=(n, 3))
    g = E.revoxelize_cloud(PointCloud(pts), t)
    assert len(g) + g.out_of_bounds <= n
    assert len(g) <= n - g.out_of_bounds
    assert g.same_lattice(t)


# -- comparison ----------------------------------------------------------


def test_identical_grids():
    g = grid_of((3, 3, 3), {(0, 0, 0), (1, 2, 1), (2, 2, 2)})
    r = E.compare_voxels(g, g).report
    assert (r.true_pos, r.false_pos, r.false_neg) == (3, 0, 0)
    assert r.percentages == (100.0, 0.0, 0.0)


@given(cell_sets, cell_sets)
def test_compare_matches_brute_force(a, b):
    n = max(a[0], b[0])
    ref_cells, rec_cells = a[1], b[1]
    if not ref_cells:
        ref_cells = {(0, 0, 0)}
    cmp = E.compare_voxels(grid_of((n,) * 3, ref_cells), grid_of((n,) * 3, rec_cells))
    r = cmp.report
    assert (r.true_pos, r.false_pos, r.false_neg) == brute_compare(ref_cells, rec_cells, (n,) * 3)
    assert r.true_pos + r.false_neg == len(ref_cells)
    assert (len(cmp.true_pos), len(cmp.false_pos), len(cmp.false_neg)) == (r.true_pos, r.false_pos, r.false_neg)


def test_compare_brute_force_16():
    rng = np.random.default_rng(7)
    ref_cells = {tuple(c) for c in np.argwhere(rng.random((16, 16, 16)) < 0.3).tolist()}
    rec_cells = {tuple(c) for c in np.argwhere(rng.random((16, 16, 16)) < 0.3).tolist()}
    r = E.compare_voxels(grid_of((16,) * 3, ref_cells), grid_of((16,) * 3, rec_cells)).report
    assert (r.true_pos, r.false_pos, r.false_neg) == brute_compare(ref_cells, rec_cells, (16,) * 3)


@given(cell_sets, cell_sets)
def test_swap_exchanges_fp_fn(a, b):
    n = max(a[0], b[0])
    x, y = a[1] | {(0, 0, 0)}, b[1] | {(0, 0, 0)}
    ab = E.compare_voxels(grid_of((n,) * 3, x), grid_of((n,) * 3, y)).report
    ba = E.compare_voxels(grid_of((n,) * 3, y), grid_of((n,) * 3, x)).report
    assert (ab.false_pos, ab.false_neg, ab.true_pos) == (ba.false_neg, ba.false_pos, ba.true_pos)


def test_classification_clouds_at_centres():
    ref = E.OccupancyGrid((2, 2, 2), (10, 0, 0), 0.5, [[0, 0, 0], [1, 1, 1]])
    rec = ref.with_occupied([[1, 1, 1], [0, 1, 0]])
    cmp = E.compare_voxels(ref, rec)
    assert cmp.true_pos.xyz.tolist() == [[10.75, 0.75, 0.75]]
    assert cmp.false_neg.xyz.tolist() == [[10.25, 0.25, 0.25]]
    assert cmp.false_pos.xyz.tolist() == [[10.25, 0.75, 0.25]]


def test_grid_mismatch():
    a = E.OccupancyGrid((2, 2, 2), (0, 0, 0), 1.0, [[0, 0, 0]])
    with pytest.raises(IncompatibleGridError):
        E.compare_voxels(a, E.OccupancyGrid((2, 2, 2), (0, 0, 0), 0.5, [[0, 0, 0]]))
    with pytest.raises(IncompatibleGridError):
        E.compare_voxels(a, E.OccupancyGrid((2, 2, 3), (0, 0, 0), 1.0))


@pytest.mark.parametrize(
    "counts,expected",
    [
        ((267266, 108901, 28752), (90.29, 36.79, 9.71)),
        ((214289, 18602, 50757), (80.85, 7.02, 19.15)),
    ],
    ids=["gear", "astm_diff"],
)
def test_published_percentages(counts, expected):
    r = E.EvaluationReport.from_counts(*counts)
    assert r.reference_count == counts[0] + counts[2]
    for got, want in zip(r.percentages, expected):
        assert got == pytest.approx(want, abs=0.01)
    # independent arithmetic
    assert r.percent_false_pos == pytest.approx(100 * counts[1] / r.reference_count, abs=1e-9)


def test_report_invariants():
    with pytest.raises(DataError):
        E.EvaluationReport(3, 0, 1, 5)
    with pytest.raises(DataError):
        E.EvaluationReport(0, 2, 0, 0)
    doc = E.EvaluationReport.from_counts(3, 1, 1).to_json()
    assert doc["percent_true_pos"] == 75.0 and doc["reference_count"] == 4


def test_occupancy_grid_rejects_out_of_range():
    with pytest.raises(DataError):
        E.OccupancyGrid((2, 2, 2), (0, 0, 0), 1.0, [[2, 0, 0]])
    with pytest.raises(ConfigError):
        E.OccupancyGrid((0, 2, 2), (0, 0, 0), 1.0)
