import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pbf_recon import synth
from pbf_recon.errors import EmptyInputError, MalformedFileError, ParseError, SchemaError
from pbf_recon.trace_io import (
    PointCloud,
    SignalTrace,
    TraceSchema,
    TriangleMesh,
    load_point_cloud_csv,
    load_stl,
    load_trace_csv,
    write_point_cloud_csv,
    write_stl,
    write_trace_csv,
)

TETRA = np.array(
    [
        [[0, 0, 0], [1, 0, 0], [0, 1, 0]],
        [[0, 0, 0], [0, 0, 1], [1, 0, 0]],
        [[0, 0, 0], [0, 1, 0], [0, 0, 1]],
        [[1, 0, 0], [0, 0, 1], [0, 1, 0]],
    ],
    dtype=float,
)

TETRA_ASCII = """solid tet
facet normal 0 0 -1
  outer loop
    vertex 0 0 0
    vertex 1 0 0
    vertex 0 1 0
  endloop
endfacet
facet normal 0 -1 0
  outer loop
    vertex 0 0 0
    vertex 0 0 1
    vertex 1 0 0
  endloop
endfacet
facet normal -1 0 0
  outer loop
    vertex 0 0 0
    vertex 0 1 0
    vertex 0 0 1
  endloop
endfacet
facet normal 1 1 1
  outer loop
    vertex 1 0 0
    vertex 0 0 1
    vertex 0 1 0
  endloop
endfacet
endsolid tet
"""


def test_load_small_trace_with_custom_columns(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("time,laser,gx,gy\n0,0.5,1,2\n1,2.5,1.5,2.5\n2,0.4,2,3\n")
    t = load_trace_csv(p, TraceSchema(galvo_x="gx", galvo_y="gy", sample_rate_hz=20000))
    assert len(t) == 3
    assert t.sample_rate_hz == 20000
    np.testing.assert_array_equal(t.laser, [0.5, 2.5, 0.4])
    np.testing.assert_array_equal(t.galvo_y, [2, 2.5, 3])


def test_sample_rate_from_metadata(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("# sample_rate_hz=50000\nlaser,galvo_x,galvo_y\n0,0,0\n")
    assert load_trace_csv(p).sample_rate_hz == 50000


def test_missing_column_names_it(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("power,galvo_x,galvo_y\n0,0,0\n")
    with pytest.raises(SchemaError, match="laser"):
        load_trace_csv(p)


def test_non_numeric_cell_reports_line(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("laser,galvo_x,galvo_y\n0,0,0\n1,abc,0\n")
    with pytest.raises(ParseError) as err:
        load_trace_csv(p)
    assert err.value.line == 3


def test_nan_rejected(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("laser,galvo_x,galvo_y\n0,0,0\n1,,0\n")
    with pytest.raises(ParseError):
        load_trace_csv(p)


@pytest.mark.parametrize("body", ["", "laser,galvo_x,galvo_y\n"])
def test_empty_file(tmp_path, body):
    p = tmp_path / "t.csv"
    p.write_text(body)
    with pytest.raises(EmptyInputError):
        load_trace_csv(p)


def test_trace_invariants():
    with pytest.raises(ValueError):
        SignalTrace(20000, [1, 2], [1], [1, 2])
    with pytest.raises(ValueError):
        SignalTrace(0, [1], [1], [1])
    with pytest.raises(ValueError):
        SignalTrace(20000, [np.nan], [1], [1])
    with pytest.raises(ValueError):
        SignalTrace(20000, [], [], [])


def test_simulator_trace_round_trips_bit_identical(tmp_path):
    model = synth.box_model(3, 2, 2)
    trace, _ = synth.simulate_print_trace(model, synth.SimConfig(noise_sigma_volts=0.03, spike_rate=0.01), seed=7)
    p = tmp_path / "sim.csv"
    write_trace_csv(trace, p)
    back = load_trace_csv(p)
    assert back.sample_rate_hz == trace.sample_rate_hz
    for ch in ("laser", "galvo_x", "galvo_y"):
        assert np.array_equal(getattr(back, ch), getattr(trace, ch))


@given(hnp.arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e6, 1e6, allow_subnormal=False)))
def test_trace_csv_round_trip_property(tmp_path_factory, values):
    p = tmp_path_factory.mktemp("rt") / "t.csv"
    t = SignalTrace(12345.5, values, values[::-1], values * 0.5)
    write_trace_csv(t, p)
    back = load_trace_csv(p)
    assert len(back) == len(t)
    np.testing.assert_allclose(back.galvo_x, t.galvo_x, atol=1e-9, rtol=0)


def test_point_cloud_empty_and_single(tmp_path):
    p = tmp_path / "c.csv"
    write_point_cloud_csv(PointCloud(), p)
    assert p.read_text().strip() == "x,y,z,weight"
    assert len(load_point_cloud_csv(p)) == 0

    write_point_cloud_csv(PointCloud([[1.5, -2, 0]], [3]), p)
    row = p.read_text().splitlines()[1].split(",")
    assert [float(v) for v in row] == [1.5, -2.0, 0.0, 3.0]


def test_point_cloud_round_trip_10k(tmp_path, rng):
    cloud = PointCloud(rng.normal(0, 100, size=(10_000, 3)), rng.integers(1, 50, 10_000))
    p = tmp_path / "c.csv"
    write_point_cloud_csv(cloud, p)
    back = load_point_cloud_csv(p)
    assert np.abs(back.xyz - cloud.xyz).max() <= 1e-9
    assert np.array_equal(back.weights, cloud.weights)


def test_point_cloud_rejects_bad_weights():
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], [0])
    with pytest.raises(ValueError):
        PointCloud([[0, np.inf, 0]])


def test_write_error_mentions_path(tmp_path):
    bad = tmp_path / "missing_dir" / "c.csv"
    with pytest.raises(OSError, match="missing_dir"):
        write_point_cloud_csv(PointCloud(), bad)


def _multiset(tris):
    # order-independent within and across triangles
    return sorted(tuple(sorted(map(tuple, np.round(t, 6).tolist()))) for t in tris)


def test_ascii_tetrahedron(tmp_path):
    p = tmp_path / "t.stl"
    p.write_text(TETRA_ASCII)
    mesh = load_stl(p)
    assert len(mesh) == 4
    np.testing.assert_array_equal(mesh.triangles, TETRA)


def test_binary_matches_ascii(tmp_path):
    a, b = tmp_path / "a.stl", tmp_path / "b.stl"
    a.write_text(TETRA_ASCII)
    write_stl(TriangleMesh(TETRA), b, binary=True)
    assert _multiset(load_stl(a).triangles) == _multiset(load_stl(b).triangles)


def test_binary_header_starting_with_solid_is_still_binary(tmp_path):
    p = tmp_path / "b.stl"
    write_stl(TriangleMesh(TETRA), p, binary=True, name="solid trap")
    data = p.read_bytes()
    p.write_bytes(b"solid trap".ljust(80, b" ") + data[80:])
    assert len(load_stl(p)) == 4


@given(hnp.arrays(np.float64, (st.integers(1, 20).map(lambda n: (n, 3, 3))), elements=st.floats(-1e3, 1e3, width=32)))
def test_stl_formats_agree(tmp_path_factory, tris):
    d = tmp_path_factory.mktemp("stl")
    mesh = TriangleMesh(tris)
    write_stl(mesh, d / "a.stl", binary=False)
    write_stl(mesh, d / "b.stl", binary=True)
    a, b = load_stl(d / "a.stl").triangles, load_stl(d / "b.stl").triangles
    np.testing.assert_allclose(a, b, atol=1e-6 * max(1.0, np.abs(tris).max()))


def test_truncated_binary(tmp_path):
    facet = struct.pack("<12fH", *([0.0] * 12), 0)
    p = tmp_path / "t.stl"
    p.write_bytes(b"\0" * 80 + struct.pack("<I", 100) + facet * 50)
    with pytest.raises(MalformedFileError, match="100"):
        load_stl(p)


def test_bad_ascii_facet_line(tmp_path):
    p = tmp_path / "t.stl"
    p.write_text(TETRA_ASCII.replace("vertex 1 0 0\n    vertex 0 1 0\n  endloop", "vertex 1 zero 0\n    vertex 0 1 0\n  endloop", 1))
    with pytest.raises(ParseError) as err:
        load_stl(p)
    assert err.value.line == 5
