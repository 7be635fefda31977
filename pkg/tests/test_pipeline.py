import json

import numpy as np
import pytest

from pbf_recon import pipeline, synth
from pbf_recon.config import PipelineConfig, load_config
from pbf_recon.errors import ConfigError, StageError
from pbf_recon.geometry import measure_ratio
from pbf_recon.rasterizer import load_grid_csv, rasterize_layers
from pbf_recon.segmentation import load_layer_csv
from pbf_recon.trace_io import load_point_cloud_csv, write_stl, write_trace_csv
from pbf_recon.voxel_ops import prune

MODEL = synth.cylinder_model(16, 6)


def simulate(tmp_path, n=1, noise=0.0, **kw):
    paths = []
    for seed in range(n):
        trace, truth = synth.simulate_print_trace(MODEL, synth.SimConfig(noise_sigma_volts=noise, **kw), seed=seed)
        p = tmp_path / f"trace_{seed}.csv"
        write_trace_csv(trace, p)
        paths.append(str(p))
    stl = tmp_path / "ref.stl"
    write_stl(synth.voxel_surface_mesh(truth), stl)
    return paths, truth, str(stl)


def small_config(tmp_path, profile, inputs, **overrides):
    doc = {"inputs": inputs, "output_dir": str(tmp_path / "out"), "raster_size": 0.25, "projection_min_hit": 1}
    doc.update(overrides)
    return load_config(profile=profile, overrides={k: ",".join(v) if isinstance(v, list) else v for k, v in doc.items()})


def test_simple_mode_artifacts(tmp_path):
    inputs, truth, stl = simulate(tmp_path)
    cfg = small_config(tmp_path, "simple", inputs, reference_stl=stl, eval_grid=1.0, scale_rule="gear_base_diameter")
    res = pipeline.run_pipeline(cfg)
    for key in ("config", "preprocessed_0", "layers_0", "grid_0", "grid_pruned", "grid_filled", "cloud_corrected", "cloud", "eval_report"):
        assert res.artifacts[key].exists(), key
    assert load_grid_csv(res.artifacts["grid_filled"]).occupied() == truth.occupied()
    assert len(load_point_cloud_csv(res.artifacts["cloud"])) == len(truth)
    assert res.report.percentages == (100.0, 0.0, 0.0)
    assert json.loads(res.artifacts["eval_report"].read_text())["true_pos"] == len(truth)


def test_differential_mode_uses_published_defaults(tmp_path):
    inputs, truth, _ = simulate(tmp_path, n=3, noise=0.02)
    cfg = small_config(tmp_path, "differential", inputs)
    assert (cfg.min_hit, cfg.neighbor_range, cfg.min_neighbors) == (3, 4, 22)
    res = pipeline.run_pipeline(cfg)
    merged = load_grid_csv(res.artifacts["grid_merged"])
    singles = [load_grid_csv(res.artifacts[f"grid_{i}"]) for i in range(3)]
    assert merged.total_hits == sum(g.total_hits for g in singles)
    written = load_config(res.artifacts["config"])
    assert (written.min_hit, written.neighbor_range, written.min_neighbors) == (3, 4, 22)
    assert res.grid.occupied() == truth.occupied()


def test_simple_mode_ignores_extra_inputs(tmp_path, caplog):
    inputs, _, _ = simulate(tmp_path, n=2)
    res = pipeline.run_pipeline(small_config(tmp_path, "simple", inputs))
    assert "grid_1" not in res.artifacts
    assert "only the first" in caplog.text


def test_reruns_are_bit_identical(tmp_path):
    inputs, _, _ = simulate(tmp_path, n=3, noise=0.05, spike_rate=1e-3)
    a = pipeline.run_pipeline(small_config(tmp_path / "a", "differential", inputs))
    b = pipeline.run_pipeline(small_config(tmp_path / "b", "differential", inputs))
    for key, path in a.artifacts.items():
        if key != "config":
            assert path.read_bytes() == b.artifacts[key].read_bytes(), key


def test_stage_rerun_from_artifacts(tmp_path):
    inputs, _, _ = simulate(tmp_path, noise=0.03)
    cfg = small_config(tmp_path, "simple", inputs)
    res = pipeline.run_pipeline(cfg)
    p = pipeline.load_preprocessed(res.artifacts["preprocessed_0"])
    g = rasterize_layers(p.laser_on, p.galvo_x, p.galvo_y, load_layer_csv(res.artifacts["layers_0"]), cfg.raster_size)
    assert g == load_grid_csv(res.artifacts["grid_0"])
    assert prune(g, cfg.prune_config()) == load_grid_csv(res.artifacts["grid_pruned"])


def test_stage_error_names_stage_and_keeps_artifacts(tmp_path):
    cfg = small_config(tmp_path, "simple", [str(tmp_path / "nope.csv")])
    with pytest.raises(StageError) as err:
        pipeline.run_pipeline(cfg)
    assert err.value.stage == "preprocess"
    assert "preprocess" in str(err.value)
    assert (tmp_path / "out" / "config.cfg").exists()


def test_calibration_layer_out_of_range(tmp_path):
    inputs, _, _ = simulate(tmp_path)
    cfg = small_config(tmp_path, "simple", inputs, calibrate="true", calibration_layer=99)
    with pytest.raises(StageError) as err:
        pipeline.run_pipeline(cfg)
    assert err.value.stage == "calibrate" and isinstance(err.value.cause, ConfigError)


def test_calibration_report(tmp_path):
    inputs, _, _ = simulate(tmp_path)
    res = pipeline.run_pipeline(small_config(tmp_path, "simple", inputs, calibrate="true"))
    doc = json.loads(res.artifacts["calibration"].read_text())
    assert doc["layer_count"] == 6 and doc["calibration_layer"] == 2
    assert doc["derived_raster"] == pytest.approx(doc["combined_swing"] / 6)
    assert doc["operational_raster"] == 0.25


def test_invalid_config_rejected(tmp_path):
    with pytest.raises(ConfigError):
        pipeline.run_pipeline(PipelineConfig(inputs=["x"], threshold_on=0.5))
    with pytest.raises(ConfigError):
        pipeline.run_pipeline(PipelineConfig(output_dir=str(tmp_path)))


def test_distortion_fit_and_correction(tmp_path):
    d = ((1.1, 0.15), (0.15, 0.9))
    inputs, truth, _ = simulate(tmp_path, xy_distortion=d)
    cfg = small_config(tmp_path, "simple", inputs, fit_distortion="true", raster_size=0.0625, reference_radius=4 * 8)
    res = pipeline.run_pipeline(cfg)
    assert np.linalg.norm(res.distortion.xy_matrix - np.array(d)) / np.linalg.norm(d) < 0.05
    assert res.artifacts["distortion"].exists()
    # reusing the saved model gives the same corrected cloud
    cfg2 = small_config(tmp_path / "re", "simple", inputs, raster_size=0.0625, distortion_model=str(res.artifacts["distortion"]))
    res2 = pipeline.run_pipeline(cfg2)
    np.testing.assert_allclose(res2.cloud.xyz, res.cloud.xyz)


def test_z_factor_and_proportion(tmp_path):
    inputs, _, _ = simulate(tmp_path)
    res = pipeline.run_pipeline(small_config(tmp_path, "simple", inputs, z_factor=2.0))
    assert np.ptp(res.cloud.z) == pytest.approx(5 / 2)
    res = pipeline.run_pipeline(small_config(tmp_path / "p", "simple", inputs, proportion_ratio=3.0))
    assert measure_ratio(res.cloud, "diameter_over_height") == pytest.approx(3.0)
