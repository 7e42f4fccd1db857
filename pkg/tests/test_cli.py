import numpy as np
import pytest

from conftest import run_chained, run_full, same_outputs, synth
from octreg.cli import aggregate, main
from octreg.config import PipelineConfig
from octreg.pipeline import register, stage_project
from octreg.transform import corner_error
from octreg.synthetic import truth_model
from octreg.volume_io import SyntheticTruth, Volume, load_volume, read_kv, save_volume


@pytest.fixture(scope="module")
def pair(tmp_path_factory):
    return synth(tmp_path_factory.mktemp("pair"), 4, "affine")


def _identical_pair(d, seed=1):
    synth(d, seed, "identity", "--z-shift", "0")
    vol = load_volume(d / "reference.raw")
    save_volume(vol, d / "moving.raw")
    return d


def test_config_round_trip(tmp_path):
    cfg = PipelineConfig(d=40.0, wavelet_levels=(1, 2, 4), ransac=False)
    cfg.save(tmp_path / "c.txt")
    assert PipelineConfig.load(tmp_path / "c.txt") == cfg


def test_config_defaults_match_stated_constants():
    cfg = PipelineConfig()
    assert (cfg.d, cfg.merge_radius, cfg.cube_side) == (46.0, 10.0, 19)
    assert cfg.wavelet_levels == (2, 3, 5) and cfg.gabor_wavelengths == (4.0, 8.0)


@pytest.mark.parametrize("kw", [{"d": 5.0}, {"cube_side": 18}, {"omega": 1.5},
                                {"prefilter": "bogus"}])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        PipelineConfig(**kw)


def test_config_unknown_key(tmp_path):
    (tmp_path / "c.txt").write_text("nope = 1\n")
    with pytest.raises(KeyError):
        PipelineConfig.load(tmp_path / "c.txt")


def test_synth_outputs(pair):
    truth = SyntheticTruth.load(pair / "truth.txt")
    assert truth.model_kind == "affine"
    assert load_volume(pair / "reference.raw").dims == (64, 128, 128)


def test_register_synthetic_pair(pair, tmp_path):
    assert run_full(pair, tmp_path / "out") == 0
    out = tmp_path / "out"
    rep = read_kv(out / "report.txt")
    assert rep["success"] == "true"
    assert float(rep["gc"]) > 1.0
    for name in ("registered.raw", "registered.raw.json", "checkerboard.ppm", "vessel_overlay.ppm",
                 "transform.txt", "z_shifts.txt", "matches.txt", "timings.txt"):
        assert (out / name).exists(), name
    truth = SyntheticTruth.load(pair / "truth.txt")
    from octreg.transform import TransformModel
    model = TransformModel.from_text((out / "transform.txt").read_text())
    assert corner_error(model, truth_model(truth), (128, 128)) <= 2.0


def test_register_identical_volumes(tmp_path):
    d = _identical_pair(tmp_path / "same")
    assert run_full(d, tmp_path / "out") == 0
    rep = read_kv(tmp_path / "out" / "report.txt")
    assert float(rep["gc"]) == 1.0 and rep["success"] == "true"
    shifts = [int(v) for v in (tmp_path / "out" / "z_shifts.txt").read_text().split()]
    assert shifts and all(s == 0 for s in shifts)


def test_register_unreadable_input_no_outputs(tmp_path, pair):
    out = tmp_path / "out"
    rc = main(["register", str(tmp_path / "missing.raw"), str(pair / "moving.raw"), "-o", str(out)])
    assert rc == 2
    assert not out.exists()


def test_register_forced_failure_reports_gc_zero(tmp_path, pair):
    blank = Volume(np.zeros((64, 128, 128), np.uint8))
    save_volume(blank, tmp_path / "blank.raw")
    out = tmp_path / "out"
    rc = main(["register", str(pair / "reference.raw"), str(tmp_path / "blank.raw"), "-o", str(out)])
    assert rc == 1
    rep = read_kv(out / "report.txt")
    assert rep["success"] == "false" and float(rep["gc"]) == 0.0


def test_output_dir_from_environment(tmp_path, pair, monkeypatch):
    monkeypatch.setenv("OCTREG_OUTPUT_DIR", str(tmp_path / "env_out"))
    assert main(["project", str(pair / "reference.raw")]) == 0
    assert (tmp_path / "env_out" / "projection.pgm").exists()


def test_project_matches_pipeline_projection(tmp_path, pair):
    assert main(["project", str(pair / "reference.raw"), "-o", str(tmp_path / "p")]) == 0
    _, internal = stage_project(load_volume(pair / "reference.raw"), PipelineConfig())
    assert np.array_equal(np.load(tmp_path / "p" / "projection.npy"), internal)


def test_match_equals_full_pipeline(tmp_path, pair):
    assert run_full(pair, tmp_path / "full") == 0
    assert run_chained(pair, tmp_path / "chain") == 0
    assert (tmp_path / "chain" / "match" / "matches.txt").read_bytes() == \
        (tmp_path / "full" / "matches.txt").read_bytes()
    assert same_outputs(tmp_path / "full", tmp_path / "chain" / "reg") == []


def test_register_deterministic(tmp_path, pair):
    assert run_full(pair, tmp_path / "a") == 0
    assert run_full(pair, tmp_path / "b") == 0
    assert same_outputs(tmp_path / "a", tmp_path / "b") == []


def test_config_flag_overrides(tmp_path, pair):
    out = tmp_path / "out"
    rc = main(["register", str(pair / "reference.raw"), str(pair / "moving.raw"), "--omega", "0.2",
               "--refine", "false", "-o", str(out)])
    assert rc in (0, 1)
    assert (out / "report.txt").exists()


def test_invalid_config_value_exit_2(tmp_path, pair):
    rc = main(["register", str(pair / "reference.raw"), str(pair / "moving.raw"), "--omega", "3",
               "-o", str(tmp_path / "out")])
    assert rc == 2


def test_eval_identity_manifest(tmp_path):
    for k in range(2):
        _identical_pair(tmp_path / f"p{k}", seed=k + 1)
    (tmp_path / "m.txt").write_text("p0/reference.raw p0/moving.raw\np1/reference.raw p1/moving.raw\n")
    assert main(["eval", str(tmp_path / "m.txt"), "-o", str(tmp_path / "ev")]) == 0
    agg = read_kv(tmp_path / "ev" / "aggregate.txt")
    assert float(agg["accuracy_percent"]) == 100.0
    assert float(agg["mean_gc"]) == 1.0


def test_eval_forced_failure_counts_zero(tmp_path, pair):
    save_volume(Volume(np.zeros((64, 128, 128), np.uint8)), tmp_path / "blank.raw")
    (tmp_path / "m.txt").write_text(f"{pair}/reference.raw {pair}/moving.raw\n"
                                    f"{pair}/reference.raw blank.raw\n")
    assert main(["eval", str(tmp_path / "m.txt"), "-o", str(tmp_path / "ev")]) == 0
    agg = read_kv(tmp_path / "ev" / "aggregate.txt")
    lines = (tmp_path / "ev" / "pairs.txt").read_text().splitlines()
    gcs = [float(l.split("gc=")[1]) for l in lines]
    assert gcs[1] == 0.0 and gcs[0] > 1.0
    assert float(agg["accuracy_percent"]) == 50.0
    assert float(agg["mean_gc"]) == pytest.approx(gcs[0] / 2)


def test_eval_empty_manifest(tmp_path):
    (tmp_path / "m.txt").write_text("# nothing\n")
    assert main(["eval", str(tmp_path / "m.txt"), "-o", str(tmp_path / "ev")]) == 2


def test_eval_synthetic_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["eval", "--synthetic", "2", "--kind", "similarity", "--first-seed", "30",
                     "-o", str(tmp_path / name)]) == 0
    a = read_kv(tmp_path / "a" / "aggregate.txt")
    b = read_kv(tmp_path / "b" / "aggregate.txt")
    for key in ("pairs", "accuracy_percent", "mean_gc", "mean_corner_error"):
        assert a[key] == b[key]
    assert (tmp_path / "a" / "pairs.txt").read_bytes() == (tmp_path / "b" / "pairs.txt").read_bytes()


def test_aggregate_rules():
    agg = aggregate([(0, True, 1.5, 2.0, {}), (1, False, 3.0, 4.0, {})])
    assert agg == {"pairs": 2, "accuracy_percent": 50.0, "mean_gc": 0.75, "mean_time_s": 3.0}
    with pytest.raises(ValueError):
        aggregate([])


def test_pipeline_report_text_has_summary(pair):
    res = register(load_volume(pair / "reference.raw"), load_volume(pair / "moving.raw"))
    text = res.report.to_text()
    assert text.rstrip().splitlines()[-1].startswith("SUMMARY")
    assert res.report.success and res.report.n_correspondences >= 4
