import csv
import json

import numpy as np
import pytest

from lidar_pms import calib_io
from lidar_pms.cli import main
from lidar_pms.errors import ConfigError, PipelineError
from lidar_pms.maps import DepthMap
from lidar_pms.pipeline import (
    EmptyBatchError,
    PipelineConfig,
    load_config,
    parse_config_text,
    read_frame_list,
    run_eval_batch,
    run_pipeline,
)

FAST = ["--iterations", "1", "--window-radius", "2", "--no-parallel"]


@pytest.fixture(scope="module")
def frames(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out-dir", str(d), "--frames", "2", "--seed", "3", "--scale", "0.2"]) == 0
    return d


def _inputs(d, name="000000"):
    return ["--left", str(d / f"{name}_left.png"), "--right", str(d / f"{name}_right.png"),
            "--cloud", str(d / f"{name}.bin"), "--calib", str(d / f"{name}_calib.txt")]


def _config(d, out, name="000000", **kw):
    base = dict(left=str(d / f"{name}_left.png"), right=str(d / f"{name}_right.png"), cloud=str(d / f"{name}.bin"),
                calib=(str(d / f"{name}_calib.txt"),), gt=str(d / f"{name}_gt.png"), out_dir=str(out),
                iterations=1, window_radius=2, parallel=False)
    base.update(kw)
    return PipelineConfig(**base)


def test_synth_writes_a_frame_list(frames):
    specs = read_frame_list(frames / "frames.txt")
    assert [s.name for s in specs] == ["000000_left", "000001_left"]
    left = calib_io.read_rgb(specs[0].left)
    assert left.shape == (75, 248, 3)


def test_same_seed_gives_identical_depth_files(frames, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        assert main(["run", *_inputs(frames), "--out-dir", str(out), "--upsampler", "bi",
                     "--window-model", "slanted", "--seed", "1", *FAST]) == 0
        outs.append((out / "depth.png").read_bytes())
    assert outs[0] == outs[1]


def test_full_run_writes_previews_and_metrics(frames, tmp_path):
    res = run_pipeline(_config(frames, tmp_path / "o"))
    for name in ("sparse", "cleaned", "prior", "disparity"):
        img = calib_io.read_rgb(res.images[name])
        assert img.shape == (75, 248, 3)
    assert res.report is not None and res.report.mae_mm > 0
    stored = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert stored["mae_mm"] == pytest.approx(res.report.mae_mm)
    # depth raster round-trips to the returned depth at raster precision
    back = calib_io.read_depth_png(res.depth_path)
    v = np.isfinite(res.depth.values) & (res.depth.values < 255)
    np.testing.assert_allclose(back.values[v], res.depth.values[v], atol=1 / 256)
    assert load_config(tmp_path / "o" / "config.txt") == _config(frames, tmp_path / "o")


def test_skip_pms_emits_the_prior(frames, tmp_path):
    res = run_pipeline(_config(frames, tmp_path / "o", skip_pms=True))
    prior = calib_io.read_rgb(res.images["prior"])
    final = calib_io.read_rgb(res.images["disparity"])
    np.testing.assert_array_equal(prior, final)
    assert "pms" not in res.stats


def test_no_lidar_runs_pure_stereo(frames, tmp_path):
    cfg = _config(frames, tmp_path / "o", no_lidar=True, cloud=None)
    res = run_pipeline(cfg)
    assert set(res.images) == {"disparity"}
    assert res.report is not None
    assert main(["run", *_inputs(frames), "--out-dir", str(tmp_path / "c"), "--no-lidar", *FAST]) == 0


def test_conflicting_bypass_flags_are_a_config_error(frames, tmp_path):
    with pytest.raises(ConfigError):
        _config(frames, tmp_path / "o", no_lidar=True, skip_pms=True).validate()
    rc = main(["run", *_inputs(frames), "--out-dir", str(tmp_path / "o"), "--no-lidar", "--skip-pms"])
    assert rc == 1
    assert not (tmp_path / "o").exists()


def test_bad_settings_exit_with_config_status(frames, tmp_path):
    assert main(["run", *_inputs(frames), "--alpha", "0.5"]) == 1
    assert main(["run", "--left", str(tmp_path / "nope.png")]) == 1
    assert main(["run", *_inputs(frames), "--iterations", "many"]) == 1


def test_config_file_with_flag_override(frames, tmp_path):
    conf = tmp_path / "exp.cfg"
    conf.write_text("# experiment\nwindow_radius = 3\nupsampler = BF\nseed = 9  # trailing comment\n")
    parsed = parse_config_text(conf.read_text())
    assert parsed == {"window_radius": "3", "upsampler": "BF", "seed": "9"}
    cfg = load_config(conf)
    assert (cfg.window_radius, cfg.upsampler, cfg.seed) == (3, "bf", 9)
    out = tmp_path / "o"
    assert main(["run", "--config", str(conf), *_inputs(frames), "--out-dir", str(out), "--seed", "4",
                 "--iterations", "1", "--no-parallel"]) == 0
    written = load_config(out / "config.txt")
    assert (written.window_radius, written.upsampler, written.seed) == (3, "bf", 4)
    with pytest.raises(ConfigError):
        parse_config_text("window_radius 3")
    with pytest.raises(ConfigError):
        PipelineConfig().updated({"unknown_key": "1"})


def test_failure_removes_partial_outputs(frames, tmp_path):
    # a ground truth without a single valid pixel fails the last stage
    empty_gt = tmp_path / "empty_gt.png"
    calib_io.write_depth_png(DepthMap(np.full((75, 248), np.nan)), empty_gt)
    out = tmp_path / "o"
    with pytest.raises(PipelineError) as info:
        run_pipeline(_config(frames, out, gt=str(empty_gt)))
    assert info.value.stage == "evaluate"
    assert not out.exists()
    rc = main(["run", *_inputs(frames), "--gt", str(empty_gt), "--out-dir", str(out), *FAST])
    assert rc == 3 and not out.exists()


def test_existing_output_directory_keeps_foreign_files(frames, tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    bad_gt = tmp_path / "bad.png"
    bad_gt.write_bytes(b"not a png")
    with pytest.raises(PipelineError) as info:
        run_pipeline(_config(frames, out, gt=str(bad_gt)))
    assert info.value.stage == "load"
    assert sorted(p.name for p in out.iterdir()) == ["keep.txt"]


def test_batch_continues_past_a_missing_frame(frames, tmp_path):
    lst = tmp_path / "list.txt"
    text = (frames / "frames.txt").read_text()
    lines = [f"{frames}/{c}" for c in text.split()]
    rows = [" ".join(lines[i:i + 5]) for i in range(0, len(lines), 5)]
    rows.insert(1, f"{frames}/gone_left.png {frames}/gone_right.png {frames}/gone.bin {frames}/gone_calib.txt")
    lst.write_text("\n".join(rows) + "\n")
    out = tmp_path / "b"
    rc = main(["batch", str(lst), "--out-dir", str(out), *FAST])
    assert rc == 2
    with (out / "summary.csv").open() as fh:
        table = list(csv.DictReader(fh))
    assert [r["status"] for r in table] == ["ok", "missing", "ok", "aggregate"]
    assert "gone.bin" in table[1]["error"]
    agg = json.loads((out / "aggregate.json").read_text())
    n = [int(table[i]["evaluated_pixels"]) for i in (0, 2)]
    mae = [float(table[i]["mae_mm"]) for i in (0, 2)]
    assert agg["evaluated_pixels"] == sum(n)
    assert agg["mae_mm"] == pytest.approx((n[0] * mae[0] + n[1] * mae[1]) / sum(n))


def test_batch_of_one_frame_matches_the_single_run(frames, tmp_path):
    lst = tmp_path / "one.txt"
    lst.write_text((frames / "frames.txt").read_text().splitlines()[0].replace("0000", str(frames) + "/0000") + "\n")
    cfg = _config(frames, tmp_path / "b", left=None, right=None, cloud=None, calib=(), gt=None)
    res = run_eval_batch(lst, cfg)
    assert res.ok
    single = run_pipeline(_config(frames, tmp_path / "s"))
    assert res.aggregate.mae_mm == pytest.approx(single.report.mae_mm, rel=1e-12)
    assert res.aggregate.err_gt_3px == pytest.approx(single.report.err_gt_3px, rel=1e-12)


def test_empty_batch(tmp_path):
    lst = tmp_path / "empty.txt"
    lst.write_text("# nothing here\n\n")
    with pytest.raises(EmptyBatchError):
        run_eval_batch(lst, PipelineConfig(out_dir=str(tmp_path / "b")))
    assert main(["batch", str(lst), "--out-dir", str(tmp_path / "b")]) == 2


def test_frame_list_format(tmp_path):
    lst = tmp_path / "l.txt"
    lst.write_text("a/l.png a/r.png - c1.txt,c2.txt\na/l.png a/r.png a/p.bin c.txt g.png\n")
    with pytest.raises(ConfigError):
        read_frame_list(lst)
    specs = read_frame_list(lst, require_cloud=False)
    assert specs[0].cloud is None and specs[0].calib == (str(tmp_path / "c1.txt"), str(tmp_path / "c2.txt"))
    assert [s.name for s in specs] == ["l", "l_2"]
    assert specs[1].gt == str(tmp_path / "g.png")
    lst.write_text("only three cols\n")
    with pytest.raises(ConfigError):
        read_frame_list(lst)
