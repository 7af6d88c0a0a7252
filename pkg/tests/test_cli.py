import json

import pytest

from posevolume.cli import main, parse_config
from posevolume.errors import ConfigParseError, IoError
from posevolume.metrics import read_results_csv


def write_config(path, **overrides):
    cfg = {"model": "blob", "scenes": 4, "seed": 11, "noise_px": 0.0}
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def workspace(tmp_path):
    scenes = tmp_path / "scenes"
    out = tmp_path / "out"
    scenes.mkdir()
    out.mkdir()
    cfg = write_config(tmp_path / "cfg.json")
    return tmp_path, cfg, scenes, out


class TestParseConfig:
    def test_unknown_field_named(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"model": "cube", "wibble": 3}')
        with pytest.raises(ConfigParseError, match="wibble"):
            parse_config(p)

    def test_invalid_json_has_line_info(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"model": "cube",\n  "scenes": }')
        with pytest.raises(ConfigParseError, match="line 2"):
            parse_config(p)

    def test_solver_and_pipeline_fields(self, tmp_path):
        p = write_config(tmp_path / "cfg.json", gamma2_m=0.03, field_gain=12.0,
                         coarse_cell_m=0.02)
        cfg = parse_config(p)
        assert cfg.pipeline.solver.gamma2 == 0.03
        assert cfg.pipeline.field_gain == 12.0
        assert cfg.pipeline.coarse_cell_m == 0.02

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(IoError):
            parse_config(tmp_path / "absent.json")


class TestGenerate:
    def test_writes_manifests_and_dumps(self, workspace):
        _, cfg, scenes, _ = workspace
        assert main(["generate", "--config", str(cfg), "--out", str(scenes)]) == 0
        manifests = sorted(scenes.glob("scene_*.json"))
        assert len(manifests) == 4
        dumps = sorted(scenes.glob("scene_*.bin"))
        assert len(dumps) == 4 * 4  # two views x two scales per scene

    def test_rerun_identical_bytes(self, workspace):
        tmp, cfg, scenes, _ = workspace
        other = tmp / "scenes2"
        other.mkdir()
        main(["generate", "--config", str(cfg), "--out", str(scenes)])
        main(["generate", "--config", str(cfg), "--out", str(other)])
        for p in sorted(scenes.iterdir()):
            assert p.read_bytes() == (other / p.name).read_bytes()

    def test_missing_out_dir_errors(self, workspace, capsys):
        tmp, cfg, _, _ = workspace
        rc = main(["generate", "--config", str(cfg), "--out", str(tmp / "nope")])
        assert rc == 1
        assert "nope" in capsys.readouterr().err

    def test_occlusion_sweep_binned_levels(self, workspace):
        tmp, cfg, scenes, _ = workspace
        rc = main(["generate", "--config", str(cfg), "--out", str(scenes),
                   "--scenes", "10", "--occlusion-sweep"])
        assert rc == 0
        fractions = []
        for p in sorted(scenes.glob("scene_*.json")):
            fractions.append(json.loads(p.read_text())["config"]["occlusion_fraction"])
        assert sorted(set(fractions)) == [0.0, 0.2, 0.4, 0.6, 0.8]
        assert fractions.count(0.4) == 2


class TestEvaluate:
    def test_volume_on_noise_free_scenes_full_success(self, workspace):
        _, cfg, scenes, out = workspace
        main(["generate", "--config", str(cfg), "--out", str(scenes)])
        rc = main(["evaluate", str(scenes), "--method", "volume", "--out", str(out)])
        assert rc == 0
        rows = read_results_csv(out / "results_volume.csv")
        assert len(rows) == 4
        assert all(r["success"] for r in rows)
        summary = json.loads((out / "summary_volume.json").read_text())
        assert summary["success_rate"] == 1.0
        assert (out / "records_volume.jsonl").exists()

    def test_methods_share_scene_ids(self, workspace):
        _, cfg, scenes, out = workspace
        main(["generate", "--config", str(cfg), "--out", str(scenes)])
        for method in ("volume", "late_fusion", "kabsch_all"):
            assert main(["evaluate", str(scenes), "--method", method,
                         "--out", str(out)]) == 0
        ids = [tuple(r["scene_id"] for r in read_results_csv(out / f"results_{m}.csv"))
               for m in ("volume", "late_fusion", "kabsch_all")]
        assert ids[0] == ids[1] == ids[2]

    def test_unknown_method_usage_error(self, workspace):
        _, cfg, scenes, out = workspace
        with pytest.raises(SystemExit) as exc:
            main(["evaluate", str(scenes), "--method", "magic", "--out", str(out)])
        assert exc.value.code != 0

    def test_repeat_evaluation_identical_csv(self, workspace, monkeypatch):
        tmp, cfg, scenes, out = workspace
        main(["generate", "--config", str(cfg), "--out", str(scenes)])
        out2 = tmp / "out2"
        out2.mkdir()
        monkeypatch.setenv("POSEVOLUME_THREADS", "3")
        main(["evaluate", str(scenes), "--method", "late_fusion", "--out", str(out)])
        monkeypatch.setenv("POSEVOLUME_THREADS", "1")
        main(["evaluate", str(scenes), "--method", "late_fusion", "--out", str(out2)])
        assert (out / "results_late_fusion.csv").read_bytes() == \
            (out2 / "results_late_fusion.csv").read_bytes()

    def test_malformed_scene_file(self, workspace, capsys):
        _, cfg, scenes, out = workspace
        (scenes / "scene_000000.json").write_text("{}")
        rc = main(["evaluate", str(scenes), "--method", "volume", "--out", str(out)])
        assert rc == 1
        assert "schema" in capsys.readouterr().err


class TestReport:
    def test_table_and_bins(self, workspace, capsys):
        _, cfg, scenes, out = workspace
        main(["generate", "--config", str(cfg), "--out", str(scenes)])
        main(["evaluate", str(scenes), "--method", "volume", "--out", str(out)])
        rc = main(["report", str(out), "--out", str(out)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "volume" in text
        bins = (out / "occlusion_bins.csv").read_text().strip().splitlines()
        assert bins[1] == "method,bin_lo,bin_hi,accuracy,count"
        assert any(line.startswith("volume,") for line in bins[2:])
