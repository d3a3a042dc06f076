"""End-to-end checks of the command line front end and its exit codes."""

import json
import shutil

import numpy as np
import pytest

from facesplat import dataset, images
from facesplat import fit as fit_mod
from facesplat.cli import (
    EXIT_ABORTED,
    EXIT_INVALID,
    EXIT_OK,
    EXIT_USAGE,
    build_config,
    main,
)
from facesplat.fit import FitConfig


@pytest.fixture(scope="module")
def ds_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    rc = main(["synth", "--out", str(root), "--seed", "3",
               "--subjects", "2", "--views", "2", "--res", "64"])
    assert rc == EXIT_OK
    return root


@pytest.fixture(scope="module")
def fitted(ds_root, tmp_path_factory):
    cfg = tmp_path_factory.mktemp("cfg") / "config.json"
    cfg.write_text(json.dumps({"stage2_warmup": 1, "seed": 5}))
    rc = main(["fit", "--dataset", str(ds_root), "--all", "--config", str(cfg),
               "--stage1-iters", "4", "--stage2-iters", "3",
               "--n-gaussians", "120", "--render-res", "48"])
    assert rc == EXIT_OK
    return ds_root / "results"


class TestSynth:
    def test_layout(self, ds_root):
        assert (ds_root / "assets.klrm").is_file()
        manifest = json.loads((ds_root / "manifest.json").read_text())
        assert manifest["n_subjects"] == 2
        for name in manifest["subjects"]:
            sdir = ds_root / "subjects" / name
            assert (sdir / "cameras.json").is_file()
            assert (sdir / "gt_params.json").is_file()
            assert len(list((sdir / "images").glob("*.png"))) == 2


class TestFit:
    def test_results_written(self, fitted):
        for name in ("000", "001"):
            rdir = fitted / name
            assert (rdir / "params.json").is_file()
            assert (rdir / "weights.klrm").is_file()
            log = (rdir / "losslog.jsonl").read_text().splitlines()
            assert len(log) == 7  # 4 stage-1 + 3 stage-2 iterations

    def test_flags_override_config_file(self, ds_root, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"stage1_iters": 7, "stage2_iters": 0,
                                   "n_gaussians": 60, "render_res": 32}))
        rc = main(["fit", "--dataset", str(ds_root), "--subject", "000",
                   "--out", str(tmp_path / "out"), "--config", str(cfg),
                   "--stage1-iters", "2"])
        assert rc == EXIT_OK
        log = (tmp_path / "out" / "000" / "losslog.jsonl").read_text().splitlines()
        assert len(log) == 2

    def test_single_view_flags(self, ds_root, tmp_path):
        rc = main(["fit", "--dataset", str(ds_root), "--subject", "000",
                   "--out", str(tmp_path / "out"), "--views", "1", "--fix-tz",
                   "--stage1-iters", "2", "--stage2-iters", "0",
                   "--n-gaussians", "60", "--render-res", "32"])
        assert rc == EXIT_OK
        result = fit_mod.load_fit_result(tmp_path / "out" / "000")
        assert len(result.renders) == 1
        assert result.params.translation[2] == 0.0

    def test_parallel_jobs(self, ds_root, tmp_path):
        rc = main(["fit", "--dataset", str(ds_root), "--all", "--jobs", "2",
                   "--out", str(tmp_path / "out"), "--stage1-iters", "2",
                   "--stage2-iters", "0", "--n-gaussians", "60",
                   "--render-res", "32"])
        assert rc == EXIT_OK
        assert (tmp_path / "out" / "000" / "params.json").is_file()
        assert (tmp_path / "out" / "001" / "params.json").is_file()

    def test_abort_exit_code(self, ds_root, tmp_path, capsys):
        broken = tmp_path / "broken"
        shutil.copytree(ds_root, broken)
        lpath = broken / "subjects" / "000" / "landmarks" / "000.json"
        payload = json.loads(lpath.read_text())
        payload["points"][10][0] = float("nan")
        lpath.write_text(json.dumps(payload))
        rc = main(["fit", "--dataset", str(broken), "--subject", "000",
                   "--out", str(tmp_path / "out"), "--stage1-iters", "3",
                   "--stage2-iters", "0", "--n-gaussians", "60",
                   "--render-res", "32"])
        assert rc == EXIT_ABORTED
        assert "ABORTED" in capsys.readouterr().err
        # partial state is still persisted for inspection
        assert (tmp_path / "out" / "000" / "params.json").is_file()

    def test_missing_cameras_file(self, ds_root, tmp_path, capsys):
        broken = tmp_path / "broken"
        shutil.copytree(ds_root, broken)
        (broken / "subjects" / "000" / "cameras.json").unlink()
        rc = main(["fit", "--dataset", str(broken), "--subject", "000",
                   "--out", str(tmp_path / "out")])
        assert rc == EXIT_INVALID
        assert "cameras.json" in capsys.readouterr().err

    def test_unknown_subject(self, ds_root, tmp_path, capsys):
        rc = main(["fit", "--dataset", str(ds_root), "--subject", "zz",
                   "--out", str(tmp_path / "out")])
        assert rc == EXIT_INVALID
        assert "zz" in capsys.readouterr().err


class TestConfigPlumbing:
    def test_unknown_config_key(self, ds_root, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus_key": 3}))
        rc = main(["fit", "--dataset", str(ds_root), "--all",
                   "--config", str(cfg)])
        assert rc == EXIT_USAGE
        assert "bogus_key" in capsys.readouterr().err

    def test_unknown_weight_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"weights": {"w_nope": 1.0}}))
        with pytest.raises(Exception, match="w_nope"):
            build_config(cfg)

    def test_weights_round_trip(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"weights": {"w_binding": 0.0, "lam": 0.5},
                                   "stage1_iters": 9}))
        config = build_config(cfg)
        assert config.stage1_iters == 9
        assert config.weights.w_binding == 0.0
        assert config.weights.lam == 0.5

    def test_overrides_beat_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 1}))
        config = build_config(cfg, {"seed": 2, "render_res": None})
        assert config.seed == 2
        assert config.render_res == FitConfig().render_res

    def test_missing_config_file(self, ds_root, capsys):
        rc = main(["fit", "--dataset", str(ds_root), "--all",
                   "--config", "/nonexistent/cfg.json"])
        assert rc == EXIT_USAGE

    def test_bad_thread_env(self, ds_root, monkeypatch, capsys):
        monkeypatch.setenv("KAOLRM_THREADS", "abc")
        rc = main(["gradcheck", "--probes", "2"])
        assert rc == EXIT_USAGE
        assert "thread cap" in capsys.readouterr().err


class TestEval:
    def test_metrics_schema(self, ds_root, fitted):
        rc = main(["eval", "--dataset", str(ds_root), "--results", str(fitted)])
        assert rc == EXIT_OK
        metrics = json.loads((fitted / "metrics.json").read_text())
        assert metrics["n_subjects"] == 2
        assert sorted(metrics["chamfer"]) == ["mean", "median", "std"]
        for key in ("var_beta", "var_psi"):
            assert sorted(metrics[key]) == ["first10", "full"]
        assert sorted(metrics["subjects"]) == ["000", "001"]
        # two subjects also produce the disagreement heatmap
        ply = (fitted / "variance_heatmap.ply").read_bytes()
        assert ply.startswith(b"ply")

    def test_single_subject_aggregate_is_own_stats(self, ds_root, fitted, tmp_path):
        solo = tmp_path / "solo"
        shutil.copytree(fitted / "000", solo / "000")
        rc = main(["eval", "--dataset", str(ds_root), "--results", str(solo)])
        assert rc == EXIT_OK
        metrics = json.loads((solo / "metrics.json").read_text())
        assert metrics["chamfer"] == metrics["subjects"]["000"]
        assert not (solo / "variance_heatmap.ply").exists()

    def test_ground_truth_scores_zero(self, ds_root, fitted, tmp_path):
        back = fit_mod.load_fit_result(fitted / "000")
        back.params = dataset.load_gt_params(ds_root / "subjects" / "000")
        out = tmp_path / "gtres"
        fit_mod.save_fit_result(out / "000", back)
        rc = main(["eval", "--dataset", str(ds_root), "--results", str(out)])
        assert rc == EXIT_OK
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["chamfer"]["mean"] < 1e-9
        assert metrics["var_beta"]["full"] == 0.0
        assert metrics["var_psi"]["full"] == 0.0

    def test_empty_results_dir(self, ds_root, tmp_path, capsys):
        empty = tmp_path / "none"
        empty.mkdir()
        rc = main(["eval", "--dataset", str(ds_root), "--results", str(empty)])
        assert rc == EXIT_INVALID


class TestRender:
    def test_view_matches_fit_renders_bitwise(self, ds_root, fitted, tmp_path):
        out = tmp_path / "re"
        rc = main(["render", "--result", str(fitted / "000"),
                   "--dataset", str(ds_root), "--view", "1", "--out", str(out)])
        assert rc == EXIT_OK
        again = images.load_png(out / "view_001.png")
        saved = images.load_png(fitted / "000" / "renders" / "001.png")
        assert np.array_equal(again, saved)

    def test_orbit_with_normals_and_depth(self, ds_root, fitted, tmp_path):
        out = tmp_path / "orbit"
        rc = main(["render", "--result", str(fitted / "000"),
                   "--dataset", str(ds_root), "--orbit", "3",
                   "--normals", "--depth", "--out", str(out)])
        assert rc == EXIT_OK
        assert len(sorted(out.glob("orbit_*.png"))) == 9
        assert len(sorted(out.glob("*_normal.png"))) == 3
        assert len(sorted(out.glob("*_depth.png"))) == 3

    def test_view_and_orbit_exclusive(self, ds_root, fitted, capsys):
        rc = main(["render", "--result", str(fitted / "000"),
                   "--dataset", str(ds_root), "--view", "0", "--orbit", "2"])
        assert rc == EXIT_USAGE

    def test_view_out_of_range(self, ds_root, fitted, capsys):
        rc = main(["render", "--result", str(fitted / "000"),
                   "--dataset", str(ds_root), "--view", "9"])
        assert rc == EXIT_USAGE

    def test_missing_result(self, ds_root, tmp_path, capsys):
        rc = main(["render", "--result", str(tmp_path / "nope"),
                   "--dataset", str(ds_root), "--view", "0"])
        assert rc == EXIT_INVALID


class TestGradcheck:
    def test_report_schema_and_pass(self, tmp_path):
        report_path = tmp_path / "grad.json"
        rc = main(["gradcheck", "--probes", "4", "--report", str(report_path)])
        assert rc == EXIT_OK
        report = json.loads(report_path.read_text())
        assert report["passed"] is True
        assert report["tolerance"] == 1e-4
        names = [b["name"] for b in report["blocks"]]
        assert "splat.render" in names and "fit.stage2" in names
        for block in report["blocks"]:
            assert block["passed"] is True
            assert block["max_rel_err"] <= 1e-4

    def test_inject_fault_fails_suite(self):
        rc = main(["gradcheck", "--probes", "2", "--inject-fault", "splat.render"])
        assert rc == EXIT_INVALID

    def test_unknown_fault_block(self, capsys):
        rc = main(["gradcheck", "--inject-fault", "nope.block"])
        assert rc == EXIT_USAGE


class TestUsage:
    def test_no_subcommand(self):
        assert main([]) == EXIT_USAGE

    def test_bad_subcommand(self):
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_fit_needs_subject_selection(self, ds_root):
        assert main(["fit", "--dataset", str(ds_root)]) == EXIT_USAGE

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "synth" in capsys.readouterr().out
