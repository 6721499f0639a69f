import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from rsfr import arrayio, cli, phantom
from rsfr import pipeline as pl
from rsfr import training as tr

def tiny_config(segmenter="fallback", steps=6, seed=0, noise=0.02):
    return pl.PipelineConfig(
        phantom=phantom.PhantomSpec(noise_sigma=noise),
        n_train_cases=2, n_heldout_cases=1,
        train=tr.TrainConfig(total_steps=steps, batch_size=2, seed=seed),
        segmenter=segmenter, seed=seed,
    )


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    cfg = tiny_config()
    manifest = pl.run_pipeline(cfg, out)
    return cfg, out, manifest


class TestConfig:
    def test_file_roundtrip(self, tmp_path):
        cfg = tiny_config(segmenter="none", steps=9)
        path = cfg.to_file(tmp_path / "cfg.json")
        loaded = pl.PipelineConfig.from_file(path)
        assert loaded.hash() == cfg.hash()
        assert loaded.train.total_steps == 9

    def test_hash_sensitive_to_changes(self):
        assert tiny_config(seed=0).hash() != tiny_config(seed=1).hash()

    def test_bad_segmenter_rejected(self):
        with pytest.raises(ValueError):
            tiny_config(segmenter="wat")


class TestRunPipeline:
    def test_emits_all_artifacts(self, tiny_run):
        _, out, _ = tiny_run
        case = out / "reconstruct" / "case000"
        assert (case / "slice000_coarse.arr").exists()
        assert (case / "slice000_refined.arr").exists()
        assert (case / "slice000_prior.arr").exists()
        post = out / "postprocess" / "case000"
        for arm in ("reference", "zf", "coarse", "refined"):
            assert (post / arm / "fa.arr").exists()
            assert (post / arm / "md.arr").exists()
            assert (post / arm / "profiles.csv").exists()
        assert (out / "evaluate" / "metrics.csv").exists()
        assert (out / "evaluate" / "dt_mae.csv").exists()
        assert (out / "masks" / "mask_af4.txt").exists()

    def test_four_figures_emitted(self, tiny_run):
        _, out, _ = tiny_run
        names = {p.name for p in (out / "report").glob("*.png")}
        assert names == {"recon_panel.png", "dt_maps.png", "ha_profiles.png",
                         "mae_bars.png"}
        for p in (out / "report").glob("*.png"):
            assert p.stat().st_size > 0

    def test_error_map_annotation_matches_recomputation(self, tiny_run):
        _, out, _ = tiny_run
        info = json.loads((out / "report" / "figures.json").read_text())
        panel = info["recon_panel"]
        case, stem = panel["case"], panel["slice"]
        gt = arrayio.load_array(out / "reconstruct" / case / f"{stem}_gt.arr")
        for arm, stats in panel["arms"].items():
            test = arrayio.load_array(
                out / "reconstruct" / case / f"{stem}_{arm}.arr")
            assert stats["error_max"] == pytest.approx(
                float(np.abs(gt - test).max()), abs=1e-12)

    def test_ha_annotation_matches_profile_csv(self, tiny_run):
        import csv
        _, out, _ = tiny_run
        info = json.loads((out / "report" / "figures.json").read_text())
        panel = info["ha_profiles"]
        path = out / "postprocess" / panel["case"] / "refined" / "profiles.csv"
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        per_spoke = {}
        for row in rows:
            per_spoke[int(row["spoke_id"])] = (float(row["r_squared"]),
                                               float(row["rmse"]))
        assert panel["mean_r_squared"] == pytest.approx(
            float(np.mean([v[0] for v in per_spoke.values()])), abs=1e-12)
        assert panel["mean_rmse"] == pytest.approx(
            float(np.mean([v[1] for v in per_spoke.values()])), abs=1e-12)

    def test_rerun_skips_completed_stages(self, tiny_run):
        cfg, out, manifest = tiny_run
        before = json.loads(manifest.path.read_text())
        again = pl.run_pipeline(cfg, out)
        after = json.loads(again.path.read_text())
        for stage in pl.STAGE_ORDER:
            assert (before["stages"][stage]["completed_at"]
                    == after["stages"][stage]["completed_at"])

    def test_stale_config_hash_rejected(self, tiny_run):
        _, out, _ = tiny_run
        with pytest.raises(RuntimeError, match="stale"):
            pl.run_pipeline(tiny_config(seed=99), out)

    def test_lockfile_excludes_second_process(self, tiny_run):
        cfg, out, _ = tiny_run
        with pl.RunLock(out):
            with pytest.raises(RuntimeError, match="locked"):
                pl.run_pipeline(cfg, out)

    def test_manifest_dependencies_acyclic(self, tiny_run):
        _, out, manifest = tiny_run
        order = {name: i for i, name in enumerate(pl.STAGE_ORDER)}
        for stage, record in manifest.data["stages"].items():
            for dep in record["depends_on"]:
                assert order[dep] < order[stage]

    def test_ablation_arms_run_under_one_config(self, tmp_path):
        # reference / fallback / none all execute the same pipeline shape
        for kind in ("reference", "none"):
            cfg = tiny_config(segmenter=kind, steps=2)
            out = tmp_path / f"arm_{kind}"
            pl.run_pipeline(cfg, out, stages=pl.STAGE_ORDER[:-1])
            assert (out / "evaluate" / "metrics.csv").exists()

    def test_none_prior_is_all_zero(self, tmp_path):
        cfg = tiny_config(segmenter="none", steps=2)
        out = tmp_path / "none_run"
        pl.run_pipeline(cfg, out,
                        stages=("simulate", "mask", "train", "reconstruct"))
        prior = arrayio.load_array(
            out / "reconstruct" / "case000" / "slice000_prior.arr")
        assert not prior.any()


class TestDeterminism:
    def test_identical_seed_identical_metric_csv(self, tmp_path):
        cfg = tiny_config(steps=4)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        pl.run_pipeline(cfg, out_a, stages=pl.STAGE_ORDER[:-1])
        pl.run_pipeline(cfg, out_b, stages=pl.STAGE_ORDER[:-1])
        csv_a = (out_a / "evaluate" / "metrics.csv").read_bytes()
        csv_b = (out_b / "evaluate" / "metrics.csv").read_bytes()
        assert csv_a == csv_b
        assert ((out_a / "evaluate" / "dt_mae.csv").read_bytes()
                == (out_b / "evaluate" / "dt_mae.csv").read_bytes())


class TestCLI:
    def setup_method(self):
        self.runner = CliRunner()

    def test_mask_subcommand(self, tmp_path):
        out = tmp_path / "mask.txt"
        result = self.runner.invoke(
            cli.main, ["mask", "--af", "4", "--seed", "7", "--out", str(out)])
        assert result.exit_code == 0, result.output
        lines = out.read_text().split()
        assert len(lines) == 48 and set(lines) <= {"0", "1"}
        assert sum(int(v) for v in lines) == 12

    def test_init_config_then_simulate(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        result = self.runner.invoke(cli.main,
                                    ["init-config", "--out", str(cfg_path)])
        assert result.exit_code == 0, result.output
        # shrink for test speed
        cfg = tiny_config(steps=2)
        cfg.to_file(cfg_path)
        out = tmp_path / "run"
        result = self.runner.invoke(cli.main, [
            "simulate", "--config", str(cfg_path), "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "simulate" / "train" / "case000" / "slice000.arr").exists()

    def test_segment_subcommand(self, tmp_path, default_field,
                                noiseless_slices):
        from rsfr.kspace import normalize_minmax
        coarse = normalize_minmax(noiseless_slices[0])
        src = tmp_path / "coarse.arr"
        arrayio.save_array(src, coarse.pixels)
        out = tmp_path / "prior.arr"
        result = self.runner.invoke(cli.main, [
            "segment", "--kind", "fallback", "--in", str(src),
            "--out", str(out)])
        assert result.exit_code == 0, result.output
        prior = arrayio.load_array(out)
        assert prior.shape == (3, 96, 96)
        assert "scores" in arrayio.load_sidecar(out)

    def test_postprocess_subcommand(self, tmp_path):
        # build a simulate case dir, then post-process it standalone
        cfg = tiny_config(steps=2)
        run_dir = tmp_path / "run"
        pl.run_pipeline(cfg, run_dir, stages=("simulate",))
        series_dir = run_dir / "simulate" / "heldout" / "case000"
        out = tmp_path / "post"
        result = self.runner.invoke(cli.main, [
            "postprocess", "--series", str(series_dir),
            "--mask-mode", "reference", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "fa.arr").exists() and (out / "profiles.csv").exists()

    def test_evaluate_subcommand(self, tmp_path, rng):
        ref_dir, test_dir = tmp_path / "ref", tmp_path / "test"
        ref_dir.mkdir(), test_dir.mkdir()
        for i in range(3):
            a = rng.random((32, 32))
            arrayio.save_array(ref_dir / f"s{i}.arr", a)
            arrayio.save_array(test_dir / f"s{i}.arr",
                               np.clip(a + 0.05 * rng.standard_normal(a.shape),
                                       0, 1))
        out = tmp_path / "report.csv"
        result = self.runner.invoke(cli.main, [
            "evaluate", "--ref", str(ref_dir), "--test", str(test_dir),
            "--out", str(out)])
        assert result.exit_code == 0, result.output
        lines = out.read_text().splitlines()
        assert lines[0] == "slice,psnr,ssim,perceptual"
        assert len(lines) == 4

    def test_run_and_report_subcommands(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        tiny_config(steps=2).to_file(cfg_path)
        out = tmp_path / "run"
        result = self.runner.invoke(cli.main, [
            "run", "--config", str(cfg_path), "--out", str(out),
            "--skip-report"])
        assert result.exit_code == 0, result.output
        assert "ssim" in result.output
        result = self.runner.invoke(cli.main, ["report", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "report" / "recon_panel.png").exists()
