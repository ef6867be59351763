"""End-to-end mock pipeline: determinism, resume, isolation, ablations, CLI."""

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from diffurank.audit import read_caption_csv
from diffurank.cli import main as cli_main
from diffurank.pipeline import (
    AblationMode,
    ConfigError,
    PipelineConfig,
    Stage,
    WorldSpec,
    ablation_run,
    config_from_dict,
    horizontal_view_ids,
    load_config,
    mock_clients,
    run_pipeline,
)
from diffurank.render import ViewStrategy, build_job
from diffurank.toy import parse_tokens

OBJECT_IDS = [f"obj-{i:04d}" for i in range(10)]


def make_config(tmp_path, name="out", **overrides):
    overrides.setdefault("world", WorldSpec(num_objects=10, seed=4))
    return PipelineConfig(output_dir=str(tmp_path / name), **overrides)


class TestRunPipeline:
    def test_ten_objects_complete_without_failures(self, tmp_path):
        config = make_config(tmp_path)
        report = run_pipeline(config, OBJECT_IDS)
        assert report.completed == 10
        assert report.failed == {}
        records = read_caption_csv(report.captions_csv)
        assert len(records) == 10
        world = mock_clients(config).world
        for record in records:
            obj = world.objects_by_id[record.identifier]
            assert set(parse_tokens(record.caption)) <= set(obj.tokens)

    def test_deterministic_under_fixed_seed(self, tmp_path):
        report_a = run_pipeline(make_config(tmp_path, "a"), OBJECT_IDS)
        report_b = run_pipeline(make_config(tmp_path, "b"), OBJECT_IDS)
        golden = Path(report_a.captions_csv).read_bytes()
        assert Path(report_b.captions_csv).read_bytes() == golden
        ranks_a = (Path(report_a.output_dir) / "rankings.jsonl").read_text()
        ranks_b = (Path(report_b.output_dir) / "rankings.jsonl").read_text()
        assert ranks_a == ranks_b

    def test_kill_and_resume_reproduces_bytes(self, tmp_path):
        golden = Path(
            run_pipeline(make_config(tmp_path, "uninterrupted"), OBJECT_IDS).captions_csv
        ).read_bytes()
        config = make_config(tmp_path, "resumed")
        run_pipeline(config, OBJECT_IDS, stop_after=Stage.CAPTIONED)
        report = run_pipeline(config, OBJECT_IDS)
        assert Path(report.captions_csv).read_bytes() == golden

    def test_resume_skips_completed_stages(self, tmp_path):
        config = make_config(tmp_path)
        bundle = mock_clients(config)
        run_pipeline(config, OBJECT_IDS, clients=bundle, stop_after=Stage.CAPTIONED)
        captioner_calls = bundle.captioner.calls
        run_pipeline(config, OBJECT_IDS, clients=bundle)
        assert bundle.captioner.calls == captioner_calls  # captioning never re-ran

    def test_completed_rerun_makes_zero_client_calls(self, tmp_path):
        config = make_config(tmp_path)
        run_pipeline(config, OBJECT_IDS)
        bundle = mock_clients(config)
        report = run_pipeline(config, OBJECT_IDS, clients=bundle)
        assert bundle.captioner.calls == 0
        assert bundle.encoder.calls == 0
        assert bundle.summarizer.calls == 0
        assert report.completed == 10

    def test_policy_violation_routes_to_flagged(self, tmp_path):
        config = make_config(tmp_path, policy_violation_ids=("obj-0003",))
        report = run_pipeline(config, OBJECT_IDS)
        assert report.flagged == ["obj-0003"]
        identifiers = [r.identifier for r in read_caption_csv(report.captions_csv)]
        assert "obj-0003" not in identifiers
        assert len(identifiers) == 9
        flagged_list = (Path(report.output_dir) / "flagged.txt").read_text().split()
        assert flagged_list == ["obj-0003"]

    def test_default_config_incurs_700_denoiser_calls_per_object(self, tmp_path):
        report = run_pipeline(make_config(tmp_path), OBJECT_IDS[:2])
        assert all(calls == 700 for calls in report.denoiser_calls.values())

    def test_per_object_failure_is_isolated(self, tmp_path):
        config = make_config(tmp_path)
        bundle = mock_clients(config)
        real_caption_view = bundle.captioner.caption_view

        def flaky(image_ref, n):
            if "obj-0002" in image_ref:
                raise RuntimeError("caption backend refused this object")
            return real_caption_view(image_ref, n)

        bundle.captioner.caption_view = flaky
        report = run_pipeline(config, OBJECT_IDS, clients=bundle)
        assert set(report.failed) == {"obj-0002"}
        assert "CAPTIONED" in report.failed["obj-0002"]
        assert report.completed == 9
        assert report.exit_code == 2

    def test_unknown_object_fails_that_object_only(self, tmp_path):
        config = make_config(tmp_path)
        report = run_pipeline(config, ["obj-0000", "obj-9999"])
        assert set(report.failed) == {"obj-9999"}
        assert report.completed == 1

    def test_ranking_records_carry_strategy_tags(self, tmp_path):
        report = run_pipeline(make_config(tmp_path), OBJECT_IDS[:1])
        lines = (Path(report.output_dir) / "rankings.jsonl").read_text().splitlines()
        record = json.loads(lines[0])
        strategies = {e["strategy"] for e in record["ordered"]}
        assert strategies <= {"grey_raytrace", "transparent_realtime"}
        assert record["denoiser_calls"] == 700


class TestWorkerPool:
    def test_parallel_run_matches_serial_csv(self, tmp_path):
        serial = run_pipeline(make_config(tmp_path, "serial"), OBJECT_IDS)
        parallel = run_pipeline(make_config(tmp_path, "parallel", max_workers=4), OBJECT_IDS)
        assert Path(parallel.captions_csv).read_bytes() == Path(serial.captions_csv).read_bytes()


class TestAblations:
    @pytest.fixture()
    def completed(self, tmp_path):
        config = make_config(tmp_path)
        run_pipeline(config, OBJECT_IDS)
        return config

    def test_top_and_bottom_view_sets_disjoint(self, completed):
        ablation_run(completed, AblationMode.TOP_P, OBJECT_IDS)
        ablation_run(completed, AblationMode.BOTTOM_P, OBJECT_IDS)
        out = Path(completed.output_dir)
        for oid in OBJECT_IDS:
            record = json.loads((out / "rankings" / f"{oid}.json").read_text())
            ordered = [e["view_id"] for e in record["ordered"]]
            top = set(record["selected"])
            bottom = set(ordered[-6:])
            assert top.isdisjoint(bottom)  # 2P = 12 <= M = 28

    def test_horizontal_selection_is_grey_only(self, completed):
        path = ablation_run(completed, AblationMode.HORIZONTAL_P, OBJECT_IDS)
        ids = horizontal_view_ids(8)
        assert len(ids) == 6
        job = build_job("obj-0000", seed=completed.seed)
        by_id = {v.view_id: v for v in job.views}
        assert all(by_id[i].strategy is ViewStrategy.GREY_RAYTRACE for i in ids)
        assert path.exists()

    def test_horizontal_azimuth_rule(self):
        # Grey ring is 0,45,...,315; nearest to 0,60,...,300 with low-azimuth ties.
        assert horizontal_view_ids(8) == [0, 1, 3, 4, 5, 7]

    def test_all_views_mode_accepts_28_images(self, completed):
        path = ablation_run(completed, AblationMode.ALL_VIEWS, OBJECT_IDS)
        records = read_caption_csv(path)
        assert len(records) == 10

    def test_top_covers_at_least_bottom_attributes(self, completed):
        """Attribute coverage of top-6 summaries dominates bottom-6 on >=90%."""
        top_csv = read_caption_csv(ablation_run(completed, AblationMode.TOP_P, OBJECT_IDS))
        bottom_csv = read_caption_csv(ablation_run(completed, AblationMode.BOTTOM_P, OBJECT_IDS))
        world = mock_clients(completed).world
        bottom_by_id = {r.identifier: r.caption for r in bottom_csv}
        wins = 0
        for record in top_csv:
            truth = set(world.objects_by_id[record.identifier].tokens)
            top_cover = len(set(parse_tokens(record.caption)) & truth)
            bottom_cover = len(set(parse_tokens(bottom_by_id[record.identifier])) & truth)
            wins += top_cover >= bottom_cover
        assert wins >= 0.9 * len(top_csv)

    def test_missing_ranking_is_error(self, tmp_path):
        config = make_config(tmp_path)
        run_pipeline(config, OBJECT_IDS[:2], stop_after=Stage.CAPTIONED)
        from diffurank.pipeline import PipelineError

        with pytest.raises(PipelineError, match="no ranking"):
            ablation_run(config, AblationMode.TOP_P, OBJECT_IDS[:2])


class TestConfig:
    def test_toml_round_trip(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text(
            'output_dir = "{}"\nseed = 3\ntop_p = 4\n\n[world]\nnum_objects = 5\n'.format(
                (tmp_path / "out").as_posix()
            ),
            encoding="utf-8",
        )
        config = load_config(path)
        assert config.top_p == 4 and config.world.num_objects == 5

    def test_json_config(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"output_dir": str(tmp_path / "o"), "num_samples": 7}))
        assert load_config(path).num_samples == 7

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            config_from_dict({"output_dir": "x", "nonsense": 1})

    def test_counts_validated(self):
        with pytest.raises(ConfigError, match="top_p"):
            config_from_dict({"output_dir": "x", "top_p": 0})

    def test_top_p_bounded_by_views(self):
        with pytest.raises(ConfigError, match="exceeds"):
            config_from_dict({"output_dir": "x", "top_p": 29})

    def test_loss_mode_parsed(self):
        config = config_from_dict({"output_dir": "x", "loss_mode": "eps"})
        from diffurank.scoring import LossMode

        assert config.loss_mode is LossMode.EPS_PREDICTION
        with pytest.raises(ConfigError, match="loss_mode"):
            config_from_dict({"output_dir": "x", "loss_mode": "bogus"})


class TestCli:
    def _write_run_inputs(self, tmp_path):
        config_path = tmp_path / "cfg.toml"
        config_path.write_text(
            'output_dir = "{}"\n\n[world]\nnum_objects = 4\nseed = 4\n'.format(
                (tmp_path / "out").as_posix()
            ),
            encoding="utf-8",
        )
        ids_path = tmp_path / "ids.txt"
        ids_path.write_text("".join(f"obj-{i:04d}\n" for i in range(4)), encoding="utf-8")
        return config_path, ids_path

    def test_run_and_stats_and_ablate(self, tmp_path):
        runner = CliRunner()
        config_path, ids_path = self._write_run_inputs(tmp_path)
        result = runner.invoke(
            cli_main, ["run", "--config", str(config_path), "--objects", str(ids_path)]
        )
        assert result.exit_code == 0, result.output
        captions = tmp_path / "out" / "captions.csv"
        assert captions.exists()

        stats = runner.invoke(cli_main, ["stats", "--csv", str(captions)])
        assert stats.exit_code == 0
        payload = json.loads(stats.output)
        assert payload["num_captions"] == 4

        ablate = runner.invoke(
            cli_main,
            ["ablate", "--config", str(config_path), "--objects", str(ids_path),
             "--mode", "bottom"],
        )
        assert ablate.exit_code == 0, ablate.output
        assert (tmp_path / "out" / "captions_bottom_p.csv").exists()

    def test_run_partial_failure_exits_two(self, tmp_path):
        runner = CliRunner()
        config_path, ids_path = self._write_run_inputs(tmp_path)
        ids_path.write_text("obj-0000\nobj-nope\n", encoding="utf-8")
        result = runner.invoke(
            cli_main, ["run", "--config", str(config_path), "--objects", str(ids_path)]
        )
        assert result.exit_code == 2

    def test_bad_config_exits_three(self, tmp_path):
        runner = CliRunner()
        bad = tmp_path / "bad.toml"
        bad.write_text("top_p = 0\n", encoding="utf-8")
        ids = tmp_path / "ids.txt"
        ids.write_text("obj-0000\n")
        result = runner.invoke(cli_main, ["run", "--config", str(bad), "--objects", str(ids)])
        assert result.exit_code == 3

    def test_audit_command(self, tmp_path):
        runner = CliRunner()
        csv_path = tmp_path / "captions.csv"
        csv_path.write_text(
            'id-1,"a rendering of a chair"\nid-2,"a wooden chair"\n', encoding="utf-8"
        )
        result = runner.invoke(cli_main, ["audit", "--csv", str(csv_path)])
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload["flagged"] == [{"identifier": "id-1", "reasons": ["text"]}]

    def test_audit_with_thresholds(self, tmp_path):
        runner = CliRunner()
        csv_path = tmp_path / "captions.csv"
        csv_path.write_text("id-1,a chair\nid-2,a table\n", encoding="utf-8")
        thresholds = tmp_path / "t.json"
        thresholds.write_text(json.dumps({"mean_threshold": 0.5, "max_threshold": 0.6}))
        stats = tmp_path / "stats.csv"
        stats.write_text("id-1,0.4,0.5\nid-2,0.9,0.95\n", encoding="utf-8")
        result = runner.invoke(
            cli_main,
            ["audit", "--csv", str(csv_path), "--thresholds", str(thresholds),
             "--stats", str(stats)],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload["flagged"] == [{"identifier": "id-1", "reasons": ["clip"]}]

    def test_vqa_command_cosine(self, tmp_path):
        from diffurank.toy import generate_world, save_world
        from diffurank.vqa import make_toy_vqa_pairs, save_benchmark

        runner = CliRunner()
        world = generate_world(10, seed=6)
        world_path = tmp_path / "world.json"
        save_world(world, world_path)
        bench_path = tmp_path / "pairs.json"
        save_benchmark(bench_path, make_toy_vqa_pairs(world, 5, seed=1))
        result = runner.invoke(
            cli_main,
            ["vqa", "--bench", str(bench_path), "--world", str(world_path)],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert 0.0 <= payload["pair_accuracy"] <= 1.0
        assert len(payload["per_pair"]) == 5

    def test_vqa_command_diffusion(self, tmp_path, toy_world, trained_denoiser):
        from diffurank.toy import save_denoiser, save_world
        from diffurank.vqa import make_toy_vqa_pairs, save_benchmark

        runner = CliRunner()
        denoiser_path = tmp_path / "denoiser.npz"
        save_denoiser(trained_denoiser, denoiser_path)
        bench_path = tmp_path / "pairs.json"
        save_benchmark(bench_path, make_toy_vqa_pairs(toy_world, 5, seed=1))
        result = runner.invoke(
            cli_main,
            ["vqa", "--bench", str(bench_path), "--scorer", "diffusion",
             "--denoiser", str(denoiser_path), "--num-samples", "16"],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload["pair_accuracy"] >= 0.8

    def test_render_adapter_contract(self, tmp_path):
        from diffurank.render import build_job, job_to_json
        from diffurank.toy import generate_world, save_world

        runner = CliRunner()
        world = generate_world(2, seed=3)
        world_path = tmp_path / "world.json"
        save_world(world, world_path)
        job = build_job("obj-0001", seed=3)
        job_path = tmp_path / "job.json"
        job_path.write_text(job_to_json(job), encoding="utf-8")
        out_dir = tmp_path / "renders"
        result = runner.invoke(
            cli_main,
            ["render-adapter", "--job", str(job_path), "--out", str(out_dir),
             "--world", str(world_path)],
        )
        assert result.exit_code == 0, result.output
        assert (out_dir / "obj-0001" / "cameras.json").exists()
        assert (out_dir / "obj-0001" / "0.png").exists()

    def test_make_world_command(self, tmp_path):
        runner = CliRunner()
        out = tmp_path / "w.json"
        result = runner.invoke(cli_main, ["make-world", "--out", str(out), "--num-objects", "3"])
        assert result.exit_code == 0
        from diffurank.toy import load_world

        assert len(load_world(out).objects) == 3
