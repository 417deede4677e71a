import json

import pytest
from click.testing import CliRunner

from tirkit import cli, fixtures, pipeline
from tirkit.errors import UpstreamError
from tirkit.gateway import mock_serve
from tirkit.types import write_sample_records

from test_pipeline import make_cfg, world_client


@pytest.fixture
def runner():
    return CliRunner()


def base_args(tmp_path, url):
    sft = tmp_path / "sft.jsonl"
    eval_set = tmp_path / "eval.jsonl"
    corpus = tmp_path / "corpus.jsonl"
    write_sample_records(sft, fixtures.world_samples())
    write_sample_records(eval_set, fixtures.eval_samples())
    fixtures.write_fixture_corpus(corpus)
    cfg_file = tmp_path / "cfg.ini"
    cfg_file.write_text(
        "[run]\n"
        f"run_dir = {tmp_path / 'run'}\n"
        f"endpoint = {url}\n"
        "seed = 7\n"
        "[data]\n"
        f"sft_corpus = {sft}\n"
        "[tool]\n"
        f"search.corpus = {corpus}\n"
        "[loop]\n"
        f"eval_set = {eval_set}\n")
    return ["--config", str(cfg_file)]


class TestGlobalFlags:
    def test_print_effective_config(self, runner):
        result = runner.invoke(cli.main, ["--print-effective-config"])
        assert result.exit_code == 0
        eff = json.loads(result.output)
        assert eff["sampling"]["m"] == 10

    def test_seed_flag_overrides(self, runner):
        result = runner.invoke(cli.main, ["--seed", "99",
                                          "--print-effective-config"])
        assert json.loads(result.output)["run"]["seed"] == 99

    def test_bad_config_path_exits_2(self, runner):
        result = runner.invoke(cli.main, ["--config", "/nope.ini",
                                          "--print-effective-config"])
        assert result.exit_code == 2


class TestSubcommandFlow:
    def test_full_flow_over_http(self, runner, tmp_path):
        with mock_serve(fixtures.world_scenario()) as handle:
            args = base_args(tmp_path, handle.url)
            steps = (["infer-baseline"],
                     ["sample", "--strategy", "vanilla"],
                     ["sample", "--strategy", "entropy"],
                     ["curate", "--criteria", "Cri1"])
            for step in steps:
                result = runner.invoke(cli.main, args + step)
                assert result.exit_code == 0, (step, result.output)
            pairs_path = tmp_path / "run" / "loop_1" / "pairs.jsonl"
            assert pairs_path.exists()

            result = runner.invoke(cli.main, args + ["validate-pairs",
                                                     str(pairs_path)])
            assert result.exit_code == 0 and result.output.strip() == "ok"

            result = runner.invoke(cli.main, args + ["evaluate", "--tag", "t"])
            assert result.exit_code == 0
            assert "model: mean_score=" in result.output

            result = runner.invoke(cli.main, args + ["report"])
            assert result.exit_code == 0 and "Run report" in result.output

    def test_validate_pairs_flags_violations(self, runner, tmp_path):
        pairs = tmp_path / "pairs.jsonl"
        cfg = make_cfg(tmp_path)
        run_dir = tmp_path / "run"
        pipeline.cmd_infer_baseline(cfg, run_dir, client=world_client())
        for strategy in ("vanilla", "entropy"):
            pipeline.cmd_sample(cfg, run_dir, strategy, client=world_client())
        clean = pipeline.cmd_curate(cfg, run_dir, "Cri1")
        rows = clean.read_text().strip().splitlines()
        row = json.loads(rows[0])
        row["meta"]["chosen_tool_calls"] = 9
        pairs.write_text(json.dumps(row) + "\n")
        result = runner.invoke(cli.main, ["validate-pairs", str(pairs)])
        assert result.exit_code == 2
        assert "declares 9 tool calls" in result.output

    def test_missing_input_exits_2(self, runner, tmp_path):
        result = runner.invoke(cli.main, ["--run-dir", str(tmp_path),
                                          "sample", "--strategy", "vanilla"])
        assert result.exit_code == 2

    def test_upstream_error_exits_3(self, runner, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise UpstreamError("endpoint down")
        monkeypatch.setattr(pipeline, "cmd_evaluate", boom)
        args = ["--run-dir", str(tmp_path), "evaluate", "--method", "a=http://x"]
        result = runner.invoke(cli.main, args)
        assert result.exit_code == 3

    def test_bad_method_spec_exits_2(self, runner, tmp_path):
        result = runner.invoke(cli.main, ["--run-dir", str(tmp_path),
                                          "evaluate", "--method", "nourl"])
        assert result.exit_code == 2

    def test_report_without_reports_exits_2(self, runner, tmp_path):
        result = runner.invoke(cli.main, ["--run-dir", str(tmp_path), "report"])
        assert result.exit_code == 2
