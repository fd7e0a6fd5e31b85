import json

import pytest

from ecg_eat.cli import build_parser, main
from ecg_eat.module_utils.config import validate_config
from ecg_eat.module_utils.errors import InvalidArgument
from ecg_eat.pipeline import PIPELINE_STAGES, RunContext, run_pipeline, run_stage


@pytest.fixture
def config_path(tmp_path, small_config):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(small_config), encoding="utf-8")
    return path


def _run(argv):
    with pytest.raises(SystemExit) as excinfo:
        main(argv)
    return excinfo.value.code


class TestCommandLine:
    def test_parser_defaults_to_every_stage(self):
        params = build_parser().parse_args(["run"])
        assert params.stages == list(PIPELINE_STAGES)
        assert params.config is None and not params.verbose

    def test_unknown_stage_is_a_usage_error(self):
        assert _run(["run", "--stages", "deploy"]) == 2

    def test_gen_writes_the_splits(self, config_path, small_config, capsys):
        assert _run(["gen", "--config", str(config_path), "--quiet"]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["failed"] is False
        assert set(result["stages"]) == {"gen"}
        run_dir = RunContext.from_config(validate_config(small_config)).store.root
        splits = json.loads((run_dir / "data" / "splits.json").read_text(encoding="utf-8"))
        assert set(splits) == {"train", "val", "test"}
        assert all(splits[split] for split in splits)
        assert (run_dir / "config.json").is_file()

    def test_seed_and_output_overrides(self, config_path, tmp_path, capsys):
        out = tmp_path / "elsewhere"
        assert _run(["gen", "--config", str(config_path), "--seed", "9", "--out", str(out), "--quiet"]) == 0
        assert json.loads(capsys.readouterr().out)["output_dir"] == str(out)
        assert json.loads((out / "config.json").read_text(encoding="utf-8"))["seed"] == 9

    def test_invalid_configuration_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"data": {"split": [1.0]}}), encoding="utf-8")
        assert _run(["gen", "--config", str(path), "--out", str(tmp_path / "run"), "--quiet"]) == 2
        assert '"failed": true' in capsys.readouterr().err

    def test_report_of_an_empty_run_exits_3(self, config_path, capsys):
        assert _run(["report", "--config", str(config_path), "--quiet"]) == 3
        assert '"exit_code": 3' in capsys.readouterr().err

    def test_stage_before_its_prerequisite_exits_3(self, config_path):
        assert _run(["gen", "--config", str(config_path), "--quiet"]) == 0
        assert _run(["run", "--stages", "train", "--config", str(config_path), "--quiet"]) == 3


class TestPipeline:
    def test_unknown_stages(self, small_config):
        ctx = RunContext.from_config(validate_config(small_config))
        with pytest.raises(InvalidArgument):
            run_pipeline(ctx, ["preprocess", "deploy"])
        with pytest.raises(InvalidArgument):
            run_stage(ctx, "deploy")

    def test_manifest_records_each_stage(self, small_config):
        ctx = RunContext.from_config(validate_config(small_config))
        run_stage(ctx, "gen")
        entries = run_pipeline(ctx, ["balance", "preprocess"])
        assert list(entries) == ["preprocess", "balance"]
        manifest = ctx.store.manifest()
        assert set(manifest["stages"]) == {"gen", "preprocess", "balance"}
        assert manifest["stages"]["balance"]["config"] == ctx.digest
        assert ctx.store.missing_outputs() == {}
        report = ctx.store.get("balanced/report.json").json
        counts = report["class_counts"]["after"]
        assert len(set(counts.values())) == 1

    @pytest.mark.slow
    def test_full_run_is_reproducible(self, config_path, tmp_path, capsys):
        verdicts = []
        for name in ("first", "second"):
            out = tmp_path / name
            assert _run(["gen", "--config", str(config_path), "--out", str(out), "--quiet"]) == 0
            assert _run(["run", "--config", str(config_path), "--out", str(out), "--quiet"]) == 0
            assert _run(["report", "--config", str(config_path), "--out", str(out), "--quiet"]) == 0
            for path in ("eat/verdict.json", "eat/summary.csv", "report/summary.txt", "report/models.csv",
                         "robustness/noise.csv", "fusion/late_weights.json", "attacks/reports.json"):
                assert (out / path).is_file(), path
            verdicts.append((out / "eat" / "verdict.json").read_text(encoding="utf-8"))
        assert verdicts[0] == verdicts[1]
        verdict = json.loads(verdicts[0])
        assert verdict["model"] == "certified"
        assert set(verdict) >= {"c1_fidelity", "c2_dependence", "c3_robustness", "c4_architecture", "overall"}
