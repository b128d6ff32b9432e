import hashlib
import json
import re
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from checkpoints import CheckpointFormatError, load_checkpoint, save_checkpoint
from cli import cli
from config import MAX_WORKERS_ENV
from experiment_config import ConfigError, config_schema, load_config, parse_config
from experiment_pipeline import COMMANDS, MabeLaboratory, max_workers
from q_models import OneHiddenLayerSpec, TabularNGramSpec, init_model
from report_generators import emit_report, jsonable


SAMPLE_CONFIGS = sorted((Path(__file__).parent / "sample_configs").glob("*.json"))


def small_config(run_dir, **extra):
    data = {
        "seed": 0,
        "output_dir": str(run_dir),
        "task": {"kind": "noisy_copy", "vocab_size": 4, "length": 2, "eps": 0.2},
        "model": {"kind": "tabular", "order": 1},
        "train": {"steps": 20, "eval_every": 10, "probe_size": 4, "batch_size": 8},
        "decode": {"betas": [1.0], "beam_sizes": [1, 2]},
        "eval_instances": 5,
        "sweep": {"lambdas": [0.0, 1.0]},
        "theorem": {"random_instances": 3, "max_vocab": 6},
        "gradcheck": {"pairs": 3},
    }
    data.update(extra)
    return data


def write_config(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


@pytest.fixture
def run_dir(tmp_path):
    return tmp_path / "run"


@pytest.fixture
def laboratory(run_dir):
    return MabeLaboratory(parse_config(small_config(run_dir)))


class TestExperimentConfig:
    def test_defaults(self, tmp_path):
        config = parse_config({"seed": 3, "output_dir": str(tmp_path)})
        assert config.task.kind == "noisy_copy"
        assert config.model.kind == "tabular"
        assert config.train_config().seed == 3
        assert config.utility.delta == "exact_match"

    def test_missing_seed(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            parse_config({"output_dir": str(tmp_path)})
        assert ("seed", "Field required") in info.value.errors

    def test_unknown_field_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="colour"):
            parse_config({"seed": 0, "output_dir": str(tmp_path), "colour": "blue"})

    def test_overrides(self, tmp_path):
        path = write_config(tmp_path / "config.json", small_config(tmp_path / "run"))
        config = load_config(path, {"seed": 9, "train.lambda": 0.5, "decode.rules": ["map"], "checkpoint": None})
        assert config.seed == 9
        assert config.train.lambda_ == 0.5
        assert config.decode.rules == ["map"]
        assert config.checkpoint is None

    def test_file_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(str(tmp_path / "missing.json"))
        broken = tmp_path / "broken.json"
        broken.write_text('{"seed": 0,\n  "output_dir": }', encoding="utf-8")
        with pytest.raises(ConfigError, match="line 2"):
            load_config(str(broken))

    def test_hash_is_canonical(self, tmp_path):
        data = small_config(tmp_path)
        reordered = dict(reversed(list(data.items())))
        assert parse_config(data).config_hash() == parse_config(reordered).config_hash()
        assert parse_config(data).config_hash() != parse_config({**data, "seed": 1}).config_hash()

    def test_schema_names_sections(self):
        properties = config_schema()["properties"]
        assert {"seed", "output_dir", "task", "model", "train", "decode"} <= set(properties)

    @pytest.mark.parametrize("path", SAMPLE_CONFIGS, ids=lambda p: p.stem)
    def test_sample_configs_load(self, path):
        config = load_config(str(path))
        assert config.output_dir.startswith("runs/")


class TestCheckpoints:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = init_model(OneHiddenLayerSpec(embed_dim=3, hidden_dim=5), 4, seed=11)
        model.params[:] = model.params * np.pi
        model.steps = 42
        path = save_checkpoint(model, str(tmp_path / "ckpt" / "model.json"))
        restored = load_checkpoint(path, vocab_size=4)
        assert_array_equal(restored.params, model.params)
        assert restored.steps == 42
        assert restored.spec == model.spec

    def test_vocabulary_mismatch(self, tmp_path):
        path = save_checkpoint(init_model(TabularNGramSpec(), 4), str(tmp_path / "model.json"))
        with pytest.raises(CheckpointFormatError) as info:
            load_checkpoint(path, vocab_size=5)
        assert info.value.field == "vocab_size"

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "format": "mabe-lab-checkpoint",\n  "params": [1,\n}', encoding="utf-8")
        with pytest.raises(CheckpointFormatError) as info:
            load_checkpoint(str(path))
        assert info.value.line == 4

    @pytest.mark.parametrize("field, value, expected", [
        ("params", ["0.5"], "params"),
        ("family", {"kind": "lstm"}, "family.kind"),
        ("format", "other", "format"),
        ("vocab_size", 1, "vocab_size"),
        ("vocab_size", -3, "vocab_size"),
        ("vocab_size", "3", "vocab_size"),
    ])
    def test_bad_fields(self, tmp_path, field, value, expected):
        path = save_checkpoint(init_model(TabularNGramSpec(), 3), str(tmp_path / "model.json"))
        document = json.loads(Path(path).read_text(encoding="utf-8"))
        document[field] = value
        Path(path).write_text(json.dumps(document), encoding="utf-8")
        with pytest.raises(CheckpointFormatError) as info:
            load_checkpoint(path)
        assert info.value.field == expected

    def test_non_finite_parameter(self, tmp_path):
        path = save_checkpoint(init_model(TabularNGramSpec(), 3), str(tmp_path / "model.json"))
        document = json.loads(Path(path).read_text(encoding="utf-8"))
        document["params"][2] = "nan"
        Path(path).write_text(json.dumps(document), encoding="utf-8")
        with pytest.raises(CheckpointFormatError, match="non-finite"):
            load_checkpoint(path)


class TestReports:
    def test_jsonable_tokens(self):
        assert jsonable({"a": [-np.inf, np.float64(1.5), np.int64(2)]}) == {"a": ["-inf", 1.5, 2]}

    def test_empty_run_directory(self, tmp_path):
        result = emit_report(str(tmp_path))
        assert not result["success"]
        assert "manifest.json" in result["missing"]
        assert result["files"] == []

    def test_manifest_without_inputs(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{}", encoding="utf-8")
        result = emit_report(str(tmp_path))
        assert not result["success"]
        assert set(result["missing"]) == {"train_log.csv", "sweep.csv", "eval_table.csv"}


class TestLaboratory:
    def test_train_writes_log_and_manifest(self, laboratory, run_dir):
        result = laboratory.run("train")
        assert result["success"]
        log = pd.read_csv(run_dir / "train_log.csv")
        assert log["step"].iloc[0] == 1
        assert "wall_clock_ms" not in log.columns
        assert "wall_clock_ms" in pd.read_csv(run_dir / "timings.csv").columns

        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["command"] == "train"
        assert manifest["complete"]
        assert manifest["config_hash"] == laboratory.config.config_hash()
        entries = {entry["path"]: entry for entry in manifest["files"]}
        assert {"train_log.csv", "timings.csv", "checkpoints/final.json"} <= set(entries)
        data = (run_dir / "train_log.csv").read_bytes()
        assert entries["train_log.csv"]["sha256"] == hashlib.sha256(data).hexdigest()

    def test_training_is_reproducible(self, tmp_path):
        first = MabeLaboratory(parse_config(small_config(tmp_path / "a")))
        second = MabeLaboratory(parse_config(small_config(tmp_path / "b")))
        first.run("train")
        second.run("train")
        for name in ("train_log.csv", "checkpoints/final.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_decode_and_evaluate_need_a_checkpoint(self, laboratory, run_dir):
        result = laboratory.run("evaluate")
        assert not result["success"]
        assert result["error"] == "FileNotFoundError"
        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
        assert not manifest["complete"]
        assert "train" in manifest["error"]

    def test_decode_evaluate_report(self, laboratory, run_dir):
        laboratory.run("train")
        assert laboratory.run("decode")["success"]
        records = json.loads((run_dir / "decode_results.json").read_text(encoding="utf-8"))
        # greedy, sample_beta1, beam1, beam2, map under two scorers
        assert len(records) == 5 * 2 * 5
        assert all(record["tokens"][-1] == 0 for record in records)

        assert laboratory.run("evaluate")["rows"] == 10
        table = pd.read_csv(run_dir / "eval_table.csv")
        assert set(table["rule"]) == {"greedy", "sample_beta1", "beam1", "beam2", "map"}

        result = laboratory.run("report")
        assert result["success"]
        assert result["missing"] == ["sweep.csv"]
        for name in ("training.svg", "beam_size.svg", "summary.txt"):
            assert (run_dir / "report" / name).exists()

    def test_sweep_shares_data_order(self, laboratory, run_dir, monkeypatch):
        monkeypatch.setenv(MAX_WORKERS_ENV, "1")
        assert laboratory.run("sweep")["branches"] == 2
        sweep = pd.read_csv(run_dir / "sweep.csv")
        assert set(sweep["lambda"]) == {0.0, 1.0}
        final = pd.read_csv(run_dir / "sweep_final.csv")
        assert len(final) == 2

    def test_sweep_and_report_are_byte_identical_across_workers(self, tmp_path, monkeypatch):
        lambdas = [-2.0, -1.0, 0.0, 1.0, 2.0]
        outputs = ["sweep.csv", "sweep_final.csv", "report/lambda_sweep.svg", "report/lambda_curves.csv"]
        runs = []
        for name, workers in (("a", "2"), ("b", "2"), ("c", "1")):
            monkeypatch.setenv(MAX_WORKERS_ENV, workers)
            lab = MabeLaboratory(parse_config(small_config(tmp_path / name, sweep={"lambdas": lambdas})))
            assert lab.run("sweep")["branches"] == 5
            assert lab.run("report")["success"]
            runs.append({output: (tmp_path / name / output).read_bytes() for output in outputs})
        assert runs[0] == runs[1] == runs[2]

        svg = runs[0]["report/lambda_sweep.svg"].decode("utf-8")
        assert re.findall(r">lambda=(-?\d+)<", svg) == ["-2", "-1", "0", "1", "2"]
        curves = pd.read_csv(tmp_path / "a" / "report" / "lambda_curves.csv")
        assert sorted(curves["lambda"].unique()) == lambdas

    def test_theorem(self, laboratory, run_dir):
        result = laboratory.run("theorem")
        assert result["success"]
        assert result["fixed_points"] == 5
        summary = pd.read_csv(run_dir / "fixed_points.csv")
        assert summary["converged"].all()
        assert (run_dir / "landscape.csv").exists()
        oracles = json.loads((run_dir / "oracle_checks.json").read_text(encoding="utf-8"))
        assert [o["check"] for o in oracles] == ["map_optimality", "sampling_soundness"]
        assert all(o["passed"] for o in oracles)

    def test_gradcheck(self, laboratory, run_dir):
        result = laboratory.run("gradcheck")
        assert result["success"]
        report = json.loads((run_dir / "gradcheck.json").read_text(encoding="utf-8"))
        assert report["passed"]
        assert report["family"] == "tabular"

    def test_unknown_command(self, laboratory):
        result = laboratory.run("deploy")
        assert not result["success"]
        assert result["error"] == "ValueError"
        assert "deploy" not in COMMANDS

    def test_worker_cap(self, monkeypatch):
        monkeypatch.setenv(MAX_WORKERS_ENV, "3")
        assert max_workers(10) == 3
        assert max_workers(2) == 2
        monkeypatch.setenv(MAX_WORKERS_ENV, "0")
        assert max_workers(5) == 1


class TestCli:
    def test_train_exit_code(self, tmp_path):
        config = write_config(tmp_path / "config.json", small_config(tmp_path / "run"))
        assert cli(["train", "--config", config]) == 0
        assert (tmp_path / "run" / "logs" / "run.log").exists()

    def test_invalid_configuration(self, tmp_path):
        config = write_config(tmp_path / "config.json", {"output_dir": str(tmp_path / "run")})
        assert cli(["train", "--config", config]) == 2

    def test_command_failure(self, tmp_path):
        config = write_config(tmp_path / "config.json", small_config(tmp_path / "run"))
        assert cli(["evaluate", "--config", config]) == 1

    def test_flag_overrides(self, tmp_path):
        config = write_config(tmp_path / "config.json", small_config(tmp_path / "run"))
        assert cli(["train", "--config", config, "--lambda", "0.5", "--seed", "4", "--out", str(tmp_path / "other")]) == 0
        manifest = json.loads((tmp_path / "other" / "manifest.json").read_text(encoding="utf-8"))
        expected = load_config(config, {"train.lambda": 0.5, "seed": 4, "output_dir": str(tmp_path / "other")})
        assert manifest["config_hash"] == expected.config_hash()

    def test_schema(self, capsys):
        assert cli(["schema"]) == 0
        assert "output_dir" in json.loads(capsys.readouterr().out)["properties"]
