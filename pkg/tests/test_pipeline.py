import json
import subprocess
import sys

import pytest

from kbcmlm._io import file_sha256, read_json, write_json
from kbcmlm.cli import main
from kbcmlm.pipeline import STAGES, Flags, MissingInput, Pipeline, PipelineConfig, output_hashes
from kbcmlm.synthetic import desk_config, generate_world, write_world


def small_config(directory, **overrides):
    paths = write_world(generate_world(0, n_sentences=300), directory)
    cfg = desk_config(paths)
    cfg.update(
        base_vocab_size=200,
        model={"hidden": 16, "layers": 1, "heads": 2, "ff": 32, "max_seq_len": 32},
        pretrain={"learning_rate": 1e-3, "epochs": 2, "batch_size": 32},
        repretrain={"learning_rate": 1e-3, "epochs": 1, "batch_size": 32},
        finetune={"learning_rate": 1e-3, "epochs": 1, "batch_size": 16},
        inference={"grid": [0.1, 0.2, 0.5]},
    )
    cfg.update(overrides)
    path = directory / "config.json"
    write_json(path, cfg)
    return path


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    return small_config(tmp_path_factory.mktemp("world"))


@pytest.fixture(scope="module")
def full_run(world, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run-all", "--config", str(world), "--out-dir", str(out)]) == 0
    return out


def stage_hashes(out):
    return {s: output_hashes(out / s) for s in STAGES if (out / s).exists()}


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            PipelineConfig.from_dict({"sed": 1})

    def test_unknown_path_key(self):
        with pytest.raises(ValueError, match="unknown path keys"):
            PipelineConfig.from_dict({"paths": {"corpse": "x"}})

    def test_sections_merge(self, world):
        cfg = PipelineConfig.load(world)
        assert cfg.finetune["epochs"] == 1
        assert tuple(cfg.finetune["betas"]) == (0.9, 0.999)
        assert cfg.inference["top_k"] == 20
        assert cfg.path("corpus").exists()

    def test_seed_propagates(self, world):
        cfg = PipelineConfig.load(world)
        cfg.seed = 9
        assert cfg.train_config("finetune").seed == 9
        assert cfg.model_config(10).seed == 9


def test_run_all_artifacts(full_run):
    for stage in STAGES:
        manifest = read_json(full_run / stage / "manifest.json")
        assert manifest["stage"] == stage
        assert manifest["outputs"] == output_hashes(full_run / stage)
        assert "duration_s" in manifest and manifest["inputs"]
    report = read_json(full_run / "evaluate" / "report.json")
    assert set(report["per_relation"]) == {"CountryBordersCountry", "CountryHasOfficialLanguage", "PersonHasPlaceOfDeath"}
    rows = (full_run / "finetune" / "loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,split,loss" and rows[1].startswith("0,train,")
    assert not list(full_run.glob("*.partial"))


def test_stages_individually_match_run_all(world, full_run, tmp_path):
    for stage in STAGES:
        assert main([stage, "--config", str(world), "--out-dir", str(tmp_path)]) == 0
    assert stage_hashes(tmp_path) == stage_hashes(full_run)


def test_rerun_is_skipped_and_identical(world, full_run, capsys):
    before = file_sha256(full_run / "build-vocab" / "vocab.jsonl")
    assert main(["build-vocab", "--config", str(world), "--out-dir", str(full_run)]) == 0
    assert "unchanged" in capsys.readouterr().out
    assert main(["build-vocab", "--config", str(world), "--out-dir", str(full_run), "--force"]) == 0
    assert "done" in capsys.readouterr().out
    assert file_sha256(full_run / "build-vocab" / "vocab.jsonl") == before


def test_evaluate_identity(world, capsys):
    test = PipelineConfig.load(world).path("test")
    assert main(["evaluate", "--config", str(world), "--predictions", str(test), "--format", "json", "--min-f1", "1.0"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["overall"]["f1"] == 1.0
    assert all(m["f1"] == 1.0 for m in data["per_relation"].values())


def test_min_f1_gate(world, full_run):
    assert main(["evaluate", "--config", str(world), "--out-dir", str(full_run), "--min-f1", "1.01"]) == 3


def test_missing_input_names_stage(world, tmp_path, capsys):
    assert main(["finetune", "--config", str(world), "--out-dir", str(tmp_path)]) == 2
    assert "'repretrain' stage" in capsys.readouterr().err
    with pytest.raises(MissingInput, match="'pretrain' stage"):
        Pipeline(PipelineConfig.load(world), tmp_path, Flags(no_expand=True)).finetune()


def test_missing_external_file(world, tmp_path):
    cfg = PipelineConfig.load(world)
    cfg.paths["corpus"] = "nope.txt"
    with pytest.raises(MissingInput, match="paths.corpus"):
        Pipeline(cfg, tmp_path).run_all()


def test_failure_leaves_partial(world, full_run, tmp_path, capsys):
    templates = tmp_path / "templates.json"
    write_json(templates, {"CountryBordersCountry": "{subject} borders {mask}."})
    raw = read_json(world)
    raw["paths"] = {k: str(world.parent / v) for k, v in raw["paths"].items()}
    raw["paths"]["templates"] = str(templates)
    cfg_path = tmp_path / "config.json"
    write_json(cfg_path, raw)
    out = tmp_path / "run"
    for stage in ("build-vocab", "pretrain", "recode", "filter-corpus", "repretrain"):
        (out / stage).parent.mkdir(parents=True, exist_ok=True)
        subprocess.run(["cp", "-r", str(full_run / stage), str(out / stage)], check=True)
    assert main(["finetune", "--config", str(cfg_path), "--out-dir", str(out)]) == 1
    assert "missing template" in capsys.readouterr().err
    assert (out / "finetune.partial").is_dir()
    assert not (out / "finetune").exists()


def test_ablation_flags(world, full_run, tmp_path):
    out = tmp_path / "run"
    subprocess.run(["cp", "-r", str(full_run), str(out)], check=True)
    pipe = Pipeline(PipelineConfig.load(world), out, Flags(no_expand=True))
    assert pipe.stage_plan() == ["build-vocab", "pretrain", "finetune", "sweep", "predict", "evaluate"]
    results = {r.stage: r for r in pipe.run_all()}
    assert results["pretrain"].skipped and not results["finetune"].skipped
    assert read_json(out / "finetune" / "manifest.json")["params"]["source"] == "pretrain"

    pipe = Pipeline(PipelineConfig.load(world), out, Flags(no_pretrain=True, no_recode=True))
    results = {r.stage: r for r in pipe.run_all()}
    assert "repretrain" not in results and not results["recode"].skipped
    assert read_json(out / "recode" / "manifest.json")["params"]["no_recode"] is True
    assert read_json(out / "finetune" / "manifest.json")["params"]["source"] == "recode"


def test_preset_override(world, tmp_path):
    from kbcmlm.cli import _config, build_parser

    args = build_parser().parse_args(["pretrain", "--config", str(world), "--preset", "paper-pretrain", "--seed", "4"])
    cfg = _config(args)
    assert cfg.pretrain["learning_rate"] == 2e-5 and cfg.repretrain["epochs"] == 20
    assert cfg.train_config("pretrain").seed == 4


def test_synthetic_subcommand(tmp_path, capsys):
    assert main(["synthetic", "--out-dir", str(tmp_path), "--sentences", "200"]) == 0
    cfg = PipelineConfig.load(tmp_path / "config.json")
    for key in ("corpus", "train", "valid", "test", "kg_dump", "resolver"):
        assert cfg.path(key).exists()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "kbcmlm", "--help"], capture_output=True, text=True, check=True)
    for stage in (*STAGES, "run-all"):
        assert stage in out.stdout
