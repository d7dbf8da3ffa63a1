import json
from pathlib import Path

import pytest

from edit_distill.cli import PipelineConfig, dump_config, load_config, run
from edit_distill.records import read_cot_records, read_dual_records

TINY_CFG = {
    "d_model": 16,
    "n_layers": 1,
    "n_heads": 2,
    "d_ff": 32,
    "max_seq": 160,
    "sft_epochs": 1,
    "krsl_epochs": 1,
    "sft_learning_rate": 1e-3,
    "krsl_learning_rate": 1e-4,
    "eval_max_new": 8,
}


def write_cfg(tmp_path, extra=None):
    cfg = dict(TINY_CFG)
    if extra:
        cfg.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_version_exit_zero(capsys):
    assert run(["--version"]) == 0
    out = capsys.readouterr().out.strip()
    assert out.count(".") == 2


def test_unknown_subcommand_is_usage_error():
    assert run(["frobnicate"]) == 1


def test_no_subcommand_prints_usage():
    assert run([]) == 1


def test_missing_input_file_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    code = run(["stats", "--dual", str(missing)])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_load_config_defaults():
    cfg = load_config(None)
    assert cfg.alpha == 1.0
    assert cfg.beta == 0.025
    assert cfg.temperature == 0.2
    assert cfg.sft_learning_rate == 2e-4
    assert cfg.krsl_learning_rate == 5e-6


def test_load_config_empty_object(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    assert load_config(path) == PipelineConfig()


def test_load_config_unknown_key(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"alphaa": 1}')
    with pytest.raises(ValueError, match="unknown key alphaa"):
        load_config(path)


def test_config_round_trip(tmp_path):
    cfg = PipelineConfig()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(dump_config(cfg)))
    assert load_config(path) == cfg


def test_config_cli_error_code(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{"alphaa": 1}')
    code = run(["synth", "--n", "2", "--out", str(tmp_path / "o"),
                "--config", str(path)])
    assert code == 2
    assert "alphaa" in capsys.readouterr().err


def test_synth_writes_outputs(tmp_path):
    out = tmp_path / "synth"
    assert run(["synth", "--n", "8", "--heldout", "2", "--seed", "3",
                "--out", str(out)]) == 0
    for name in ("questions.jsonl", "heldout.jsonl", "fewshot.json",
                 "dual_reference.jsonl", "manifest.json"):
        assert (out / name).exists(), name
    assert (out / "fixtures").is_dir()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert manifest["tool_version"]


def test_stage_commands_compose(tmp_path, capsys):
    """synth -> annotate -> rectify -> corrupt -> pair -> merge via CLI."""
    out = tmp_path / "run"
    assert run(["synth", "--n", "10", "--seed", "5", "--out", str(out)]) == 0
    fixtures = str(out / "fixtures")
    common = ["--fewshot", str(out / "fewshot.json"), "--fixtures", fixtures]

    assert run(["annotate", "--questions", str(out / "questions.jsonl"),
                *common, "--out", str(out / "annotated.jsonl")]) == 0
    annotated = read_cot_records(out / "annotated.jsonl")
    assert len(annotated) == 10

    assert run(["rectify", "--data", str(out / "annotated.jsonl"),
                *common, "--out", str(out / "rectified.jsonl")]) == 0
    assert run(["corrupt", "--data", str(out / "annotated.jsonl"),
                "--rectified", str(out / "rectified.jsonl"),
                "--seed", "5",
                *common, "--out", str(out / "corrupted.jsonl")]) == 0
    assert run(["pair", "--annotated", str(out / "annotated.jsonl"),
                "--rectified", str(out / "rectified.jsonl"),
                "--corrupted", str(out / "corrupted.jsonl"),
                "--out", str(out / "dual.jsonl")]) == 0
    duals = read_dual_records(out / "dual.jsonl")
    assert len(duals) == 10
    # CLI-composed duals reproduce the generator's reference pairing
    reference = read_dual_records(out / "dual_reference.jsonl")
    assert sorted(d.id for d in duals) == sorted(d.id for d in reference)
    assert {d.id: d.cot_pos for d in duals} == {d.id: d.cot_pos for d in reference}

    assert run(["merge", "--annotated", str(out / "annotated.jsonl"),
                "--rectified", str(out / "rectified.jsonl"),
                "--out", str(out / "merged.jsonl")]) == 0
    merged = read_cot_records(out / "merged.jsonl")
    assert len(merged) == 10


def test_align_and_stats_commands(tmp_path, capsys):
    pos = tmp_path / "pos.txt"
    neg = tmp_path / "neg.txt"
    pos.write_text("the answer is right")
    neg.write_text("the answer is wrong")
    assert run(["align", "--pos", str(pos), "--neg", str(neg)]) == 0
    out = capsys.readouterr().out
    assert "edit distance: 1" in out
    assert "replace" in out

    dual = tmp_path / "d.jsonl"
    dual.write_text(json.dumps({
        "id": "x", "question": "q",
        "cot_pos": "a b c d", "cot_neg": "a b x d", "source": "pos_dual",
    }) + "\n")
    assert run(["stats", "--dual", str(dual)]) == 0
    out = capsys.readouterr().out
    assert "mean key-step proportion: 0.2500" in out


def test_classify_command(tmp_path):
    out = tmp_path / "run"
    assert run(["synth", "--n", "6", "--seed", "9", "--out", str(out)]) == 0
    # classify against fixtures that don't hold these requests -> exit 2
    code = run(["classify", "--dual", str(out / "dual_reference.jsonl"),
                "--fixtures", str(out / "fixtures"),
                "--out", str(out / "labels.json")])
    assert code == 2


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("pipe")
    cfg = write_cfg(tmp_path)
    out = tmp_path / "p1"
    code = run(["pipeline", "--synthetic", "--n", "12", "--heldout", "4",
                "--seed", "4", "--out", str(out), "--config", cfg])
    return code, out, cfg, tmp_path


def test_pipeline_end_to_end(pipeline_run, capsys):
    code, out, _, _ = pipeline_run
    assert code == 0
    for name in ("questions.jsonl", "heldout.jsonl", "annotated.jsonl",
                 "rectified.jsonl", "corrupted.jsonl", "dual.jsonl",
                 "merged.jsonl", "vocab.tsv", "sft.ckpt", "krsl.ckpt",
                 "std_cot.ckpt", "sft_report.json", "krsl_report.json",
                 "std_cot_report.json", "eval_edit.json", "eval_wo_krsl.json",
                 "eval_std_cot.json", "comparison.txt", "manifest.json"):
        assert (out / name).exists(), name
    table = (out / "comparison.txt").read_text()
    assert "EDIT" in table and "Std-CoT" in table and "AVG" in table


def test_pipeline_stage_tags(pipeline_run):
    code, out, _, _ = pipeline_run
    assert code == 0
    from edit_distill import lm

    assert lm.load_checkpoint(out / "sft.ckpt").stage == "sft"
    assert lm.load_checkpoint(out / "krsl.ckpt").stage == "krsl"
    assert lm.load_checkpoint(out / "std_cot.ckpt").stage == "sft"


def test_eval_and_compare_commands(pipeline_run, tmp_path, capsys):
    code, out, cfg, base = pipeline_run
    assert code == 0
    report = base / "re_eval.json"
    assert run(["eval", "--ckpt", str(out / "krsl.ckpt"),
                "--vocab", str(out / "vocab.tsv"),
                "--data", str(out / "heldout.jsonl"),
                "--method", "EDIT", "--seed", "4",
                "--report", str(report), "--config", cfg]) == 0
    assert report.exists()
    # re-evaluation of the same checkpoint reproduces the pipeline's report
    pipeline_report = json.loads((out / "eval_edit.json").read_text())
    fresh = json.loads(report.read_text())
    assert fresh["overall"] == pipeline_report["overall"]
    assert fresh["outcomes"] == pipeline_report["outcomes"]

    assert run(["compare", str(out / "eval_std_cot.json"),
                str(out / "eval_edit.json")]) == 0
    assert "AVG" in capsys.readouterr().out


def test_krsl_command_from_checkpoint(pipeline_run, tmp_path):
    code, out, cfg, base = pipeline_run
    assert code == 0
    kout = base / "krsl2"
    assert run(["krsl", "--ckpt", str(out / "sft.ckpt"),
                "--dual", str(out / "dual.jsonl"),
                "--vocab", str(out / "vocab.tsv"),
                "--subset", "pos", "--out", str(kout), "--config", cfg,
                "--seed", "4"]) == 0
    assert (kout / "krsl.ckpt").exists()
    # krsl from an init checkpoint is a contract error -> exit 2
    from edit_distill import lm

    p = lm.load_checkpoint(out / "sft.ckpt")
    lm.save_checkpoint(p.with_stage("init"), base / "init.ckpt")
    assert run(["krsl", "--ckpt", str(base / "init.ckpt"),
                "--dual", str(out / "dual.jsonl"),
                "--vocab", str(out / "vocab.tsv"),
                "--out", str(base / "krsl3"), "--config", cfg]) == 2
