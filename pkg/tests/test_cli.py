import json

import pytest

from malenia.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset, trained checkpoint, and bank produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    ckpt = root / "model.mlnc"
    bank = root / "bank.mlnb"
    assert main([
        "gen-data", "--out", str(data), "--per-class", "1",
        "--classes", "liver_cyst,kidney_stone", "--seed", "2",
    ]) == 0
    assert main([
        "train", "--data", str(data), "--out", str(ckpt), "--epochs", "1",
    ]) == 0
    assert main(["export-bank", "--checkpoint", str(ckpt), "--out", str(bank)]) == 0
    return {"root": root, "data": data, "ckpt": ckpt, "bank": bank}


def test_gen_data_writes_manifest(workspace):
    manifest = json.loads((workspace["data"] / "manifest.json").read_text())
    assert manifest["version"] == 1
    assert len(manifest["samples"]) == 2
    for entry in manifest["samples"]:
        assert (workspace["data"] / entry["file"]).exists()


def test_infer_writes_report(workspace, capsys):
    out = workspace["root"] / "report.json"
    code = main([
        "infer", "--checkpoint", str(workspace["ckpt"]),
        "--volume", str(workspace["data"] / "sample_00000.mlna"),
        "--out", str(out),
    ])
    assert code == 0
    report = json.loads(out.read_text())
    assert "lesions" in report and "foreground_tokens" in report


def test_infer_with_external_bank(workspace, capsys):
    code = main([
        "infer", "--checkpoint", str(workspace["ckpt"]),
        "--volume", str(workspace["data"] / "sample_00000.mlna"),
        "--bank", str(workspace["bank"]),
    ])
    assert code == 0


def test_match_attributes_prints_assignments(workspace, capsys):
    code = main([
        "match-attributes", "--checkpoint", str(workspace["ckpt"]),
        "--volume", str(workspace["data"] / "sample_00000.mlna"),
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "token" in out or "no foreground lesions" in out


def test_eval_writes_report(workspace, capsys):
    out = workspace["root"] / "eval.json"
    code = main([
        "eval", "--checkpoint", str(workspace["ckpt"]),
        "--data", str(workspace["data"]),
        "--zero-shot", "kidney_stone", "--out", str(out),
    ])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["per_class"]["kidney_stone"]["zero_shot"] is True


def test_exit_code_2_on_usage_error(capsys):
    assert main(["bogus-command"]) == 2


def test_exit_code_2_on_config_error(workspace, capsys):
    bad = workspace["root"] / "bad.cfg"
    bad.write_text("not_a_key = 1\n")
    code = main([
        "train", "--data", str(workspace["data"]),
        "--out", str(workspace["root"] / "x.mlnc"), "--config", str(bad),
    ])
    assert code == 2


def test_exit_code_2_on_unknown_class(workspace, capsys):
    code = main([
        "gen-data", "--out", str(workspace["root"] / "d2"),
        "--classes", "not_a_class",
    ])
    assert code == 2


def test_exit_code_1_on_missing_file(capsys):
    assert main(["train", "--data", "/nonexistent", "--out", "/tmp/x.mlnc"]) == 1


def test_exit_code_1_on_corrupt_checkpoint(workspace, capsys, tmp_path):
    bad = tmp_path / "bad.mlnc"
    bad.write_bytes(b"JUNK" * 4)
    code = main([
        "infer", "--checkpoint", str(bad),
        "--volume", str(workspace["data"] / "sample_00000.mlna"),
    ])
    assert code in (1, 2)  # format error on the checkpoint header
