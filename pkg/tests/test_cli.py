import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from msd.bvh import bvh_joint_positions
from msd.cli import read_motion_file, run
from msd.motion import forward_kinematics
from pipeline import run_small_pipeline


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    return run_small_pipeline(tmp_path_factory.mktemp("cli"))


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_every_stage_writes_outputs_and_manifest(artifacts):
    for key in ("data", "prior", "dis", "pair", "model", "transfer", "transfer_k0", "bvh",
                "report_json", "report_csv", "features_csv", "sweep"):
        assert artifacts[key].exists(), key
    manifest = json.loads((artifacts["model"].parent / "styled.ckpt.manifest.json").read_text())
    assert manifest["command"] == "finetune"
    assert manifest["seed"] == 3 and manifest["config"]["K"] == 30
    assert manifest["outputs"][str(artifacts["model"])] == sha(artifacts["model"])
    assert manifest["inputs"][str(artifacts["prior"])] == sha(artifacts["prior"])
    assert len(manifest["config_hash"]) == 64 and manifest["wall_time_s"] >= 0


def test_k_zero_transfer_is_identity(artifacts):
    out, _ = read_motion_file(artifacts["transfer_k0"])
    content, text = read_motion_file(artifacts["content"])
    np.testing.assert_array_equal(out.features, content.features)
    assert text.endswith("neutrally")


def test_transfer_output_and_bvh(artifacts):
    out, _ = read_motion_file(artifacts["transfer"])
    content, _ = read_motion_file(artifacts["content"])
    assert out.num_frames == content.num_frames
    np.testing.assert_allclose(bvh_joint_positions(artifacts["bvh"]), forward_kinematics(out), atol=1e-4)


def test_finetuned_checkpoint_metadata(artifacts):
    from msd.denoiser import DenoiserModel

    meta = DenoiserModel.load(artifacts["model"]).checkpoint_meta
    assert meta["style"] == "old" and meta["finetune"]["K"] == 30
    assert len(meta["history"]) >= 1 and {"L_sr", "L_s", "total"} <= set(meta["history"][0])


def test_report_and_sweep_contents(artifacts):
    report = json.loads(artifacts["report_json"].read_text())
    for key in ("CRA", "SRA", "FMD_transferred", "FMD_content", "classifier_accuracy_style"):
        assert key in report["metrics"]
    assert report["metadata"]["K"] == 30
    rows = list(csv.DictReader(artifacts["sweep"].open()))
    assert [(r["param"], r["value"]) for r in rows] == [("G", "0"), ("G", "50"), ("K", "0"), ("K", "30")]
    assert float(rows[0]["foot_contact_accuracy"]) == 1.0
    header = artifacts["features_csv"].read_text().splitlines()[0]
    assert header.startswith("id,content,style,f0")


def test_export_bvh_and_custom_manifest(artifacts, tmp_path):
    code = run(["export-bvh", "--motion", str(artifacts["content"]), "--out", str(tmp_path / "c.bvh"),
                "--manifest", str(tmp_path / "m.json")])
    assert code == 0
    assert json.loads((tmp_path / "m.json").read_text())["command"] == "export-bvh"


def test_missing_input_exit_3(tmp_path, capsys):
    assert run(["transfer", "--model", str(tmp_path / "none.ckpt"), "--content", str(tmp_path / "c.json"),
                "--out", str(tmp_path / "o.json")]) == 3
    err = error_of(capsys)
    assert err["error"] == "MissingArtifact" and err["exit_code"] == 3


def test_invalid_config_exit_2(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[run]\nG = 50\nK = 100\n")
    assert run(["gen-data", "--config", str(ini), "--out", str(tmp_path / "d.jsonl")]) == 2
    assert error_of(capsys)["error"] == "ConfigInvalid"


def test_non_styled_checkpoint_exit_2(artifacts, tmp_path, capsys):
    assert run(["transfer", "--model", str(artifacts["prior"]), "--content", str(artifacts["content"]),
                "--out", str(tmp_path / "o.json"), "--config", str(artifacts["ini"])]) == 2
    assert "not a style fine-tuned" in error_of(capsys)["message"]


def test_corrupt_checkpoint_exit_4(artifacts, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert run(["transfer", "--model", str(bad), "--content", str(artifacts["content"]),
                "--out", str(tmp_path / "o.json")]) == 4
    assert error_of(capsys)["error"] == "CheckpointError"


def test_bad_prompt_exit_1(artifacts, tmp_path, capsys):
    assert run(["pairgen", "--style", str(artifacts["style"]), "--text", "someone dances", "--out",
                str(tmp_path / "p.json"), "--config", str(artifacts["ini"])]) == 1
    assert error_of(capsys)["error"] == "PromptRewriteFailed"


def test_bad_thread_count_exit_2(monkeypatch, tmp_path):
    monkeypatch.setenv("MSD_THREADS", "zero")
    assert run(["gen-data", "--out", str(tmp_path / "d.jsonl")]) == 2


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as exc:
        run(["transfer"])
    assert exc.value.code == 2


def test_console_entry_point(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "msd.cli", "--help"], capture_output=True, text=True)
    assert ok.returncode == 0 and "pretrain-dis" in ok.stdout
    missing = subprocess.run([sys.executable, "-m", "msd.cli", "eval", "--model", str(tmp_path / "x.ckpt")],
                             capture_output=True, text=True)
    assert missing.returncode == 3
    assert json.loads(missing.stderr.strip().splitlines()[-1])["exit_code"] == 3


def test_gen_data_into_directory(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path) + "/", "--per-cell", "1", "--uniform"]) == 0
    rows = [json.loads(l) for l in (tmp_path / "data.jsonl").read_text().splitlines()]
    assert {r["style"] for r in rows} == {"neutral", "old", "proud", "angry", "depressed"}
