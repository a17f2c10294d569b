import json
import subprocess
import sys

import pytest
from conftest import small_config

from fedgan_trust.cli import main


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "config.json"
    cfg.write_text(json.dumps(small_config().to_dict()))
    assert main(["simulate", str(cfg), "--out", str(d / "run")]) == 0
    return d


def _shares(run_dir, which=(1, 2, 3)):
    return [str(run_dir / "run" / "shares" / f"registry-{i}.share") for i in which]


def test_simulate_outputs(run_dir):
    summary = json.loads((run_dir / "run" / "summary.json").read_text())
    assert summary["status"] == "stopped" and summary["merge_rounds"] >= 2


def test_audit_pass(run_dir, capsys, tmp_path):
    out = tmp_path / "report.json"
    code = main(["audit", str(run_dir / "run" / "transcript.jsonl"), "--shares", *_shares(run_dir),
                 "--out", str(out)])
    assert code == 0
    assert "audit verdict: PASS" in capsys.readouterr().out
    assert json.loads(out.read_text())["verdict"] == "pass"


def test_audit_insufficient_shares(run_dir, capsys):
    code = main(["audit", str(run_dir / "run" / "transcript.jsonl"), "--shares", *_shares(run_dir, (1, 2))])
    assert code == 2
    assert "audit input error" in capsys.readouterr().err


def test_audit_tampered_exit_one(run_dir, tmp_path, capsys):
    lines = (run_dir / "run" / "transcript.jsonl").read_text().splitlines()
    obj = json.loads(lines[12])
    obj["tx"] = obj["tx"][:-70] + ("a" if obj["tx"][-70] != "a" else "b") + obj["tx"][-69:]
    lines[12] = json.dumps(obj)
    bad = tmp_path / "t.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    code = main(["audit", str(bad), "--shares", *_shares(run_dir), "--json"])
    assert code == 1
    report = json.loads(capsys.readouterr().out)
    assert report["chain_integrity"][obj["channel"]]["first_bad_height"] == obj["height"]


def test_missing_files_exit_two(run_dir, capsys):
    assert main(["audit", "/nonexistent.jsonl"]) == 2
    assert main(["audit", str(run_dir / "run" / "transcript.jsonl"), "--shares", "/nope"]) == 2
    assert main(["inspect", "/nonexistent.jsonl"]) == 2
    assert main(["simulate", "/nonexistent.json"]) == 2


def test_bad_config_exit_two(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"members": 1}))
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "members" in capsys.readouterr().err
    assert main(["simulate", "--fault", "bogus:1", "--out", str(tmp_path / "o")]) == 2


def test_usage_error_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["inspect", "x", "--height", "1", "--registry", "2"])
    assert exc.value.code == 2


def test_stall_exit_three(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(small_config().to_dict()))
    code = main(["simulate", str(cfg), "--fault", "tamper-fake-data:1:2", "--out", str(tmp_path / "o")])
    assert code == 3
    captured = capsys.readouterr()
    assert "stall" in captured.err and "violation at registry 1, iteration 2" in captured.out
    assert (tmp_path / "o" / "transcript.jsonl").exists()


def test_inspect_genesis_and_filters(run_dir, capsys):
    transcript = str(run_dir / "run" / "transcript.jsonl")
    assert main(["inspect", transcript, "--height", "0"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("gan-interaction #0") and "_genesis" in out
    assert main(["inspect", transcript, "--height", "0", "--channel", "key-distribution"]) == 0
    assert "key-distribution #0" in capsys.readouterr().out
    assert main(["inspect", transcript, "--height", "9999"]) == 2
    capsys.readouterr()
    assert main(["inspect", transcript, "--registry", "2"]) == 0
    out = capsys.readouterr().out
    submitters = {line.split(" by ")[1].split()[0] for line in out.splitlines() if " by " in line}
    assert submitters == {"registry-2"}
    assert "bytes sha256:" in out  # ciphertexts summarised


def test_inspect_output_stable(run_dir, capsys):
    transcript = str(run_dir / "run" / "transcript.jsonl")
    main(["inspect", transcript])
    first = capsys.readouterr().out
    main(["inspect", transcript])
    assert capsys.readouterr().out == first


def test_config_subcommand(capsys):
    assert main(["config"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["members"] == 3 and d["merge_interval"] == 5
    assert main(["config", "--quality"]) == 0
    assert json.loads(capsys.readouterr().out)["min_merge_rounds"] == 200


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "fedgan_trust", "config"], capture_output=True, text=True)
    assert out.returncode == 0 and json.loads(out.stdout)["seed"] == 42
