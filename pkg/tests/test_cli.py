import hashlib
import json
import subprocess
import sys

import pytest

from cognilab import pipeline
from cognilab.cli import COMMANDS, main
from cognilab.corpus import STAGES, read_jsonl

REPORT_FILES = {
    "table1_components.csv", "table2_sample_efficiency.csv", "table3_attention_groups.csv",
    "table4_final_performance.csv", "table5_stage_counts.csv", "table6_retention.csv",
    "table7_structure_score.csv", "table8_emergence.csv", "table9_attention_overall.csv",
    "fig_heads_over_training.svg", "fig_layer_distribution.svg", "fig_success_rate.svg",
    "fig_step_rate.svg", "fig_emergence_totals.svg", "fig_emergence_area.svg", "fig_structure_score.svg",
}


def _digest(directory):
    return {p.name: hashlib.md5(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def test_smoke_pipeline_outputs(smoke_ws):
    assert {p.name for p in (smoke_ws / "report").iterdir()} == REPORT_FILES
    for run in ("curriculum_s0", "baseline_s0"):
        a = smoke_ws / "runs" / run / "analysis"
        for f in ("head_counts.csv", "attn_stats.csv", "structure_score.csv", "emergence.csv"):
            assert (a / f).stat().st_size > 0
    table1 = (smoke_ws / "report" / "table1_components.csv").read_text().splitlines()
    assert table1[0] == "metric,baseline,curriculum"


def test_label_populates_every_item(smoke_ws):
    clean = read_jsonl(smoke_ws / "data" / "clean.jsonl")
    labeled = read_jsonl(smoke_ws / "data" / "labeled.jsonl")
    assert len(labeled) == len(clean) > 0
    assert all(r["stage"] in STAGES for r in labeled)


def test_report_is_idempotent(smoke_ws, capsys):
    before = _digest(smoke_ws / "report")
    assert main(["report", "--config", "configs/smoke.json", "--run-dir", str(smoke_ws)]) == 0
    assert _digest(smoke_ws / "report") == before


def test_commands_listed():
    assert COMMANDS == ("gen-data", "clean", "label", "split", "train", "eval", "analyze-heads",
                        "analyze-attn", "analyze-pca", "stats", "report")


def test_unknown_command_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--bogus"])
    assert exc.value.code == 2


def test_missing_input_is_one_line_error(tmp_path, capsys):
    assert main(["eval", "--run-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("cognilab eval: error:")
    assert main(["clean", "--run-dir", str(tmp_path)]) == 1
    assert "gen-data" in capsys.readouterr().err


def test_bad_config_is_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"optim": {"nope": 1}}))
    assert main(["gen-data", "--config", str(cfg), "--run-dir", str(tmp_path)]) == 1
    assert "nope" in capsys.readouterr().err


def test_locked_directory_refused(tmp_path, capsys):
    ws = pipeline.Workspace(tmp_path)
    with ws.lock(ws.data):
        assert main(["gen-data", "--config", "configs/smoke.json", "--run-dir", str(tmp_path)]) == 1
    assert "locked" in capsys.readouterr().err
    assert main(["gen-data", "--config", "configs/smoke.json", "--run-dir", str(tmp_path)]) == 0


def test_run_dir_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("COGNILAB_RUN_DIR", str(tmp_path))
    assert main(["gen-data", "--config", "configs/smoke.json", "--seed", "4"]) == 0
    assert json.loads(capsys.readouterr().out) == {"items": 240}
    assert read_jsonl(tmp_path / "data" / "raw.jsonl")[0]["id"].endswith("-4-0")


def test_unknown_run_name(smoke_ws, capsys):
    assert main(["analyze-attn", "--run", "nope", "--run-dir", str(smoke_ws)]) == 1


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "cognilab.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "analyze-heads" in out.stdout
