from __future__ import annotations

import json
from pathlib import Path

import pytest

from askplan import asset_path
from askplan.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    MalformedTaskSet,
    episode_seed,
    load_tasks,
    main,
)

MINI7 = str(asset_path("tasks/mini7.json"))
SCRIPT = str(asset_path("scripts/mini7.json"))


def run_cli(*argv) -> int:
    return main(list(argv))


# -- load_tasks ---------------------------------------------------------------


def test_load_tasks_bundled_mini7():
    tasks = load_tasks(MINI7)
    assert tasks.name == "mini7"
    assert len(tasks.scenarios) == 7
    assert {s.task_type for s in tasks.scenarios} == {
        "Heat", "Cool", "Clean", "Pick Two", "Stack", "Pick", "Examine"}


def test_load_tasks_duplicate_id(tmp_path):
    data = json.loads(Path(MINI7).read_text())
    data["scenarios"].append(data["scenarios"][0])
    path = tmp_path / "dup.json"
    path.write_text(json.dumps(data))
    with pytest.raises(MalformedTaskSet):
        load_tasks(path)


def test_load_tasks_empty_list(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text(json.dumps({"name": "none", "version": "1", "scenarios": []}))
    tasks = load_tasks(path)
    assert tasks.scenarios == []


def test_load_tasks_invalid_scenario_reports_id(tmp_path):
    data = json.loads(Path(MINI7).read_text())
    data["scenarios"][0]["goal"] = []
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(MalformedTaskSet) as err:
        load_tasks(path)
    assert err.value.scenario_id == "heat_bread"


def test_episode_seed_stable():
    assert episode_seed(42, 3) == episode_seed(42, 3)
    assert episode_seed(42, 3) != episode_seed(42, 4)


# -- run ----------------------------------------------------------------------


def test_run_writes_one_trace_per_scenario(tmp_path, capsys):
    code = run_cli("run", "--tasks", MINI7, "--gateway", "scripted",
                   "--script", SCRIPT, "--seed", "42", "--out", str(tmp_path))
    assert code == EXIT_OK
    lines = (tmp_path / "traces.jsonl").read_text().splitlines()
    assert len(lines) == 7
    records = [json.loads(line) for line in lines]
    assert [r["task_id"] for r in records] == [
        "heat_bread", "cool_tomato", "clean_ladle", "picktwo_remotes",
        "stack_plate", "pick_watch", "examine_book"]
    assert all(r["sr"] == 1 for r in records)


def test_run_deterministic_across_invocations(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run_cli("run", "--tasks", MINI7, "--gateway", "scripted", "--script",
                   SCRIPT, "--seed", "42", "--out", str(out_a)) == EXIT_OK
    assert run_cli("run", "--tasks", MINI7, "--gateway", "scripted", "--script",
                   SCRIPT, "--seed", "42", "--out", str(out_b)) == EXIT_OK
    assert (out_a / "traces.jsonl").read_bytes() == (out_b / "traces.jsonl").read_bytes()


def test_run_parallelism_does_not_change_output(tmp_path):
    out_a, out_b = tmp_path / "p1", tmp_path / "p4"
    run_cli("run", "--tasks", MINI7, "--gateway", "scripted", "--script", SCRIPT,
            "--seed", "7", "--out", str(out_a), "--parallel", "1")
    run_cli("run", "--tasks", MINI7, "--gateway", "scripted", "--script", SCRIPT,
            "--seed", "7", "--out", str(out_b), "--parallel", "4")
    assert (out_a / "traces.jsonl").read_bytes() == (out_b / "traces.jsonl").read_bytes()


def test_run_missing_script_is_config_error(tmp_path):
    code = run_cli("run", "--tasks", MINI7, "--gateway", "scripted",
                   "--script", str(tmp_path / "nope.json"), "--seed", "1",
                   "--out", str(tmp_path))
    assert code == EXIT_CONFIG
    assert not (tmp_path / "traces.jsonl").exists()


def test_run_scripted_without_script_flag_is_config_error(tmp_path):
    code = run_cli("run", "--tasks", MINI7, "--gateway", "scripted",
                   "--seed", "1", "--out", str(tmp_path))
    assert code == EXIT_CONFIG


def test_run_static_flag_records_config(tmp_path):
    run_cli("run", "--tasks", MINI7, "--gateway", "scripted", "--script", SCRIPT,
            "--seed", "1", "--static", "--out", str(tmp_path))
    record = json.loads((tmp_path / "traces.jsonl").read_text().splitlines()[0])
    assert record["config"]["replanning_enabled"] is False


def test_run_noise_override_applies_to_every_episode(tmp_path):
    run_cli("run", "--tasks", MINI7, "--gateway", "scripted", "--script", SCRIPT,
            "--seed", "1", "--static", "--noise", "1.0", "--out", str(tmp_path))
    records = [json.loads(line) for line in
               (tmp_path / "traces.jsonl").read_text().splitlines()]
    assert all(r["config"]["noise"] == 1.0 for r in records)
    assert all(r["sr"] == 0 for r in records)
    assert all(step["reason"] == "controller_noise"
               for r in records for step in r["steps"])


def test_run_http_gateway_requires_endpoint_and_model(tmp_path):
    code = run_cli("run", "--tasks", MINI7, "--gateway", "http",
                   "--seed", "1", "--out", str(tmp_path))
    assert code == EXIT_CONFIG


def test_run_http_gateway_against_stub(tmp_path):
    # the stub answers every chat request with canned prose, so decomposition
    # fails; the batch must still complete with recorded per-episode outcomes
    import threading
    from http.server import ThreadingHTTPServer

    from test_gateway import _StubHandler

    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        code = run_cli("run", "--tasks", MINI7, "--gateway", "http",
                       "--endpoint",
                       f"http://127.0.0.1:{server.server_address[1]}/v1/chat",
                       "--model", "stub-model", "--seed", "1",
                       "--out", str(tmp_path))
    finally:
        server.shutdown()
        thread.join(timeout=5)
    assert code == EXIT_OK
    records = [json.loads(line) for line in
               (tmp_path / "traces.jsonl").read_text().splitlines()]
    assert len(records) == 7
    assert all(r["outcome"] == "plan_exhausted" for r in records)
    assert all("no Q/A pairs" in r["abort_reason"] for r in records)
    assert all(r["config"]["gateway"]["kind"] == "http" for r in records)


def test_run_never_prints_secrets(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ASKPLAN_API_KEY", "super-secret-key")
    run_cli("run", "--tasks", MINI7, "--gateway", "scripted", "--script", SCRIPT,
            "--seed", "1", "--out", str(tmp_path))
    out = capsys.readouterr()
    assert "super-secret-key" not in out.out + out.err
    assert "super-secret-key" not in (tmp_path / "traces.jsonl").read_text()


# -- score --------------------------------------------------------------------


@pytest.fixture()
def trace_dir(tmp_path):
    run_cli("run", "--tasks", MINI7, "--gateway", "scripted", "--script", SCRIPT,
            "--seed", "42", "--out", str(tmp_path))
    return tmp_path


def test_score_emits_report(trace_dir, capsys):
    code = run_cli("score", "--traces", str(trace_dir / "traces.jsonl"),
                   "--tasks", MINI7, "--format", "table")
    assert code == EXIT_OK
    report = json.loads((trace_dir / "report.json").read_text())
    assert report["n_episodes"] == 7
    assert report["sr_pct"] == 100.0
    assert report["strict_hlp_pct"] <= report["relaxed_hlp_pct"]
    table = capsys.readouterr().out
    assert "RelaxedHLP" in table
    assert "Heat" in table


def test_score_json_format(trace_dir, capsys):
    run_cli("score", "--traces", str(trace_dir / "traces.jsonl"),
            "--tasks", MINI7, "--format", "json")
    printed = json.loads(capsys.readouterr().out)
    assert printed["n_episodes"] == 7


def test_score_empty_trace_file(tmp_path, capsys):
    traces = tmp_path / "traces.jsonl"
    traces.write_text("")
    code = run_cli("score", "--traces", str(traces), "--tasks", MINI7,
                   "--format", "json")
    assert code == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["n_episodes"] == 0
    assert report["sr_pct"] is None


def test_score_unknown_task_id(trace_dir, tmp_path):
    records = [json.loads(line) for line in
               (trace_dir / "traces.jsonl").read_text().splitlines()]
    records[0]["task_id"] = "ghost_task"
    mangled = tmp_path / "mangled.jsonl"
    mangled.write_text("\n".join(json.dumps(r) for r in records))
    code = run_cli("score", "--traces", str(mangled), "--tasks", MINI7,
                   "--format", "json")
    assert code == EXIT_CONFIG


def test_score_schema_mismatch(trace_dir, tmp_path):
    records = [json.loads(line) for line in
               (trace_dir / "traces.jsonl").read_text().splitlines()]
    records[0]["schema_version"] = 999
    mangled = tmp_path / "mangled.jsonl"
    mangled.write_text("\n".join(json.dumps(r) for r in records))
    code = run_cli("score", "--traces", str(mangled), "--tasks", MINI7,
                   "--format", "json")
    assert code == EXIT_CONFIG


# -- replay -------------------------------------------------------------------


def test_replay_line_identical(trace_dir, capsys):
    code = run_cli("replay", "--traces", str(trace_dir / "traces.jsonl"),
                   "--tasks", MINI7, "--line", "1", "--script", SCRIPT)
    assert code == EXIT_OK
    assert "identical" in capsys.readouterr().out


def test_replay_every_line(trace_dir):
    for line in range(1, 8):
        assert run_cli("replay", "--traces", str(trace_dir / "traces.jsonl"),
                       "--tasks", MINI7, "--line", str(line),
                       "--script", SCRIPT) == EXIT_OK


def test_replay_line_out_of_range(trace_dir):
    code = run_cli("replay", "--traces", str(trace_dir / "traces.jsonl"),
                   "--tasks", MINI7, "--line", "99", "--script", SCRIPT)
    assert code == EXIT_CONFIG


def test_replay_detects_divergence(trace_dir, tmp_path, capsys):
    records = [json.loads(line) for line in
               (trace_dir / "traces.jsonl").read_text().splitlines()]
    records[0]["sr"] = 0
    tampered = tmp_path / "tampered.jsonl"
    tampered.write_text("\n".join(json.dumps(r) for r in records))
    code = run_cli("replay", "--traces", str(tampered), "--tasks", MINI7,
                   "--line", "1", "--script", SCRIPT)
    assert code == 1
    out = capsys.readouterr().out
    assert "DIVERGED" in out
    assert "'sr'" in out


# -- prompts ------------------------------------------------------------------


def test_prompts_default_contains_qa_markers(tmp_path):
    out = tmp_path / "prompts"
    code = run_cli("prompts", "--tasks", MINI7, "--id", "heat_bread",
                   "--out", str(out))
    assert code == EXIT_OK
    decomposer = (out / "decomposer.txt").read_text()
    planner = (out / "planner.txt").read_text()
    assert "Q:" in decomposer
    assert "things to discover" in decomposer
    assert "Follow the template" in planner


def test_prompts_no_std_lacks_qa_lines(tmp_path):
    out = tmp_path / "prompts"
    code = run_cli("prompts", "--tasks", MINI7, "--id", "heat_bread", "--no-std",
                   "--out", str(out))
    assert code == EXIT_OK
    assert not (out / "decomposer.txt").exists()
    planner = (out / "planner.txt").read_text()
    assert "Q:" not in planner
    assert "put a heated slice of bread in the fridge" in planner


def test_prompts_cot_contains_marker(tmp_path):
    out = tmp_path / "prompts"
    code = run_cli("prompts", "--tasks", MINI7, "--id", "heat_bread", "--cot",
                   "--out", str(out))
    assert code == EXIT_OK
    decomposer = (out / "decomposer.txt").read_text()
    assert "Let's think step by step" in decomposer
    assert "Q:" not in decomposer
    planner = (out / "planner.txt").read_text()
    assert "step-by-step decomposition" in planner


def test_prompts_unknown_id(tmp_path):
    code = run_cli("prompts", "--tasks", MINI7, "--id", "ghost")
    assert code == EXIT_CONFIG


def test_prompts_stdout_when_no_out(capsys):
    code = run_cli("prompts", "--tasks", MINI7)
    assert code == EXIT_OK
    assert "things to discover" in capsys.readouterr().out


# -- exit codes ---------------------------------------------------------------


def test_missing_tasks_file_is_config_error(tmp_path):
    code = run_cli("run", "--tasks", str(tmp_path / "none.json"),
                   "--gateway", "scripted", "--script", SCRIPT,
                   "--seed", "1", "--out", str(tmp_path))
    assert code == EXIT_CONFIG


def test_unwritable_out_dir_is_io_error(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("a regular file, not a directory")
    code = run_cli("run", "--tasks", MINI7, "--gateway", "scripted",
                   "--script", SCRIPT, "--seed", "1",
                   "--out", str(blocker / "sub"))
    assert code == EXIT_IO
