import json
from importlib import resources
from pathlib import Path

import jsonschema
import pytest

from fluxmem.cli import main

SCHEMAS = Path(__file__).resolve().parents[1] / "docs" / "schemas"


def schema(name):
    return json.loads((SCHEMAS / name).read_text())


def write_transcript(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def rows(n=10):
    out = [{"user": "My locker code is 4417.", "agent": "Noted.", "timestamp": 0}]
    out += [{"user": f"Small talk number {i} about the weather.", "agent": "Sure.",
             "timestamp": 60 * (i + 1)} for i in range(n - 1)]
    return out


@pytest.fixture(autouse=True)
def offline_env(monkeypatch):
    for var in ("FLUXMEM_EMBED_URL", "FLUXMEM_LLM_BASE_URL"):
        monkeypatch.delenv(var, raising=False)


@pytest.fixture
def snapshot(tmp_path):
    t = write_transcript(tmp_path / "t.jsonl", rows())
    snap = tmp_path / "s.json"
    assert main(["ingest", str(t), str(snap), "--deterministic"]) == 0
    return snap


def test_ingest_counts(snapshot, capsys):
    assert main(["inspect", str(snapshot), "--json"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["stim_pages"] == 4 and stats["mtem_pages"] == 6 and stats["observed"] == 10


def test_ingest_empty_file(tmp_path, capsys):
    (tmp_path / "e.jsonl").write_text("")
    assert main(["ingest", str(tmp_path / "e.jsonl"), str(tmp_path / "s.json")]) == 0
    assert main(["inspect", str(tmp_path / "s.json")]) == 0
    assert "observed pages: 0" in capsys.readouterr().out


def test_ingest_malformed_line(tmp_path, capsys):
    t = tmp_path / "t.jsonl"
    t.write_text(json.dumps(rows()[0]) + "\n" + json.dumps(rows()[1]) + "\n{broken\n")
    assert main(["ingest", str(t), str(tmp_path / "s.json")]) == 1
    assert "line 3" in capsys.readouterr().err


def test_ingest_non_monotone(tmp_path, capsys):
    t = write_transcript(tmp_path / "t.jsonl", [{"user": "a", "agent": "b", "timestamp": 10},
                                                {"user": "c", "agent": "d", "timestamp": 5}])
    assert main(["ingest", str(t), str(tmp_path / "s.json")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_ingest_iso_timestamps_and_trace(tmp_path):
    t = write_transcript(tmp_path / "t.jsonl", [
        {"user": f"hello {i}", "agent": "hi", "timestamp": f"2024-01-0{i + 1}T00:00:00Z"}
        for i in range(6)])
    assert main(["ingest", str(t), str(tmp_path / "s.json.gz"), "--trace", str(tmp_path / "tr.jsonl")]) == 0
    traces = [json.loads(x) for x in (tmp_path / "tr.jsonl").read_text().splitlines()]
    assert len(traces) == 6 and len(traces[4]["decisions"]) == 1


def test_ingest_replayable(tmp_path):
    t = write_transcript(tmp_path / "t.jsonl", rows(30))
    for name in ("a.json", "b.json"):
        assert main(["ingest", str(t), str(tmp_path / name), "--seed", "42"]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_set_override_echoed(tmp_path):
    t = write_transcript(tmp_path / "t.jsonl", rows(3))
    assert main(["ingest", str(t), str(tmp_path / "s.json"), "--set", "top.k=3",
                 "--set", "bmm_threshold=0.7"]) == 0
    cfg = json.loads((tmp_path / "s.json").read_text())["config"]
    assert cfg["top_k"] == 3 and cfg["bmm_threshold"] == 0.7
    assert main(["ingest", str(t), str(tmp_path / "x.json"), "--set", "nope=1"]) == 1
    assert main(["ingest", str(t), str(tmp_path / "x.json"), "--set", "novalue"]) == 1


def test_query_planted_fact(snapshot, capsys):
    assert main(["query", str(snapshot), "What is my locker code?"]) == 0
    assert capsys.readouterr().out.strip() == "My locker code is 4417."


def test_query_show_context(snapshot, capsys):
    assert main(["query", str(snapshot), "locker code?", "--show-context"]) == 0
    out = capsys.readouterr().out
    assert "[RECENT]" in out and "[QUERY] locker code?" in out


def test_query_json_matches_schema(snapshot, capsys):
    assert main(["query", str(snapshot), "What is my locker code?", "--json"]) == 0
    record = json.loads(capsys.readouterr().out)
    jsonschema.validate(record, schema("query.schema.json"))
    assert any(h["page_id"] == "p000000" for h in record["mtem"])


def test_query_commit_persists_usage(snapshot):
    before = snapshot.read_bytes()
    assert main(["query", str(snapshot), "locker?"]) == 0
    assert snapshot.read_bytes() == before
    assert main(["query", str(snapshot), "locker?", "--commit"]) == 0
    assert snapshot.read_bytes() != before


def test_query_missing_snapshot(tmp_path, capsys):
    assert main(["query", str(tmp_path / "none.json"), "q"]) == 1
    assert "not found" in capsys.readouterr().err


def test_unknown_mode_prints_usage(capsys):
    assert main(["eval", "--mode", "sideways"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_no_command_is_usage_error(capsys):
    assert main([]) == 1


def test_unreachable_provider_exit_2(tmp_path, monkeypatch):
    t = write_transcript(tmp_path / "t.jsonl", rows(2))
    monkeypatch.setenv("FLUXMEM_EMBED_URL", "http://127.0.0.1:9")
    assert main(["ingest", str(t), str(tmp_path / "s.json")]) == 2
    assert main(["ingest", str(t), str(tmp_path / "s.json"), "--deterministic"]) == 0


def test_train_default_set(tmp_path, capsys):
    out = tmp_path / "m.json"
    assert main(["train", "-o", str(out)]) == 0
    text = capsys.readouterr().out
    acc = float(text.split("final train accuracy:")[1].split()[0])
    assert acc >= 0.95 and json.loads(out.read_text())["format"] == "fluxmem.selector/v1"


def test_label_then_train(tmp_path):
    from fluxmem.evalkit import write_cases
    from fluxmem.synthetic import make_suite
    write_cases(tmp_path / "c.jsonl", make_suite(3, 9))
    assert main(["label", str(tmp_path / "c.jsonl"), "-o", str(tmp_path / "l.jsonl")]) == 0
    labeled = (tmp_path / "l.jsonl").read_text().splitlines()
    assert labeled and all(len(json.loads(x)["features"]) == 12 for x in labeled)
    assert main(["train", str(tmp_path / "l.jsonl"), "-o", str(tmp_path / "m.json"),
                 "--epochs", "5"]) == 0


def test_eval_report_matches_schema(tmp_path, capsys):
    from fluxmem.evalkit import write_cases
    from fluxmem.synthetic import make_suite
    write_cases(tmp_path / "c.jsonl", make_suite(3, 4))
    assert main(["eval", str(tmp_path / "c.jsonl"), "-o", str(tmp_path / "r.json")]) == 0
    assert "overall" in capsys.readouterr().out
    jsonschema.validate(json.loads((tmp_path / "r.json").read_text()), schema("eval-report.schema.json"))


def test_eval_sweep(tmp_path, capsys):
    from fluxmem.evalkit import write_cases
    from fluxmem.synthetic import make_suite
    write_cases(tmp_path / "c.jsonl", make_suite(3, 4))
    assert main(["eval", str(tmp_path / "c.jsonl"), "--sweep", "bmm.threshold=0.5,0.7"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [x.split("\t")[0] for x in lines] == ["bmm_threshold=0.5", "bmm_threshold=0.7"]


def test_bad_case_file_exit_1(tmp_path, capsys):
    (tmp_path / "c.jsonl").write_text('{"id": "x"}\n')
    assert main(["eval", str(tmp_path / "c.jsonl")]) == 1
    assert "line 1" in capsys.readouterr().err


def test_shipped_suite_matches_case_schema():
    s = schema("case.schema.json")
    raw = resources.files("fluxmem.data").joinpath("synthetic_suite.jsonl").read_text("utf-8")
    for line in raw.splitlines():
        jsonschema.validate(json.loads(line), s)


def test_transcript_schema_accepts_example_rows():
    s = schema("transcript.schema.json")
    for r in rows(3):
        jsonschema.validate(r, s)
