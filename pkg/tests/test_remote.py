"""Tests for the remote completion-endpoint client against a local mock."""

import json
import logging

import pytest

from arithlab.datagen import TestCase
from arithlab.formats import ADD, MUL, SUB, build_fewshot_prompt
from arithlab.remote import (
    RemoteConfig,
    RemoteError,
    build_plain_prompt,
    build_prompt,
    extract_field,
    replay_transcript,
    run_remote_eval,
)
from mockserver import start_server


@pytest.fixture()
def server():
    srv = start_server()
    yield srv
    srv.shutdown()
    srv.server_close()


def _cases(op, pairs):
    return [TestCase(a, b, op, op.apply(a, b)) for a, b in pairs]


ADD_PAIRS = [(13, 44), (17, 25), (28, 39), (90, 9), (55, 55), (71, 6)]


def _config(server, **overrides):
    kwargs = {"endpoint": server.url, "retries": 0, "min_delay": 0.0}
    kwargs.update(overrides)
    return RemoteConfig(**kwargs)


def test_config_defaults():
    cfg = RemoteConfig(endpoint="http://example.invalid/v1")
    assert cfg.temperature == 0.7
    assert cfg.max_cases == 100
    assert cfg.retries == 2
    assert cfg.prompt_style == "decomposition-fewshot"
    assert cfg.response_field == "choices.0.text"


@pytest.mark.parametrize(
    "overrides",
    [
        {"endpoint": ""},
        {"temperature": -0.1},
        {"max_cases": 0},
        {"timeout": 0.0},
        {"retries": -1},
        {"prompt_style": "zero-shot"},
        {"min_delay": -0.5},
    ],
)
def test_config_validation(overrides):
    kwargs = {"endpoint": "http://example.invalid/v1"}
    kwargs.update(overrides)
    with pytest.raises(RemoteError):
        RemoteConfig(**kwargs)


def test_plain_prompt_add_literal():
    expected = (
        "Q: What is 28 plus 39?\nA: 67\n\n"
        "Q: What is 804 plus 121?\nA: 925\n\n"
        "Q: What is 1201 plus 1302?\nA: 2503\n\n"
        "Q: What is 97734 plus 86328?\nA: 184062\n\n"
        "Q: What is 13 plus 44?\nA:"
    )
    assert build_plain_prompt(13, 44, ADD) == expected


def test_plain_prompt_sub_uses_true_answers():
    expected = (
        "Q: What is 28 minus 39?\nA: -11\n\n"
        "Q: What is 804 minus 121?\nA: 683\n\n"
        "Q: What is 1201 minus 1302?\nA: -101\n\n"
        "Q: What is 97734 minus 86328?\nA: 11406\n\n"
        "Q: What is 90 minus 9?\nA:"
    )
    assert build_plain_prompt(90, 9, SUB) == expected


def test_build_prompt_dispatch():
    case = _cases(ADD, [(13, 44)])[0]
    assert build_prompt("decomposition-fewshot", case) == build_fewshot_prompt(13, 44, ADD)
    assert build_prompt("plain-fewshot", case) == build_plain_prompt(13, 44, ADD)


def test_extract_field_paths():
    payload = {"choices": [{"text": "hello"}], "usage": {"total": 9}}
    assert extract_field(payload, "choices.0.text") == "hello"
    assert extract_field(payload, "usage.total") == 9
    for bad in ("choices.1.text", "choices.0.missing", "choices.x.text", "text"):
        with pytest.raises(RemoteError):
            extract_field(payload, bad)


def test_oracle_mock_scores_100_and_prompts_byte_match(server, tmp_path):
    cases = _cases(ADD, ADD_PAIRS)
    cfg = _config(server)
    report, path = run_remote_eval(cfg, [("2D+", cases)], tmp_path / "t.jsonl")
    assert report.accuracy("decomposition-fewshot", "2D+") == 100.0
    assert report.counts[("decomposition-fewshot", "2D+")] == (6, 6, 0)
    assert str(path) == str(tmp_path / "t.jsonl")
    assert len(server.requests) == 6
    for request, case in zip(server.requests, cases):
        body = request["body"]
        assert body["prompt"] == build_fewshot_prompt(case.n1, case.n2, case.op)
        assert body["temperature"] == 0.7
        assert body["max_tokens"] == cfg.max_tokens


def test_plain_style_prompts_byte_match(server, tmp_path):
    cases = _cases(MUL, [(7, 8), (12, 12)])
    cfg = _config(server, prompt_style="plain-fewshot")
    report, _ = run_remote_eval(cfg, [("2Dx", cases)], tmp_path / "t.jsonl")
    assert report.accuracy("plain-fewshot", "2Dx") == 100.0
    sent = [r["body"]["prompt"] for r in server.requests]
    assert sent == [build_plain_prompt(c.n1, c.n2, c.op) for c in cases]


def test_echo_mock_scores_zero(server, tmp_path):
    server.mode = "echo"
    cases = _cases(ADD, ADD_PAIRS)
    report, _ = run_remote_eval(_config(server), [("2D+", cases)], tmp_path / "t.jsonl")
    assert report.accuracy("decomposition-fewshot", "2D+") == 0.0
    assert report.counts[("decomposition-fewshot", "2D+")] == (0, 6, 0)


def test_first_max_cases_cap(server, tmp_path):
    pairs = [(i, i + 1) for i in range(10, 22)]
    cases = _cases(ADD, pairs)
    cfg = _config(server, max_cases=5)
    report, _ = run_remote_eval(cfg, [("2D+", cases)], tmp_path / "t.jsonl")
    assert len(server.requests) == 5
    assert report.counts[("decomposition-fewshot", "2D+")] == (5, 5, 0)
    sent = [r["body"]["prompt"] for r in server.requests]
    assert sent == [build_fewshot_prompt(c.n1, c.n2, c.op) for c in cases[:5]]


def test_retry_recovers_from_transient_failure(server, tmp_path):
    server.mode = "flaky"
    cases = _cases(ADD, ADD_PAIRS[:3])
    cfg = _config(server, retries=1)
    report, _ = run_remote_eval(cfg, [("2D+", cases)], tmp_path / "t.jsonl")
    assert report.accuracy("decomposition-fewshot", "2D+") == 100.0
    assert sorted(server.attempts.values()) == [2, 2, 2]


def test_exhausted_retries_skip_and_flag(server, tmp_path, caplog):
    server.mode = "failfor"
    server.fail_when = lambda prompt: "17 plus 25" in prompt
    cases = _cases(ADD, ADD_PAIRS)
    cfg = _config(server, retries=1)
    with caplog.at_level(logging.WARNING, logger="arithlab.remote"):
        report, _ = run_remote_eval(cfg, [("2D+", cases)], tmp_path / "t.jsonl")
    # The unanswered case leaves the denominator; the rest stay perfect.
    assert report.counts[("decomposition-fewshot", "2D+")] == (5, 5, 1)
    assert report.accuracy("decomposition-fewshot", "2D+") == 100.0
    assert any("skipped" in r.message for r in caplog.records)
    assert any("17 plus 25" in r.message for r in caplog.records)


def test_endpoint_down_scores_zero_not_crash(server, tmp_path, caplog):
    server.mode = "down"
    cases = _cases(ADD, ADD_PAIRS[:2])
    with caplog.at_level(logging.WARNING, logger="arithlab.remote"):
        report, _ = run_remote_eval(_config(server), [("2D+", cases)], tmp_path / "t.jsonl")
    assert report.counts[("decomposition-fewshot", "2D+")] == (0, 0, 2)
    assert report.accuracy("decomposition-fewshot", "2D+") == 0.0


def test_transcript_contents_and_replay(server, tmp_path):
    server.mode = "failfor"
    server.fail_when = lambda prompt: "90 plus 9" in prompt
    tasks = [("2D+", _cases(ADD, ADD_PAIRS)), ("2Dx", _cases(MUL, [(7, 8), (9, 9)]))]
    cfg = _config(server, retries=0)
    report, path = run_remote_eval(cfg, tasks, tmp_path / "t.jsonl")

    lines = [json.loads(l) for l in open(path, encoding="utf-8")]
    assert lines[0]["type"] == "config"
    assert lines[0]["temperature"] == 0.7
    assert lines[0]["prompt_style"] == "decomposition-fewshot"
    records = lines[1:]
    assert len(records) == 8
    assert [r["index"] for r in records] == [0, 1, 2, 3, 4, 5, 0, 1]
    skipped = [r for r in records if r["verdict"] == "skipped"]
    assert len(skipped) == 1
    assert skipped[0]["n1"] == 90 and skipped[0]["response"] is None
    answered = records[0]
    assert answered["verdict"] == "correct"
    assert answered["prompt"] == build_fewshot_prompt(13, 44, ADD)
    assert answered["response"]["choices"][0]["text"] == " 57.\n"
    assert answered["extracted"] == 57

    replayed = replay_transcript(path)
    assert replayed == report
    assert replayed.counts == report.counts


def test_replay_is_offline(server, tmp_path):
    cases = _cases(SUB, [(81, 14), (40, 62)])
    report, path = run_remote_eval(_config(server), [("2D-", cases)], tmp_path / "t.jsonl")
    server.shutdown()
    server.server_close()
    assert replay_transcript(path) == report


def test_auth_header_from_environment(server, tmp_path, monkeypatch):
    monkeypatch.setenv("ARITHLAB_TEST_TOKEN", "sekrit")
    cfg = _config(server, auth_env="ARITHLAB_TEST_TOKEN")
    run_remote_eval(cfg, [("2D+", _cases(ADD, [(13, 44)]))], tmp_path / "t.jsonl")
    assert server.requests[0]["auth"] == "Bearer sekrit"


def test_missing_auth_fails_before_any_request(server, tmp_path, monkeypatch):
    monkeypatch.delenv("ARITHLAB_TEST_TOKEN", raising=False)
    cfg = _config(server, auth_env="ARITHLAB_TEST_TOKEN")
    with pytest.raises(RemoteError, match="ARITHLAB_TEST_TOKEN"):
        run_remote_eval(cfg, [("2D+", _cases(ADD, [(13, 44)]))], tmp_path / "t.jsonl")
    assert server.requests == []


def test_replay_rejects_headerless_transcript(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"type": "case", "index": 0}\n')
    with pytest.raises(RemoteError, match="config"):
        replay_transcript(path)
