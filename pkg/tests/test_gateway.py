import json
import threading

import httpx
import pytest
from hypothesis import given, strategies as st

from avsql.gateway import (AGENT_ROLES, BackendUnavailable, ChatParams, ChatRequest, ChatResponse, FunctionBackend,
                           Gateway, GatewayError, OpenAICompatBackend, PromptTooLong,
                           RecordingBackend, ReplayBackend, ReplayMissError, Route, Usage,
                           UsageLedger, cassette_entry, single_backend_gateway)

SYS = {"role": "system", "content": "be brief"}


def _msgs(text):
    return [SYS, {"role": "user", "content": text}]


def _cassette(tmp_path, pairs, model="m"):
    path = tmp_path / "c.jsonl"
    with path.open("w") as fh:
        for role, text, reply in pairs:
            req = ChatRequest(role, _msgs(text), ChatParams(model))
            resp = {"content": reply, "usage": {"input_tokens": 10, "output_tokens": 2}}
            fh.write(json.dumps({"key": req.cache_key(), "response": resp}) + "\n")
    return path


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("rewriter", [])
    with pytest.raises(ValueError, match="system"):
        ChatRequest("rewriter", [{"role": "user", "content": "hi"}])
    with pytest.raises(ValueError):
        ChatRequest("oracle", _msgs("hi"))


def test_cache_key_depends_on_role_messages_and_model_only():
    a = ChatRequest("planner", _msgs("q"), ChatParams("m", temperature=1.0))
    assert a.cache_key() == ChatRequest("planner", _msgs("q"), ChatParams("m", 0.2)).cache_key()
    assert a.cache_key() != ChatRequest("revisor", _msgs("q"), ChatParams("m")).cache_key()
    assert a.cache_key() != ChatRequest("planner", _msgs("q2"), ChatParams("m")).cache_key()
    assert a.cache_key() != ChatRequest("planner", _msgs("q"), ChatParams("m2")).cache_key()
    assert len(a.cache_key()) == 64


def test_replay_hit_is_verbatim_and_deterministic(tmp_path):
    gw = single_backend_gateway(ReplayBackend(_cassette(tmp_path, [("planner", "q", "PLAN")])), "m")
    first, second = gw.chat("planner", _msgs("q")), gw.chat("planner", _msgs("q"))
    assert first.content == second.content == "PLAN"
    assert first.usage == Usage(10, 2, False)


def test_replay_miss_names_hash(tmp_path):
    gw = single_backend_gateway(ReplayBackend(_cassette(tmp_path, [])), "m")
    key = ChatRequest("planner", _msgs("other"), ChatParams("m")).cache_key()
    with pytest.raises(ReplayMissError) as info:
        gw.chat("planner", _msgs("other"))
    assert info.value.key == key and key in str(info.value)


def test_malformed_cassette(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json}\n")
    with pytest.raises(GatewayError, match="malformed"):
        ReplayBackend(bad)
    with pytest.raises(GatewayError, match="not found"):
        ReplayBackend(tmp_path / "absent.jsonl")


def test_empty_ledger_is_all_zero():
    doc = UsageLedger().snapshot()
    assert doc["totals"] == {"calls": 0, "input_tokens": 0, "output_tokens": 0, "wall_ms": 0}
    assert all(r["token_pct"] == 0.0 for r in doc["roles"].values())


def test_ledger_additivity():
    ledger = UsageLedger()
    for _ in range(3):
        ledger.record("view_generator", Usage(10, 0), 1)
    row = ledger.snapshot()["roles"]["view_generator"]
    assert (row["calls"], row["input_tokens"]) == (3, 30)


@given(st.lists(st.tuples(st.sampled_from(AGENT_ROLES), st.integers(0, 500),
                          st.integers(0, 500), st.integers(0, 50)), max_size=30))
def test_ledger_totals_match_independent_sums(calls):
    ledger = UsageLedger()
    for role, i, o, w in calls:
        ledger.record(role, Usage(i, o), w)
    doc = ledger.snapshot()
    assert doc["totals"]["input_tokens"] == sum(c[1] for c in calls)
    assert doc["totals"]["output_tokens"] == sum(c[2] for c in calls)
    assert doc["totals"]["calls"] == len(calls)
    for role in AGENT_ROLES:
        mine = [c for c in calls if c[0] == role]
        assert doc["roles"][role]["input_tokens"] == sum(c[1] for c in mine)
    if any(c[1] + c[2] for c in calls):
        assert abs(sum(r["token_pct"] for r in doc["roles"].values()) - 100.0) <= 0.1


def test_ledger_concurrent_records():
    gw = single_backend_gateway(FunctionBackend(lambda r: "ok"))
    threads = [threading.Thread(target=lambda: [gw.chat("revisor", _msgs("x")) for _ in range(50)])
               for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert gw.ledger_report()["roles"]["revisor"]["calls"] == 400


def test_fork_has_fresh_ledger():
    gw = single_backend_gateway(FunctionBackend(lambda r: "ok"))
    gw.chat("planner", _msgs("x"))
    assert gw.fork().ledger_report()["totals"]["calls"] == 0


def test_per_role_routing():
    a, b = FunctionBackend(lambda r: "A", "a"), FunctionBackend(lambda r: "B", "b")
    gw = Gateway({"planner": Route(a, "small")}, default=Route(b, "large"))
    assert gw.chat("planner", _msgs("x")).content == "A"
    assert gw.chat("revisor", _msgs("x")).content == "B"
    assert gw.backend_ids()["planner"] == {"backend": "a", "model": "small"}
    with pytest.raises(GatewayError):
        Gateway({}).chat("planner", _msgs("x"))


def test_context_limit_enforced():
    gw = single_backend_gateway(FunctionBackend(lambda r: "ok"), context_limit=10)
    with pytest.raises(PromptTooLong):
        gw.chat("planner", _msgs("x" * 200))


def test_function_backend_usage_is_estimated():
    resp = single_backend_gateway(FunctionBackend(lambda r: "abcdefgh")).chat("planner", _msgs("q"))
    assert resp.usage.estimated and resp.usage.output_tokens == 2


def _openai(handler, **kw):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return OpenAICompatBackend("http://llm.local/v1", "AVSQL_TEST_KEY", backoff_s=0.0,
                               client=client, **kw)


def test_openai_retries_transient_failures(monkeypatch):
    monkeypatch.setenv("AVSQL_TEST_KEY", "sk-test")
    seen = []

    def handler(request):
        seen.append(request)
        if len(seen) == 1:
            raise httpx.ConnectError("boom")
        if len(seen) == 2:
            return httpx.Response(503)
        body = json.loads(request.content)
        assert body["model"] == "gpt-x" and body["temperature"] == 1.0
        return httpx.Response(200, json={"choices": [{"message": {"content": "hi"}}],
                                         "usage": {"prompt_tokens": 7, "completion_tokens": 1}})
    gw = single_backend_gateway(_openai(handler), "gpt-x")
    resp = gw.chat("planner", _msgs("q"))
    assert resp.content == "hi" and resp.usage == Usage(7, 1, False)
    assert seen[-1].headers["authorization"] == "Bearer sk-test"
    assert str(seen[-1].url) == "http://llm.local/v1/chat/completions"


def test_openai_gives_up_after_three_retries():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(429)
    with pytest.raises(BackendUnavailable):
        single_backend_gateway(_openai(handler)).chat("planner", _msgs("q"))
    assert len(calls) == 4


def test_openai_client_error_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad request")
    with pytest.raises(GatewayError, match="400"):
        single_backend_gateway(_openai(handler)).chat("planner", _msgs("q"))
    assert len(calls) == 1


def test_openai_missing_usage_is_estimated():
    def handler(request):
        return httpx.Response(200, json={"choices": [{"message": {"content": "abcd"}}]})
    resp = single_backend_gateway(_openai(handler)).chat("planner", _msgs("q"))
    assert resp.usage.estimated and resp.usage.output_tokens == 1


def test_recording_round_trips_through_replay(tmp_path, monkeypatch):
    monkeypatch.setenv("AVSQL_TEST_KEY", "sk-secret")

    def handler(request):
        return httpx.Response(200, json={"choices": [{"message": {"content": "rec"}}]})
    path = tmp_path / "rec.jsonl"
    live = single_backend_gateway(RecordingBackend(_openai(handler), path), "m")
    live.chat("rewriter", _msgs("q"))
    assert "sk-secret" not in path.read_text()
    replay = single_backend_gateway(ReplayBackend(path), "m")
    assert replay.chat("rewriter", _msgs("q")).content == "rec"


def test_replay_wall_time_comes_from_cassette(tmp_path):
    req = ChatRequest("planner", _msgs("q"), ChatParams("m"))
    path = tmp_path / "c.jsonl"
    entry = cassette_entry(req, ChatResponse("x", Usage(1, 1), latency_ms=42))
    path.write_text(json.dumps(entry) + "\n")
    gw = single_backend_gateway(ReplayBackend(path), "m")
    gw.chat("planner", _msgs("q"))
    assert gw.ledger_report()["roles"]["planner"]["wall_ms"] == 42
