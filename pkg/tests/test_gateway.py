from __future__ import annotations

import json

import pytest

from tsrefine.errors import AuthMissing, ReplayMiss, TransportExhausted
from tsrefine.gateway import ChatParams, ChatRequest, Gateway, chat_request, load_transcript


def simple_request(text="hello", temperature=0.2):
    return chat_request(
        [{"role": "system", "content": "sys"}, {"role": "user", "content": text}],
        ChatParams(temperature=temperature),
    )


def test_request_digest_stable_and_sensitive():
    a = simple_request("hello")
    b = simple_request("hello")
    c = simple_request("other")
    d = simple_request("hello", temperature=0.3)
    assert a.request_digest == b.request_digest
    assert a.request_digest != c.request_digest
    assert a.request_digest != d.request_digest


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest(messages=(), params=ChatParams())
    with pytest.raises(ValueError):
        chat_request([{"role": "robot", "content": "hi"}])
    with pytest.raises(ValueError):
        chat_request([{"role": "user", "content": 5}])


def test_mock_queue_pops_in_order():
    gw = Gateway(mode="mock", mock_queue=["one", "two"])
    assert gw.complete(simple_request("a")) == "one"
    assert gw.complete(simple_request("b")) == "two"
    with pytest.raises(ReplayMiss):
        gw.complete(simple_request("c"))


def test_mock_table_takes_priority():
    req = simple_request("keyed")
    gw = Gateway(mode="mock", mock_queue=["fallback"], mock_table={req.request_digest: "direct"})
    assert gw.complete(req) == "direct"
    assert gw.complete(simple_request("other")) == "fallback"


def test_replay_mode_and_miss(tmp_path):
    req = simple_request("played back")
    transcript = tmp_path / "t.ndjson"
    transcript.write_text(
        json.dumps({"request_digest": req.request_digest, "response_text": "stored"}) + "\n",
        encoding="utf-8",
    )
    gw = Gateway(mode="replay", transcript_path=transcript)
    assert gw.complete(req) == "stored"
    with pytest.raises(ReplayMiss):
        gw.complete(simple_request("never recorded"))


def test_replay_requires_transcript():
    with pytest.raises(ValueError):
        Gateway(mode="replay")


def test_load_transcript_first_occurrence_wins(tmp_path):
    path = tmp_path / "t.ndjson"
    path.write_text(
        json.dumps({"request_digest": "d1", "response_text": "first"})
        + "\n"
        + json.dumps({"request_digest": "d1", "response_text": "second"})
        + "\n",
        encoding="utf-8",
    )
    assert load_transcript(path) == {"d1": "first"}


class FakeResponse:
    def __init__(self, status_code, payload=None):
        self.status_code = status_code
        self._payload = payload or {}

    def json(self):
        if isinstance(self._payload, Exception):
            raise self._payload
        return self._payload


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers})
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def completion_body(text):
    return {
        "choices": [{"message": {"content": text}}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 5},
    }


def make_live_gateway(responses, **kwargs):
    sleeps = []
    session = FakeSession(responses)
    gw = Gateway(
        mode=kwargs.pop("mode", "live"),
        endpoint="https://example.invalid/v1/chat",
        api_key="sk-test-000",
        model_name="test-model",
        session=session,
        sleep=sleeps.append,
        **kwargs,
    )
    return gw, session, sleeps


def test_live_success_builds_wire_shape():
    gw, session, _ = make_live_gateway([FakeResponse(200, completion_body("answer"))])
    out = gw.complete(simple_request("q"))
    assert out == "answer"
    call = session.calls[0]
    assert call["json"]["model"] == "test-model"
    assert call["json"]["messages"][1] == {"role": "user", "content": "q"}
    assert call["json"]["temperature"] == 0.2
    assert call["headers"]["Authorization"] == "Bearer sk-test-000"


def test_live_retries_on_5xx_then_succeeds():
    gw, session, sleeps = make_live_gateway(
        [FakeResponse(500), FakeResponse(503), FakeResponse(200, completion_body("ok"))]
    )
    assert gw.complete(simple_request("q")) == "ok"
    assert len(session.calls) == 3
    assert sleeps == [1.0, 2.0]


def test_live_exhausts_after_three_attempts():
    import requests

    gw, session, sleeps = make_live_gateway(
        [requests.ConnectionError(), FakeResponse(500), requests.Timeout()]
    )
    with pytest.raises(TransportExhausted):
        gw.complete(simple_request("q"))
    assert len(session.calls) == 3
    assert sleeps == [1.0, 2.0, 4.0]


def test_live_non_retryable_4xx_fails_fast():
    gw, session, sleeps = make_live_gateway([FakeResponse(401)])
    with pytest.raises(TransportExhausted):
        gw.complete(simple_request("q"))
    assert len(session.calls) == 1 and sleeps == []


def test_live_malformed_body_fails():
    gw, _, _ = make_live_gateway([FakeResponse(200, {"choices": []})])
    with pytest.raises(TransportExhausted):
        gw.complete(simple_request("q"))


def test_auth_missing(monkeypatch):
    monkeypatch.delenv("LLM_ENDPOINT", raising=False)
    monkeypatch.delenv("LLM_API_KEY", raising=False)
    gw = Gateway(mode="live")
    with pytest.raises(AuthMissing):
        gw.complete(simple_request("q"))
    gw = Gateway(mode="live", endpoint="https://example.invalid")
    with pytest.raises(AuthMissing):
        gw.complete(simple_request("q"))


def test_record_mode_writes_transcript_without_credentials(tmp_path):
    transcript = tmp_path / "rec.ndjson"
    gw, _, _ = make_live_gateway(
        [FakeResponse(200, completion_body("recorded"))],
        mode="record",
        transcript_path=transcript,
    )
    req = simple_request("to be recorded")
    assert gw.complete(req) == "recorded"
    raw = transcript.read_text(encoding="utf-8")
    entry = json.loads(raw)
    assert entry["request_digest"] == req.request_digest
    assert entry["response_text"] == "recorded"
    assert entry["metadata"]["prompt_tokens"] == 10
    assert "sk-test-000" not in raw
    assert "Authorization" not in raw

    # the recorded transcript replays the same request
    replay = Gateway(mode="replay", transcript_path=transcript)
    assert replay.complete(req) == "recorded"


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        Gateway(mode="turbo")
