import hashlib
import json
import logging

import httpx
import pytest

from prism.dataset import ImagePayload
from prism.endpoints import (
    REFUSAL_SENTENCE,
    EndpointClient,
    EndpointConfig,
    GenerationParams,
    MockBackend,
    TokenBucket,
    make_mock,
    mock_endpoint,
    question_hash,
)
from prism.errors import ConfigError, PermanentError, TransientError

from fakeserver import ChatServer
from conftest import fake_image

IMG = ImagePayload(data=fake_image("img1"))


def live(server, name="live", modality="text", **kw):
    kw.setdefault("backoff_base", 0.001)
    kw.setdefault("rate_limit", 1e6)
    return EndpointConfig(name=name, modality=modality, base_url=server.url, model_id="m", **kw)


def test_generation_params_defaults():
    p = GenerationParams()
    assert p.max_output_tokens == 512
    assert p.decoding == "greedy"
    with pytest.raises(ValueError):
        GenerationParams(max_output_tokens=0)


def test_endpoint_config_invariants():
    with pytest.raises(ConfigError):
        EndpointConfig(name="x", base_url="http://h", max_retries=-1)
    with pytest.raises(ConfigError):
        EndpointConfig(name="x", base_url="http://h", rate_limit=0)
    with pytest.raises(ConfigError):
        EndpointConfig(name="x")


def test_mock_echo_vision_returns_instruction():
    ep = mock_endpoint("v", "echo", "vision")
    with EndpointClient() as c:
        reply = c.perceive(ep, IMG, "Describe it.")
    assert reply.text == "Describe it."
    assert reply.finish_reason == "stop"


def test_mock_text_echo_and_fixed():
    with EndpointClient() as c:
        assert c.complete(mock_endpoint("e", "echo"), "x").text == "x"
        assert c.complete(mock_endpoint("f", "fixed:C"), "anything").text == "C"
        assert c.complete(mock_endpoint("h", "fixed:hello"), "y").text == "hello"


def test_mock_refuse():
    with EndpointClient() as c:
        text = c.complete(mock_endpoint("r", "refuse"), "q").text
    assert text == REFUSAL_SENTENCE
    assert "i'm sorry" in text.lower()


def test_mock_keyed_by_image_digest(tmp_path):
    m = tmp_path / "map.json"
    m.write_text(json.dumps({IMG.digest: "a red car"}))
    ep = mock_endpoint("k", f"keyed:{m}", "vision")
    with EndpointClient() as c:
        assert c.perceive(ep, IMG, "Describe.").text == "a red car"
        miss = c.perceive(ep, ImagePayload(data=b"other"), "Describe.")
    assert miss.text == ""
    assert miss.finish_reason != "stop"


def test_mock_keyed_by_question_hash():
    backend = make_mock("keyed", mapping={question_hash("What is it?"): "B"})
    text, _ = backend.reply("preamble\nDescription: d\nQuestion: What is it?\n\nOptions:\nA. x", [])
    assert text == "B"


def test_unknown_mock_spec():
    with pytest.raises(ConfigError):
        make_mock("telepathy")


def test_mock_is_deterministic():
    b = MockBackend("echo-description")
    prompt = "P\nDescription: line one\nline two\nQuestion: q?"
    assert b.reply(prompt, []) == b.reply(prompt, []) == ("line one\nline two", "stop")


def test_request_body_contract():
    with ChatServer() as srv, EndpointClient() as c:
        ep = live(srv, modality="vision")
        c.perceive(ep, IMG, "Describe the image.")
        c.complete(ep, "plain prompt")
        bodies = srv.bodies()
    vision, text = bodies
    assert vision["max_tokens"] == 512
    assert vision["temperature"] == 0
    assert vision["model"] == "m"
    parts = vision["messages"][0]["content"]
    assert parts[0] == {"type": "text", "text": "Describe the image."}
    assert parts[1]["image_url"]["url"] == "data:image/png;base64," + IMG.b64()
    assert text["messages"] == [{"role": "user", "content": "plain prompt"}]
    for b in bodies:
        assert b["max_tokens"] == 512 and b["temperature"] == 0


def test_custom_max_tokens_field_and_stop():
    with ChatServer() as srv, EndpointClient() as c:
        ep = live(srv, max_tokens_field="max_output_tokens",
                  params=GenerationParams(max_output_tokens=64, stop_sequences=("\n\n",)))
        c.complete(ep, "x")
        body = srv.bodies()[0]
    assert body["max_output_tokens"] == 64
    assert body["stop"] == ["\n\n"]


def test_retry_429_then_success():
    with ChatServer(script=[429, 429]) as srv, EndpointClient() as c:
        reply = c.complete(live(srv, max_retries=3), "hi")
        assert reply.text == "hi"
        assert srv.count == 3
        assert c.request_counts["live"] == 3


def test_retries_exhausted():
    with ChatServer(script=[503, 503, 503, 503]) as srv, EndpointClient() as c:
        with pytest.raises(TransientError):
            c.complete(live(srv, max_retries=2), "hi")
        assert srv.count == 3


def test_zero_retries():
    with ChatServer(script=[500]) as srv, EndpointClient() as c:
        with pytest.raises(TransientError):
            c.complete(live(srv, max_retries=0), "hi")
        assert srv.count == 1


def test_client_error_is_permanent():
    with ChatServer(script=[401]) as srv, EndpointClient() as c:
        with pytest.raises(PermanentError):
            c.complete(live(srv, max_retries=5), "hi")
        assert srv.count == 1


def test_dropped_connection_is_transient_and_retried():
    with ChatServer(script=["drop"]) as srv, EndpointClient() as c:
        assert c.complete(live(srv, max_retries=1), "ok").text == "ok"
        assert srv.count == 2
    with ChatServer(script=["drop", "drop"]) as srv, EndpointClient() as c:
        with pytest.raises(TransientError):
            c.complete(live(srv, max_retries=1), "ok")


def test_timeout_is_transient():
    with ChatServer(script=[("sleep", 0.5)]) as srv, EndpointClient() as c:
        with pytest.raises(TransientError):
            c.complete(live(srv, max_retries=0, timeout=0.1), "x")


def test_backoff_schedule():
    sleeps = []
    with ChatServer(script=[429, 500, 502]) as srv, EndpointClient(sleep=sleeps.append, seed=1) as c:
        c.complete(live(srv, max_retries=3, backoff_base=1.0), "x")
    assert len(sleeps) == 3
    for attempt, s in enumerate(sleeps):
        base = 2 ** attempt
        assert 0.8 * base <= s <= 1.2 * base


def test_temperature_rejection_falls_back(caplog):
    class Picky(MockBackend):
        def __call__(self, request):
            body = json.loads(request.content)
            if "temperature" in body:
                return httpx.Response(400, json={"error": "temperature is not supported"})
            return super().__call__(request)

    backend = Picky("fixed:done")
    ep = EndpointConfig(name="p", base_url="http://picky.invalid", rate_limit=1e6)
    with caplog.at_level(logging.WARNING), EndpointClient(transports={"p": httpx.MockTransport(backend)}) as c:
        assert c.complete(ep, "x").text == "done"
        assert c.complete(ep, "y").text == "done"
        assert any("temperature" in w for w in c.warnings)
    assert [("temperature" in b) for b in backend.requests] == [False, False]
    assert "temperature" in caplog.text


def test_credentials_only_in_headers(monkeypatch, caplog):
    monkeypatch.setenv("PRISM_TEST_KEY", "sk-secret-value")
    with caplog.at_level(logging.DEBUG, logger="prism"):
        with ChatServer() as srv, EndpointClient() as c:
            ep = live(srv, credential="PRISM_TEST_KEY", modality="vision")
            c.perceive(ep, IMG, "Describe.")
            entry = srv.log[0]
    assert entry["headers"]["Authorization"] == "Bearer sk-secret-value"
    assert "sk-secret-value" not in json.dumps(entry["body"])
    assert "sk-secret-value" not in caplog.text
    assert "sk-secret-value" not in json.dumps(ep.fingerprint())


def test_missing_credential_env(monkeypatch):
    monkeypatch.delenv("PRISM_NOPE", raising=False)
    ep = EndpointConfig(name="x", base_url="http://h.invalid", credential="PRISM_NOPE")
    with EndpointClient() as c, pytest.raises(ConfigError):
        c.complete(ep, "x")


def test_perceive_requires_vision():
    with EndpointClient() as c, pytest.raises(ConfigError):
        c.perceive(mock_endpoint("t", "echo", "text"), IMG, "x")


def test_token_bucket_spacing_fake_clock():
    now = [0.0]
    waits = []

    def sleep(s):
        waits.append(s)
        now[0] += s

    bucket = TokenBucket(120, clock=lambda: now[0], sleep=sleep)
    for _ in range(5):
        bucket.acquire()
    assert waits == pytest.approx([0.5, 0.5, 0.5, 0.5])


def test_rate_limit_against_server_timestamps():
    rpm = 600  # one request per 0.1 s
    with ChatServer() as srv, EndpointClient() as c:
        ep = live(srv, rate_limit=rpm)
        for i in range(6):
            c.complete(ep, str(i))
        times = [e["t"] for e in srv.log]
    gaps = [b - a for a, b in zip(times, times[1:])]
    assert min(gaps) >= 0.1 * 0.9
    assert (times[-1] - times[0]) / len(gaps) == pytest.approx(0.1, rel=0.1)


def test_rate_limit_shared_across_threads():
    from concurrent.futures import ThreadPoolExecutor
    with ChatServer() as srv, EndpointClient() as c:
        ep = live(srv, rate_limit=1200)  # 0.05 s spacing
        with ThreadPoolExecutor(4) as pool:
            list(pool.map(lambda i: c.complete(ep, str(i)), range(8)))
        times = sorted(e["t"] for e in srv.log)
    assert times[-1] - times[0] >= 7 * 0.05 * 0.9


def test_empty_stop_reply_is_not_stop():
    with EndpointClient() as c:
        reply = c.complete(mock_endpoint("f", "fixed:"), "x")
    assert reply.text == ""
    assert reply.finish_reason != "stop"


def test_trailing_whitespace_trimmed_only():
    with EndpointClient() as c:
        reply = c.complete(mock_endpoint("f", "fixed:  A. yes \n\n"), "x")
    assert reply.text == "  A. yes"
