"""Tests for the chat client: serialization, retries, mock transport, gating."""

import json
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest

from rlvrkit.client import (
    ChatClient,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    EndpointConfig,
    HttpTransport,
    ImagePart,
    MockScriptExhausted,
    ProtocolError,
    TextPart,
    TransientFailure,
    TransportError,
    chat_complete,
    install_mock,
    text_message,
    user_message,
)

CFG = EndpointConfig(base_url="http://example.test/v1", max_retries=3)


def no_sleep(_delay):
    pass


def simple_request(text="hello"):
    return ChatRequest(model="m", messages=(user_message(text),))


class TestRequestModel:
    def test_roundtrip_equality(self):
        req = ChatRequest(
            model="gen",
            messages=(
                text_message("system", "be concise"),
                user_message("what is this?", images=["http://img/1.png", "data:image/png;base64,AAA"]),
                text_message("assistant", "a scan"),
                user_message("which side?"),
            ),
            temperature=0.3,
            max_tokens=128,
        )
        assert ChatRequest.from_payload(req.to_payload()) == req

    def test_payload_wire_shape(self):
        payload = simple_request("hi").to_payload()
        assert payload["messages"][0]["content"][-1] == {"type": "text", "text": "hi"}
        req = ChatRequest(model="m", messages=(user_message("q", ["u://x"]),))
        parts = req.to_payload()["messages"][0]["content"]
        assert parts[0] == {"type": "image_url", "image_url": {"url": "u://x"}}

    def test_plain_string_content_accepted_on_parse(self):
        payload = {"model": "m", "messages": [{"role": "user", "content": "hi"}]}
        req = ChatRequest.from_payload(payload)
        assert req.messages[0].parts == (TextPart("hi"),)

    def test_validation(self):
        with pytest.raises(ValueError):
            ChatRequest(model="m", messages=())
        with pytest.raises(ValueError):
            ChatMessage("assistant", (ImagePart("u://x"),))
        with pytest.raises(ValueError):
            ChatMessage("robot", (TextPart("hi"),))
        with pytest.raises(ValueError):
            ChatRequest(model="m", messages=(user_message("x"),), max_tokens=0)


class TestMockTransport:
    def test_scripted_contents_in_order(self):
        mock = install_mock([f"<answer>{i}</answer>" for i in range(10)])
        client = ChatClient(CFG, transport=mock, sleep=no_sleep)
        got = [client.complete(simple_request()).content for _ in range(10)]
        assert got == [f"<answer>{i}</answer>" for i in range(10)]

    def test_mock_echo(self):
        mock = install_mock(["<answer>B</answer>"])
        resp = chat_complete(simple_request(), CFG, transport=mock)
        assert resp.content == "<answer>B</answer>"

    def test_judge_json_verbatim(self):
        payload = '{"score": 8, "justification": "clear reasoning"}'
        mock = install_mock([payload])
        assert chat_complete(simple_request(), CFG, transport=mock).content == payload

    def test_exhausted_script_is_test_error(self):
        mock = install_mock([])
        client = ChatClient(CFG, transport=mock, sleep=no_sleep)
        with pytest.raises(MockScriptExhausted):
            client.complete(simple_request())

    def test_records_requests(self):
        mock = install_mock(["a", "b"])
        client = ChatClient(CFG, transport=mock, sleep=no_sleep)
        client.complete(simple_request("one"))
        client.complete(simple_request("two"))
        assert [r.text() for r in mock.requests] == ["one", "two"]


class TestRetries:
    def test_fail_twice_then_succeed(self):
        mock = install_mock(
            [TransientFailure("timeout"), TransientFailure("HTTP 503"), "ok"]
        )
        client = ChatClient(CFG, transport=mock, sleep=no_sleep)
        assert client.complete(simple_request()).content == "ok"
        assert mock.calls == 3

    def test_exhaustion_reports_all_attempts(self):
        cfg = EndpointConfig(base_url="http://x", max_retries=2)
        mock = install_mock([TransientFailure("boom")] * 3)
        client = ChatClient(cfg, transport=mock, sleep=no_sleep)
        with pytest.raises(TransportError) as excinfo:
            client.complete(simple_request())
        assert len(excinfo.value.attempts) == 3
        assert "3 attempts" in str(excinfo.value)

    def test_retry_count_never_exceeds_budget(self):
        cfg = EndpointConfig(base_url="http://x", max_retries=0)
        mock = install_mock([TransientFailure("once")])
        client = ChatClient(cfg, transport=mock, sleep=no_sleep)
        with pytest.raises(TransportError):
            client.complete(simple_request())
        assert mock.calls == 1

    def test_protocol_error_not_retried(self):
        mock = install_mock([ProtocolError("bad body"), "never reached"])
        client = ChatClient(CFG, transport=mock, sleep=no_sleep)
        with pytest.raises(ProtocolError):
            client.complete(simple_request())
        assert mock.calls == 1

    def test_backoff_grows_geometrically_up_to_cap(self):
        cfg = EndpointConfig(
            base_url="http://x", max_retries=8, backoff_base=0.5, backoff_cap=4.0
        )
        slept = []
        mock = install_mock([TransientFailure("x")] * 9)
        client = ChatClient(cfg, transport=mock, sleep=slept.append)
        with pytest.raises(TransportError):
            client.complete(simple_request())
        assert len(slept) == 8
        for attempt, delay in enumerate(slept):
            ceiling = min(4.0, 0.5 * 2**attempt)
            assert 0.5 * ceiling <= delay <= ceiling


class TestConcurrencyGate:
    def test_in_flight_never_exceeds_max_concurrency(self):
        cfg = EndpointConfig(base_url="http://x", max_concurrency=2, max_retries=0)
        mock = install_mock(["ok"] * 16, delay=0.01)
        client = ChatClient(cfg, transport=mock, sleep=no_sleep)
        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(lambda _: client.complete(simple_request()), range(16)))
        assert mock.calls == 16
        assert 1 <= mock.max_in_flight <= 2


def _http_transport_with(handler, cfg=CFG):
    http = httpx.Client(transport=httpx.MockTransport(handler))
    return HttpTransport(cfg, http=http)


class TestHttpTransport:
    def test_success_parses_openai_shape(self):
        captured = {}

        def handler(request):
            captured["url"] = str(request.url)
            captured["auth"] = request.headers.get("authorization")
            captured["body"] = json.loads(request.content)
            return httpx.Response(
                200,
                json={
                    "choices": [
                        {"message": {"content": "fine"}, "finish_reason": "stop"}
                    ],
                    "usage": {"total_tokens": 3},
                },
            )

        cfg = EndpointConfig(base_url="http://example.test/v1", api_key="sk-test")
        resp = _http_transport_with(handler, cfg)(simple_request("ping"))
        assert resp == ChatResponse("fine", "stop", {"total_tokens": 3})
        assert captured["url"] == "http://example.test/v1/chat/completions"
        assert captured["auth"] == "Bearer sk-test"
        assert captured["body"]["model"] == "m"

    def test_api_key_env_override(self, monkeypatch):
        monkeypatch.setenv("RLVRKIT_API_KEY", "sk-env")
        seen = {}

        def handler(request):
            seen["auth"] = request.headers.get("authorization")
            return httpx.Response(
                200, json={"choices": [{"message": {"content": "x"}}]}
            )

        cfg = EndpointConfig(base_url="http://e", api_key="sk-file")
        _http_transport_with(handler, cfg)(simple_request())
        assert seen["auth"] == "Bearer sk-env"

    @pytest.mark.parametrize("status", [429, 500, 503])
    def test_retryable_statuses(self, status):
        transport = _http_transport_with(lambda _req: httpx.Response(status))
        with pytest.raises(TransientFailure):
            transport(simple_request())

    def test_client_4xx_is_protocol_error(self):
        transport = _http_transport_with(
            lambda _req: httpx.Response(400, json={"error": "bad"})
        )
        with pytest.raises(ProtocolError):
            transport(simple_request())

    def test_malformed_body_is_protocol_error(self):
        transport = _http_transport_with(
            lambda _req: httpx.Response(200, json={"unexpected": True})
        )
        with pytest.raises(ProtocolError):
            transport(simple_request())

    def test_timeout_is_transient(self):
        def handler(_req):
            raise httpx.ConnectTimeout("slow")

        transport = _http_transport_with(handler)
        with pytest.raises(TransientFailure):
            transport(simple_request())


class TestEndpointConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            EndpointConfig(base_url="http://x", timeout=0)
        with pytest.raises(ValueError):
            EndpointConfig(base_url="http://x", max_retries=-1)
        with pytest.raises(ValueError):
            EndpointConfig(base_url="http://x", max_concurrency=0)
