import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from rcl.errors import BudgetExceededError, LLMTransportError, MalformedToolCallError, PromptRenderError
from rcl.llm_backend import (
    SYSTEM_PROMPT,
    TEMPLATES,
    Conversation,
    FinalAnswer,
    HTTPChatBackend,
    PromptTemplate,
    RecordedBackend,
    ToolCall,
    parse_action,
    render_prompt,
    step,
)

from .conftest import FIXTURES


class TestPrompts:
    def test_initial_hides_metrics(self):
        text = render_prompt("initial", {"entry_trace": '{"span_id": "s1"}'})
        assert "recursively search for the traces" in text
        assert "Metric" not in text and '"agent": "metric"' not in text
        assert '"span_id": "s1"' in text and "Format Agent" in text

    def test_reflection_step1_excludes_format(self):
        text = render_prompt(TEMPLATES["reflection_step1"], {})
        assert "inspect more deeper to confirm" in text
        assert "Metrics Agent" in text and "Trace Agent" in text
        assert '"agent": "format"' not in text

    def test_final_review(self):
        text = render_prompt("final_review", {"think_process": "[user] hello"})
        assert "rethink the above think process" in text and "[user] hello" in text

    def test_missing_placeholder(self):
        with pytest.raises(PromptRenderError):
            render_prompt("initial", {})

    def test_initial_refuses_metric_leak(self):
        with pytest.raises(PromptRenderError):
            render_prompt("initial", {"entry_trace": "x", "agents": "Metrics Agent"})

    def test_template_metadata(self):
        t = PromptTemplate("final_review", "{think_process}")
        assert t.allowed_agents == ("format",) and t.placeholders == {"think_process"}

    def test_system_prompt(self):
        assert SYSTEM_PROMPT.startswith("You are a software operations engineer")


class TestParse:
    def test_embedded_json(self):
        a = parse_action({"content": 'I will look. {"agent": "trace", "arguments": {"span_id": "s1"}}'})
        assert a == ToolCall("trace", {"span_id": "s1"})

    def test_native_tool_call(self):
        msg = {"content": None, "tool_calls": [{"function": {"name": "Metrics Agent",
                                                             "arguments": '{"components": ["a"]}'}}]}
        assert parse_action(msg) == ToolCall("metric", {"components": ["a"]})

    def test_final_answer(self):
        assert parse_action({"content": "It is the cart service."}) == FinalAnswer("It is the cart service.")

    def test_skips_unrelated_json(self):
        a = parse_action({"content": '{"x": 1} then {"agent": "format", "arguments": {"root_cause": "a"}}'})
        assert a.agent == "format"

    @pytest.mark.parametrize("msg", [
        {"content": ""},
        {"tool_calls": [{"function": {"name": "trace", "arguments": "{oops"}}]},
        {"content": '{"agent": "trace", "arguments": [1]}'},
    ])
    def test_malformed(self, msg):
        with pytest.raises(MalformedToolCallError):
            parse_action(msg)


class TestStep:
    def conv(self, **kw):
        return Conversation.start("hi", **kw)

    def test_passthrough(self):
        be = RecordedBackend(['{"agent": "trace", "arguments": {"span_id": "s1"}}'])
        assert step(self.conv(), {"trace"}, be) == ToolCall("trace", {"span_id": "s1"})

    def test_unknown_agent_retried_then_error(self):
        be = RecordedBackend(['{"agent": "log", "arguments": {}}'] * 2)
        conv = self.conv()
        with pytest.raises(MalformedToolCallError, match="log"):
            step(conv, {"trace"}, be)
        assert len(be.requests) == 2
        assert "could not be used" in conv.messages[3]["content"]

    def test_retry_recovers(self):
        be = RecordedBackend(['{"agent": "metric", "arguments": {}}', '{"agent": "trace", "arguments": {}}'])
        assert step(self.conv(), {"trace", "format"}, be).agent == "trace"

    def test_final_answer(self):
        assert step(self.conv(), {"trace"}, RecordedBackend(["done"])) == FinalAnswer("done")

    def test_budget(self):
        conv = self.conv(max_steps=1)
        be = RecordedBackend(["a", "b"])
        step(conv, {"trace"}, be)
        with pytest.raises(BudgetExceededError):
            step(conv, {"trace"}, be)

    def test_exhausted_recording(self):
        with pytest.raises(LLMTransportError):
            step(self.conv(), {"trace"}, RecordedBackend([]))

    def test_transcript(self):
        conv = self.conv()
        step(conv, {"trace"}, RecordedBackend(["answer"]))
        assert conv.transcript() == "[user] hi\n[assistant] answer"


def test_fixture_file_loads():
    be = RecordedBackend.from_file(FIXTURES / "llm_fig2.json")
    assert be.remaining == 8


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.server.seen.append((body, self.headers.get("Authorization")))
        if self.path == "/bad":
            payload = b'{"nope": 1}'
        else:
            payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": "ok"}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    srv.seen = []
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield srv
    srv.shutdown()


class TestHTTP:
    def test_round_trip(self, chat_server):
        url = f"http://127.0.0.1:{chat_server.server_port}/v1/chat/completions"
        be = HTTPChatBackend(url, "m", "k")
        assert be.complete([{"role": "user", "content": "x"}]) == {"role": "assistant", "content": "ok"}
        body, auth = chat_server.seen[0]
        assert body["model"] == "m" and body["temperature"] == 0.0 and auth == "Bearer k"

    def test_bad_shape(self, chat_server):
        be = HTTPChatBackend(f"http://127.0.0.1:{chat_server.server_port}/bad", "m")
        with pytest.raises(LLMTransportError):
            be.complete([])

    def test_unreachable(self):
        with pytest.raises(LLMTransportError):
            HTTPChatBackend("http://127.0.0.1:9/x", "m", timeout=1).complete([])

    def test_from_env(self, monkeypatch):
        monkeypatch.delenv("RCL_LLM_ENDPOINT", raising=False)
        with pytest.raises(LLMTransportError):
            HTTPChatBackend.from_env()
        monkeypatch.setenv("RCL_LLM_ENDPOINT", "http://h/v1")
        monkeypatch.setenv("RCL_LLM_MODEL", "m")
        assert HTTPChatBackend.from_env().model == "m"
