import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from transduct.backends import HTTPBackend
from transduct.context import ExecutionContext, LLMConfig
from transduct.engine import OK, transduce
from transduct.schema import REAL, TEXT, Slot, TypeSchema

ANSWER = TypeSchema("Answer", (Slot("answer", TEXT), Slot("confidence", REAL, optional=True)))


class StubServer:
    def __init__(self, status=200, content='{"answer":"Rome","confidence":1.0}'):
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers["Content-Length"]))
                outer.requests.append({"path": self.path, "auth": self.headers.get("Authorization"),
                                       "body": json.loads(body)})
                payload = json.dumps({"choices": [{"message": {"content": content}}]}).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self.httpd = HTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/v1"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def test_request_shape_and_auth(monkeypatch):
    monkeypatch.setenv("MY_TOKEN", "sekret")
    with StubServer() as srv:
        cfg = LLMConfig(backend="http", model_id="qwen3-8b", endpoint=srv.url, auth_token_env="MY_TOKEN",
                        temperature=0.0, seed=11, max_output_tokens=256)
        ctx = ExecutionContext(llm=cfg, instructions="Answer briefly", retry_backoff=0)
        out, report = transduce(ANSWER, ["What is the capital of Italy?"], ctx)
    assert out.states == ({"answer": "Rome", "confidence": 1.0},)
    assert report.items[0].outcome == OK
    (req,) = srv.requests
    assert req["path"] == "/v1/chat/completions"
    assert req["auth"] == "Bearer sekret"
    body = req["body"]
    assert body["model"] == "qwen3-8b"
    assert body["temperature"] == 0.0 and body["max_tokens"] == 256
    assert body["response_format"] == {"type": "json_object"}
    assert [m["role"] for m in body["messages"]] == ["user"]
    assert body["messages"][0]["content"].startswith("SOURCE:\nWhat is the capital of Italy?")


def test_system_message_present_with_params():
    from transduct.prompt import PromptTemplate
    with StubServer() as srv:
        cfg = LLMConfig(backend="http", endpoint=srv.url, auth_token_env="")
        tpl = PromptTemplate("{input}", {"role": "Geographer"})
        transduce(ANSWER, ["Italy?"], ExecutionContext(llm=cfg, template=tpl, retry_backoff=0))
    msgs = srv.requests[0]["body"]["messages"]
    assert msgs[0] == {"role": "system", "content": "You are Geographer."}
    assert msgs[1]["role"] == "user" and srv.requests[0]["auth"] is None


def test_base_url_from_env(monkeypatch):
    with StubServer() as srv:
        monkeypatch.setenv("TRANSDUCT_BASE_URL", srv.url)
        out, _ = transduce(ANSWER, ["x"], ExecutionContext(llm=LLMConfig(backend="http"), retry_backoff=0))
    assert out[0]["answer"] == "Rome"


@pytest.mark.parametrize("status,error", [(429, "RateLimited"), (500, "TransportError")])
def test_http_errors_classified(status, error):
    with StubServer(status=status) as srv:
        cfg = LLMConfig(backend="http", endpoint=srv.url)
        ctx = ExecutionContext(llm=cfg, retry_backoff=0, max_retries_per_item=1)
        out, report = transduce(ANSWER, ["x"], ctx)
    assert out[0] == {}
    assert report.items[0].outcome == "failed" and report.items[0].error.startswith(error)
    assert len(srv.requests) == 2


def test_unreachable_endpoint_is_transport_error():
    ctx = ExecutionContext(llm=LLMConfig(backend="http", endpoint="http://127.0.0.1:9", timeout=2),
                           retry_backoff=0, max_retries_per_item=0)
    _, report = transduce(ANSWER, ["x"], ctx)
    assert report.items[0].error.startswith(("TransportError", "Timeout"))


def test_backend_resolved_per_config():
    assert isinstance(ExecutionContext(llm=LLMConfig(backend="http")).resolve_backend(), HTTPBackend)
