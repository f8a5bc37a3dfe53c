from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from refertrack.matcher import OfflineEncoder

# criterion number -> (passed, message); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


class MockEndpoint:
    """Scriptable OpenAI-compatible server on localhost.

    ``script[path]`` is a list of status codes served before falling back
    to 200. ``requests`` records (path, payload) for every call.
    """

    def __init__(self):
        self.script: dict[str, list[int]] = {}
        self.requests: list[tuple[str, dict]] = []
        self.auth: list[str | None] = []
        self.caption = "a black car"
        self.encoder = OfflineEncoder()
        self._lock = threading.Lock()
        mock = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                payload = json.loads(body or b"{}")
                path = self.path.split("/")[-1]
                with mock._lock:
                    mock.requests.append((path, payload))
                    mock.auth.append(self.headers.get("Authorization"))
                    queue = mock.script.get(path, [])
                    status = queue.pop(0) if queue else 200
                if status != 200:
                    self._send(status, {"error": {"message": f"scripted {status}"}})
                elif path == "completions":
                    text = mock.caption(payload) if callable(mock.caption) else mock.caption
                    self._send(200, {"choices": [{"message": {"role": "assistant", "content": text}}]})
                elif path == "embeddings":
                    vecs = mock.encoder.encode(payload["input"])
                    data = [{"index": i, "embedding": v.tolist()} for i, v in enumerate(vecs)]
                    self._send(200, {"data": data})
                else:
                    self._send(404, {"error": "unknown path"})

            def _send(self, status, doc):
                raw = json.dumps(doc).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.base_url = f"http://127.0.0.1:{self.server.server_address[1]}/v1"
        self._thread = threading.Thread(target=self.server.serve_forever, args=(0.05,), daemon=True)
        self._thread.start()

    def calls(self, path: str) -> int:
        return sum(1 for p, _ in self.requests if p == path)

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def mock_endpoint():
    m = MockEndpoint()
    yield m
    m.close()


@pytest.fixture
def fast_endpoint(mock_endpoint, monkeypatch):
    """EndpointConfig factory pointed at the mock with negligible backoff."""
    from refertrack.remote import EndpointConfig

    monkeypatch.setenv("REFERTRACK_TEST_KEY", "sk-test")

    def make(model="mock-model", **kw):
        kw.setdefault("backoff_base", 0.001)
        return EndpointConfig(base_url=mock_endpoint.base_url, model=model,
                              api_key_env="REFERTRACK_TEST_KEY", timeout=5.0, **kw)

    return make


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, msg = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {msg}")
