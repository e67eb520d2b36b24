"""Scriptable in-process chat-completions server for offline tests.

Replies are looked up by a digest of the request messages; anything not
scripted falls through to an optional responder callable. A queue of status
codes can be injected to simulate transient failures.
"""

from __future__ import annotations

import hashlib
import json
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Iterable

Messages = list[dict]


def request_digest(messages: Messages) -> str:
    return hashlib.sha256(json.dumps(messages, sort_keys=True).encode("utf-8")).hexdigest()


def echo_responder(messages: Messages) -> str:
    return messages[-1]["content"]


class MockChatServer:
    def __init__(self, script: dict[str, str] | None = None,
                 responder: Callable[[Messages], str] | None = None,
                 failures: Iterable[int] = ()):
        self.script = dict(script or {})
        self.responder = responder
        self.failures = deque(failures)
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        if self._httpd is None:
            raise RuntimeError("server not started")
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    def add(self, messages: Messages, reply: str) -> None:
        self.script[request_digest(messages)] = reply

    def _handle(self, body: dict) -> tuple[int, dict]:
        with self._lock:
            self.requests.append(body)
            if self.failures:
                code = self.failures.popleft()
                return code, {"error": {"message": f"injected failure {code}"}}
        messages = body.get("messages", [])
        reply = self.script.get(request_digest(messages))
        if reply is None and self.responder is not None:
            reply = self.responder(messages)
        if reply is None:
            return 404, {"error": {"message": "no scripted reply for request"}}
        return 200, {
            "id": "mock",
            "object": "chat.completion",
            "model": body.get("model", "mock"),
            "choices": [{"index": 0, "finish_reason": "stop",
                         "message": {"role": "assistant", "content": reply}}],
            "usage": {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0},
        }

    def start(self) -> MockChatServer:
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length) or b"{}")
                except json.JSONDecodeError:
                    code, payload = 400, {"error": {"message": "bad json"}}
                else:
                    try:
                        code, payload = server._handle(body)
                    except Exception as exc:  # responder bugs surface as 500s
                        code, payload = 500, {"error": {"message": repr(exc)}}
                data = json.dumps(payload).encode("utf-8")
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    def __enter__(self) -> MockChatServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
